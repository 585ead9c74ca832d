#pragma once

#include <filesystem>
#include <vector>

#include "cryoar/fourier.hpp"
#include "cryoar/random.hpp"

namespace cryoar {

/// Isotropic CTF parameters. Defocus in Angstrom (positive = underfocus),
/// Cs in mm, phase shift in radians.
struct CtfParams {
    double voltage_kv = 300.0;
    double defocus = 10000.0;
    double cs = 2.7;
    double w = 0.1;
    double phase_shift = 0.0;
    double pixel_size = 1.0;

    void validate() const;
};

struct CtfRanges {
    double defocus_min_um = 0.5;
    double defocus_max_um = 3.0;
    double voltage_kv = 300.0;
    double cs = 2.7;
    double w = 0.1;
    double phase_shift = 0.0;
    double pixel_size = 1.0;
};

/// Relativistic electron wavelength in Angstrom.
double electron_wavelength(double voltage_kv);

/// Phase aberration chi(|g|) with |g| in 1/Angstrom.
double ctf_chi(const CtfParams& p, double g);
/// CTF value at spatial frequency magnitude |g| (1/Angstrom).
double ctf_value(const CtfParams& p, double g);

/// |g| = |k| / (D * pixel_size) on the centered integer grid.
PlaneArray<double> frequency_grid(Eigen::Index n, double pixel_size);

PlaneArray<double> eval_ctf(const CtfParams& p, const PlaneArray<double>& freq_grid);
/// CTF on the centered grid of an n x n image at the parameters' pixel size.
PlaneArray<double> eval_ctf(const CtfParams& p, Eigen::Index n);

FourierImage apply_ctf(const FourierImage& fimg, const CtfParams& p);

CtfParams sample_ctf_params(Rng& rng, const CtfRanges& ranges = {});

// CTF CSV: index,defocus_A,voltage_kv,cs_mm,w,phase_shift_rad,pixel_size_A
void write_ctf_csv(const std::filesystem::path& path, const std::vector<CtfParams>& params);
std::vector<CtfParams> read_ctf_csv(const std::filesystem::path& path);

}  // namespace cryoar
