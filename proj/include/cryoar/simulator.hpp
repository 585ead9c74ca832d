#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include <json.hpp>

#include "cryoar/ctf.hpp"
#include "cryoar/fourier.hpp"
#include "cryoar/geometry.hpp"
#include "cryoar/random.hpp"

namespace cryoar {

struct Range {
    double min = 0.0;
    double max = 0.0;
};

struct PhantomSpec {
    int grid_size = 64;
    int n_blobs = 30;
    Range amp_range{0.5, 1.0};
    Range sigma_range_px{2.0, 4.0};
    double support_radius_fraction = 0.3;
    std::uint64_t seed = 0;
    double voxel_size = 1.0;

    void validate() const;
};

/// Isotropic Gaussian blob; center in voxels relative to the grid center.
struct Blob {
    Vec3 center = Vec3::Zero();
    double amplitude = 1.0;
    double sigma = 1.0;
};

std::vector<Blob> sample_blobs(const PhantomSpec& spec);
Volume render_blobs(const std::vector<Blob>& blobs, int grid_size, double voxel_size);
Volume make_phantom(const PhantomSpec& spec);
/// Continuous integral of the blob sum, in voxel units.
double blob_mass(const std::vector<Blob>& blobs);

inline constexpr double kNoiseless = std::numeric_limits<double>::infinity();

struct DatasetManifest {
    std::size_t n_particles = 1;
    int image_size = 64;
    double pixel_size = 1.0;
    double snr = kNoiseless;  // signal variance / noise variance; infinity disables noise
    double shift_range_px = 0.0;
    bool ctf_enabled = false;
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

struct SimulationOptions {
    CtfRanges ctf_ranges;
    bool keep_clean = false;
    int threads = 1;
};

struct Dataset {
    std::vector<Image> images;
    std::vector<Pose> poses;
    std::vector<CtfParams> ctfs;  // empty when the CTF is disabled
    std::vector<Image> clean;     // post-CTF, post-shift signal; only with keep_clean
};

struct Particle {
    Image image;
    Image clean;
};

/// project -> fft2 -> CTF (optional) -> phase shift by pose.shift -> ifft2 -> noise.
Particle simulate_particle(const Volume& vol, const Pose& pose, const std::optional<CtfParams>& ctf, double snr,
                           Rng& rng);

Dataset simulate_dataset(const Volume& vol, const DatasetManifest& manifest, const SimulationOptions& options = {});

double variance(const Image& img);
Image add_noise_to_snr(const Image& img, double snr, Rng& rng);
/// Var(clean) / Var(noisy - clean); infinity when the two are identical.
double measure_snr(const Image& clean, const Image& noisy);

}  // namespace cryoar
