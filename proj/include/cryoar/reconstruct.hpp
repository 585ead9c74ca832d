#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "cryoar/ctf.hpp"
#include "cryoar/fourier.hpp"
#include "cryoar/geometry.hpp"

namespace cryoar {

/// Fourier-space gridding accumulator: sum CTF * I * phase in `numerator`, sum CTF^2 in `denominator`.
struct Accumulator {
    Eigen::Index n = 0;
    FourierVolume numerator;
    Eigen::ArrayXd denominator;
    double voxel_size = 1.0;
    std::size_t slices = 0;

    Accumulator() = default;
    Accumulator(Eigen::Index size, double voxel);

    Accumulator& operator+=(const Accumulator& other);
};

/// Deposits one image spectrum along the plane R (k_x, k_y, 0) with trilinear weights.
/// The recorded shift is undone (sign +1 phase) before insertion.
void insert_slice(Accumulator& acc, const FourierImage& fimg, const Pose& pose,
                  const std::optional<CtfParams>& ctf = std::nullopt);

struct Reconstruction {
    Volume volume;
    FourierVolume spectrum;  // regularized, symmetrized
    double wiener_eps = 0.0;
    double imag_residual = 0.0;    // |Im| / |Re| (L2) of the inverse transform
    double filled_fraction = 0.0;  // voxels with nonzero denominator
    std::size_t slices = 0;
};

/// numerator / (denominator + eps); eps defaults to 1e-3 * max(denominator).
Reconstruction finalize_volume(const Accumulator& acc, std::optional<double> wiener_eps = std::nullopt);

struct BackprojectOptions {
    std::optional<double> wiener_eps;
    int threads = 1;
    bool use_ctf = true;  // false: plain averaging even when CTF rows are given
};

/// `ctfs` empty means no CTF. Particles are inserted in a canonical order, so the
/// result does not depend on input order or thread count.
Reconstruction backproject_dataset(const std::vector<Image>& stack, const std::vector<Pose>& poses,
                                   const std::vector<CtfParams>& ctfs, const BackprojectOptions& options = {});

nlohmann::json diagnostics_json(const Reconstruction& rec);

}  // namespace cryoar
