#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "cryoar/fourier.hpp"
#include "cryoar/geometry.hpp"

namespace cryoar {

struct RotationError {
    double min = 0.0;     // over sampled reference views
    double median = 0.0;  // secondary, less optimistic figure
    std::size_t references = 0;
};

/// For each reference i: mean_j |R_i^T R_j - Rhat_i^T Rhat_j|_F. All references are
/// used when N <= n_reference_samples, otherwise a seeded subset without replacement.
RotationError rotation_fnorm_error(const std::vector<Rotation>& gt, const std::vector<Rotation>& est,
                                   std::size_t n_reference_samples = 5000, std::uint64_t seed = 0, int threads = 1);

/// Mean L2 distance between shift vectors, in pixels.
double translation_error(const std::vector<Vec2>& gt, const std::vector<Vec2>& est);

struct FscCurve {
    std::vector<double> shell_freqs;  // cycles per voxel
    std::vector<double> correlations;
    std::vector<bool> empty;
    double voxel_size = 1.0;
};

/// Shells r = 1 .. D/2-1 of round(|k|), frequency r/D.
FscCurve fsc(const Volume& a, const Volume& b);

struct Resolution {
    double angstrom = 0.0;
    double frequency = 0.0;  // cycles per voxel at the crossing
    bool at_nyquist = false;
};

/// First crossing below `threshold`, interpolated linearly between the bracketing shells.
Resolution resolution_at_threshold(const FscCurve& curve, double threshold);

nlohmann::json fsc_json(const FscCurve& curve);
void write_fsc_text(const std::filesystem::path& path, const FscCurve& curve);

}  // namespace cryoar
