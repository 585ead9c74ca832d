#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "cryoar/error.hpp"
#include "cryoar/geometry.hpp"

namespace cryoar {

/// One 3D point per pixel, pixels in row-major order (row = h, column = w).
template <typename Scalar>
using PointsT = Eigen::Matrix<Scalar, Eigen::Dynamic, 3>;
using Points = PointsT<double>;

/// Fourier planar map: normalized plane coordinates plus per-pixel confidence (> 1).
struct PlanarMap {
    int height = 0;
    int width = 0;
    Points points;
    Eigen::VectorXd confidence;

    PlanarMap() = default;
    PlanarMap(int h, int w) : height(h), width(w), points(Points::Zero(h * w, 3)), confidence(Eigen::VectorXd::Constant(h * w, 2.0)) {}

    Eigen::Index pixel_count() const { return points.rows(); }
    void validate() const;
};

enum class TranslationMode {
    Normalized,    // sum(C X) / sum(C)
    PaperLiteral,  // sum(C X) / (H W)
};

struct RegressionConfig {
    TranslationMode translation_mode = TranslationMode::Normalized;
    bool ransac_enabled = false;
    double ransac_threshold = 0.05;
    int ransac_iters = 256;
    double min_inlier_fraction = 0.3;
    std::uint64_t seed = 0;

    void validate() const;
};

/// X0[h][w] = (2w/(W-1) - 1, 2h/(H-1) - 1, 0).
Points canonical_grid(int height, int width);

/// Ground-truth map of view i in the reference frame: R_ref^T R_i X0 + h(2 t_i / D), confidence 2.
PlanarMap gt_relative_map(const Pose& pose_i, const Pose& pose_ref, int height, int width, int image_size);

struct TranslationEstimate {
    Vec2 shift = Vec2::Zero();  // normalized units
    double z_residual = 0.0;
};

TranslationEstimate regress_translation(const PlanarMap& map, const RegressionConfig& cfg = {});

/// argmin_R sum_k w_k |target_k - R source_k|^2 over proper rotations (no centering).
/// Throws DegenerateGeometryError when the weighted cross-covariance has rank < 2.
template <typename DerivedS, typename DerivedT, typename DerivedW>
Rotation weighted_kabsch(const Eigen::MatrixBase<DerivedS>& source, const Eigen::MatrixBase<DerivedT>& target,
                         const Eigen::MatrixBase<DerivedW>& weights) {
    if (source.rows() != target.rows() || source.rows() != weights.size())
        throw std::invalid_argument("weighted_kabsch: point counts differ");
    const Mat3 cov = target.transpose() * weights.asDiagonal() * source;
    if (!cov.allFinite()) throw DegenerateGeometryError("weighted_kabsch: non-finite covariance");
    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    if (!(s[0] > 0.0) || s[1] <= 1e-12 * s[0])
        throw DegenerateGeometryError("weighted_kabsch: cross-covariance has rank < 2");
    Mat3 d = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    return Rotation::nearest(svd.matrixU() * d * svd.matrixV().transpose());
}

/// Kabsch fit of (X - h(t)) against X0, weights C_ref * C_target.
Rotation regress_rotation_kabsch(const PlanarMap& map, const PlanarMap& ref_map, const Vec2& t_norm,
                                 const RegressionConfig& cfg = {});

struct RansacResult {
    Pose pose;  // shift in normalized units
    std::vector<bool> inliers;
    std::size_t inlier_count = 0;
    bool success = false;
};

RansacResult ransac_regress(const PlanarMap& map, const PlanarMap& ref_map, const RegressionConfig& cfg);

/// maps[0] is the reference view's own map. Returned rotations are relative to
/// the reference (which gets the identity); shifts are in pixels.
std::vector<Pose> maps_to_poses(const std::vector<PlanarMap>& maps, int image_size, const RegressionConfig& cfg = {});

// Binary: u32 H, W, n_views (little endian), then per view H*W*3 positions and H*W confidences as f32.
void write_planar_maps(const std::filesystem::path& path, const std::vector<PlanarMap>& maps);
std::vector<PlanarMap> read_planar_maps(const std::filesystem::path& path);

}  // namespace cryoar
