#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <vector>

#include "cryoar/random.hpp"

namespace cryoar {

template <typename Scalar>
using Vec2T = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vec3T = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Mat3T = Eigen::Matrix<Scalar, 3, 3>;

using Vec2 = Vec2T<double>;
using Vec3 = Vec3T<double>;
using Mat3 = Mat3T<double>;

/// Proper rotation matrix. Construction from a raw matrix checks
/// orthonormality and det = +1 to 1e-10.
template <typename Scalar>
class RotationT {
public:
    using Matrix = Mat3T<Scalar>;

    RotationT() : m_(Matrix::Identity()) {}

    explicit RotationT(const Matrix& m) : m_(m) {
        if (!is_rotation(m))
            throw std::invalid_argument("matrix is not a proper rotation");
    }

    static RotationT identity() { return RotationT(); }

    // Skips validation; for matrices that are rotations by construction.
    static RotationT unchecked(const Matrix& m) {
        RotationT r;
        r.m_ = m;
        return r;
    }

    static RotationT from_quaternion(const Eigen::Quaternion<Scalar>& q) {
        return unchecked(q.normalized().toRotationMatrix());
    }

    static RotationT about_z(Scalar radians) {
        return unchecked(Eigen::AngleAxis<Scalar>(radians, Vec3T<Scalar>::UnitZ()).toRotationMatrix());
    }

    static RotationT about_axis(const Vec3T<Scalar>& axis, Scalar radians) {
        return unchecked(Eigen::AngleAxis<Scalar>(radians, axis.normalized()).toRotationMatrix());
    }

    /// Closest rotation in Frobenius norm (polar factor with det fixed to +1).
    static RotationT nearest(const Matrix& m) {
        Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Matrix d = Matrix::Identity();
        d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? Scalar(-1) : Scalar(1);
        return unchecked(svd.matrixU() * d * svd.matrixV().transpose());
    }

    static bool is_rotation(const Matrix& m, Scalar tol = Scalar(1e-10)) {
        if (!m.allFinite()) return false;
        const Scalar ortho = (m.transpose() * m - Matrix::Identity()).norm();
        return ortho < tol && std::abs(m.determinant() - Scalar(1)) < tol;
    }

    const Matrix& matrix() const { return m_; }
    Scalar operator()(Eigen::Index r, Eigen::Index c) const { return m_(r, c); }

    RotationT transpose() const { return unchecked(m_.transpose()); }
    RotationT inverse() const { return transpose(); }

    RotationT operator*(const RotationT& other) const { return unchecked(m_ * other.m_); }

    template <typename Derived>
    auto operator*(const Eigen::MatrixBase<Derived>& v) const {
        return m_ * v;
    }

private:
    Matrix m_;
};

using Rotation = RotationT<double>;

/// 5D pose: orientation plus in-plane shift in pixels.
template <typename Scalar>
struct PoseT {
    RotationT<Scalar> rot;
    Vec2T<Scalar> shift = Vec2T<Scalar>::Zero();
};

using Pose = PoseT<double>;

template <typename Scalar>
Vec3T<Scalar> homogeneous_embed(const Vec2T<Scalar>& t) {
    return Vec3T<Scalar>(t.x(), t.y(), Scalar(0));
}

/// Haar-uniform rotation from a normalized 4D Gaussian quaternion.
template <typename Scalar = double, typename Generator>
RotationT<Scalar> sample_uniform_rotation(Generator& rng) {
    std::normal_distribution<Scalar> normal(Scalar(0), Scalar(1));
    Eigen::Matrix<Scalar, 4, 1> q;
    do {
        for (int i = 0; i < 4; ++i) q[i] = normal(rng);
    } while (q.norm() < Scalar(1e-12));
    q.normalize();
    return RotationT<Scalar>::from_quaternion(Eigen::Quaternion<Scalar>(q[0], q[1], q[2], q[3]));
}

/// Rotation of view i expressed in the reference view's frame: R_ref^T * R_i.
///
/// Projections are V(R p), so a global change of volume frame acts as R -> Q R;
/// this product is the combination that frame change leaves unchanged, and
/// R_ref * relative_rotation(R_i, R_ref) == R_i.
template <typename Scalar>
RotationT<Scalar> relative_rotation(const RotationT<Scalar>& rot_i, const RotationT<Scalar>& rot_ref) {
    return rot_ref.transpose() * rot_i;
}

/// Frobenius distance between two rotations.
template <typename Scalar>
Scalar rotation_distance(const RotationT<Scalar>& a, const RotationT<Scalar>& b) {
    return (a.matrix() - b.matrix()).norm();
}

// Pose CSV: index,r11,r12,r13,r21,r22,r23,r31,r32,r33,tx_px,ty_px
void write_pose_csv(const std::filesystem::path& path, const std::vector<Pose>& poses);
std::vector<Pose> read_pose_csv(const std::filesystem::path& path);

}  // namespace cryoar
