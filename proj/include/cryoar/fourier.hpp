#pragma once

#include <Eigen/Dense>

#include <complex>
#include <stdexcept>

#include "cryoar/geometry.hpp"

// Frequency convention used everywhere: a D-sample axis holds integer
// frequencies k in [-D/2, D/2), with k = index - D/2 (DC at the array center).
// Real-space arrays use the same centering: coordinate = index - D/2.

namespace cryoar {

using Complex = std::complex<double>;

template <typename T>
using PlaneArray = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Square 2D array, row = y, column = x (x fastest in memory).
template <typename T>
struct ImageT {
    PlaneArray<T> data;
    double pixel_size = 1.0;

    ImageT() = default;
    ImageT(Eigen::Index n, double pixel, T fill = T{}) : data(PlaneArray<T>::Constant(n, n, fill)), pixel_size(pixel) {}
    ImageT(PlaneArray<T> values, double pixel) : data(std::move(values)), pixel_size(pixel) {}

    Eigen::Index size() const { return data.rows(); }
    T& operator()(Eigen::Index y, Eigen::Index x) { return data(y, x); }
    const T& operator()(Eigen::Index y, Eigen::Index x) const { return data(y, x); }
};

/// Cubic 3D array indexed (z, y, x), x fastest.
template <typename T>
struct VolumeT {
    Eigen::Index n = 0;
    Eigen::Array<T, Eigen::Dynamic, 1> data;
    double voxel_size = 1.0;

    VolumeT() = default;
    VolumeT(Eigen::Index size, double voxel, T fill = T{})
        : n(size), data(Eigen::Array<T, Eigen::Dynamic, 1>::Constant(size * size * size, fill)), voxel_size(voxel) {}

    Eigen::Index size() const { return n; }
    Eigen::Index index(Eigen::Index z, Eigen::Index y, Eigen::Index x) const { return (z * n + y) * n + x; }
    T& operator()(Eigen::Index z, Eigen::Index y, Eigen::Index x) { return data[index(z, y, x)]; }
    const T& operator()(Eigen::Index z, Eigen::Index y, Eigen::Index x) const { return data[index(z, y, x)]; }
};

using Image = ImageT<double>;
using FourierImage = ImageT<Complex>;
using Volume = VolumeT<double>;
using FourierVolume = VolumeT<Complex>;

FourierImage fft2_centered(const Image& img);
Image ifft2_centered(const FourierImage& fimg);
/// Inverse transform without discarding the imaginary part.
FourierImage ifft2_centered_complex(const FourierImage& fimg);

FourierVolume fft3_centered(const Volume& vol);
Volume ifft3_centered(const FourierVolume& fvol);
FourierVolume ifft3_centered_complex(const FourierVolume& fvol);

/// Multiplies sample (k_x, k_y) by exp(sign * 2*pi*j * (k_x t_x + k_y t_y) / D).
/// sign = -1 moves image content by +t (out(x) = in(x - t)); sign = +1 undoes it.
FourierImage apply_phase_shift(const FourierImage& fimg, const Vec2& shift_px, int sign);

/// Sum along z of the volume resampled (trilinear, zero outside) at R p + h(t).
Image real_space_project(const Volume& vol, const Pose& pose);

/// Largest |k| kept by slice extraction and insertion.
inline double nyquist_radius(Eigen::Index n) { return static_cast<double>(n) / 2.0 - 1.0; }

enum class FourierInterpolation {
    Trilinear,
    CubicBSpline,
};

/// Samples a Fourier volume on rotated central planes. Construction prefilters
/// the grid once when cubic B-spline interpolation is requested; indices wrap
/// periodically, matching DFT periodicity.
class SliceExtractor {
public:
    explicit SliceExtractor(const FourierVolume& fvol,
                            FourierInterpolation interp = FourierInterpolation::CubicBSpline);

    FourierImage extract(const Rotation& rot) const;
    Complex sample(const Vec3& freq) const;

    FourierInterpolation interpolation() const { return interp_; }

private:
    FourierVolume coeffs_;
    FourierInterpolation interp_;
};

/// V(R (k_x, k_y, 0)) for every integer frequency inside the Nyquist disc, zero outside.
FourierImage extract_slice(const FourierVolume& fvol, const Rotation& rot,
                           FourierInterpolation interp = FourierInterpolation::CubicBSpline);

/// In-place periodic cubic B-spline prefilter along one line of `n` samples.
void bspline_prefilter_periodic(Complex* line, Eigen::Index n, Eigen::Index stride);

}  // namespace cryoar
