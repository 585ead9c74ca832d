#include "cryoar/fourier.hpp"

#include <unsupported/Eigen/FFT>

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace cryoar {

namespace {

using Eigen::Index;

void require_even(Index n, const char* what) {
    if (n < 2 || n % 2 != 0)
        throw std::invalid_argument(std::string(what) + ": size must be even and >= 2, got " + std::to_string(n));
}

void require_square(const Eigen::Index rows, const Eigen::Index cols, const char* what) {
    if (rows != cols)
        throw std::invalid_argument(std::string(what) + ": expected a square array, got " + std::to_string(rows) +
                                    "x" + std::to_string(cols));
}

// Centered 1D transforms along one axis of a dims-dimensional cube of side n.
// The roll by n/2 on both sides moves the DC term between index 0 and n/2.
void transform_axis(Complex* data, Index n, int dims, int axis, bool inverse) {
    Index stride = 1;
    for (int d = dims - 1; d > axis; --d) stride *= n;
    Index total = 1;
    for (int d = 0; d < dims; ++d) total *= n;

    Eigen::FFT<double> fft;
    std::vector<Complex> in(static_cast<std::size_t>(n)), out(static_cast<std::size_t>(n));
    const Index half = n / 2;
    for (Index base = 0; base < total; ++base) {
        if ((base / stride) % n != 0) continue;
        for (Index m = 0; m < n; ++m) in[static_cast<std::size_t>(m)] = data[base + ((m + half) % n) * stride];
        if (inverse)
            fft.inv(out, in);
        else
            fft.fwd(out, in);
        for (Index m = 0; m < n; ++m) data[base + ((m + half) % n) * stride] = out[static_cast<std::size_t>(m)];
    }
}

Index wrap(Index i, Index n) {
    i %= n;
    return i < 0 ? i + n : i;
}

std::array<double, 4> cubic_bspline_weights(double t) {
    const double t2 = t * t, t3 = t2 * t;
    const double omt = 1.0 - t;
    return {omt * omt * omt / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0, (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0};
}

}  // namespace

FourierImage fft2_centered(const Image& img) {
    require_square(img.data.rows(), img.data.cols(), "fft2_centered");
    require_even(img.size(), "fft2_centered");
    FourierImage out(img.data.cast<Complex>(), img.pixel_size);
    transform_axis(out.data.data(), out.size(), 2, 1, false);
    transform_axis(out.data.data(), out.size(), 2, 0, false);
    return out;
}

FourierImage ifft2_centered_complex(const FourierImage& fimg) {
    require_square(fimg.data.rows(), fimg.data.cols(), "ifft2_centered");
    require_even(fimg.size(), "ifft2_centered");
    FourierImage out = fimg;
    transform_axis(out.data.data(), out.size(), 2, 1, true);
    transform_axis(out.data.data(), out.size(), 2, 0, true);
    return out;
}

Image ifft2_centered(const FourierImage& fimg) {
    const FourierImage c = ifft2_centered_complex(fimg);
    return Image(c.data.real(), fimg.pixel_size);
}

FourierVolume fft3_centered(const Volume& vol) {
    require_even(vol.n, "fft3_centered");
    FourierVolume out(vol.n, vol.voxel_size);
    out.data = vol.data.cast<Complex>();
    for (int axis = 2; axis >= 0; --axis) transform_axis(out.data.data(), out.n, 3, axis, false);
    return out;
}

FourierVolume ifft3_centered_complex(const FourierVolume& fvol) {
    require_even(fvol.n, "ifft3_centered");
    FourierVolume out = fvol;
    for (int axis = 2; axis >= 0; --axis) transform_axis(out.data.data(), out.n, 3, axis, true);
    return out;
}

Volume ifft3_centered(const FourierVolume& fvol) {
    const FourierVolume c = ifft3_centered_complex(fvol);
    Volume out(fvol.n, fvol.voxel_size);
    out.data = c.data.real();
    return out;
}

FourierImage apply_phase_shift(const FourierImage& fimg, const Vec2& shift_px, int sign) {
    if (sign != 1 && sign != -1) throw std::invalid_argument("apply_phase_shift: sign must be +1 or -1");
    FourierImage out = fimg;
    if (shift_px.isZero(0.0)) return out;
    const Index n = fimg.size();
    const double half = static_cast<double>(n / 2);
    const double scale = sign * 2.0 * std::numbers::pi / static_cast<double>(n);
    for (Index y = 0; y < n; ++y) {
        const double ky = static_cast<double>(y) - half;
        for (Index x = 0; x < n; ++x) {
            const double kx = static_cast<double>(x) - half;
            out(y, x) *= std::polar(1.0, scale * (kx * shift_px.x() + ky * shift_px.y()));
        }
    }
    return out;
}

Image real_space_project(const Volume& vol, const Pose& pose) {
    require_even(vol.n, "real_space_project");
    const Index n = vol.n;
    const double c = static_cast<double>(n / 2);
    const Mat3& r = pose.rot.matrix();
    const Vec3 offset = homogeneous_embed(pose.shift) + Vec3::Constant(c);
    const Vec3 step_z = r.col(2);
    const double* v = vol.data.data();

    Image out(n, vol.voxel_size);
    for (Index y = 0; y < n; ++y) {
        for (Index x = 0; x < n; ++x) {
            Vec3 q = r * Vec3(static_cast<double>(x) - c, static_cast<double>(y) - c, -c) + offset;
            double sum = 0.0;
            for (Index z = 0; z < n; ++z, q += step_z) {
                const double fx = std::floor(q.x()), fy = std::floor(q.y()), fz = std::floor(q.z());
                const Index ix = static_cast<Index>(fx), iy = static_cast<Index>(fy), iz = static_cast<Index>(fz);
                if (ix < -1 || iy < -1 || iz < -1 || ix >= n || iy >= n || iz >= n) continue;
                const double tx = q.x() - fx, ty = q.y() - fy, tz = q.z() - fz;
                for (int dz = 0; dz < 2; ++dz) {
                    const Index zz = iz + dz;
                    if (zz < 0 || zz >= n) continue;
                    const double wz = dz ? tz : 1.0 - tz;
                    for (int dy = 0; dy < 2; ++dy) {
                        const Index yy = iy + dy;
                        if (yy < 0 || yy >= n) continue;
                        const double wzy = wz * (dy ? ty : 1.0 - ty);
                        const double* row = v + (zz * n + yy) * n;
                        if (ix >= 0) sum += wzy * (1.0 - tx) * row[ix];
                        if (ix + 1 < n) sum += wzy * tx * row[ix + 1];
                    }
                }
            }
            out(y, x) = sum;
        }
    }
    return out;
}

void bspline_prefilter_periodic(Complex* line, Index n, Index stride) {
    const double pole = std::sqrt(3.0) - 2.0;
    const double gain = (1.0 - pole) * (1.0 - 1.0 / pole);
    const double pole_n = std::pow(pole, static_cast<double>(n));
    std::vector<Complex> causal(static_cast<std::size_t>(n));
    auto at = [&](Index i) -> Complex& { return line[i * stride]; };

    Complex acc = 0.0;
    double zk = 1.0;
    for (Index k = 0; k < n; ++k, zk *= pole) acc += zk * gain * at((n - k) % n);
    causal[0] = acc / (1.0 - pole_n);
    for (Index i = 1; i < n; ++i) causal[static_cast<std::size_t>(i)] = gain * at(i) + pole * causal[static_cast<std::size_t>(i - 1)];

    acc = 0.0;
    zk = 1.0;
    for (Index k = 0; k < n; ++k, zk *= pole) acc += zk * causal[static_cast<std::size_t>((n - 1 + k) % n)];
    at(n - 1) = -pole * acc / (1.0 - pole_n);
    for (Index i = n - 2; i >= 0; --i) at(i) = pole * (at(i + 1) - causal[static_cast<std::size_t>(i)]);
}

SliceExtractor::SliceExtractor(const FourierVolume& fvol, FourierInterpolation interp)
    : coeffs_(fvol), interp_(interp) {
    require_even(fvol.n, "SliceExtractor");
    if (interp_ != FourierInterpolation::CubicBSpline) return;
    const Index n = coeffs_.n;
    Complex* d = coeffs_.data.data();
    for (Index z = 0; z < n; ++z)
        for (Index y = 0; y < n; ++y) bspline_prefilter_periodic(d + coeffs_.index(z, y, 0), n, 1);
    for (Index z = 0; z < n; ++z)
        for (Index x = 0; x < n; ++x) bspline_prefilter_periodic(d + coeffs_.index(z, 0, x), n, n);
    for (Index y = 0; y < n; ++y)
        for (Index x = 0; x < n; ++x) bspline_prefilter_periodic(d + coeffs_.index(0, y, x), n, n * n);
}

Complex SliceExtractor::sample(const Vec3& freq) const {
    const Index n = coeffs_.n;
    const Vec3 u = freq + Vec3::Constant(static_cast<double>(n / 2));
    const double fx = std::floor(u.x()), fy = std::floor(u.y()), fz = std::floor(u.z());
    const Index ix = static_cast<Index>(fx), iy = static_cast<Index>(fy), iz = static_cast<Index>(fz);
    const double tx = u.x() - fx, ty = u.y() - fy, tz = u.z() - fz;

    Complex value = 0.0;
    if (interp_ == FourierInterpolation::Trilinear) {
        for (int dz = 0; dz < 2; ++dz) {
            const double wz = dz ? tz : 1.0 - tz;
            const Index zz = wrap(iz + dz, n);
            for (int dy = 0; dy < 2; ++dy) {
                const double wzy = wz * (dy ? ty : 1.0 - ty);
                const Index yy = wrap(iy + dy, n);
                value += wzy * (1.0 - tx) * coeffs_(zz, yy, wrap(ix, n));
                value += wzy * tx * coeffs_(zz, yy, wrap(ix + 1, n));
            }
        }
        return value;
    }

    const auto wx = cubic_bspline_weights(tx), wy = cubic_bspline_weights(ty), wz = cubic_bspline_weights(tz);
    std::array<Index, 4> xs{};
    for (int a = 0; a < 4; ++a) xs[static_cast<std::size_t>(a)] = wrap(ix - 1 + a, n);
    for (int c = 0; c < 4; ++c) {
        const Index zz = wrap(iz - 1 + c, n);
        for (int b = 0; b < 4; ++b) {
            const Index yy = wrap(iy - 1 + b, n);
            const Complex* row = coeffs_.data.data() + coeffs_.index(zz, yy, 0);
            Complex line = 0.0;
            for (int a = 0; a < 4; ++a) line += wx[static_cast<std::size_t>(a)] * row[xs[static_cast<std::size_t>(a)]];
            value += wz[static_cast<std::size_t>(c)] * wy[static_cast<std::size_t>(b)] * line;
        }
    }
    return value;
}

FourierImage SliceExtractor::extract(const Rotation& rot) const {
    const Index n = coeffs_.n;
    const double half = static_cast<double>(n / 2);
    const double r2max = nyquist_radius(n) * nyquist_radius(n);
    FourierImage out(n, coeffs_.voxel_size, Complex(0.0));
    const Mat3& r = rot.matrix();
    for (Index y = 0; y < n; ++y) {
        const double ky = static_cast<double>(y) - half;
        for (Index x = 0; x < n; ++x) {
            const double kx = static_cast<double>(x) - half;
            if (kx * kx + ky * ky > r2max) continue;
            out(y, x) = sample(r.col(0) * kx + r.col(1) * ky);
        }
    }
    return out;
}

FourierImage extract_slice(const FourierVolume& fvol, const Rotation& rot, FourierInterpolation interp) {
    return SliceExtractor(fvol, interp).extract(rot);
}

}  // namespace cryoar
