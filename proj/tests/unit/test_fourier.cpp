#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cryoar/fourier.hpp"
#include "cryoar/simulator.hpp"

using namespace cryoar;

namespace {

Image random_image(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> normal;
    Image img(n, 1.0);
    for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data.data()[i] = normal(rng);
    return img;
}

Volume random_volume(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> normal;
    Volume v(n, 1.0);
    for (Eigen::Index i = 0; i < v.data.size(); ++i) v.data[i] = normal(rng);
    return v;
}

double rel_l2(const FourierImage& a, const FourierImage& b) {
    return (a.data - b.data).matrix().norm() / b.data.matrix().norm();
}

}  // namespace

TEST(Fft2, ConstantImageIsDcOnly) {
    const FourierImage f = fft2_centered(Image(4, 1.0, 1.0));
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) EXPECT_NEAR(std::abs(f(y, x) - Complex(y == 2 && x == 2 ? 16.0 : 0.0)), 0.0, 1e-12);
}

TEST(Fft2, RoundTrip) {
    const Image x = random_image(32, 1);
    EXPECT_LT((ifft2_centered(fft2_centered(x)).data - x.data).abs().maxCoeff(), 1e-12);
}

TEST(Fft2, CenterImpulseHasFlatSpectrum) {
    Image img(16, 1.0, 0.0);
    img(8, 8) = 1.0;
    const FourierImage f = fft2_centered(img);
    EXPECT_LT((f.data.abs() - 1.0).abs().maxCoeff(), 1e-12);
}

TEST(Fft2, RejectsOddSizes) {
    EXPECT_THROW(fft2_centered(Image(7, 1.0)), std::invalid_argument);
    EXPECT_THROW(fft3_centered(Volume(5, 1.0)), std::invalid_argument);
}

TEST(Fft2, Parseval) {
    const Image x = random_image(32, 2);
    const FourierImage f = fft2_centered(x);
    const double lhs = x.data.square().sum(), rhs = f.data.abs2().sum() / (32.0 * 32.0);
    EXPECT_LT(std::abs(lhs - rhs) / lhs, 1e-10);
}

TEST(Fft3, ConstantVolumeIsDcOnly) {
    const FourierVolume f = fft3_centered(Volume(4, 1.0, 1.0));
    for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x)
                EXPECT_NEAR(std::abs(f(z, y, x) - Complex(z == 2 && y == 2 && x == 2 ? 64.0 : 0.0)), 0.0, 1e-12);
}

TEST(Fft3, RoundTripParsevalAndHermitian) {
    const Volume v = random_volume(32, 3);
    const FourierVolume f = fft3_centered(v);
    EXPECT_LT((ifft3_centered(f).data - v.data).abs().maxCoeff(), 1e-12);
    const double lhs = v.data.square().sum(), rhs = f.data.abs2().sum() / std::pow(32.0, 3);
    EXPECT_LT(std::abs(lhs - rhs) / lhs, 1e-10);
    double asym = 0.0;
    for (int z = 0; z < 32; ++z)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                asym = std::max(asym, std::abs(f(z, y, x) - std::conj(f((32 - z) % 32, (32 - y) % 32, (32 - x) % 32))));
    EXPECT_LT(asym, 1e-10);
}

TEST(Fft, RoundTripUpTo64) {
    for (int n : {8, 16, 64}) {
        const Image x = random_image(n, static_cast<std::uint64_t>(n));
        EXPECT_LT((ifft2_centered(fft2_centered(x)).data - x.data).abs().maxCoeff(), 1e-12) << n;
    }
    const Volume v = random_volume(64, 9);
    EXPECT_LT((ifft3_centered(fft3_centered(v)).data - v.data).abs().maxCoeff(), 1e-12);
}

TEST(PhaseShift, ZeroShiftIsExactIdentity) {
    const FourierImage f = fft2_centered(random_image(16, 4));
    const FourierImage g = apply_phase_shift(f, Vec2::Zero(), -1);
    EXPECT_TRUE((g.data == f.data).all());
}

TEST(PhaseShift, MatchesCircularShift) {
    const Image x = random_image(32, 5);
    const Image shifted = ifft2_centered(apply_phase_shift(fft2_centered(x), Vec2(3, 0), -1));
    double err = 0.0;
    for (int y = 0; y < 32; ++y)
        for (int c = 0; c < 32; ++c) err = std::max(err, std::abs(shifted(y, c) - x(y, (c - 3 + 32) % 32)));
    EXPECT_LT(err, 1e-10);
}

TEST(PhaseShift, InverseAndMagnitude) {
    const FourierImage f = fft2_centered(random_image(32, 6));
    const FourierImage g = apply_phase_shift(f, Vec2(1.7, -2.3), -1);
    EXPECT_LT((apply_phase_shift(g, Vec2(1.7, -2.3), +1).data - f.data).abs().maxCoeff(), 1e-12);
    EXPECT_LT((g.data.abs() - f.data.abs()).abs().maxCoeff(), 1e-12);
    EXPECT_THROW(apply_phase_shift(f, Vec2(1, 1), 0), std::invalid_argument);
}

TEST(RealSpaceProject, CenterImpulse) {
    Volume v(16, 1.0, 0.0);
    v(8, 8, 8) = 1.0;
    const Image img = real_space_project(v, Pose{});
    EXPECT_NEAR(img.data.sum(), 1.0, 1e-9);
    Eigen::Index r, c;
    img.data.maxCoeff(&r, &c);
    EXPECT_EQ(r, 8);
    EXPECT_EQ(c, 8);
}

TEST(RealSpaceProject, Linear) {
    const Volume a = random_volume(16, 7), b = random_volume(16, 8);
    Volume combo(16, 1.0);
    combo.data = 2.0 * a.data - 0.5 * b.data;
    Rng rng(1);
    const Pose pose{sample_uniform_rotation(rng), Vec2(0.3, -1.2)};
    const Image lhs = real_space_project(combo, pose);
    const Image rhs(2.0 * real_space_project(a, pose).data - 0.5 * real_space_project(b, pose).data, 1.0);
    EXPECT_LT((lhs.data - rhs.data).abs().maxCoeff(), 1e-9);
}

TEST(ExtractSlice, IdentityIsCentralPlane) {
    const FourierVolume f = fft3_centered(random_volume(16, 9));
    for (auto interp : {FourierInterpolation::Trilinear, FourierInterpolation::CubicBSpline}) {
        const FourierImage s = extract_slice(f, Rotation::identity(), interp);
        const double tol = interp == FourierInterpolation::Trilinear ? 0.0 : 1e-10 * f.data.abs().maxCoeff();
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                const double kx = x - 8, ky = y - 8;
                const Complex expect = kx * kx + ky * ky <= 49.0 ? f(8, y, x) : Complex(0.0);
                EXPECT_LE(std::abs(s(y, x) - expect), tol);
            }
    }
}

TEST(ExtractSlice, SphericallySymmetricVolumeGivesSameSlice) {
    Volume v(32, 1.0, 0.0);
    v(16, 16, 16) = 1.0;  // spectrum is constant, so any slice is the same
    const FourierVolume f = fft3_centered(v);
    const SliceExtractor ex(f);
    const FourierImage ref = ex.extract(Rotation::identity());
    Rng rng(2);
    for (int i = 0; i < 10; ++i) EXPECT_LT(rel_l2(ex.extract(sample_uniform_rotation(rng)), ref), 1e-6);
}

TEST(ExtractSlice, FourierSliceTheoremOnBlobPhantom) {
    PhantomSpec spec;
    spec.grid_size = 32;
    spec.n_blobs = 10;
    spec.support_radius_fraction = 0.2;
    spec.sigma_range_px = {2.0, 3.0};
    spec.seed = 4;
    const Volume vol = make_phantom(spec);
    const SliceExtractor ex(fft3_centered(vol));
    Rng rng(3);
    for (int i = 0; i < 5; ++i) {
        const Rotation r = sample_uniform_rotation(rng);
        FourierImage proj = fft2_centered(real_space_project(vol, Pose{r, Vec2::Zero()}));
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                if ((x - 16) * (x - 16) + (y - 16) * (y - 16) > 15 * 15) proj(y, x) = 0.0;
        EXPECT_LT(rel_l2(ex.extract(r), proj), 2e-2);
    }
}

TEST(BSplinePrefilter, InterpolatesSamples) {
    // After prefiltering, the cubic B-spline through the coefficients passes through the samples.
    std::vector<Complex> line = {1.0, -2.0, 3.5, 0.25, Complex(0, 1), 4.0, -1.0, 2.0};
    std::vector<Complex> c = line;
    bspline_prefilter_periodic(c.data(), 8, 1);
    for (int i = 0; i < 8; ++i) {
        const Complex v = (c[(i + 7) % 8] + 4.0 * c[i] + c[(i + 1) % 8]) / 6.0;
        EXPECT_LT(std::abs(v - line[static_cast<std::size_t>(i)]), 1e-12);
    }
}
