#include "cryoar/reconstruct.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cryoar/parallel.hpp"

namespace cryoar {

namespace {

using Eigen::Index;

// CTF-weighted, shift-corrected slice ready for deposition.
struct PreparedSlice {
    FourierImage value;
    PlaneArray<double> weight;  // CTF^2
    Mat3 rot;
};

PreparedSlice prepare(const FourierImage& fimg, const Pose& pose, const std::optional<CtfParams>& ctf) {
    PreparedSlice s;
    s.value = apply_phase_shift(fimg, pose.shift, +1);
    if (ctf) {
        const PlaneArray<double> c = eval_ctf(*ctf, fimg.size());
        s.value.data *= c.cast<Complex>();
        s.weight = c.square();
    } else {
        s.weight = PlaneArray<double>::Ones(fimg.size(), fimg.size());
    }
    s.rot = pose.rot.matrix();
    return s;
}

// Trilinear scatter restricted to voxels with z index in [z_begin, z_end).
void deposit(Accumulator& acc, const PreparedSlice& s, Index z_begin, Index z_end) {
    const Index n = acc.n;
    const double half = static_cast<double>(n / 2);
    const double r2max = nyquist_radius(n) * nyquist_radius(n);
    Complex* num = acc.numerator.data.data();
    double* den = acc.denominator.data();
    for (Index y = 0; y < n; ++y) {
        const double ky = static_cast<double>(y) - half;
        for (Index x = 0; x < n; ++x) {
            const double kx = static_cast<double>(x) - half;
            if (kx * kx + ky * ky > r2max) continue;
            const Vec3 u = s.rot.col(0) * kx + s.rot.col(1) * ky + Vec3::Constant(half);
            const double fx = std::floor(u.x()), fy = std::floor(u.y()), fz = std::floor(u.z());
            const double tx = u.x() - fx, ty = u.y() - fy, tz = u.z() - fz;
            const Index ix = static_cast<Index>(fx), iy = static_cast<Index>(fy), iz = static_cast<Index>(fz);
            const Complex v = s.value(y, x);
            const double w2 = s.weight(y, x);
            for (int dz = 0; dz < 2; ++dz) {
                const Index zz = (iz + dz + n) % n;
                if (zz < z_begin || zz >= z_end) continue;
                const double wz = dz ? tz : 1.0 - tz;
                if (wz == 0.0) continue;
                for (int dy = 0; dy < 2; ++dy) {
                    const double wzy = wz * (dy ? ty : 1.0 - ty);
                    if (wzy == 0.0) continue;
                    const Index yy = (iy + dy + n) % n;
                    for (int dx = 0; dx < 2; ++dx) {
                        const double w = wzy * (dx ? tx : 1.0 - tx);
                        if (w == 0.0) continue;
                        const Index idx = (zz * n + yy) * n + (ix + dx + n) % n;
                        num[idx] += w * v;
                        den[idx] += w * w2;
                    }
                }
            }
        }
    }
}

void check_slice(const Accumulator& acc, const FourierImage& fimg) {
    if (acc.n == 0) throw std::invalid_argument("insert_slice: accumulator is not initialized");
    if (fimg.data.rows() != acc.n || fimg.data.cols() != acc.n)
        throw std::invalid_argument("insert_slice: image is " + std::to_string(fimg.data.rows()) + "x" +
                                    std::to_string(fimg.data.cols()) + " but the accumulator is " +
                                    std::to_string(acc.n) + "^3");
}

// Lexicographic order on (rotation, shift, CTF, pixels); ties keep input order.
std::vector<std::size_t> canonical_order(const std::vector<Image>& stack, const std::vector<Pose>& poses,
                                         const std::vector<CtfParams>& ctfs) {
    auto key = [&](std::size_t i) {
        std::vector<double> k;
        for (Index r = 0; r < 3; ++r)
            for (Index c = 0; c < 3; ++c) k.push_back(poses[i].rot(r, c));
        k.push_back(poses[i].shift.x());
        k.push_back(poses[i].shift.y());
        if (!ctfs.empty()) {
            const auto& p = ctfs[i];
            k.insert(k.end(), {p.defocus, p.voltage_kv, p.cs, p.w, p.phase_shift, p.pixel_size});
        }
        return k;
    };
    std::vector<std::vector<double>> keys(stack.size());
    for (std::size_t i = 0; i < stack.size(); ++i) keys[i] = key(i);
    std::vector<std::size_t> order(stack.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (keys[a] != keys[b]) return keys[a] < keys[b];
        const auto& da = stack[a].data;
        const auto& db = stack[b].data;
        return std::lexicographical_compare(da.data(), da.data() + da.size(), db.data(), db.data() + db.size());
    });
    return order;
}

}  // namespace

Accumulator::Accumulator(Index size, double voxel)
    : n(size), numerator(size, voxel, Complex(0.0)), denominator(Eigen::ArrayXd::Zero(size * size * size)),
      voxel_size(voxel) {
    if (size < 2 || size % 2 != 0) throw std::invalid_argument("Accumulator: size must be even, got " + std::to_string(size));
    if (!(voxel > 0.0)) throw std::invalid_argument("Accumulator: voxel size must be positive");
}

Accumulator& Accumulator::operator+=(const Accumulator& other) {
    if (other.n != n) throw std::invalid_argument("Accumulator: size mismatch in merge");
    numerator.data += other.numerator.data;
    denominator += other.denominator;
    slices += other.slices;
    return *this;
}

void insert_slice(Accumulator& acc, const FourierImage& fimg, const Pose& pose, const std::optional<CtfParams>& ctf) {
    check_slice(acc, fimg);
    // Each slice is gridded on its own and then added, so repeated slices sum exactly.
    Accumulator single(acc.n, acc.voxel_size);
    deposit(single, prepare(fimg, pose, ctf), 0, acc.n);
    single.slices = 1;
    acc += single;
}

Reconstruction finalize_volume(const Accumulator& acc, std::optional<double> wiener_eps) {
    if (acc.slices == 0) throw std::invalid_argument("finalize_volume: accumulator is empty");
    const Index n = acc.n;
    Reconstruction rec;
    rec.slices = acc.slices;
    rec.wiener_eps = wiener_eps ? *wiener_eps : 1e-3 * acc.denominator.maxCoeff();
    if (!(rec.wiener_eps > 0.0)) throw std::invalid_argument("finalize_volume: wiener_eps must be positive");

    FourierVolume ratio(n, acc.voxel_size);
    ratio.data = acc.numerator.data / (acc.denominator + rec.wiener_eps).cast<Complex>();

    rec.spectrum = FourierVolume(n, acc.voxel_size);
    for (Index z = 0; z < n; ++z)
        for (Index y = 0; y < n; ++y)
            for (Index x = 0; x < n; ++x)
                rec.spectrum(z, y, x) = 0.5 * (ratio(z, y, x) + std::conj(ratio((n - z) % n, (n - y) % n, (n - x) % n)));

    const FourierVolume c = ifft3_centered_complex(rec.spectrum);
    rec.volume = Volume(n, acc.voxel_size);
    rec.volume.data = c.data.real();
    const double re = c.data.real().matrix().norm();
    rec.imag_residual = re > 0.0 ? c.data.imag().matrix().norm() / re : 0.0;
    rec.filled_fraction =
        static_cast<double>((acc.denominator > 0.0).count()) / static_cast<double>(acc.denominator.size());
    return rec;
}

Reconstruction backproject_dataset(const std::vector<Image>& stack, const std::vector<Pose>& poses,
                                   const std::vector<CtfParams>& ctfs, const BackprojectOptions& options) {
    if (stack.empty()) throw std::invalid_argument("backproject_dataset: empty stack");
    if (poses.size() != stack.size())
        throw std::invalid_argument("backproject_dataset: " + std::to_string(stack.size()) + " images but " +
                                    std::to_string(poses.size()) + " poses");
    if (!ctfs.empty() && ctfs.size() != stack.size())
        throw std::invalid_argument("backproject_dataset: " + std::to_string(stack.size()) + " images but " +
                                    std::to_string(ctfs.size()) + " CTF rows");
    const Index n = stack[0].size();
    for (const auto& img : stack)
        if (img.data.rows() != n || img.data.cols() != n)
            throw std::invalid_argument("backproject_dataset: images differ in size");

    const std::vector<std::size_t> order = canonical_order(stack, poses, ctfs);
    Accumulator acc(n, stack[0].pixel_size);
    const std::size_t batch = 256;
    std::vector<PreparedSlice> prepared;
    for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t count = std::min(batch, order.size() - start);
        prepared.assign(count, PreparedSlice{});
        parallel_blocks(count, options.threads, [&](std::size_t b, std::size_t e, int) {
            for (std::size_t k = b; k < e; ++k) {
                const std::size_t i = order[start + k];
                std::optional<CtfParams> ctf;
                if (options.use_ctf && !ctfs.empty()) ctf = ctfs[i];
                prepared[k] = prepare(fft2_centered(stack[i]), poses[i], ctf);
            }
        });
        // Each worker owns a z slab and visits slices in the same order, so sums are thread-count invariant.
        parallel_blocks(static_cast<std::size_t>(n), options.threads, [&](std::size_t z0, std::size_t z1, int) {
            for (const auto& s : prepared) deposit(acc, s, static_cast<Index>(z0), static_cast<Index>(z1));
        });
        acc.slices += count;
    }
    return finalize_volume(acc, options.wiener_eps);
}

nlohmann::json diagnostics_json(const Reconstruction& rec) {
    return {{"slices", rec.slices},
            {"wiener_eps", rec.wiener_eps},
            {"imag_residual", rec.imag_residual},
            {"filled_fraction", rec.filled_fraction},
            {"grid_size", rec.volume.n},
            {"voxel_size", rec.volume.voxel_size}};
}

}  // namespace cryoar
