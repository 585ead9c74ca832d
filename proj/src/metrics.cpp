#include "cryoar/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "cryoar/csv.hpp"
#include "cryoar/error.hpp"
#include "cryoar/parallel.hpp"
#include "cryoar/random.hpp"

namespace cryoar {

RotationError rotation_fnorm_error(const std::vector<Rotation>& gt, const std::vector<Rotation>& est,
                                   std::size_t n_reference_samples, std::uint64_t seed, int threads) {
    if (gt.size() != est.size())
        throw std::invalid_argument("rotation_fnorm_error: " + std::to_string(gt.size()) + " ground-truth vs " +
                                    std::to_string(est.size()) + " estimated rotations");
    if (gt.empty()) throw std::invalid_argument("rotation_fnorm_error: empty input");
    if (n_reference_samples == 0) throw std::invalid_argument("rotation_fnorm_error: need at least one reference");
    const std::size_t n = gt.size();

    std::vector<std::size_t> refs(n);
    std::iota(refs.begin(), refs.end(), std::size_t{0});
    if (n > n_reference_samples) {
        Rng rng = make_stream(seed, 0);
        std::shuffle(refs.begin(), refs.end(), rng);
        refs.resize(n_reference_samples);
        std::sort(refs.begin(), refs.end());
    }

    std::vector<double> per_ref(refs.size());
    parallel_blocks(refs.size(), threads, [&](std::size_t b, std::size_t e, int) {
        for (std::size_t k = b; k < e; ++k) {
            const std::size_t i = refs[k];
            const Mat3 gi = gt[i].matrix().transpose(), ei = est[i].matrix().transpose();
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) sum += (gi * gt[j].matrix() - ei * est[j].matrix()).norm();
            per_ref[k] = sum / static_cast<double>(n);
        }
    });

    RotationError out;
    out.references = refs.size();
    out.min = *std::min_element(per_ref.begin(), per_ref.end());
    std::vector<double> sorted = per_ref;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    out.median = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    return out;
}

double translation_error(const std::vector<Vec2>& gt, const std::vector<Vec2>& est) {
    if (gt.size() != est.size())
        throw std::invalid_argument("translation_error: " + std::to_string(gt.size()) + " vs " +
                                    std::to_string(est.size()) + " shifts");
    if (gt.empty()) throw std::invalid_argument("translation_error: empty input");
    double sum = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) sum += (gt[i] - est[i]).norm();
    return sum / static_cast<double>(gt.size());
}

FscCurve fsc(const Volume& a, const Volume& b) {
    if (a.n != b.n) throw std::invalid_argument("fsc: volume sizes differ");
    if (a.voxel_size != b.voxel_size) throw std::invalid_argument("fsc: voxel sizes differ");
    const FourierVolume fa = fft3_centered(a), fb = fft3_centered(b);
    const Eigen::Index n = a.n;
    const int shells = static_cast<int>(n / 2);
    std::vector<double> cross(static_cast<std::size_t>(shells), 0.0), pa(cross.size(), 0.0), pb(cross.size(), 0.0);
    std::vector<std::size_t> count(cross.size(), 0);
    const double half = static_cast<double>(n / 2);
    for (Eigen::Index z = 0; z < n; ++z)
        for (Eigen::Index y = 0; y < n; ++y)
            for (Eigen::Index x = 0; x < n; ++x) {
                const double kz = z - half, ky = y - half, kx = x - half;
                const long r = std::lround(std::sqrt(kx * kx + ky * ky + kz * kz));
                if (r < 1 || r >= shells) continue;
                const Complex va = fa(z, y, x), vb = fb(z, y, x);
                const auto s = static_cast<std::size_t>(r);
                cross[s] += (va * std::conj(vb)).real();
                pa[s] += std::norm(va);
                pb[s] += std::norm(vb);
                ++count[s];
            }
    FscCurve curve;
    curve.voxel_size = a.voxel_size;
    for (int r = 1; r < shells; ++r) {
        const auto s = static_cast<std::size_t>(r);
        const double denom = std::sqrt(pa[s] * pb[s]);
        const bool empty = count[s] == 0 || denom == 0.0;
        curve.shell_freqs.push_back(static_cast<double>(r) / static_cast<double>(n));
        curve.correlations.push_back(empty ? 0.0 : std::clamp(cross[s] / denom, -1.0, 1.0));
        curve.empty.push_back(empty);
    }
    return curve;
}

Resolution resolution_at_threshold(const FscCurve& curve, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument("resolution_at_threshold: threshold must lie in (0, 1), got " +
                                    std::to_string(threshold));
    if (curve.shell_freqs.empty() || curve.shell_freqs.size() != curve.correlations.size())
        throw std::invalid_argument("resolution_at_threshold: malformed curve");
    for (std::size_t i = 1; i < curve.shell_freqs.size(); ++i)
        if (!(curve.shell_freqs[i] > curve.shell_freqs[i - 1]))
            throw std::invalid_argument("resolution_at_threshold: shell frequencies must increase");

    Resolution res;
    const auto& f = curve.shell_freqs;
    const auto& c = curve.correlations;
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (c[i] >= threshold) continue;
        if (i == 0) {
            res.frequency = f[0];
        } else {
            const double t = (c[i - 1] - threshold) / (c[i - 1] - c[i]);
            res.frequency = f[i - 1] + t * (f[i] - f[i - 1]);
        }
        res.angstrom = curve.voxel_size / res.frequency;
        return res;
    }
    res.at_nyquist = true;
    res.frequency = 0.5;
    res.angstrom = 2.0 * curve.voxel_size;
    return res;
}

nlohmann::json fsc_json(const FscCurve& curve) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t i = 0; i < curve.shell_freqs.size(); ++i)
        arr.push_back({curve.shell_freqs[i], curve.correlations[i]});
    return arr;
}

void write_fsc_text(const std::filesystem::path& path, const FscCurve& curve) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "# freq_cycles_per_voxel fsc\n";
    for (std::size_t i = 0; i < curve.shell_freqs.size(); ++i)
        out << csv::format_double(curve.shell_freqs[i]) << ' ' << csv::format_double(curve.correlations[i]) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace cryoar
