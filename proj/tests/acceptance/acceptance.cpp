// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <string>

#include "cryoar/metrics.hpp"
#include "cryoar/model.hpp"
#include "cryoar/planarmap.hpp"
#include "cryoar/reconstruct.hpp"
#include "cryoar/simulator.hpp"

using namespace cryoar;
using ad::Tensor;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

Image random_image(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> normal;
    Image img(n, 1.0);
    for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data.data()[i] = normal(rng);
    return img;
}

Volume phantom64(std::uint64_t seed) {
    PhantomSpec spec;
    spec.grid_size = 64;
    spec.seed = seed;
    return make_phantom(spec);
}

// ---- 1 ----
Outcome fourier_slice() {
    PhantomSpec spec;
    spec.grid_size = 64;
    spec.support_radius_fraction = 0.25;
    spec.sigma_range_px = {2.0, 4.0};
    spec.seed = 5;
    const Volume vol = make_phantom(spec);
    const SliceExtractor ex(fft3_centered(vol));
    const double r2 = nyquist_radius(64) * nyquist_radius(64);
    Rng rng(6);
    double worst = 0;
    for (int i = 0; i < 50; ++i) {
        const Rotation r = sample_uniform_rotation(rng);
        const FourierImage slice = ex.extract(r);
        const FourierImage proj = fft2_centered(real_space_project(vol, Pose{r, Vec2::Zero()}));
        double num = 0, den = 0;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if ((x - 32) * (x - 32) + (y - 32) * (y - 32) <= r2) {
                    num += std::norm(slice(y, x) - proj(y, x));
                    den += std::norm(proj(y, x));
                }
        worst = std::max(worst, std::sqrt(num / den));
    }
    return {worst < 1e-2, fmt("worst relative L2 over 50 views %.3e (< 1e-2)", worst)};
}

// ---- 2 ----
Outcome integer_shift() {
    const Image x = random_image(32, 7);
    double worst = 0;
    for (const Vec2 t : {Vec2(3, 0), Vec2(-5, 2), Vec2(7, -11), Vec2(16, 16)}) {
        const Image s = ifft2_centered(apply_phase_shift(fft2_centered(x), t, -1));
        for (int r = 0; r < 32; ++r)
            for (int c = 0; c < 32; ++c) {
                const int sr = ((r - static_cast<int>(t.y())) % 32 + 32) % 32;
                const int sc = ((c - static_cast<int>(t.x())) % 32 + 32) % 32;
                worst = std::max(worst, std::abs(s(r, c) - x(sr, sc)));
            }
    }
    return {worst < 1e-10, fmt("max abs deviation from circular shift %.3e (< 1e-10)", worst)};
}

// ---- 3 ----
Outcome planar_round_trip() {
    Rng rng(8);
    std::uniform_real_distribution<double> shift(-10.0, 10.0);
    double clean_rot = 0, clean_shift = 0;
    for (int i = 0; i < 1000; ++i) {
        const Pose ref{sample_uniform_rotation(rng), Vec2(shift(rng), shift(rng))};
        const Pose p{sample_uniform_rotation(rng), Vec2(shift(rng), shift(rng))};
        const auto est = maps_to_poses({gt_relative_map(ref, ref, 32, 32, 64), gt_relative_map(p, ref, 32, 32, 64)}, 64);
        clean_rot = std::max(clean_rot, (est[1].rot.matrix() - relative_rotation(p.rot, ref.rot).matrix()).norm());
        clean_shift = std::max(clean_shift, (est[1].shift - p.shift).norm());
    }
    std::vector<double> rot_err, shift_err;
    std::normal_distribution<double> noise(0.0, 0.01);
    std::uniform_real_distribution<double> small(-5.0, 5.0);
    for (int i = 0; i < 100; ++i) {
        const Pose ref{sample_uniform_rotation(rng), Vec2::Zero()};
        const Pose p{sample_uniform_rotation(rng), Vec2(small(rng), small(rng))};
        std::vector<PlanarMap> maps{gt_relative_map(ref, ref, 32, 32, 32), gt_relative_map(p, ref, 32, 32, 32)};
        for (auto& m : maps)
            for (Eigen::Index k = 0; k < m.points.size(); ++k) m.points.data()[k] += noise(rng);
        const auto est = maps_to_poses(maps, 32);
        rot_err.push_back((est[1].rot.matrix() - relative_rotation(p.rot, ref.rot).matrix()).norm());
        shift_err.push_back((est[1].shift - p.shift).norm());
    }
    const double r95 = percentile(rot_err, 0.95), s95 = percentile(shift_err, 0.95);
    const bool pass = clean_rot < 1e-9 && clean_shift < 1e-9 && r95 < 0.02 && s95 < 0.1;
    return {pass, fmt("noiseless max |dR| %.2e, max shift %.2e px; sigma 0.01: p95 |dR| %.4f, p95 shift %.4f px",
                      clean_rot, clean_shift, r95, s95)};
}

// ---- 4 ----
Outcome ransac_outliers() {
    int good = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng = make_stream(1000 + seed, 0);
        const Pose ref{sample_uniform_rotation(rng), Vec2::Zero()};
        const Pose p{sample_uniform_rotation(rng), Vec2::Zero()};
        PlanarMap m = gt_relative_map(p, ref, 32, 32, 32);
        std::uniform_real_distribution<double> coord(-2.0, 2.0), u(0.0, 1.0);
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.pixel_count()));
        for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = static_cast<Eigen::Index>(k);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t k = 0; k < idx.size() * 3 / 10; ++k)
            m.points.row(idx[k]) = Eigen::RowVector3d(coord(rng), coord(rng), coord(rng));
        RegressionConfig cfg;
        cfg.ransac_enabled = true;
        cfg.seed = seed;
        try {
            const auto est = maps_to_poses({gt_relative_map(ref, ref, 32, 32, 32), m}, 32, cfg);
            if ((est[1].rot.matrix() - relative_rotation(p.rot, ref.rot).matrix()).norm() < 0.05) ++good;
        } catch (const NumericalError&) {
        }
    }
    return {good >= 95, fmt("%d/100 trials with |dR| < 0.05 at 30%% outliers (>= 95)", good)};
}

Dataset dataset512(const Volume& vol, bool ctf) {
    DatasetManifest m;
    m.n_particles = 512;
    m.image_size = 64;
    m.ctf_enabled = ctf;
    m.seed = 21;
    SimulationOptions opts;
    return simulate_dataset(vol, m, opts);
}

// ---- 5 ----
Outcome clean_reconstruction() {
    const Volume truth = phantom64(20);
    const Dataset d = dataset512(truth, false);
    BackprojectOptions opts;
    const FscCurve c = fsc(backproject_dataset(d.images, d.poses, {}, opts).volume, truth);
    double worst = 1.0;
    for (std::size_t r = 0; r < c.shell_freqs.size(); ++r)
        if (c.shell_freqs[r] < 0.25) worst = std::min(worst, c.correlations[r]);
    return {worst >= 0.5, fmt("lowest FSC below 0.25 cycles/px %.4f (>= 0.5)", worst)};
}

// ---- 6 ----
Outcome ctf_weighting() {
    const Volume truth = phantom64(20);
    const Dataset d = dataset512(truth, true);
    BackprojectOptions weighted, plain;
    plain.use_ctf = false;
    const FscCurve cw = fsc(backproject_dataset(d.images, d.poses, d.ctfs, weighted).volume, truth);
    const FscCurve cu = fsc(backproject_dataset(d.images, d.poses, d.ctfs, plain).volume, truth);
    double mw = 0, mu = 0;
    for (std::size_t r = 2; r <= 16; ++r) {
        mw += cw.correlations[r - 1] / 15.0;
        mu += cu.correlations[r - 1] / 15.0;
    }
    return {mw > mu, fmt("mean FSC over shells 2-16: weighted %.4f, unweighted %.4f", mw, mu)};
}

// ---- 7 ----
Outcome snr_calibration() {
    const Volume vol = phantom64(30);
    std::string detail;
    bool pass = true;
    for (const double target : {0.05, 0.1, 1.0}) {
        DatasetManifest m;
        m.n_particles = 100;
        m.image_size = 64;
        m.snr = target;
        m.shift_range_px = 10;
        m.ctf_enabled = true;
        m.seed = 31;
        SimulationOptions opts;
        opts.keep_clean = true;
        const Dataset d = simulate_dataset(vol, m, opts);
        double avg = 0;
        for (std::size_t i = 0; i < d.images.size(); ++i) avg += measure_snr(d.clean[i], d.images[i]);
        avg /= static_cast<double>(d.images.size());
        const double rel = std::abs(avg - target) / target;
        pass = pass && rel <= 0.05;
        detail += fmt("%s%.2f -> %.4f (%.1f%%)", detail.empty() ? "" : ", ", target, avg, 100 * rel);
    }
    return {pass, "measured SNR " + detail + " (within 5%)"};
}

ModelConfig gradient_config() {
    ModelConfig c;
    c.image_size = 16;
    c.patch_size = 8;
    c.d_enc = 32;
    c.d_dec = 32;
    c.seed = 8;
    return c;
}

Tensor randn(const ad::Shape& shape, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, scale);
    ad::Array v(ad::shape_size(shape));
    for (auto& x : v) x = normal(rng);
    return Tensor::from(shape, v, true);
}

Tensor probe(const Tensor& y) {
    Tensor w = randn(y.shape(), 99);
    w = Tensor::from(w.shape(), w.values(), false);
    return ad::sum(ad::mul(y, w));
}

// ---- 8 ----
Outcome gradients() {
    const ToyModel m(gradient_config());
    Rng rng(9);
    const std::vector<Pose> poses{{sample_uniform_rotation(rng), Vec2(1, 0)}, {sample_uniform_rotation(rng), Vec2(-2, 1)}};
    const std::vector<Image> views{random_image(16, 40), random_image(16, 41)};
    std::vector<Tensor> inputs;
    for (const auto& [_, t] : m.parameters()) inputs.push_back(t);
    const double model_err = ad::gradient_check([&] { return m.forward_loss({views}, {poses}); }, inputs, 1e-5, 400, 3);

    using namespace ad;
    const Tensor a = randn({3, 4}, 1), b = randn({3, 4}, 2), v = randn({4}, 3);
    const Tensor c = randn({2, 3, 5}, 5), g = randn({5}, 6), bias = randn({5}, 7);
    const Tensor pos = Tensor::from({2, 3, 5}, c.values().abs() + 0.5, true);
    const Tensor m3 = randn({2, 3, 4}, 9), w = randn({4, 5}, 10), s1 = randn({2, 1, 4}, 15);
    const Tensor x = randn({3, 4, 2}, 11), y = randn({3, 2, 5}, 12), yt = randn({3, 5, 2}, 13);
    const Array k = randn({4}, 4).values();
    const std::vector<std::pair<const char*, std::function<double()>>> ops = {
        {"add", [&] { return gradient_check([&] { return probe(add(a, b)); }, {a, b}); }},
        {"sub", [&] { return gradient_check([&] { return probe(sub(a, b)); }, {a, b}); }},
        {"mul", [&] { return gradient_check([&] { return probe(mul(a, b)); }, {a, b}); }},
        {"scale", [&] { return gradient_check([&] { return probe(scale(a, -1.7)); }, {a}); }},
        {"add_scalar", [&] { return gradient_check([&] { return probe(add_scalar(a, 0.3)); }, {a}); }},
        {"add_rowvec", [&] { return gradient_check([&] { return probe(add_rowvec(a, v)); }, {a, v}); }},
        {"mul_const", [&] { return gradient_check([&] { return probe(mul_const(a, k)); }, {a}); }},
        {"pair_swap", [&] { return gradient_check([&] { return probe(pair_swap(a)); }, {a}); }},
        {"matmul", [&] { return gradient_check([&] { return probe(matmul(m3, w)); }, {m3, w}); }},
        {"bmm", [&] { return gradient_check([&] { return probe(bmm(x, y)); }, {x, y}); }},
        {"bmm_t", [&] { return gradient_check([&] { return probe(bmm(x, yt, true)); }, {x, yt}); }},
        {"transpose", [&] { return gradient_check([&] { return probe(transpose(m3)); }, {m3}); }},
        {"reshape", [&] { return gradient_check([&] { return probe(reshape(m3, {6, 4})); }, {m3}); }},
        {"permute", [&] { return gradient_check([&] { return probe(permute(m3, {2, 0, 1})); }, {m3}); }},
        {"concat", [&] { return gradient_check([&] { return probe(concat({m3, s1}, 1)); }, {m3, s1}); }},
        {"slice", [&] { return gradient_check([&] { return probe(slice(m3, 2, 1, 3)); }, {m3}); }},
        {"split",
         [&] {
             return gradient_check(
                 [&] {
                     const auto parts = split(m3, 1, {1, 2});
                     return add(probe(parts[0]), scale(probe(parts[1]), 0.5));
                 },
                 {m3});
         }},
        {"gather", [&] { return gradient_check([&] { return probe(gather(m3, {1, 0, 1, 1})); }, {m3}); }},
        {"softmax", [&] { return gradient_check([&] { return probe(softmax(c)); }, {c}); }},
        {"layernorm", [&] { return gradient_check([&] { return probe(layernorm(c, g, bias)); }, {c, g, bias}); }},
        {"gelu", [&] { return gradient_check([&] { return probe(gelu(c)); }, {c}); }},
        {"exp", [&] { return gradient_check([&] { return probe(exp(c)); }, {c}); }},
        {"log", [&] { return gradient_check([&] { return probe(log(pos)); }, {pos}); }},
        {"clamp_max", [&] { return gradient_check([&] { return probe(clamp_max(c, 0.2)); }, {c}); }},
        {"sum", [&] { return gradient_check([&] { return sum(mul(a, a)); }, {a}); }},
        {"mean", [&] { return gradient_check([&] { return scale(mean(exp(a)), 3.0); }, {a}); }},
        {"sum_last", [&] { return gradient_check([&] { return probe(sum_last(a)); }, {a}); }},
    };
    double op_err = 0;
    const char* worst_op = "";
    for (const auto& [name, check] : ops)
        if (const double e = check(); e > op_err) {
            op_err = e;
            worst_op = name;
        }
    const bool pass = model_err < 1e-4 && op_err < 1e-6;
    return {pass, fmt("model loss max rel error %.2e over 400 coords (< 1e-4); worst op %s %.2e over %zu ops (< 1e-6)",
                      model_err, worst_op, op_err, ops.size())};
}

// ---- 9 ----
Outcome architecture() {
    const ToyModel m{ModelConfig{}};
    std::vector<Image> views;
    for (int i = 0; i < 5; ++i) views.push_back(random_image(16, 60 + static_cast<std::uint64_t>(i)));
    const std::vector<Image> permuted{views[0], views[4], views[2], views[1], views[3]};
    const DecodedViews a = m.decode_views(m.encode_views(m.patch_pixels(views), 5), 1, 5);
    const DecodedViews b = m.decode_views(m.encode_views(m.patch_pixels(permuted), 5), 1, 5);
    const double perm = (a.reference.values() - b.reference.values()).abs().maxCoeff();

    std::vector<double> ns, flops;
    for (int n : {2, 4, 8, 16}) {
        std::vector<Image> v;
        for (int i = 0; i < n; ++i) v.push_back(random_image(16, 70 + static_cast<std::uint64_t>(i)));
        const Tensor enc = m.encode_views(m.patch_pixels(v), n);
        ad::reset_flop_count();
        m.decode_views(enc, 1, n);
        ns.push_back(n);
        flops.push_back(static_cast<double>(ad::flop_count()));
    }
    Eigen::MatrixXd design(4, 2);
    Eigen::VectorXd obs(4);
    for (int i = 0; i < 4; ++i) {
        design(i, 0) = 1.0;
        design(i, 1) = ns[static_cast<std::size_t>(i)];
        obs[i] = flops[static_cast<std::size_t>(i)];
    }
    const Eigen::Vector2d fit = design.colPivHouseholderQr().solve(obs);
    double lin = 0;
    for (int i = 0; i < 4; ++i) lin = std::max(lin, std::abs((design.row(i) * fit)(0) - obs[i]) / obs[i]);

    double min_conf = 1e300;
    for (int n : {1, 2, 8}) {
        std::vector<Image> v;
        for (int i = 0; i < n; ++i) {
            Image img = random_image(16, 80 + static_cast<std::uint64_t>(i));
            img.data *= std::pow(10.0, i % 3);
            v.push_back(img);
        }
        min_conf = std::min(min_conf, m.forward({v}).confidence.values().minCoeff());
    }
    const bool pass = perm < 1e-10 && lin < 0.10 && min_conf > 1.0;
    return {pass, fmt("reference change under target permutation %.2e; worst deviation from linear decoder flops %.2f%%; "
                      "min confidence %.6f",
                      perm, 100 * lin, min_conf)};
}

// ---- 10 ----
Volume toy_phantom() {
    PhantomSpec spec;
    spec.grid_size = 16;
    spec.n_blobs = 8;
    spec.sigma_range_px = {1.2, 2.5};
    spec.seed = 1;
    return make_phantom(spec);
}

Outcome toy_training() {
    const Volume vol = toy_phantom();

    ToyModel overfit{ModelConfig{}};
    TrainData fixed;
    fixed.phantom = vol;
    fixed.batch_size = 8;
    fixed.fixed_samples = 8;
    fixed.seed = 2;
    TrainStage memorize;
    memorize.n_steps = 2000;
    const TrainResult ro = train_toy(overfit, {memorize}, fixed);
    const double first = ro.trace.front().loss, last = ro.trace.back().loss;

    auto short_run = [&] {
        ToyModel model{ModelConfig{}};
        TrainData data;
        data.phantom = vol;
        data.batch_size = 4;
        data.seed = 5;
        TrainStage s;
        s.n_steps = 20;
        return train_toy(model, {s}, data).trace;
    };
    const auto t1 = short_run(), t2 = short_run();
    bool deterministic = t1.size() == t2.size();
    for (std::size_t i = 0; deterministic && i < t1.size(); ++i) deterministic = t1[i].loss == t2[i].loss;

    ToyModel model{ModelConfig{}};
    TrainData data;
    data.phantom = vol;
    data.batch_size = 16;
    data.seed = 3;
    TrainStage st;
    st.n_steps = 10000;
    st.reference = ReferenceMode::Anchor;
    st.learning_rate = 1e-3;
    st.lr_end_fraction = 0.05;
    const TrainResult rt = train_toy(model, {st}, data);

    Rng rng = make_stream(99, 0);
    std::vector<Image> stack;
    std::vector<Rotation> gt;
    stack.push_back(simulate_particle(vol, Pose{}, std::nullopt, kNoiseless, rng).image);
    gt.push_back(Rotation::identity());
    for (int i = 0; i < 63; ++i) {
        Pose p;
        p.rot = sample_uniform_rotation(rng);
        stack.push_back(simulate_particle(vol, p, std::nullopt, kNoiseless, rng).image);
        gt.push_back(p.rot);
    }
    std::vector<Rotation> est;
    for (const auto& p : infer_poses(model, stack, 2)) est.push_back(p.rot);
    const RotationError err = rotation_fnorm_error(gt, est);

    const bool pass = last < 0.1 * first && deterministic && err.min < 0.5;
    return {pass, fmt("overfit loss %.4f -> %.4f in 2000 steps (< 10%% of initial); trace deterministic: %s; held-out "
                      "rotation F-norm min %.4f, median %.4f (< 0.5); training %.0f s",
                      first, last, deterministic ? "yes" : "no", err.min, err.median, ro.seconds + rt.seconds)};
}

// ---- 11 ----
Outcome metric_sanity() {
    Rng rng(12);
    std::vector<Rotation> gt;
    for (int i = 0; i < 200; ++i) gt.push_back(sample_uniform_rotation(rng));
    const Rotation q = sample_uniform_rotation(rng);
    std::vector<Rotation> est;
    for (const auto& r : gt) est.push_back(q * r);
    const RotationError re = rotation_fnorm_error(gt, est);

    const Volume v = phantom64(40);
    double fsc_dev = 0;
    for (const double c : fsc(v, v).correlations) fsc_dev = std::max(fsc_dev, std::abs(c - 1.0));

    FscCurve step;
    step.voxel_size = 2.0;
    for (int r = 0; r < 31; ++r) {
        step.shell_freqs.push_back((r + 0.5) / 64.0);
        step.correlations.push_back(step.shell_freqs.back() < 0.25 ? 1.0 : 0.0);
        step.empty.push_back(false);
    }
    const Resolution res = resolution_at_threshold(step, 0.5);
    const bool pass = re.min < 1e-12 && re.median < 1e-12 && fsc_dev < 1e-9 && std::abs(res.angstrom - 8.0) < 1e-9;
    return {pass, fmt("rotation error of globally rotated copy %.1e; max |FSC(V,V)-1| %.1e; step curve %.6f A at 2 A voxels",
                      re.median, fsc_dev, res.angstrom)};
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int id;
        const char* name;
        double limit_s;
        Outcome (*run)();
    };
    const std::vector<Criterion> all = {
        {1, "Fourier slice oracle", 30, fourier_slice},
        {2, "shift convention", 1, integer_shift},
        {3, "planar map round trip", 60, planar_round_trip},
        {4, "RANSAC robustness", 60, ransac_outliers},
        {5, "clean reconstruction", 300, clean_reconstruction},
        {6, "CTF weighting benefit", 600, ctf_weighting},
        {7, "SNR calibration", 120, snr_calibration},
        {8, "gradient correctness", 300, gradients},
        {9, "architecture invariants", 60, architecture},
        {10, "toy training", 900, toy_training},
        {11, "metric sanity", 60, metric_sanity},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::stoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool pass = o.pass && s < c.limit_s;
        failed += !pass;
        std::printf("criterion %2d %-24s %s  %s; %.1f s (limit %.0f s)\n", c.id, c.name, pass ? "PASS" : "FAIL",
                    o.detail.c_str(), s, c.limit_s);
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
