#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "cryoar/model.hpp"

using namespace cryoar;
using ad::Tensor;

namespace {

Image random_image(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> normal;
    Image img(n, 1.0);
    for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data.data()[i] = normal(rng);
    return img;
}

ModelConfig micro_config() {
    ModelConfig c;
    c.image_size = 16;
    c.patch_size = 8;
    c.d_enc = 32;
    c.d_dec = 32;
    c.n_heads = 2;
    c.enc_depth = 1;
    c.dec_depth = 1;
    c.seed = 3;
    return c;
}

Volume toy_phantom(int n = 16) {
    PhantomSpec spec;
    spec.grid_size = n;
    spec.n_blobs = 6;
    spec.sigma_range_px = {1.2, 2.5};
    spec.seed = 1;
    return make_phantom(spec);
}

Tensor& param(ToyModel& m, const std::string& name) {
    for (auto& [n, t] : m.parameters())
        if (n == name) return t;
    throw std::logic_error("no parameter " + name);
}

Eigen::ArrayXd token_block(const Tensor& t, Eigen::Index view, Eigen::Index tokens, Eigen::Index d) {
    return t.values().segment(view * tokens * d, tokens * d);
}

}  // namespace

TEST(ModelConfig, ValidationAndJson) {
    ModelConfig c;
    EXPECT_NO_THROW(c.validate());
    c.patch_size = 5;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.dec_depth = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.loss_alpha = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);

    ModelConfig d;
    d.d_enc = 48;
    d.loss_alpha = 0.35;
    const ModelConfig back = model_config_from_json(to_json(d));
    EXPECT_EQ(back.d_enc, 48);
    EXPECT_EQ(back.loss_alpha, 0.35);
    auto j = to_json(d);
    j["mystery"] = 1;
    EXPECT_THROW(model_config_from_json(j), std::invalid_argument);
}

TEST(Patchify, TokenCountAndZeroImage) {
    ModelConfig c = micro_config();
    c.image_size = 32;
    const ToyModel m(c);
    const Tensor pix = m.patch_pixels({Image(32, 1.0, 0.0)});
    EXPECT_EQ(pix.shape(), (ad::Shape{1, 16, 64}));
    const Tensor tok = m.patchify(pix);
    EXPECT_EQ(tok.shape(), (ad::Shape{1, 16, 32}));
    EXPECT_EQ(tok.values().abs().maxCoeff(), 0.0);
    EXPECT_THROW(m.patch_pixels({Image(16, 1.0)}), std::invalid_argument);
}

TEST(Patchify, PatchPermutationPermutesTokens) {
    ModelConfig c = micro_config();
    c.image_size = 32;
    const ToyModel m(c);
    const Image img = random_image(32, 1);
    Image swapped = img;
    // swap patch (0, 1) with patch (2, 3)
    swapped.data.block(0, 8, 8, 8) = img.data.block(16, 24, 8, 8);
    swapped.data.block(16, 24, 8, 8) = img.data.block(0, 8, 8, 8);
    const Tensor a = m.patchify(m.patch_pixels({img})), b = m.patchify(m.patch_pixels({swapped}));
    const int d = 32;
    for (int t = 0; t < 16; ++t) {
        const int src = t == 1 ? 11 : t == 11 ? 1 : t;
        EXPECT_LT((a.values().segment(src * d, d) - b.values().segment(t * d, d)).abs().maxCoeff(), 1e-12) << t;
    }
}

TEST(Encoder, IdenticalViewsDifferByViewEmbedding) {
    ToyModel m(micro_config());
    Rng rng(2);
    std::normal_distribution<double> normal(0.0, 0.5);
    for (auto name : {"view.ref", "view.tgt"})
        for (auto& v : param(m, name).mutable_values()) v = normal(rng);
    const Image img = random_image(16, 3);
    const Tensor pix = m.patch_pixels({img, img, img});
    const Tensor bare = m.encode_views(pix, 3, false), emb = m.encode_views(pix, 3, true);
    EXPECT_EQ(bare.shape(), (ad::Shape{3, 4, 32}));
    const Eigen::Index t = 4, d = 32;
    EXPECT_TRUE((token_block(bare, 0, t, d) == token_block(bare, 1, t, d)).all());
    EXPECT_TRUE((token_block(bare, 0, t, d) == token_block(bare, 2, t, d)).all());
    const Eigen::ArrayXd ref = param(m, "view.ref").values(), tgt = param(m, "view.tgt").values();
    for (Eigen::Index k = 0; k < t; ++k) {
        const Eigen::ArrayXd diff = token_block(emb, 0, t, d).segment(k * d, d) - token_block(emb, 1, t, d).segment(k * d, d);
        EXPECT_LT((diff - (ref - tgt)).abs().maxCoeff(), 1e-12);
    }
    EXPECT_TRUE((token_block(emb, 1, t, d) == token_block(emb, 2, t, d)).all());
}

TEST(Encoder, WithoutRopeTranslationByOnePatchPermutesTokens) {
    ModelConfig c = micro_config();
    c.image_size = 32;
    c.rope_enabled = false;
    const ToyModel m(c);
    const Image img = random_image(32, 4);
    Image rolled(32, 1.0);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) rolled(y, (x + 8) % 32) = img(y, x);
    const Tensor a = m.encode_views(m.patch_pixels({img}), 1), b = m.encode_views(m.patch_pixels({rolled}), 1);
    const int d = 32;
    for (int r = 0; r < 4; ++r)
        for (int col = 0; col < 4; ++col) {
            const int src = r * 4 + col, dst = r * 4 + (col + 1) % 4;
            EXPECT_LT((a.values().segment(src * d, d) - b.values().segment(dst * d, d)).abs().maxCoeff(), 1e-10);
        }
}

TEST(Encoder, RejectsTooManyViews) {
    ModelConfig c = micro_config();
    c.max_views = 2;
    const ToyModel m(c);
    const Image img = random_image(16, 5);
    EXPECT_THROW(m.encode_views(m.patch_pixels({img, img, img}), 3), std::invalid_argument);
    EXPECT_THROW(m.forward({{img, img, img}}), std::invalid_argument);
}

TEST(Decoder, SingleViewSkipsCrossAttention) {
    ToyModel m(micro_config());
    const Tensor enc = m.encode_views(m.patch_pixels({random_image(16, 6)}), 1);
    const DecodedViews a = m.decode_views(enc, 1, 1);
    EXPECT_FALSE(a.targets.defined());
    for (auto& [name, t] : m.parameters())
        if (name.find("int_ca") != std::string::npos) t.mutable_values() += 0.7;
    const DecodedViews b = m.decode_views(enc, 1, 1);
    EXPECT_TRUE((a.reference.values() == b.reference.values()).all());
}

TEST(Decoder, ReferenceInvariantToTargetOrder) {
    const ToyModel m(micro_config());
    std::vector<Image> views;
    for (int i = 0; i < 5; ++i) views.push_back(random_image(16, 10 + static_cast<std::uint64_t>(i)));
    std::vector<Image> permuted{views[0], views[3], views[1], views[4], views[2]};
    const DecodedViews a = m.decode_views(m.encode_views(m.patch_pixels(views), 5), 1, 5);
    const DecodedViews b = m.decode_views(m.encode_views(m.patch_pixels(permuted), 5), 1, 5);
    EXPECT_LT((a.reference.values() - b.reference.values()).abs().maxCoeff(), 1e-10);
    // Targets follow their images.
    const Eigen::Index blk = 4 * 32;
    EXPECT_LT((a.targets.values().segment(2 * blk, blk) - b.targets.values().segment(0, blk)).abs().maxCoeff(), 1e-10);
}

TEST(Decoder, FlopsLinearInViews) {
    const ToyModel m(micro_config());
    std::vector<double> ns, flops;
    for (int n : {2, 4, 8, 16}) {
        std::vector<Image> views;
        for (int i = 0; i < n; ++i) views.push_back(random_image(16, 20 + static_cast<std::uint64_t>(i)));
        const Tensor enc = m.encode_views(m.patch_pixels(views), n);
        ad::reset_flop_count();
        m.decode_views(enc, 1, n);
        ns.push_back(n);
        flops.push_back(static_cast<double>(ad::flop_count()));
    }
    Eigen::MatrixXd a(4, 2);
    Eigen::VectorXd y(4);
    for (int i = 0; i < 4; ++i) {
        a(i, 0) = 1.0;
        a(i, 1) = ns[static_cast<std::size_t>(i)];
        y[i] = flops[static_cast<std::size_t>(i)];
    }
    const Eigen::Vector2d fit = a.colPivHouseholderQr().solve(y);
    for (int i = 0; i < 4; ++i) EXPECT_LT(std::abs((a.row(i) * fit)(0) - y[i]) / y[i], 0.10) << ns[static_cast<std::size_t>(i)];
    EXPECT_NEAR(flops[3] / flops[2], 2.0, 0.2);
}

TEST(Heads, ZeroWeightsGiveZeroPointsAndConfidenceTwo) {
    ToyModel m(micro_config());
    for (auto& [name, t] : m.parameters())
        if (name.rfind("head.", 0) == 0 && name.find(".n.") == std::string::npos) t.mutable_values().setZero();
    const MapPrediction pred = m.forward({{random_image(16, 30), random_image(16, 31), random_image(16, 32)}});
    EXPECT_EQ(pred.points.shape(), (ad::Shape{1, 3, 256, 3}));
    EXPECT_EQ(pred.confidence.shape(), (ad::Shape{1, 3, 256}));
    EXPECT_EQ(pred.points.values().abs().maxCoeff(), 0.0);
    EXPECT_TRUE((pred.confidence.values() == 2.0).all());
}

TEST(Heads, ConfidenceAboveOneAndShapeIndependentOfPatch) {
    for (int p : {4, 8}) {
        ModelConfig c = micro_config();
        c.patch_size = p;
        const ToyModel m(c);
        const MapPrediction pred = m.forward({{random_image(16, 33), random_image(16, 34)}});
        EXPECT_EQ(pred.points.shape(), (ad::Shape{1, 2, 256, 3}));
        EXPECT_GT(pred.confidence.values().minCoeff(), 1.0);
        const auto maps = m.predict_maps({random_image(16, 33), random_image(16, 34)});
        ASSERT_EQ(maps.size(), 2u);
        EXPECT_EQ(maps[0].height, 16);
        EXPECT_EQ(maps[0].pixel_count(), 256);
    }
}

TEST(Loss, PerfectPredictionValue) {
    const ToyModel m(micro_config());
    Rng rng(4);
    const std::vector<Pose> poses{{sample_uniform_rotation(rng), Vec2(1, -2)}, {sample_uniform_rotation(rng), Vec2(3, 0)}};
    ad::Array pts(2 * 256 * 3);
    for (int v = 0; v < 2; ++v) {
        const PlanarMap gt = gt_relative_map(poses[static_cast<std::size_t>(v)], poses[0], 16, 16, 16);
        for (int k = 0; k < 256; ++k)
            for (int c = 0; c < 3; ++c) pts[(v * 256 + k) * 3 + c] = gt.points(k, c);
    }
    const MapPrediction pred{Tensor::from({1, 2, 256, 3}, pts), Tensor::constant({1, 2, 256}, 2.0)};
    EXPECT_NEAR(m.loss_from_prediction(pred, {poses}).item(), -0.2 * std::log(2.0), 1e-15);
    EXPECT_THROW(m.loss_from_prediction(pred, {}), std::invalid_argument);
}

TEST(Loss, PerPixelConfidenceOptimum) {
    const ToyModel m(micro_config());
    const std::vector<Pose> poses(2);
    const PlanarMap gt = gt_relative_map(Pose{}, Pose{}, 16, 16, 16);
    ad::Array pts(2 * 256 * 3);
    for (int v = 0; v < 2; ++v)
        for (int k = 0; k < 256; ++k)
            for (int c = 0; c < 3; ++c) pts[(v * 256 + k) * 3 + c] = gt.points(k, c);
    const double err2 = 0.04;  // squared error at pixel 5 of view 1
    pts[(256 + 5) * 3 + 2] += std::sqrt(err2);
    auto loss_at = [&](double c) {
        ad::Array conf = ad::Array::Constant(512, 2.0);
        conf[256 + 5] = c;
        return m.loss_from_prediction({Tensor::from({1, 2, 256, 3}, pts), Tensor::from({1, 2, 256}, conf)}, {poses})
            .item();
    };
    const double alpha = 0.2, c_star = alpha / err2;  // 5.0
    double best_c = 0, best = 1e300;
    for (double c = 1.01; c < 20; c += 0.01)
        if (const double l = loss_at(c); l < best) {
            best = l;
            best_c = c;
        }
    EXPECT_NEAR(best_c, c_star, 0.011);
    // Above alpha / C the term grows with C.
    EXPECT_GT(loss_at(8.0), loss_at(7.0));
    EXPECT_LT(loss_at(3.0), loss_at(2.0));
}

TEST(Loss, GradientCheckMicroConfig) {
    const ToyModel m(micro_config());
    Rng rng(5);
    const std::vector<Pose> poses{{sample_uniform_rotation(rng), Vec2(1, 0)}, {sample_uniform_rotation(rng), Vec2(-2, 1)}};
    const std::vector<Image> views{random_image(16, 40), random_image(16, 41)};
    std::vector<Tensor> inputs;
    for (const auto& [_, t] : m.parameters()) inputs.push_back(t);
    const double err = ad::gradient_check([&] { return m.forward_loss({views}, {poses}); }, inputs, 1e-5, 300, 7);
    EXPECT_LT(err, 1e-4);
}

TEST(Curriculum, Endpoints) {
    const auto stages = default_curriculum(300);
    ASSERT_EQ(stages.size(), 3u);
    EXPECT_EQ(stages[0].snr_at(0), 10.0);
    EXPECT_NEAR(stages[1].snr_at(stages[1].n_steps - 1), 0.1, 1e-12);
    EXPECT_LT(stages[0].n_views, stages[1].n_views);
    EXPECT_LT(stages[1].n_views, stages[2].n_views);
    int total = 0;
    for (const auto& s : stages) total += s.n_steps;
    EXPECT_EQ(total, 300);
    TrainStage s;
    s.learning_rate = 1e-3;
    s.lr_end_fraction = 0.1;
    s.n_steps = 11;
    EXPECT_EQ(s.lr_at(0), 1e-3);
    EXPECT_NEAR(s.lr_at(10), 1e-4, 1e-15);
    const TrainStage back = train_stage_from_json(to_json(stages[1]));
    EXPECT_EQ(back.n_views, stages[1].n_views);
    EXPECT_EQ(back.snr_end, stages[1].snr_end);
    TrainStage bad;
    bad.n_views = 1;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Training, DeterministicTraceAndCheckpoint) {
    auto run = [] {
        ToyModel m(micro_config());
        TrainData data;
        data.phantom = toy_phantom();
        data.batch_size = 2;
        data.seed = 4;
        TrainStage s;
        s.n_steps = 4;
        s.snr = 1.0;
        s.ctf_enabled = true;
        const TrainResult r = train_toy(m, {s}, data);
        return std::pair{r, m};
    };
    auto [r1, m1] = run();
    auto [r2, m2] = run();
    ASSERT_EQ(r1.trace.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r1.trace[i].loss, r2.trace[i].loss);

    const auto path = std::filesystem::temp_directory_path() / "cryoar_model.bin";
    m1.save(path);
    ToyModel fresh(micro_config());
    fresh.load(path);
    const std::vector<Image> views{random_image(16, 50), random_image(16, 51)};
    EXPECT_TRUE((fresh.forward({views}).points.values() == m1.forward({views}).points.values()).all());
    ModelConfig wider = micro_config();
    wider.d_enc = 64;
    wider.d_dec = 64;
    ToyModel other(wider);
    EXPECT_THROW(other.load(path), IoError);
}

TEST(Training, NonFiniteLossAborts) {
    ToyModel m(micro_config());
    TrainData data;
    data.phantom = toy_phantom();
    data.phantom.data.setConstant(std::numeric_limits<double>::quiet_NaN());
    TrainStage s;
    s.n_steps = 3;
    try {
        train_toy(m, {s}, data);
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
    }
}

TEST(InferPoses, MatchesManualChunkedForward) {
    const ToyModel m(micro_config());
    const Volume vol = toy_phantom();
    Rng rng(6);
    std::vector<Image> stack;
    for (int i = 0; i < 8; ++i) {
        const Pose p{i == 0 ? Rotation::identity() : sample_uniform_rotation(rng), Vec2::Zero()};
        stack.push_back(simulate_particle(vol, p, std::nullopt, kNoiseless, rng).image);
    }
    const auto poses = infer_poses(m, stack, 3);
    ASSERT_EQ(poses.size(), 8u);
    EXPECT_EQ(poses[0].rot.matrix(), Mat3::Identity());
    for (std::size_t first = 1; first < 8; first += 2) {
        std::vector<Image> chunk{stack[0]};
        for (std::size_t k = first; k < std::min<std::size_t>(8, first + 2); ++k) chunk.push_back(stack[k]);
        const auto local = maps_to_poses(m.predict_maps(chunk), 16);
        for (std::size_t k = 1; k < chunk.size(); ++k) {
            EXPECT_LT((local[k].rot.matrix() - poses[first + k - 1].rot.matrix()).norm(), 1e-12);
            EXPECT_LT((local[k].shift - poses[first + k - 1].shift).norm(), 1e-12);
        }
    }
    const auto threaded = infer_poses(m, stack, 3, {}, 3);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(threaded[i].rot.matrix(), poses[i].rot.matrix());

    // Targets sharing a chunk see each other only through the reference; their order does not matter.
    std::vector<Image> swapped{stack[0], stack[2], stack[1]};
    const auto a = infer_poses(m, {stack[0], stack[1], stack[2]}, 3), b = infer_poses(m, swapped, 3);
    EXPECT_LT((a[1].rot.matrix() - b[2].rot.matrix()).norm(), 1e-10);
    EXPECT_LT((a[2].rot.matrix() - b[1].rot.matrix()).norm(), 1e-10);
    EXPECT_THROW(infer_poses(m, {}, 3), std::invalid_argument);
    EXPECT_EQ(infer_poses(m, {stack[0]}, 3).size(), 1u);
}
