#include "cryoar/model.hpp"

#include <chrono>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <cmath>
#include <numbers>
#include <string>

#include "cryoar/csv.hpp"
#include "cryoar/error.hpp"
#include "cryoar/parallel.hpp"
#include "cryoar/random.hpp"

namespace cryoar {

using ad::Index;
using ad::Shape;
using ad::Tensor;

void ModelConfig::validate() const {
    if (image_size < 2 || patch_size < 1 || image_size % patch_size != 0)
        throw std::invalid_argument("model image_size " + std::to_string(image_size) + " must be divisible by patch_size " +
                                    std::to_string(patch_size));
    if (n_heads < 1 || d_enc < 1 || d_dec < 1 || d_enc % n_heads != 0 || d_dec % n_heads != 0)
        throw std::invalid_argument("model d_enc and d_dec must be divisible by n_heads");
    if (rope_enabled && ((d_enc / n_heads) % 4 != 0 || (d_dec / n_heads) % 4 != 0))
        throw std::invalid_argument("model head width must be a multiple of 4 for 2D rotary embeddings");
    if (enc_depth < 0) throw std::invalid_argument("model enc_depth must be >= 0");
    if (dec_depth < 1) throw std::invalid_argument("model dec_depth must be >= 1");
    if (max_views < 1) throw std::invalid_argument("model max_views must be >= 1");
    if (!(rope_base > 0.0)) throw std::invalid_argument("model rope_base must be positive");
    if (!(loss_alpha > 0.0)) throw std::invalid_argument("model loss_alpha must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"d_enc", c.d_enc},
            {"d_dec", c.d_dec},           {"n_heads", c.n_heads},       {"enc_depth", c.enc_depth},
            {"dec_depth", c.dec_depth},   {"max_views", c.max_views},   {"rope_base", c.rope_base},
            {"loss_alpha", c.loss_alpha}, {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    const nlohmann::json defaults = to_json(c);
    for (const auto& [key, _] : j.items())
        if (!defaults.contains(key)) throw std::invalid_argument("unknown model config key '" + key + "'");
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("image_size", c.image_size);
    get("patch_size", c.patch_size);
    get("d_enc", c.d_enc);
    get("d_dec", c.d_dec);
    get("n_heads", c.n_heads);
    get("enc_depth", c.enc_depth);
    get("dec_depth", c.dec_depth);
    get("max_views", c.max_views);
    get("rope_base", c.rope_base);
    get("loss_alpha", c.loss_alpha);
    get("seed", c.seed);
    c.validate();
    return c;
}

namespace {

void add_linear(ad::NamedTensors& ps, const std::string& name, Index in, Index out) {
    ps.emplace_back(name + ".w", Tensor::zeros({in, out}, true));
    ps.emplace_back(name + ".b", Tensor::zeros({out}, true));
}

void add_norm(ad::NamedTensors& ps, const std::string& name, Index d) {
    ps.emplace_back(name + ".g", Tensor::constant({d}, 1.0, true));
    ps.emplace_back(name + ".b", Tensor::zeros({d}, true));
}

void add_attention(ad::NamedTensors& ps, const std::string& name, Index d, bool cross) {
    add_norm(ps, name + ".n", d);
    if (cross) add_norm(ps, name + ".nk", d);
    for (const char* m : {".q", ".k", ".v", ".o"}) add_linear(ps, name + m, d, d);
}

void add_mlp(ad::NamedTensors& ps, const std::string& name, Index d) {
    add_norm(ps, name + ".n", d);
    add_linear(ps, name + ".a", d, 4 * d);
    add_linear(ps, name + ".b", 4 * d, d);
}

bool ends_with(const std::string& s, const char* suffix) {
    const std::string t(suffix);
    return s.size() >= t.size() && s.compare(s.size() - t.size(), t.size(), t) == 0;
}

}  // namespace

ToyModel::ToyModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const Index pp = static_cast<Index>(cfg_.patch_size) * cfg_.patch_size;
    const Index de = cfg_.d_enc, dd = cfg_.d_dec;
    add_linear(params_, "patch", pp, de);
    for (int l = 0; l < cfg_.enc_depth; ++l) {
        add_attention(params_, "enc." + std::to_string(l) + ".sa", de, false);
        add_mlp(params_, "enc." + std::to_string(l) + ".mlp", de);
    }
    add_norm(params_, "enc.norm", de);
    params_.emplace_back("view.ref", Tensor::zeros({de}, true));
    params_.emplace_back("view.tgt", Tensor::zeros({de}, true));
    add_linear(params_, "dec.embed", de, dd);
    for (int l = 0; l < cfg_.dec_depth; ++l) {
        const std::string b = "dec." + std::to_string(l);
        add_attention(params_, b + ".int_sa", dd, false);
        add_attention(params_, b + ".int_ca", dd, true);
        add_mlp(params_, b + ".int_mlp", dd);
        add_attention(params_, b + ".upd_sa", dd, false);
        add_attention(params_, b + ".upd_ca", dd, true);
        add_mlp(params_, b + ".upd_mlp", dd);
    }
    for (const char* h : {"head.ref", "head.tgt"}) {
        add_norm(params_, std::string(h) + ".n", dd);
        add_linear(params_, h, dd, pp * 4);
    }

    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& [name, t] = params_[i];
        index_[name] = i;
        Rng rng = make_stream(cfg_.seed, i);
        if (ends_with(name, ".w")) {
            std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(t.dim(0))));
            for (Index k = 0; k < t.size(); ++k) t.mutable_values()[k] = normal(rng);
        } else if (name.rfind("view.", 0) == 0) {
            std::normal_distribution<double> normal(0.0, 0.02);
            for (Index k = 0; k < t.size(); ++k) t.mutable_values()[k] = normal(rng);
        }
    }

    // 2D rotary tables: first half of each head rotates with the patch row, second half with the column.
    const int dh = cfg_.d_enc / cfg_.n_heads;
    if (cfg_.d_dec / cfg_.n_heads != dh && cfg_.rope_enabled)
        throw std::invalid_argument("model d_enc and d_dec must give equal head widths for rotary embeddings");
    const int t_count = cfg_.tokens(), side = cfg_.grid_side();
    rope_cos_.resize(static_cast<Index>(t_count) * dh);
    rope_sin_.resize(rope_cos_.size());
    for (int t = 0; t < t_count; ++t) {
        const double coord[2] = {static_cast<double>(t / side), static_cast<double>(t % side)};
        for (int c = 0; c < dh; ++c) {
            const int half = c / (dh / 2);
            const int pair = (c % (dh / 2)) / 2;
            const double angle = coord[half] / std::pow(cfg_.rope_base, 2.0 * pair / dh);
            rope_cos_[static_cast<Index>(t) * dh + c] = std::cos(angle);
            rope_sin_[static_cast<Index>(t) * dh + c] = std::sin(angle);
        }
    }
}

std::size_t ToyModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += static_cast<std::size_t>(t.size());
    return n;
}

const Tensor& ToyModel::p(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::logic_error("missing model parameter " + name);
    return params_[it->second].second;
}

Tensor ToyModel::linear(const Tensor& x, const std::string& prefix) const {
    return ad::add_rowvec(ad::matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

Tensor ToyModel::norm(const Tensor& x, const std::string& prefix) const {
    return ad::layernorm(x, p(prefix + ".g"), p(prefix + ".b"));
}

Tensor ToyModel::rope(const Tensor& x, int views) const {
    if (!cfg_.rope_enabled) return x;
    ad::Array c(rope_cos_.size() * views), s(c.size());
    for (int v = 0; v < views; ++v) {
        c.segment(v * rope_cos_.size(), rope_cos_.size()) = rope_cos_;
        s.segment(v * rope_sin_.size(), rope_sin_.size()) = rope_sin_;
    }
    return ad::add(ad::mul_const(x, c), ad::mul_const(ad::pair_swap(x), s));
}

Tensor ToyModel::attention(const Tensor& x, const Tensor* context, const std::string& prefix, int key_views) const {
    const Index b = x.dim(0), tq = x.dim(1), d = x.dim(2);
    const Index h = cfg_.n_heads, dh = d / h;
    const Tensor xn = norm(x, prefix + ".n");
    const Tensor cn = context ? norm(*context, prefix + ".nk") : xn;
    const Index tk = cn.dim(1);
    auto heads = [&](const Tensor& t, Index len) {
        return ad::reshape(ad::permute(ad::reshape(t, {b, len, h, dh}), {0, 2, 1, 3}), {b * h, len, dh});
    };
    const Tensor q = rope(heads(linear(xn, prefix + ".q"), tq), 1);
    const Tensor k = rope(heads(linear(cn, prefix + ".k"), tk), key_views);
    const Tensor v = heads(linear(cn, prefix + ".v"), tk);
    const Tensor a = ad::softmax(ad::scale(ad::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))));
    const Tensor o = ad::reshape(ad::permute(ad::reshape(ad::bmm(a, v), {b, h, tq, dh}), {0, 2, 1, 3}), {b, tq, d});
    return ad::add(x, linear(o, prefix + ".o"));
}

Tensor ToyModel::mlp(const Tensor& x, const std::string& prefix) const {
    return ad::add(x, linear(ad::gelu(linear(norm(x, prefix + ".n"), prefix + ".a")), prefix + ".b"));
}

Tensor ToyModel::patch_pixels(const std::vector<Image>& views) const {
    const int n = cfg_.image_size, ps = cfg_.patch_size, side = cfg_.grid_side();
    const Index per = static_cast<Index>(n) * n;
    ad::Array out(static_cast<Index>(views.size()) * per);
    for (std::size_t v = 0; v < views.size(); ++v) {
        const Image& img = views[v];
        if (img.data.rows() != n || img.data.cols() != n)
            throw std::invalid_argument("patchify: image is " + std::to_string(img.data.rows()) + "x" +
                                        std::to_string(img.data.cols()) + ", model expects " + std::to_string(n));
        const double mu = img.data.mean();
        const double sd = std::sqrt((img.data - mu).square().mean());
        const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
        Index k = static_cast<Index>(v) * per;
        for (int pr = 0; pr < side; ++pr)
            for (int pc = 0; pc < side; ++pc)
                for (int u = 0; u < ps; ++u)
                    for (int w = 0; w < ps; ++w) out[k++] = (img(pr * ps + u, pc * ps + w) - mu) * inv;
    }
    return Tensor::from({static_cast<Index>(views.size()), cfg_.tokens(), static_cast<Index>(ps) * ps}, std::move(out));
}

Tensor ToyModel::patchify(const Tensor& pixels) const { return linear(pixels, "patch"); }

Tensor ToyModel::encode_views(const Tensor& pixels, int views_per_sample, bool add_view_embedding) const {
    if (views_per_sample < 1 || pixels.dim(0) % views_per_sample != 0)
        throw std::invalid_argument("encode_views: view count does not divide the batch");
    if (views_per_sample > cfg_.max_views)
        throw std::invalid_argument("encode_views: " + std::to_string(views_per_sample) + " views exceed max_views " +
                                    std::to_string(cfg_.max_views));
    Tensor x = patchify(pixels);
    for (int l = 0; l < cfg_.enc_depth; ++l) {
        const std::string b = "enc." + std::to_string(l);
        x = mlp(attention(x, nullptr, b + ".sa", 1), b + ".mlp");
    }
    x = norm(x, "enc.norm");
    if (!add_view_embedding) return x;
    const Index total = x.dim(0), t = x.dim(1), d = x.dim(2);
    const Tensor table = ad::concat({ad::reshape(p("view.ref"), {1, d}), ad::reshape(p("view.tgt"), {1, d})}, 0);
    std::vector<Index> which(static_cast<std::size_t>(total * t));
    for (Index v = 0; v < total; ++v)
        for (Index k = 0; k < t; ++k) which[static_cast<std::size_t>(v * t + k)] = v % views_per_sample == 0 ? 0 : 1;
    return ad::add(x, ad::reshape(ad::gather(table, which), {total, t, d}));
}

DecodedViews ToyModel::decode_views(const Tensor& encoded, int batch, int views) const {
    if (batch < 1 || views < 1 || encoded.dim(0) != static_cast<Index>(batch) * views)
        throw std::invalid_argument("decode_views: expected " + std::to_string(batch * views) + " views, got " +
                                    ad::shape_string(encoded.shape()));
    const Index t = encoded.dim(1);
    const Tensor x = linear(encoded, "dec.embed");
    const Index d = x.dim(2);
    const Tensor grouped = ad::reshape(x, {batch, views, t, d});
    DecodedViews out;
    out.reference = ad::reshape(ad::slice(grouped, 1, 0, 1), {batch, t, d});
    const int m = views - 1;
    if (m > 0) out.targets = ad::reshape(ad::slice(grouped, 1, 1, views), {static_cast<Index>(batch) * m, t, d});
    std::vector<Index> owner;
    for (int b = 0; b < batch; ++b)
        for (int k = 0; k < m; ++k) owner.push_back(b);

    for (int l = 0; l < cfg_.dec_depth; ++l) {
        const std::string b = "dec." + std::to_string(l);
        Tensor ref = attention(out.reference, nullptr, b + ".int_sa", 1);
        if (m > 0) {
            const Tensor pooled = ad::reshape(out.targets, {batch, m * t, d});
            ref = attention(ref, &pooled, b + ".int_ca", m);
        }
        out.reference = mlp(ref, b + ".int_mlp");
        if (m == 0) continue;
        Tensor tg = attention(out.targets, nullptr, b + ".upd_sa", 1);
        const Tensor ctx = ad::gather(out.reference, owner);
        tg = attention(tg, &ctx, b + ".upd_ca", 1);
        out.targets = mlp(tg, b + ".upd_mlp");
    }
    return out;
}

Tensor ToyModel::head_planar(const Tensor& features, bool reference) const {
    const std::string h = reference ? "head.ref" : "head.tgt";
    const Tensor raw = linear(norm(features, h + ".n"), h);
    const Index bx = features.dim(0), side = cfg_.grid_side(), ps = cfg_.patch_size;
    const Tensor grid = ad::reshape(raw, {bx, side, side, ps, ps, 4});
    return ad::reshape(ad::permute(grid, {0, 1, 3, 2, 4, 5}), {bx, static_cast<Index>(cfg_.image_size) * cfg_.image_size, 4});
}

MapPrediction ToyModel::forward(const std::vector<std::vector<Image>>& samples) const {
    if (samples.empty()) throw std::invalid_argument("forward: empty batch");
    const int views = static_cast<int>(samples[0].size());
    if (views < 1) throw std::invalid_argument("forward: sample without views");
    std::vector<Image> flat;
    for (const auto& s : samples) {
        if (static_cast<int>(s.size()) != views) throw std::invalid_argument("forward: samples differ in view count");
        flat.insert(flat.end(), s.begin(), s.end());
    }
    const int batch = static_cast<int>(samples.size());
    const DecodedViews dec = decode_views(encode_views(patch_pixels(flat), views), batch, views);
    const Index pix = static_cast<Index>(cfg_.image_size) * cfg_.image_size;
    Tensor maps = ad::reshape(head_planar(dec.reference, true), {batch, 1, pix, 4});
    if (views > 1)
        maps = ad::concat({maps, ad::reshape(head_planar(dec.targets, false), {batch, views - 1, pix, 4})}, 1);
    const auto parts = ad::split(maps, -1, {3, 1});
    MapPrediction pred;
    pred.points = parts[0];
    pred.confidence =
        ad::add_scalar(ad::exp(ad::clamp_max(ad::reshape(parts[1], {batch, views, pix}), 20.0)), 1.0);
    return pred;
}

Tensor ToyModel::loss_from_prediction(const MapPrediction& pred, const std::vector<std::vector<Pose>>& poses) const {
    const Index batch = pred.points.dim(0), views = pred.points.dim(1), pix = pred.points.dim(2);
    if (static_cast<Index>(poses.size()) != batch) throw std::invalid_argument("forward_loss: missing poses");
    const int n = cfg_.image_size;
    ad::Array target(batch * views * pix * 3);
    Index k = 0;
    for (const auto& sample : poses) {
        if (static_cast<Index>(sample.size()) != views) throw std::invalid_argument("forward_loss: missing poses");
        for (const auto& pose : sample) {
            const PlanarMap gt = gt_relative_map(pose, sample[0], n, n, n);
            for (Index i = 0; i < pix; ++i)
                for (int c = 0; c < 3; ++c) target[k++] = gt.points(i, c);
        }
    }
    const Tensor diff = ad::sub(pred.points, Tensor::from(pred.points.shape(), std::move(target)));
    const Tensor sq = ad::sum_last(ad::mul(diff, diff));
    const Tensor term = ad::sub(ad::mul(pred.confidence, sq), ad::scale(ad::log(pred.confidence), cfg_.loss_alpha));
    return ad::mean(term);
}

Tensor ToyModel::forward_loss(const std::vector<std::vector<Image>>& samples,
                              const std::vector<std::vector<Pose>>& poses) const {
    return loss_from_prediction(forward(samples), poses);
}

std::vector<PlanarMap> ToyModel::predict_maps(const std::vector<Image>& views) const {
    const MapPrediction pred = forward({views});
    const int n = cfg_.image_size;
    const Index pix = static_cast<Index>(n) * n;
    std::vector<PlanarMap> maps;
    for (std::size_t v = 0; v < views.size(); ++v) {
        PlanarMap m(n, n);
        const Index off = static_cast<Index>(v) * pix;
        for (Index i = 0; i < pix; ++i) {
            for (int c = 0; c < 3; ++c) m.points(i, c) = pred.points.values()[(off + i) * 3 + c];
            m.confidence[i] = pred.confidence.values()[off + i];
        }
        maps.push_back(std::move(m));
    }
    return maps;
}

void ToyModel::save(const std::filesystem::path& path) const { ad::save_checkpoint(path, params_); }

void ToyModel::load(const std::filesystem::path& path) { ad::load_checkpoint(path, params_); }

void TrainStage::validate() const {
    if (n_views < 2) throw std::invalid_argument("train stage n_views must be >= 2");
    if (!(snr > 0.0) || (snr_end && !(*snr_end > 0.0))) throw std::invalid_argument("train stage snr must be positive");
    if (n_steps < 1) throw std::invalid_argument("train stage n_steps must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train stage learning_rate must be positive");
    if (!(lr_end_fraction > 0.0 && lr_end_fraction <= 1.0))
        throw std::invalid_argument("train stage lr_end_fraction must lie in (0, 1]");
}

double TrainStage::snr_at(int step) const {
    if (!snr_end || std::isinf(snr) || std::isinf(*snr_end) || n_steps <= 1) return snr;
    const double f = static_cast<double>(step) / (n_steps - 1);
    return std::exp(std::log(snr) + f * (std::log(*snr_end) - std::log(snr)));
}

double TrainStage::lr_at(int step) const {
    if (lr_end_fraction == 1.0 || n_steps <= 1) return learning_rate;
    const double f = static_cast<double>(step) / (n_steps - 1);
    return learning_rate * (lr_end_fraction + (1.0 - lr_end_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * f)));
}

std::vector<TrainStage> default_curriculum(int total_steps) {
    const int s1 = std::max(1, total_steps / 3), s2 = std::max(1, total_steps / 3);
    const int s3 = std::max(1, total_steps - s1 - s2);
    TrainStage a, b, c;
    a.n_views = 2;
    a.snr = 10.0;
    a.n_steps = s1;
    b.n_views = 4;
    b.snr = 10.0;
    b.snr_end = 0.1;
    b.n_steps = s2;
    c.n_views = 8;
    c.snr = 0.1;
    c.n_steps = s3;
    c.learning_rate = 5e-4;
    return {a, b, c};
}

nlohmann::json to_json(const TrainStage& s) {
    auto snr = [](double v) -> nlohmann::json {
        if (std::isinf(v)) return "inf";
        return v;
    };
    nlohmann::json j = {{"n_views", s.n_views},
                        {"snr", snr(s.snr)},
                        {"ctf_enabled", s.ctf_enabled},
                        {"n_steps", s.n_steps},
                        {"learning_rate", s.learning_rate},
                        {"lr_end_fraction", s.lr_end_fraction},
                        {"reference", s.reference == ReferenceMode::Anchor ? "anchor" : "random"}};
    if (s.snr_end) j["snr_end"] = snr(*s.snr_end);
    return j;
}

TrainStage train_stage_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> keys = {"n_views",       "snr",            "snr_end",  "ctf_enabled",
                                                  "n_steps",       "learning_rate",  "lr_end_fraction", "reference"};
    for (const auto& [key, _] : j.items())
        if (std::find(keys.begin(), keys.end(), key) == keys.end())
            throw std::invalid_argument("unknown train stage key '" + key + "'");
    auto snr = [](const nlohmann::json& v) {
        return v.is_string() && v.get<std::string>() == "inf" ? kNoiseless : v.get<double>();
    };
    TrainStage s;
    if (j.contains("n_views")) j.at("n_views").get_to(s.n_views);
    if (j.contains("snr")) s.snr = snr(j.at("snr"));
    if (j.contains("snr_end")) s.snr_end = snr(j.at("snr_end"));
    if (j.contains("ctf_enabled")) j.at("ctf_enabled").get_to(s.ctf_enabled);
    if (j.contains("n_steps")) j.at("n_steps").get_to(s.n_steps);
    if (j.contains("learning_rate")) j.at("learning_rate").get_to(s.learning_rate);
    if (j.contains("lr_end_fraction")) j.at("lr_end_fraction").get_to(s.lr_end_fraction);
    if (j.contains("reference")) {
        const std::string r = j.at("reference").get<std::string>();
        if (r != "anchor" && r != "random") throw std::invalid_argument("train stage reference must be anchor or random");
        s.reference = r == "anchor" ? ReferenceMode::Anchor : ReferenceMode::Random;
    }
    s.validate();
    return s;
}

namespace {

struct Sample {
    std::vector<Image> views;
    std::vector<Pose> poses;
};

Sample draw_sample(const TrainData& data, const TrainStage& stage, double snr, std::uint64_t stream) {
    Rng rng = make_stream(data.seed, stream);
    CtfRanges ranges = data.ctf_ranges;
    ranges.pixel_size = data.phantom.voxel_size;
    std::uniform_real_distribution<double> shift(-data.shift_range_px, data.shift_range_px);
    Sample s;
    for (int v = 0; v < stage.n_views; ++v) {
        Pose pose;
        if (!(v == 0 && stage.reference == ReferenceMode::Anchor)) {
            pose.rot = sample_uniform_rotation(rng);
            if (data.shift_range_px > 0.0) pose.shift = Vec2(shift(rng), shift(rng));
        }
        std::optional<CtfParams> ctf;
        if (stage.ctf_enabled) ctf = sample_ctf_params(rng, ranges);
        s.views.push_back(simulate_particle(data.phantom, pose, ctf, snr, rng).image);
        s.poses.push_back(pose);
    }
    return s;
}

}  // namespace

TrainResult train_toy(ToyModel& model, const std::vector<TrainStage>& stages, const TrainData& data) {
    if (stages.empty()) throw std::invalid_argument("train_toy: no stages");
    for (const auto& s : stages) {
        s.validate();
        if (s.n_views > model.config().max_views)
            throw std::invalid_argument("train_toy: stage with " + std::to_string(s.n_views) + " views exceeds max_views");
    }
    if (data.phantom.n != model.config().image_size)
        throw std::invalid_argument("train_toy: phantom size " + std::to_string(data.phantom.n) +
                                    " does not match image_size " + std::to_string(model.config().image_size));
    if (data.batch_size < 1) throw std::invalid_argument("train_toy: batch_size must be >= 1");

#if defined(__GLIBC__)
    // Keep the many short-lived graph buffers on the heap instead of mmap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    const auto start = std::chrono::steady_clock::now();
    auto& params = model.parameters();
    std::vector<ad::Array> m1, m2;
    for (const auto& [_, t] : params) {
        m1.push_back(ad::Array::Zero(t.size()));
        m2.push_back(ad::Array::Zero(t.size()));
    }
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

    std::vector<Sample> fixed;
    for (std::size_t k = 0; k < data.fixed_samples; ++k)
        fixed.push_back(draw_sample(data, stages[0], stages[0].snr_at(0), (std::uint64_t{1} << 40) + k));

    TrainResult result;
    std::uint64_t t = 0;
    for (std::size_t si = 0; si < stages.size(); ++si) {
        const TrainStage& stage = stages[si];
        for (int step = 0; step < stage.n_steps; ++step, ++t) {
            std::vector<std::vector<Image>> views;
            std::vector<std::vector<Pose>> poses;
            if (!fixed.empty()) {
                for (const auto& s : fixed) {
                    views.push_back(s.views);
                    poses.push_back(s.poses);
                }
            } else {
                const double snr = stage.snr_at(step);
                for (int b = 0; b < data.batch_size; ++b) {
                    Sample s = draw_sample(data, stage, snr, (t << 16) + static_cast<std::uint64_t>(b));
                    views.push_back(std::move(s.views));
                    poses.push_back(std::move(s.poses));
                }
            }
            for (auto& [_, p] : params) p.zero_grad();
            const Tensor loss = model.forward_loss(views, poses);
            const double value = loss.item();
            if (!std::isfinite(value))
                throw NumericalError("train_toy: non-finite loss at step " + std::to_string(t));
            loss.backward();
            const double lr = stage.lr_at(step);
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(t + 1));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(t + 1));
            for (std::size_t i = 0; i < params.size(); ++i) {
                Tensor& p = params[i].second;
                if (!p.has_grad()) continue;
                m1[i] = b1 * m1[i] + (1.0 - b1) * p.grad();
                m2[i] = b2 * m2[i] + (1.0 - b2) * p.grad().square();
                p.mutable_values() -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
            }
            result.trace.push_back({static_cast<int>(t), static_cast<int>(si), value});
        }
    }
    for (auto& [_, p] : params) p.zero_grad();
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

void write_loss_trace(const std::filesystem::path& path, const std::vector<LossRecord>& trace) {
    std::vector<std::vector<double>> rows;
    rows.reserve(trace.size());
    for (const auto& r : trace) rows.push_back({static_cast<double>(r.step), static_cast<double>(r.stage), r.loss});
    csv::write(path, {"step", "stage", "loss"}, rows);
}

std::vector<Pose> infer_poses(const ToyModel& model, const std::vector<Image>& stack, int chunk_size,
                              const RegressionConfig& reg, int threads) {
    if (stack.empty()) throw std::invalid_argument("infer_poses: empty stack");
    if (chunk_size < 2) throw std::invalid_argument("infer_poses: chunk_size must be >= 2");
    if (chunk_size > model.config().max_views)
        throw std::invalid_argument("infer_poses: chunk_size exceeds max_views " + std::to_string(model.config().max_views));
    const int n = model.config().image_size;
    const std::size_t per = static_cast<std::size_t>(chunk_size - 1);
    const std::size_t targets = stack.size() - 1;
    const std::size_t chunks = std::max<std::size_t>(1, (targets + per - 1) / per);
    std::vector<Pose> poses(stack.size());
    parallel_blocks(chunks, threads, [&](std::size_t b, std::size_t e, int) {
        for (std::size_t c = b; c < e; ++c) {
            const std::size_t first = 1 + c * per, last = std::min(stack.size(), first + per);
            std::vector<Image> views{stack[0]};
            views.insert(views.end(), stack.begin() + static_cast<std::ptrdiff_t>(first),
                         stack.begin() + static_cast<std::ptrdiff_t>(last));
            std::vector<Pose> chunk;
            try {
                chunk = maps_to_poses(model.predict_maps(views), n, reg);
            } catch (const NumericalError& e) {
                const std::size_t local = e.index().value_or(0);
                throw NumericalError("infer_poses: pose regression failed", local == 0 ? 0 : first + local - 1);
            }
            if (c == 0) poses[0] = chunk[0];
            for (std::size_t k = first; k < last; ++k) poses[k] = chunk[k - first + 1];
        }
    });
    return poses;
}

}  // namespace cryoar
