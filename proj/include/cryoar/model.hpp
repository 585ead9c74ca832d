#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <optional>
#include <vector>

#include <json.hpp>

#include "cryoar/autodiff.hpp"
#include "cryoar/ctf.hpp"
#include "cryoar/fourier.hpp"
#include "cryoar/geometry.hpp"
#include "cryoar/planarmap.hpp"
#include "cryoar/simulator.hpp"

namespace cryoar {

struct ModelConfig {
    int image_size = 16;
    int patch_size = 4;
    int d_enc = 32;
    int d_dec = 32;
    int n_heads = 2;
    int enc_depth = 2;
    int dec_depth = 2;
    int max_views = 16;
    double rope_base = 100.0;
    double loss_alpha = 0.2;
    std::uint64_t seed = 0;
    bool rope_enabled = true;  // debug switch, not serialized

    void validate() const;
    int grid_side() const { return image_size / patch_size; }
    int tokens() const { return grid_side() * grid_side(); }
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct DecodedViews {
    ad::Tensor reference;  // [B, T, d_dec]
    ad::Tensor targets;    // [B * (N-1), T, d_dec], undefined when N = 1
};

struct MapPrediction {
    ad::Tensor points;      // [B, N, D*D, 3]
    ad::Tensor confidence;  // [B, N, D*D]
};

class ToyModel {
public:
    explicit ToyModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ad::NamedTensors& parameters() { return params_; }
    const ad::NamedTensors& parameters() const { return params_; }
    std::size_t parameter_count() const;

    /// Standardized pixels of each image cut into row-major p x p patches: [V, T, p^2].
    ad::Tensor patch_pixels(const std::vector<Image>& views) const;
    /// Linear patch embedding: [V, T, p^2] -> [V, T, d_enc].
    ad::Tensor patchify(const ad::Tensor& pixels) const;
    /// Shared encoder over B samples of N views each (views grouped by sample).
    /// View 0 of each sample gets the reference embedding, the rest the target embedding.
    ad::Tensor encode_views(const ad::Tensor& pixels, int views_per_sample, bool add_view_embedding = true) const;
    DecodedViews decode_views(const ad::Tensor& encoded, int batch, int views) const;
    /// Raw per-pixel channels [Bx, D*D, 4] from decoded tokens.
    ad::Tensor head_planar(const ad::Tensor& features, bool reference) const;

    MapPrediction forward(const std::vector<std::vector<Image>>& samples) const;
    /// Mean over pixels and views of C |Xbar - X|^2 - alpha log C.
    ad::Tensor forward_loss(const std::vector<std::vector<Image>>& samples,
                            const std::vector<std::vector<Pose>>& poses) const;
    ad::Tensor loss_from_prediction(const MapPrediction& pred, const std::vector<std::vector<Pose>>& poses) const;

    /// Planar maps of one multi-view sample, reference first.
    std::vector<PlanarMap> predict_maps(const std::vector<Image>& views) const;

    void save(const std::filesystem::path& path) const;
    void load(const std::filesystem::path& path);

private:
    const ad::Tensor& p(const std::string& name) const;
    ad::Tensor linear(const ad::Tensor& x, const std::string& prefix) const;
    ad::Tensor norm(const ad::Tensor& x, const std::string& prefix) const;
    ad::Tensor attention(const ad::Tensor& x, const ad::Tensor* context, const std::string& prefix,
                         int key_views) const;
    ad::Tensor mlp(const ad::Tensor& x, const std::string& prefix) const;
    ad::Tensor rope(const ad::Tensor& x, int views) const;

    ModelConfig cfg_;
    ad::NamedTensors params_;
    std::map<std::string, std::size_t> index_;
    Eigen::ArrayXd rope_cos_, rope_sin_;  // [T, d_head]
};

enum class ReferenceMode {
    Random,  // reference pose drawn like the targets
    Anchor,  // reference is the identity-pose, unshifted projection
};

struct TrainStage {
    int n_views = 2;
    double snr = kNoiseless;
    std::optional<double> snr_end;  // log-linear ramp from snr to snr_end over the stage
    bool ctf_enabled = false;
    int n_steps = 100;
    double learning_rate = 1e-3;
    double lr_end_fraction = 1.0;  // cosine decay to learning_rate * lr_end_fraction
    ReferenceMode reference = ReferenceMode::Random;

    void validate() const;
    double snr_at(int step) const;
    double lr_at(int step) const;
};

/// Three-stage curriculum: more views and lower SNR as training proceeds.
std::vector<TrainStage> default_curriculum(int total_steps);

nlohmann::json to_json(const TrainStage& s);
TrainStage train_stage_from_json(const nlohmann::json& j);

struct TrainData {
    Volume phantom;
    int batch_size = 8;
    std::size_t fixed_samples = 0;  // > 0: reuse this many pre-drawn samples as the batch every step
    double shift_range_px = 0.0;
    CtfRanges ctf_ranges;
    std::uint64_t seed = 0;
};

struct LossRecord {
    int step = 0;
    int stage = 0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<LossRecord> trace;
    double seconds = 0.0;
};

/// Adam (0.9, 0.999, 1e-8). Throws NumericalError naming the step on a non-finite loss.
TrainResult train_toy(ToyModel& model, const std::vector<TrainStage>& stages, const TrainData& data);

void write_loss_trace(const std::filesystem::path& path, const std::vector<LossRecord>& trace);

/// stack[0] is the reference in every chunk; each chunk carries up to chunk_size - 1 targets.
std::vector<Pose> infer_poses(const ToyModel& model, const std::vector<Image>& stack, int chunk_size,
                              const RegressionConfig& reg = {}, int threads = 1);

}  // namespace cryoar
