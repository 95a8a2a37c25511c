#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "verbose/numerics.hpp"
#include "verbose/sample.hpp"

namespace verbose {

/// Architecture of the toy captioner. frames == 1 selects the image model;
/// frames > 1 the video model, which averages per-frame cross-attention and
/// adds a learned temporal embedding to each frame's visual tokens.
struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::size_t dim = 64;  // C, and the frame-feature dimension D
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t mlp_ratio = 4;
  std::size_t frames = 1;
  /// g_i as the concatenation of every block's output instead of the final
  /// pre-logit state only.
  bool all_layer_hidden = false;
  VocabSpec vocab;
  std::uint64_t seed = 0;

  /// 32×32 image model over the shape-world vocabulary.
  static ModelConfig image_default();
  static ModelConfig video_default();
  /// 8×8 input, V = 16, C = 16; used for gradient checks.
  static ModelConfig reduced(std::size_t frames = 1);

  Modality modality() const { return frames > 1 ? Modality::video : Modality::image; }
  std::size_t patches() const { return (image_size / patch) * (image_size / patch); }
  std::size_t patch_dim() const { return patch * patch * 3; }
  std::size_t hidden_dim() const { return all_layer_hidden ? dim * blocks : dim; }
  FrameShape input_shape() const { return {frames, image_size, image_size}; }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct BlockParams {
  Matrix ln1_g, ln1_b, sa_wq, sa_wk, sa_wv, sa_wo, sa_bo;
  Matrix ln2_g, ln2_b, ca_wq, ca_wk, ca_wv, ca_wo, ca_bo;
  Matrix ln3_g, ln3_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

/// Visual encoder: one bidirectional self-attention + MLP block over patches.
struct EncoderParams {
  Matrix ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ModelParams {
  Matrix patch_w, patch_b, patch_pos;
  EncoderParams encoder;
  Matrix frame_pos, vis_ln_g, vis_ln_b, tok_emb;
  std::vector<BlockParams> blocks;
  Matrix lnf_g, lnf_b, out_w, out_b;

  /// Visits every parameter in a fixed order as (name, matrix).
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f("patch_w", self.patch_w);
    f("patch_b", self.patch_b);
    f("patch_pos", self.patch_pos);
    auto& e = self.encoder;
    f("enc.ln1_g", e.ln1_g);
    f("enc.ln1_b", e.ln1_b);
    f("enc.wq", e.wq);
    f("enc.wk", e.wk);
    f("enc.wv", e.wv);
    f("enc.wo", e.wo);
    f("enc.bo", e.bo);
    f("enc.ln2_g", e.ln2_g);
    f("enc.ln2_b", e.ln2_b);
    f("enc.mlp_w1", e.mlp_w1);
    f("enc.mlp_b1", e.mlp_b1);
    f("enc.mlp_w2", e.mlp_w2);
    f("enc.mlp_b2", e.mlp_b2);
    f("frame_pos", self.frame_pos);
    f("vis_ln_g", self.vis_ln_g);
    f("vis_ln_b", self.vis_ln_b);
    f("tok_emb", self.tok_emb);
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      auto& bp = self.blocks[b];
      const std::string p = "block" + std::to_string(b) + ".";
      f(p + "ln1_g", bp.ln1_g);
      f(p + "ln1_b", bp.ln1_b);
      f(p + "sa_wq", bp.sa_wq);
      f(p + "sa_wk", bp.sa_wk);
      f(p + "sa_wv", bp.sa_wv);
      f(p + "sa_wo", bp.sa_wo);
      f(p + "sa_bo", bp.sa_bo);
      f(p + "ln2_g", bp.ln2_g);
      f(p + "ln2_b", bp.ln2_b);
      f(p + "ca_wq", bp.ca_wq);
      f(p + "ca_wk", bp.ca_wk);
      f(p + "ca_wv", bp.ca_wv);
      f(p + "ca_wo", bp.ca_wo);
      f(p + "ca_bo", bp.ca_bo);
      f(p + "ln3_g", bp.ln3_g);
      f(p + "ln3_b", bp.ln3_b);
      f(p + "mlp_w1", bp.mlp_w1);
      f(p + "mlp_b1", bp.mlp_b1);
      f(p + "mlp_w2", bp.mlp_w2);
      f(p + "mlp_b2", bp.mlp_b2);
    }
    f("lnf_g", self.lnf_g);
    f("lnf_b", self.lnf_b);
    f("out_w", self.out_w);
    f("out_b", self.out_b);
  }
};

/// Differentiable autoregressive captioner. Immutable once constructed or
/// trained; every inference entry point is const and thread-safe.
class VictimModel {
 public:
  /// Random initialization from config.seed.
  explicit VictimModel(ModelConfig config);
  VictimModel(ModelConfig config, ModelParams params);

  const ModelConfig& config() const { return config_; }
  const VocabSpec& vocab() const { return config_.vocab; }
  const ModelParams& params() const { return params_; }
  ModelParams& mutable_params() { return params_; }

  bool operator==(const VictimModel& o) const;

 private:
  ModelConfig config_;
  ModelParams params_;
};

struct DecodePolicy {
  enum class Kind { greedy, nucleus };
  Kind kind = Kind::greedy;
  double top_p = 0.9;

  static DecodePolicy greedy() { return {}; }
  static DecodePolicy nucleus(double p = 0.9) { return {Kind::nucleus, p}; }
};

/// Which frames the decoder attends to; empty means all.
using FrameMask = std::vector<bool>;

struct DecodeOptions {
  DecodePolicy policy;
  std::size_t max_length = 512;
  /// Never select EOS (forced-length sweeps); distributions are unaffected.
  bool suppress_eos = false;
  FrameMask frame_mask;
};

/// Everything the attack losses read from one decode, row i = step i.
struct StepOutputs {
  Matrix logits;          // N × V
  Matrix probs;           // N × V, softmax of logits
  Matrix hidden;          // N × C, g_i
  Matrix frame_features;  // M × D, h_j
  Matrix attention;       // N × (M·patches), rows are distributions
  /// Sponge snapshot: visual tokens of each frame, then every block's output
  /// over the full decoder sequence.
  std::vector<Matrix> activations;

  std::size_t steps() const { return logits.rows(); }
  Distribution distribution(std::size_t i) const;
};

struct GenerationTrace {
  std::vector<int> prompt;
  std::vector<int> tokens;
  StepOutputs outputs;

  std::size_t length() const { return tokens.size(); }
  bool ended_with_eos(int eos_id) const { return !tokens.empty() && tokens.back() == eos_id; }
};

/// Patch features W·p + b for one frame (patches × D).
Matrix encode_image(const VictimModel& model, std::span<const double> frame);
/// Frame features h_j: mean visual-encoder output over the patches of frame j
/// (M × D). Depends only on frame j and shared parameters.
Matrix encode_video(const VictimModel& model, const PixelSample& sample);

GenerationTrace generate(const VictimModel& model, const PixelSample& sample, std::span<const int> prompt,
                         const DecodeOptions& options, std::mt19937_64& rng);

/// Recomputes the decode with `tokens` fixed. Row i equals generate()'s row i
/// for the same inputs.
StepOutputs teacher_forced_forward(const VictimModel& model, const PixelSample& sample, std::span<const int> prompt,
                                   std::span<const int> tokens, const FrameMask& mask = {});

/// Σ ln p_i[y_i]; throws when a realized token had probability zero.
double sequence_log_prob(const StepOutputs& outputs, std::span<const int> tokens);
double sequence_log_prob(const GenerationTrace& trace);

/// What a loss sees: the teacher-forced outputs and the realized tokens.
struct LossContext {
  const StepOutputs& outputs;
  std::span<const int> tokens;
  const VocabSpec& vocab;
};

/// Gradient of a scalar loss with respect to the StepOutputs fields. Empty
/// matrices mean zero.
struct LossGradient {
  Matrix d_logits;
  Matrix d_probs;
  Matrix d_hidden;
  Matrix d_frame_features;
  std::vector<Matrix> d_activations;
};

struct LossValue {
  double value = 0.0;
  LossGradient grad;
};

using LossFn = std::function<LossValue(const LossContext&)>;

struct InputGradient {
  double loss = 0.0;
  PixelGradient gradient;
};

/// Per-pixel gradient of loss_fn under teacher forcing. Token ids are held
/// fixed; no gradient flows through the sampling choice.
InputGradient backward_to_input(const VictimModel& model, const PixelSample& sample, std::span<const int> prompt,
                                std::span<const int> tokens, const LossFn& loss_fn, const FrameMask& mask = {});

/// Mean next-token cross entropy of `targets` (caption followed by EOS)
/// against targets smoothed toward uniform by `label_smoothing`; its parameter
/// gradient is accumulated into `grads`, which must share the model's
/// parameter layout.
double accumulate_caption_gradient(const VictimModel& model, const PixelSample& sample, std::span<const int> prompt,
                                   std::span<const int> targets, ModelParams& grads, double label_smoothing = 0.0);

void save_checkpoint(const std::filesystem::path& file, const VictimModel& model);
VictimModel load_checkpoint(const std::filesystem::path& file);

}  // namespace verbose
