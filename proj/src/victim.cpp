#include "verbose/victim.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "verbose/autodiff.hpp"
#include "verbose/shape_world.hpp"

namespace verbose {

ModelConfig ModelConfig::image_default() {
  ModelConfig c;
  c.vocab = shape_world_vocab();
  return c;
}

ModelConfig ModelConfig::video_default() {
  ModelConfig c = image_default();
  c.frames = kDefaultVideoFrames;
  return c;
}

ModelConfig ModelConfig::reduced(std::size_t frames) {
  ModelConfig c;
  c.image_size = 8;
  c.patch = 4;
  c.dim = 16;
  c.heads = 2;
  c.blocks = 2;
  c.mlp_ratio = 2;
  c.frames = frames;
  c.vocab = VocabSpec::generic(16);
  return c;
}

void ModelConfig::validate() const {
  if (patch == 0 || image_size % patch != 0) throw std::invalid_argument("ModelConfig: image_size must be a multiple of patch");
  if (heads == 0 || dim % heads != 0) throw std::invalid_argument("ModelConfig: dim must be a multiple of heads");
  if (dim % 2 != 0) throw std::invalid_argument("ModelConfig: dim must be even");
  if (blocks == 0 || frames == 0 || mlp_ratio == 0) throw std::invalid_argument("ModelConfig: zero-sized component");
  if (vocab.size() < 4) throw std::invalid_argument("ModelConfig: vocabulary too small");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"image_size", image_size},
          {"patch", patch},
          {"dim", dim},
          {"heads", heads},
          {"blocks", blocks},
          {"mlp_ratio", mlp_ratio},
          {"frames", frames},
          {"all_layer_hidden", all_layer_hidden},
          {"seed", seed},
          {"vocab",
           {{"tokens", vocab.tokens()}, {"pad_id", vocab.pad_id()}, {"bos_id", vocab.bos_id()}, {"eos_id", vocab.eos_id()}}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c = image_default();
  c.image_size = j.value("image_size", c.image_size);
  c.patch = j.value("patch", c.patch);
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.blocks = j.value("blocks", c.blocks);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.frames = j.value("frames", c.frames);
  c.all_layer_hidden = j.value("all_layer_hidden", c.all_layer_hidden);
  c.seed = j.value("seed", c.seed);
  if (j.contains("vocab")) {
    const auto& v = j.at("vocab");
    c.vocab = VocabSpec(v.at("tokens").get<std::vector<std::string>>(), v.at("pad_id").get<int>(),
                        v.at("bos_id").get<int>(), v.at("eos_id").get<int>());
  }
  c.validate();
  return c;
}

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

ModelParams init_params(const ModelConfig& c) {
  std::mt19937_64 rng(c.seed);
  const std::size_t d = c.dim, hid = c.dim * c.mlp_ratio, v = c.vocab.size();
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  ModelParams p;
  p.patch_w = random_matrix(c.patch_dim(), d, 1.0 / std::sqrt(static_cast<double>(c.patch_dim())), rng);
  p.patch_b = random_matrix(1, d, 0.02, rng);
  p.patch_pos = random_matrix(c.patches(), d, 0.1, rng);
  auto& e = p.encoder;
  e.ln1_g = Matrix(1, d, 1.0);
  e.ln1_b = Matrix(1, d);
  e.wq = random_matrix(d, d, sd, rng);
  e.wk = random_matrix(d, d, sd, rng);
  e.wv = random_matrix(d, d, sd, rng);
  e.wo = random_matrix(d, d, sd * 0.5, rng);
  e.bo = Matrix(1, d);
  e.ln2_g = Matrix(1, d, 1.0);
  e.ln2_b = Matrix(1, d);
  e.mlp_w1 = random_matrix(d, hid, sd, rng);
  e.mlp_b1 = Matrix(1, hid);
  e.mlp_w2 = random_matrix(hid, d, 0.5 / std::sqrt(static_cast<double>(hid)), rng);
  e.mlp_b2 = Matrix(1, d);
  p.frame_pos = random_matrix(c.frames, d, 0.1, rng);
  p.vis_ln_g = Matrix(1, d, 1.0);
  p.vis_ln_b = Matrix(1, d);
  p.tok_emb = random_matrix(v, d, 0.5, rng);
  p.blocks.resize(c.blocks);
  for (auto& b : p.blocks) {
    b.ln1_g = Matrix(1, d, 1.0);
    b.ln1_b = Matrix(1, d);
    b.sa_wq = random_matrix(d, d, sd, rng);
    b.sa_wk = random_matrix(d, d, sd, rng);
    b.sa_wv = random_matrix(d, d, sd, rng);
    b.sa_wo = random_matrix(d, d, sd * 0.5, rng);
    b.sa_bo = Matrix(1, d);
    b.ln2_g = Matrix(1, d, 1.0);
    b.ln2_b = Matrix(1, d);
    b.ca_wq = random_matrix(d, d, sd, rng);
    b.ca_wk = random_matrix(d, d, sd, rng);
    b.ca_wv = random_matrix(d, d, sd, rng);
    b.ca_wo = random_matrix(d, d, sd * 0.5, rng);
    b.ca_bo = Matrix(1, d);
    b.ln3_g = Matrix(1, d, 1.0);
    b.ln3_b = Matrix(1, d);
    b.mlp_w1 = random_matrix(d, hid, sd, rng);
    b.mlp_b1 = Matrix(1, hid);
    b.mlp_w2 = random_matrix(hid, d, 0.5 / std::sqrt(static_cast<double>(hid)), rng);
    b.mlp_b2 = Matrix(1, d);
  }
  p.lnf_g = Matrix(1, d, 1.0);
  p.lnf_b = Matrix(1, d);
  p.out_w = random_matrix(d, v, sd, rng);
  p.out_b = Matrix(1, v);
  return p;
}

void positional_row(std::size_t pos, std::size_t dim, double* out) {
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out[2 * i] = 0.5 * std::sin(static_cast<double>(pos) * freq);
    out[2 * i + 1] = 0.5 * std::cos(static_cast<double>(pos) * freq);
  }
}

std::vector<std::size_t> active_frames(const ModelConfig& c, const FrameMask& mask) {
  if (!mask.empty() && mask.size() != c.frames) throw std::invalid_argument("frame mask size does not match frame count");
  std::vector<std::size_t> active;
  for (std::size_t j = 0; j < c.frames; ++j)
    if (mask.empty() || mask[j]) active.push_back(j);
  if (active.empty()) throw std::invalid_argument("frame mask disables every frame");
  return active;
}

void check_ids(std::span<const int> ids, std::size_t vocab, const char* what) {
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      std::ostringstream msg;
      msg << what << ": token id " << id << " outside vocabulary of size " << vocab;
      throw std::out_of_range(msg.str());
    }
}

/// Binds each parameter matrix to one tape Var, routing gradients to the
/// matching matrix of `sinks` when given.
class Binder {
 public:
  Binder(ad::Tape& tape, const ModelParams& params, ModelParams* sinks) : tape_(tape) {
    if (!sinks) return;
    std::vector<const Matrix*> src;
    params.visit([&](const std::string&, const Matrix& m) { src.push_back(&m); });
    std::size_t i = 0;
    sinks->visit([&](const std::string&, Matrix& m) { sink_[src.at(i++)] = &m; });
  }

  ad::Var operator()(const Matrix& m) {
    auto it = bound_.find(&m);
    if (it != bound_.end()) return it->second;
    Matrix* sink = nullptr;
    if (auto s = sink_.find(&m); s != sink_.end()) sink = s->second;
    const ad::Var v = tape_.parameter(m, sink);
    bound_.emplace(&m, v);
    return v;
  }

 private:
  ad::Tape& tape_;
  std::unordered_map<const Matrix*, Matrix*> sink_;
  std::unordered_map<const Matrix*, ad::Var> bound_;
};

struct VisualVars {
  std::vector<ad::Var> frame_inputs;
  std::vector<ad::Var> features;
  ad::Var frame_features;
  std::vector<ad::Var> tokens;
  std::vector<std::size_t> active;
  // [block][frame]; only active frames are populated
  std::vector<std::vector<ad::Var>> keys, values;
};

VisualVars build_visual(ad::Tape& t, const VictimModel& model, const PixelSample& sample, Binder& bind,
                        bool pixel_grad, const FrameMask& mask) {
  const ModelConfig& c = model.config();
  const ModelParams& p = model.params();
  if (sample.shape() != c.input_shape()) {
    std::ostringstream msg;
    msg << "sample shape " << sample.shape().frames << "x" << sample.shape().height << "x" << sample.shape().width
        << " does not match model input " << c.frames << "x" << c.image_size << "x" << c.image_size;
    throw std::invalid_argument(msg.str());
  }
  VisualVars vis;
  vis.active = active_frames(c, mask);
  const ad::Var pw = bind(p.patch_w), pb = bind(p.patch_b), ppos = bind(p.patch_pos);
  const ad::Var vg = bind(p.vis_ln_g), vb = bind(p.vis_ln_b);
  std::vector<ad::Var> memory(c.frames);
  std::vector<ad::Var> h(c.frames);
  for (std::size_t j = 0; j < c.frames; ++j) {
    const auto f = sample.frame(j);
    Matrix fm(1, f.size(), std::vector<double>(f.begin(), f.end()));
    const ad::Var in = pixel_grad ? t.input(std::move(fm)) : t.constant(std::move(fm));
    vis.frame_inputs.push_back(in);
    const ad::Var patches = t.patchify(in, c.image_size, c.image_size, c.patch);
    const ad::Var feat = t.add_row(t.matmul(patches, pw), pb);
    vis.features.push_back(feat);
    ad::Var tok = t.add(feat, ppos);
    const EncoderParams& e = p.encoder;
    ad::Var eh = t.layer_norm(tok, bind(e.ln1_g), bind(e.ln1_b));
    const ad::Var ea =
        t.attention(t.matmul(eh, bind(e.wq)), t.matmul(eh, bind(e.wk)), t.matmul(eh, bind(e.wv)), c.heads, false);
    tok = t.add(tok, t.add_row(t.matmul(ea, bind(e.wo)), bind(e.bo)));
    eh = t.layer_norm(tok, bind(e.ln2_g), bind(e.ln2_b));
    tok = t.add(tok, t.add_row(t.matmul(t.gelu(t.add_row(t.matmul(eh, bind(e.mlp_w1)), bind(e.mlp_b1))),
                                        bind(e.mlp_w2)),
                               bind(e.mlp_b2)));
    h[j] = t.mean_rows(tok);
    if (c.frames > 1) {
      const int idx = static_cast<int>(j);
      tok = t.add_row(tok, t.gather_rows(bind(p.frame_pos), std::span<const int>(&idx, 1)));
    }
    vis.tokens.push_back(tok);
    memory[j] = t.layer_norm(tok, vg, vb);
  }
  vis.frame_features = t.concat_rows(h);
  vis.keys.assign(c.blocks, std::vector<ad::Var>(c.frames));
  vis.values.assign(c.blocks, std::vector<ad::Var>(c.frames));
  for (std::size_t b = 0; b < c.blocks; ++b)
    for (std::size_t j : vis.active) {
      vis.keys[b][j] = t.matmul(memory[j], bind(p.blocks[b].ca_wk));
      vis.values[b][j] = t.matmul(memory[j], bind(p.blocks[b].ca_wv));
    }
  return vis;
}

/// Adds one block's head-averaged cross-attention weights for frame j into an
/// attention row over all M·patches visual positions.
void accumulate_attention(double* row, const double* weights, std::size_t frame, std::size_t patches, double w) {
  for (std::size_t i = 0; i < patches; ++i) row[frame * patches + i] += weights[i] * w;
}

struct Graph {
  ad::Tape tape;
  VisualVars visual;
  ad::Var logits;
  ad::Var hidden;
  std::vector<ad::Var> activations;
  StepOutputs outputs;
  bool has_steps = false;
};

/// Teacher-forced graph. `tokens` are the realized outputs y_1..y_N; the
/// decoder is fed BOS, the prompt, then y_1..y_{N-1}.
std::unique_ptr<Graph> build_graph(const VictimModel& model, const PixelSample& sample, std::span<const int> prompt,
                                   std::span<const int> tokens, const FrameMask& mask, bool pixel_grad,
                                   ModelParams* param_grads) {
  const ModelConfig& c = model.config();
  const ModelParams& p = model.params();
  check_ids(prompt, c.vocab.size(), "prompt");
  check_ids(tokens, c.vocab.size(), "tokens");
  auto g = std::make_unique<Graph>();
  ad::Tape& t = g->tape;
  Binder bind(t, p, param_grads);
  g->visual = build_visual(t, model, sample, bind, pixel_grad, mask);
  const VisualVars& vis = g->visual;
  g->outputs.frame_features = t.value(vis.frame_features);
  for (ad::Var v : vis.tokens) {
    g->activations.push_back(v);
    g->outputs.activations.push_back(t.value(v));
  }
  const std::size_t n = tokens.size();
  if (n == 0) return g;
  g->has_steps = true;

  std::vector<int> ids{c.vocab.bos_id()};
  ids.insert(ids.end(), prompt.begin(), prompt.end());
  ids.insert(ids.end(), tokens.begin(), tokens.end() - 1);
  const std::size_t len = ids.size();
  const std::size_t first = prompt.size();
  Matrix pe(len, c.dim);
  for (std::size_t i = 0; i < len; ++i) positional_row(i, c.dim, pe.row(i).data());
  ad::Var x = t.add(t.gather_rows(bind(p.tok_emb), ids), t.constant(std::move(pe)));

  const double inv_active = 1.0 / static_cast<double>(vis.active.size());
  const double inv_blocks = 1.0 / static_cast<double>(c.blocks);
  const std::size_t np = c.patches();
  Matrix attention(n, c.frames * np);
  std::vector<ad::Var> block_out;
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const BlockParams& bp = p.blocks[b];
    ad::Var h = t.layer_norm(x, bind(bp.ln1_g), bind(bp.ln1_b));
    ad::Var a = t.attention(t.matmul(h, bind(bp.sa_wq)), t.matmul(h, bind(bp.sa_wk)), t.matmul(h, bind(bp.sa_wv)),
                            c.heads, true);
    x = t.add(x, t.add_row(t.matmul(a, bind(bp.sa_wo)), bind(bp.sa_bo)));

    h = t.layer_norm(x, bind(bp.ln2_g), bind(bp.ln2_b));
    const ad::Var q = t.matmul(h, bind(bp.ca_wq));
    ad::Var cross{};
    bool first_frame = true;
    for (std::size_t j : vis.active) {
      Matrix weights;
      const ad::Var cj = t.attention(q, vis.keys[b][j], vis.values[b][j], c.heads, false, &weights);
      for (std::size_t i = 0; i < n; ++i)
        accumulate_attention(attention.row(i).data(), weights.row(first + i).data(), j, np, inv_active * inv_blocks);
      cross = first_frame ? cj : t.add(cross, cj);
      first_frame = false;
    }
    if (vis.active.size() > 1) cross = t.scale(cross, inv_active);
    x = t.add(x, t.add_row(t.matmul(cross, bind(bp.ca_wo)), bind(bp.ca_bo)));

    h = t.layer_norm(x, bind(bp.ln3_g), bind(bp.ln3_b));
    const ad::Var m =
        t.add_row(t.matmul(t.gelu(t.add_row(t.matmul(h, bind(bp.mlp_w1)), bind(bp.mlp_b1))), bind(bp.mlp_w2)),
                  bind(bp.mlp_b2));
    x = t.add(x, m);
    block_out.push_back(x);
    g->activations.push_back(x);
    g->outputs.activations.push_back(t.value(x));
  }
  const ad::Var final_state = t.slice_rows(t.layer_norm(x, bind(p.lnf_g), bind(p.lnf_b)), first, n);
  g->logits = t.add_row(t.matmul(final_state, bind(p.out_w)), bind(p.out_b));
  if (c.all_layer_hidden) {
    std::vector<ad::Var> parts;
    for (std::size_t b = 0; b + 1 < c.blocks; ++b) parts.push_back(t.slice_rows(block_out[b], first, n));
    parts.push_back(final_state);
    g->hidden = t.concat_cols(parts);
  } else {
    g->hidden = final_state;
  }
  g->outputs.logits = t.value(g->logits);
  g->outputs.probs = g->outputs.logits;
  for (std::size_t i = 0; i < n; ++i) softmax_inplace(g->outputs.probs.row(i));
  g->outputs.hidden = t.value(g->hidden);
  g->outputs.attention = std::move(attention);
  return g;
}

/// Incremental decoder with per-block key/value caches over the same row
/// kernels as the tape, so a replayed row rounds identically.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const VictimModel& model, const ad::Tape& vt, const VisualVars& vis)
      : m_(model), c_(model.config()), active_(vis.active) {
    const std::size_t d = c_.dim;
    self_k_.assign(c_.blocks, Matrix(0, d));
    self_v_.assign(c_.blocks, Matrix(0, d));
    cross_k_.resize(c_.blocks);
    cross_v_.resize(c_.blocks);
    for (std::size_t b = 0; b < c_.blocks; ++b) {
      cross_k_[b].resize(c_.frames);
      cross_v_[b].resize(c_.frames);
      for (std::size_t j : active_) {
        cross_k_[b][j] = &vt.value(vis.keys[b][j]);
        cross_v_[b][j] = &vt.value(vis.values[b][j]);
      }
    }
    block_out.assign(c_.blocks, Matrix(0, d));
  }

  /// Feeds `token` at absolute position `pos`; afterwards logits/state hold
  /// the prediction for the next position.
  void feed(int token, std::size_t pos) {
    const ModelParams& p = m_.params();
    const std::size_t d = c_.dim, hid = d * c_.mlp_ratio, dh = d / c_.heads, np = c_.patches();
    std::vector<double> x(d), pe(d), h(d), q(d), k(d), v(d), a(d), o(d), cross(d), cj(d), h1(hid);
    positional_row(pos, d, pe.data());
    for (std::size_t i = 0; i < d; ++i) x[i] = p.tok_emb(static_cast<std::size_t>(token), i) + pe[i];

    const double inv_active = 1.0 / static_cast<double>(active_.size());
    const double inv_blocks = 1.0 / static_cast<double>(c_.blocks);
    attention.assign(c_.frames * np, 0.0);
    std::vector<double> probs(std::max(np, pos + 1));
    std::vector<double> weights(np);
    std::vector<std::vector<double>> layer_states;
    for (std::size_t b = 0; b < c_.blocks; ++b) {
      const BlockParams& bp = p.blocks[b];
      ad::layer_norm_row(x.data(), d, bp.ln1_g.data(), bp.ln1_b.data(), h.data(), nullptr, nullptr);
      vecmat(h, bp.sa_wq, q);
      vecmat(h, bp.sa_wk, k);
      vecmat(h, bp.sa_wv, v);
      self_k_[b].append_row(k);
      self_v_[b].append_row(v);
      std::fill(a.begin(), a.end(), 0.0);
      const std::size_t len = self_k_[b].rows();
      for (std::size_t hd = 0; hd < c_.heads; ++hd)
        ad::attend_head_row(q.data() + hd * dh, self_k_[b].data() + hd * dh, self_v_[b].data() + hd * dh, d, len, dh,
                            probs.data(), a.data() + hd * dh);
      vecmat(a, bp.sa_wo, o);
      for (std::size_t i = 0; i < d; ++i) o[i] += bp.sa_bo.data()[i];
      for (std::size_t i = 0; i < d; ++i) x[i] = x[i] + o[i];

      ad::layer_norm_row(x.data(), d, bp.ln2_g.data(), bp.ln2_b.data(), h.data(), nullptr, nullptr);
      vecmat(h, bp.ca_wq, q);
      bool first_frame = true;
      for (std::size_t j : active_) {
        std::fill(cj.begin(), cj.end(), 0.0);
        std::fill(weights.begin(), weights.end(), 0.0);
        const Matrix& kk = *cross_k_[b][j];
        const Matrix& vv = *cross_v_[b][j];
        for (std::size_t hd = 0; hd < c_.heads; ++hd) {
          ad::attend_head_row(q.data() + hd * dh, kk.data() + hd * dh, vv.data() + hd * dh, d, np, dh, probs.data(),
                              cj.data() + hd * dh);
          const double inv_heads = 1.0 / static_cast<double>(c_.heads);
          for (std::size_t i = 0; i < np; ++i) weights[i] += probs[i] * inv_heads;
        }
        accumulate_attention(attention.data(), weights.data(), j, np, inv_active * inv_blocks);
        if (first_frame) {
          cross = cj;
        } else {
          for (std::size_t i = 0; i < d; ++i) cross[i] = cross[i] + cj[i];
        }
        first_frame = false;
      }
      if (active_.size() > 1)
        for (double& e : cross) e *= inv_active;
      vecmat(cross, bp.ca_wo, o);
      for (std::size_t i = 0; i < d; ++i) o[i] += bp.ca_bo.data()[i];
      for (std::size_t i = 0; i < d; ++i) x[i] = x[i] + o[i];

      ad::layer_norm_row(x.data(), d, bp.ln3_g.data(), bp.ln3_b.data(), h.data(), nullptr, nullptr);
      vecmat(h, bp.mlp_w1, h1);
      for (std::size_t i = 0; i < hid; ++i) h1[i] = ad::gelu(h1[i] + bp.mlp_b1.data()[i]);
      vecmat(h1, bp.mlp_w2, o);
      for (std::size_t i = 0; i < d; ++i) o[i] += bp.mlp_b2.data()[i];
      for (std::size_t i = 0; i < d; ++i) x[i] = x[i] + o[i];
      block_out[b].append_row(x);
      layer_states.push_back(x);
    }
    state.assign(d, 0.0);
    ad::layer_norm_row(x.data(), d, p.lnf_g.data(), p.lnf_b.data(), state.data(), nullptr, nullptr);
    logits.assign(c_.vocab.size(), 0.0);
    vecmat(state, p.out_w, logits);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += p.out_b.data()[i];
    hidden.clear();
    if (c_.all_layer_hidden)
      for (std::size_t b = 0; b + 1 < c_.blocks; ++b) hidden.insert(hidden.end(), layer_states[b].begin(), layer_states[b].end());
    hidden.insert(hidden.end(), state.begin(), state.end());
  }

  std::vector<double> logits, state, hidden, attention;
  std::vector<Matrix> block_out;

 private:
  const VictimModel& m_;
  const ModelConfig& c_;
  std::vector<std::size_t> active_;
  std::vector<Matrix> self_k_, self_v_;
  std::vector<std::vector<const Matrix*>> cross_k_, cross_v_;
};

int select_token(std::span<const double> probs, const DecodeOptions& opt, int eos, std::mt19937_64& rng) {
  std::vector<int> order(probs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  if (opt.suppress_eos) order.erase(order.begin() + eos);
  if (opt.policy.kind == DecodePolicy::Kind::greedy) {
    int best = order.front();
    for (int i : order)
      if (probs[i] > probs[best]) best = i;
    return best;
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  double mass = 0.0;
  double available = 0.0;
  for (int i : order) available += probs[i];
  std::size_t keep = 0;
  while (keep < order.size() && mass < opt.policy.top_p * available) mass += probs[order[keep++]];
  keep = std::max<std::size_t>(keep, 1);
  if (mass <= 0.0) return order.front();
  double u = std::uniform_real_distribution<double>(0.0, mass)(rng);
  for (std::size_t r = 0; r < keep; ++r) {
    u -= probs[order[r]];
    if (u < 0.0) return order[r];
  }
  return order[keep - 1];
}

}  // namespace

VictimModel::VictimModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  params_ = init_params(config_);
}

VictimModel::VictimModel(ModelConfig config, ModelParams params) : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const ModelParams ref = init_params(config_);
  std::vector<std::pair<std::size_t, std::size_t>> want;
  ref.visit([&](const std::string&, const Matrix& m) { want.emplace_back(m.rows(), m.cols()); });
  std::size_t i = 0;
  bool ok = params_.blocks.size() == config_.blocks;
  if (ok)
    params_.visit([&](const std::string&, const Matrix& m) {
      ok = ok && i < want.size() && want[i] == std::pair(m.rows(), m.cols());
      ++i;
    });
  if (!ok || i != want.size()) throw std::invalid_argument("VictimModel: parameter shapes do not match config");
}

bool VictimModel::operator==(const VictimModel& o) const {
  if (config_.to_json() != o.config_.to_json()) return false;
  std::vector<const Matrix*> mine, theirs;
  params_.visit([&](const std::string&, const Matrix& m) { mine.push_back(&m); });
  o.params_.visit([&](const std::string&, const Matrix& m) { theirs.push_back(&m); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i)
    if (!(*mine[i] == *theirs[i])) return false;
  return true;
}

Distribution StepOutputs::distribution(std::size_t i) const {
  const auto r = probs.row(i);
  return Distribution(std::vector<double>(r.begin(), r.end()));
}

Matrix encode_image(const VictimModel& model, std::span<const double> frame) {
  const ModelConfig& c = model.config();
  if (frame.size() != c.image_size * c.image_size * 3) throw std::invalid_argument("encode_image: frame shape mismatch");
  ad::Tape t;
  Matrix fm(1, frame.size(), std::vector<double>(frame.begin(), frame.end()));
  const ad::Var patches = t.patchify(t.constant(std::move(fm)), c.image_size, c.image_size, c.patch);
  const ad::Var feat = t.add_row(t.matmul(patches, t.parameter(model.params().patch_w)), t.parameter(model.params().patch_b));
  return t.value(feat);
}

Matrix encode_video(const VictimModel& model, const PixelSample& sample) {
  if (sample.kind() != Modality::video) throw std::invalid_argument("encode_video: sample is not a video");
  if (sample.frame_count() != model.config().frames)
    throw std::invalid_argument("encode_video: frame count " + std::to_string(sample.frame_count()) +
                                " does not match model's " + std::to_string(model.config().frames));
  ad::Tape t;
  Binder bind(t, model.params(), nullptr);
  return t.value(build_visual(t, model, sample, bind, false, {}).frame_features);
}

GenerationTrace generate(const VictimModel& model, const PixelSample& sample, std::span<const int> prompt,
                         const DecodeOptions& options, std::mt19937_64& rng) {
  const ModelConfig& c = model.config();
  check_ids(prompt, c.vocab.size(), "prompt");
  ad::Tape vt;
  Binder bind(vt, model.params(), nullptr);
  const VisualVars vis = build_visual(vt, model, sample, bind, false, options.frame_mask);

  GenerationTrace trace;
  trace.prompt.assign(prompt.begin(), prompt.end());
  StepOutputs& out = trace.outputs;
  out.frame_features = vt.value(vis.frame_features);
  for (ad::Var v : vis.tokens) out.activations.push_back(vt.value(v));
  out.logits = Matrix(0, c.vocab.size());
  out.probs = Matrix(0, c.vocab.size());
  out.hidden = Matrix(0, c.hidden_dim());
  out.attention = Matrix(0, c.frames * c.patches());
  if (options.max_length == 0) {
    for (std::size_t b = 0; b < c.blocks; ++b) out.activations.emplace_back(0, c.dim);
    return trace;
  }

  IncrementalDecoder dec(model, vt, vis);
  std::size_t pos = 0;
  dec.feed(c.vocab.bos_id(), pos++);
  for (int id : prompt) dec.feed(id, pos++);
  const int eos = c.vocab.eos_id();
  std::vector<double> probs;
  for (std::size_t step = 0; step < options.max_length; ++step) {
    probs = dec.logits;
    softmax_inplace(probs);
    out.logits.append_row(dec.logits);
    out.probs.append_row(probs);
    out.hidden.append_row(dec.hidden);
    out.attention.append_row(dec.attention);
    const int token = select_token(probs, options, eos, rng);
    trace.tokens.push_back(token);
    if (token == eos || step + 1 == options.max_length) break;
    dec.feed(token, pos++);
  }
  for (Matrix& m : dec.block_out) out.activations.push_back(std::move(m));
  return trace;
}

StepOutputs teacher_forced_forward(const VictimModel& model, const PixelSample& sample, std::span<const int> prompt,
                                   std::span<const int> tokens, const FrameMask& mask) {
  auto g = build_graph(model, sample, prompt, tokens, mask, false, nullptr);
  return std::move(g->outputs);
}

double sequence_log_prob(const StepOutputs& outputs, std::span<const int> tokens) {
  if (tokens.size() != outputs.steps()) throw std::invalid_argument("sequence_log_prob: token count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const double p = outputs.probs(i, static_cast<std::size_t>(tokens[i]));
    if (!(p > 0.0)) {
      std::ostringstream msg;
      msg << "sequence_log_prob: realized token " << tokens[i] << " at step " << i << " has zero probability";
      throw std::domain_error(msg.str());
    }
    total += std::log(p);
  }
  return total;
}

double sequence_log_prob(const GenerationTrace& trace) { return sequence_log_prob(trace.outputs, trace.tokens); }

namespace {

void seed_gradients(Graph& g, const LossGradient& lg) {
  ad::Tape& t = g.tape;
  const StepOutputs& out = g.outputs;
  auto check = [](const Matrix& m, const Matrix& ref, const char* what) {
    if (m.empty()) return false;
    if (m.rows() != ref.rows() || m.cols() != ref.cols())
      throw std::invalid_argument(std::string("backward_to_input: gradient shape mismatch for ") + what);
    if (!m.all_finite()) throw std::domain_error(std::string("backward_to_input: non-finite gradient for ") + what);
    return true;
  };
  if (g.has_steps) {
    const bool dl = check(lg.d_logits, out.logits, "logits");
    const bool dp = check(lg.d_probs, out.probs, "probs");
    if (dl || dp) {
      Matrix& gl = t.grad(g.logits);
      if (dl)
        for (std::size_t i = 0; i < gl.size(); ++i) gl.data()[i] += lg.d_logits.data()[i];
      if (dp)
        for (std::size_t r = 0; r < out.probs.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < out.probs.cols(); ++j) dot += out.probs(r, j) * lg.d_probs(r, j);
          for (std::size_t j = 0; j < out.probs.cols(); ++j) gl(r, j) += out.probs(r, j) * (lg.d_probs(r, j) - dot);
        }
    }
    if (check(lg.d_hidden, out.hidden, "hidden")) {
      Matrix& gh = t.grad(g.hidden);
      for (std::size_t i = 0; i < gh.size(); ++i) gh.data()[i] += lg.d_hidden.data()[i];
    }
  } else if (!lg.d_logits.empty() || !lg.d_probs.empty() || !lg.d_hidden.empty()) {
    throw std::invalid_argument("backward_to_input: step gradients supplied for an empty token sequence");
  }
  if (check(lg.d_frame_features, out.frame_features, "frame features")) {
    Matrix& gf = t.grad(g.visual.frame_features);
    for (std::size_t i = 0; i < gf.size(); ++i) gf.data()[i] += lg.d_frame_features.data()[i];
  }
  if (!lg.d_activations.empty()) {
    if (lg.d_activations.size() != g.activations.size())
      throw std::invalid_argument("backward_to_input: activation gradient count mismatch");
    for (std::size_t k = 0; k < g.activations.size(); ++k) {
      if (!check(lg.d_activations[k], out.activations[k], "activation")) continue;
      Matrix& ga = t.grad(g.activations[k]);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] += lg.d_activations[k].data()[i];
    }
  }
}

}  // namespace

InputGradient backward_to_input(const VictimModel& model, const PixelSample& sample, std::span<const int> prompt,
                                std::span<const int> tokens, const LossFn& loss_fn, const FrameMask& mask) {
  auto g = build_graph(model, sample, prompt, tokens, mask, true, nullptr);
  const LossValue lv = loss_fn(LossContext{g->outputs, tokens, model.vocab()});
  if (!std::isfinite(lv.value)) throw std::domain_error("backward_to_input: loss is not finite");
  seed_gradients(*g, lv.grad);
  g->tape.backward();
  InputGradient out;
  out.loss = lv.value;
  out.gradient.shape = sample.shape();
  out.gradient.values.assign(sample.shape().total(), 0.0);
  const std::size_t fs = sample.shape().frame_size();
  for (std::size_t j = 0; j < g->visual.frame_inputs.size(); ++j) {
    const ad::Var v = g->visual.frame_inputs[j];
    if (!g->tape.has_grad(v)) continue;
    const Matrix& gr = g->tape.grad(v);
    std::copy(gr.data(), gr.data() + fs, out.gradient.values.begin() + static_cast<std::ptrdiff_t>(j * fs));
  }
  return out;
}

double accumulate_caption_gradient(const VictimModel& model, const PixelSample& sample, std::span<const int> prompt,
                                   std::span<const int> targets, ModelParams& grads, double label_smoothing) {
  if (targets.empty()) throw std::invalid_argument("accumulate_caption_gradient: empty target sequence");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw std::invalid_argument("accumulate_caption_gradient: label_smoothing must lie in [0, 1)");
  auto g = build_graph(model, sample, prompt, targets, {}, false, &grads);
  const Matrix& probs = g->outputs.probs;
  const double inv = 1.0 / static_cast<double>(targets.size());
  const double floor = label_smoothing / static_cast<double>(probs.cols());
  Matrix& gl = g->tape.grad(g->logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto y = static_cast<std::size_t>(targets[i]);
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      const double q = floor + (j == y ? 1.0 - label_smoothing : 0.0);
      if (q > 0.0) loss -= q * std::log(std::max(probs(i, j), 1e-300));
      gl(i, j) = (probs(i, j) - q) * inv;
    }
  }
  g->tape.backward();
  return loss * inv;
}

}  // namespace verbose
