#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "verbose/shape_world.hpp"
#include "verbose/train.hpp"
#include "verbose/victim.hpp"

using namespace verbose;
namespace fs = std::filesystem;

namespace {

// Dominant non-background color index per occupied quadrant, in reading order.
// Palette entries are told apart by their red channel.
std::vector<int> quadrant_colors(const PixelSample& s) {
  static const std::map<int, int> by_red{{230, 0}, {40, 1}, {50, 2}, {240, 3}, {160, 4}, {250, 5}};
  const std::size_t n = s.shape().width, half = n / 2;
  const auto px = s.frame(0);
  const double bg = px[0];
  std::vector<int> out;
  for (std::size_t quad = 0; quad < 4; ++quad) {
    std::map<int, int> votes;
    for (std::size_t y = (quad / 2) * half; y < (quad / 2 + 1) * half; ++y)
      for (std::size_t x = (quad % 2) * half; x < (quad % 2 + 1) * half; ++x) {
        const double* p = &px[(y * n + x) * 3];
        if (p[0] == bg && p[1] == bg && p[2] == bg) continue;
        ++votes[by_red.at(static_cast<int>(std::lround(p[0] * 255.0)))];
      }
    if (votes.empty()) continue;
    const auto best = std::max_element(votes.begin(), votes.end(),
                                       [](const auto& a, const auto& b) { return a.second < b.second; });
    if (best->second > 8) out.push_back(best->first);
  }
  return out;
}

std::vector<int> object_colors(const std::vector<ShapeObject>& objects) {
  std::vector<int> out;
  for (const auto& o : objects) out.push_back(o.color);
  return out;
}

PixelSample random_sample(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(c.input_shape().total());
  for (double& v : px) v = u(rng);
  return PixelSample(c.modality(), c.input_shape(), std::move(px));
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("verbose_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("victim") {
  TEST_CASE("pixel samples enforce the unit range") {
    const FrameShape s{2, 2, 2};
    CHECK_THROWS(PixelSample(Modality::video, s, std::vector<double>(s.total(), 1.5)));
    CHECK_THROWS(PixelSample(Modality::video, s, std::vector<double>(3, 0.5)));
    PixelSample ok = PixelSample::filled(Modality::video, s, 0.25);
    CHECK(ok.frame(1).size() == 12);
    CHECK_THROWS(ok.assign(std::vector<double>(s.total(), -0.1)));
  }

  TEST_CASE("vocabulary encodes, renders and validates") {
    const VocabSpec& v = shape_world_vocab();
    CHECK(v.size() == 64);
    const auto ids = v.encode("a red circle and a blue square");
    CHECK(v.render(ids) == "a red circle and a blue square");
    std::vector<int> with_specials{v.bos_id()};
    with_specials.insert(with_specials.end(), ids.begin(), ids.end());
    with_specials.push_back(v.eos_id());
    CHECK(v.render(with_specials) == "a red circle and a blue square");
    CHECK_THROWS(v.encode("a plaid circle"));
    CHECK_THROWS(VocabSpec({"x", "y", "z"}, 0, 0, 1));
    CHECK(VocabSpec::generic(16).size() == 16);
  }

  TEST_CASE("shape world is deterministic and follows the caption grammar") {
    const auto a = make_shape_world(40, Modality::image, 5);
    const auto b = make_shape_world(40, Modality::image, 5);
    const auto& v = shape_world_vocab();
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].sample == b[i].sample);
      CHECK(a[i].caption == caption_for(a[i].objects));
      CHECK(a[i].objects.size() >= 1);
      CHECK(a[i].objects.size() <= 3);
      CHECK(quadrant_colors(a[i].sample) == object_colors(a[i].objects));
      CHECK(std::set<ShapeObject>(a[i].objects.begin(), a[i].objects.end()).size() == a[i].objects.size());
      CHECK_NOTHROW(v.encode(a[i].caption));
      for (double p : a[i].sample.pixels()) CHECK(std::abs(p * 255.0 - std::round(p * 255.0)) < 1e-9);
    }
    // item i depends only on (seed, i)
    const auto longer = make_shape_world(50, Modality::image, 5);
    CHECK(longer[39].sample == a[39].sample);
  }

  TEST_CASE("shape world videos have eight frames with moving objects") {
    const auto items = make_shape_world(10, Modality::video, 3);
    bool any_motion = false;
    for (const auto& it : items) {
      CHECK(it.sample.frame_count() == 8);
      CHECK(it.sample.kind() == Modality::video);
      const auto f0 = it.sample.frame(0), f7 = it.sample.frame(7);
      any_motion = any_motion || !std::equal(f0.begin(), f0.end(), f7.begin());
    }
    CHECK(any_motion);
  }

  TEST_CASE("dataset export round-trips exactly") {
    const fs::path dir = scratch_dir("dataset");
    const auto items = make_shape_world(6, Modality::video, 9);
    export_dataset(dir, items);
    const auto back = load_dataset(dir);
    REQUIRE(back.size() == items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
      CHECK(back[i].sample == items[i].sample);
      CHECK(back[i].caption == items[i].caption);
      CHECK(back[i].objects == items[i].objects);
    }
    CHECK_THROWS(load_dataset(dir / "missing"));
  }

  TEST_CASE("derived seeds differ across indices and bases") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t b = 0; b < 4; ++b)
      for (std::uint64_t i = 0; i < 64; ++i) seen.insert(derive_seed(b, i));
    CHECK(seen.size() == 256);
  }

  TEST_CASE("generation is deterministic and well formed") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 1);
    for (DecodePolicy policy : {DecodePolicy::greedy(), DecodePolicy::nucleus(0.9)}) {
      DecodeOptions opt;
      opt.policy = policy;
      opt.max_length = 12;
      std::mt19937_64 r1(7), r2(7);
      const GenerationTrace a = generate(m, x, {}, opt, r1);
      const GenerationTrace b = generate(m, x, {}, opt, r2);
      CHECK(a.tokens == b.tokens);
      CHECK(a.outputs.logits == b.outputs.logits);
      CHECK(a.length() <= 12);
      CHECK(a.outputs.steps() == a.length());
      CHECK(a.outputs.hidden.rows() == a.length());
      CHECK(a.outputs.hidden.cols() == m.config().dim);
      for (std::size_t i = 0; i < a.length(); ++i) CHECK_NOTHROW(a.outputs.distribution(i));
      for (std::size_t i = 0; i + 1 < a.length(); ++i) CHECK(a.tokens[i] != m.vocab().eos_id());
    }
  }

  TEST_CASE("teacher forcing replays generation bit for bit") {
    for (std::size_t frames : {1u, 3u}) {
      const VictimModel m(ModelConfig::reduced(frames));
      const PixelSample x = random_sample(m.config(), 2);
      DecodeOptions opt;
      opt.max_length = 10;
      std::mt19937_64 rng(1);
      const std::vector<int> prompt{5, 6};
      const GenerationTrace g = generate(m, x, prompt, opt, rng);
      const StepOutputs tf = teacher_forced_forward(m, x, prompt, g.tokens);
      CHECK(tf.logits == g.outputs.logits);
      CHECK(tf.hidden == g.outputs.hidden);
      CHECK(tf.attention == g.outputs.attention);
      CHECK(tf.frame_features == g.outputs.frame_features);
    }
  }

  TEST_CASE("suppressing EOS forces the full length without changing distributions") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 3);
    DecodeOptions opt;
    opt.max_length = 20;
    opt.suppress_eos = true;
    std::mt19937_64 rng(1);
    const GenerationTrace g = generate(m, x, {}, opt, rng);
    CHECK(g.length() == 20);
    for (int t : g.tokens) CHECK(t != m.vocab().eos_id());
    CHECK(teacher_forced_forward(m, x, {}, g.tokens).probs == g.outputs.probs);
  }

  TEST_CASE("frame features depend only on their own frame") {
    const VictimModel m(ModelConfig::reduced(3));
    const PixelSample x = random_sample(m.config(), 4);
    std::vector<double> px(x.pixels().begin(), x.pixels().end());
    const std::size_t fs = x.shape().frame_size();
    for (std::size_t i = fs; i < 2 * fs; ++i) px[i] = 1.0 - px[i];
    const PixelSample y(x.kind(), x.shape(), px);
    const Matrix a = encode_video(m, x), b = encode_video(m, y);
    REQUIRE(a.rows() == 3);
    CHECK(std::equal(a.row(0).begin(), a.row(0).end(), b.row(0).begin()));
    CHECK(std::equal(a.row(2).begin(), a.row(2).end(), b.row(2).begin()));
    CHECK_FALSE(std::equal(a.row(1).begin(), a.row(1).end(), b.row(1).begin()));
  }

  TEST_CASE("masked frames do not influence decoding") {
    const VictimModel m(ModelConfig::reduced(3));
    const PixelSample x = random_sample(m.config(), 5);
    std::vector<double> px(x.pixels().begin(), x.pixels().end());
    const std::size_t fs = x.shape().frame_size();
    for (std::size_t i = 2 * fs; i < 3 * fs; ++i) px[i] = 0.0;
    const PixelSample y(x.kind(), x.shape(), px);
    DecodeOptions opt;
    opt.max_length = 8;
    opt.frame_mask = {true, true, false};
    std::mt19937_64 r1(1), r2(1);
    const auto a = generate(m, x, {}, opt, r1);
    const auto b = generate(m, y, {}, opt, r2);
    CHECK(a.tokens == b.tokens);
    CHECK(a.outputs.logits == b.outputs.logits);
  }

  TEST_CASE("image encoding is the linear patch projection") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 6);
    const Matrix e = encode_image(m, x.frame(0));
    REQUIRE(e.rows() == m.config().patches());
    // patch 0 covers rows 0..3, columns 0..3 of the 8×8 frame
    std::vector<double> patch;
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t xx = 0; xx < 4; ++xx)
        for (std::size_t ch = 0; ch < 3; ++ch) patch.push_back(x.frame(0)[(y * 8 + xx) * 3 + ch]);
    const auto& p = m.params();
    for (std::size_t j = 0; j < e.cols(); ++j) {
      double v = p.patch_b(0, j);
      for (std::size_t k = 0; k < patch.size(); ++k) v += patch[k] * p.patch_w(k, j);
      CHECK(e(0, j) == doctest::Approx(v).epsilon(1e-12));
    }
  }

  TEST_CASE("sequence log probability sums realized token log probabilities") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 7);
    DecodeOptions opt;
    opt.max_length = 6;
    std::mt19937_64 rng(3);
    const GenerationTrace g = generate(m, x, {}, opt, rng);
    double expected = 0.0;
    for (std::size_t i = 0; i < g.length(); ++i)
      expected += std::log(g.outputs.probs(i, static_cast<std::size_t>(g.tokens[i])));
    CHECK(sequence_log_prob(g) == doctest::Approx(expected).epsilon(1e-12));
    StepOutputs zeroed = g.outputs;
    zeroed.probs(0, static_cast<std::size_t>(g.tokens[0])) = 0.0;
    CHECK_THROWS_AS(sequence_log_prob(zeroed, g.tokens), std::domain_error);
  }

  TEST_CASE("input gradient of a simple loss matches finite differences") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 8);
    const std::vector<int> tokens{4, 9, 3, 2};
    const auto fn = [](const LossContext& ctx) {
      LossValue v;
      v.grad.d_hidden = Matrix(ctx.outputs.hidden.rows(), ctx.outputs.hidden.cols());
      for (std::size_t i = 0; i < ctx.outputs.hidden.rows(); ++i) {
        v.value += ctx.outputs.hidden(i, 0);
        v.grad.d_hidden(i, 0) = 1.0;
      }
      return v;
    };
    const InputGradient g = backward_to_input(m, x, {}, tokens, fn);
    const auto f = [&](std::span<const double> px) {
      const PixelSample s(x.kind(), x.shape(), std::vector<double>(px.begin(), px.end()));
      const Matrix h = teacher_forced_forward(m, s, {}, tokens).hidden;
      double v = 0.0;
      for (std::size_t i = 0; i < h.rows(); ++i) v += h(i, 0);
      return v;
    };
    // probe a handful of interior pixels
    std::vector<double> base(x.pixels().begin(), x.pixels().end());
    for (std::size_t i : {0u, 17u, 50u, 100u, 191u}) {
      if (base[i] < 1e-3 || base[i] > 1 - 1e-3) continue;
      const double h = 1e-6;
      auto up = base, down = base;
      up[i] += h;
      down[i] -= h;
      const double fd = (f(up) - f(down)) / (2 * h);
      CHECK(g.gradient.values[i] == doctest::Approx(fd).epsilon(1e-5).scale(1e-3));
    }
  }

  TEST_CASE("caption gradient matches finite differences on a parameter") {
    for (double smoothing : {0.0, 0.1}) {
      VictimModel m(ModelConfig::reduced());
      const PixelSample x = random_sample(m.config(), 9);
      const std::vector<int> targets{5, 7, 2};
      ModelParams grads = m.params();
      grads.visit([](const std::string&, Matrix& g) { g.fill(0.0); });
      const double loss = accumulate_caption_gradient(m, x, {}, targets, grads, smoothing);
      // (1 − s)·CE plus s times the mean cross entropy against uniform
      const StepOutputs o = teacher_forced_forward(m, x, {}, targets);
      double uniform_ce = 0.0;
      for (std::size_t i = 0; i < o.steps(); ++i)
        for (std::size_t j = 0; j < o.probs.cols(); ++j) uniform_ce -= std::log(o.probs(i, j)) / static_cast<double>(o.probs.cols());
      const double expected = ((1.0 - smoothing) * -sequence_log_prob(o, targets) + smoothing * uniform_ce) / 3.0;
      CHECK(loss == doctest::Approx(expected).epsilon(1e-12));

      const double analytic = grads.out_w(3, 5);
      const double h = 1e-6;
      const double orig = m.params().out_w(3, 5);
      m.mutable_params().out_w(3, 5) = orig + h;
      ModelParams scratch = grads;
      const double up = accumulate_caption_gradient(m, x, {}, targets, scratch, smoothing);
      m.mutable_params().out_w(3, 5) = orig - h;
      const double down = accumulate_caption_gradient(m, x, {}, targets, scratch, smoothing);
      CHECK(analytic == doctest::Approx((up - down) / (2 * h)).epsilon(1e-5));
    }
    VictimModel m(ModelConfig::reduced());
    ModelParams grads = m.params();
    const std::vector<int> targets{5, 2};
    CHECK_THROWS(accumulate_caption_gradient(m, random_sample(m.config(), 1), {}, targets, grads, 1.0));
  }

  TEST_CASE("checkpoints round-trip and re-save identically") {
    const fs::path dir = scratch_dir("ckpt");
    ModelConfig c = ModelConfig::reduced(2);
    c.seed = 42;
    const VictimModel m(c);
    save_checkpoint(dir / "a.bin", m);
    const VictimModel back = load_checkpoint(dir / "a.bin");
    CHECK(back == m);
    save_checkpoint(dir / "b.bin", back);
    CHECK(read_bytes(dir / "a.bin") == read_bytes(dir / "b.bin"));
    std::ofstream(dir / "bad.bin") << "not a checkpoint";
    CHECK_THROWS(load_checkpoint(dir / "bad.bin"));
  }

  TEST_CASE("training with zero epochs returns the initialized model") {
    ModelConfig c = ModelConfig::reduced();
    c.vocab = shape_world_vocab();
    const auto data = make_shape_world(4, Modality::image, 1, {16, 8});
    c.image_size = 16;
    TrainConfig tc;
    tc.epochs = 0;
    tc.seed = 11;
    const VictimModel trained = train_toy(c, data, tc);
    ModelConfig init = c;
    init.seed = 11;
    CHECK(trained == VictimModel(init));
  }

  TEST_CASE("training is reproducible and lowers the loss") {
    ModelConfig c = ModelConfig::reduced();
    c.vocab = shape_world_vocab();
    c.image_size = 16;
    const auto data = make_shape_world(24, Modality::image, 2, {16, 8});
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    tc.seed = 5;
    TrainReport r1, r2;
    const VictimModel a = train_toy(c, data, tc, &r1);
    const VictimModel b = train_toy(c, data, tc, &r2);
    CHECK(a == b);
    REQUIRE(r1.epoch_loss.size() == 3);
    CHECK(r1.epoch_loss.back() < r1.epoch_loss.front());
  }

  TEST_CASE("video training defaults double the image epochs") {
    const TrainConfig image = TrainConfig::defaults_for(Modality::image);
    const TrainConfig video = TrainConfig::defaults_for(Modality::video);
    CHECK(image.epochs == TrainConfig{}.epochs);
    CHECK(video.epochs == 2 * image.epochs);
    CHECK(video.learning_rate == image.learning_rate);
  }
}
