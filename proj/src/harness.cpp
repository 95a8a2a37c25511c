#include "verbose/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace verbose {

namespace {

// Wall-clock measurements hold this so concurrent workers do not skew them.
std::mutex timing_mutex;

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string opt_csv(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

nlohmann::json regression_json(const Regression& r) {
  return {{"r", r.r}, {"slope", r.slope}, {"intercept", r.intercept}};
}

nlohmann::json histogram_json(const Histogram& h) { return {{"lo", h.lo}, {"width", h.width}, {"counts", h.counts}}; }

std::uint64_t eval_stream(std::uint64_t seed) { return seed ^ 0x9E3779B97F4A7C15ULL; }

}  // namespace

nlohmann::json EvalOptions::to_json() const {
  nlohmann::json p = policy.kind == DecodePolicy::Kind::greedy ? nlohmann::json{{"kind", "greedy"}}
                                                               : nlohmann::json{{"kind", "nucleus"}, {"top_p", policy.top_p}};
  return {{"policy", p},
          {"max_length", max_length},
          {"trials", trials},
          {"clock", clock.to_json()},
          {"meter", meter.to_json()}};
}

EvalOptions EvalOptions::from_json(const nlohmann::json& j) { return from_json(j, EvalOptions()); }

EvalOptions EvalOptions::from_json(const nlohmann::json& j, EvalOptions o) {
  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    const auto kind = p.at("kind").get<std::string>();
    if (kind == "greedy")
      o.policy = DecodePolicy::greedy();
    else if (kind == "nucleus")
      o.policy = DecodePolicy::nucleus(p.value("top_p", 0.9));
    else
      throw std::invalid_argument("eval: unknown decode policy " + kind);
  }
  o.max_length = j.value("max_length", o.max_length);
  o.trials = j.value("trials", o.trials);
  if (j.contains("clock")) o.clock = ClockSpec::from_json(j.at("clock"));
  if (j.contains("meter")) o.meter = MeterSpec::from_json(j.at("meter"));
  if (o.trials < 1) throw std::invalid_argument("eval: trials must be >= 1");
  if (o.max_length < 1) throw std::invalid_argument("eval: max_length must be >= 1");
  return o;
}

namespace {

GenerationMeasurement measure(const VictimModel& victim, const PixelSample& sample, std::span<const int> prompt,
                              const DecodeOptions& decode, const EvalOptions& options, std::uint64_t seed) {
  if (options.trials < 1) throw std::invalid_argument("measure_generation: trials must be >= 1");
  EnergyMeter meter(options.meter);
  GenerationMeasurement out;
  double energy = 0.0;
  bool energy_ok = true;
  for (std::size_t k = 0; k < options.trials; ++k) {
    std::mt19937_64 rng(derive_seed(seed, k));
    GenerationTrace trace;
    double latency = 0.0;
    std::optional<double> joules;
    if (options.clock.kind == ClockSpec::Kind::wall) {
      std::lock_guard lock(timing_mutex);
      meter.begin();
      const auto t0 = std::chrono::steady_clock::now();
      trace = generate(victim, sample, prompt, decode, rng);
      latency = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      joules = meter.end(latency);
    } else {
      meter.begin();
      trace = generate(victim, sample, prompt, decode, rng);
      latency = options.clock.model_latency(trace.length());
      joules = meter.end(latency);
    }
    out.mean_length += static_cast<double>(trace.length());
    out.mean_latency += latency;
    if (joules)
      energy += *joules;
    else
      energy_ok = false;
    if (k == 0) out.trace = std::move(trace);
  }
  const double n = static_cast<double>(options.trials);
  out.mean_length /= n;
  out.mean_latency /= n;
  if (energy_ok) out.mean_energy = energy / n;
  return out;
}

}  // namespace

GenerationMeasurement measure_generation(const VictimModel& victim, const PixelSample& sample,
                                         std::span<const int> prompt, const EvalOptions& options,
                                         std::uint64_t seed) {
  DecodeOptions decode;
  decode.policy = options.policy;
  decode.max_length = options.max_length;
  return measure(victim, sample, prompt, decode, options, seed);
}

nlohmann::json LinearityReport::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points) pts.push_back({{"length", p.length}, {"latency", p.latency}, {"energy", opt_json(p.energy)}});
  return {{"points", pts},
          {"latency_fit", regression_json(latency_fit)},
          {"energy_fit", energy_fit ? regression_json(*energy_fit) : nlohmann::json(nullptr)}};
}

LinearityReport linearity_from_points(std::vector<LinearityPoint> points) {
  std::set<std::size_t> distinct;
  for (const auto& p : points) distinct.insert(p.length);
  if (distinct.size() < 4) throw std::invalid_argument("linearity: need at least four distinct lengths");
  std::vector<double> x, lat, en;
  bool all_energy = true;
  for (const auto& p : points) {
    x.push_back(static_cast<double>(p.length));
    lat.push_back(p.latency);
    if (p.energy)
      en.push_back(*p.energy);
    else
      all_energy = false;
  }
  LinearityReport out;
  out.latency_fit = linear_fit(x, lat);
  if (all_energy) out.energy_fit = linear_fit(x, en);
  out.points = std::move(points);
  return out;
}

LinearityReport linearity_check(const VictimModel& victim, const PixelSample& sample,
                                const std::vector<std::size_t>& lengths, const EvalOptions& options,
                                std::uint64_t seed) {
  std::vector<LinearityPoint> points;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] < 1) throw std::invalid_argument("linearity: lengths must be >= 1");
    DecodeOptions decode;
    decode.policy = options.policy;
    decode.max_length = lengths[i];
    decode.suppress_eos = true;
    const GenerationMeasurement m = measure(victim, sample, {}, decode, options, derive_seed(seed, i));
    points.push_back({m.trace.length(), m.mean_latency, m.mean_energy});
  }
  return linearity_from_points(std::move(points));
}

ChairCounts chair_counts(const std::string& caption, const std::vector<ShapeObject>& truth) {
  static const std::vector<std::string> off_world_colors{"white", "black", "gray", "pink", "brown", "cyan"};
  static const std::vector<std::pair<std::string, int>> shape_words{
      {"circle", 0}, {"square", 1}, {"triangle", 2}, {"diamond", 3}, {"ball", 0}, {"ring", 0}, {"box", 1}, {"block", 1}};
  static const std::vector<std::string> foreign_nouns{"star", "heart", "cross", "arrow", "moon"};
  const auto& colors = shape_world_colors();

  std::vector<std::string> words;
  std::istringstream in(caption);
  for (std::string w; in >> w;) words.push_back(w);

  ChairCounts out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const std::string& w = words[i];
    const bool foreign = std::find(foreign_nouns.begin(), foreign_nouns.end(), w) != foreign_nouns.end();
    const auto sw = std::find_if(shape_words.begin(), shape_words.end(), [&](const auto& p) { return p.first == w; });
    if (!foreign && sw == shape_words.end()) continue;
    ++out.mentions;
    if (foreign) {
      ++out.hallucinated;
      continue;
    }
    const int shape = sw->second;
    std::optional<int> color;
    bool off_world_color = false;
    if (i > 0) {
      const auto c = std::find(colors.begin(), colors.end(), words[i - 1]);
      if (c != colors.end()) color = static_cast<int>(c - colors.begin());
      off_world_color = std::find(off_world_colors.begin(), off_world_colors.end(), words[i - 1]) != off_world_colors.end();
    }
    const bool grounded =
        !off_world_color && std::any_of(truth.begin(), truth.end(), [&](const ShapeObject& o) {
          return o.shape == shape && (!color || o.color == *color);
        });
    if (!grounded) ++out.hallucinated;
  }
  return out;
}

Chair chair_metrics(const std::vector<std::string>& captions, const std::vector<std::vector<ShapeObject>>& truths) {
  if (captions.empty()) throw std::invalid_argument("chair_metrics: empty caption set");
  if (captions.size() != truths.size()) throw std::invalid_argument("chair_metrics: caption/truth count mismatch");
  std::size_t mentions = 0, hallucinated = 0, bad_sentences = 0;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    const ChairCounts c = chair_counts(captions[i], truths[i]);
    mentions += c.mentions;
    hallucinated += c.hallucinated;
    if (c.hallucinated > 0) ++bad_sentences;
  }
  Chair out;
  out.instance = mentions ? static_cast<double>(hallucinated) / static_cast<double>(mentions) : 0.0;
  out.sentence = static_cast<double>(bad_sentences) / static_cast<double>(captions.size());
  return out;
}

double attention_dispersion(const StepOutputs& outputs) {
  const Matrix& a = outputs.attention;
  if (a.rows() == 0 || a.cols() == 0) throw std::invalid_argument("attention_dispersion: no attention maps");
  std::vector<double> avg(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) avg[j] += a(i, j);
  double total = 0.0;
  for (double v : avg) total += v;
  if (!(total > 0.0)) throw std::invalid_argument("attention_dispersion: attention rows are empty");
  double h = 0.0;
  for (double v : avg) {
    const double p = v / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(0.0, h);
}

PixelGradient saliency_map(const VictimModel& victim, const PixelSample& sample, std::span<const int> prompt,
                           std::span<const int> tokens, const FrameMask& mask) {
  const LossFn log_prob = [](const LossContext& ctx) {
    LossValue out;
    const Matrix& z = ctx.outputs.logits;
    const Matrix& p = ctx.outputs.probs;
    out.grad.d_logits = Matrix(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const auto y = static_cast<std::size_t>(ctx.tokens[i]);
      out.value += z(i, y) - log_sum_exp(z.row(i));
      for (std::size_t j = 0; j < z.cols(); ++j) out.grad.d_logits(i, j) = (j == y ? 1.0 : 0.0) - p(i, j);
    }
    return out;
  };
  InputGradient g = backward_to_input(victim, sample, prompt, tokens, log_prob, mask);
  for (double& v : g.gradient.values) v = std::abs(v);
  return std::move(g.gradient);
}

Perceptibility perceptibility(const PixelSample& original, const PixelSample& perturbed) {
  if (original.shape() != perturbed.shape()) throw std::invalid_argument("perceptibility: shape mismatch");
  const auto a = original.pixels(), b = perturbed.pixels();
  Perceptibility out;
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    out.linf = std::max(out.linf, d);
    sq += d * d;
  }
  out.rmse = a.empty() ? 0.0 : std::sqrt(sq / static_cast<double>(a.size()));
  return out;
}

Histogram length_histogram(std::span<const double> lengths, std::size_t bins) {
  if (lengths.empty()) throw std::invalid_argument("length_histogram: no records");
  const double hi = *std::max_element(lengths.begin(), lengths.end());
  return histogram(lengths, bins, 0.0, std::max(hi, 1.0));
}

LengthComparison compare_lengths(std::span<const double> a, std::span<const double> b, std::size_t bins) {
  if (a.empty() || b.empty()) throw std::invalid_argument("compare_lengths: no records");
  const double hi = std::max({*std::max_element(a.begin(), a.end()), *std::max_element(b.begin(), b.end()), 1.0});
  LengthComparison out;
  out.histogram_a = histogram(a, bins, 0.0, hi);
  out.histogram_b = histogram(b, bins, 0.0, hi);
  out.median_a = median(a);
  out.median_b = median(b);
  out.test = mann_whitney(a, b);
  return out;
}

nlohmann::json LengthComparison::to_json() const {
  return {{"histogram_a", histogram_json(histogram_a)},
          {"histogram_b", histogram_json(histogram_b)},
          {"median_a", median_a},
          {"median_b", median_b},
          {"mann_whitney", {{"u", test.u}, {"z", test.z}, {"p_two_sided", test.p_two_sided}, {"p_greater", test.p_greater}}}};
}

std::string LengthComparison::to_csv() const {
  std::ostringstream out;
  out << "bin_lo,bin_hi,count_a,count_b\n";
  for (std::size_t k = 0; k < histogram_a.counts.size(); ++k) {
    const double lo = histogram_a.lo + histogram_a.width * static_cast<double>(k);
    out << fmt(lo) << ',' << fmt(lo + histogram_a.width) << ',' << histogram_a.counts[k] << ','
        << histogram_b.counts[k] << '\n';
  }
  return out.str();
}

nlohmann::json SampleRecord::to_json() const {
  return {{"id", id},
          {"method", method},
          {"length", length},
          {"latency", latency},
          {"energy", opt_json(energy)},
          {"caption", caption},
          {"chair", {{"mentions", chair.mentions}, {"hallucinated", chair.hallucinated}}},
          {"attention_entropy", attention_entropy},
          {"perturbation", {{"linf", perturbation.linf}, {"rmse", perturbation.rmse}}}};
}

std::string records_jsonl(const std::vector<SampleRecord>& records) {
  std::ostringstream out;
  for (const auto& r : records) out << r.to_json().dump() << '\n';
  return out.str();
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t pool = std::max<std::size_t>(1, std::min(workers, n));
  if (pool == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> threads;
  for (std::size_t w = 0; w < pool; ++w)
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  threads.clear();
  if (error) std::rethrow_exception(error);
}

MethodRun run_attacks(const VictimModel& victim, const std::vector<ShapeWorldItem>& items,
                      std::span<const int> prompt, AttackMethod method, const AttackConfig& config,
                      std::uint64_t seed, std::size_t workers) {
  MethodRun run;
  run.samples.resize(items.size());
  run.histories.resize(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    std::mt19937_64 rng(derive_seed(seed, i));
    AttackResult r = attack(victim, items[i].sample, prompt, method, config, rng);
    run.samples[i] = std::move(r.sample);
    run.histories[i] = std::move(r.history);
  });
  return run;
}

std::vector<SampleRecord> evaluate_samples(const VictimModel& victim, const std::vector<ShapeWorldItem>& items,
                                           const std::vector<PixelSample>& samples, std::span<const int> prompt,
                                           const std::string& method, const EvalOptions& options,
                                           std::uint64_t seed, std::size_t workers) {
  if (items.size() != samples.size()) throw std::invalid_argument("evaluate_samples: item/sample count mismatch");
  std::vector<SampleRecord> records(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    const GenerationMeasurement m = measure_generation(victim, samples[i], prompt, options, derive_seed(eval_stream(seed), i));
    SampleRecord& r = records[i];
    r.id = i;
    r.method = method;
    r.length = m.mean_length;
    r.latency = m.mean_latency;
    r.energy = m.mean_energy;
    r.caption = victim.vocab().render(m.trace.tokens);
    r.chair = chair_counts(r.caption, items[i].objects);
    r.attention_entropy = m.trace.length() ? attention_dispersion(m.trace.outputs) : 0.0;
    r.perturbation = perceptibility(items[i].sample, samples[i]);
  });
  return records;
}

nlohmann::json MethodSummary::to_json() const {
  return {{"method", method},
          {"count", count},
          {"mean_length", mean_length},
          {"mean_latency", mean_latency},
          {"mean_energy", opt_json(mean_energy)},
          {"chair_i", chair.instance},
          {"chair_s", chair.sentence},
          {"mean_attention_entropy", mean_attention_entropy}};
}

MethodSummary summarize(const std::string& method, const std::vector<SampleRecord>& records,
                        const std::vector<ShapeWorldItem>& items) {
  MethodSummary s;
  s.method = method;
  s.count = records.size();
  if (records.empty()) return s;
  double energy = 0.0;
  bool energy_ok = true;
  std::vector<std::string> captions;
  std::vector<std::vector<ShapeObject>> truths;
  for (const auto& r : records) {
    s.mean_length += r.length;
    s.mean_latency += r.latency;
    s.mean_attention_entropy += r.attention_entropy;
    if (r.energy)
      energy += *r.energy;
    else
      energy_ok = false;
    captions.push_back(r.caption);
    truths.push_back(items.at(r.id).objects);
  }
  const double n = static_cast<double>(records.size());
  s.mean_length /= n;
  s.mean_latency /= n;
  s.mean_attention_entropy /= n;
  if (energy_ok) s.mean_energy = energy / n;
  s.chair = chair_metrics(captions, truths);
  return s;
}

const AblationCell& AblationTable::cell(const std::string& name) const {
  for (const auto& c : cells)
    if (c.name == name) return c;
  throw std::out_of_range("ablation: no cell named " + name);
}

nlohmann::json AblationTable::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : cells)
    rows.push_back({{"name", c.name},
                    {"terms", c.terms},
                    {"temporal_decay", c.temporal_decay},
                    {"momentum", c.momentum},
                    {"mean_length", c.mean_length},
                    {"mean_latency", c.mean_latency},
                    {"mean_energy", opt_json(c.mean_energy)}});
  return {{"clean_mean_length", clean_mean_length}, {"cells", rows}};
}

std::string AblationTable::to_csv() const {
  std::ostringstream out;
  out << "name,l1,l2,l3,temporal_decay,momentum,mean_length,mean_latency,mean_energy\n";
  out << "clean,0,0,0,0,0," << fmt(clean_mean_length) << ",,\n";
  for (const auto& c : cells)
    out << c.name << ',' << c.terms[0] << ',' << c.terms[1] << ',' << c.terms[2] << ',' << c.temporal_decay << ','
        << c.momentum << ',' << fmt(c.mean_length) << ',' << fmt(c.mean_latency) << ',' << opt_csv(c.mean_energy)
        << '\n';
  return out.str();
}

AblationTable ablation_suite(const VictimModel& victim, const std::vector<ShapeWorldItem>& items,
                             std::span<const int> prompt, const AttackConfig& config, const EvalOptions& options,
                             std::uint64_t seed, std::size_t workers) {
  std::vector<AblationCell> plan;
  const std::array<std::array<bool, 3>, 7> subsets{{{true, false, false},
                                                    {false, true, false},
                                                    {false, false, true},
                                                    {true, true, false},
                                                    {true, false, true},
                                                    {false, true, true},
                                                    {true, true, true}}};
  for (const auto& s : subsets) {
    std::string name = "loss:";
    for (std::size_t k = 0; k < 3; ++k)
      if (s[k]) name += (name.back() == ':' ? "L" : "+L") + std::to_string(k + 1);
    plan.push_back({name, s, true, true, 0.0, 0.0, std::nullopt});
  }
  for (bool decay : {false, true})
    for (bool momentum : {false, true})
      plan.push_back({std::string("opt:decay=") + (decay ? "on" : "off") + ",momentum=" + (momentum ? "on" : "off"),
                      {true, true, true}, decay, momentum, 0.0, 0.0, std::nullopt});

  std::vector<PixelSample> originals;
  for (const auto& it : items) originals.push_back(it.sample);

  AblationTable table;
  if (!items.empty()) {
    const auto clean = evaluate_samples(victim, items, originals, prompt, "original", options, seed, workers);
    table.clean_mean_length = summarize("original", clean, items).mean_length;
  }
  for (AblationCell cell : plan) {
    // The full-loss subset and the decay+momentum cell are the same run.
    const auto same = std::find_if(table.cells.begin(), table.cells.end(), [&](const AblationCell& c) {
      return c.terms == cell.terms && c.temporal_decay == cell.temporal_decay && c.momentum == cell.momentum;
    });
    if (same != table.cells.end()) {
      const std::string name = cell.name;
      cell = *same;
      cell.name = name;
    } else if (!items.empty()) {
      AttackConfig c = config;
      c.terms = cell.terms;
      c.temporal_decay = cell.temporal_decay;
      c.use_momentum = cell.momentum;
      const MethodRun run = run_attacks(victim, items, prompt, AttackMethod::verbose, c, seed, workers);
      const auto records = evaluate_samples(victim, items, run.samples, prompt, cell.name, options, seed, workers);
      const MethodSummary s = summarize(cell.name, records, items);
      cell.mean_length = s.mean_length;
      cell.mean_latency = s.mean_latency;
      cell.mean_energy = s.mean_energy;
    }
    table.cells.push_back(cell);
  }
  return table;
}

nlohmann::json TransferTable::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t s = 0; s < sources.size(); ++s) {
    nlohmann::json row{{"source", sources[s]}};
    for (std::size_t t = 0; t < targets.size(); ++t) row[targets[t]] = mean_length[s][t];
    rows.push_back(row);
  }
  return {{"targets", targets}, {"rows", rows}};
}

std::string TransferTable::to_csv() const {
  std::ostringstream out;
  out << "source";
  for (const auto& t : targets) out << ',' << t;
  out << '\n';
  for (std::size_t s = 0; s < sources.size(); ++s) {
    out << sources[s];
    for (double v : mean_length[s]) out << ',' << fmt(v);
    out << '\n';
  }
  return out.str();
}

TransferTable transfer_eval(const std::vector<NamedVictim>& sources, const std::vector<NamedVictim>& targets,
                            const std::vector<ShapeWorldItem>& items, std::span<const int> prompt,
                            const AttackConfig& config, const EvalOptions& options, std::uint64_t seed,
                            std::size_t workers) {
  if (targets.empty()) throw std::invalid_argument("transfer_eval: no target victims");
  const FrameShape shape = targets.front().model->config().input_shape();
  for (const auto* group : {&sources, &targets})
    for (const auto& v : *group)
      if (!v.model || v.model->config().input_shape() != shape)
        throw std::invalid_argument("transfer_eval: victim input shapes differ (" + v.name + ")");
  for (const auto& it : items)
    if (it.sample.shape() != shape) throw std::invalid_argument("transfer_eval: sample shape does not match victims");

  TransferTable table;
  table.sources.push_back("none");
  for (const auto& s : sources) table.sources.push_back(s.name);
  for (const auto& t : targets) table.targets.push_back(t.name);

  std::vector<PixelSample> clean;
  for (const auto& it : items) clean.push_back(it.sample);
  auto row_for = [&](const std::vector<PixelSample>& samples, const std::string& tag) {
    std::vector<double> row;
    for (const auto& t : targets) {
      const auto records = evaluate_samples(*t.model, items, samples, prompt, tag, options, seed, workers);
      row.push_back(summarize(tag, records, items).mean_length);
    }
    return row;
  };
  table.mean_length.push_back(row_for(clean, "original"));
  for (const auto& s : sources) {
    const MethodRun run = run_attacks(*s.model, items, prompt, AttackMethod::verbose, config, seed, workers);
    table.mean_length.push_back(row_for(run.samples, "verbose"));
  }
  return table;
}

}  // namespace verbose
