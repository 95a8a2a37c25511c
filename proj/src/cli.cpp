#include "verbose/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "verbose/harness.hpp"
#include "verbose/train.hpp"

namespace verbose {

namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string method;
  std::string modality;
  std::string prompt;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  bool prompt_set = false;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("short write to " + p.string());
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

fs::path existing_path(const nlohmann::json& cfg, const std::string& key) {
  if (!cfg.contains(key)) throw std::invalid_argument("config: missing \"" + key + "\"");
  fs::path p = cfg.at(key).get<std::string>();
  if (!fs::exists(p)) throw std::invalid_argument("config: " + key + " path does not exist: " + p.string());
  return p;
}

class Command {
 public:
  Command(nlohmann::json cfg, fs::path out, std::ostream& log) : cfg_(std::move(cfg)), out_(std::move(out)), log_(log) {}

  std::uint64_t seed() const { return cfg_.value("seed", std::uint64_t{0}); }
  std::size_t workers() const { return cfg_.value("workers", std::size_t{1}); }
  Modality modality() const { return parse_modality(cfg_.value("modality", std::string("image"))); }

  std::vector<int> prompt(const VocabSpec& vocab) const { return vocab.encode(cfg_.value("prompt", std::string())); }

  VictimModel victim(const std::string& key = "checkpoint") const { return load_checkpoint(existing_path(cfg_, key)); }

  std::vector<ShapeWorldItem> items(const std::string& key = "data") const {
    auto items = load_dataset(existing_path(cfg_, key));
    if (cfg_.contains("limit")) items.resize(std::min(items.size(), cfg_.at("limit").get<std::size_t>()));
    return items;
  }

  AttackConfig attack_config(Modality m) const {
    return AttackConfig::from_json(cfg_.value("attack", nlohmann::json::object()), AttackConfig::defaults_for(m));
  }

  EvalOptions eval_options(EvalOptions base) const {
    return EvalOptions::from_json(cfg_.value("eval", nlohmann::json::object()), std::move(base));
  }

  /// CLI evaluations default to the token-cost clock so reruns are byte-identical.
  static EvalOptions reproducible_defaults() {
    EvalOptions o;
    o.clock.kind = ClockSpec::Kind::model;
    return o;
  }

  const nlohmann::json& cfg() const { return cfg_; }
  const fs::path& out() const { return out_; }
  std::ostream& log() const { return log_; }

 private:
  nlohmann::json cfg_;
  fs::path out_;
  std::ostream& log_;
};

void check_shape(const std::vector<ShapeWorldItem>& items, const VictimModel& v) {
  for (const auto& it : items)
    if (it.sample.shape() != v.config().input_shape())
      throw std::invalid_argument("data shape does not match the victim input");
}

void cmd_make_data(const Command& c) {
  ShapeWorldOptions opt;
  opt.image_size = c.cfg().value("image_size", opt.image_size);
  opt.frames = c.cfg().value("frames", opt.frames);
  const std::size_t n = c.cfg().value("n", std::size_t{100});
  const auto items = make_shape_world(n, c.modality(), c.seed(), opt);
  export_dataset(c.out(), items);
  c.log() << "wrote " << items.size() << " " << to_string(c.modality()) << " samples to " << c.out().string() << "\n";
}

void cmd_train(const Command& c) {
  const Modality m = c.modality();
  ModelConfig arch = m == Modality::image ? ModelConfig::image_default() : ModelConfig::video_default();
  if (c.cfg().contains("architecture")) {
    nlohmann::json merged = arch.to_json();
    merged.merge_patch(c.cfg().at("architecture"));
    arch = ModelConfig::from_json(merged);
  }
  ShapeWorldOptions opt;
  opt.image_size = arch.image_size;
  opt.frames = arch.frames;
  const auto data = c.cfg().contains("data")
                        ? c.items("data")
                        : make_shape_world(c.cfg().value("train_n", std::size_t{8000}), m,
                                           c.cfg().value("data_seed", c.seed()), opt);
  TrainConfig tc = TrainConfig::defaults_for(m);
  tc.epochs = c.cfg().value("epochs", tc.epochs);
  tc.batch_size = c.cfg().value("batch_size", tc.batch_size);
  tc.learning_rate = c.cfg().value("learning_rate", tc.learning_rate);
  tc.grad_clip = c.cfg().value("grad_clip", tc.grad_clip);
  tc.label_smoothing = c.cfg().value("label_smoothing", tc.label_smoothing);
  tc.seed = c.seed();
  TrainReport report;
  const VictimModel model = train_toy(arch, data, tc, &report);
  save_checkpoint(c.out() / "checkpoint.bin", model);

  const auto heldout = make_shape_world(c.cfg().value("heldout_n", std::size_t{200}), m,
                                        c.cfg().value("heldout_seed", derive_seed(c.seed(), 0x4e1d)), opt);
  const CaptionScore score = score_captions(model, heldout, c.cfg().value("max_length", std::size_t{512}));
  write_json(c.out() / "train_report.json", {{"epoch_loss", report.epoch_loss},
                                             {"train_samples", data.size()},
                                             {"heldout_samples", heldout.size()},
                                             {"token_accuracy", score.token_accuracy},
                                             {"mean_length", score.mean_length},
                                             {"eos_rate", score.eos_rate}});
  c.log() << "held-out token accuracy " << score.token_accuracy << " (mean length " << score.mean_length << ")\n";
}

void cmd_attack(const Command& c) {
  const VictimModel victim = c.victim();
  const auto items = c.items();
  check_shape(items, victim);
  const AttackMethod method = parse_method(c.cfg().value("method", std::string("verbose")));
  const AttackConfig config = c.attack_config(victim.config().modality());
  const auto prompt = c.prompt(victim.vocab());
  const MethodRun run = run_attacks(victim, items, prompt, method, config, c.seed(), c.workers());

  std::vector<ShapeWorldItem> perturbed = items;
  for (std::size_t i = 0; i < items.size(); ++i) perturbed[i].sample = run.samples[i];
  export_dataset(c.out(), perturbed);
  fs::create_directories(c.out() / "histories");
  for (std::size_t i = 0; i < items.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.jsonl", i);
    write_text(c.out() / "histories" / name, history_jsonl(run.histories[i]));
  }

  // Re-read what was written and check the budget against the originals.
  const auto reloaded = load_dataset(c.out());
  double worst = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) worst = std::max(worst, max_frame_linf(reloaded.at(i).sample, items[i].sample));
  if (worst > config.epsilon + 1e-12)
    throw std::runtime_error("written samples exceed the perturbation budget: " + std::to_string(worst));
  write_json(c.out() / "attack_summary.json", {{"method", to_string(method)},
                                               {"count", items.size()},
                                               {"max_linf", worst},
                                               {"epsilon", config.epsilon}});
  c.log() << "attacked " << items.size() << " samples with " << to_string(method) << ", max L-inf " << worst << "\n";
}

void cmd_evaluate(const Command& c) {
  const VictimModel victim = c.victim();
  const auto samples = c.items("data");
  const auto reference = c.cfg().contains("reference") ? c.items("reference") : samples;
  if (reference.size() != samples.size()) throw std::invalid_argument("reference and data differ in sample count");
  check_shape(samples, victim);
  const EvalOptions options = c.eval_options(Command::reproducible_defaults());
  const std::string method = c.cfg().value("method", std::string("original"));
  std::vector<PixelSample> pixels;
  for (const auto& it : samples) pixels.push_back(it.sample);
  const auto records = evaluate_samples(victim, reference, pixels, c.prompt(victim.vocab()), method, options, c.seed(),
                                        c.workers());
  write_text(c.out() / "records.jsonl", records_jsonl(records));
  write_json(c.out() / "summary.json", summarize(method, records, reference).to_json());
  std::string csv = "bin_lo,bin_hi,count\n";
  if (!records.empty()) {
    std::vector<double> lengths;
    for (const auto& r : records) lengths.push_back(r.length);
    const Histogram h = length_histogram(lengths, c.cfg().value("bins", std::size_t{16}));
    for (std::size_t k = 0; k < h.counts.size(); ++k) {
      const double lo = h.lo + h.width * static_cast<double>(k);
      csv += nlohmann::json(lo).dump() + "," + nlohmann::json(lo + h.width).dump() + "," + std::to_string(h.counts[k]) + "\n";
    }
  }
  write_text(c.out() / "lengths.csv", csv);
  c.log() << "evaluated " << records.size() << " samples\n";
}

void cmd_ablate(const Command& c) {
  const VictimModel victim = c.victim();
  const auto items = c.items();
  check_shape(items, victim);
  const AblationTable table =
      ablation_suite(victim, items, c.prompt(victim.vocab()), c.attack_config(victim.config().modality()),
                     c.eval_options(Command::reproducible_defaults()), c.seed(), c.workers());
  write_json(c.out() / "ablation.json", table.to_json());
  write_text(c.out() / "ablation.csv", table.to_csv());
  c.log() << "ablation: " << table.cells.size() << " cells\n";
}

std::vector<std::pair<std::string, VictimModel>> load_victims(const nlohmann::json& list) {
  std::vector<std::pair<std::string, VictimModel>> out;
  for (const auto& v : list) {
    const fs::path p = v.at("checkpoint").get<std::string>();
    if (!fs::exists(p)) throw std::invalid_argument("config: checkpoint does not exist: " + p.string());
    out.emplace_back(v.value("name", p.stem().string()), load_checkpoint(p));
  }
  return out;
}

void cmd_transfer(const Command& c) {
  const auto& cfg = c.cfg();
  if (!cfg.contains("sources") && !cfg.contains("victims"))
    throw std::invalid_argument("config: transfer needs \"sources\" or \"victims\"");
  const auto sources = load_victims(cfg.contains("sources") ? cfg.at("sources") : cfg.at("victims"));
  const auto targets = cfg.contains("targets") ? load_victims(cfg.at("targets")) : sources;
  if (targets.empty()) throw std::invalid_argument("config: no target victims");
  std::vector<NamedVictim> src, dst;
  for (const auto& [name, model] : sources) src.push_back({name, &model});
  for (const auto& [name, model] : targets) dst.push_back({name, &model});
  const VictimModel& first = targets.front().second;
  const auto items = c.items();
  const TransferTable table =
      transfer_eval(src, dst, items, c.prompt(first.vocab()), c.attack_config(first.config().modality()),
                    c.eval_options(Command::reproducible_defaults()), c.seed(), c.workers());
  write_json(c.out() / "transfer.json", table.to_json());
  write_text(c.out() / "transfer.csv", table.to_csv());
  c.log() << "transfer: " << table.sources.size() << "x" << table.targets.size() << " table\n";
}

void cmd_linearity(const Command& c) {
  const auto& cfg = c.cfg();
  LinearityReport report;
  if (cfg.contains("points")) {
    std::vector<LinearityPoint> points;
    for (const auto& p : cfg.at("points")) {
      LinearityPoint lp{p.at(0).get<std::size_t>(), p.at(1).get<double>(), std::nullopt};
      if (p.size() > 2) lp.energy = p.at(2).get<double>();
      points.push_back(lp);
    }
    report = linearity_from_points(std::move(points));
  } else {
    const VictimModel victim = c.victim();
    PixelSample sample = cfg.contains("data") ? c.items().at(0).sample
                                              : PixelSample::filled(victim.config().modality(),
                                                                    victim.config().input_shape(), 0.5);
    EvalOptions base;
    base.policy = DecodePolicy::greedy();
    const auto lengths = cfg.value("lengths", std::vector<std::size_t>{8, 16, 32, 64, 128, 256});
    report = linearity_check(victim, sample, lengths, c.eval_options(base), c.seed());
  }
  write_json(c.out() / "linearity.json", report.to_json());
  c.log() << "latency vs length: r = " << report.latency_fit.r << ", slope " << report.latency_fit.slope << " s/token\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Verbose-sample energy-latency attacks on a toy captioner"};
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"make-data", "generate a shape-world dataset"},
      {"train", "train a toy victim and report held-out accuracy"},
      {"attack", "perturb a dataset against a victim"},
      {"evaluate", "measure length, latency, energy and hallucination"},
      {"ablate", "loss-subset and optimizer ablation tables"},
      {"transfer", "cross-victim transfer table"},
      {"linearity", "latency and energy against generated length"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", flags.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "base seed");
    sub->add_option("--out", flags.out, "output directory")->required();
    sub->add_option("--method", flags.method, "original|noise|sponge|nicg|verbose")
        ->check(CLI::IsMember({"original", "noise", "sponge", "nicg", "verbose"}));
    sub->add_option("--modality", flags.modality, "image|video")->check(CLI::IsMember({"image", "video"}));
    sub->add_option("--prompt", flags.prompt, "question tokens; empty for captioning");
    sub->add_option("--workers", flags.workers, "worker threads")->check(CLI::PositiveNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  flags.prompt_set = sub->count("--prompt") > 0;
  const fs::path out_dir = flags.out;
  try {
    nlohmann::json cfg = flags.config.empty() ? nlohmann::json::object() : nlohmann::json::parse(read_text(flags.config));
    if (!cfg.is_object()) throw std::invalid_argument("config must be a JSON object");
    if (flags.seed) cfg["seed"] = *flags.seed;
    if (!flags.method.empty()) cfg["method"] = flags.method;
    if (!flags.modality.empty()) cfg["modality"] = flags.modality;
    if (flags.prompt_set) cfg["prompt"] = flags.prompt;
    if (flags.workers) cfg["workers"] = *flags.workers;
    if (!cfg.contains("seed")) cfg["seed"] = 0;
    cfg["command"] = command;

    fs::create_directories(out_dir);
    fs::remove(out_dir / "error.json");
    write_json(out_dir / "config.json", cfg);
    const Command c(cfg, out_dir, out);
    if (command == "make-data")
      cmd_make_data(c);
    else if (command == "train")
      cmd_train(c);
    else if (command == "attack")
      cmd_attack(c);
    else if (command == "evaluate")
      cmd_evaluate(c);
    else if (command == "ablate")
      cmd_ablate(c);
    else if (command == "transfer")
      cmd_transfer(c);
    else
      cmd_linearity(c);
    return 0;
  } catch (const std::exception& e) {
    const nlohmann::json record{{"command", command}, {"error", e.what()}, {"exit_code", 1}};
    err << record.dump() << "\n";
    try {
      fs::create_directories(out_dir);
      write_json(out_dir / "error.json", record);
    } catch (const std::exception&) {
      // the record on stderr is all we can do
    }
    return 1;
  }
}

}  // namespace verbose
