#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "flmgrow/flmgrow.hpp"

namespace fs = std::filesystem;
using namespace flmgrow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

// Models above this size are only counted, never allocated, unless asked explicitly.
constexpr std::int64_t kMaxDeskParams = 2'000'000'000;

struct Options {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string dtype;
  std::string out;
  std::string ckpt;
  std::string corpus;
  std::string plan;
  std::string pre;
  std::string post;
  std::string probes;
  std::size_t probe_count = 0;
  std::size_t probe_len = 64;
  std::string samples;
  std::string report;
  std::string metrics;
  double fraction = 0.5;
  std::optional<std::int64_t> steps;
  std::optional<std::int64_t> tokens;
  std::int64_t checkpoint_every = 0;
  std::optional<std::int64_t> epochs;
  std::optional<std::int64_t> batch;
  std::optional<double> lr_begin;
  std::optional<double> lr_end;
  bool dry_run = false;
  bool bypass_mask = false;
  std::vector<std::string> inputs;
  std::vector<std::string> distance_files;
};

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

RunConfig load_run_config(const Options& o) {
  RunConfig r;
  if (!o.config.empty()) {
    r = read_json_file(o.config).get<RunConfig>();
  } else if (!o.preset.empty()) {
    r = run_config_from(stage_preset(o.preset));
  } else {
    throw ConfigError("either --config or --preset is required");
  }
  if (o.seed) r.seed = *o.seed;
  if (!o.dtype.empty()) r.dtype = o.dtype;
  if (!o.out.empty()) r.out_dir = o.out;
  validate(r);
  return r;
}

std::string require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
  return value;
}

std::vector<std::vector<TokenId>> load_probes(const Options& o, const ModelConfig& c, std::size_t default_count,
                                              std::uint64_t default_seed) {
  const std::size_t count = o.probe_count ? o.probe_count : default_count;
  const std::size_t len = std::min<std::size_t>(o.probe_len, static_cast<std::size_t>(c.max_seq_len));
  if (!o.probes.empty()) return corpus_windows(load_corpus(o.probes), len, count);
  return random_sequences(count, len, c.vocab_size, o.seed.value_or(default_seed));
}

// ---- verbs ------------------------------------------------------------------------

template <Real T>
int run_init(const Options& o, const RunConfig& cfg) {
  const std::int64_t n = count_params(cfg.model);
  json out{{"param_count", n}, {"config", cfg.model}};
  if (o.dry_run) {
    print(out);
    return kExitOk;
  }
  if (n > kMaxDeskParams) {
    throw ConfigError("model has " + std::to_string(n) + " parameters; use --dry-run to count without allocating");
  }
  if (!cfg.out_dir) throw ConfigError("--out is required");
  const auto ck = make_checkpoint<T>(cfg.model, cfg.seed);
  save_checkpoint(ck, *cfg.out_dir);
  out["allocated"] = allocated_scalars(ck.params);
  out["checkpoint"] = cfg.out_dir->string();
  print(out);
  return kExitOk;
}

template <Real T>
int run_train(const Options& o) {
  const RunConfig cfg = load_run_config(o);
  const fs::path ckpt = require(o.ckpt, "--ckpt");
  const fs::path out = o.out.empty() ? ckpt : fs::path(o.out);
  std::string corpus_path = o.corpus;
  if (corpus_path.empty() && cfg.corpus) corpus_path = cfg.corpus->string();
  const auto corpus = load_corpus(require(corpus_path, "--corpus"));

  auto ck = load_checkpoint<T>(ckpt);
  StopCondition stop;
  if (o.steps) stop.until_step = ck.step + *o.steps;
  if (o.tokens) stop.until_tokens = ck.consumed_tokens + *o.tokens;

  fs::create_directories(out);
  const fs::path metrics_path = o.metrics.empty() ? out / "metrics.jsonl" : fs::path(o.metrics);
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());

  TrainRunOptions<T> opts;
  if (o.seed) opts.data_seed = *o.seed;
  opts.checkpoint_every = o.checkpoint_every;
  if (o.checkpoint_every > 0) opts.checkpoint_dir = out / "checkpoints";
  opts.on_step = [&](const StepMetrics& m) { metrics << metrics_json(m).dump() << "\n"; };
  const auto log = train_run(ck, corpus, cfg.schedule, stop, opts);
  metrics.close();
  if (!metrics) throw IoError("failed writing " + metrics_path.string());
  save_checkpoint(ck, out);
  print(json{{"steps", log.size()},
             {"step", ck.step},
             {"consumed_tokens", ck.consumed_tokens},
             {"final_loss", log.empty() ? json(nullptr) : json(log.back().loss)},
             {"metrics", metrics_path.string()},
             {"checkpoint", out.string()}});
  return kExitOk;
}

GrowthPlan load_plan(const Options& o) {
  GrowthPlan plan;
  if (!o.plan.empty()) {
    plan = read_json_file(o.plan).get<GrowthPlan>();
  } else if (!o.config.empty()) {
    const auto cfg = read_json_file(o.config).get<RunConfig>();
    if (!cfg.growth) throw ConfigError("config has no growth section");
    plan = *cfg.growth;
  } else if (!o.preset.empty()) {
    const auto p = stage_preset(o.preset);
    if (!p.growth) throw ConfigError("preset " + o.preset + " is not a grown stage");
    plan = *p.growth;
  } else {
    throw ConfigError("one of --plan, --config or --preset is required");
  }
  if (o.seed) plan.seed = *o.seed;
  return plan;
}

template <Real T>
int run_grow(const Options& o) {
  const GrowthPlan plan = load_plan(o);
  auto ck = load_checkpoint<T>(require(o.ckpt, "--ckpt"));
  const fs::path out = require(o.out, "--out");
  const auto probes = load_probes(o, ck.config, 8, mix_seed(plan.seed, 1));
  auto result = grow(std::move(ck), plan, probes);
  save_checkpoint(result.checkpoint, out);
  json log{{"step", result.checkpoint.step},
           {"param_count", count_params(result.checkpoint.config)},
           {"config", result.checkpoint.config},
           {"history_length", result.checkpoint.history.size()},
           {"sources", result.sources},
           {"distances", result.distances ? json(*result.distances) : json(nullptr)}};
  write_json_file(out / "growth.json", log);
  print(log);
  return kExitOk;
}

template <Real T>
int run_verify(const Options& o) {
  const auto pre = load_checkpoint<T>(require(o.pre, "--pre"));
  const auto post = load_checkpoint<T>(require(o.post, "--post"));
  const auto probes = load_probes(o, pre.config, 32, 0);
  std::optional<double> override_mask;
  if (o.bypass_mask) override_mask = 1.0;
  const auto report = verify_function_preservation(pre, post, probes, override_mask);
  const double tol = preservation_tolerance<T>();
  const bool ok = report.max_abs_diff <= tol;
  json j = report;
  j["tolerance"] = tol;
  j["pass"] = ok;
  print(j);
  return ok ? kExitOk : kExitNumerical;
}

template <Real T>
int run_distances(const Options& o) {
  const auto ck = load_checkpoint<T>(require(o.ckpt, "--ckpt"));
  const auto probes = load_probes(o, ck.config, 8, 1);
  const json j = layer_io_distance(ck, probes);
  if (!o.out.empty()) write_json_file(o.out, j);
  print(j);
  return kExitOk;
}

template <Real T>
int run_curate(const Options& o) {
  const auto samples = read_samples(require(o.samples, "--samples"));
  const auto ck = load_checkpoint<T>(require(o.ckpt, "--ckpt"));
  const fs::path out = require(o.out, "--out");
  auto [kept, report] = filter_lowest_ppl(samples, ck, o.fraction);
  detail::write_file_atomic(out, samples_to_jsonl(kept));
  const fs::path report_path = o.report.empty() ? fs::path(out.string() + ".report.json") : fs::path(o.report);
  write_json_file(report_path, report);
  print(json{{"total", report.total},
             {"eligible", report.eligible},
             {"kept", report.kept},
             {"skipped", report.skipped.size()},
             {"fraction", report.fraction},
             {"output", out.string()},
             {"report", report_path.string()}});
  return kExitOk;
}

template <Real T>
int run_sft(const Options& o) {
  const auto samples = read_samples(require(o.samples, "--samples"));
  auto ck = load_checkpoint<T>(require(o.ckpt, "--ckpt"));
  const fs::path out = require(o.out, "--out");
  SftPreset preset = sft_preset();
  if (o.epochs) preset.epochs = *o.epochs;
  if (o.batch) preset.batch_samples = *o.batch;
  if (o.lr_begin) preset.lr_begin = *o.lr_begin;
  if (o.lr_end) preset.lr_end = *o.lr_end;
  if (o.seed) preset.seed = *o.seed;

  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw IoError("cannot open " + (out / "metrics.jsonl").string());
  SftOptions<T> opts;
  opts.checkpoint_dir = out;
  opts.on_step = [&](const StepMetrics& m) { metrics << metrics_json(m).dump() << "\n"; };
  const auto report = sft_run(ck, samples, preset, opts);
  for (const auto& [id, why] : report.skipped) std::cerr << "warning: skipped sample " << id << ": " << why << "\n";
  save_checkpoint(ck, out / "final");
  print(report);
  return kExitOk;
}

int run_report(const Options& o) {
  std::vector<fs::path> files(o.inputs.begin(), o.inputs.end());
  auto summary = summarize_metrics_files(files);
  for (const auto& f : o.distance_files) {
    json j = read_json_file(f);
    if (j.contains("distances")) j = j.at("distances");
    if (j.is_null()) throw InputError(f + " holds no distance table");
    summary.distance_tables.emplace_back(f, j.get<LayerDistanceStats>());
  }
  const json j = summary;
  if (!o.out.empty()) {
    write_json_file(o.out, j);
  } else {
    print(j);
  }
  return kExitOk;
}

// Dispatches on the dtype stored in a checkpoint (or requested for a new one).
template <class F32, class F64>
int by_dtype(const std::string& dtype, F32&& f32, F64&& f64) {
  if (dtype == "f32") return f32();
  if (dtype == "f64") return f64();
  throw ConfigError("dtype must be f32 or f64 (got " + dtype + ")");
}

std::string dtype_of(const Options& o, const std::string& dir) {
  const std::string stored = checkpoint_dtype(dir);
  if (!o.dtype.empty() && o.dtype != stored) {
    throw IoError("checkpoint " + dir + " is " + stored + ", requested " + o.dtype);
  }
  return stored;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kValidation:
      return kExitValidation;
    case ErrorKind::kNumerical:
      return kExitNumerical;
    case ErrorKind::kIo:
      return kExitIo;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Function-preserving progressive growth of decoder-only transformers"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Run configuration (JSON)");
    c->add_option("--preset", o.preset, "Stage preset: 52B, 102B, 1T, toy-52, toy-102, toy-1T");
    c->add_option("--seed", o.seed, "Seed (u64)");
    c->add_option("--dtype", o.dtype, "Floating-point type")->check(CLI::IsMember({"f32", "f64"}));
    c->add_option("--out", o.out, "Output path");
  };
  auto probe_opts = [&](CLI::App* c) {
    c->add_option("--probes", o.probes, "Text file cut into probe windows (default: random tokens)");
    c->add_option("--probe-count", o.probe_count, "Number of probe sequences");
    c->add_option("--probe-len", o.probe_len, "Probe sequence length");
  };

  auto* init = app.add_subcommand("init", "Create a fresh checkpoint and print its parameter count");
  common(init);
  init->add_flag("--dry-run", o.dry_run, "Count parameters without allocating");

  auto* train = app.add_subcommand("train", "Train a checkpoint on a byte-level corpus");
  common(train);
  train->add_option("--ckpt", o.ckpt, "Checkpoint directory");
  train->add_option("--corpus", o.corpus, "Corpus text file");
  train->add_option("--steps", o.steps, "Run at most this many steps");
  train->add_option("--tokens", o.tokens, "Run until this many more tokens are consumed");
  train->add_option("--metrics", o.metrics, "Metrics log path (default <out>/metrics.jsonl)");
  train->add_option("--checkpoint-every", o.checkpoint_every, "Save <out>/checkpoints/step-N every N steps");

  auto* growc = app.add_subcommand("grow", "Grow a checkpoint per a growth plan");
  common(growc);
  probe_opts(growc);
  growc->add_option("--ckpt", o.ckpt, "Checkpoint directory");
  growc->add_option("--plan", o.plan, "Growth plan (JSON)");

  auto* verify = app.add_subcommand("verify", "Check that a grown checkpoint preserves the function");
  common(verify);
  probe_opts(verify);
  verify->add_option("--pre", o.pre, "Checkpoint before growth");
  verify->add_option("--post", o.post, "Checkpoint after growth");
  verify->add_flag("--bypass-mask", o.bypass_mask, "Evaluate the grown model at mask 1 (fault injection)");

  auto* dist = app.add_subcommand("distances", "Per-layer input/output distances");
  common(dist);
  probe_opts(dist);
  dist->add_option("--ckpt", o.ckpt, "Checkpoint directory");

  auto* curate = app.add_subcommand("curate", "Keep the lowest-perplexity fraction of instruct samples");
  common(curate);
  curate->add_option("--samples", o.samples, "Samples (JSONL)");
  curate->add_option("--ckpt", o.ckpt, "Scoring checkpoint");
  curate->add_option("--fraction", o.fraction, "Fraction kept")->capture_default_str();
  curate->add_option("--report", o.report, "Report path (default <out>.report.json)");

  auto* sft = app.add_subcommand("sft", "Supervised fine-tuning on response tokens");
  common(sft);
  sft->add_option("--ckpt", o.ckpt, "Checkpoint directory");
  sft->add_option("--samples", o.samples, "Samples (JSONL)");
  sft->add_option("--epochs", o.epochs, "Epochs (default 4)");
  sft->add_option("--batch", o.batch, "Samples per step (default 128)");
  sft->add_option("--lr-begin", o.lr_begin, "Initial learning rate (default 2.7e-5)");
  sft->add_option("--lr-end", o.lr_end, "Final learning rate (default 1e-9)");

  auto* report = app.add_subcommand("report", "Summarize metrics logs for plotting");
  common(report);
  report->add_option("metrics", o.inputs, "Metrics logs (JSONL), in order")->required();
  report->add_option("--distances", o.distance_files, "Distance tables (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (init->parsed()) {
      const RunConfig cfg = load_run_config(o);
      return by_dtype(
          cfg.dtype, [&] { return run_init<float>(o, cfg); }, [&] { return run_init<double>(o, cfg); });
    }
    if (train->parsed()) {
      return by_dtype(
          dtype_of(o, require(o.ckpt, "--ckpt")), [&] { return run_train<float>(o); },
          [&] { return run_train<double>(o); });
    }
    if (growc->parsed()) {
      return by_dtype(
          dtype_of(o, require(o.ckpt, "--ckpt")), [&] { return run_grow<float>(o); },
          [&] { return run_grow<double>(o); });
    }
    if (verify->parsed()) {
      const std::string d = dtype_of(o, require(o.pre, "--pre"));
      if (dtype_of(o, require(o.post, "--post")) != d) throw ContractError("pre and post checkpoints differ in dtype");
      return by_dtype(
          d, [&] { return run_verify<float>(o); }, [&] { return run_verify<double>(o); });
    }
    if (dist->parsed()) {
      return by_dtype(
          dtype_of(o, require(o.ckpt, "--ckpt")), [&] { return run_distances<float>(o); },
          [&] { return run_distances<double>(o); });
    }
    if (curate->parsed()) {
      return by_dtype(
          dtype_of(o, require(o.ckpt, "--ckpt")), [&] { return run_curate<float>(o); },
          [&] { return run_curate<double>(o); });
    }
    if (sft->parsed()) {
      return by_dtype(
          dtype_of(o, require(o.ckpt, "--ckpt")), [&] { return run_sft<float>(o); },
          [&] { return run_sft<double>(o); });
    }
    if (report->parsed()) return run_report(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}
