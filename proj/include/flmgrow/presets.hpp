#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flmgrow/config.hpp"
#include "flmgrow/error.hpp"
#include "flmgrow/plan.hpp"
#include "flmgrow/schedule.hpp"
#include "flmgrow/trainer.hpp"

namespace flmgrow {

// One stage of the staged pipeline: architecture, training schedule and, for grown
// stages, the plan that produces this architecture from the previous stage.
struct StagePreset {
  std::string name;
  ModelConfig model;
  TrainSchedule schedule;
  std::optional<GrowthPlan> growth;
};

namespace detail {

inline ModelConfig make_model(std::int64_t layers, std::int64_t hidden, std::int64_t ffn, std::int64_t vocab,
                              std::int64_t kv, std::int64_t max_seq, double output_mult) {
  ModelConfig c;
  c.layer_num = layers;
  c.hidden_dim = hidden;
  c.ffn_dim = ffn;
  c.vocab_size = vocab;
  c.kv_channels = kv;
  c.head_num = hidden / kv;
  c.max_seq_len = max_seq;
  c.input_mult = 1.0;
  c.output_mult = output_mult;
  return c;
}

inline TrainSchedule make_schedule(double vb, double ve, double mb, double me, ScheduleType type,
                                   std::int64_t warmup, std::int64_t batch, std::int64_t total, std::int64_t seq) {
  TrainSchedule s;
  s.lr_vector_begin = vb;
  s.lr_vector_end = ve;
  s.lr_matrix_begin = mb;
  s.lr_matrix_end = me;
  s.schedule_type = type;
  s.warmup_steps = warmup;
  s.batch_tokens = batch;
  s.total_tokens = total;
  s.seq_len = seq;
  return s;
}

inline GrowthPlan make_plan(const ModelConfig& target, std::int64_t transition, std::uint64_t seed) {
  GrowthPlan p;
  p.target = target;
  p.width_init_std = 0.004;
  p.width_init = "normal";
  p.distance_based = true;
  p.transition_steps = transition;
  p.seed = seed;
  return p;
}

}  // namespace detail

inline constexpr std::int64_t kFullVocab = 80000;
inline constexpr std::int64_t kFullKvChannels = 128;
inline constexpr std::int64_t kFullSeqLen = 4096;

// Desk-scale stages keep the stage-to-stage ratios of depth, width and FFN size and
// the kv_channels rule. Each toy stage runs 300 steps.
inline constexpr std::int64_t kToySeqLen = 64;
inline constexpr std::int64_t kToyStageSteps = 300;

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"52B", "102B", "1T", "toy-52", "toy-102", "toy-1T"};
  return names;
}

inline StagePreset stage_preset(const std::string& name) {
  using detail::make_model;
  using detail::make_plan;
  using detail::make_schedule;
  const auto kLin = ScheduleType::kLinear;
  const auto kCos = ScheduleType::kCosine;
  StagePreset p;
  p.name = name;
  if (name == "52B") {
    p.model = make_model(64, 8192, 21824, kFullVocab, kFullKvChannels, kFullSeqLen, 3.125e-2);
    p.schedule = make_schedule(1.5e-4, 2.781e-5, 1.5e-4, 2.781e-5, kCos, 2000, 5'500'000, 2'003'000'000'000,
                               kFullSeqLen);
  } else if (name == "102B") {
    p.model = make_model(80, 10240, 27264, kFullVocab, kFullKvChannels, kFullSeqLen, 2.5e-2);
    p.schedule = make_schedule(2.740e-5, 1.370e-6, 2.191e-5, 1.096e-6, kLin, 2000, 5'500'000, 300'000'000'000,
                               kFullSeqLen);
    p.growth = make_plan(p.model, 2000, 102);
  } else if (name == "1T") {
    p.model = make_model(140, 20480, 98304, kFullVocab, kFullKvChannels, kFullSeqLen, 2.5e-2);
    p.schedule = make_schedule(2.740e-6, 1.830e-6, 2.192e-6, 7.321e-7, kLin, 0, 2'000'000, 15'700'000'000,
                               kFullSeqLen);
    p.growth = make_plan(p.model, 200, 1000);
  } else if (name == "toy-52") {
    p.model = make_model(4, 64, 176, 258, 16, kToySeqLen, 1.0);
    p.schedule = make_schedule(2e-3, 3.7e-4, 2e-3, 3.7e-4, kCos, 20, 2 * kToySeqLen,
                               kToyStageSteps * 2 * kToySeqLen, kToySeqLen);
  } else if (name == "toy-102") {
    p.model = make_model(5, 80, 220, 258, 16, kToySeqLen, 1.0);
    p.schedule = make_schedule(1e-3, 5e-5, 8e-4, 4e-5, kLin, 20, 2 * kToySeqLen, kToyStageSteps * 2 * kToySeqLen,
                               kToySeqLen);
    p.growth = make_plan(p.model, 20, 102);
  } else if (name == "toy-1T") {
    p.model = make_model(9, 160, 768, 258, 16, kToySeqLen, 1.0);
    p.schedule = make_schedule(5e-4, 3.34e-4, 4e-4, 1.34e-4, kLin, 0, 2 * kToySeqLen, kToyStageSteps * 2 * kToySeqLen,
                               kToySeqLen);
    p.growth = make_plan(p.model, 10, 1000);
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }
  return p;
}

inline SftPreset sft_preset() { return SftPreset{}; }

// ---- run configuration ----------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  TrainSchedule schedule;
  std::optional<GrowthPlan> growth;
  std::optional<std::filesystem::path> corpus;
  std::optional<std::filesystem::path> out_dir;
  std::uint64_t seed = 0;
  std::string dtype = "f32";
};

inline RunConfig run_config_from(const StagePreset& p) {
  RunConfig r;
  r.model = p.model;
  r.schedule = p.schedule;
  r.growth = p.growth;
  return r;
}

inline void validate(const RunConfig& r) {
  std::vector<std::string> errs = config_violations(r.model);
  try {
    validate(r.schedule);
  } catch (const ConfigError& e) {
    errs.emplace_back(e.what());
  }
  if (r.schedule.seq_len > r.model.max_seq_len) errs.emplace_back("schedule seq_len exceeds model max_seq_len");
  if (r.dtype != "f32" && r.dtype != "f64") errs.push_back("dtype must be f32 or f64 (got " + r.dtype + ")");
  if (r.growth) {
    for (const auto& v : config_violations(r.growth->target)) errs.push_back("growth target: " + v);
    if (r.growth->transition_steps <= 0) errs.emplace_back("growth transition_steps must be positive");
  }
  if (errs.empty()) return;
  std::string msg = "invalid run config:";
  for (const auto& e : errs) msg += "\n  - " + e;
  throw ConfigError(msg);
}

inline void to_json(json& j, const RunConfig& r) {
  j = json{{"model", r.model}, {"schedule", r.schedule}};
  j["growth"] = r.growth ? json(*r.growth) : json(nullptr);
  j["corpus"] = r.corpus ? json(r.corpus->string()) : json(nullptr);
  j["out_dir"] = r.out_dir ? json(r.out_dir->string()) : json(nullptr);
  j["seed"] = r.seed;
  j["dtype"] = r.dtype;
}

// A "preset" key supplies defaults; explicit sections replace the preset's.
inline void from_json(const json& j, RunConfig& r) {
  r = j.contains("preset") ? run_config_from(stage_preset(j.at("preset").get<std::string>())) : RunConfig{};
  if (j.contains("model")) r.model = j.at("model").get<ModelConfig>();
  if (j.contains("schedule")) r.schedule = j.at("schedule").get<TrainSchedule>();
  if (j.contains("growth")) {
    r.growth = j.at("growth").is_null() ? std::nullopt : std::optional(j.at("growth").get<GrowthPlan>());
  }
  if (j.contains("corpus") && !j.at("corpus").is_null()) r.corpus = j.at("corpus").get<std::string>();
  if (j.contains("out_dir") && !j.at("out_dir").is_null()) r.out_dir = j.at("out_dir").get<std::string>();
  r.seed = j.value("seed", r.seed);
  r.dtype = j.value("dtype", r.dtype);
}

}  // namespace flmgrow
