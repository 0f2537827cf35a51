#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "flmgrow/config.hpp"
#include "flmgrow/error.hpp"
#include "flmgrow/model.hpp"

namespace flmgrow {

enum class ScheduleType { kCosine, kLinear };
enum class ParamGroup { kVector, kMatrix };

struct TrainSchedule {
  double lr_vector_begin = 1e-3;
  double lr_vector_end = 1e-4;
  double lr_matrix_begin = 1e-3;
  double lr_matrix_end = 1e-4;
  ScheduleType schedule_type = ScheduleType::kCosine;
  std::int64_t warmup_steps = 0;
  std::int64_t batch_tokens = 128;
  std::int64_t total_tokens = 128;
  std::int64_t seq_len = 64;

  std::int64_t total_steps() const { return (total_tokens + batch_tokens - 1) / batch_tokens; }

  bool operator==(const TrainSchedule&) const = default;
};

inline void validate(const TrainSchedule& s) {
  std::string errs;
  if (s.warmup_steps < 0) errs += "\n  - warmup_steps must be >= 0";
  if (s.batch_tokens < 1) errs += "\n  - batch_tokens must be >= 1";
  if (s.total_tokens < 1) errs += "\n  - total_tokens must be >= 1";
  if (s.seq_len < 2) errs += "\n  - seq_len must be >= 2";
  if (s.lr_vector_begin < 0 || s.lr_vector_end < 0 || s.lr_matrix_begin < 0 || s.lr_matrix_end < 0) {
    errs += "\n  - learning rates must be non-negative";
  }
  if (s.lr_vector_end > s.lr_vector_begin || s.lr_matrix_end > s.lr_matrix_begin) {
    errs += "\n  - decaying schedules need begin >= end";
  }
  if (!errs.empty()) throw ConfigError("invalid schedule:" + errs);
}

// Warmup ramps linearly from 0 to `begin` over warmup steps; afterwards the rate decays
// from `begin` to `end` by half-cosine or linearly, reaching `end` exactly at total_steps.
inline double schedule_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup, double begin, double end,
                          ScheduleType type) {
  if (step < 0) throw ContractError("learning-rate step must be non-negative");
  if (step > total_steps) throw ContractError("learning-rate step beyond schedule end");
  if (step < warmup) return begin * static_cast<double>(step) / static_cast<double>(warmup);
  if (total_steps <= warmup) return begin;
  const double p = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  const double w = type == ScheduleType::kLinear ? 1.0 - p : 0.5 * (1.0 + std::cos(std::numbers::pi * p));
  return w * begin + (1.0 - w) * end;
}

inline double lr_at(std::int64_t step, const TrainSchedule& s, ParamGroup group) {
  const bool vec = group == ParamGroup::kVector;
  return schedule_lr(step, s.total_steps(), s.warmup_steps, vec ? s.lr_vector_begin : s.lr_matrix_begin,
                     vec ? s.lr_vector_end : s.lr_matrix_end, s.schedule_type);
}

// Matrix-like tensors have two width-proportional extents (attention and FFN weights);
// embedding, lm_head and all norm parameters have at most one.
inline ParamGroup classify_param(const std::string& path) {
  const auto leaf = path.substr(path.rfind('.') + 1);
  const bool matrix = leaf.starts_with("attn_") || leaf.starts_with("ffn_");
  return matrix ? ParamGroup::kMatrix : ParamGroup::kVector;
}

template <Real T>
ParamSet<ParamGroup> classify_params(const ModelParams<T>& params) {
  ParamSet<ParamGroup> groups;
  groups.layers.resize(params.layers.size());
  for_each_param_pair(groups, params,
                      [](const std::string& path, ParamGroup& g, const Tensor<T>&) { g = classify_param(path); });
  return groups;
}

inline std::string to_string(ScheduleType t) { return t == ScheduleType::kCosine ? "cosine" : "linear"; }

inline ScheduleType schedule_type_from(const std::string& s) {
  if (s == "cosine") return ScheduleType::kCosine;
  if (s == "linear") return ScheduleType::kLinear;
  throw ConfigError("unknown schedule type '" + s + "'");
}

inline void to_json(json& j, const TrainSchedule& s) {
  j = json{{"lr_vector_begin", s.lr_vector_begin}, {"lr_vector_end", s.lr_vector_end},
           {"lr_matrix_begin", s.lr_matrix_begin}, {"lr_matrix_end", s.lr_matrix_end},
           {"schedule_type", to_string(s.schedule_type)}, {"warmup_steps", s.warmup_steps},
           {"batch_tokens", s.batch_tokens},       {"total_tokens", s.total_tokens},
           {"seq_len", s.seq_len}};
}

inline void from_json(const json& j, TrainSchedule& s) {
  TrainSchedule d;
  s.lr_vector_begin = j.value("lr_vector_begin", d.lr_vector_begin);
  s.lr_vector_end = j.value("lr_vector_end", d.lr_vector_end);
  s.lr_matrix_begin = j.value("lr_matrix_begin", s.lr_vector_begin);
  s.lr_matrix_end = j.value("lr_matrix_end", s.lr_vector_end);
  s.schedule_type = schedule_type_from(j.value("schedule_type", std::string("cosine")));
  s.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  s.batch_tokens = j.value("batch_tokens", d.batch_tokens);
  s.total_tokens = j.value("total_tokens", d.total_tokens);
  s.seq_len = j.value("seq_len", d.seq_len);
}

}  // namespace flmgrow
