#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "flmgrow/config.hpp"
#include "flmgrow/error.hpp"

namespace flmgrow {

struct GrowthTransition {
  std::int64_t start_step = 0;
  std::int64_t transition_steps = 1;

  bool operator==(const GrowthTransition&) const = default;
};

// Linear ramp from 0 at start_step to 1 at start_step + transition_steps.
inline double mask_value(std::int64_t step, const GrowthTransition& t) {
  if (t.transition_steps <= 0) throw ConfigError("growth transition_steps must be positive");
  if (step < 0) throw ContractError("step must be non-negative");
  const double x = static_cast<double>(step - t.start_step) / static_cast<double>(t.transition_steps);
  return std::clamp(x, 0.0, 1.0);
}

// Mask of the current growth event. Coordinates below hidden_old / ffn_old[layer] and
// heads below hidden_old / kv_channels existed before the event; the rest are masked.
struct MaskState {
  double mask = 0.0;
  std::int64_t hidden_old = 0;
  std::vector<std::int64_t> ffn_old;        // one entry per current layer
  std::vector<std::int64_t> new_layer_ids;  // sorted ascending
  GrowthTransition transition;

  bool is_new_layer(std::int64_t layer) const {
    return std::binary_search(new_layer_ids.begin(), new_layer_ids.end(), layer);
  }

  bool operator==(const MaskState&) const = default;
};

inline void check_mask_state(const MaskState& m, const ModelConfig& c) {
  if (!(m.mask >= 0.0 && m.mask <= 1.0)) throw ContractError("mask must lie in [0, 1]");
  if (m.hidden_old < 1 || m.hidden_old > c.hidden_dim || m.hidden_old % c.kv_channels != 0) {
    throw ContractError("mask hidden_old inconsistent with config");
  }
  if (static_cast<std::int64_t>(m.ffn_old.size()) != c.layer_num) {
    throw ContractError("mask ffn_old must have one entry per layer");
  }
  for (auto f : m.ffn_old) {
    if (f < 0 || f > c.ffn_dim) throw ContractError("mask ffn_old entry exceeds ffn_dim");
  }
  for (auto l : m.new_layer_ids) {
    if (l < 0 || l >= c.layer_num) throw ContractError("mask new layer id out of range");
  }
}

inline void to_json(json& j, const GrowthTransition& t) {
  j = json{{"start_step", t.start_step}, {"transition_steps", t.transition_steps}};
}

inline void from_json(const json& j, GrowthTransition& t) {
  t.start_step = j.at("start_step").get<std::int64_t>();
  t.transition_steps = j.at("transition_steps").get<std::int64_t>();
}

inline void to_json(json& j, const MaskState& m) {
  j = json{{"mask", m.mask},
           {"hidden_old", m.hidden_old},
           {"ffn_old", m.ffn_old},
           {"new_layer_ids", m.new_layer_ids},
           {"transition", m.transition}};
}

inline void from_json(const json& j, MaskState& m) {
  m.mask = j.at("mask").get<double>();
  m.hidden_old = j.at("hidden_old").get<std::int64_t>();
  m.ffn_old = j.at("ffn_old").get<std::vector<std::int64_t>>();
  m.new_layer_ids = j.at("new_layer_ids").get<std::vector<std::int64_t>>();
  m.transition = j.at("transition").get<GrowthTransition>();
}

}  // namespace flmgrow
