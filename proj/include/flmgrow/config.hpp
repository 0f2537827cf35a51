#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "flmgrow/error.hpp"

namespace flmgrow {

using json = nlohmann::ordered_json;

struct ModelConfig {
  std::int64_t layer_num = 1;
  std::int64_t head_num = 1;
  std::int64_t hidden_dim = 128;
  std::int64_t ffn_dim = 256;
  std::int64_t vocab_size = 258;
  std::int64_t kv_channels = 128;
  std::int64_t max_seq_len = 64;
  double rope_base = 10000.0;
  double input_mult = 1.0;
  double output_mult = 1.0;

  bool operator==(const ModelConfig&) const = default;
};

// Every violated invariant, one message each. Empty means valid.
inline std::vector<std::string> config_violations(const ModelConfig& c) {
  std::vector<std::string> v;
  auto positive = [&](std::int64_t x, const char* name) {
    if (x < 1) v.push_back(std::string(name) + " must be >= 1 (got " + std::to_string(x) + ")");
  };
  positive(c.layer_num, "layer_num");
  positive(c.head_num, "head_num");
  positive(c.hidden_dim, "hidden_dim");
  positive(c.ffn_dim, "ffn_dim");
  positive(c.vocab_size, "vocab_size");
  positive(c.kv_channels, "kv_channels");
  positive(c.max_seq_len, "max_seq_len");
  if (c.kv_channels >= 1 && c.hidden_dim >= 1) {
    if (c.hidden_dim % c.kv_channels != 0) {
      v.push_back("hidden_dim (" + std::to_string(c.hidden_dim) + ") must be divisible by kv_channels (" +
                  std::to_string(c.kv_channels) + ")");
    } else if (c.head_num != c.hidden_dim / c.kv_channels) {
      v.push_back("head_num (" + std::to_string(c.head_num) + ") must equal hidden_dim / kv_channels (" +
                  std::to_string(c.hidden_dim / c.kv_channels) + ")");
    }
  }
  if (c.kv_channels % 2 != 0) v.push_back("kv_channels must be even for rotary embedding");
  if (!(c.rope_base > 0.0)) v.push_back("rope_base must be positive");
  return v;
}

inline void validate(const ModelConfig& c) {
  const auto v = config_violations(c);
  if (v.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

// Untied embedding and head, four attention and three SwiGLU matrices plus two
// RMSNorm gains per layer, final LayerNorm gain and bias.
constexpr std::int64_t count_params(std::int64_t layers, std::int64_t hidden, std::int64_t ffn, std::int64_t vocab) {
  return 2 * vocab * hidden + layers * (4 * hidden * hidden + 3 * hidden * ffn + 2 * hidden) + 2 * hidden;
}

inline std::int64_t count_params(const ModelConfig& c) {
  return count_params(c.layer_num, c.hidden_dim, c.ffn_dim, c.vocab_size);
}

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"layer_num", c.layer_num},     {"head_num", c.head_num},       {"hidden_dim", c.hidden_dim},
           {"ffn_dim", c.ffn_dim},         {"vocab_size", c.vocab_size},   {"kv_channels", c.kv_channels},
           {"max_seq_len", c.max_seq_len}, {"rope_base", c.rope_base},     {"input_mult", c.input_mult},
           {"output_mult", c.output_mult}};
}

inline void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.layer_num = j.value("layer_num", d.layer_num);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.kv_channels = j.value("kv_channels", d.kv_channels);
  // head_num may be omitted and derived from the width rule.
  c.head_num = j.contains("head_num") ? j.at("head_num").get<std::int64_t>()
                                      : (c.kv_channels > 0 ? c.hidden_dim / c.kv_channels : 0);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.input_mult = j.value("input_mult", d.input_mult);
  c.output_mult = j.value("output_mult", d.output_mult);
}

}  // namespace flmgrow
