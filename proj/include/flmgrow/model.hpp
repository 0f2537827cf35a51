#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flmgrow/autograd.hpp"
#include "flmgrow/config.hpp"
#include "flmgrow/kernels.hpp"
#include "flmgrow/mask.hpp"
#include "flmgrow/rng.hpp"
#include "flmgrow/tensor.hpp"

namespace flmgrow {

using TokenId = std::uint32_t;

inline constexpr double kInitStd = 0.02;

// Per-layer parameters. Weight matrices are stored input-major (x · W).
template <class L>
struct LayerSet {
  L norm_attn_gain;  // hidden
  L attn_q;          // hidden × hidden
  L attn_k;
  L attn_v;
  L attn_o;
  L norm_ffn_gain;  // hidden
  L ffn_gate;       // hidden × ffn
  L ffn_up;         // hidden × ffn
  L ffn_down;       // ffn × hidden
};

template <class L>
struct ParamSet {
  L embedding;  // vocab × hidden
  std::vector<LayerSet<L>> layers;
  L final_ln_gain;  // hidden
  L final_ln_bias;  // hidden
  L lm_head;        // hidden × vocab, never aliased with embedding
};

template <Real T>
using ModelParams = ParamSet<Tensor<T>>;

template <class L>
constexpr std::array<std::pair<const char*, L LayerSet<L>::*>, 9> layer_fields() {
  return {{{"norm_attn_gain", &LayerSet<L>::norm_attn_gain},
           {"attn_q", &LayerSet<L>::attn_q},
           {"attn_k", &LayerSet<L>::attn_k},
           {"attn_v", &LayerSet<L>::attn_v},
           {"attn_o", &LayerSet<L>::attn_o},
           {"norm_ffn_gain", &LayerSet<L>::norm_ffn_gain},
           {"ffn_gate", &LayerSet<L>::ffn_gate},
           {"ffn_up", &LayerSet<L>::ffn_up},
           {"ffn_down", &LayerSet<L>::ffn_down}}};
}

// Visits every parameter in canonical order with its dotted path.
template <class Set, class F>
void for_each_param(Set& set, F&& f) {
  using L = std::remove_cvref_t<decltype(set.embedding)>;
  f(std::string("embedding"), set.embedding);
  for (std::size_t i = 0; i < set.layers.size(); ++i) {
    for (auto [name, member] : layer_fields<L>()) {
      f("layers." + std::to_string(i) + "." + name, set.layers[i].*member);
    }
  }
  f(std::string("final_ln_gain"), set.final_ln_gain);
  f(std::string("final_ln_bias"), set.final_ln_bias);
  f(std::string("lm_head"), set.lm_head);
}

// Visits two sets with identical structure in lockstep.
template <class SetA, class SetB, class F>
void for_each_param_pair(SetA& a, SetB& b, F&& f) {
  if (a.layers.size() != b.layers.size()) throw ContractError("parameter sets differ in layer count");
  using LA = std::remove_cvref_t<decltype(a.embedding)>;
  using LB = std::remove_cvref_t<decltype(b.embedding)>;
  f(std::string("embedding"), a.embedding, b.embedding);
  constexpr auto fa = layer_fields<LA>();
  constexpr auto fb = layer_fields<LB>();
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    for (std::size_t k = 0; k < fa.size(); ++k) {
      f("layers." + std::to_string(i) + "." + fa[k].first, a.layers[i].*(fa[k].second), b.layers[i].*(fb[k].second));
    }
  }
  f(std::string("final_ln_gain"), a.final_ln_gain, b.final_ln_gain);
  f(std::string("final_ln_bias"), a.final_ln_bias, b.final_ln_bias);
  f(std::string("lm_head"), a.lm_head, b.lm_head);
}

template <Real T>
std::int64_t allocated_scalars(const ModelParams<T>& p) {
  std::int64_t n = 0;
  for_each_param(p, [&](const std::string&, const Tensor<T>& t) { n += static_cast<std::int64_t>(t.size()); });
  return n;
}

template <Real T>
bool bit_equal(const ModelParams<T>& a, const ModelParams<T>& b) {
  if (a.layers.size() != b.layers.size()) return false;
  bool eq = true;
  for_each_param_pair(a, b, [&](const std::string&, const Tensor<T>& x, const Tensor<T>& y) {
    eq = eq && x.bit_equal(y);
  });
  return eq;
}

// Shapes of every parameter for a config, zero-filled.
template <Real T>
ModelParams<T> zero_params(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.hidden_dim);
  const auto f = static_cast<std::size_t>(c.ffn_dim);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  ModelParams<T> p;
  p.embedding = Tensor<T>({v, d});
  p.layers.resize(static_cast<std::size_t>(c.layer_num));
  for (auto& l : p.layers) {
    l.norm_attn_gain = Tensor<T>({d});
    l.attn_q = Tensor<T>({d, d});
    l.attn_k = Tensor<T>({d, d});
    l.attn_v = Tensor<T>({d, d});
    l.attn_o = Tensor<T>({d, d});
    l.norm_ffn_gain = Tensor<T>({d});
    l.ffn_gate = Tensor<T>({d, f});
    l.ffn_up = Tensor<T>({d, f});
    l.ffn_down = Tensor<T>({f, d});
  }
  p.final_ln_gain = Tensor<T>({d});
  p.final_ln_bias = Tensor<T>({d});
  p.lm_head = Tensor<T>({d, v});
  return p;
}

inline bool is_norm_gain(const std::string& path) {
  return path.ends_with("norm_attn_gain") || path.ends_with("norm_ffn_gain") || path == "final_ln_gain";
}

inline bool is_norm_bias(const std::string& path) { return path == "final_ln_bias"; }

// Fresh model: N(0, 0.02²) weights drawn in canonical order, unit gains, zero bias.
template <Real T>
ModelParams<T> init_params(const ModelConfig& config, Rng& rng) {
  validate(config);
  ModelParams<T> p = zero_params<T>(config);
  for_each_param(p, [&](const std::string& path, Tensor<T>& t) {
    if (is_norm_gain(path)) {
      t.fill(T{1});
    } else if (is_norm_bias(path)) {
      t.fill(T{0});
    } else {
      for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, kInitStd));
    }
  });
  return p;
}

// ---- plain vector helpers ------------------------------------------------------

template <Real T>
std::vector<T> rmsnorm(std::span<const T> x, std::span<const T> gain) {
  if (x.size() != gain.size()) throw DimensionError("rmsnorm: x and gain lengths differ");
  std::vector<T> y(x.size());
  kernels::rmsnorm_row<T>(x, gain, nullptr, static_cast<T>(x.size()), T(kernels::kRmsNormEps), y);
  return y;
}

// Rotates each row of `vectors` (n × head_dim) by its position.
template <Real T>
Tensor<T> rope_apply(const Tensor<T>& vectors, std::span<const std::int64_t> positions, double base = 10000.0) {
  const std::size_t head_dim = vectors.cols();
  if (head_dim % 2 != 0) throw ConfigError("rotary embedding needs an even head dimension");
  if (positions.size() != vectors.rows()) throw DimensionError("rope_apply: one position per row");
  Tensor<T> out = vectors;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    if (positions[r] < 0) throw InputError("negative position");
    kernels::RopeTable<T> table(static_cast<std::size_t>(positions[r]) + 1, head_dim, base);
    table.rotate(out.row(r), static_cast<std::size_t>(positions[r]));
  }
  return out;
}

// ---- forward -------------------------------------------------------------------

// Hidden states captured during a forward pass (rows = positions).
template <Real T>
struct ForwardTrace {
  std::vector<Tensor<T>> block_inputs;
  std::vector<Tensor<T>> block_outputs;
  Tensor<T> final_hidden;  // residual stream before the final LayerNorm
};

namespace detail {

// Constant multipliers implied by a mask state; all empty when unmasked.
template <Real T>
struct ForwardMasks {
  std::vector<T> hidden;                // per hidden coordinate
  std::vector<T> heads;                 // per attention head
  std::vector<std::vector<T>> ffn;      // per layer, per ffn unit
  std::vector<std::optional<T>> branch;  // per layer: residual branch scale for new layers
  T d_eff{0};
};

template <Real T>
ForwardMasks<T> make_masks(const ModelConfig& c, const MaskState* mask) {
  ForwardMasks<T> m;
  const auto d = static_cast<std::size_t>(c.hidden_dim);
  m.d_eff = static_cast<T>(c.hidden_dim);
  m.branch.assign(static_cast<std::size_t>(c.layer_num), std::nullopt);
  if (!mask) return m;
  check_mask_state(*mask, c);
  const T mv = static_cast<T>(mask->mask);
  const auto d_old = static_cast<std::size_t>(mask->hidden_old);
  m.hidden.assign(d, T{1});
  std::fill(m.hidden.begin() + static_cast<std::ptrdiff_t>(d_old), m.hidden.end(), mv);
  m.heads.assign(static_cast<std::size_t>(c.head_num), T{1});
  std::fill(m.heads.begin() + static_cast<std::ptrdiff_t>(mask->hidden_old / c.kv_channels), m.heads.end(), mv);
  m.ffn.resize(static_cast<std::size_t>(c.layer_num));
  for (std::size_t l = 0; l < m.ffn.size(); ++l) {
    m.ffn[l].assign(static_cast<std::size_t>(c.ffn_dim), T{1});
    std::fill(m.ffn[l].begin() + static_cast<std::ptrdiff_t>(mask->ffn_old[l]), m.ffn[l].end(), mv);
  }
  for (auto id : mask->new_layer_ids) m.branch[static_cast<std::size_t>(id)] = mv;
  m.d_eff = static_cast<T>(mask->hidden_old) + mv * static_cast<T>(c.hidden_dim - mask->hidden_old);
  return m;
}

inline void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("empty token sequence");
  if (static_cast<std::int64_t>(tokens.size()) > c.max_seq_len) {
    throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (static_cast<std::int64_t>(t) >= c.vocab_size) {
      throw InputError("token id " + std::to_string(t) + " >= vocab_size " + std::to_string(c.vocab_size));
    }
  }
}

template <Real T>
Var masked_columns(Tape<T>& tape, Var x, const std::vector<T>& weights) {
  return weights.empty() ? x : ag::scale_columns(tape, x, weights);
}

}  // namespace detail

template <Real T>
ParamSet<Var> bind_params(Tape<T>& tape, const ModelParams<T>& params) {
  ParamSet<Var> vars;
  vars.layers.resize(params.layers.size());
  for_each_param_pair(vars, params, [&](const std::string&, Var& v, const Tensor<T>& t) { v = tape.leaf(t); });
  return vars;
}

// Logits (seq × vocab) recorded on `tape`.
//   h = input_mult · embedding[tokens]
//   per layer: h += Attn(RMSNorm(h)); h += FFN(RMSNorm(h))
//   logits = output_mult · LayerNorm(h) · lm_head
// With a mask state, new hidden coordinates, heads, ffn units and whole new layers are
// scaled by the mask and all norms use the effective dimension.
template <Real T>
Var forward_on_tape(Tape<T>& tape, const ParamSet<Var>& p, const ModelConfig& config, std::span<const TokenId> tokens,
                    const MaskState* mask = nullptr, ForwardTrace<T>* trace = nullptr) {
  detail::check_tokens(config, tokens);
  if (static_cast<std::int64_t>(p.layers.size()) != config.layer_num) {
    throw ContractError("parameter layer count differs from config.layer_num");
  }
  const auto masks = detail::make_masks<T>(config, mask);
  const auto heads = static_cast<std::size_t>(config.head_num);
  const auto head_dim = static_cast<std::size_t>(config.kv_channels);

  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  Var h = ag::embedding(tape, p.embedding, std::move(ids));
  h = ag::scale(tape, h, static_cast<T>(config.input_mult));
  h = detail::masked_columns(tape, h, masks.hidden);

  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    if (trace) trace->block_inputs.push_back(tape.value(h));

    Var a = ag::rmsnorm_rows(tape, h, layer.norm_attn_gain, masks.hidden, masks.d_eff);
    Var q = ag::matmul(tape, a, layer.attn_q);
    Var k = ag::matmul(tape, a, layer.attn_k);
    Var v = ag::matmul(tape, a, layer.attn_v);
    Var att = ag::causal_attention(tape, q, k, v, heads, head_dim, config.rope_base, masks.heads);
    Var ao = ag::matmul(tape, att, layer.attn_o);
    ao = detail::masked_columns(tape, ao, masks.hidden);
    if (masks.branch[l]) ao = ag::scale(tape, ao, *masks.branch[l]);
    h = ag::add(tape, h, ao);

    Var f = ag::rmsnorm_rows(tape, h, layer.norm_ffn_gain, masks.hidden, masks.d_eff);
    Var gate = ag::silu(tape, ag::matmul(tape, f, layer.ffn_gate));
    Var up = ag::matmul(tape, f, layer.ffn_up);
    Var act = ag::mul(tape, gate, up);
    if (!masks.ffn.empty()) act = ag::scale_columns(tape, act, masks.ffn[l]);
    Var fo = ag::matmul(tape, act, layer.ffn_down);
    fo = detail::masked_columns(tape, fo, masks.hidden);
    if (masks.branch[l]) fo = ag::scale(tape, fo, *masks.branch[l]);
    h = ag::add(tape, h, fo);

    if (trace) trace->block_outputs.push_back(tape.value(h));
  }
  if (trace) trace->final_hidden = tape.value(h);

  Var n = ag::layernorm_rows(tape, h, p.final_ln_gain, p.final_ln_bias, masks.hidden, masks.d_eff);
  Var logits = ag::matmul(tape, n, p.lm_head);
  return ag::scale(tape, logits, static_cast<T>(config.output_mult));
}

template <Real T>
Tensor<T> forward(const ModelParams<T>& params, const ModelConfig& config, std::span<const TokenId> tokens,
                  const MaskState* mask = nullptr, ForwardTrace<T>* trace = nullptr) {
  Tape<T> tape(false);
  const auto vars = bind_params(tape, params);
  const Var logits = forward_on_tape(tape, vars, config, tokens, mask, trace);
  return tape.value(logits);
}

// Targets and 0/1 row weights for next-token prediction. loss_mask[t] selects the
// prediction of tokens[t+1] from the prefix ending at t (length tokens.size() - 1).
template <Real T>
std::pair<std::vector<std::size_t>, std::vector<T>> next_token_targets(std::span<const TokenId> tokens,
                                                                       const std::vector<bool>* loss_mask) {
  if (tokens.size() < 2) throw InputError("language-model loss needs at least two tokens");
  const std::size_t n = tokens.size();
  if (loss_mask && loss_mask->size() != n - 1) {
    throw DimensionError("loss_mask must have one entry per predicted position (" + std::to_string(n - 1) + ")");
  }
  std::vector<std::size_t> targets(n, 0);
  std::vector<T> weights(n, T{0});
  for (std::size_t t = 0; t + 1 < n; ++t) {
    targets[t] = tokens[t + 1];
    weights[t] = (!loss_mask || (*loss_mask)[t]) ? T{1} : T{0};
  }
  return {std::move(targets), std::move(weights)};
}

// Summed next-token NLL over selected positions, plus the number of positions.
template <Real T>
std::pair<Var, std::size_t> sequence_nll_on_tape(Tape<T>& tape, const ParamSet<Var>& p, const ModelConfig& config,
                                                 std::span<const TokenId> tokens, const std::vector<bool>* loss_mask,
                                                 const MaskState* mask) {
  auto [targets, weights] = next_token_targets<T>(tokens, loss_mask);
  std::size_t count = 0;
  for (T w : weights) count += (w != T{0});
  Var logits = forward_on_tape(tape, p, config, tokens, mask);
  return {ag::cross_entropy_sum(tape, logits, std::move(targets), std::move(weights)), count};
}

// Mean NLL of tokens[t+1] given the prefix, over positions where loss_mask is true.
template <Real T>
T lm_loss(const ModelParams<T>& params, const ModelConfig& config, std::span<const TokenId> tokens,
          const std::vector<bool>* loss_mask = nullptr, const MaskState* mask = nullptr) {
  Tape<T> tape(false);
  const auto vars = bind_params(tape, params);
  auto [sum, count] = sequence_nll_on_tape(tape, vars, config, tokens, loss_mask, mask);
  if (count == 0) throw ContractError("loss mask selects no positions");
  return tape.value(sum)[0] / static_cast<T>(count);
}

}  // namespace flmgrow
