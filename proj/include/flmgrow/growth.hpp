#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flmgrow/checkpoint.hpp"
#include "flmgrow/kernels.hpp"
#include "flmgrow/mask.hpp"
#include "flmgrow/model.hpp"
#include "flmgrow/parallel.hpp"
#include "flmgrow/plan.hpp"
#include "flmgrow/rng.hpp"

namespace flmgrow {

// Maximum number of duplicates any single layer may donate in one depth-growth event.
inline constexpr int kMaxCopiesPerLayer = 2;
// Distances closer than this count as comparable when selecting depth sources.
inline constexpr double kDistanceTieTolerance = 1e-9;

// RMSNorm over a grown vector: coordinates at or above d_old are scaled by mask and the
// mean square uses d_eff = d_old + mask·(d_new - d_old).
template <Real T>
std::vector<T> masked_rmsnorm(std::span<const T> x, std::span<const T> gain, T mask, std::size_t d_old) {
  if (x.size() != gain.size()) throw DimensionError("masked_rmsnorm: x and gain lengths differ");
  if (d_old > x.size()) throw DimensionError("masked_rmsnorm: d_old exceeds vector length");
  std::vector<T> w(x.size(), T{1});
  std::fill(w.begin() + static_cast<std::ptrdiff_t>(d_old), w.end(), mask);
  const T d_eff = static_cast<T>(d_old) + mask * static_cast<T>(x.size() - d_old);
  std::vector<T> y(x.size());
  kernels::rmsnorm_row<T>(x, gain, w.data(), d_eff, T(kernels::kRmsNormEps), y);
  return y;
}

struct LayerDistance {
  double mean_euclidean = 0.0;
  double mean_cosine = 0.0;
};

struct LayerDistanceStats {
  std::vector<LayerDistance> layers;
  std::int64_t sample_count = 0;
};

inline void to_json(json& j, const LayerDistanceStats& s) {
  json layers = json::array();
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    layers.push_back(json{{"layer", i},
                          {"mean_euclidean", s.layers[i].mean_euclidean},
                          {"mean_cosine", s.layers[i].mean_cosine}});
  }
  j = json{{"sample_count", s.sample_count}, {"layers", layers}};
}

inline void from_json(const json& j, LayerDistanceStats& s) {
  s.sample_count = j.at("sample_count").get<std::int64_t>();
  s.layers.clear();
  for (const auto& l : j.at("layers")) {
    s.layers.push_back({l.at("mean_euclidean").get<double>(), l.at("mean_cosine").get<double>()});
  }
}

// Runs the (masked) forward and measures how far each block moves the residual stream,
// averaged over every token position in the batch.
template <Real T>
LayerDistanceStats layer_io_distance(const Checkpoint<T>& ck, const std::vector<std::vector<TokenId>>& batch) {
  if (batch.empty()) throw ContractError("layer_io_distance needs at least one sequence");
  const auto layers = static_cast<std::size_t>(ck.config.layer_num);
  std::vector<double> euc(layers, 0.0), cos(layers, 0.0);
  std::int64_t count = 0;
  for (const auto& seq : batch) {
    ForwardTrace<T> trace;
    forward(ck.params, ck.config, seq, ck.mask_ptr(), &trace);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& in = trace.block_inputs[l];
      const auto& out = trace.block_outputs[l];
      for (std::size_t r = 0; r < in.rows(); ++r) {
        double diff2 = 0, dot = 0, n_in = 0, n_out = 0;
        for (std::size_t c = 0; c < in.cols(); ++c) {
          const double a = in(r, c), b = out(r, c);
          diff2 += (b - a) * (b - a);
          dot += a * b;
          n_in += a * a;
          n_out += b * b;
        }
        euc[l] += std::sqrt(diff2);
        double cd;
        if (diff2 == 0.0) {
          cd = 0.0;
        } else if (n_in == 0.0 || n_out == 0.0) {
          cd = 1.0;
        } else {
          cd = std::clamp(1.0 - dot / (std::sqrt(n_in) * std::sqrt(n_out)), 0.0, 2.0);
        }
        cos[l] += cd;
      }
    }
    count += static_cast<std::int64_t>(seq.size());
  }
  LayerDistanceStats stats;
  stats.sample_count = count;
  for (std::size_t l = 0; l < layers; ++l) {
    stats.layers.push_back({euc[l] / static_cast<double>(count), cos[l] / static_cast<double>(count)});
  }
  return stats;
}

// Picks depth-growth sources by ascending mean Euclidean distance. A layer donates a
// second copy only once every layer has donated one; among comparable distances the
// later layer wins. Result is ordered by (distance, later layer first), with each copy
// inserted directly after its source.
inline std::vector<DepthSource> select_source_layers(const LayerDistanceStats& stats, std::int64_t n_new) {
  const auto layers = static_cast<std::int64_t>(stats.layers.size());
  if (n_new < 1) throw PlanError("depth growth needs at least one new layer");
  if (n_new > kMaxCopiesPerLayer * layers) {
    throw PlanError("insufficient sources: " + std::to_string(n_new) + " new layers but each of " +
                    std::to_string(layers) + " layers may be copied at most " + std::to_string(kMaxCopiesPerLayer) +
                    " times");
  }
  auto dist = [&](std::int64_t l) { return stats.layers[static_cast<std::size_t>(l)].mean_euclidean; };
  // a ranks before b: clearly smaller distance, or comparable distance and later layer.
  auto before = [&](std::int64_t a, std::int64_t b) {
    if (std::abs(dist(a) - dist(b)) <= kDistanceTieTolerance) return a > b;
    return dist(a) < dist(b);
  };

  std::vector<int> uses(static_cast<std::size_t>(layers), 0);
  std::vector<std::int64_t> picked;
  for (std::int64_t k = 0; k < n_new; ++k) {
    std::int64_t best = -1;
    for (std::int64_t l = 0; l < layers; ++l) {
      const int u = uses[static_cast<std::size_t>(l)];
      if (u >= kMaxCopiesPerLayer) continue;
      if (best < 0) {
        best = l;
        continue;
      }
      const int ub = uses[static_cast<std::size_t>(best)];
      if (u < ub || (u == ub && before(l, best))) best = l;
    }
    ++uses[static_cast<std::size_t>(best)];
    picked.push_back(best);
  }
  std::stable_sort(picked.begin(), picked.end(), before);
  std::vector<DepthSource> out;
  for (auto l : picked) out.push_back({l, l});
  return out;
}

namespace detail {

inline void check_plan_against(const ModelConfig& src, const GrowthPlan& plan) {
  const auto v = config_violations(plan.target);
  if (!v.empty()) {
    std::string msg = "target architecture invalid:";
    for (const auto& s : v) msg += "\n  - " + s;
    throw PlanError(msg);
  }
  if (plan.target.vocab_size != src.vocab_size) throw PlanError("vocab_size cannot change during growth");
  if (plan.target.kv_channels != src.kv_channels) throw PlanError("kv_channels cannot change during growth");
  if (plan.target.rope_base != src.rope_base) throw PlanError("rope_base cannot change during growth");
  if (plan.target.hidden_dim < src.hidden_dim) throw PlanError("plan shrinks hidden_dim");
  if (plan.target.ffn_dim < src.ffn_dim) throw PlanError("plan shrinks ffn_dim");
  if (plan.target.layer_num < src.layer_num) throw PlanError("plan shrinks layer_num");
  if (plan.transition_steps <= 0) throw PlanError("transition_steps must be positive");
  if (!(plan.width_init_std >= 0.0)) throw PlanError("width_init_std must be non-negative");
}

// Starts a growth event or joins the one begun at this very step (mask still 0).
// Returns true when a new event was opened.
template <Real T>
bool begin_event(Checkpoint<T>& ck, const GrowthPlan& plan) {
  if (ck.mask) {
    const double m = mask_value(ck.step, ck.mask->transition);
    if (m == 0.0 && ck.mask->transition.start_step == ck.step) return false;
    if (m < 1.0) throw PlanError("previous growth transition is still in progress (mask " + std::to_string(m) + ")");
  }
  MaskState ms;
  ms.mask = 0.0;
  ms.hidden_old = ck.config.hidden_dim;
  ms.ffn_old.assign(static_cast<std::size_t>(ck.config.layer_num), ck.config.ffn_dim);
  ms.transition = {ck.step, plan.transition_steps};
  ck.mask = ms;
  ck.schedule_origin = ck.step;
  ck.history.push_back(GrowthRecord{ck.config, plan, ck.step});
  ck.history.back().plan.depth_sources.clear();
  ck.history.back().plan.distance_based = false;
  return true;
}

// Copies `old` into the leading block of a tensor shaped `shape`; fill(i) supplies new entries.
template <Real T, class Fill>
Tensor<T> grow_block(const Tensor<T>& old, const Shape& shape, Fill&& fill) {
  Tensor<T> out(shape);
  if (shape.size() == 1) {
    for (std::size_t i = 0; i < shape[0]; ++i) out[i] = i < old.dim(0) ? old[i] : fill();
  } else {
    const std::size_t r_old = old.dim(0), c_old = old.dim(1);
    for (std::size_t r = 0; r < shape[0]; ++r) {
      for (std::size_t c = 0; c < shape[1]; ++c) {
        out(r, c) = (r < r_old && c < c_old) ? old(r, c) : fill();
      }
    }
  }
  return out;
}

template <Real T>
void scale_block(Tensor<T>& t, std::size_t rows, std::size_t cols, double factor) {
  const T f = static_cast<T>(factor);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t(r, c) *= f;
}

}  // namespace detail

// Widens hidden_dim (and with it head_num) and/or ffn_dim. Old blocks are copied bit-exactly,
// new entries are drawn from N(0, width_init_std²) in canonical parameter order (new norm
// gains are 1, new LayerNorm bias entries 0), and new moments start at zero.
template <Real T>
Checkpoint<T> grow_width(Checkpoint<T> ck, const GrowthPlan& plan) {
  detail::check_plan_against(ck.config, plan);
  const ModelConfig src = ck.config;
  ModelConfig dst = src;
  dst.hidden_dim = plan.target.hidden_dim;
  dst.head_num = plan.target.head_num;
  dst.ffn_dim = plan.target.ffn_dim;
  dst.input_mult = plan.target.input_mult;
  dst.output_mult = plan.target.output_mult;
  dst.max_seq_len = plan.target.max_seq_len;

  detail::begin_event(ck, plan);
  Rng rng(plan.seed);
  const ModelParams<T> shapes = zero_params<T>(dst);
  ModelParams<T> grown = shapes;
  for_each_param_pair(grown, ck.params, [&](const std::string& path, Tensor<T>& out, const Tensor<T>& old) {
    if (is_norm_gain(path)) {
      out = detail::grow_block(old, out.shape(), [] { return T{1}; });
    } else if (is_norm_bias(path)) {
      out = detail::grow_block(old, out.shape(), [] { return T{0}; });
    } else {
      out = detail::grow_block(old, out.shape(), [&] { return static_cast<T>(rng.normal(0.0, plan.width_init_std)); });
    }
  });
  // A changed multiplier is absorbed into the old block so the function is unchanged.
  if (dst.input_mult != src.input_mult) {
    detail::scale_block(grown.embedding, static_cast<std::size_t>(src.vocab_size),
                        static_cast<std::size_t>(src.hidden_dim), src.input_mult / dst.input_mult);
  }
  if (dst.output_mult != src.output_mult) {
    detail::scale_block(grown.lm_head, static_cast<std::size_t>(src.hidden_dim),
                        static_cast<std::size_t>(src.vocab_size), src.output_mult / dst.output_mult);
  }
  ck.params = std::move(grown);

  auto grow_moments = [&](ModelParams<T>& moments) {
    ModelParams<T> out = shapes;
    for_each_param_pair(out, moments, [&](const std::string&, Tensor<T>& o, const Tensor<T>& old) {
      o = detail::grow_block(old, o.shape(), [] { return T{0}; });
    });
    moments = std::move(out);
  };
  grow_moments(ck.optimizer.m);
  grow_moments(ck.optimizer.v);

  ck.config = dst;
  auto& rec = ck.history.back();
  rec.plan.target = dst;
  rec.plan.width_init_std = plan.width_init_std;
  rec.plan.seed = plan.seed;
  return ck;
}

// Inserts copies of existing layers. Each copy's attention and FFN branch outputs are
// scaled by the event mask, so at mask 0 every new layer is the identity map.
template <Real T>
Checkpoint<T> grow_depth(Checkpoint<T> ck, const GrowthPlan& plan, const LayerDistanceStats* stats = nullptr) {
  detail::check_plan_against(ck.config, plan);
  const ModelConfig src = ck.config;
  if (plan.target.layer_num <= src.layer_num) throw PlanError("depth growth needs target layer_num > current");
  if (plan.target.hidden_dim != src.hidden_dim || plan.target.ffn_dim != src.ffn_dim ||
      plan.target.input_mult != src.input_mult || plan.target.output_mult != src.output_mult) {
    throw PlanError("depth growth expects widths and multipliers already matching the target; grow width first");
  }
  const std::int64_t n_new = plan.target.layer_num - src.layer_num;
  std::vector<DepthSource> sources;
  if (plan.distance_based) {
    if (!stats) throw PlanError("distance-based depth growth needs layer distance statistics");
    if (static_cast<std::int64_t>(stats->layers.size()) != src.layer_num) {
      throw PlanError("distance statistics cover a different number of layers");
    }
    sources = select_source_layers(*stats, n_new);
  } else {
    sources = plan.depth_sources;
    if (static_cast<std::int64_t>(sources.size()) != n_new) {
      throw PlanError("explicit depth_sources count (" + std::to_string(sources.size()) + ") differs from " +
                      std::to_string(n_new) + " new layers");
    }
    for (const auto& s : sources) {
      if (s.source_layer < 0 || s.source_layer >= src.layer_num || s.insert_after < 0 ||
          s.insert_after >= src.layer_num) {
        throw PlanError("depth source layer out of range");
      }
    }
  }

  detail::begin_event(ck, plan);
  MaskState& ms = *ck.mask;
  const MaskState prior = ms;

  ModelParams<T> params;
  OptimizerState<T> opt;
  opt.step = ck.optimizer.step;
  params.embedding = std::move(ck.params.embedding);
  params.final_ln_gain = std::move(ck.params.final_ln_gain);
  params.final_ln_bias = std::move(ck.params.final_ln_bias);
  params.lm_head = std::move(ck.params.lm_head);
  using Field = Tensor<T> ModelParams<T>::*;
  for (Field field : {Field{&ModelParams<T>::embedding}, Field{&ModelParams<T>::final_ln_gain},
                      Field{&ModelParams<T>::final_ln_bias}, Field{&ModelParams<T>::lm_head}}) {
    opt.m.*field = std::move(ck.optimizer.m.*field);
    opt.v.*field = std::move(ck.optimizer.v.*field);
  }
  std::vector<std::int64_t> ffn_old, new_ids;
  auto zero_layer = [](const LayerSet<Tensor<T>>& like) {
    LayerSet<Tensor<T>> z;
    for (auto [name, member] : layer_fields<Tensor<T>>()) z.*member = Tensor<T>((like.*member).shape());
    return z;
  };
  for (std::int64_t i = 0; i < src.layer_num; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    if (prior.is_new_layer(i)) new_ids.push_back(static_cast<std::int64_t>(params.layers.size()));
    params.layers.push_back(ck.params.layers[iu]);
    opt.m.layers.push_back(std::move(ck.optimizer.m.layers[iu]));
    opt.v.layers.push_back(std::move(ck.optimizer.v.layers[iu]));
    ffn_old.push_back(prior.ffn_old[iu]);
    for (const auto& s : sources) {
      if (s.insert_after != i) continue;
      const auto su = static_cast<std::size_t>(s.source_layer);
      new_ids.push_back(static_cast<std::int64_t>(params.layers.size()));
      params.layers.push_back(ck.params.layers[su]);
      opt.m.layers.push_back(zero_layer(params.layers.back()));
      opt.v.layers.push_back(zero_layer(params.layers.back()));
      ffn_old.push_back(prior.ffn_old[su]);
    }
  }
  ck.params = std::move(params);
  ck.optimizer = std::move(opt);
  ck.config.layer_num = plan.target.layer_num;
  ms.ffn_old = std::move(ffn_old);
  ms.new_layer_ids = std::move(new_ids);
  std::sort(ms.new_layer_ids.begin(), ms.new_layer_ids.end());

  auto& rec = ck.history.back();
  rec.plan.target = ck.config;
  rec.plan.transition_steps = ms.transition.transition_steps;
  rec.plan.distance_based = false;
  rec.plan.depth_sources.insert(rec.plan.depth_sources.end(), sources.begin(), sources.end());
  return ck;
}

template <Real T>
struct GrowResult {
  Checkpoint<T> checkpoint;
  std::optional<LayerDistanceStats> distances;
  std::vector<DepthSource> sources;
};

// Applies a plan as a single growth event: width first, then depth. Distance statistics
// for distance-based depth growth are measured on `probes` after the width step.
template <Real T>
GrowResult<T> grow(Checkpoint<T> ck, const GrowthPlan& plan, const std::vector<std::vector<TokenId>>& probes) {
  detail::check_plan_against(ck.config, plan);
  const ModelConfig& c = ck.config;
  const bool widen = plan.target.hidden_dim != c.hidden_dim || plan.target.ffn_dim != c.ffn_dim ||
                     plan.target.input_mult != c.input_mult || plan.target.output_mult != c.output_mult;
  const bool deepen = plan.target.layer_num > c.layer_num;
  if (!widen && !deepen) throw PlanError("plan does not grow the model");
  GrowResult<T> result;
  if (widen) ck = grow_width(std::move(ck), plan);
  if (deepen) {
    if (plan.distance_based) {
      result.distances = layer_io_distance(ck, probes);
      const auto n_new = plan.target.layer_num - ck.config.layer_num;
      result.sources = select_source_layers(*result.distances, n_new);
    } else {
      result.sources = plan.depth_sources;
    }
    ck = grow_depth(std::move(ck), plan, result.distances ? &*result.distances : nullptr);
  }
  result.checkpoint = std::move(ck);
  return result;
}

// Re-applies recorded growth events (explicit sources, same seeds) to a checkpoint.
template <Real T>
Checkpoint<T> replay_growth(Checkpoint<T> ck, const std::vector<GrowthRecord>& history) {
  for (const auto& rec : history) {
    if (rec.source != ck.config) throw PlanError("growth history does not start from this architecture");
    ck.step = rec.step;
    ck = grow(std::move(ck), rec.plan, {}).checkpoint;
  }
  return ck;
}

struct PreservationReport {
  double max_abs_diff = 0.0;
  double max_rel_diff = 0.0;
  std::int64_t probes = 0;
  std::int64_t logits_compared = 0;
};

inline void to_json(json& j, const PreservationReport& r) {
  j = json{{"max_abs_diff", r.max_abs_diff},
           {"max_rel_diff", r.max_rel_diff},
           {"probes", r.probes},
           {"logits_compared", r.logits_compared}};
}

// Tolerance tier for a dtype: 1e-5 for 32-bit, 1e-10 for 64-bit.
template <Real T>
constexpr double preservation_tolerance() {
  return std::is_same_v<T, float> ? 1e-5 : 1e-10;
}

// Compares logits of `pre` and `post` on every probe. `post` is evaluated at mask 0
// unless mask_override is given.
template <Real T>
PreservationReport verify_function_preservation(const Checkpoint<T>& pre, const Checkpoint<T>& post,
                                                const std::vector<std::vector<TokenId>>& probes,
                                                std::optional<double> mask_override = std::nullopt) {
  if (pre.config.vocab_size != post.config.vocab_size) throw ContractError("vocab sizes differ");
  std::optional<MaskState> post_mask = post.mask;
  if (mask_override) {
    if (!post_mask) throw ContractError("mask override requested but post checkpoint has no mask state");
    post_mask->mask = *mask_override;
  } else if (post_mask && post_mask->mask != 0.0) {
    throw ContractError("post checkpoint mask is " + std::to_string(post_mask->mask) + ", expected 0");
  }
  std::vector<PreservationReport> per_probe(probes.size());
  parallel_for(probes.size(), [&](std::size_t i) {
    const Tensor<T> a = forward(pre.params, pre.config, probes[i], pre.mask_ptr());
    const Tensor<T> b = forward(post.params, post.config, probes[i], post_mask ? &*post_mask : nullptr);
    PreservationReport r;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double x = a[k], y = b[k];
      const double diff = std::abs(x - y);
      const double scale = std::max(std::abs(x), std::abs(y));
      r.max_abs_diff = std::max(r.max_abs_diff, diff);
      if (scale > 0.0) r.max_rel_diff = std::max(r.max_rel_diff, diff / scale);
      if (!std::isfinite(diff)) r.max_abs_diff = r.max_rel_diff = INFINITY;
    }
    r.logits_compared = static_cast<std::int64_t>(a.size());
    per_probe[i] = r;
  });
  PreservationReport total;
  for (const auto& r : per_probe) {
    total.max_abs_diff = std::max(total.max_abs_diff, r.max_abs_diff);
    total.max_rel_diff = std::max(total.max_rel_diff, r.max_rel_diff);
    total.logits_compared += r.logits_compared;
  }
  total.probes = static_cast<std::int64_t>(probes.size());
  return total;
}

}  // namespace flmgrow
