#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "flmgrow/checkpoint.hpp"
#include "flmgrow/data.hpp"
#include "flmgrow/mask.hpp"
#include "flmgrow/model.hpp"
#include "flmgrow/rng.hpp"
#include "flmgrow/schedule.hpp"

namespace flmgrow {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;  // matrix-like tensors only
  double clip_norm = 1.0;     // global gradient norm; <= 0 disables clipping
};

struct StepMetrics {
  std::int64_t step = 0;
  std::int64_t tokens = 0;  // consumed tokens after this step
  double loss = 0.0;
  double lr_vector = 0.0;
  double lr_matrix = 0.0;
  double mask = 1.0;
  double grad_norm = 0.0;
};

inline json metrics_json(const StepMetrics& m) {
  return json{{"step", m.step},           {"tokens", m.tokens},       {"loss", m.loss},
              {"lr_vector", m.lr_vector}, {"lr_matrix", m.lr_matrix}, {"mask", m.mask}};
}

struct TrainSequence {
  std::vector<TokenId> tokens;
  std::optional<std::vector<bool>> loss_mask;
};

template <Real T>
void refresh_mask(Checkpoint<T>& ck) {
  if (ck.mask) ck.mask->mask = mask_value(ck.step, ck.mask->transition);
}

// One optimizer step at explicit learning rates: token-weighted mean NLL over the batch,
// global-norm clipping, then Adam with decoupled weight decay on matrix-like tensors.
template <Real T>
StepMetrics train_step_at(Checkpoint<T>& ck, const std::vector<TrainSequence>& batch, double lr_vector,
                          double lr_matrix, const OptimizerConfig& opt = {}) {
  if (batch.empty()) throw ContractError("empty training batch");
  refresh_mask(ck);
  StepMetrics metrics;
  metrics.step = ck.step;
  metrics.mask = ck.mask ? ck.mask->mask : 1.0;
  metrics.lr_vector = lr_vector;
  metrics.lr_matrix = lr_matrix;

  Tape<T> tape(true);
  const ParamSet<Var> vars = bind_params(tape, ck.params);
  std::optional<Var> total;
  std::size_t count = 0;
  std::int64_t tokens = 0;
  for (const auto& seq : batch) {
    auto [nll, n] = sequence_nll_on_tape(tape, vars, ck.config, seq.tokens,
                                         seq.loss_mask ? &*seq.loss_mask : nullptr, ck.mask_ptr());
    total = total ? ag::add(tape, *total, nll) : nll;
    count += n;
    tokens += static_cast<std::int64_t>(seq.tokens.size());
  }
  if (count == 0) throw ContractError("loss mask selects no positions in this batch");
  const Var loss = ag::scale(tape, *total, T{1} / static_cast<T>(count));
  metrics.loss = static_cast<double>(tape.value(loss)[0]);
  if (!std::isfinite(metrics.loss)) {
    throw NumericalError("non-finite loss " + std::to_string(metrics.loss) + " at step " + std::to_string(ck.step));
  }
  tape.backward(loss);

  // Gradients in canonical order; leaves the loss never reached have none.
  struct Slot {
    std::string path;
    Tensor<T>* param;
    const Tensor<T>* grad;
    Tensor<T>* m = nullptr;
    Tensor<T>* v = nullptr;
  };
  std::vector<Slot> slots;
  double norm2 = 0.0;
  for_each_param_pair(vars, ck.params, [&](const std::string& path, const Var& var, Tensor<T>& p) {
    const Tensor<T>* g = tape.has_grad(var) ? &tape.grad(var) : nullptr;
    if (g) {
      for (T x : g->values()) norm2 += static_cast<double>(x) * static_cast<double>(x);
    }
    slots.push_back({path, &p, g});
  });
  std::size_t k = 0;
  for_each_param(ck.optimizer.m, [&](const std::string&, Tensor<T>& m) { slots[k++].m = &m; });
  k = 0;
  for_each_param(ck.optimizer.v, [&](const std::string&, Tensor<T>& v) { slots[k++].v = &v; });

  metrics.grad_norm = std::sqrt(norm2);
  if (!std::isfinite(metrics.grad_norm)) {
    throw NumericalError("non-finite gradient norm at step " + std::to_string(ck.step));
  }
  const T clip = (opt.clip_norm > 0.0 && metrics.grad_norm > opt.clip_norm)
                     ? static_cast<T>(opt.clip_norm / metrics.grad_norm)
                     : T{1};

  const std::int64_t t = ++ck.optimizer.step;
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(opt.beta1, static_cast<double>(t)));
  const T bc2 = static_cast<T>(1.0 - std::pow(opt.beta2, static_cast<double>(t)));
  const T eps = static_cast<T>(opt.eps);
  for (auto& s : slots) {
    const bool matrix = classify_param(s.path) == ParamGroup::kMatrix;
    const T lr = static_cast<T>(matrix ? lr_matrix : lr_vector);
    const T wd = matrix ? static_cast<T>(opt.weight_decay) : T{0};
    Tensor<T>& p = *s.param;
    Tensor<T>& m = *s.m;
    Tensor<T>& v = *s.v;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T g = s.grad ? (*s.grad)[i] * clip : T{0};
      m[i] = b1 * m[i] + (T{1} - b1) * g;
      v[i] = b2 * v[i] + (T{1} - b2) * g * g;
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
    }
  }

  ++ck.step;
  ck.consumed_tokens += tokens;
  refresh_mask(ck);
  metrics.tokens = ck.consumed_tokens;
  return metrics;
}

// One step with learning rates taken from the schedule at the checkpoint's schedule-local step.
template <Real T>
StepMetrics train_step(Checkpoint<T>& ck, const std::vector<TrainSequence>& batch, const TrainSchedule& schedule,
                       const OptimizerConfig& opt = {}) {
  const std::int64_t local = ck.step - ck.schedule_origin;
  return train_step_at(ck, batch, lr_at(local, schedule, ParamGroup::kVector),
                       lr_at(local, schedule, ParamGroup::kMatrix), opt);
}

// Deterministic batching: the corpus is cut into seq_len windows; each pass over the
// windows follows a permutation seeded by (seed, pass). Batch contents depend only on
// (seed, global step), so resumed runs see the same data.
class CorpusBatcher {
 public:
  CorpusBatcher(const std::vector<TokenId>* corpus, std::int64_t seq_len, std::int64_t seqs_per_batch,
                std::uint64_t seed)
      : corpus_(corpus), seq_len_(seq_len), per_batch_(seqs_per_batch), seed_(seed) {
    if (seq_len < 2) throw ConfigError("seq_len must be >= 2");
    windows_ = static_cast<std::int64_t>(corpus->size()) / seq_len;
    if (windows_ < 1) throw InputError("corpus shorter than one sequence");
  }

  std::vector<TrainSequence> batch(std::int64_t step) {
    std::vector<TrainSequence> out;
    for (std::int64_t b = 0; b < per_batch_; ++b) {
      const std::int64_t g = step * per_batch_ + b;
      const std::int64_t pass = g / windows_;
      if (pass != cached_pass_) {
        perm_.resize(static_cast<std::size_t>(windows_));
        std::iota(perm_.begin(), perm_.end(), 0);
        Rng rng(mix_seed(seed_, static_cast<std::uint64_t>(pass)));
        for (std::size_t i = perm_.size(); i > 1; --i) std::swap(perm_[i - 1], perm_[rng.below(i)]);
        cached_pass_ = pass;
      }
      const auto start = perm_[static_cast<std::size_t>(g % windows_)] * seq_len_;
      TrainSequence s;
      s.tokens.assign(corpus_->begin() + start, corpus_->begin() + start + seq_len_);
      out.push_back(std::move(s));
    }
    return out;
  }

  std::int64_t windows() const { return windows_; }

 private:
  const std::vector<TokenId>* corpus_;
  std::int64_t seq_len_;
  std::int64_t per_batch_;
  std::uint64_t seed_;
  std::int64_t windows_ = 0;
  std::int64_t cached_pass_ = -1;
  std::vector<std::int64_t> perm_;
};

struct StopCondition {
  std::optional<std::int64_t> until_step;    // global step
  std::optional<std::int64_t> until_tokens;  // global consumed tokens
};

template <Real T>
struct TrainRunOptions {
  OptimizerConfig optimizer;
  std::optional<std::uint64_t> data_seed;  // defaults to the checkpoint seed
  std::int64_t checkpoint_every = 0;       // 0 disables periodic checkpoints
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const StepMetrics&)> on_step;
};

// Trains until the stop condition or the end of the schedule, whichever comes first.
template <Real T>
std::vector<StepMetrics> train_run(Checkpoint<T>& ck, const std::vector<TokenId>& corpus,
                                   const TrainSchedule& schedule, const StopCondition& stop,
                                   const TrainRunOptions<T>& options = {}) {
  validate(schedule);
  if (schedule.seq_len > ck.config.max_seq_len) throw ConfigError("schedule seq_len exceeds model max_seq_len");
  if (schedule.batch_tokens % schedule.seq_len != 0) {
    throw ConfigError("batch_tokens must be a multiple of seq_len");
  }
  CorpusBatcher batcher(&corpus, schedule.seq_len, schedule.batch_tokens / schedule.seq_len,
                        options.data_seed.value_or(ck.seed));
  std::vector<StepMetrics> log;
  while (true) {
    if (ck.step - ck.schedule_origin >= schedule.total_steps()) break;
    if (stop.until_step && ck.step >= *stop.until_step) break;
    if (stop.until_tokens && ck.consumed_tokens >= *stop.until_tokens) break;
    const auto m = train_step(ck, batcher.batch(ck.step), schedule, options.optimizer);
    log.push_back(m);
    if (options.on_step) options.on_step(m);
    if (options.checkpoint_every > 0 && options.checkpoint_dir && ck.step % options.checkpoint_every == 0) {
      save_checkpoint(ck, *options.checkpoint_dir / ("step-" + std::to_string(ck.step)));
    }
  }
  return log;
}

// ---- supervised fine-tuning -----------------------------------------------------

struct SftPreset {
  std::int64_t epochs = 4;
  std::int64_t batch_samples = 128;
  double lr_begin = 2.7e-5;
  double lr_end = 1e-9;
  ScheduleType schedule_type = ScheduleType::kLinear;
  std::int64_t warmup_steps = 0;
  std::uint64_t seed = 0;
};

struct SftReport {
  std::int64_t steps = 0;
  std::int64_t eligible = 0;
  std::vector<std::pair<std::string, std::string>> skipped;  // (id, reason)
  std::vector<double> epoch_mean_loss;
  std::vector<StepMetrics> metrics;
};

inline void to_json(json& j, const SftReport& r) {
  json skipped = json::array();
  for (const auto& [id, why] : r.skipped) skipped.push_back(json{{"id", id}, {"reason", why}});
  j = json{{"steps", r.steps}, {"eligible", r.eligible}, {"skipped", skipped}, {"epoch_mean_loss", r.epoch_mean_loss}};
}

template <Real T>
struct SftOptions {
  OptimizerConfig optimizer;
  std::optional<std::filesystem::path> checkpoint_dir;  // one checkpoint per epoch end
  std::function<void(const StepMetrics&)> on_step;
};

// Epoch-based fine-tuning with the loss restricted to response tokens. Samples that do not
// fit max_seq_len are skipped and listed in the report.
template <Real T>
SftReport sft_run(Checkpoint<T>& ck, const std::vector<InstructSample>& samples, const SftPreset& preset = {},
                  const SftOptions<T>& options = {}) {
  if (samples.empty()) throw ContractError("sft_run needs at least one sample");
  if (preset.epochs < 1 || preset.batch_samples < 1) throw ConfigError("sft epochs and batch size must be >= 1");
  SftReport report;
  std::vector<TrainSequence> encoded;
  for (const auto& s : samples) {
    EncodedSample e = encode_sample(s);
    if (static_cast<std::int64_t>(e.tokens.size()) > ck.config.max_seq_len) {
      report.skipped.emplace_back(s.id, "longer than max_seq_len");
      continue;
    }
    encoded.push_back(TrainSequence{std::move(e.tokens), std::move(e.loss_mask)});
  }
  if (encoded.empty()) throw ContractError("no sample fits max_seq_len");
  report.eligible = static_cast<std::int64_t>(encoded.size());

  const auto n = static_cast<std::int64_t>(encoded.size());
  const std::int64_t per_epoch = (n + preset.batch_samples - 1) / preset.batch_samples;
  const std::int64_t total = per_epoch * preset.epochs;
  std::int64_t local = 0;
  for (std::int64_t epoch = 0; epoch < preset.epochs; ++epoch) {
    std::vector<std::size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(preset.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    for (std::int64_t b = 0; b < per_epoch; ++b) {
      std::vector<TrainSequence> batch;
      for (std::int64_t i = b * preset.batch_samples; i < std::min(n, (b + 1) * preset.batch_samples); ++i) {
        batch.push_back(encoded[order[static_cast<std::size_t>(i)]]);
      }
      const double lr =
          schedule_lr(local, total, preset.warmup_steps, preset.lr_begin, preset.lr_end, preset.schedule_type);
      auto m = train_step_at(ck, batch, lr, lr, options.optimizer);
      ++local;
      loss_sum += m.loss;
      report.metrics.push_back(m);
      if (options.on_step) options.on_step(m);
    }
    report.epoch_mean_loss.push_back(loss_sum / static_cast<double>(per_epoch));
    if (options.checkpoint_dir) save_checkpoint(ck, *options.checkpoint_dir / ("epoch-" + std::to_string(epoch + 1)));
  }
  report.steps = local;
  return report;
}

}  // namespace flmgrow
