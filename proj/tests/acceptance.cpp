// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "support/helpers.hpp"
#include "support/oracle.hpp"

using namespace flmgrow;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

template <Real T>
Checkpoint<T> trained_like(const ModelConfig& c, std::uint64_t seed) {
  auto ck = make_checkpoint<T>(c, seed);
  testutil::jitter(ck.params, seed + 1, 0.05);
  return ck;
}

GrowthPlan toy_plan(const ModelConfig& target) {
  GrowthPlan p;
  p.target = target;
  p.transition_steps = 100;
  p.seed = 11;
  return p;
}

// ---- criteria ---------------------------------------------------------------------

Outcome param_counts() {
  const std::vector<std::pair<std::string, double>> want{{"52B", 52.85e9}, {"102B", 102.3e9}, {"1T", 1083.74e9}};
  Outcome o{true, ""};
  for (const auto& [name, target] : want) {
    const double got = static_cast<double>(count_params(stage_preset(name).model));
    const double rel = std::abs(got - target) / target;
    o.pass = o.pass && rel <= 0.002;
    o.detail += name + "=" + std::to_string(static_cast<std::int64_t>(got)) + " (rel " + fmt(rel) + ") ";
  }
  return o;
}

template <Real T>
double width_diff() {
  const auto c = testutil::toy_config();
  const auto pre = trained_like<T>(c, 20);
  const auto post = grow(pre, toy_plan(testutil::widened(c, 96, 256)), {}).checkpoint;
  return verify_function_preservation(pre, post, testutil::probes(32, 64, 21)).max_abs_diff;
}

template <Real T>
double depth_diff() {
  const auto c = testutil::toy_config();
  const auto pre = trained_like<T>(c, 22);
  const auto post = grow(pre, toy_plan(testutil::deepened(c, 6)), testutil::probes(8, 64, 23)).checkpoint;
  return verify_function_preservation(pre, post, testutil::probes(32, 64, 24)).max_abs_diff;
}

Outcome width_preservation() {
  const double d64 = width_diff<double>(), d32 = width_diff<float>();
  return {d64 <= 1e-10 && d32 <= 1e-5, "f64 max|diff| " + fmt(d64) + ", f32 max|diff| " + fmt(d32)};
}

Outcome depth_preservation() {
  const double d64 = depth_diff<double>(), d32 = depth_diff<float>();
  return {d64 <= 1e-10 && d32 <= 1e-5, "f64 max|diff| " + fmt(d64) + ", f32 max|diff| " + fmt(d32)};
}

Outcome mask_exactness() {
  const GrowthTransition t{300, 200};
  const bool ramp = mask_value(300, t) == 0.0 && mask_value(500, t) == 1.0 && mask_value(400, t) == 0.5;
  const auto c = testutil::toy_config();
  auto target = testutil::widened(c, 96, 256);
  target.layer_num = 6;
  auto post = grow(trained_like<double>(c, 25), toy_plan(target), testutil::probes(8, 64, 26)).checkpoint;
  post.mask->mask = 1.0;
  bool identical = true;
  for (const auto& p : testutil::probes(8, 64, 27)) {
    identical = identical &&
                forward(post.params, post.config, p, post.mask_ptr()).bit_equal(forward(post.params, post.config, p));
  }
  return {ramp && identical, std::string("ramp endpoints ") + (ramp ? "exact" : "WRONG") +
                                 ", mask=1 forward " + (identical ? "bit-identical" : "differs")};
}

Outcome selection_oracle() {
  Rng rng(28);
  int mismatches = 0, ties = 0, saturated = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t L = 1 + rng.below(8);
    std::vector<double> dist(L);
    const bool coarse = trial % 2 == 0;
    for (auto& d : dist) d = coarse ? static_cast<double>(rng.below(3)) : rng.uniform();
    const auto n = static_cast<std::int64_t>(1 + rng.below(2 * L));
    LayerDistanceStats s;
    for (double d : dist) s.layers.push_back({d, 0.0});
    std::vector<std::int64_t> got;
    for (const auto& src : select_source_layers(s, n)) got.push_back(src.source_layer);
    if (got != oracle::brute_force_select(dist, n)) ++mismatches;
    std::vector<double> sorted = dist;
    std::sort(sorted.begin(), sorted.end());
    ties += std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end();
    saturated += n > static_cast<std::int64_t>(L);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {mismatches == 0 && secs < 10.0, std::to_string(mismatches) + " mismatches / 1000 (" +
                                              std::to_string(ties) + " with ties, " + std::to_string(saturated) +
                                              " needing second copies), " + fmt(secs) + " s"};
}

Outcome gradients() {
  const auto c = testutil::toy_config(2, 32, 88, 16, 16);
  auto params = trained_like<double>(c, 29).params;
  testutil::jitter(params, 30, 0.1);
  const auto tokens = testutil::probes(1, 8, 31)[0];
  Tape<double> tape;
  const auto vars = bind_params(tape, params);
  auto [sum, n] = sequence_nll_on_tape(tape, vars, c, tokens, nullptr, nullptr);
  const Var loss = ag::scale(tape, sum, 1.0 / static_cast<double>(n));
  tape.backward(loss);
  ModelParams<double> grads = zero_params<double>(c);
  for_each_param_pair(grads, vars, [&](const std::string&, Tensor<double>& g, const Var& v) {
    if (tape.has_grad(v)) g = tape.grad(v);
  });
  const auto t0 = std::chrono::steady_clock::now();
  const auto check = oracle::check_gradients(params, grads, [&] { return lm_loss(params, c, tokens); });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {check.max_rel_error < 1e-4 && check.checked == static_cast<std::size_t>(count_params(c)) && secs < 300,
          std::to_string(check.checked) + " scalars, max rel error " + fmt(check.max_rel_error) + " at " +
              check.worst + ", " + fmt(secs) + " s"};
}

// Mean next-token NLL over fixed held-out windows.
template <Real T>
double eval_nll(const Checkpoint<T>& ck, const std::vector<std::vector<TokenId>>& windows) {
  double s = 0;
  for (const auto& w : windows) s += lm_loss(ck.params, ck.config, w, nullptr, ck.mask_ptr());
  return s / static_cast<double>(windows.size());
}

double stddev(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

double window_mean(const std::vector<double>& v, std::size_t from, std::size_t count) {
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(from),
                         v.begin() + static_cast<std::ptrdiff_t>(from + count), 0.0) /
         static_cast<double>(count);
}

Outcome staged_growth() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string text = oracle::synthetic_corpus(1 << 20, 32);
  const auto corpus = tokenize_bytes(text);
  const auto heldout = corpus_windows(tokenize_bytes(oracle::synthetic_corpus(64 * 32, 33)), 64, 32);
  const auto probes = corpus_windows(corpus, 64, 8);

  const std::vector<std::string> stages{"toy-52", "toy-102", "toy-1T"};
  auto ck = make_checkpoint<float>(stage_preset(stages[0]).model, 0);
  std::vector<double> losses;
  bool ok = true;
  std::ostringstream detail;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto preset = stage_preset(stages[s]);
    if (preset.growth) ck = grow(std::move(ck), *preset.growth, probes).checkpoint;
    const std::size_t first = losses.size();
    const double start = eval_nll(ck, heldout);
    const auto log = train_run(ck, corpus, preset.schedule, {});
    for (const auto& m : log) losses.push_back(m.loss);
    const double end = eval_nll(ck, heldout);
    const bool fell = end < start;
    ok = ok && fell && log.size() == 300;
    detail << stages[s] << ": held-out " << fmt(start) << "->" << fmt(end) << ", train mean(first 20) "
           << fmt(window_mean(losses, first, 20)) << " mean(last 20) " << fmt(window_mean(losses, losses.size() - 20, 20));
    if (s > 0) {
      std::vector<double> diffs;
      for (std::size_t i = first - 50; i < first; ++i) diffs.push_back(losses[i] - losses[i - 1]);
      const double jump = std::abs(losses[first] - losses[first - 1]);
      const double bound = 3.0 * stddev(diffs);
      ok = ok && jump <= bound;
      detail << ", jump " << fmt(jump) << " <= " << fmt(bound) << (jump <= bound ? "" : " VIOLATED");
    }
    detail << "; ";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail << fmt(secs) << " s";
  return {ok && secs < 1800, detail.str()};
}

Outcome perplexity_filter() {
  auto ck = trained_like<float>(testutil::toy_config(), 34);
  Rng rng(35);
  std::vector<InstructSample> samples;
  for (int i = 0; i < 200; ++i) {
    std::string r;
    for (std::size_t k = 0, n = 1 + rng.below(24); k < n; ++k) r.push_back(static_cast<char>('a' + rng.below(26)));
    samples.push_back({"s" + std::to_string(i), "prompt " + std::to_string(i % 7), r, std::nullopt});
  }
  const auto report = filter_lowest_ppl(samples, ck, 0.5).second;
  std::vector<double> ppl;
  for (const auto& [id, p] : report.perplexities) ppl.push_back(p);
  std::vector<std::string> want;
  for (std::size_t i : oracle::sort_and_slice(ppl, 0.5)) want.push_back(samples[i].id);
  const bool same = report.kept_ids == want;

  auto uniform = make_checkpoint<double>(testutil::toy_config(), 36);
  uniform.params.lm_head.fill(0.0);
  const double u = *response_perplexity(uniform, samples[0]);
  const bool flat = std::abs(u - 258.0) <= 1e-6;
  return {same && flat, std::string("kept set ") + (same ? "matches" : "differs from") + " sort oracle (" +
                            std::to_string(report.kept) + " kept), uniform ppl " + fmt(u)};
}

Outcome schedule_preset() {
  const auto s = stage_preset("102B").schedule;
  const std::int64_t end = s.total_steps();
  const double v0 = lr_at(s.warmup_steps, s, ParamGroup::kVector), m0 = lr_at(s.warmup_steps, s, ParamGroup::kMatrix);
  const double v1 = lr_at(end, s, ParamGroup::kVector), m1 = lr_at(end, s, ParamGroup::kMatrix);
  const bool ok = v0 == 2.740e-5 && m0 == 2.191e-5 && v1 == 1.370e-6 && m1 == 1.096e-6;
  return {ok, "warmup end " + fmt(v0) + "/" + fmt(m0) + ", step " + std::to_string(end) + " " + fmt(v1) + "/" +
                  fmt(m1)};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = testutil::read_bytes(e.path());
  }
  return out;
}

Outcome determinism() {
  testutil::TempDir dir("accept-det");
  const auto corpus = tokenize_bytes(oracle::synthetic_corpus(1 << 16, 37));
  auto schedule = stage_preset("toy-52").schedule;
  auto run = [&](const fs::path& out, std::optional<std::int64_t> stop_at) {
    auto ck = make_checkpoint<float>(stage_preset("toy-52").model, 38);
    std::string metrics;
    TrainRunOptions<float> opt;
    opt.on_step = [&](const StepMetrics& m) { metrics += metrics_json(m).dump() + "\n"; };
    train_run(ck, corpus, schedule, StopCondition{stop_at.value_or(20), std::nullopt}, opt);
    save_checkpoint(ck, out);
    return metrics;
  };
  const auto ma = run(dir / "a", std::nullopt);
  const auto mb = run(dir / "b", std::nullopt);
  const bool repeat = ma == mb && snapshot(dir / "a") == snapshot(dir / "b");

  const auto loaded = load_checkpoint<float>(dir / "a");
  save_checkpoint(loaded, dir / "a2");
  const bool round_trip = snapshot(dir / "a") == snapshot(dir / "a2");

  run(dir / "half", 10);
  auto resumed = load_checkpoint<float>(dir / "half");
  std::string tail;
  TrainRunOptions<float> opt;
  opt.on_step = [&](const StepMetrics& m) { tail += metrics_json(m).dump() + "\n"; };
  train_run(resumed, corpus, schedule, StopCondition{20, std::nullopt}, opt);
  save_checkpoint(resumed, dir / "resumed");
  const std::size_t cut = [&] {
    std::size_t pos = 0;
    for (int i = 0; i < 10; ++i) pos = ma.find('\n', pos) + 1;
    return pos;
  }();
  const bool resume = snapshot(dir / "resumed") == snapshot(dir / "a") && ma.substr(cut) == tail;
  return {repeat && round_trip && resume, std::string("repeat ") + (repeat ? "identical" : "differs") +
                                              ", save/load/save " + (round_trip ? "identical" : "differs") +
                                              ", resume " + (resume ? "bit-exact" : "differs")};
}

Outcome sft_conformance() {
  const SftPreset p = sft_preset();
  const bool defaults = p.epochs == 4 && p.batch_samples == 128 && p.lr_begin == 2.7e-5 && p.lr_end == 1e-9 &&
                        p.schedule_type == ScheduleType::kLinear;
  auto ck = make_checkpoint<float>(stage_preset("toy-52").model, 39);
  const InstructSample s{"only", "Which planet is red? ", "Mars.", std::nullopt};
  SftPreset fit;
  fit.epochs = 200;
  fit.batch_samples = 1;
  fit.lr_begin = 3e-3;
  fit.lr_end = 3e-4;
  const auto report = sft_run(ck, {s}, fit);
  const auto e = encode_sample(s);
  const double nll = lm_loss(ck.params, ck.config, e.tokens, &e.loss_mask);
  return {defaults && nll < 0.1 && report.steps <= 200,
          std::string("defaults ") + (defaults ? "match" : "differ") + ", response NLL after " +
              std::to_string(report.steps) + " steps " + fmt(nll)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 parameter counts", param_counts},
      {"2 width-growth preservation", width_preservation},
      {"3 depth-growth preservation", depth_preservation},
      {"4 mask schedule exactness", mask_exactness},
      {"5 layer-selection oracle", selection_oracle},
      {"6 gradient correctness", gradients},
      {"7 staged-growth continuity", staged_growth},
      {"8 perplexity filter", perplexity_filter},
      {"9 schedule presets", schedule_preset},
      {"10 determinism and checkpointing", determinism},
      {"11 sft preset conformance", sft_conformance},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
