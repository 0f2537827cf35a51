#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flmgrow/checkpoint.hpp"
#include "flmgrow/model.hpp"
#include "flmgrow/parallel.hpp"
#include "flmgrow/rng.hpp"

namespace flmgrow {

// ---- byte-level tokenizer ---------------------------------------------------------

inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr std::int64_t kByteVocabSize = 258;

inline std::vector<TokenId> tokenize_bytes(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

// [BOS, bytes..., EOS]
inline std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size() + 2);
  ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(c);
  ids.push_back(kEos);
  return ids;
}

// Inverse of tokenize; BOS/EOS markers are dropped.
inline std::string detokenize(const std::vector<TokenId>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 256) {
      out.push_back(static_cast<char>(id));
    } else if (id != kBos && id != kEos) {
      throw InputError("token id " + std::to_string(id) + " is not a byte token");
    }
  }
  return out;
}

// ---- instruct samples -----------------------------------------------------------

struct InstructSample {
  std::string id;
  std::string prompt;
  std::string response;
  std::optional<std::string> domain;

  bool operator==(const InstructSample&) const = default;
};

inline void to_json(json& j, const InstructSample& s) {
  j = json{{"id", s.id}, {"prompt", s.prompt}, {"response", s.response}};
  j["domain"] = s.domain ? json(*s.domain) : json(nullptr);
}

inline void from_json(const json& j, InstructSample& s) {
  s.id = j.at("id").get<std::string>();
  s.prompt = j.at("prompt").get<std::string>();
  s.response = j.at("response").get<std::string>();
  if (s.response.empty()) throw InputError("sample " + s.id + " has an empty response");
  if (j.contains("domain") && !j.at("domain").is_null()) s.domain = j.at("domain").get<std::string>();
}

inline std::vector<InstructSample> read_samples(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<InstructSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line).get<InstructSample>());
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::string samples_to_jsonl(const std::vector<InstructSample>& samples) {
  std::string out;
  for (const auto& s : samples) out += json(s).dump() + "\n";
  return out;
}

// Plain concatenation [BOS] prompt response [EOS]; the loss mask selects predictions of
// response bytes and the closing EOS.
struct EncodedSample {
  std::vector<TokenId> tokens;
  std::vector<bool> loss_mask;  // length tokens.size() - 1
};

inline EncodedSample encode_sample(const InstructSample& s) {
  if (s.response.empty()) throw InputError("sample " + s.id + " has an empty response");
  EncodedSample e;
  e.tokens.push_back(kBos);
  for (unsigned char c : s.prompt) e.tokens.push_back(c);
  const std::size_t first_response = e.tokens.size();
  for (unsigned char c : s.response) e.tokens.push_back(c);
  e.tokens.push_back(kEos);
  e.loss_mask.assign(e.tokens.size() - 1, false);
  for (std::size_t t = first_response - 1; t < e.loss_mask.size(); ++t) e.loss_mask[t] = true;
  return e;
}

// exp(mean NLL over response positions), conditioning on the prompt. nullopt when the
// encoded sample does not fit max_seq_len.
template <Real T>
std::optional<double> response_perplexity(const Checkpoint<T>& ck, const InstructSample& sample) {
  const EncodedSample e = encode_sample(sample);
  if (static_cast<std::int64_t>(e.tokens.size()) > ck.config.max_seq_len) return std::nullopt;
  const T nll = lm_loss(ck.params, ck.config, e.tokens, &e.loss_mask, ck.mask_ptr());
  return std::exp(static_cast<double>(nll));
}

struct CurationReport {
  std::int64_t total = 0;
  std::int64_t eligible = 0;
  std::int64_t kept = 0;
  double fraction = 0.5;
  std::vector<std::pair<std::string, double>> perplexities;  // eligible samples, input order
  std::vector<std::pair<std::string, std::string>> skipped;  // (id, reason)
  std::vector<std::string> kept_ids;                          // input order
};

inline void to_json(json& j, const CurationReport& r) {
  json ppl = json::array();
  for (const auto& [id, p] : r.perplexities) ppl.push_back(json{{"id", id}, {"ppl", p}});
  json skipped = json::array();
  for (const auto& [id, why] : r.skipped) skipped.push_back(json{{"id", id}, {"reason", why}});
  j = json{{"total", r.total},   {"eligible", r.eligible},   {"kept", r.kept},        {"fraction", r.fraction},
           {"kept_ids", r.kept_ids}, {"perplexities", ppl}, {"skipped", skipped}};
}

// floor(n · fraction), guarded against representation error in the product.
inline std::int64_t kept_count(std::int64_t n, double fraction) {
  return static_cast<std::int64_t>(std::floor(static_cast<double>(n) * fraction + 1e-9));
}

// Indices of the floor(n · fraction) lowest scores, in input order. Ties keep input order.
inline std::vector<std::size_t> lowest_fraction(const std::vector<double>& scores, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("fraction must lie in (0, 1]");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  order.resize(static_cast<std::size_t>(kept_count(static_cast<std::int64_t>(scores.size()), fraction)));
  std::sort(order.begin(), order.end());
  return order;
}

// Keeps the floor(eligible · fraction) samples with the lowest response perplexity.
// Ties keep input order. Kept samples are returned in input order.
template <Real T>
std::pair<std::vector<InstructSample>, CurationReport> filter_lowest_ppl(const std::vector<InstructSample>& samples,
                                                                         const Checkpoint<T>& ck,
                                                                         double fraction = 0.5) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("fraction must lie in (0, 1]");
  std::vector<std::optional<double>> scores(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { scores[i] = response_perplexity(ck, samples[i]); });

  CurationReport report;
  report.total = static_cast<std::int64_t>(samples.size());
  report.fraction = fraction;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (scores[i]) {
      eligible.push_back(i);
      report.perplexities.emplace_back(samples[i].id, *scores[i]);
    } else {
      report.skipped.emplace_back(samples[i].id, "longer than max_seq_len");
    }
  }
  if (eligible.empty()) throw ContractError("no eligible samples to curate");
  report.eligible = static_cast<std::int64_t>(eligible.size());

  std::vector<double> eligible_scores;
  for (std::size_t i : eligible) eligible_scores.push_back(*scores[i]);
  std::vector<InstructSample> kept;
  for (std::size_t e : lowest_fraction(eligible_scores, fraction)) {
    const std::size_t i = eligible[e];
    kept.push_back(samples[i]);
    report.kept_ids.push_back(samples[i].id);
  }
  report.kept = static_cast<std::int64_t>(kept.size());
  return {std::move(kept), std::move(report)};
}

// Whole file as byte tokens (no BOS/EOS), for pre-training corpora.
inline std::vector<TokenId> load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open corpus " + path.string());
  const std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return tokenize_bytes(text);
}

// Uniform random token sequences, for verification and distance probes.
inline std::vector<std::vector<TokenId>> random_sequences(std::size_t count, std::size_t length, std::int64_t vocab,
                                                          std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<TokenId>> out(count, std::vector<TokenId>(length));
  for (auto& seq : out) {
    for (auto& t : seq) t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab)));
  }
  return out;
}

// Up to `count` non-overlapping windows of `length` tokens, evenly spaced over the corpus.
inline std::vector<std::vector<TokenId>> corpus_windows(const std::vector<TokenId>& corpus, std::size_t length,
                                                        std::size_t count) {
  if (length == 0 || corpus.size() < length) throw InputError("corpus shorter than one probe window");
  const std::size_t windows = corpus.size() / length;
  const std::size_t n = std::min(count, windows);
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t start = (i * windows / n) * length;
    out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                     corpus.begin() + static_cast<std::ptrdiff_t>(start + length));
  }
  return out;
}

}  // namespace flmgrow
