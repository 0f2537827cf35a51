#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "flmgrow/flmgrow.hpp"

namespace testutil {

using flmgrow::ModelConfig;
using flmgrow::TokenId;

inline ModelConfig toy_config(std::int64_t layers = 4, std::int64_t hidden = 64, std::int64_t ffn = 176,
                              std::int64_t kv = 16, std::int64_t max_seq = 64) {
  ModelConfig c;
  c.layer_num = layers;
  c.hidden_dim = hidden;
  c.kv_channels = kv;
  c.head_num = hidden / kv;
  c.ffn_dim = ffn;
  c.vocab_size = 258;
  c.max_seq_len = max_seq;
  return c;
}

inline ModelConfig widened(ModelConfig c, std::int64_t hidden, std::int64_t ffn) {
  c.hidden_dim = hidden;
  c.head_num = hidden / c.kv_channels;
  c.ffn_dim = ffn;
  return c;
}

inline ModelConfig deepened(ModelConfig c, std::int64_t layers) {
  c.layer_num = layers;
  return c;
}

template <flmgrow::Real T>
flmgrow::Tensor<T> random_tensor(flmgrow::Shape shape, flmgrow::Rng& rng, double scale = 1.0) {
  flmgrow::Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, scale));
  return t;
}

// Perturbs every parameter so gains and biases are not at their trivial init values.
template <flmgrow::Real T>
void jitter(flmgrow::ModelParams<T>& p, std::uint64_t seed, double scale = 0.05) {
  flmgrow::Rng rng(seed);
  flmgrow::for_each_param(p, [&](const std::string&, flmgrow::Tensor<T>& t) {
    for (auto& v : t.values()) v += static_cast<T>(rng.normal(0.0, scale));
  });
}

inline std::vector<std::vector<TokenId>> probes(std::size_t count, std::size_t len, std::uint64_t seed) {
  return flmgrow::random_sequences(count, len, 258, seed);
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("flmgrow-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) { return flmgrow::detail::read_file(p); }

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  flmgrow::detail::write_file_atomic(p, text);
}

}  // namespace testutil
