#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flmgrow/config.hpp"
#include "flmgrow/mask.hpp"
#include "flmgrow/model.hpp"
#include "flmgrow/plan.hpp"
#include "flmgrow/rng.hpp"

namespace flmgrow {

inline constexpr int kCheckpointFormatVersion = 1;

template <Real T>
inline constexpr const char* dtype_name = std::is_same_v<T, float> ? "f32" : "f64";

// Adam moments, shaped exactly like the parameters.
template <Real T>
struct OptimizerState {
  ModelParams<T> m;
  ModelParams<T> v;
  std::int64_t step = 0;
};

template <Real T>
struct Checkpoint {
  ModelConfig config;
  ModelParams<T> params;
  OptimizerState<T> optimizer;
  std::optional<MaskState> mask;
  std::vector<GrowthRecord> history;
  std::int64_t step = 0;
  std::int64_t consumed_tokens = 0;
  std::int64_t schedule_origin = 0;  // global step at which the current LR schedule began
  std::uint64_t seed = 0;
  std::uint64_t rng_draws = 0;

  const MaskState* mask_ptr() const { return mask ? &*mask : nullptr; }
};

template <Real T>
Checkpoint<T> make_checkpoint(const ModelConfig& config, std::uint64_t seed) {
  Checkpoint<T> ck;
  ck.config = config;
  Rng rng(seed);
  ck.params = init_params<T>(config, rng);
  ck.optimizer.m = zero_params<T>(config);
  ck.optimizer.v = zero_params<T>(config);
  ck.seed = seed;
  ck.rng_draws = rng.draws();
  return ck;
}

template <Real T>
bool bit_equal(const Checkpoint<T>& a, const Checkpoint<T>& b) {
  return a.config == b.config && a.mask == b.mask && a.history == b.history && a.step == b.step &&
         a.consumed_tokens == b.consumed_tokens && a.schedule_origin == b.schedule_origin && a.seed == b.seed &&
         a.rng_draws == b.rng_draws && a.optimizer.step == b.optimizer.step && bit_equal(a.params, b.params) &&
         bit_equal(a.optimizer.m, b.optimizer.m) && bit_equal(a.optimizer.v, b.optimizer.v);
}

// ---- on-disk layout -------------------------------------------------------------
//   <dir>/manifest.json
//   <dir>/params/<path>.bin
//   <dir>/optim/m/<path>.bin, <dir>/optim/v/<path>.bin
// Every file is written to a temporary name and renamed into place.

namespace detail {

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

template <Real T>
void save_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  write_file_atomic(path, os.str());
}

template <Real T>
Tensor<T> load_tensor_file(const std::filesystem::path& path, const Shape& expected) {
  std::istringstream is(read_file(path), std::ios::binary);
  Tensor<T> t = read_tensor<T>(is);
  if (t.shape() != expected) {
    throw IoError(path.string() + ": shape " + shape_string(t.shape()) + " expected " + shape_string(expected));
  }
  return t;
}

inline json parse_json(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(where + ": " + e.what());
  }
}

}  // namespace detail

inline json read_json_file(const std::filesystem::path& path) {
  return detail::parse_json(detail::read_file(path), path.string());
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  detail::write_file_atomic(path, j.dump(2) + "\n");
}

template <Real T>
json checkpoint_manifest(const Checkpoint<T>& ck) {
  json tensors = json::array();
  for_each_param(ck.params, [&](const std::string& path, const Tensor<T>& t) {
    tensors.push_back(json{{"path", path}, {"shape", t.shape()}});
  });
  return json{{"format_version", kCheckpointFormatVersion},
              {"dtype", dtype_name<T>},
              {"config", ck.config},
              {"param_count", count_params(ck.config)},
              {"step", ck.step},
              {"consumed_tokens", ck.consumed_tokens},
              {"schedule_origin", ck.schedule_origin},
              {"rng", {{"seed", ck.seed}, {"draws", ck.rng_draws}}},
              {"mask_state", ck.mask ? json(*ck.mask) : json(nullptr)},
              {"growth_history", ck.history},
              {"optimizer", {{"step", ck.optimizer.step}}},
              {"tensors", tensors}};
}

template <Real T>
void save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& dir) {
  try {
    for_each_param(ck.params, [&](const std::string& path, const Tensor<T>& t) {
      detail::save_tensor_file(dir / "params" / (path + ".bin"), t);
    });
    for_each_param(ck.optimizer.m, [&](const std::string& path, const Tensor<T>& t) {
      detail::save_tensor_file(dir / "optim" / "m" / (path + ".bin"), t);
    });
    for_each_param(ck.optimizer.v, [&](const std::string& path, const Tensor<T>& t) {
      detail::save_tensor_file(dir / "optim" / "v" / (path + ".bin"), t);
    });
    // Tensors from a deeper previous save would otherwise linger.
    for (const char* sub : {"params", "optim/m", "optim/v"}) {
      for (const auto& entry : std::filesystem::directory_iterator(dir / sub)) {
        const std::string name = entry.path().filename().string();
        if (!name.starts_with("layers.")) continue;
        const auto layer = std::stoll(name.substr(7, name.find('.', 7) - 7));
        if (layer >= ck.config.layer_num) std::filesystem::remove(entry.path());
      }
    }
    write_json_file(dir / "manifest.json", checkpoint_manifest(ck));
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(e.what());
  }
}

inline std::string checkpoint_dtype(const std::filesystem::path& dir) {
  return read_json_file(dir / "manifest.json").at("dtype").get<std::string>();
}

template <Real T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  const json m = read_json_file(dir / "manifest.json");
  try {
    if (m.at("format_version").get<int>() != kCheckpointFormatVersion) throw IoError("unsupported checkpoint version");
    if (m.at("dtype").get<std::string>() != dtype_name<T>) {
      throw IoError("checkpoint dtype is " + m.at("dtype").get<std::string>() + ", requested " + dtype_name<T>);
    }
    Checkpoint<T> ck;
    ck.config = m.at("config").get<ModelConfig>();
    validate(ck.config);
    ck.step = m.at("step").get<std::int64_t>();
    ck.consumed_tokens = m.at("consumed_tokens").get<std::int64_t>();
    ck.schedule_origin = m.at("schedule_origin").get<std::int64_t>();
    ck.seed = m.at("rng").at("seed").get<std::uint64_t>();
    ck.rng_draws = m.at("rng").at("draws").get<std::uint64_t>();
    if (!m.at("mask_state").is_null()) {
      ck.mask = m.at("mask_state").get<MaskState>();
      check_mask_state(*ck.mask, ck.config);
    }
    ck.history = m.at("growth_history").get<std::vector<GrowthRecord>>();
    ck.optimizer.step = m.at("optimizer").at("step").get<std::int64_t>();

    ck.params = zero_params<T>(ck.config);
    ck.optimizer.m = zero_params<T>(ck.config);
    ck.optimizer.v = zero_params<T>(ck.config);
    for_each_param(ck.params, [&](const std::string& path, Tensor<T>& t) {
      t = detail::load_tensor_file<T>(dir / "params" / (path + ".bin"), t.shape());
    });
    for_each_param(ck.optimizer.m, [&](const std::string& path, Tensor<T>& t) {
      t = detail::load_tensor_file<T>(dir / "optim" / "m" / (path + ".bin"), t.shape());
    });
    for_each_param(ck.optimizer.v, [&](const std::string& path, Tensor<T>& t) {
      t = detail::load_tensor_file<T>(dir / "optim" / "v" / (path + ".bin"), t.shape());
    });
    if (allocated_scalars(ck.params) != count_params(ck.config)) {
      throw IoError("stored scalar count does not match config");
    }
    return ck;
  } catch (const json::exception& e) {
    throw IoError(dir.string() + "/manifest.json: " + e.what());
  }
}

}  // namespace flmgrow
