#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "flmgrow/config.hpp"
#include "flmgrow/error.hpp"
#include "flmgrow/growth.hpp"

namespace flmgrow {

struct MetricsPoint {
  std::int64_t step = 0;
  std::int64_t tokens = 0;
  double loss = 0.0;
  double lr_vector = 0.0;
  double lr_matrix = 0.0;
  double mask = 1.0;
};

// Parses one metrics log (one JSON object per line). Blank lines are ignored.
inline std::vector<MetricsPoint> read_metrics(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<MetricsPoint> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      MetricsPoint p;
      p.step = j.at("step").get<std::int64_t>();
      p.tokens = j.at("tokens").get<std::int64_t>();
      p.loss = j.at("loss").get<double>();
      p.lr_vector = j.at("lr_vector").get<double>();
      p.lr_matrix = j.at("lr_matrix").get<double>();
      p.mask = j.at("mask").get<double>();
      out.push_back(p);
    } catch (const json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": malformed metrics line: " + e.what());
    }
  }
  return out;
}

struct GrowthMarker {
  std::int64_t step = 0;
  std::size_t index = 0;  // position in the merged series
};

struct MetricsSummary {
  std::vector<MetricsPoint> series;
  std::vector<GrowthMarker> growth_events;
  std::vector<std::pair<std::string, LayerDistanceStats>> distance_tables;
};

// A growth event shows up as the mask falling back (to 0) between consecutive points.
inline MetricsSummary summarize_metrics(std::vector<MetricsPoint> series) {
  if (series.empty()) throw InputError("metrics series is empty");
  MetricsSummary s;
  for (std::size_t i = 1; i < series.size(); ++i) {
    if (series[i].mask < series[i - 1].mask) s.growth_events.push_back({series[i].step, i});
  }
  s.series = std::move(series);
  return s;
}

inline MetricsSummary summarize_metrics_files(const std::vector<std::filesystem::path>& files) {
  if (files.empty()) throw InputError("report needs at least one metrics file");
  std::vector<MetricsPoint> all;
  for (const auto& f : files) {
    auto part = read_metrics(f);
    all.insert(all.end(), part.begin(), part.end());
  }
  return summarize_metrics(std::move(all));
}

inline void to_json(json& j, const MetricsSummary& s) {
  json series = json::object();
  for (const char* key : {"step", "tokens", "loss", "lr_vector", "lr_matrix", "mask"}) series[key] = json::array();
  for (const auto& p : s.series) {
    series["step"].push_back(p.step);
    series["tokens"].push_back(p.tokens);
    series["loss"].push_back(p.loss);
    series["lr_vector"].push_back(p.lr_vector);
    series["lr_matrix"].push_back(p.lr_matrix);
    series["mask"].push_back(p.mask);
  }
  json events = json::array();
  for (const auto& e : s.growth_events) events.push_back(json{{"step", e.step}, {"index", e.index}});
  json tables = json::array();
  for (const auto& [name, stats] : s.distance_tables) {
    json rows = json::array();
    for (std::size_t l = 0; l < stats.layers.size(); ++l) {
      rows.push_back(json{{"layer", l},
                          {"mean_euclidean", stats.layers[l].mean_euclidean},
                          {"mean_cosine", stats.layers[l].mean_cosine}});
    }
    tables.push_back(json{{"source", name}, {"sample_count", stats.sample_count}, {"layers", rows}});
  }
  j = json{{"points", s.series.size()}, {"series", series}, {"growth_events", events}, {"distance_tables", tables}};
}

}  // namespace flmgrow
