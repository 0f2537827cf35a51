#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flmgrow/config.hpp"
#include "flmgrow/error.hpp"

namespace flmgrow {

struct DepthSource {
  std::int64_t source_layer = 0;
  std::int64_t insert_after = 0;  // index in the pre-growth layer list

  bool operator==(const DepthSource&) const = default;
};

struct GrowthPlan {
  ModelConfig target;
  double width_init_std = 0.004;
  std::string width_init = "normal";
  bool distance_based = true;
  std::vector<DepthSource> depth_sources;  // used when !distance_based
  std::int64_t transition_steps = 2000;
  std::uint64_t seed = 0;

  bool operator==(const GrowthPlan&) const = default;
};

// One applied growth event: the plan with depth sources resolved to an explicit list,
// the architecture it started from, and the step at which it was applied.
struct GrowthRecord {
  ModelConfig source;
  GrowthPlan plan;
  std::int64_t step = 0;

  bool operator==(const GrowthRecord&) const = default;
};

inline void to_json(json& j, const DepthSource& s) {
  j = json{{"source_layer", s.source_layer}, {"insert_after", s.insert_after}};
}

inline void from_json(const json& j, DepthSource& s) {
  s.source_layer = j.at("source_layer").get<std::int64_t>();
  s.insert_after = j.contains("insert_after") ? j.at("insert_after").get<std::int64_t>() : s.source_layer;
}

inline void to_json(json& j, const GrowthPlan& p) {
  j = json{{"target", p.target},
           {"width_init_std", p.width_init_std},
           {"width_init", p.width_init},
           {"depth_sources", p.distance_based ? json("distance-based") : json(p.depth_sources)},
           {"transition_steps", p.transition_steps},
           {"seed", p.seed}};
}

inline void from_json(const json& j, GrowthPlan& p) {
  GrowthPlan d;
  p.target = j.at("target").get<ModelConfig>();
  p.width_init_std = j.value("width_init_std", d.width_init_std);
  p.width_init = j.value("width_init", d.width_init);
  if (p.width_init != "normal") throw PlanError("unsupported width_init '" + p.width_init + "'");
  const json src = j.value("depth_sources", json("distance-based"));
  if (src.is_string()) {
    if (src.get<std::string>() != "distance-based") {
      throw PlanError("depth_sources must be \"distance-based\" or a list of {source_layer, insert_after}");
    }
    p.distance_based = true;
    p.depth_sources.clear();
  } else {
    p.distance_based = false;
    p.depth_sources = src.get<std::vector<DepthSource>>();
  }
  p.transition_steps = j.value("transition_steps", d.transition_steps);
  p.seed = j.value("seed", d.seed);
}

inline void to_json(json& j, const GrowthRecord& r) {
  j = json{{"step", r.step}, {"source", r.source}, {"plan", r.plan}};
}

inline void from_json(const json& j, GrowthRecord& r) {
  r.step = j.at("step").get<std::int64_t>();
  r.source = j.at("source").get<ModelConfig>();
  r.plan = j.at("plan").get<GrowthPlan>();
}

}  // namespace flmgrow
