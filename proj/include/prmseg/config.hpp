#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "prmseg/network.hpp"
#include "prmseg/trainer.hpp"

namespace prmseg {

struct CorpusConfig {
  int classes = 10;
  int per_class = 40;
  int64_t grid = 32;
};

// The merged, fully-resolved run configuration. CLI flags override file
// values; the effective document is echoed into every output directory.
struct RunConfig {
  NetworkConfig network;
  TrainerConfig trainer;
  CorpusConfig corpus;
  uint64_t seed = 1;
  int threads = 0;  // 0 = hardware default
  std::string dtype = "f32";
  bool deterministic = false;
  int unseen_class = -1;  // -1 = highest class id
  int n_eval = 10;
  int repeats = 3;
};

namespace cfgio {

using json = nlohmann::ordered_json;

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw ConfigError("config: unknown key '" + key + "' in " + where);
  }
}

inline json to_json(const NetworkConfig& c) {
  return json{{"levels", c.levels},
              {"base_channels", c.base_channels},
              {"neighbor_pyramid", c.neighbor_pyramid},
              {"prm_count", c.prm_count},
              {"sharing", sharing_label(c.sharing)},
              {"patch", c.patch}};
}

inline NetworkConfig network_from_json(const json& j) {
  check_keys(j, {"levels", "base_channels", "neighbor_pyramid", "prm_count", "sharing", "patch"},
             "network");
  NetworkConfig c;
  if (j.contains("levels")) c.levels = j["levels"].get<int>();
  if (j.contains("base_channels")) c.base_channels = j["base_channels"].get<int64_t>();
  if (j.contains("neighbor_pyramid")) c.neighbor_pyramid = j["neighbor_pyramid"].get<std::vector<int>>();
  if (j.contains("prm_count")) c.prm_count = j["prm_count"].get<int>();
  if (j.contains("sharing")) c.sharing = parse_sharing(j["sharing"].get<std::string>());
  if (j.contains("patch")) c.patch = j["patch"].get<int64_t>();
  return c;
}

inline json to_json(const TrainerConfig& c) {
  return json{{"steps", c.steps},         {"batch", c.batch},
              {"lr_max", c.lr_max},       {"lr_min", c.lr_min},
              {"weight_decay", c.weight_decay}, {"val_every", c.val_every},
              {"distinct_classes", c.distinct_classes}};
}

inline TrainerConfig trainer_from_json(const json& j) {
  check_keys(j, {"steps", "batch", "lr_max", "lr_min", "weight_decay", "val_every",
                 "distinct_classes"},
             "trainer");
  TrainerConfig c;
  if (j.contains("steps")) c.steps = j["steps"].get<int64_t>();
  if (j.contains("batch")) c.batch = j["batch"].get<int>();
  if (j.contains("lr_max")) c.lr_max = j["lr_max"].get<double>();
  if (j.contains("lr_min")) c.lr_min = j["lr_min"].get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("val_every")) c.val_every = j["val_every"].get<int64_t>();
  if (j.contains("distinct_classes")) c.distinct_classes = j["distinct_classes"].get<bool>();
  return c;
}

inline json to_json(const CorpusConfig& c) {
  return json{{"classes", c.classes}, {"per_class", c.per_class}, {"grid", c.grid}};
}

inline CorpusConfig corpus_from_json(const json& j) {
  check_keys(j, {"classes", "per_class", "grid"}, "corpus");
  CorpusConfig c;
  if (j.contains("classes")) c.classes = j["classes"].get<int>();
  if (j.contains("per_class")) c.per_class = j["per_class"].get<int>();
  if (j.contains("grid")) c.grid = j["grid"].get<int64_t>();
  return c;
}

inline json to_json(const RunConfig& c) {
  return json{{"network", to_json(c.network)},
              {"trainer", to_json(c.trainer)},
              {"corpus", to_json(c.corpus)},
              {"seed", c.seed},
              {"threads", c.threads},
              {"dtype", c.dtype},
              {"deterministic", c.deterministic},
              {"unseen_class", c.unseen_class},
              {"n_eval", c.n_eval},
              {"repeats", c.repeats}};
}

inline RunConfig run_from_json(const json& j) {
  check_keys(j,
             {"network", "trainer", "corpus", "seed", "threads", "dtype", "deterministic",
              "unseen_class", "n_eval", "repeats"},
             "top level");
  RunConfig c;
  if (j.contains("network")) c.network = network_from_json(j["network"]);
  if (j.contains("trainer")) c.trainer = trainer_from_json(j["trainer"]);
  if (j.contains("corpus")) c.corpus = corpus_from_json(j["corpus"]);
  if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
  if (j.contains("threads")) c.threads = j["threads"].get<int>();
  if (j.contains("dtype")) c.dtype = j["dtype"].get<std::string>();
  if (j.contains("deterministic")) c.deterministic = j["deterministic"].get<bool>();
  if (j.contains("unseen_class")) c.unseen_class = j["unseen_class"].get<int>();
  if (j.contains("n_eval")) c.n_eval = j["n_eval"].get<int>();
  if (j.contains("repeats")) c.repeats = j["repeats"].get<int>();
  if (c.dtype != "f32" && c.dtype != "f64")
    throw ConfigError("config: dtype must be f32 or f64, got '" + c.dtype + "'");
  return c;
}

}  // namespace cfgio

}  // namespace prmseg
