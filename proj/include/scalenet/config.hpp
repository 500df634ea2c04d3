#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalenet/errors.hpp"
#include "scalenet/mapping.hpp"
#include "scalenet/training.hpp"
#include "scalenet/vit.hpp"

namespace scalenet {

struct DatasetConfig {
  std::size_t classes = 4;
  std::size_t train_samples = 2000;
  std::size_t eval_samples = 500;
  std::size_t image_size = 8;
  std::size_t channels = 3;
  double noise_std = 0.5;
  std::uint64_t seed = 7;
};

struct ExpandSpec {
  MappingKind strategy = MappingKind::cyclic;
  std::size_t scale = 2;
  bool share = true;
  std::optional<std::vector<std::size_t>> subset;
  std::optional<AdjustConfig> adjust;
  std::uint64_t seed = 0;
};

struct AnalysisConfig {
  bool grad_norms = true;
  bool cka = true;
  bool histograms = true;
  std::size_t probe_samples = 64;
  std::uint64_t probe_seed = 1234;
  std::size_t hist_bins = 50;
};

struct ExperimentConfig {
  ViTConfig model;
  DatasetConfig dataset;
  TrainConfig training;
  std::optional<ExpandSpec> expansion;
  AnalysisConfig analysis;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) {
    throw config_error(section + ": expected a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) {
      throw config_error(section + ": unknown key '" + key + "'");
    }
  }
}

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline ViTConfig parse_model_config(const nlohmann::json& j) {
  detail::check_keys(j, "model",
                     {"image_size", "patch_size", "channels", "depth", "dim",
                      "heads", "mlp_ratio", "classes", "drop_path_rate"});
  ViTConfig c;
  detail::read_key(j, "image_size", c.image_size);
  detail::read_key(j, "patch_size", c.patch_size);
  detail::read_key(j, "channels", c.channels);
  detail::read_key(j, "depth", c.depth);
  detail::read_key(j, "dim", c.dim);
  detail::read_key(j, "heads", c.heads);
  detail::read_key(j, "mlp_ratio", c.mlp_ratio);
  detail::read_key(j, "classes", c.classes);
  detail::read_key(j, "drop_path_rate", c.drop_path_rate);
  c.validate();
  return c;
}

inline DatasetConfig parse_dataset_config(const nlohmann::json& j) {
  detail::check_keys(j, "dataset",
                     {"classes", "train_samples", "eval_samples", "image_size",
                      "channels", "noise_std", "seed"});
  DatasetConfig c;
  detail::read_key(j, "classes", c.classes);
  detail::read_key(j, "train_samples", c.train_samples);
  detail::read_key(j, "eval_samples", c.eval_samples);
  detail::read_key(j, "image_size", c.image_size);
  detail::read_key(j, "channels", c.channels);
  detail::read_key(j, "noise_std", c.noise_std);
  detail::read_key(j, "seed", c.seed);
  if (c.classes == 0 || c.image_size == 0 || c.channels == 0) {
    throw config_error("dataset: classes, image_size and channels must be "
                       "positive");
  }
  return c;
}

inline TrainConfig parse_train_config(const nlohmann::json& j) {
  detail::check_keys(j, "training",
                     {"epochs", "batch_size", "lr_init", "lr_final",
                      "weight_decay", "betas", "adam_eps", "policy",
                      "drop_path_rate", "seed"});
  TrainConfig c;
  detail::read_key(j, "epochs", c.epochs);
  detail::read_key(j, "batch_size", c.batch_size);
  detail::read_key(j, "lr_init", c.lr_init);
  detail::read_key(j, "lr_final", c.lr_final);
  detail::read_key(j, "weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    const nlohmann::json& b = j.at("betas");
    if (!b.is_array() || b.size() != 2) {
      throw config_error("training: 'betas' must be an array of two numbers");
    }
    c.beta1 = b[0].get<double>();
    c.beta2 = b[1].get<double>();
  }
  detail::read_key(j, "adam_eps", c.adam_eps);
  if (j.contains("policy")) {
    c.policy = train_policy_from_string(j.at("policy").get<std::string>());
  }
  detail::read_key(j, "drop_path_rate", c.drop_path_rate);
  detail::read_key(j, "seed", c.seed);
  c.validate();
  return c;
}

inline ExpandSpec parse_expand_spec(const nlohmann::json& j) {
  detail::check_keys(
      j, "expansion", {"strategy", "scale", "share", "subset", "adjust",
                       "seed"});
  ExpandSpec c;
  if (j.contains("strategy")) {
    c.strategy = mapping_kind_from_string(j.at("strategy").get<std::string>());
  }
  detail::read_key(j, "scale", c.scale);
  detail::read_key(j, "share", c.share);
  if (j.contains("subset") && !j.at("subset").is_null()) {
    c.subset = j.at("subset").get<std::vector<std::size_t>>();
  }
  if (j.contains("adjust") && !j.at("adjust").is_null()) {
    const nlohmann::json& a = j.at("adjust");
    detail::check_keys(a, "expansion.adjust", {"kind", "rank"});
    AdjustConfig adj;
    if (a.contains("kind")) {
      adj.kind = adjust_kind_from_string(a.at("kind").get<std::string>());
    }
    detail::read_key(a, "rank", adj.rank);
    c.adjust = adj;
  }
  detail::read_key(j, "seed", c.seed);
  if (c.scale == 0) throw config_error("expansion: scale must be positive");
  return c;
}

inline AnalysisConfig parse_analysis_config(const nlohmann::json& j) {
  detail::check_keys(j, "analysis",
                     {"grad_norms", "cka", "histograms", "probe_samples",
                      "probe_seed", "hist_bins"});
  AnalysisConfig c;
  detail::read_key(j, "grad_norms", c.grad_norms);
  detail::read_key(j, "cka", c.cka);
  detail::read_key(j, "histograms", c.histograms);
  detail::read_key(j, "probe_samples", c.probe_samples);
  detail::read_key(j, "probe_seed", c.probe_seed);
  detail::read_key(j, "hist_bins", c.hist_bins);
  if (c.probe_samples == 0 || c.hist_bins == 0) {
    throw config_error("analysis: probe_samples and hist_bins must be "
                       "positive");
  }
  return c;
}

// Parses a full experiment description. When only one of model/dataset is
// given, the shared fields (classes, image geometry) of the other side are
// filled in from it; when both are given they must agree.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  detail::check_keys(j, "experiment",
                     {"model", "dataset", "training", "expansion", "analysis"});
  ExperimentConfig c;
  const bool has_model = j.contains("model");
  const bool has_dataset = j.contains("dataset");
  if (has_model) c.model = parse_model_config(j.at("model"));
  if (has_dataset) c.dataset = parse_dataset_config(j.at("dataset"));
  if (has_model && has_dataset) {
    if (c.model.classes != c.dataset.classes) {
      throw config_error("model.classes " + std::to_string(c.model.classes) +
                         " != dataset.classes " +
                         std::to_string(c.dataset.classes));
    }
    if (c.model.image_size != c.dataset.image_size ||
        c.model.channels != c.dataset.channels) {
      throw config_error("model and dataset disagree on image geometry");
    }
  } else if (has_model) {
    c.dataset.classes = c.model.classes;
    c.dataset.image_size = c.model.image_size;
    c.dataset.channels = c.model.channels;
  } else if (has_dataset) {
    c.model.classes = c.dataset.classes;
    c.model.image_size = c.dataset.image_size;
    c.model.channels = c.dataset.channels;
    c.model.validate();
  }
  if (j.contains("training")) c.training = parse_train_config(j.at("training"));
  if (j.contains("expansion") && !j.at("expansion").is_null()) {
    c.expansion = parse_expand_spec(j.at("expansion"));
  }
  if (j.contains("analysis")) c.analysis = parse_analysis_config(j.at("analysis"));
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

}  // namespace scalenet
