#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalenet/errors.hpp"

namespace scalenet {

// How new layers of a deepened model relate to the pretrained ones.
//   identity     no new layers; every layer maps to itself
//   stack        whole pretrained stack repeated after the originals
//   interpolate  each pretrained layer repeated in place
//   cyclic       same table as stack; the canonical weight-sharing order
//   random_init  new layers are freshly initialized (no source)
//   swa          new layers average two sampled pretrained layers
enum class MappingKind {
  identity,
  stack,
  interpolate,
  cyclic,
  random_init,
  swa,
};

inline const char* to_string(MappingKind k) {
  switch (k) {
    case MappingKind::identity: return "identity";
    case MappingKind::stack: return "stack";
    case MappingKind::interpolate: return "interpolate";
    case MappingKind::cyclic: return "cyclic";
    case MappingKind::random_init: return "random_init";
    case MappingKind::swa: return "swa";
  }
  throw contract_error("to_string: bad MappingKind");
}

inline MappingKind mapping_kind_from_string(const std::string& s) {
  if (s == "identity") return MappingKind::identity;
  if (s == "stack") return MappingKind::stack;
  if (s == "interpolate") return MappingKind::interpolate;
  if (s == "cyclic") return MappingKind::cyclic;
  if (s == "random_init" || s == "random") return MappingKind::random_init;
  if (s == "swa") return MappingKind::swa;
  throw config_error("unknown mapping strategy '" + s + "'");
}

// Position table for a deepened model. table[l] is the pretrained source
// index of the layer at position l, or kNoSource for layers that start from
// fresh or averaged weights. The table order is the physical layer order.
struct LayerMapping {
  static constexpr int kNoSource = -1;

  MappingKind kind = MappingKind::identity;
  std::size_t source_depth = 0;
  std::vector<int> table;

  std::size_t target_depth() const { return table.size(); }
};

inline void to_json(nlohmann::json& j, const LayerMapping& m) {
  j = nlohmann::json{{"strategy", to_string(m.kind)},
                     {"source_depth", m.source_depth},
                     {"table", m.table}};
}

inline void from_json(const nlohmann::json& j, LayerMapping& m) {
  m.kind = mapping_kind_from_string(j.at("strategy").get<std::string>());
  m.source_depth = j.at("source_depth").get<std::size_t>();
  m.table = j.at("table").get<std::vector<int>>();
}

// Builds the layer table for growing a depth-L model to depth target_depth.
// Shared/stacked strategies append the repeats after the originals with
// source l' mod L; interpolation repeats every layer in place with source
// floor(l'·L/L'). Fresh-layer strategies keep the originals and mark the
// appended tail as sourceless.
inline LayerMapping build_mapping(MappingKind kind, std::size_t source_depth,
                                  std::size_t target_depth) {
  if (source_depth == 0) {
    throw contract_error("build_mapping: source depth must be positive");
  }
  if (target_depth < source_depth) {
    throw contract_error("build_mapping: target depth " +
                         std::to_string(target_depth) +
                         " below source depth " + std::to_string(source_depth));
  }
  LayerMapping m;
  m.kind = kind;
  m.source_depth = source_depth;
  m.table.resize(target_depth);
  switch (kind) {
    case MappingKind::identity:
      if (target_depth != source_depth) {
        throw contract_error("build_mapping: identity requires equal depths");
      }
      for (std::size_t l = 0; l < target_depth; ++l) m.table[l] = int(l);
      break;
    case MappingKind::stack:
    case MappingKind::cyclic:
      for (std::size_t l = 0; l < target_depth; ++l)
        m.table[l] = int(l % source_depth);
      break;
    case MappingKind::interpolate:
      for (std::size_t l = 0; l < target_depth; ++l)
        m.table[l] = int(l * source_depth / target_depth);
      break;
    case MappingKind::random_init:
    case MappingKind::swa:
      for (std::size_t l = 0; l < target_depth; ++l)
        m.table[l] = l < source_depth ? int(l) : LayerMapping::kNoSource;
      break;
  }
  return m;
}

// Per-layer adjustment flavour. Both keep the host weight untouched and add
// a rank-r path: lora adds up(down(x)), the parallel adapter adds
// up(relu(down(x))).
enum class AdjustKind { lora, parallel_adapter };

inline const char* to_string(AdjustKind k) {
  return k == AdjustKind::lora ? "lora" : "parallel_adapter";
}

inline AdjustKind adjust_kind_from_string(const std::string& s) {
  if (s == "lora") return AdjustKind::lora;
  if (s == "parallel_adapter" || s == "adapter") return AdjustKind::parallel_adapter;
  throw config_error("unknown adjustment kind '" + s + "'");
}

struct AdjustConfig {
  AdjustKind kind = AdjustKind::parallel_adapter;
  std::size_t rank = 16;
};

// Everything needed to rebuild an expanded model's aliasing and adjustments.
struct ExpansionInfo {
  LayerMapping mapping;
  bool share = true;
  std::optional<AdjustConfig> adjust;
  std::optional<std::vector<std::size_t>> subset;
  std::uint64_t seed = 0;
  // Source per physical layer after subset filtering; kNoSource for fresh
  // or averaged layers. Length equals the expanded model's depth.
  std::vector<int> instance_source;
};

inline void to_json(nlohmann::json& j, const AdjustConfig& a) {
  j = nlohmann::json{{"kind", to_string(a.kind)}, {"rank", a.rank}};
}

inline void from_json(const nlohmann::json& j, AdjustConfig& a) {
  a.kind = adjust_kind_from_string(j.at("kind").get<std::string>());
  a.rank = j.at("rank").get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const ExpansionInfo& e) {
  j = nlohmann::json{{"mapping", e.mapping},
                     {"share", e.share},
                     {"adjust", nullptr},
                     {"subset", nullptr},
                     {"seed", e.seed},
                     {"instance_source", e.instance_source}};
  if (e.adjust) j["adjust"] = *e.adjust;
  if (e.subset) j["subset"] = *e.subset;
}

inline void from_json(const nlohmann::json& j, ExpansionInfo& e) {
  j.at("mapping").get_to(e.mapping);
  j.at("share").get_to(e.share);
  e.adjust.reset();
  if (!j.at("adjust").is_null()) e.adjust = j.at("adjust").get<AdjustConfig>();
  e.subset.reset();
  if (!j.at("subset").is_null()) {
    e.subset = j.at("subset").get<std::vector<std::size_t>>();
  }
  j.at("seed").get_to(e.seed);
  j.at("instance_source").get_to(e.instance_source);
}

}  // namespace scalenet
