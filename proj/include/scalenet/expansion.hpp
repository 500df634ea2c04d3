#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <unordered_set>
#include <vector>

#include "scalenet/mapping.hpp"
#include "scalenet/random.hpp"
#include "scalenet/vit.hpp"

namespace scalenet {

namespace detail {

// The weight tensors a layer instance may share with its siblings. Norms
// and adjustments are deliberately absent: they stay per-instance.
template <class Real>
struct SharedBlockWeights {
  Tensor<Real> qkv_weight, qkv_bias;
  Tensor<Real> proj_weight, proj_bias;
  Tensor<Real> fc1_weight, fc1_bias;
  Tensor<Real> fc2_weight, fc2_bias;
};

template <class Real>
SharedBlockWeights<Real> copy_shared_weights(const TransformerBlock<Real>& b) {
  SharedBlockWeights<Real> w;
  w.qkv_weight = clone_param(b.qkv_weight);
  w.qkv_bias = clone_param(b.qkv_bias);
  w.proj_weight = clone_param(b.proj_weight);
  w.proj_bias = clone_param(b.proj_bias);
  w.fc1_weight = clone_param(b.fc1_weight);
  w.fc1_bias = clone_param(b.fc1_bias);
  w.fc2_weight = clone_param(b.fc2_weight);
  w.fc2_bias = clone_param(b.fc2_bias);
  return w;
}

template <class Real>
Tensor<Real> mean_param(const Tensor<Real>& a, const Tensor<Real>& b) {
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = (a.data()[i] + b.data()[i]) / Real(2);
  out.set_requires_grad(true);
  return out;
}

}  // namespace detail

// Grows a pretrained model along the mapping's layer table.
//
// With share = true, every instance mapped to the same source aliases one
// storage per weight tensor; with share = false each instance gets its own
// copy. Layer norms are always copied per instance, and a fresh adjustment
// pair is attached to fc1/fc2 of every instance when `adjust` is given.
// Sourceless table entries are freshly initialized (random_init) or set to
// the mean of two sampled pretrained layers (swa).
//
// A subset restricts expansion to the listed source layers: other sources
// keep exactly their first table occurrence. Subsets only make sense for
// source-mapped strategies.
template <class Real>
Model<Real> expand_model(const Model<Real>& pretrained,
                         const LayerMapping& mapping, bool share,
                         std::optional<AdjustConfig> adjust = std::nullopt,
                         std::optional<std::vector<std::size_t>> subset = std::nullopt,
                         std::uint64_t seed = 0) {
  const std::size_t source_depth = pretrained.blocks.size();
  if (mapping.source_depth != source_depth) {
    throw contract_error("expand_model: mapping built for depth " +
                         std::to_string(mapping.source_depth) +
                         ", model has " + std::to_string(source_depth));
  }
  if (mapping.table.size() < source_depth) {
    throw contract_error("expand_model: mapping table shorter than the model");
  }
  const bool fresh_kind = mapping.kind == MappingKind::random_init ||
                          mapping.kind == MappingKind::swa;
  if (subset) {
    if (fresh_kind) {
      throw contract_error(
          "expand_model: subsets apply only to source-mapped strategies");
    }
    for (std::size_t s : *subset) {
      if (s >= source_depth) {
        throw contract_error("expand_model: subset layer " + std::to_string(s) +
                             " out of range for depth " +
                             std::to_string(source_depth));
      }
    }
  }
  for (int e : mapping.table) {
    if (e != LayerMapping::kNoSource &&
        (e < 0 || std::size_t(e) >= source_depth)) {
      throw contract_error("expand_model: table entry " + std::to_string(e) +
                           " out of range");
    }
    if (e == LayerMapping::kNoSource && !fresh_kind) {
      throw contract_error(
          "expand_model: sourceless table entry under a mapped strategy");
    }
  }

  // Effective instance list. Sources outside the subset keep only their
  // first occurrence, i.e. they are not duplicated.
  std::unordered_set<std::size_t> chosen;
  if (subset) chosen.insert(subset->begin(), subset->end());
  std::vector<int> sources;
  std::vector<bool> seen(source_depth, false);
  for (int e : mapping.table) {
    if (e == LayerMapping::kNoSource) {
      sources.push_back(e);
      continue;
    }
    const bool first = !seen[std::size_t(e)];
    seen[std::size_t(e)] = true;
    if (first || !subset || chosen.count(std::size_t(e))) sources.push_back(e);
  }

  const ViTConfig& cfg = pretrained.config;
  Model<Real> out;
  out.config = cfg;
  out.config.depth = sources.size();
  out.patch_weight = detail::clone_param(pretrained.patch_weight);
  out.patch_bias = detail::clone_param(pretrained.patch_bias);
  out.pos_embed = detail::clone_param(pretrained.pos_embed);
  out.cls_token = detail::clone_param(pretrained.cls_token);
  out.head_norm_gamma = detail::clone_param(pretrained.head_norm_gamma);
  out.head_norm_beta = detail::clone_param(pretrained.head_norm_beta);
  out.head_weight = detail::clone_param(pretrained.head_weight);
  out.head_bias = detail::clone_param(pretrained.head_bias);

  RandomStream adjust_rng(derive_seed(seed, 31));
  RandomStream fresh_rng(derive_seed(seed, 32));
  RandomStream swa_rng(derive_seed(seed, 33));

  std::vector<std::optional<detail::SharedBlockWeights<Real>>> store(source_depth);
  out.blocks.reserve(sources.size());
  for (int src : sources) {
    TransformerBlock<Real> blk;
    if (src != LayerMapping::kNoSource) {
      const TransformerBlock<Real>& from = pretrained.blocks[std::size_t(src)];
      if (share) {
        auto& slot = store[std::size_t(src)];
        if (!slot) slot = detail::copy_shared_weights(from);
        blk.qkv_weight = slot->qkv_weight;
        blk.qkv_bias = slot->qkv_bias;
        blk.proj_weight = slot->proj_weight;
        blk.proj_bias = slot->proj_bias;
        blk.fc1_weight = slot->fc1_weight;
        blk.fc1_bias = slot->fc1_bias;
        blk.fc2_weight = slot->fc2_weight;
        blk.fc2_bias = slot->fc2_bias;
      } else {
        blk.qkv_weight = detail::clone_param(from.qkv_weight);
        blk.qkv_bias = detail::clone_param(from.qkv_bias);
        blk.proj_weight = detail::clone_param(from.proj_weight);
        blk.proj_bias = detail::clone_param(from.proj_bias);
        blk.fc1_weight = detail::clone_param(from.fc1_weight);
        blk.fc1_bias = detail::clone_param(from.fc1_bias);
        blk.fc2_weight = detail::clone_param(from.fc2_weight);
        blk.fc2_bias = detail::clone_param(from.fc2_bias);
      }
      blk.ln1_gamma = detail::clone_param(from.ln1_gamma);
      blk.ln1_beta = detail::clone_param(from.ln1_beta);
      blk.ln2_gamma = detail::clone_param(from.ln2_gamma);
      blk.ln2_beta = detail::clone_param(from.ln2_beta);
    } else if (mapping.kind == MappingKind::random_init) {
      blk = init_block<Real>(cfg, fresh_rng);
    } else {
      // swa: elementwise mean of two distinct sampled pretrained layers
      if (source_depth < 2) {
        throw contract_error("expand_model: swa needs at least two layers");
      }
      const std::size_t a = swa_rng.index(source_depth);
      std::size_t b = swa_rng.index(source_depth);
      while (b == a) b = swa_rng.index(source_depth);
      const TransformerBlock<Real>& ba = pretrained.blocks[a];
      const TransformerBlock<Real>& bb = pretrained.blocks[b];
      blk.ln1_gamma = detail::mean_param(ba.ln1_gamma, bb.ln1_gamma);
      blk.ln1_beta = detail::mean_param(ba.ln1_beta, bb.ln1_beta);
      blk.qkv_weight = detail::mean_param(ba.qkv_weight, bb.qkv_weight);
      blk.qkv_bias = detail::mean_param(ba.qkv_bias, bb.qkv_bias);
      blk.proj_weight = detail::mean_param(ba.proj_weight, bb.proj_weight);
      blk.proj_bias = detail::mean_param(ba.proj_bias, bb.proj_bias);
      blk.ln2_gamma = detail::mean_param(ba.ln2_gamma, bb.ln2_gamma);
      blk.ln2_beta = detail::mean_param(ba.ln2_beta, bb.ln2_beta);
      blk.fc1_weight = detail::mean_param(ba.fc1_weight, bb.fc1_weight);
      blk.fc1_bias = detail::mean_param(ba.fc1_bias, bb.fc1_bias);
      blk.fc2_weight = detail::mean_param(ba.fc2_weight, bb.fc2_weight);
      blk.fc2_bias = detail::mean_param(ba.fc2_bias, bb.fc2_bias);
    }
    if (adjust) {
      blk.fc1_adjust = make_adjustment<Real>(adjust->kind, cfg.dim,
                                             cfg.mlp_hidden(), adjust->rank,
                                             adjust_rng);
      blk.fc2_adjust = make_adjustment<Real>(adjust->kind, cfg.mlp_hidden(),
                                             cfg.dim, adjust->rank, adjust_rng);
    }
    out.blocks.push_back(std::move(blk));
  }

  set_drop_path_rate(out, cfg.drop_path_rate);
  ExpansionInfo info;
  info.mapping = mapping;
  info.share = share;
  info.adjust = adjust;
  info.subset = subset;
  info.seed = seed;
  info.instance_source = sources;
  out.expansion = std::move(info);
  return out;
}

// What a parameter count should cover. `mlp_weights` is the fc1/fc2 weight
// matrices alone; `mlp_weights_and_adjust` adds the adjustment factors.
// Those two scopes exist for comparing measured sharing ratios against the
// closed-form estimate, which models a layer as its adapter-hosting linears.
enum class CountScope { all, mlp_weights, mlp_weights_and_adjust };

template <class Real>
std::size_t count_parameters(const Model<Real>& m, bool unique_only,
                             CountScope scope = CountScope::all) {
  std::vector<std::pair<const TensorData<Real>*, std::size_t>> entries;
  auto add_tensor = [&entries](const Tensor<Real>& t) {
    entries.emplace_back(t.ptr().get(), t.size());
  };
  if (scope == CountScope::all) {
    for (auto& [name, t] : named_parameters(m)) add_tensor(t);
  } else {
    for (const TransformerBlock<Real>& b : m.blocks) {
      add_tensor(b.fc1_weight);
      add_tensor(b.fc2_weight);
      if (scope == CountScope::mlp_weights_and_adjust) {
        if (b.fc1_adjust) {
          add_tensor(b.fc1_adjust->down);
          add_tensor(b.fc1_adjust->up);
        }
        if (b.fc2_adjust) {
          add_tensor(b.fc2_adjust->down);
          add_tensor(b.fc2_adjust->up);
        }
      }
    }
  }
  std::size_t total = 0;
  std::unordered_set<const TensorData<Real>*> seen;
  for (auto& [ptr, n] : entries) {
    if (unique_only && !seen.insert(ptr).second) continue;
    total += n;
  }
  return total;
}

// Closed-form estimate of trainable fraction for a 2x-deepened model with
// weight sharing plus rank-r adjustments: layers are modeled as n square
// d×d linears, giving (L·n·d² + 4·L·n·r·d) / (2·L·n·d²) = (d + 4r) / (2d).
// Approaches 1/2 as the rank shrinks.
inline double parameter_fraction(std::size_t layers, std::size_t linears_per_layer,
                                 std::size_t dim, std::size_t rank) {
  const double l = double(layers), n = double(linears_per_layer);
  const double d = double(dim), r = double(rank);
  return (l * n * d * d + 4.0 * l * n * r * d) / (2.0 * l * n * d * d);
}

}  // namespace scalenet
