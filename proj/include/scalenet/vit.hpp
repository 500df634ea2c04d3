#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "scalenet/adjust.hpp"
#include "scalenet/errors.hpp"
#include "scalenet/mapping.hpp"
#include "scalenet/ops.hpp"
#include "scalenet/random.hpp"
#include "scalenet/tensor.hpp"

namespace scalenet {

// Shared by every layer norm in the model.
inline constexpr double kLayerNormEps = 1e-6;

inline constexpr double kInitStd = 0.02;

struct ViTConfig {
  std::size_t image_size = 8;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t depth = 2;
  std::size_t dim = 8;
  std::size_t heads = 2;
  double mlp_ratio = 4.0;
  std::size_t classes = 3;
  double drop_path_rate = 0.0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t tokens() const { return patches() + 1; }  // +1 class token
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::lround(mlp_ratio * double(dim)));
  }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
      throw config_error("ViTConfig: image size " + std::to_string(image_size) +
                         " not divisible by patch size " +
                         std::to_string(patch_size));
    }
    if (channels == 0) throw config_error("ViTConfig: channels must be positive");
    if (dim == 0 || heads == 0 || dim % heads != 0) {
      throw config_error("ViTConfig: dim " + std::to_string(dim) +
                         " not divisible by heads " + std::to_string(heads));
    }
    if (classes == 0) throw config_error("ViTConfig: classes must be positive");
    if (!(mlp_ratio > 0) || mlp_hidden() == 0) {
      throw config_error("ViTConfig: mlp_ratio must be positive");
    }
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) {
      throw config_error("ViTConfig: drop_path_rate must lie in [0, 1)");
    }
  }
};

inline void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"channels", c.channels},
                     {"depth", c.depth},
                     {"dim", c.dim},
                     {"heads", c.heads},
                     {"mlp_ratio", c.mlp_ratio},
                     {"classes", c.classes},
                     {"drop_path_rate", c.drop_path_rate}};
}

inline void from_json(const nlohmann::json& j, ViTConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("channels").get_to(c.channels);
  j.at("depth").get_to(c.depth);
  j.at("dim").get_to(c.dim);
  j.at("heads").get_to(c.heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("classes").get_to(c.classes);
  j.at("drop_path_rate").get_to(c.drop_path_rate);
}

// One pre-norm transformer block. Weights are input-major ([in×out]); the
// qkv projection is fused. Adjustments, when present, sit on the two MLP
// linears only.
template <class Real>
struct TransformerBlock {
  Tensor<Real> ln1_gamma, ln1_beta;
  Tensor<Real> qkv_weight, qkv_bias;
  Tensor<Real> proj_weight, proj_bias;
  Tensor<Real> ln2_gamma, ln2_beta;
  Tensor<Real> fc1_weight, fc1_bias;
  Tensor<Real> fc2_weight, fc2_bias;
  std::optional<Adjustment<Real>> fc1_adjust, fc2_adjust;
  Real drop_path_prob = Real(0);
};

template <class Real>
struct Model {
  ViTConfig config;
  Tensor<Real> patch_weight, patch_bias;
  Tensor<Real> pos_embed;  // [tokens×dim], class position included
  Tensor<Real> cls_token;  // [1×dim]
  std::vector<TransformerBlock<Real>> blocks;
  Tensor<Real> head_norm_gamma, head_norm_beta;
  Tensor<Real> head_weight, head_bias;
  std::optional<ExpansionInfo> expansion;
};

namespace detail {

// Visits every parameter slot in a fixed canonical order. The same order
// drives optimizer updates, checkpoints and parameter listings, which keeps
// all of them deterministic.
template <class Real, class Fn>
void visit_params(Model<Real>& m, Fn&& fn) {
  fn("patch_embed.weight", m.patch_weight);
  fn("patch_embed.bias", m.patch_bias);
  fn("pos_embed", m.pos_embed);
  fn("cls_token", m.cls_token);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    TransformerBlock<Real>& b = m.blocks[i];
    fn(p + "ln1.gamma", b.ln1_gamma);
    fn(p + "ln1.beta", b.ln1_beta);
    fn(p + "qkv.weight", b.qkv_weight);
    fn(p + "qkv.bias", b.qkv_bias);
    fn(p + "attn_proj.weight", b.proj_weight);
    fn(p + "attn_proj.bias", b.proj_bias);
    fn(p + "ln2.gamma", b.ln2_gamma);
    fn(p + "ln2.beta", b.ln2_beta);
    fn(p + "fc1.weight", b.fc1_weight);
    fn(p + "fc1.bias", b.fc1_bias);
    if (b.fc1_adjust) {
      fn(p + "fc1_adjust.down", b.fc1_adjust->down);
      fn(p + "fc1_adjust.up", b.fc1_adjust->up);
    }
    fn(p + "fc2.weight", b.fc2_weight);
    fn(p + "fc2.bias", b.fc2_bias);
    if (b.fc2_adjust) {
      fn(p + "fc2_adjust.down", b.fc2_adjust->down);
      fn(p + "fc2_adjust.up", b.fc2_adjust->up);
    }
  }
  fn("head_norm.gamma", m.head_norm_gamma);
  fn("head_norm.beta", m.head_norm_beta);
  fn("head.weight", m.head_weight);
  fn("head.bias", m.head_bias);
}

}  // namespace detail

template <class Real>
std::vector<std::pair<std::string, Tensor<Real>>> named_parameters(
    const Model<Real>& m) {
  std::vector<std::pair<std::string, Tensor<Real>>> out;
  detail::visit_params(const_cast<Model<Real>&>(m),
                       [&](const std::string& name, Tensor<Real>& t) {
                         out.emplace_back(name, t);
                       });
  return out;
}

template <class Real>
void zero_grad(Model<Real>& m) {
  detail::visit_params(m, [](const std::string&, Tensor<Real>& t) { t.zero_grad(); });
}

// Linear stochastic-depth schedule from 0 at the first block to `rate` at
// the last one.
template <class Real>
void set_drop_path_rate(Model<Real>& m, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw contract_error("set_drop_path_rate: rate must lie in [0, 1)");
  }
  const std::size_t depth = m.blocks.size();
  for (std::size_t i = 0; i < depth; ++i) {
    m.blocks[i].drop_path_prob =
        depth > 1 ? Real(rate * double(i) / double(depth - 1)) : Real(0);
  }
  m.config.drop_path_rate = rate;
}

// Fresh block with truncated-normal weights, zero biases and unit norms.
template <class Real>
TransformerBlock<Real> init_block(const ViTConfig& cfg, RandomStream& rng) {
  const std::size_t d = cfg.dim, hidden = cfg.mlp_hidden();
  auto normal = [&rng](Shape shape) {
    Tensor<Real> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
      t.data()[i] = Real(rng.truncated_normal(kInitStd));
    return t.set_requires_grad(true);
  };
  auto filled = [](Shape shape, Real v) {
    Tensor<Real> t(std::move(shape), v);
    return t.set_requires_grad(true);
  };
  TransformerBlock<Real> b;
  b.ln1_gamma = filled({d}, Real(1));
  b.ln1_beta = filled({d}, Real(0));
  b.qkv_weight = normal({d, 3 * d});
  b.qkv_bias = filled({3 * d}, Real(0));
  b.proj_weight = normal({d, d});
  b.proj_bias = filled({d}, Real(0));
  b.ln2_gamma = filled({d}, Real(1));
  b.ln2_beta = filled({d}, Real(0));
  b.fc1_weight = normal({d, hidden});
  b.fc1_bias = filled({hidden}, Real(0));
  b.fc2_weight = normal({hidden, d});
  b.fc2_bias = filled({d}, Real(0));
  return b;
}

template <class Real>
Model<Real> init_model(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  RandomStream rng(derive_seed(seed, 0));
  auto normal = [&rng](Shape shape) {
    Tensor<Real> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
      t.data()[i] = Real(rng.truncated_normal(kInitStd));
    return t.set_requires_grad(true);
  };
  auto filled = [](Shape shape, Real v) {
    Tensor<Real> t(std::move(shape), v);
    return t.set_requires_grad(true);
  };
  Model<Real> m;
  m.config = cfg;
  m.patch_weight = normal({cfg.patch_dim(), cfg.dim});
  m.patch_bias = filled({cfg.dim}, Real(0));
  m.pos_embed = normal({cfg.tokens(), cfg.dim});
  m.cls_token = normal({1, cfg.dim});
  m.blocks.reserve(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i)
    m.blocks.push_back(init_block<Real>(cfg, rng));
  m.head_norm_gamma = filled({cfg.dim}, Real(1));
  m.head_norm_beta = filled({cfg.dim}, Real(0));
  m.head_weight = normal({cfg.dim, cfg.classes});
  m.head_bias = filled({cfg.classes}, Real(0));
  set_drop_path_rate(m, cfg.drop_path_rate);
  return m;
}

// Patchify, project, prepend the class token, add position embeddings:
// [B×ch×S×S] → [B×tokens×dim].
template <class Real>
Tensor<Real> patch_embed(const Tensor<Real>& images, const Model<Real>& m) {
  const ViTConfig& c = m.config;
  if (images.rank() != 4 || images.dim(1) != c.channels ||
      images.dim(2) != c.image_size || images.dim(3) != c.image_size) {
    throw shape_error("patch_embed: images " + shape_str(images.shape()) +
                      " do not match configured input [nx" +
                      std::to_string(c.channels) + "x" +
                      std::to_string(c.image_size) + "x" +
                      std::to_string(c.image_size) + "]");
  }
  Tensor<Real> x = im2patches(images, c.patch_size);
  x = add_bias(matmul(x, m.patch_weight), m.patch_bias);
  x = prepend_token(x, m.cls_token);
  return add_bias(x, m.pos_embed);
}

// One block: x + drop_path(attn(norm(x))) then x + drop_path(mlp(norm(x))).
// Drop path gates each residual branch per sample while training.
template <class Real>
Tensor<Real> block_forward(const Tensor<Real>& x,
                           const TransformerBlock<Real>& b, std::size_t heads,
                           bool training, RandomStream* rng) {
  const Real eps = Real(kLayerNormEps);
  const std::size_t d = b.qkv_weight.dim(0);
  const std::size_t dh = d / heads;

  Tensor<Real> h = layer_norm(x, b.ln1_gamma, b.ln1_beta, eps);
  Tensor<Real> qkv = add_bias(matmul(h, b.qkv_weight), b.qkv_bias);
  Tensor<Real> q = slice_heads(qkv, 0, heads);
  Tensor<Real> k = slice_heads(qkv, 1, heads);
  Tensor<Real> v = slice_heads(qkv, 2, heads);
  Tensor<Real> scores =
      scale(batched_matmul(q, k, true), Real(1.0 / std::sqrt(double(dh))));
  Tensor<Real> attn = softmax(scores);
  Tensor<Real> ctx = merge_heads(batched_matmul(attn, v), heads);
  Tensor<Real> branch = add_bias(matmul(ctx, b.proj_weight), b.proj_bias);
  Tensor<Real> y = add(x, drop_path(branch, b.drop_path_prob, training, rng));

  Tensor<Real> h2 = layer_norm(y, b.ln2_gamma, b.ln2_beta, eps);
  Tensor<Real> mid = gelu(adjusted_linear(h2, b.fc1_weight, b.fc1_bias, b.fc1_adjust));
  Tensor<Real> out = adjusted_linear(mid, b.fc2_weight, b.fc2_bias, b.fc2_adjust);
  return add(y, drop_path(out, b.drop_path_prob, training, rng));
}

// Full forward pass to logits. `capture`, when given, receives every
// post-block token tensor (used by the diagnostics).
template <class Real>
Tensor<Real> model_forward(const Tensor<Real>& images, const Model<Real>& m,
                           bool training = false, RandomStream* rng = nullptr,
                           std::vector<Tensor<Real>>* capture = nullptr) {
  Tensor<Real> x = patch_embed(images, m);
  for (const TransformerBlock<Real>& b : m.blocks) {
    x = block_forward(x, b, m.config.heads, training, rng);
    if (capture) capture->push_back(x);
  }
  Tensor<Real> cls = select_token(x, 0);
  cls = layer_norm(cls, m.head_norm_gamma, m.head_norm_beta, Real(kLayerNormEps));
  return add_bias(matmul(cls, m.head_weight), m.head_bias);
}

namespace detail {

template <class Real>
Tensor<Real> clone_param(const Tensor<Real>& t) {
  Tensor<Real> c = t.clone();
  c.set_requires_grad(true);
  return c;
}

}  // namespace detail

// Deep copy. Parameters aliased in the source stay aliased in the copy.
template <class Real>
Model<Real> clone_model(const Model<Real>& m) {
  // Field-wise copy first: tensor members become aliases of the source,
  // and non-tensor state (config, adjustment kinds, drop-path probs,
  // expansion metadata) comes along for free.
  Model<Real> out = m;
  std::unordered_map<const TensorData<Real>*, Tensor<Real>> seen;
  detail::visit_params(out, [&seen](const std::string&, Tensor<Real>& t) {
    auto it = seen.find(t.ptr().get());
    if (it == seen.end())
      it = seen.emplace(t.ptr().get(), detail::clone_param(t)).first;
    t = it->second;
  });
  return out;
}

// Deep copy where every parameter gets its own storage, breaking all weight
// sharing while keeping identical values.
template <class Real>
Model<Real> clone_model_unshared(const Model<Real>& m) {
  Model<Real> out = clone_model(m);
  detail::visit_params(out, [](const std::string&, Tensor<Real>& t) {
    t = detail::clone_param(t);
  });
  return out;
}

}  // namespace scalenet
