#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <unordered_map>
#include <vector>

#include "scalenet/errors.hpp"
#include "scalenet/ops.hpp"
#include "scalenet/tensor.hpp"
#include "scalenet/vit.hpp"

namespace scalenet {

// One gradient-norm entry per distinct weight storage group: a weight-shared
// model reports one norm per pretrained layer, an unshared one per instance.
struct GradNormProfile {
  std::vector<double> norms;
  std::size_t batch_size = 0;
};

// L2 norm of the loss gradient on each block's attention/MLP weights and
// biases, grouped by storage identity so shared instances contribute to a
// single accumulated entry. Norm and adjustment parameters are excluded;
// the point is to compare pressure on the shared backbone tensors.
template <class Real>
GradNormProfile grad_norm_profile(Model<Real>& model,
                                  const Tensor<Real>& images,
                                  const std::vector<int>& labels) {
  if (labels.empty()) throw contract_error("grad_norm_profile: empty batch");

  // Diagnostics want gradients everywhere, even on a frozen backbone.
  std::vector<std::pair<std::shared_ptr<TensorData<Real>>, bool>> saved;
  detail::visit_params(model, [&](const std::string&, Tensor<Real>& t) {
    saved.emplace_back(t.ptr(), t.requires_grad());
    t.set_requires_grad(true);
  });

  {
    TapeScope<Real> scope;
    Tensor<Real> logits = model_forward(images, model);
    Tensor<Real> loss = cross_entropy(logits, labels);
    backward(loss);
  }

  GradNormProfile profile;
  profile.batch_size = labels.size();
  std::unordered_map<const TensorData<Real>*, std::size_t> group_of;
  for (TransformerBlock<Real>& b : model.blocks) {
    const TensorData<Real>* key = b.qkv_weight.ptr().get();
    if (group_of.count(key)) continue;
    group_of.emplace(key, profile.norms.size());
    double sq = 0;
    for (const Tensor<Real>* t :
         {&b.qkv_weight, &b.qkv_bias, &b.proj_weight, &b.proj_bias,
          &b.fc1_weight, &b.fc1_bias, &b.fc2_weight, &b.fc2_bias}) {
      for (Real g : t->grad()) sq += double(g) * double(g);
    }
    profile.norms.push_back(std::sqrt(sq));
  }

  zero_grad(model);
  for (auto it = saved.rbegin(); it != saved.rend(); ++it)
    it->first->requires_grad = it->second;
  return profile;
}

namespace detail {

// Column-centered copy of a [rows x cols] feature matrix, promoted to double.
template <class Real>
std::vector<double> center_columns(const Tensor<Real>& x) {
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(rows * cols);
  const Real* src = x.data();
  for (std::size_t j = 0; j < cols; ++j) {
    double mean = 0;
    for (std::size_t i = 0; i < rows; ++i) mean += double(src[i * cols + j]);
    mean /= double(rows);
    for (std::size_t i = 0; i < rows; ++i)
      out[i * cols + j] = double(src[i * cols + j]) - mean;
  }
  return out;
}

// Frobenius norm of a^T * b for a [n x p], b [n x q], without materializing
// more than one row of the product at a time.
inline double cross_gram_frobenius(const std::vector<double>& a, std::size_t p,
                                   const std::vector<double>& b, std::size_t q,
                                   std::size_t n) {
  double sum = 0;
  std::vector<double> row(q);
  for (std::size_t i = 0; i < p; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      const double aki = a[k * p + i];
      const double* bk = b.data() + k * q;
      for (std::size_t j = 0; j < q; ++j) row[j] += aki * bk[j];
    }
    for (double v : row) sum += v * v;
  }
  return std::sqrt(sum);
}

}  // namespace detail

// Linear centered-kernel alignment between two feature matrices with the
// same rows (examples) and arbitrary columns (features):
//   ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F)
// after centering each column. 1 means identical-up-to-rotation-and-scale
// representations; 0 means no linear relationship.
template <class Real>
double linear_cka(const Tensor<Real>& x, const Tensor<Real>& y) {
  if (x.rank() != 2 || y.rank() != 2) {
    throw shape_error("linear_cka: want rank-2 features, got " +
                      shape_str(x.shape()) + " and " + shape_str(y.shape()));
  }
  if (x.dim(0) != y.dim(0)) {
    throw shape_error("linear_cka: row mismatch " + shape_str(x.shape()) +
                      " vs " + shape_str(y.shape()));
  }
  if (x.dim(0) < 2) {
    throw contract_error("linear_cka: need at least 2 rows");
  }
  const std::size_t n = x.dim(0), p = x.dim(1), q = y.dim(1);
  const std::vector<double> xc = detail::center_columns(x);
  const std::vector<double> yc = detail::center_columns(y);
  const double cross = detail::cross_gram_frobenius(yc, q, xc, p, n);
  const double nx = detail::cross_gram_frobenius(xc, p, xc, p, n);
  const double ny = detail::cross_gram_frobenius(yc, q, yc, q, n);
  if (nx == 0 || ny == 0) {
    std::fprintf(stderr,
                 "linear_cka: degenerate (constant) features, returning 0\n");
    return 0;
  }
  return (cross * cross) / (nx * ny);
}

struct CkaMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const {
    if (i >= rows || j >= cols) {
      throw index_error("CkaMatrix::at: (" + std::to_string(i) + ", " +
                        std::to_string(j) + ") of " + std::to_string(rows) +
                        "x" + std::to_string(cols));
    }
    return values[i * cols + j];
  }
};

namespace detail {

// Token features of every block output, flattened to [batch*tokens, dim].
template <class Real>
std::vector<Tensor<Real>> layer_features(const Model<Real>& m,
                                         const Tensor<Real>& probe_images) {
  std::vector<Tensor<Real>> captured;
  model_forward(probe_images, m, false, nullptr, &captured);
  std::vector<Tensor<Real>> features;
  features.reserve(captured.size());
  for (const Tensor<Real>& t : captured) {
    features.emplace_back(Shape{t.dim(0) * t.dim(1), t.dim(2)}, t.values());
  }
  return features;
}

}  // namespace detail

// Pairwise CKA between every layer of `a` (rows) and every layer of `b`
// (columns) on a shared probe batch.
template <class Real>
CkaMatrix cka_matrix(const Model<Real>& a, const Model<Real>& b,
                     const Tensor<Real>& probe_images) {
  const std::vector<Tensor<Real>> fa = detail::layer_features(a, probe_images);
  const std::vector<Tensor<Real>> fb = detail::layer_features(b, probe_images);
  CkaMatrix out;
  out.rows = fa.size();
  out.cols = fb.size();
  out.values.resize(out.rows * out.cols);
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j)
      out.values[i * out.cols + j] = linear_cka(fa[i], fb[j]);
  return out;
}

struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
};

struct HistogramSet {
  std::vector<std::size_t> layers;
  std::vector<Histogram> hists;
  double lo = 0, hi = 0;
  std::size_t bins = 0;
};

// Fixed-range histograms of block-output activations for the given layers.
// Values outside [lo, hi] are dropped; a value exactly at hi lands in the
// last bin.
template <class Real>
HistogramSet activation_histograms(const Model<Real>& m,
                                   const Tensor<Real>& probe_images,
                                   const std::vector<std::size_t>& layers,
                                   std::size_t bins, double lo = -10,
                                   double hi = 10) {
  if (bins == 0) throw contract_error("activation_histograms: bins must be > 0");
  if (!(lo < hi)) throw contract_error("activation_histograms: need lo < hi");
  std::vector<Tensor<Real>> captured;
  model_forward(probe_images, m, false, nullptr, &captured);

  HistogramSet set;
  set.layers = layers;
  set.lo = lo;
  set.hi = hi;
  set.bins = bins;
  const double width = (hi - lo) / double(bins);
  for (std::size_t layer : layers) {
    if (layer >= captured.size()) {
      throw index_error("activation_histograms: layer " +
                        std::to_string(layer) + " of " +
                        std::to_string(captured.size()));
    }
    Histogram h;
    h.edges.resize(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i)
      h.edges[i] = lo + (hi - lo) * double(i) / double(bins);
    h.counts.assign(bins, 0);
    for (Real rv : captured[layer].values()) {
      const double v = double(rv);
      if (v < lo || v > hi) continue;
      std::size_t bin = v >= hi ? bins - 1 : std::size_t((v - lo) / width);
      if (bin >= bins) bin = bins - 1;
      ++h.counts[bin];
    }
    set.hists.push_back(std::move(h));
  }
  return set;
}

}  // namespace scalenet
