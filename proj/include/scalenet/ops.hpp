#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "scalenet/errors.hpp"
#include "scalenet/random.hpp"
#include "scalenet/tensor.hpp"

namespace scalenet {

namespace detail {

// C(m×n) = A(m×k)·B(k×n), optionally accumulating. i-k-j order keeps the
// inner loop contiguous so it vectorizes without reassociation, and the
// accumulation order is fixed, which the bit-exactness guarantees rely on.
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, Real(0));
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m×n) = A(m×k)·B(n×k)^T. Goes through an explicit transpose so the
// accumulation loop stays contiguous.
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  std::vector<Real> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

// C(m×n) = A(k×m)^T·B(k×n).
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, Real(0));
  for (std::size_t i = 0; i < k; ++i) {
    const Real* brow = b + i * n;
    for (std::size_t p = 0; p < m; ++p) {
      const Real av = a[i * m + p];
      Real* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class Real>
void require_same_shape(const char* op, const Tensor<Real>& a,
                        const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw shape_error(std::string(op) + ": shapes " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()) + " differ");
  }
}

template <class Real>
void axpy(std::vector<Real>& dst, const std::vector<Real>& src, Real c) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += c * src[i];
}

}  // namespace detail

// ---- elementwise and reduction ops ----

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<Real> out(a.shape());
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  auto da = a.ptr(), db = b.ptr(), dout = out.ptr();
  detail::record_op({&a, &b}, out, [da, db, dout] {
    if (dout->grad.empty()) return;
    if (da->requires_grad) {
      detail::ensure_grad(*da);
      detail::axpy(da->grad, dout->grad, Real(1));
    }
    if (db->requires_grad) {
      detail::ensure_grad(*db);
      detail::axpy(db->grad, dout->grad, Real(1));
    }
  });
  return out;
}

// x + b where b's shape is a trailing suffix of x's shape. Covers linear
// biases (b: [d]) and position embeddings (b: [tokens×d] against
// [batch×tokens×d]).
template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& b) {
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  bool suffix = bs.size() <= xs.size() &&
                std::equal(bs.begin(), bs.end(), xs.end() - bs.size());
  if (!suffix || bs.empty()) {
    throw shape_error("add_bias: " + shape_str(bs) +
                      " is not a trailing suffix of " + shape_str(xs));
  }
  Tensor<Real> out(xs);
  const std::size_t span = b.size();
  const std::size_t repeats = x.size() / span;
  const Real* px = x.data();
  const Real* pb = b.data();
  Real* po = out.data();
  for (std::size_t r = 0; r < repeats; ++r)
    for (std::size_t i = 0; i < span; ++i) po[r * span + i] = px[r * span + i] + pb[i];
  auto dx = x.ptr(), db = b.ptr(), dout = out.ptr();
  detail::record_op({&x, &b}, out, [dx, db, dout, span, repeats] {
    if (dout->grad.empty()) return;
    if (dx->requires_grad) {
      detail::ensure_grad(*dx);
      detail::axpy(dx->grad, dout->grad, Real(1));
    }
    if (db->requires_grad) {
      detail::ensure_grad(*db);
      for (std::size_t r = 0; r < repeats; ++r)
        for (std::size_t i = 0; i < span; ++i)
          db->grad[i] += dout->grad[r * span + i];
    }
  });
  return out;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  auto da = a.ptr(), db = b.ptr(), dout = out.ptr();
  detail::record_op({&a, &b}, out, [da, db, dout] {
    if (dout->grad.empty()) return;
    if (da->requires_grad) {
      detail::ensure_grad(*da);
      for (std::size_t i = 0; i < da->grad.size(); ++i)
        da->grad[i] += dout->grad[i] * db->values[i];
    }
    if (db->requires_grad) {
      detail::ensure_grad(*db);
      for (std::size_t i = 0; i < db->grad.size(); ++i)
        db->grad[i] += dout->grad[i] * da->values[i];
    }
  });
  return out;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& x, Real c) {
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = x.data()[i] * c;
  auto dx = x.ptr(), dout = out.ptr();
  detail::record_op({&x}, out, [dx, dout, c] {
    if (dout->grad.empty() || !dx->requires_grad) return;
    detail::ensure_grad(*dx);
    detail::axpy(dx->grad, dout->grad, c);
  });
  return out;
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
  Tensor<Real> out = Tensor<Real>::scalar(s);
  auto dx = x.ptr(), dout = out.ptr();
  detail::record_op({&x}, out, [dx, dout] {
    if (dout->grad.empty() || !dx->requires_grad) return;
    detail::ensure_grad(*dx);
    const Real g = dout->grad[0];
    for (std::size_t i = 0; i < dx->grad.size(); ++i) dx->grad[i] += g;
  });
  return out;
}

// ---- matrix products ----

// a·b with b strictly [k×n]. a may carry extra leading axes; they are
// treated as a block of rows, so [batch×tokens×k]·[k×n] gives
// [batch×tokens×n].
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()));
  }
  const std::size_t k = a.shape().back(), n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<Real> out(std::move(out_shape));
  detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
  auto da = a.ptr(), db = b.ptr(), dout = out.ptr();
  detail::record_op({&a, &b}, out, [da, db, dout, m, k, n] {
    if (dout->grad.empty()) return;
    if (da->requires_grad) {
      detail::ensure_grad(*da);
      detail::gemm_nt(dout->grad.data(), db->values.data(), da->grad.data(), m,
                      n, k, true);
    }
    if (db->requires_grad) {
      detail::ensure_grad(*db);
      detail::gemm_tn(da->values.data(), dout->grad.data(), db->grad.data(), k,
                      m, n, true);
    }
  });
  return out;
}

// Batched product over matching leading batch dims. With transpose_b the
// second factor is given as [batch×n×k] and used as B^T, which is the
// attention-score layout.
template <class Real>
Tensor<Real> batched_matmul(const Tensor<Real>& a, const Tensor<Real>& b,
                            bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw shape_error("batched_matmul: incompatible shapes " +
                      shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (bk != k) {
    throw shape_error("batched_matmul: incompatible shapes " +
                      shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor<Real> out({batch, m, n});
  for (std::size_t t = 0; t < batch; ++t) {
    const Real* pa = a.data() + t * m * k;
    const Real* pb = b.data() + t * k * n;
    Real* po = out.data() + t * m * n;
    if (transpose_b)
      detail::gemm_nt(pa, pb, po, m, k, n, false);
    else
      detail::gemm_nn(pa, pb, po, m, k, n, false);
  }
  auto da = a.ptr(), db = b.ptr(), dout = out.ptr();
  detail::record_op(
      {&a, &b}, out, [da, db, dout, batch, m, k, n, transpose_b] {
        if (dout->grad.empty()) return;
        for (std::size_t t = 0; t < batch; ++t) {
          const Real* go = dout->grad.data() + t * m * n;
          const Real* pa = da->values.data() + t * m * k;
          const Real* pb = db->values.data() + t * k * n;
          if (da->requires_grad) {
            detail::ensure_grad(*da);
            Real* ga = da->grad.data() + t * m * k;
            if (transpose_b)
              detail::gemm_nn(go, pb, ga, m, n, k, true);  // dA = dC·B
            else
              detail::gemm_nt(go, pb, ga, m, n, k, true);  // dA = dC·B^T
          }
          if (db->requires_grad) {
            detail::ensure_grad(*db);
            Real* gb = db->grad.data() + t * k * n;
            if (transpose_b)
              detail::gemm_tn(go, pa, gb, n, m, k, true);  // dB = dC^T·A
            else
              detail::gemm_tn(pa, go, gb, k, m, n, true);  // dB = A^T·dC
          }
        }
      });
  return out;
}

// ---- activations and normalization ----

template <class Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data()[i] = x.data()[i] > Real(0) ? x.data()[i] : Real(0);
  auto dx = x.ptr(), dout = out.ptr();
  detail::record_op({&x}, out, [dx, dout] {
    if (dout->grad.empty() || !dx->requires_grad) return;
    detail::ensure_grad(*dx);
    for (std::size_t i = 0; i < dx->grad.size(); ++i)
      if (dx->values[i] > Real(0)) dx->grad[i] += dout->grad[i];
  });
  return out;
}

// Exact (erf-based) gaussian error linear unit: x·Φ(x).
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  constexpr Real inv_sqrt2 = Real(0.70710678118654752440L);
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real v = x.data()[i];
    out.data()[i] = v * Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
  }
  auto dx = x.ptr(), dout = out.ptr();
  detail::record_op({&x}, out, [dx, dout] {
    if (dout->grad.empty() || !dx->requires_grad) return;
    detail::ensure_grad(*dx);
    constexpr Real inv_sqrt2pi = Real(0.39894228040143267794L);
    for (std::size_t i = 0; i < dx->grad.size(); ++i) {
      const Real v = dx->values[i];
      const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
      const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * v * v);
      dx->grad[i] += dout->grad[i] * (cdf + v * pdf);
    }
  });
  return out;
}

// Softmax over the last axis, stabilized by the row maximum.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw contract_error("softmax: needs a non-empty last axis, got " +
                         shape_str(x.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor<Real> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* px = x.data() + r * d;
    Real* po = out.data() + r * d;
    Real mx = px[0];
    for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, px[i]);
    Real z = 0;
    for (std::size_t i = 0; i < d; ++i) {
      po[i] = std::exp(px[i] - mx);
      z += po[i];
    }
    const Real inv = Real(1) / z;
    for (std::size_t i = 0; i < d; ++i) po[i] *= inv;
  }
  auto dx = x.ptr(), dout = out.ptr();
  detail::record_op({&x}, out, [dx, dout, rows, d] {
    if (dout->grad.empty() || !dx->requires_grad) return;
    detail::ensure_grad(*dx);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = dout->values.data() + r * d;
      const Real* gy = dout->grad.data() + r * d;
      Real* gx = dx->grad.data() + r * d;
      Real dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += gy[i] * y[i];
      for (std::size_t i = 0; i < d; ++i) gx[i] += y[i] * (gy[i] - dot);
    }
  });
  return out;
}

// Normalizes over the last axis with biased variance, then applies the
// per-feature affine pair.
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Real eps) {
  if (x.rank() == 0) {
    throw contract_error("layer_norm: input must have rank >= 1");
  }
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw shape_error("layer_norm: affine shapes " + shape_str(gamma.shape()) +
                      "/" + shape_str(beta.shape()) + " do not match feature axis of " +
                      shape_str(x.shape()));
  }
  if (!(eps > Real(0))) {
    throw contract_error("layer_norm: eps must be positive");
  }
  const std::size_t rows = x.size() / d;
  Tensor<Real> out(x.shape());
  std::vector<Real> xhat(x.size());
  std::vector<Real> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* px = x.data() + r * d;
    Real mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += px[i];
    mean /= Real(d);
    Real var = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const Real c = px[i] - mean;
      var += c * c;
    }
    var /= Real(d);
    const Real inv = Real(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    Real* ph = xhat.data() + r * d;
    Real* po = out.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      ph[i] = (px[i] - mean) * inv;
      po[i] = ph[i] * gamma.data()[i] + beta.data()[i];
    }
  }
  auto dx = x.ptr(), dg = gamma.ptr(), db = beta.ptr(), dout = out.ptr();
  detail::record_op(
      {&x, &gamma, &beta}, out,
      [dx, dg, db, dout, rows, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)] {
        if (dout->grad.empty()) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* gy = dout->grad.data() + r * d;
          const Real* h = xhat.data() + r * d;
          if (dg->requires_grad) {
            detail::ensure_grad(*dg);
            for (std::size_t i = 0; i < d; ++i) dg->grad[i] += gy[i] * h[i];
          }
          if (db->requires_grad) {
            detail::ensure_grad(*db);
            for (std::size_t i = 0; i < d; ++i) db->grad[i] += gy[i];
          }
          if (dx->requires_grad) {
            detail::ensure_grad(*dx);
            Real* gx = dx->grad.data() + r * d;
            Real mean_gh = 0, mean_ghh = 0;
            for (std::size_t i = 0; i < d; ++i) {
              const Real gh = gy[i] * dg->values[i];
              mean_gh += gh;
              mean_ghh += gh * h[i];
            }
            mean_gh /= Real(d);
            mean_ghh /= Real(d);
            for (std::size_t i = 0; i < d; ++i) {
              const Real gh = gy[i] * dg->values[i];
              gx[i] += inv_std[r] * (gh - mean_gh - h[i] * mean_ghh);
            }
          }
        }
      });
  return out;
}

// Mean cross entropy between logits [batch×classes] and integer labels.
template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits,
                           const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw shape_error("cross_entropy: logits must be [batch x classes], got " +
                      shape_str(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw shape_error("cross_entropy: " + std::to_string(labels.size()) +
                      " labels for logits " + shape_str(logits.shape()));
  }
  if (batch == 0) {
    throw contract_error("cross_entropy: empty batch");
  }
  std::vector<Real> probs(logits.size());
  Real loss = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw index_error("cross_entropy: label " + std::to_string(y) +
                        " out of range for " + std::to_string(classes) +
                        " classes");
    }
    const Real* row = logits.data() + b * classes;
    Real mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    Real z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const Real lse = mx + std::log(z);
    loss += lse - row[static_cast<std::size_t>(y)];
    Real* prow = probs.data() + b * classes;
    for (std::size_t c = 0; c < classes; ++c)
      prow[c] = std::exp(row[c] - mx) / z;
  }
  loss /= Real(batch);
  Tensor<Real> out = Tensor<Real>::scalar(loss);
  auto dl = logits.ptr(), dout = out.ptr();
  detail::record_op({&logits}, out,
                    [dl, dout, labels, batch, classes, probs = std::move(probs)] {
                      if (dout->grad.empty() || !dl->requires_grad) return;
                      detail::ensure_grad(*dl);
                      const Real g = dout->grad[0] / Real(batch);
                      for (std::size_t b = 0; b < batch; ++b) {
                        const Real* prow = probs.data() + b * classes;
                        Real* grow = dl->grad.data() + b * classes;
                        for (std::size_t c = 0; c < classes; ++c) {
                          Real delta = prow[c];
                          if (c == static_cast<std::size_t>(labels[b]))
                            delta -= Real(1);
                          grow[c] += g * delta;
                        }
                      }
                    });
  return out;
}

// ---- structural ops for the transformer ----

// [batch×channels×S×S] → [batch×patches×(channels·p·p)], row-major within
// each patch (channel, then row, then column).
template <class Real>
Tensor<Real> im2patches(const Tensor<Real>& images, std::size_t patch) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3)) {
    throw shape_error("im2patches: expected [batch x channels x S x S], got " +
                      shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0), ch = images.dim(1), s = images.dim(2);
  if (patch == 0 || s % patch != 0) {
    throw contract_error("im2patches: image size " + std::to_string(s) +
                         " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t grid = s / patch;
  const std::size_t patches = grid * grid;
  const std::size_t feat = ch * patch * patch;
  Tensor<Real> out({batch, patches, feat});
  const Real* src = images.data();
  Real* dst = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t dy = 0; dy < patch; ++dy)
            for (std::size_t dx2 = 0; dx2 < patch; ++dx2) {
              const std::size_t pi = gy * grid + gx;
              const std::size_t f = (c * patch + dy) * patch + dx2;
              dst[(b * patches + pi) * feat + f] =
                  src[((b * ch + c) * s + gy * patch + dy) * s + gx * patch + dx2];
            }
  auto dim = images.ptr(), dout = out.ptr();
  detail::record_op({&images}, out, [dim, dout, batch, ch, s, patch, grid,
                                     patches, feat] {
    if (dout->grad.empty() || !dim->requires_grad) return;
    detail::ensure_grad(*dim);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx)
          for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t dy = 0; dy < patch; ++dy)
              for (std::size_t dx2 = 0; dx2 < patch; ++dx2) {
                const std::size_t pi = gy * grid + gx;
                const std::size_t f = (c * patch + dy) * patch + dx2;
                dim->grad[((b * ch + c) * s + gy * patch + dy) * s + gx * patch +
                          dx2] += dout->grad[(b * patches + pi) * feat + f];
              }
  });
  return out;
}

// Prepends a learned token to every sequence: [B×P×d] → [B×(P+1)×d].
template <class Real>
Tensor<Real> prepend_token(const Tensor<Real>& x, const Tensor<Real>& token) {
  if (x.rank() != 3 || token.rank() != 2 || token.dim(0) != 1 ||
      token.dim(1) != x.dim(2)) {
    throw shape_error("prepend_token: shapes " + shape_str(x.shape()) +
                      " and " + shape_str(token.shape()) + " do not agree");
  }
  const std::size_t batch = x.dim(0), p = x.dim(1), d = x.dim(2);
  Tensor<Real> out({batch, p + 1, d});
  for (std::size_t b = 0; b < batch; ++b) {
    Real* row = out.data() + b * (p + 1) * d;
    std::copy(token.data(), token.data() + d, row);
    std::copy(x.data() + b * p * d, x.data() + (b + 1) * p * d, row + d);
  }
  auto dx = x.ptr(), dt = token.ptr(), dout = out.ptr();
  detail::record_op({&x, &token}, out, [dx, dt, dout, batch, p, d] {
    if (dout->grad.empty()) return;
    for (std::size_t b = 0; b < batch; ++b) {
      const Real* grow = dout->grad.data() + b * (p + 1) * d;
      if (dt->requires_grad) {
        detail::ensure_grad(*dt);
        for (std::size_t i = 0; i < d; ++i) dt->grad[i] += grow[i];
      }
      if (dx->requires_grad) {
        detail::ensure_grad(*dx);
        Real* gx = dx->grad.data() + b * p * d;
        for (std::size_t i = 0; i < p * d; ++i) gx[i] += grow[d + i];
      }
    }
  });
  return out;
}

// Picks one sequence position: [B×N×d] → [B×d].
template <class Real>
Tensor<Real> select_token(const Tensor<Real>& x, std::size_t index) {
  if (x.rank() != 3) {
    throw shape_error("select_token: expected [batch x tokens x d], got " +
                      shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (index >= n) {
    throw index_error("select_token: token " + std::to_string(index) +
                      " out of " + std::to_string(n));
  }
  Tensor<Real> out({batch, d});
  for (std::size_t b = 0; b < batch; ++b)
    std::copy(x.data() + (b * n + index) * d, x.data() + (b * n + index + 1) * d,
              out.data() + b * d);
  auto dx = x.ptr(), dout = out.ptr();
  detail::record_op({&x}, out, [dx, dout, batch, n, d, index] {
    if (dout->grad.empty() || !dx->requires_grad) return;
    detail::ensure_grad(*dx);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < d; ++i)
        dx->grad[(b * n + index) * d + i] += dout->grad[b * d + i];
  });
  return out;
}

// Extracts q, k or v from a fused projection [B×N×3d] and splits heads:
// result is [(B·heads)×N×(d/heads)]. `which` is 0 for q, 1 for k, 2 for v.
template <class Real>
Tensor<Real> slice_heads(const Tensor<Real>& qkv, std::size_t which,
                         std::size_t heads) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0) {
    throw shape_error("slice_heads: expected [batch x tokens x 3d], got " +
                      shape_str(qkv.shape()));
  }
  if (which > 2) throw contract_error("slice_heads: which must be 0, 1 or 2");
  const std::size_t batch = qkv.dim(0), n = qkv.dim(1), d = qkv.dim(2) / 3;
  if (heads == 0 || d % heads != 0) {
    throw contract_error("slice_heads: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t dh = d / heads;
  Tensor<Real> out({batch * heads, n, dh});
  const Real* src = qkv.data();
  Real* dst = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        std::copy(src + (b * n + t) * 3 * d + which * d + h * dh,
                  src + (b * n + t) * 3 * d + which * d + (h + 1) * dh,
                  dst + ((b * heads + h) * n + t) * dh);
  auto dq = qkv.ptr(), dout = out.ptr();
  detail::record_op({&qkv}, out, [dq, dout, batch, heads, n, d, dh, which] {
    if (dout->grad.empty() || !dq->requires_grad) return;
    detail::ensure_grad(*dq);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t i = 0; i < dh; ++i)
            dq->grad[(b * n + t) * 3 * d + which * d + h * dh + i] +=
                dout->grad[((b * heads + h) * n + t) * dh + i];
  });
  return out;
}

// Inverse of the head split: [(B·heads)×N×dh] → [B×N×(heads·dh)].
template <class Real>
Tensor<Real> merge_heads(const Tensor<Real>& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0) {
    throw shape_error("merge_heads: cannot fold " + std::to_string(heads) +
                      " heads out of " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0) / heads, n = x.dim(1), dh = x.dim(2);
  const std::size_t d = heads * dh;
  Tensor<Real> out({batch, n, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        std::copy(x.data() + ((b * heads + h) * n + t) * dh,
                  x.data() + ((b * heads + h) * n + t + 1) * dh,
                  out.data() + (b * n + t) * d + h * dh);
  auto dx = x.ptr(), dout = out.ptr();
  detail::record_op({&x}, out, [dx, dout, batch, heads, n, dh, d] {
    if (dout->grad.empty() || !dx->requires_grad) return;
    detail::ensure_grad(*dx);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t i = 0; i < dh; ++i)
            dx->grad[((b * heads + h) * n + t) * dh + i] +=
                dout->grad[(b * n + t) * d + h * dh + i];
  });
  return out;
}

// Stochastic depth on a residual branch. Each sample in the batch is kept
// with probability 1-p and rescaled by 1/(1-p), so the branch keeps its
// expectation; dropped samples contribute zero. Inference and p == 0 return
// the input unchanged (same storage, nothing recorded). p == 1 is the
// degenerate all-dropped case.
template <class Real>
Tensor<Real> drop_path(const Tensor<Real>& x, Real p, bool training,
                       RandomStream* rng) {
  if (!(p >= Real(0) && p <= Real(1))) {
    throw contract_error("drop_path: probability must lie in [0, 1]");
  }
  if (x.rank() == 0) {
    throw contract_error("drop_path: input must have a batch axis");
  }
  if (!training || p == Real(0)) return x;
  const std::size_t batch = x.dim(0);
  const std::size_t span = x.size() / batch;
  Tensor<Real> out(x.shape());
  std::vector<Real> mask(batch);
  if (p == Real(1)) {
    std::fill(mask.begin(), mask.end(), Real(0));
  } else {
    if (!rng) {
      throw contract_error("drop_path: training with p > 0 needs a random stream");
    }
    const Real keep_scale = Real(1) / (Real(1) - p);
    for (std::size_t b = 0; b < batch; ++b)
      mask[b] = rng->uniform() < double(Real(1) - p) ? keep_scale : Real(0);
  }
  for (std::size_t b = 0; b < batch; ++b) {
    const Real m = mask[b];
    const Real* px = x.data() + b * span;
    Real* po = out.data() + b * span;
    for (std::size_t i = 0; i < span; ++i) po[i] = px[i] * m;
  }
  auto dx = x.ptr(), dout = out.ptr();
  detail::record_op({&x}, out, [dx, dout, batch, span, mask = std::move(mask)] {
    if (dout->grad.empty() || !dx->requires_grad) return;
    detail::ensure_grad(*dx);
    for (std::size_t b = 0; b < batch; ++b) {
      const Real m = mask[b];
      for (std::size_t i = 0; i < span; ++i)
        dx->grad[b * span + i] += dout->grad[b * span + i] * m;
    }
  });
  return out;
}

}  // namespace scalenet
