#pragma once

#include <algorithm>
#include <cstddef>

#include "scalenet/mapping.hpp"
#include "scalenet/ops.hpp"
#include "scalenet/random.hpp"
#include "scalenet/tensor.hpp"

namespace scalenet {

// Low-rank adjustment attached to one linear layer. Weights are stored
// input-major like every other linear here (y = x·W), so `down` is
// [in×rank] and `up` is [rank×out]. `up` starts at zero, which makes a
// freshly adjusted layer compute exactly what its host computes.
template <class Real>
struct Adjustment {
  AdjustKind kind = AdjustKind::parallel_adapter;
  std::size_t rank = 0;
  Tensor<Real> down;
  Tensor<Real> up;
};

template <class Real>
Adjustment<Real> make_adjustment(AdjustKind kind, std::size_t in,
                                 std::size_t out, std::size_t rank,
                                 RandomStream& rng) {
  if (rank == 0 || rank > std::min(in, out)) {
    throw contract_error("make_adjustment: rank " + std::to_string(rank) +
                         " invalid for a " + std::to_string(in) + "x" +
                         std::to_string(out) + " host");
  }
  Adjustment<Real> adj;
  adj.kind = kind;
  adj.rank = rank;
  adj.down = Tensor<Real>({in, rank});
  for (std::size_t i = 0; i < adj.down.size(); ++i)
    adj.down.data()[i] = Real(rng.truncated_normal(0.02));
  adj.up = Tensor<Real>({rank, out});
  adj.down.set_requires_grad(true);
  adj.up.set_requires_grad(true);
  return adj;
}

// y = x·W + x·down·up. The low-rank product is evaluated factor by factor;
// W and down·up are never merged into one matrix.
template <class Real>
Tensor<Real> lora_forward(const Tensor<Real>& x, const Tensor<Real>& weight,
                          const Adjustment<Real>& adj) {
  Tensor<Real> host = matmul(x, weight);
  Tensor<Real> low = matmul(matmul(x, adj.down), adj.up);
  return add(host, low);
}

// y = x·W + relu(x·down)·up, the adapter running parallel to its host.
template <class Real>
Tensor<Real> adapter_forward(const Tensor<Real>& x, const Tensor<Real>& weight,
                             const Adjustment<Real>& adj) {
  Tensor<Real> host = matmul(x, weight);
  Tensor<Real> low = matmul(relu(matmul(x, adj.down)), adj.up);
  return add(host, low);
}

// Linear layer with an optional adjustment and bias.
template <class Real>
Tensor<Real> adjusted_linear(const Tensor<Real>& x, const Tensor<Real>& weight,
                             const Tensor<Real>& bias,
                             const std::optional<Adjustment<Real>>& adj) {
  Tensor<Real> y;
  if (!adj.has_value()) {
    y = matmul(x, weight);
  } else if (adj->kind == AdjustKind::lora) {
    y = lora_forward(x, weight, *adj);
  } else {
    y = adapter_forward(x, weight, *adj);
  }
  return add_bias(y, bias);
}

}  // namespace scalenet
