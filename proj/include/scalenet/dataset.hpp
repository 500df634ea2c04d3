#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "scalenet/errors.hpp"
#include "scalenet/random.hpp"
#include "scalenet/tensor.hpp"

namespace scalenet {

// Gaussian-prototype classification data. Every class owns one random
// prototype image; samples are that prototype plus per-pixel noise, so the
// label is recoverable by nearest-prototype matching with near certainty at
// the default noise level.
template <class Real>
struct SyntheticDataset {
  Tensor<Real> images;      // [n×channels×S×S]
  std::vector<int> labels;  // class per sample, balanced within ±1
  Tensor<Real> prototypes;  // [classes×channels×S×S]
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const { return prototypes.dim(0); }
};

template <class Real>
SyntheticDataset<Real> generate_dataset(std::size_t classes,
                                        std::size_t samples,
                                        std::size_t image_size,
                                        std::uint64_t seed,
                                        std::size_t channels = 3,
                                        double noise_std = 0.5) {
  if (classes == 0 || image_size == 0 || channels == 0) {
    throw contract_error("generate_dataset: classes, image size and channels "
                         "must be positive");
  }
  if (noise_std < 0) {
    throw contract_error("generate_dataset: noise level must be non-negative");
  }
  const std::size_t pix = channels * image_size * image_size;
  SyntheticDataset<Real> ds;
  ds.seed = seed;
  ds.prototypes = Tensor<Real>({classes, channels, image_size, image_size});
  RandomStream proto_rng(derive_seed(seed, 21));
  for (std::size_t i = 0; i < ds.prototypes.size(); ++i)
    ds.prototypes.data()[i] = Real(proto_rng.gaussian());
  ds.images = Tensor<Real>({samples, channels, image_size, image_size});
  ds.labels.resize(samples);
  RandomStream noise_rng(derive_seed(seed, 22));
  for (std::size_t i = 0; i < samples; ++i) {
    const std::size_t label = i % classes;  // round-robin keeps classes balanced
    ds.labels[i] = int(label);
    const Real* proto = ds.prototypes.data() + label * pix;
    Real* img = ds.images.data() + i * pix;
    for (std::size_t p = 0; p < pix; ++p)
      img[p] = proto[p] + Real(noise_std * noise_rng.gaussian());
  }
  return ds;
}

// Contiguous sub-range view (copied) of a dataset; prototypes are shared.
template <class Real>
SyntheticDataset<Real> slice_dataset(const SyntheticDataset<Real>& ds,
                                     std::size_t start, std::size_t count) {
  if (start + count > ds.size()) {
    throw index_error("slice_dataset: range " + std::to_string(start) + "+" +
                      std::to_string(count) + " exceeds " +
                      std::to_string(ds.size()) + " samples");
  }
  const std::size_t pix = ds.images.size() / std::max<std::size_t>(ds.size(), 1);
  SyntheticDataset<Real> out;
  out.seed = ds.seed;
  out.prototypes = ds.prototypes;
  Shape shape = ds.images.shape();
  shape[0] = count;
  out.images = Tensor<Real>(shape);
  std::copy(ds.images.data() + start * pix, ds.images.data() + (start + count) * pix,
            out.images.data());
  out.labels.assign(ds.labels.begin() + long(start),
                    ds.labels.begin() + long(start + count));
  return out;
}

// One generation pass cut into train/eval so both splits share prototypes.
template <class Real>
std::pair<SyntheticDataset<Real>, SyntheticDataset<Real>> generate_splits(
    std::size_t classes, std::size_t train_samples, std::size_t eval_samples,
    std::size_t image_size, std::uint64_t seed, std::size_t channels = 3,
    double noise_std = 0.5) {
  SyntheticDataset<Real> all = generate_dataset<Real>(
      classes, train_samples + eval_samples, image_size, seed, channels,
      noise_std);
  return {slice_dataset(all, 0, train_samples),
          slice_dataset(all, train_samples, eval_samples)};
}

// Copies selected samples into a batch tensor plus label vector.
template <class Real>
std::pair<Tensor<Real>, std::vector<int>> gather_batch(
    const SyntheticDataset<Real>& ds, const std::vector<std::size_t>& order,
    std::size_t start, std::size_t count) {
  const std::size_t pix = ds.images.size() / ds.size();
  Shape shape = ds.images.shape();
  shape[0] = count;
  Tensor<Real> images(shape);
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t src = order[start + i];
    std::copy(ds.images.data() + src * pix, ds.images.data() + (src + 1) * pix,
              images.data() + i * pix);
    labels[i] = ds.labels[src];
  }
  return {std::move(images), std::move(labels)};
}

// Accuracy of the nearest-prototype classifier; the sanity oracle for the
// generator.
template <class Real>
double nearest_prototype_accuracy(const SyntheticDataset<Real>& ds) {
  if (ds.size() == 0) {
    throw contract_error("nearest_prototype_accuracy: empty dataset");
  }
  const std::size_t pix = ds.images.size() / ds.size();
  const std::size_t classes = ds.classes();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Real* img = ds.images.data() + i * pix;
    double best = 0;
    std::size_t best_c = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const Real* proto = ds.prototypes.data() + c * pix;
      double dist = 0;
      for (std::size_t p = 0; p < pix; ++p) {
        const double delta = double(img[p]) - double(proto[p]);
        dist += delta * delta;
      }
      if (c == 0 || dist < best) {
        best = dist;
        best_c = c;
      }
    }
    if (int(best_c) == ds.labels[i]) ++correct;
  }
  return double(correct) / double(ds.size());
}

}  // namespace scalenet
