// Standalone acceptance gate. Runs every release-blocking check in order,
// prints one PASS/FAIL line per check with the measured values, and exits
// nonzero if anything failed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "scalenet/scalenet.hpp"

using namespace scalenet;

namespace {

int failures = 0;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void outcome(int index, const std::string& name, bool ok,
             const std::string& detail) {
  std::printf("[%s] %2d %s: %s\n", ok ? "PASS" : "FAIL", index, name.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

template <class Fn>
void guarded(int index, const std::string& name, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    outcome(index, name, false, std::string("threw: ") + e.what());
  }
}

template <class Real>
Tensor<Real> randn(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  RandomStream rng(seed);
  Tensor<Real> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i)
    t.data()[i] = Real(stddev * rng.gaussian());
  return t;
}

// Scalar readout with unequal weights, so permuted or missorted gradients
// cannot cancel out.
Tensor<double> weigh(const Tensor<double>& y) {
  Tensor<double> c(y.shape());
  for (std::size_t i = 0; i < c.size(); ++i)
    c.data()[i] = 0.3 + 0.11 * double(i % 7);
  return sum(mul(y, c));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir() {
  const auto dir =
      std::filesystem::temp_directory_path() / "scalenet_acceptance";
  std::filesystem::create_directories(dir);
  return dir;
}

// FNV over the byte images of a set of parameters, deduplicated by storage,
// in canonical visit order. `inside` selects whether to hash the named set
// or its complement.
std::uint64_t hash_params(Model<float>& m,
                          const std::unordered_set<std::string>& names,
                          bool inside) {
  std::unordered_set<const TensorData<float>*> seen;
  std::uint64_t h = 0xcbf29ce484222325ull;
  detail::visit_params(m, [&](const std::string& name, Tensor<float>& t) {
    if ((names.count(name) != 0) != inside) return;
    if (!seen.insert(t.ptr().get()).second) return;
    h = fnv1a64(t.data(), t.size() * sizeof(float), h);
  });
  return h;
}

// ---- 1: finite-difference gradient checks ----

void check_gradients(int idx) {
  const auto t0 = std::chrono::steady_clock::now();
  const double h = 1e-5;
  double worst = 0;
  std::string worst_name = "none";
  std::size_t checks = 0;
  auto note = [&](const std::string& name, double err) {
    ++checks;
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  };
  using T = Tensor<double>;

  {
    T a = randn<double>({2, 3}, 1), b = randn<double>({2, 3}, 2);
    note("add/a", finite_difference_check(
                      [&](T& x) { return weigh(add(x, b)); }, a, h));
    note("add/b", finite_difference_check(
                      [&](T& x) { return weigh(add(a, x)); }, b, h));
    note("mul", finite_difference_check(
                    [&](T& x) { return weigh(mul(x, b)); }, a, h));
    note("scale", finite_difference_check(
                      [&](T& x) { return weigh(scale(x, 1.7)); }, a, h));
    note("sum", finite_difference_check([&](T& x) { return sum(x); }, a, h));
  }
  {
    T x = randn<double>({2, 4}, 3), b = randn<double>({4}, 4);
    note("add_bias/x", finite_difference_check(
                           [&](T& t) { return weigh(add_bias(t, b)); }, x, h));
    note("add_bias/b", finite_difference_check(
                           [&](T& t) { return weigh(add_bias(x, t)); }, b, h));
    T pos = randn<double>({3, 4}, 5), seq = randn<double>({2, 3, 4}, 6);
    note("add_bias/suffix",
         finite_difference_check(
             [&](T& t) { return weigh(add_bias(seq, t)); }, pos, h));
  }
  {
    T a = randn<double>({2, 3}, 7), b = randn<double>({3, 4}, 8);
    note("matmul/a", finite_difference_check(
                         [&](T& x) { return weigh(matmul(x, b)); }, a, h));
    note("matmul/b", finite_difference_check(
                         [&](T& x) { return weigh(matmul(a, x)); }, b, h));
    T a3 = randn<double>({2, 2, 3}, 9);
    note("matmul/rank3",
         finite_difference_check(
             [&](T& x) { return weigh(matmul(x, b)); }, a3, h));
  }
  {
    T a = randn<double>({2, 2, 3}, 10), b = randn<double>({2, 3, 2}, 11);
    note("batched_matmul/a",
         finite_difference_check(
             [&](T& x) { return weigh(batched_matmul(x, b)); }, a, h));
    note("batched_matmul/b",
         finite_difference_check(
             [&](T& x) { return weigh(batched_matmul(a, x)); }, b, h));
    T bt = randn<double>({2, 2, 3}, 12);
    note("batched_matmul/bT",
         finite_difference_check(
             [&](T& x) { return weigh(batched_matmul(a, x, true)); }, bt, h));
  }
  {
    // Keep pointwise kinks away from the probe range.
    T x = randn<double>({2, 3}, 13);
    for (std::size_t i = 0; i < x.size(); ++i)
      x.data()[i] += x.data()[i] >= 0 ? 0.3 : -0.3;
    note("relu", finite_difference_check(
                     [&](T& t) { return weigh(relu(t)); }, x, h));
    note("gelu", finite_difference_check(
                     [&](T& t) { return weigh(gelu(t)); }, x, h));
  }
  {
    T x = randn<double>({2, 4}, 14);
    note("softmax", finite_difference_check(
                        [&](T& t) { return weigh(softmax(t)); }, x, h));
    T g({4}, std::vector<double>{1.1, 0.9, 1.2, 0.8});
    T b = randn<double>({4}, 15);
    note("layer_norm/x",
         finite_difference_check(
             [&](T& t) { return weigh(layer_norm(t, g, b, 1e-6)); }, x, h));
    note("layer_norm/gamma",
         finite_difference_check(
             [&](T& t) { return weigh(layer_norm(x, t, b, 1e-6)); }, g, h));
    note("layer_norm/beta",
         finite_difference_check(
             [&](T& t) { return weigh(layer_norm(x, g, t, 1e-6)); }, b, h));
  }
  {
    T logits = randn<double>({3, 4}, 16);
    const std::vector<int> labels{0, 1, 2};
    note("cross_entropy",
         finite_difference_check(
             [&](T& t) { return cross_entropy(t, labels); }, logits, h));
  }
  {
    T images = randn<double>({2, 2, 4, 4}, 17);
    note("im2patches",
         finite_difference_check(
             [&](T& t) { return weigh(im2patches(t, 2)); }, images, h));
  }
  {
    T x = randn<double>({2, 3, 4}, 18), tok = randn<double>({1, 4}, 19);
    note("prepend_token/x",
         finite_difference_check(
             [&](T& t) { return weigh(prepend_token(t, tok)); }, x, h));
    note("prepend_token/token",
         finite_difference_check(
             [&](T& t) { return weigh(prepend_token(x, t)); }, tok, h));
    note("select_token",
         finite_difference_check(
             [&](T& t) { return weigh(select_token(t, 0)); }, x, h));
  }
  {
    T qkv = randn<double>({2, 3, 12}, 20);
    for (std::size_t which : {0, 1, 2}) {
      note("slice_heads/" + std::to_string(which),
           finite_difference_check(
               [&, which](T& t) { return weigh(slice_heads(t, which, 2)); },
               qkv, h));
    }
    T heads = randn<double>({4, 3, 2}, 21);
    note("merge_heads",
         finite_difference_check(
             [&](T& t) { return weigh(merge_heads(t, 2)); }, heads, h));
  }
  {
    T x = randn<double>({3, 4}, 22);
    note("drop_path", finite_difference_check(
                          [&](T& t) {
                            RandomStream rng(99);
                            return weigh(drop_path(t, 0.4, true, &rng));
                          },
                          x, h));
  }

  // Whole tiny model: loss gradient with respect to every parameter.
  {
    ViTConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.channels = 1;
    cfg.depth = 2;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.mlp_ratio = 2.0;
    cfg.classes = 3;
    Model<double> m = init_model<double>(cfg, 23);
    Tensor<double> images = randn<double>({3, 1, 4, 4}, 24);
    const std::vector<int> labels{0, 1, 2};
    for (auto& [name, param] : named_parameters(m)) {
      note("model/" + name,
           finite_difference_check(
               [&](Tensor<double>&) {
                 return cross_entropy(model_forward(images, m), labels);
               },
               param, h));
      zero_grad(m);
    }
  }

  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  outcome(idx, "operator and model gradients match finite differences",
          worst < 1e-6 && seconds < 60,
          "worst rel err " + fmt(worst) + " (" + worst_name + ") over " +
              std::to_string(checks) + " checks in " + fmt(seconds) + " s");
}

// ---- 2: shared gradient equals the sum over unshared instances ----

void check_shared_gradients(int idx) {
  ViTConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 2;
  cfg.channels = 1;
  cfg.depth = 2;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.classes = 3;
  Model<double> base = init_model<double>(cfg, 7);
  Model<double> shared =
      expand_model(base, build_mapping(MappingKind::cyclic, 2, 4), true);
  Model<double> unshared = clone_model_unshared(shared);

  Tensor<double> images = randn<double>({4, 1, 4, 4}, 2);
  const std::vector<int> labels{0, 1, 2, 0};
  {
    TapeScope<double> scope;
    backward(cross_entropy(model_forward(images, shared), labels));
  }
  {
    TapeScope<double> scope;
    backward(cross_entropy(model_forward(images, unshared), labels));
  }

  double max_diff = 0;
  for (std::size_t src = 0; src < 2; ++src) {
    auto tensors = [](const TransformerBlock<double>& b) {
      return std::vector<const Tensor<double>*>{
          &b.qkv_weight, &b.qkv_bias, &b.proj_weight, &b.proj_bias,
          &b.fc1_weight, &b.fc1_bias, &b.fc2_weight, &b.fc2_bias};
    };
    const auto ts = tensors(shared.blocks[src]);
    const auto ua = tensors(unshared.blocks[src]);
    const auto ub = tensors(unshared.blocks[src + 2]);
    for (std::size_t k = 0; k < ts.size(); ++k) {
      for (std::size_t i = 0; i < ts[k]->size(); ++i) {
        const double want = ua[k]->grad()[i] + ub[k]->grad()[i];
        max_diff = std::max(max_diff, std::abs(ts[k]->grad()[i] - want));
      }
    }
  }
  outcome(idx, "shared-weight gradient equals the sum over instances",
          max_diff < 1e-10, "max abs deviation " + fmt(max_diff));
}

// ---- 3: identity expansion with zero-initialized adjustments ----

void check_identity_expansion(int idx) {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.depth = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.classes = 4;
  Model<float> base = init_model<float>(cfg, 11);
  Tensor<float> probe = randn<float>({5, 3, 8, 8}, 31);
  Tensor<float> want = model_forward(probe, base);

  bool all_equal = true;
  for (AdjustKind kind : {AdjustKind::lora, AdjustKind::parallel_adapter}) {
    Model<float> expanded =
        expand_model(base, build_mapping(MappingKind::identity, 2, 2), true,
                     AdjustConfig{kind, 4}, std::nullopt, 5);
    Tensor<float> got = model_forward(probe, expanded);
    all_equal = all_equal && got.shape() == want.shape() &&
                std::memcmp(got.data(), want.data(),
                            want.size() * sizeof(float)) == 0;
  }
  outcome(idx, "identity expansion with fresh adjustments is bit-exact",
          all_equal,
          all_equal ? "logits identical for both adjustment kinds"
                    : "logits diverged");
}

// ---- 4: trainable-fraction arithmetic ----

void check_parameter_fraction(int idx) {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.depth = 2;
  cfg.dim = 768;
  cfg.heads = 12;
  cfg.mlp_ratio = 1.0;
  cfg.classes = 4;
  Model<float> base = init_model<float>(cfg, 1);
  Model<float> expanded =
      expand_model(base, build_mapping(MappingKind::cyclic, 2, 4), true,
                   AdjustConfig{AdjustKind::parallel_adapter, 16});

  const std::size_t mlp_total =
      count_parameters(expanded, false, CountScope::mlp_weights);
  const std::size_t mlp_unique =
      count_parameters(expanded, true, CountScope::mlp_weights_and_adjust);
  const double measured = double(mlp_unique) / double(mlp_total);
  const double closed = parameter_fraction(2, 2, 768, 16);
  const double expected = 832.0 / 1536.0;

  const bool cross_check = mlp_unique * 1536 == mlp_total * 832;
  const bool limit = parameter_fraction(12, 2, 768, 0) == 0.5;
  const bool ok =
      measured == closed && closed == expected && cross_check && limit;
  outcome(idx, "trainable fraction matches the closed form", ok,
          "counted " + std::to_string(mlp_unique) + "/" +
              std::to_string(mlp_total) + " = " + fmt(measured) +
              ", closed form " + fmt(closed) + ", rank-0 limit " +
              fmt(parameter_fraction(12, 2, 768, 0)));
}

// ---- 5: layer mapping tables ----

void check_mapping_tables(int idx) {
  const std::vector<int> repeat{0, 1, 2, 0, 1, 2};
  const std::vector<int> neighbor{0, 0, 1, 1, 2, 2};
  const auto cyc = build_mapping(MappingKind::cyclic, 3, 6).table;
  const auto stk = build_mapping(MappingKind::stack, 3, 6).table;
  const auto itp = build_mapping(MappingKind::interpolate, 3, 6).table;
  const bool ok = cyc == repeat && stk == repeat && itp == neighbor;
  auto show = [](const std::vector<int>& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.size(); ++i)
      s += (i ? "," : "") + std::to_string(t[i]);
    return s + "]";
  };
  outcome(idx, "doubling maps lay out sources as expected", ok,
          "cyclic " + show(cyc) + ", stack " + show(stk) + ", interpolate " +
              show(itp));
}

// ---- 6: expanded finetuning holds its own against the baselines ----

void check_training_ordering(int idx) {
  const auto t0 = std::chrono::steady_clock::now();
  ViTConfig base_cfg;
  base_cfg.image_size = 8;
  base_cfg.patch_size = 4;
  base_cfg.channels = 3;
  base_cfg.depth = 4;
  base_cfg.dim = 32;
  base_cfg.heads = 4;
  base_cfg.mlp_ratio = 2.0;
  base_cfg.classes = 4;

  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 64;
  tc.lr_init = 1e-3;
  tc.lr_final = 1e-5;
  tc.weight_decay = 0.01;

  double sum_base = 0, sum_expanded = 0, sum_scratch = 0;
  const int seeds = 3;
  for (int s = 1; s <= seeds; ++s) {
    auto [train_set, eval_set] =
        generate_splits<float>(4, 2000, 500, 8, 100 + s, 3, 0.5);

    Model<float> base = init_model<float>(base_cfg, 10 + s);
    TrainConfig pre = tc;
    pre.seed = 10 + s;
    const double acc_base =
        train(base, train_set, eval_set, pre).epochs.back().eval_acc;

    Model<float> expanded =
        expand_model(base, build_mapping(MappingKind::cyclic, 4, 8), true,
                     AdjustConfig{AdjustKind::parallel_adapter, 4},
                     std::nullopt, 50 + s);
    TrainConfig ft = tc;
    ft.policy = TrainPolicy::adjustment_only;
    ft.seed = 20 + s;
    const double acc_expanded =
        train(expanded, train_set, eval_set, ft).epochs.back().eval_acc;

    ViTConfig deep_cfg = base_cfg;
    deep_cfg.depth = 8;
    Model<float> scratch = init_model<float>(deep_cfg, 30 + s);
    TrainConfig sc = tc;
    sc.seed = 40 + s;
    const double acc_scratch =
        train(scratch, train_set, eval_set, sc).epochs.back().eval_acc;

    std::printf("    seed %d: base %.4f expanded %.4f scratch-2x %.4f\n", s,
                acc_base, acc_expanded, acc_scratch);
    std::fflush(stdout);
    sum_base += acc_base;
    sum_expanded += acc_expanded;
    sum_scratch += acc_scratch;
  }
  const double mean_base = sum_base / seeds;
  const double mean_expanded = sum_expanded / seeds;
  const double mean_scratch = sum_scratch / seeds;
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  const double slack = 0.005;
  const bool ok = mean_expanded + slack >= mean_base &&
                  mean_expanded + slack >= mean_scratch && seconds < 900;
  outcome(idx, "expanded finetuning matches or beats both baselines", ok,
          "mean eval acc: base " + fmt(mean_base) + ", expanded " +
              fmt(mean_expanded) + ", scratch-2x " + fmt(mean_scratch) +
              " (tie slack 0.005) in " + fmt(seconds) + " s");
}

// ---- 7: adjustment-only training leaves the backbone bytes alone ----

void check_frozen_backbone(int idx) {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.depth = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.classes = 4;
  Model<float> base = init_model<float>(cfg, 5);
  Model<float> expanded =
      expand_model(base, build_mapping(MappingKind::cyclic, 2, 4), true,
                   AdjustConfig{AdjustKind::parallel_adapter, 4}, std::nullopt,
                   9);

  const std::vector<std::string> tuned =
      select_trainable(expanded, TrainPolicy::adjustment_only);
  const std::unordered_set<std::string> tuned_set(tuned.begin(), tuned.end());
  const std::uint64_t frozen_before = hash_params(expanded, tuned_set, false);
  const std::uint64_t tuned_before = hash_params(expanded, tuned_set, true);

  auto [train_set, eval_set] = generate_splits<float>(4, 128, 64, 8, 3);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 32;
  tc.lr_init = 1e-3;
  tc.lr_final = 1e-5;
  tc.policy = TrainPolicy::adjustment_only;
  tc.seed = 2;
  train(expanded, train_set, eval_set, tc);

  const std::uint64_t frozen_after = hash_params(expanded, tuned_set, false);
  const std::uint64_t tuned_after = hash_params(expanded, tuned_set, true);
  const bool ok = frozen_before == frozen_after && tuned_before != tuned_after;
  char detail[160];
  std::snprintf(detail, sizeof detail,
                "backbone %016llx -> %016llx, tuned set %schanged",
                (unsigned long long)frozen_before,
                (unsigned long long)frozen_after,
                tuned_before != tuned_after ? "" : "un");
  outcome(idx, "adjustment-only training freezes the backbone bytes", ok,
          detail);
}

// ---- 8: representation-similarity invariances ----

void check_cka_properties(int idx) {
  double max_dev = 0;
  Tensor<double> x = randn<double>({24, 6}, 3);
  max_dev = std::max(max_dev, std::abs(linear_cka(x, x) - 1.0));

  Tensor<double> rotated({24, 6});
  const double c = std::cos(0.61), s = std::sin(0.61);
  for (std::size_t i = 0; i < 24; ++i) {
    const double* row = x.data() + i * 6;
    double* out = rotated.data() + i * 6;
    for (std::size_t pair = 0; pair < 3; ++pair) {
      out[2 * pair] = c * row[2 * pair] - s * row[2 * pair + 1];
      out[2 * pair + 1] = s * row[2 * pair] + c * row[2 * pair + 1];
    }
  }
  max_dev = std::max(max_dev, std::abs(linear_cka(x, rotated) - 1.0));

  Tensor<double> scaled = x.clone();
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled.data()[i] *= -2.5;
  max_dev = std::max(max_dev, std::abs(linear_cka(x, scaled) - 1.0));

  ViTConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 2;
  cfg.channels = 2;
  cfg.depth = 2;
  cfg.dim = 6;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.classes = 3;
  Model<double> m = init_model<double>(cfg, 5);
  Model<double> expanded =
      expand_model(m, build_mapping(MappingKind::identity, 2, 2), true,
                   AdjustConfig{AdjustKind::lora, 2});
  Tensor<double> probe = randn<double>({6, 2, 4, 4}, 8);
  CkaMatrix mat = cka_matrix(m, expanded, probe);
  for (std::size_t i = 0; i < mat.rows; ++i)
    max_dev = std::max(max_dev, std::abs(mat.at(i, i) - 1.0));

  outcome(idx,
          "layer similarity is exact under identity, rotation and scaling",
          max_dev < 1e-10, "max deviation from 1 is " + fmt(max_dev));
}

// ---- 9: gradient profile length tracks unique layer groups ----

void check_profile_length(int idx) {
  ViTConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 2;
  cfg.channels = 1;
  cfg.depth = 3;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.classes = 3;
  Model<double> base = init_model<double>(cfg, 6);
  LayerMapping mapping = build_mapping(MappingKind::cyclic, 3, 6);
  Model<double> shared = expand_model(base, mapping, true);
  Model<double> unshared = expand_model(base, mapping, false);

  Tensor<double> images = randn<double>({4, 1, 4, 4}, 9);
  const std::vector<int> labels{0, 1, 2, 0};
  const std::size_t n_base = grad_norm_profile(base, images, labels).norms.size();
  const std::size_t n_shared =
      grad_norm_profile(shared, images, labels).norms.size();
  const std::size_t n_unshared =
      grad_norm_profile(unshared, images, labels).norms.size();
  const bool ok = n_base == 3 && n_shared == 3 && n_unshared == 6;
  outcome(idx, "profile length counts storage groups, not instances", ok,
          "base " + std::to_string(n_base) + ", shared 2x " +
              std::to_string(n_shared) + ", unshared 2x " +
              std::to_string(n_unshared));
}

// ---- 10: determinism and checkpoint sizes ----

void check_reproducibility_and_sizes(int idx) {
  const auto dir = scratch_dir();

  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.depth = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.classes = 4;
  auto [train_set, eval_set] = generate_splits<float>(4, 128, 64, 8, 77);
  auto run = [&](const std::filesystem::path& path) {
    Model<float> m = init_model<float>(cfg, 42);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 32;
    tc.lr_init = 1e-3;
    tc.lr_final = 1e-5;
    tc.drop_path_rate = 0.1;
    tc.seed = 13;
    TrainReport r = train(m, train_set, eval_set, tc);
    save_checkpoint(m, path.string());
    return r;
  };
  const TrainReport r1 = run(dir / "run1.ckpt");
  const TrainReport r2 = run(dir / "run2.ckpt");
  bool reports_equal = r1.epochs.size() == r2.epochs.size();
  for (std::size_t i = 0; reports_equal && i < r1.epochs.size(); ++i) {
    const EpochRecord &a = r1.epochs[i], &b = r2.epochs[i];
    reports_equal = a.epoch == b.epoch && a.lr == b.lr &&
                    a.train_loss == b.train_loss &&
                    a.train_acc == b.train_acc && a.eval_loss == b.eval_loss &&
                    a.eval_acc == b.eval_acc;
  }
  const bool files_equal =
      read_file(dir / "run1.ckpt") == read_file(dir / "run2.ckpt");

  ViTConfig size_cfg;
  size_cfg.image_size = 8;
  size_cfg.patch_size = 4;
  size_cfg.channels = 3;
  size_cfg.depth = 2;
  size_cfg.dim = 64;
  size_cfg.heads = 4;
  size_cfg.mlp_ratio = 4.0;
  size_cfg.classes = 4;
  Model<float> base = init_model<float>(size_cfg, 3);
  LayerMapping mapping = build_mapping(MappingKind::cyclic, 2, 4);
  Model<float> with_adjust =
      expand_model(base, mapping, true, AdjustConfig{AdjustKind::lora, 2});
  Model<float> copies = expand_model(base, mapping, false);
  save_checkpoint(base, (dir / "base.ckpt").string());
  save_checkpoint(with_adjust, (dir / "shared.ckpt").string());
  save_checkpoint(copies, (dir / "unshared.ckpt").string());
  const double base_size = double(std::filesystem::file_size(dir / "base.ckpt"));
  const double shared_ratio =
      double(std::filesystem::file_size(dir / "shared.ckpt")) / base_size;
  const double unshared_ratio =
      double(std::filesystem::file_size(dir / "unshared.ckpt")) / base_size;

  const bool ok = reports_equal && files_equal && shared_ratio < 1.2 &&
                  unshared_ratio > 1.8;
  outcome(idx, "training is deterministic and shared checkpoints stay small",
          ok,
          std::string("reports ") + (reports_equal ? "equal" : "differ") +
              ", files " + (files_equal ? "identical" : "differ") +
              ", size vs base: shared-with-adjust " + fmt(shared_ratio) +
              "x, unshared " + fmt(unshared_ratio) + "x");
  std::filesystem::remove_all(dir);
}

// ---- 11: stochastic depth is unbiased and inert when disabled ----

void check_drop_path(int idx) {
  double worst_rel = 0;
  for (double p : {0.1, 0.5}) {
    RandomStream rng(4242 + std::uint64_t(p * 10));
    Tensor<float> x({100, 1}, 1.0f);
    double total = 0;
    std::size_t n = 0;
    for (int iter = 0; iter < 100; ++iter) {
      Tensor<float> y = drop_path(x, float(p), true, &rng);
      for (float v : y.values()) {
        total += double(v);
        ++n;
      }
    }
    const double mean = total / double(n);
    worst_rel = std::max(worst_rel, std::abs(mean - 1.0));
  }

  RandomStream rng(1);
  Tensor<float> x({4, 2}, 1.0f);
  const bool identity_p0 = drop_path(x, 0.0f, true, &rng).same_storage(x);
  const bool identity_eval = drop_path(x, 0.5f, false, &rng).same_storage(x);

  const bool ok = worst_rel < 0.02 && identity_p0 && identity_eval;
  outcome(idx, "stochastic depth keeps expectations and disables cleanly", ok,
          "worst relative bias " + fmt(worst_rel) + " over 10000 draws" +
              (identity_p0 && identity_eval ? ", identity paths share storage"
                                            : ", identity path copied"));
}

}  // namespace

int main() {
  std::printf("running acceptance checks\n");
  guarded(1, "operator and model gradients match finite differences",
          [] { check_gradients(1); });
  guarded(2, "shared-weight gradient equals the sum over instances",
          [] { check_shared_gradients(2); });
  guarded(3, "identity expansion with fresh adjustments is bit-exact",
          [] { check_identity_expansion(3); });
  guarded(4, "trainable fraction matches the closed form",
          [] { check_parameter_fraction(4); });
  guarded(5, "doubling maps lay out sources as expected",
          [] { check_mapping_tables(5); });
  guarded(6, "expanded finetuning matches or beats both baselines",
          [] { check_training_ordering(6); });
  guarded(7, "adjustment-only training freezes the backbone bytes",
          [] { check_frozen_backbone(7); });
  guarded(8, "layer similarity is exact under identity, rotation and scaling",
          [] { check_cka_properties(8); });
  guarded(9, "profile length counts storage groups, not instances",
          [] { check_profile_length(9); });
  guarded(10, "training is deterministic and shared checkpoints stay small",
          [] { check_reproducibility_and_sizes(10); });
  guarded(11, "stochastic depth keeps expectations and disables cleanly",
          [] { check_drop_path(11); });

  if (failures == 0) {
    std::printf("all 11 checks passed\n");
    return 0;
  }
  std::printf("%d of 11 checks failed\n", failures);
  return 1;
}
