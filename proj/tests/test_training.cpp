#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "scalenet/dataset.hpp"
#include "scalenet/expansion.hpp"
#include "scalenet/training.hpp"
#include "scalenet/vit.hpp"

using namespace scalenet;

namespace {

ViTConfig small_config(std::size_t depth, std::size_t classes) {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.depth = depth;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.classes = classes;
  return cfg;
}

template <class Real>
std::vector<std::vector<Real>> snapshot(const Model<Real>& m,
                                        const std::vector<std::string>& names) {
  std::vector<std::vector<Real>> out;
  std::unordered_set<std::string> wanted(names.begin(), names.end());
  for (auto& [name, t] : named_parameters(m)) {
    if (wanted.count(name)) {
      out.emplace_back(t.data(), t.data() + t.size());
    }
  }
  return out;
}

}  // namespace

TEST_CASE("policy selection") {
  ViTConfig cfg = small_config(2, 4);
  Model<float> base = init_model<float>(cfg, 3);
  Model<float> expanded =
      expand_model(base, build_mapping(MappingKind::cyclic, 2, 4), true,
                   AdjustConfig{AdjustKind::parallel_adapter, 4});

  const std::vector<std::string> all =
      select_trainable(expanded, TrainPolicy::all_parameters);
  REQUIRE(all.size() == named_parameters(expanded).size());

  const std::vector<std::string> light =
      select_trainable(expanded, TrainPolicy::adjustment_only);
  // Per block: four adjustment factors and four norm tensors; plus the head
  // norm and the classifier.
  REQUIRE(light.size() == 4 * 8 + 2 + 2);
  for (const std::string& name : light) {
    REQUIRE(name.find("qkv") == std::string::npos);
    REQUIRE(name.find("attn_proj") == std::string::npos);
    REQUIRE(name.find("patch_embed") == std::string::npos);
    REQUIRE(name.find("pos_embed") == std::string::npos);
    REQUIRE(name.find("cls_token") == std::string::npos);
    const bool fc_weight = (name.find("fc1.") != std::string::npos ||
                            name.find("fc2.") != std::string::npos);
    REQUIRE_FALSE(fc_weight);
  }
  const auto has = [&](const char* needle) {
    return std::any_of(light.begin(), light.end(), [&](const std::string& n) {
      return n.find(needle) != std::string::npos;
    });
  };
  REQUIRE(has("fc1_adjust.down"));
  REQUIRE(has("fc2_adjust.up"));
  REQUIRE(has("ln1.gamma"));
  REQUIRE(has("head_norm.beta"));
  REQUIRE(has("head.weight"));
}

TEST_CASE("cosine schedule endpoints and shape") {
  REQUIRE(cosine_lr(0, 100, 1e-3, 1e-5) == Catch::Approx(1e-3));
  REQUIRE(cosine_lr(100, 100, 1e-3, 1e-5) == Catch::Approx(1e-5));
  REQUIRE(cosine_lr(50, 100, 1e-3, 1e-5) ==
          Catch::Approx(1e-5 + 0.5 * (1e-3 - 1e-5)));
  double prev = 2.0;
  for (std::size_t s = 0; s <= 20; ++s) {
    const double lr = cosine_lr(s, 20, 1.0, 0.0);
    REQUIRE(lr < prev);
    prev = lr;
  }
  REQUIRE_THROWS_AS(cosine_lr(1, 0, 1e-3, 1e-5), contract_error);
  REQUIRE_THROWS_AS(cosine_lr(11, 10, 1e-3, 1e-5), contract_error);
  REQUIRE_THROWS_AS(cosine_lr(1, 10, 1e-5, 1e-3), contract_error);
}

TEST_CASE("adamw single steps against hand-computed values") {
  SECTION("pure decoupled decay when the gradient is zero") {
    std::vector<Tensor<double>> params{Tensor<double>({1}, {1.0})};
    AdamWState<double> st =
        AdamWState<double>::init(params, 0.9, 0.999, 1e-8, 0.05);
    std::vector<std::span<const double>> grads{std::span<const double>{}};
    adamw_step(params, grads, st, 0.1);
    REQUIRE(params[0].item() == Catch::Approx(0.995).margin(1e-12));
    REQUIRE(st.step_count == 1);
  }

  SECTION("bias-corrected first step is a full lr move") {
    std::vector<Tensor<double>> params{Tensor<double>({1}, {0.0})};
    AdamWState<double> st =
        AdamWState<double>::init(params, 0.9, 0.999, 1e-8, 0.0);
    const std::vector<double> g{1.0};
    std::vector<std::span<const double>> grads{std::span<const double>(g)};
    adamw_step(params, grads, st, 0.1);
    REQUIRE(params[0].item() == Catch::Approx(-0.1).margin(1e-9));
  }

  SECTION("shape mismatches are rejected") {
    std::vector<Tensor<double>> params{Tensor<double>({2}, {0.0, 0.0})};
    AdamWState<double> st =
        AdamWState<double>::init(params, 0.9, 0.999, 1e-8, 0.0);
    const std::vector<double> g{1.0};
    std::vector<std::span<const double>> grads{std::span<const double>(g)};
    REQUIRE_THROWS_AS(adamw_step(params, grads, st, 0.1), shape_error);
  }
}

TEST_CASE("training improves a small model") {
  ViTConfig cfg = small_config(1, 2);
  auto [train_set, eval_set] = generate_splits<float>(2, 256, 64, 8, 7);
  Model<float> model = init_model<float>(cfg, 1);

  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 32;
  tc.lr_init = 3e-3;
  tc.lr_final = 3e-5;
  tc.weight_decay = 0.01;
  tc.policy = TrainPolicy::all_parameters;
  tc.seed = 5;
  TrainReport report = train(model, train_set, eval_set, tc);

  REQUIRE(report.epochs.size() == 10);
  REQUIRE(report.epochs.back().train_loss < report.epochs.front().train_loss);
  REQUIRE(report.epochs.back().eval_acc >= 0.9);
}

TEST_CASE("adjustment-only training never touches the backbone bytes") {
  ViTConfig cfg = small_config(1, 2);
  auto [train_set, eval_set] = generate_splits<float>(2, 64, 32, 8, 3);
  Model<float> base = init_model<float>(cfg, 2);
  Model<float> model =
      expand_model(base, build_mapping(MappingKind::cyclic, 1, 2), true,
                   AdjustConfig{AdjustKind::parallel_adapter, 4}, std::nullopt,
                   11);

  std::vector<std::string> frozen;
  std::unordered_set<std::string> tuned;
  for (const std::string& n :
       select_trainable(model, TrainPolicy::adjustment_only)) {
    tuned.insert(n);
  }
  for (auto& [name, t] : named_parameters(model)) {
    if (!tuned.count(name)) frozen.push_back(name);
  }
  const auto before = snapshot(model, frozen);

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 32;
  tc.lr_init = 1e-2;
  tc.lr_final = 1e-3;
  tc.policy = TrainPolicy::adjustment_only;
  tc.seed = 9;
  train(model, train_set, eval_set, tc);

  const auto after = snapshot(model, frozen);
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    REQUIRE(std::memcmp(before[i].data(), after[i].data(),
                        before[i].size() * sizeof(float)) == 0);
  }

  // The adjustments must have moved, or nothing was trained at all.
  bool moved = false;
  for (auto& [name, t] : named_parameters(model)) {
    if (name.find("_adjust.up") != std::string::npos) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        moved = moved || t.data()[i] != 0.0f;
      }
    }
  }
  REQUIRE(moved);
}

TEST_CASE("identical seeds reproduce training bit for bit") {
  ViTConfig cfg = small_config(1, 2);
  cfg.drop_path_rate = 0.1;
  auto [train_set, eval_set] = generate_splits<float>(2, 64, 32, 8, 13);

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 16;
  tc.lr_init = 1e-3;
  tc.drop_path_rate = 0.1;
  tc.seed = 21;

  Model<float> m1 = init_model<float>(cfg, 4);
  Model<float> m2 = init_model<float>(cfg, 4);
  TrainReport r1 = train(m1, train_set, eval_set, tc);
  TrainReport r2 = train(m2, train_set, eval_set, tc);

  auto p1 = named_parameters(m1);
  auto p2 = named_parameters(m2);
  for (std::size_t i = 0; i < p1.size(); ++i) {
    REQUIRE(std::memcmp(p1[i].second.data(), p2[i].second.data(),
                        p1[i].second.size() * sizeof(float)) == 0);
  }
  REQUIRE(r1.epochs.size() == r2.epochs.size());
  for (std::size_t e = 0; e < r1.epochs.size(); ++e) {
    REQUIRE(r1.epochs[e].train_loss == r2.epochs[e].train_loss);
    REQUIRE(r1.epochs[e].train_acc == r2.epochs[e].train_acc);
    REQUIRE(r1.epochs[e].eval_loss == r2.epochs[e].eval_loss);
    REQUIRE(r1.epochs[e].eval_acc == r2.epochs[e].eval_acc);
    REQUIRE(r1.epochs[e].lr == r2.epochs[e].lr);
  }
}

TEST_CASE("zero learning rate leaves parameters byte-identical") {
  ViTConfig cfg = small_config(1, 2);
  auto [train_set, eval_set] = generate_splits<float>(2, 32, 16, 8, 2);
  Model<float> model = init_model<float>(cfg, 6);
  const auto names = select_trainable(model, TrainPolicy::all_parameters);
  const auto before = snapshot(model, names);

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 16;
  tc.lr_init = 0.0;
  tc.lr_final = 0.0;
  tc.seed = 1;
  train(model, train_set, eval_set, tc);

  const auto after = snapshot(model, names);
  for (std::size_t i = 0; i < before.size(); ++i) {
    REQUIRE(std::memcmp(before[i].data(), after[i].data(),
                        before[i].size() * sizeof(float)) == 0);
  }
}

TEST_CASE("a zeroed classifier scores exactly at chance on balanced data") {
  ViTConfig cfg = small_config(1, 4);
  Model<float> model = init_model<float>(cfg, 8);
  std::fill(model.head_weight.data(),
            model.head_weight.data() + model.head_weight.size(), 0.0f);
  std::fill(model.head_bias.data(),
            model.head_bias.data() + model.head_bias.size(), 0.0f);
  SyntheticDataset<float> data = generate_dataset<float>(4, 200, 8, 31);
  EvalMetrics ev = evaluate(model, data);
  REQUIRE(ev.accuracy == Catch::Approx(0.25));
  REQUIRE(ev.loss == Catch::Approx(std::log(4.0)).margin(1e-5));
}

TEST_CASE("training contracts") {
  ViTConfig cfg = small_config(1, 2);
  Model<float> model = init_model<float>(cfg, 0);
  SyntheticDataset<float> empty = generate_dataset<float>(2, 0, 8, 1);
  SyntheticDataset<float> data = generate_dataset<float>(2, 8, 8, 1);
  TrainConfig tc;
  tc.epochs = 1;
  REQUIRE_THROWS_AS(train(model, empty, data, tc), contract_error);
  REQUIRE_THROWS_AS(evaluate(model, empty), contract_error);

  TrainConfig bad;
  bad.epochs = 0;
  REQUIRE_THROWS_AS(bad.validate(), config_error);
  bad = TrainConfig{};
  bad.lr_final = 1.0;
  bad.lr_init = 0.5;
  REQUIRE_THROWS_AS(bad.validate(), config_error);
  bad = TrainConfig{};
  bad.drop_path_rate = 1.0;
  REQUIRE_THROWS_AS(bad.validate(), config_error);
}

TEST_CASE("training report JSONL round trip") {
  TrainReport report;
  for (std::size_t e = 0; e < 3; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.lr = 1e-3 / double(e + 1);
    r.train_loss = 1.5 - 0.3 * double(e);
    r.train_acc = 0.5 + 0.1 * double(e);
    r.eval_loss = 1.4 - 0.2 * double(e);
    r.eval_acc = 0.55 + 0.1 * double(e);
    r.seconds = 0.25 * double(e + 1);
    report.epochs.push_back(r);
  }
  const std::string text = to_jsonl(report);
  REQUIRE(std::count(text.begin(), text.end(), '\n') == 3);
  TrainReport back = train_report_from_jsonl(text);
  REQUIRE(back.epochs.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    REQUIRE(back.epochs[e].epoch == report.epochs[e].epoch);
    REQUIRE(back.epochs[e].lr == report.epochs[e].lr);
    REQUIRE(back.epochs[e].train_loss == report.epochs[e].train_loss);
    REQUIRE(back.epochs[e].eval_acc == report.epochs[e].eval_acc);
    REQUIRE(back.epochs[e].seconds == report.epochs[e].seconds);
  }
}
