#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "scalenet/dataset.hpp"
#include "scalenet/errors.hpp"
#include "scalenet/expansion.hpp"
#include "scalenet/ops.hpp"
#include "scalenet/vit.hpp"

namespace scalenet {

enum class TrainPolicy { adjustment_only, all_parameters };

inline const char* to_string(TrainPolicy p) {
  return p == TrainPolicy::adjustment_only ? "adjustment_only"
                                           : "all_parameters";
}

inline TrainPolicy train_policy_from_string(const std::string& s) {
  if (s == "adjustment_only" || s == "adjustment-only") {
    return TrainPolicy::adjustment_only;
  }
  if (s == "all_parameters" || s == "all") return TrainPolicy::all_parameters;
  throw config_error("unknown training policy '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr_init = 2e-4;
  double lr_final = 2e-6;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  TrainPolicy policy = TrainPolicy::all_parameters;
  double drop_path_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0 || batch_size == 0) {
      throw config_error("TrainConfig: epochs and batch_size must be positive");
    }
    if (!(lr_init >= 0 && lr_final >= 0 && lr_final <= lr_init)) {
      throw config_error("TrainConfig: need 0 <= lr_final <= lr_init");
    }
    if (weight_decay < 0 || adam_eps <= 0) {
      throw config_error("TrainConfig: bad weight_decay or adam_eps");
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
      throw config_error("TrainConfig: betas must lie in [0, 1)");
    }
    if (!(drop_path_rate >= 0 && drop_path_rate < 1)) {
      throw config_error("TrainConfig: drop_path_rate must lie in [0, 1)");
    }
  }
};

// Names of the tensors a policy trains. adjustment_only is the
// parameter-efficient setting: adjustment factors, every layer norm and the
// classification head; the backbone (attention/MLP weights, patch and
// position embeddings, class token) stays frozen.
template <class Real>
std::vector<std::string> select_trainable(const Model<Real>& m,
                                          TrainPolicy policy) {
  std::vector<std::string> names;
  for (auto& [name, t] : named_parameters(m)) {
    if (policy == TrainPolicy::all_parameters) {
      names.push_back(name);
      continue;
    }
    const bool adjust = name.find("_adjust.") != std::string::npos;
    const bool norm = name.find("ln1.") != std::string::npos ||
                      name.find("ln2.") != std::string::npos ||
                      name.find("head_norm.") != std::string::npos;
    const bool head = name == "head.weight" || name == "head.bias";
    if (adjust || norm || head) names.push_back(name);
  }
  return names;
}

// Cosine decay from lr_init at step 0 to lr_final at step total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps,
                        double lr_init, double lr_final) {
  if (total_steps == 0) {
    throw contract_error("cosine_lr: total_steps must be positive");
  }
  if (step > total_steps) {
    throw contract_error("cosine_lr: step " + std::to_string(step) +
                         " beyond total " + std::to_string(total_steps));
  }
  if (!(lr_init >= 0 && lr_final >= 0 && lr_final <= lr_init)) {
    throw contract_error("cosine_lr: need 0 <= lr_final <= lr_init");
  }
  const double t = double(step) / double(total_steps);
  return lr_final +
         0.5 * (lr_init - lr_final) * (1.0 + std::cos(std::numbers::pi * t));
}

// First and second moment buffers, parallel to the parameter list they were
// built for.
template <class Real>
struct AdamWState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.05;
  std::size_t step_count = 0;
  std::vector<std::vector<Real>> m, v;

  static AdamWState init(const std::vector<Tensor<Real>>& params, double beta1,
                         double beta2, double eps, double weight_decay) {
    AdamWState s;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    s.weight_decay = weight_decay;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor<Real>& p : params) {
      s.m.emplace_back(p.size(), Real(0));
      s.v.emplace_back(p.size(), Real(0));
    }
    return s;
  }
};

// One AdamW update. Weight decay is decoupled and applied to the parameter
// before the moment-based step, so a zero gradient still shrinks weights.
template <class Real>
void adamw_step(std::vector<Tensor<Real>>& params,
                const std::vector<std::span<const Real>>& grads,
                AdamWState<Real>& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw shape_error("adamw_step: " + std::to_string(params.size()) +
                      " params vs " + std::to_string(grads.size()) +
                      " grads vs state for " + std::to_string(state.m.size()));
  }
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Real>& p = params[i];
    std::span<const Real> g = grads[i];
    if (!g.empty() && g.size() != p.size()) {
      throw shape_error("adamw_step: grad size " + std::to_string(g.size()) +
                        " vs param " + shape_str(p.shape()));
    }
    std::vector<Real>& m = state.m[i];
    std::vector<Real>& v = state.v[i];
    Real* pd = p.data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const Real gj = g.empty() ? Real(0) : g[j];
      pd[j] -= Real(lr * state.weight_decay) * pd[j];
      m[j] = Real(state.beta1) * m[j] + Real(1.0 - state.beta1) * gj;
      v[j] = Real(state.beta2) * v[j] + Real(1.0 - state.beta2) * gj * gj;
      const Real mhat = m[j] / Real(bc1);
      const Real vhat = v[j] / Real(bc2);
      pd[j] -= Real(lr) * mhat / (std::sqrt(vhat) + Real(state.eps));
    }
  }
}

// Convenience overload reading gradients straight off the tensors; a tensor
// without a gradient buffer counts as zero gradient.
template <class Real>
void adamw_step(std::vector<Tensor<Real>>& params, AdamWState<Real>& state,
                double lr) {
  std::vector<std::span<const Real>> grads;
  grads.reserve(params.size());
  for (const Tensor<Real>& p : params)
    grads.emplace_back(p.grad().data(), p.grad().size());
  adamw_step(params, grads, state, lr);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0, train_acc = 0;
  double eval_loss = 0, eval_acc = 0;
  double seconds = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},         {"lr", r.lr},
                     {"train_loss", r.train_loss}, {"train_acc", r.train_acc},
                     {"eval_loss", r.eval_loss},   {"eval_acc", r.eval_acc},
                     {"seconds", r.seconds}};
}

inline void from_json(const nlohmann::json& j, EpochRecord& r) {
  j.at("epoch").get_to(r.epoch);
  j.at("lr").get_to(r.lr);
  j.at("train_loss").get_to(r.train_loss);
  j.at("train_acc").get_to(r.train_acc);
  j.at("eval_loss").get_to(r.eval_loss);
  j.at("eval_acc").get_to(r.eval_acc);
  j.at("seconds").get_to(r.seconds);
}

// One JSON object per line, one line per epoch.
inline std::string to_jsonl(const TrainReport& report) {
  std::string out;
  for (const EpochRecord& r : report.epochs) {
    out += nlohmann::json(r).dump();
    out += '\n';
  }
  return out;
}

inline TrainReport train_report_from_jsonl(const std::string& text) {
  TrainReport report;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    report.epochs.push_back(nlohmann::json::parse(line).get<EpochRecord>());
  }
  return report;
}

struct EvalMetrics {
  double loss = 0;
  double accuracy = 0;
};

namespace detail {

inline std::size_t argmax_row(const float* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

inline std::size_t argmax_row(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

template <class Real>
std::size_t count_correct(const Tensor<Real>& logits,
                          const std::vector<int>& labels) {
  const std::size_t classes = logits.shape().back();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (int(argmax_row(logits.data() + b * classes, classes)) == labels[b])
      ++correct;
  }
  return correct;
}

// Temporarily restricts requires_grad to the given storages so backward
// skips weight gradients for frozen tensors. Restores all flags on exit.
template <class Real>
class FreezeGuard {
 public:
  FreezeGuard(Model<Real>& model,
              const std::unordered_set<const TensorData<Real>*>& trainable) {
    visit_params(model, [&](const std::string&, Tensor<Real>& t) {
      saved_.emplace_back(t.ptr(), t.requires_grad());
      t.set_requires_grad(trainable.count(t.ptr().get()) != 0);
    });
  }
  ~FreezeGuard() {
    // Shared storages are visited once per alias; restoring in reverse lets
    // the first-seen (pre-modification) flag win.
    for (auto it = saved_.rbegin(); it != saved_.rend(); ++it)
      it->first->requires_grad = it->second;
  }

 private:
  std::vector<std::pair<std::shared_ptr<TensorData<Real>>, bool>> saved_;
};

}  // namespace detail

// Mean loss and top-1 accuracy over a dataset, in inference mode.
template <class Real>
EvalMetrics evaluate(const Model<Real>& model, const SyntheticDataset<Real>& data,
                     std::size_t batch_size = 256) {
  if (data.size() == 0) throw contract_error("evaluate: empty dataset");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - start);
    auto [images, labels] = gather_batch(data, order, start, count);
    Tensor<Real> logits = model_forward(images, model);
    loss_sum += double(cross_entropy(logits, labels).item()) * double(count);
    correct += detail::count_correct(logits, labels);
  }
  return {loss_sum / double(data.size()),
          double(correct) / double(data.size())};
}

// Minibatch AdamW training with a cosine schedule. Only tensors selected by
// the policy are updated or receive moments; everything else keeps its exact
// bytes. Shuffling and drop-path use separate seeded streams, so identical
// seeds reproduce identical runs bit for bit.
template <class Real>
TrainReport train(Model<Real>& model, const SyntheticDataset<Real>& train_data,
                  const SyntheticDataset<Real>& eval_data,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (train_data.size() == 0) throw contract_error("train: empty dataset");
  set_drop_path_rate(model, cfg.drop_path_rate);

  // Trainable tensors in canonical order, deduplicated so a shared storage
  // is stepped once per update even when several instances name it.
  const std::vector<std::string> selected = select_trainable(model, cfg.policy);
  std::unordered_set<std::string> selected_set(selected.begin(), selected.end());
  std::vector<Tensor<Real>> params;
  std::unordered_set<const TensorData<Real>*> param_set;
  detail::visit_params(model, [&](const std::string& name, Tensor<Real>& t) {
    if (selected_set.count(name) && param_set.insert(t.ptr().get()).second)
      params.push_back(t);
  });
  if (params.empty()) {
    throw contract_error("train: policy selects no parameters");
  }
  detail::FreezeGuard<Real> freeze(model, param_set);

  AdamWState<Real> opt = AdamWState<Real>::init(params, cfg.beta1, cfg.beta2,
                                                cfg.adam_eps, cfg.weight_decay);
  RandomStream shuffle_rng(derive_seed(cfg.seed, 11));
  RandomStream drop_rng(derive_seed(cfg.seed, 12));

  const std::size_t steps_per_epoch =
      (train_data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;

  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    std::size_t correct = 0;
    double lr = cfg.lr_init;
    for (std::size_t start = 0; start < train_data.size();
         start += cfg.batch_size) {
      const std::size_t count =
          std::min(cfg.batch_size, train_data.size() - start);
      auto [images, labels] = gather_batch(train_data, order, start, count);
      TapeScope<Real> scope;
      Tensor<Real> logits = model_forward(images, model, true, &drop_rng);
      Tensor<Real> loss = cross_entropy(logits, labels);
      backward(loss);
      loss_sum += double(loss.item()) * double(count);
      correct += detail::count_correct(logits, labels);
      lr = cosine_lr(global_step, total_steps, cfg.lr_init, cfg.lr_final);
      adamw_step(params, opt, lr);
      for (Tensor<Real>& p : params) p.zero_grad();
      ++global_step;
    }
    EvalMetrics ev = eval_data.size() > 0 ? evaluate(model, eval_data)
                                          : EvalMetrics{};
    const auto t1 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / double(train_data.size());
    rec.train_acc = double(correct) / double(train_data.size());
    rec.eval_loss = ev.loss;
    rec.eval_acc = ev.accuracy;
    rec.seconds = std::chrono::duration<double>(t1 - t0).count();
    report.epochs.push_back(rec);
  }
  return report;
}

}  // namespace scalenet
