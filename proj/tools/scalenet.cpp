// Command-line front end: pretrain a small vision transformer on synthetic
// data, expand it in depth with weight sharing and adjustment modules,
// finetune the result, and run the diagnostic reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <CLI11.hpp>

#include "scalenet/scalenet.hpp"

namespace {

using Real = float;
using namespace scalenet;

std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  const std::size_t dots = text.find("..");
  if (dots != std::string::npos) {
    const std::size_t lo = std::stoul(text.substr(0, dots));
    const std::size_t hi = std::stoul(text.substr(dots + 2));
    if (hi < lo) throw config_error("bad index range '" + text + "'");
    for (std::size_t i = lo; i <= hi; ++i) out.push_back(i);
    return out;
  }
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    out.push_back(std::stoul(text.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  if (out.empty()) throw config_error("empty index list");
  return out;
}

void require_geometry_match(const Model<Real>& m, const DatasetConfig& d) {
  if (m.config.classes != d.classes || m.config.image_size != d.image_size ||
      m.config.channels != d.channels) {
    throw config_error("model (classes " + std::to_string(m.config.classes) +
                       ", image " + std::to_string(m.config.image_size) +
                       "x" + std::to_string(m.config.channels) +
                       "ch) does not fit the dataset config");
  }
}

void print_report_tail(const TrainReport& report) {
  if (report.epochs.empty()) return;
  const EpochRecord& last = report.epochs.back();
  std::printf("epoch %zu: train loss %.4f acc %.4f | eval loss %.4f acc %.4f\n",
              last.epoch, last.train_loss, last.train_acc, last.eval_loss,
              last.eval_acc);
}

void maybe_write_report(const TrainReport& report, const std::string& path) {
  if (path.empty()) return;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open report file '" + path + "'");
  f << to_jsonl(report);
  if (!f) throw io_error("failed while writing '" + path + "'");
  std::printf("wrote training report to %s\n", path.c_str());
}

// Checksum over the tensors a parameter-efficient finetune must not touch,
// i.e. everything outside adjustments, norms and the head. Shared storages
// are hashed once, in canonical order.
std::uint64_t backbone_checksum(const Model<Real>& model) {
  std::vector<std::string> tuned =
      select_trainable(model, TrainPolicy::adjustment_only);
  std::unordered_set<std::string> tuned_set(tuned.begin(), tuned.end());
  std::unordered_set<const TensorData<Real>*> seen;
  std::uint64_t h = 0xcbf29ce484222325ull;
  detail::visit_params(
      const_cast<Model<Real>&>(model),
      [&](const std::string& name, Tensor<Real>& t) {
        if (tuned_set.count(name) || !seen.insert(t.ptr().get()).second) return;
        h = fnv1a64(t.data(), t.size() * sizeof(Real), h);
      });
  return h;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_path,
                 const std::string& report_path) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  auto [train_set, eval_set] = generate_splits<Real>(
      cfg.dataset.classes, cfg.dataset.train_samples, cfg.dataset.eval_samples,
      cfg.dataset.image_size, cfg.dataset.seed, cfg.dataset.channels,
      cfg.dataset.noise_std);
  Model<Real> model = init_model<Real>(cfg.model, cfg.training.seed);
  require_geometry_match(model, cfg.dataset);
  std::printf("pretraining depth-%zu dim-%zu model on %zu samples\n",
              cfg.model.depth, cfg.model.dim, train_set.size());
  TrainReport report = train(model, train_set, eval_set, cfg.training);
  print_report_tail(report);
  save_checkpoint(model, out_path);
  std::printf("saved checkpoint to %s\n", out_path.c_str());
  maybe_write_report(report, report_path);
  return 0;
}

int cmd_expand(const std::string& in_path, const std::string& out_path,
               const std::string& strategy, std::size_t scale, bool no_share,
               const std::string& adjust_kind, std::size_t rank,
               const std::string& subset_text, std::uint64_t seed) {
  Model<Real> model = load_checkpoint<Real>(in_path);
  const MappingKind kind = mapping_kind_from_string(strategy);
  const LayerMapping mapping =
      build_mapping(kind, model.blocks.size(), model.blocks.size() * scale);
  std::optional<AdjustConfig> adjust;
  if (!adjust_kind.empty() && adjust_kind != "none") {
    adjust = AdjustConfig{adjust_kind_from_string(adjust_kind), rank};
  }
  std::optional<std::vector<std::size_t>> subset;
  if (!subset_text.empty()) subset = parse_index_list(subset_text);
  Model<Real> expanded =
      expand_model(model, mapping, !no_share, adjust, subset, seed);
  save_checkpoint(expanded, out_path);
  std::string adjust_note;
  if (adjust) {
    adjust_note = std::string(", ") + to_string(adjust->kind) + " rank " +
                  std::to_string(adjust->rank);
  }
  std::printf("expanded depth %zu -> %zu (%s, %s%s), saved to %s\n",
              model.blocks.size(), expanded.blocks.size(), strategy.c_str(),
              no_share ? "unshared" : "shared", adjust_note.c_str(),
              out_path.c_str());
  return 0;
}

int cmd_finetune(const std::string& in_path, const std::string& config_path,
                 const std::string& policy_override,
                 const std::string& report_path, const std::string& out_path) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  Model<Real> model = load_checkpoint<Real>(in_path);
  require_geometry_match(model, cfg.dataset);
  if (!policy_override.empty()) {
    cfg.training.policy = train_policy_from_string(policy_override);
  }
  auto [train_set, eval_set] = generate_splits<Real>(
      cfg.dataset.classes, cfg.dataset.train_samples, cfg.dataset.eval_samples,
      cfg.dataset.image_size, cfg.dataset.seed, cfg.dataset.channels,
      cfg.dataset.noise_std);
  const std::uint64_t before = backbone_checksum(model);
  std::printf("backbone checksum before: %016llx\n",
              (unsigned long long)before);
  std::printf("finetuning depth-%zu model (%s) on %zu samples\n",
              model.blocks.size(), to_string(cfg.training.policy),
              train_set.size());
  TrainReport report = train(model, train_set, eval_set, cfg.training);
  print_report_tail(report);
  const std::uint64_t after = backbone_checksum(model);
  std::printf("backbone checksum after:  %016llx (%s)\n",
              (unsigned long long)after,
              before == after ? "unchanged" : "changed");
  if (!out_path.empty()) {
    save_checkpoint(model, out_path);
    std::printf("saved checkpoint to %s\n", out_path.c_str());
  }
  maybe_write_report(report, report_path);
  return 0;
}

std::string report_path_for(const std::string& dir, const std::string& stem,
                            ReportFormat fmt) {
  return (std::filesystem::path(dir) / (stem + "." + to_string(fmt))).string();
}

int cmd_analyze(const std::string& mode, const std::string& in_path,
                const std::string& ref_path, const std::string& out_dir,
                const std::string& format, std::size_t probe_samples,
                std::uint64_t probe_seed, std::size_t bins,
                const std::string& layers_text) {
  Model<Real> model = load_checkpoint<Real>(in_path);
  const ReportFormat fmt = report_format_from_string(format);
  std::filesystem::create_directories(out_dir);

  SyntheticDataset<Real> probe = generate_dataset<Real>(
      model.config.classes, probe_samples, model.config.image_size, probe_seed,
      model.config.channels);
  std::vector<std::size_t> order(probe.size());
  std::iota(order.begin(), order.end(), 0);
  auto [images, labels] = gather_batch(probe, order, 0, probe.size());

  if (mode == "grad") {
    GradNormProfile profile = grad_norm_profile(model, images, labels);
    const std::string path = report_path_for(out_dir, "grad_norms", fmt);
    emit_report(profile, fmt, path);
    std::printf("wrote %zu-group gradient profile to %s\n",
                profile.norms.size(), path.c_str());
  } else if (mode == "cka") {
    if (ref_path.empty()) {
      throw config_error("analyze cka needs --ref <checkpoint>");
    }
    Model<Real> ref = load_checkpoint<Real>(ref_path);
    if (ref.config.image_size != model.config.image_size ||
        ref.config.channels != model.config.channels) {
      throw config_error("--ref model takes different images");
    }
    CkaMatrix matrix = cka_matrix(model, ref, images);
    const std::string path = report_path_for(out_dir, "cka", fmt);
    emit_report(matrix, fmt, path);
    std::printf("wrote %zux%zu CKA matrix to %s\n", matrix.rows, matrix.cols,
                path.c_str());
  } else {
    std::vector<std::size_t> layers;
    if (layers_text.empty()) {
      layers.resize(model.blocks.size());
      std::iota(layers.begin(), layers.end(), 0);
    } else {
      layers = parse_index_list(layers_text);
    }
    HistogramSet set = activation_histograms(model, images, layers, bins);
    const std::string path = report_path_for(out_dir, "activation_hist", fmt);
    emit_report(set, fmt, path);
    std::printf("wrote histograms for %zu layers to %s\n", set.hists.size(),
                path.c_str());
  }
  return 0;
}

int cmd_report_params(const std::string& in_path) {
  Model<Real> model = load_checkpoint<Real>(in_path);
  const std::size_t total = count_parameters(model, false);
  const std::size_t unique = count_parameters(model, true);
  std::printf("parameters: %zu total across instances, %zu unique\n", total,
              unique);
  const std::size_t mlp_total =
      count_parameters(model, false, CountScope::mlp_weights);
  const std::size_t mlp_unique =
      count_parameters(model, true, CountScope::mlp_weights_and_adjust);
  if (mlp_total > 0) {
    std::printf("MLP weights: %zu across instances, %zu unique with "
                "adjustments (ratio %.6f)\n",
                mlp_total, mlp_unique, double(mlp_unique) / double(mlp_total));
  }
  if (model.expansion && model.expansion->adjust) {
    const double est = parameter_fraction(
        model.expansion->mapping.source_depth, 2, model.config.dim,
        model.expansion->adjust->rank);
    std::printf("closed-form estimate for square MLP linears at 2x depth: "
                "%.6f\n", est);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"depth-expanding vision transformers with shared weights"};
  app.require_subcommand(1);

  std::string config_path, in_path, out_path, ref_path, report_path;
  std::string strategy = "cyclic", adjust_kind = "none", subset_text;
  std::string policy_override, format = "csv", layers_text, mode;
  std::size_t scale = 2, rank = 16, probe_samples = 64, bins = 50;
  std::uint64_t seed = 0, probe_seed = 1234;
  bool no_share = false;

  CLI::App* pretrain = app.add_subcommand("pretrain", "train a model from scratch");
  pretrain->add_option("--config", config_path, "experiment JSON")->required();
  pretrain->add_option("--out", out_path, "checkpoint to write")->required();
  pretrain->add_option("--report", report_path, "training report JSONL");

  CLI::App* expand = app.add_subcommand("expand", "grow a checkpoint in depth");
  expand->add_option("--in", in_path, "source checkpoint")->required();
  expand->add_option("--out", out_path, "checkpoint to write")->required();
  expand->add_option("--strategy", strategy,
                     "identity|stack|interpolate|cyclic|random_init|swa");
  expand->add_option("--scale", scale, "depth multiplier");
  expand->add_flag("--no-share", no_share, "copy weights instead of sharing");
  expand->add_option("--adjust", adjust_kind, "none|lora|parallel_adapter");
  expand->add_option("--rank", rank, "adjustment rank");
  expand->add_option("--subset", subset_text,
                     "source layers to expand, e.g. 2..3 or 1,3");
  expand->add_option("--seed", seed, "seed for new tensors");

  CLI::App* finetune = app.add_subcommand("finetune", "train a checkpoint");
  finetune->add_option("--in", in_path, "checkpoint to start from")->required();
  finetune->add_option("--config", config_path, "experiment JSON")->required();
  finetune->add_option("--policy", policy_override,
                       "adjustment_only|all_parameters");
  finetune->add_option("--report", report_path, "training report JSONL");
  finetune->add_option("--out", out_path, "checkpoint to write");

  CLI::App* analyze = app.add_subcommand("analyze", "diagnostic reports");
  analyze->add_option("mode", mode, "grad|cka|hist")
      ->required()
      ->check(CLI::IsMember({"grad", "cka", "hist"}));
  analyze->add_option("--in", in_path, "checkpoint to inspect")->required();
  analyze->add_option("--ref", ref_path, "second checkpoint (cka)");
  analyze->add_option("--out", out_path, "output directory")->required();
  analyze->add_option("--format", format, "csv|json|svg");
  analyze->add_option("--probe-samples", probe_samples, "probe batch size");
  analyze->add_option("--probe-seed", probe_seed, "probe generator seed");
  analyze->add_option("--bins", bins, "histogram bins");
  analyze->add_option("--layers", layers_text, "layers for hist, e.g. 0,2");

  CLI::App* report = app.add_subcommand("report", "model summaries");
  CLI::App* params = report->add_subcommand("params", "parameter counts");
  params->add_option("--in", in_path, "checkpoint to inspect")->required();
  report->require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*pretrain) return cmd_pretrain(config_path, out_path, report_path);
    if (*expand) {
      return cmd_expand(in_path, out_path, strategy, scale, no_share,
                        adjust_kind, rank, subset_text, seed);
    }
    if (*finetune) {
      return cmd_finetune(in_path, config_path, policy_override, report_path,
                          out_path);
    }
    if (*analyze) {
      return cmd_analyze(mode, in_path, ref_path, out_path, format,
                         probe_samples, probe_seed, bins, layers_text);
    }
    if (*params) return cmd_report_params(in_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
