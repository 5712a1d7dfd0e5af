#pragma once

// Reproducible experiment presets built from the library calls.

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "otfuse/dataset.hpp"
#include "otfuse/fusion.hpp"
#include "otfuse/model.hpp"
#include "otfuse/pruning.hpp"
#include "otfuse/table.hpp"
#include "otfuse/training.hpp"

namespace otfuse {

inline std::vector<double> wb_grid(double lo = 0.05, double hi = 0.95, double step = 0.05) {
  if (!(step > 0.0) || hi < lo) throw DomainError("w_B grid needs step > 0 and hi >= lo");
  std::vector<double> out;
  for (long k = 0;; ++k) {
    const double v = lo + static_cast<double>(k) * step;
    if (v > hi + 1e-9) break;
    out.push_back(std::round(v * 1e9) / 1e9);
  }
  return out;
}

inline std::string widths_label(const std::vector<Index>& w) {
  std::ostringstream s;
  for (std::size_t i = 0; i < w.size(); ++i) s << (i ? "/" : "") << w[i];
  return s.str();
}

/// Seeds for the two members of a pair in run `seed`.
inline std::uint64_t member_seed(std::uint64_t seed, int member) { return seed * 1000 + static_cast<std::uint64_t>(member) + 1; }

/// Which training data feeds the activation batch in skill transfer.
enum class ActivationSource { receiver, both };

inline std::string to_string(ActivationSource s) { return s == ActivationSource::receiver ? "receiver" : "both"; }

inline ActivationSource parse_activation_source(const std::string& s) {
  if (s == "receiver") return ActivationSource::receiver;
  if (s == "both") return ActivationSource::both;
  throw DomainError("unknown activation source '" + s + "' (expected receiver or both)");
}

struct SkillTransferSpec {
  std::vector<Index> hidden{400, 200, 100};
  SplitSpec split{4, 0.1, 0};
  TrainConfig train;
  bool same_init = false;
  std::vector<double> wb_values = wb_grid();
  Index samples = 200;
  ActivationSource activation_source = ActivationSource::receiver;
  FusionConfig fusion;
  std::uint64_t seed = 0;
};

struct SkillTransferResult {
  double model_a_acc = 0.0, model_b_acc = 0.0, ensemble_acc = 0.0;
  /// w_b, ot_acc, vanilla_acc, ensemble_acc, model_a_acc, model_b_acc, ot_special_acc, vanilla_special_acc
  Table sweep;
};

/// Specialist A (all special-label samples plus a fraction of the rest) and
/// generalist B are trained separately, then fused for each w_B. By default
/// activations come from A's own data only.
inline SkillTransferResult skill_transfer(const DataSplit& data, const SkillTransferSpec& spec) {
  SplitSpec split = spec.split;
  split.seed = spec.seed;
  const auto [data_a, data_b] = split_heterogeneous(data.train, split);
  const NetworkModel arch = NetworkModel::mlp(data.train.dim(), spec.hidden, data.train.class_count);
  TrainConfig ca = spec.train, cb = spec.train;
  ca.seed = member_seed(spec.seed, 0);
  cb.seed = member_seed(spec.seed, 1);
  const NetworkModel a = train(arch, data_a, ca).model;
  const NetworkModel b = finetune(init_model(arch, spec.same_init ? ca.seed : cb.seed), data_b, cb).model;

  SkillTransferResult r;
  r.model_a_acc = evaluate(a, data.test).accuracy;
  r.model_b_acc = evaluate(b, data.test).accuracy;
  r.ensemble_acc = prediction_ensemble({a, b}, data.test).accuracy;
  const auto special = static_cast<std::size_t>(split.special_label.value_or(0));
  r.sweep = Table({"w_b", "ot_acc", "vanilla_acc", "ensemble_acc", "model_a_acc", "model_b_acc", "ot_special_acc",
                   "vanilla_special_acc"});
  FusionConfig fc = spec.fusion;
  if (fc.alignment == Alignment::acts && !fc.sample_batch)
    fc.sample_batch = sample_batch(spec.activation_source == ActivationSource::receiver ? data_a : data.train,
                                   spec.samples, spec.seed);
  for (double wb : spec.wb_values) {
    fc.model_weights = {1.0 - wb, wb};
    const EvalResult ot = evaluate(fuse({a, b}, b, fc).model, data.test);
    const EvalResult va = evaluate(vanilla_average({a, b}, {1.0 - wb, wb}), data.test);
    r.sweep.add_row({wb, ot.accuracy, va.accuracy, r.ensemble_acc, r.model_a_acc, r.model_b_acc,
                     split.special_label ? Cell{ot.per_class[special]} : Cell{},
                     split.special_label ? Cell{va.per_class[special]} : Cell{}});
  }
  return r;
}

struct IidPairSpec {
  std::vector<Index> hidden{400, 200, 100};
  TrainConfig train;
  /// Activation-based exact OT is run once per sample count.
  std::vector<Index> samples{200};
  /// Sinkhorn regularizations, run with the largest sample count.
  std::vector<double> regularizations;
  bool weight_based = true;
  int finetune_epochs = 0;
  double finetune_lr = 0.01;
  std::uint64_t seed = 0;
};

struct IidPairResult {
  double model_a = 0.0, model_b = 0.0, ensemble = 0.0, vanilla = 0.0;
  std::optional<double> ot_wts;
  std::vector<std::pair<Index, double>> ot_acts;
  std::vector<std::pair<double, double>> ot_sinkhorn;
  std::optional<double> ot_finetuned, vanilla_finetuned;

  double best_individual() const { return std::max(model_a, model_b); }

  Table table() const {
    Table t({"method", "alignment", "solver", "samples", "reg", "accuracy"});
    const Cell none;
    t.add_row({std::string("model_a"), none, none, none, none, model_a});
    t.add_row({std::string("model_b"), none, none, none, none, model_b});
    t.add_row({std::string("ensemble"), none, none, none, none, ensemble});
    t.add_row({std::string("vanilla"), none, none, none, none, vanilla});
    if (ot_wts) t.add_row({std::string("ot"), std::string("wts"), std::string("exact"), none, none, *ot_wts});
    for (const auto& [m, acc] : ot_acts)
      t.add_row({std::string("ot"), std::string("acts"), std::string("exact"), static_cast<std::int64_t>(m), none, acc});
    for (const auto& [reg, acc] : ot_sinkhorn)
      t.add_row({std::string("ot"), std::string("acts"), std::string("sinkhorn"), none, reg, acc});
    if (ot_finetuned) t.add_row({std::string("ot_finetuned"), none, none, none, none, *ot_finetuned});
    if (vanilla_finetuned) t.add_row({std::string("vanilla_finetuned"), none, none, none, none, *vanilla_finetuned});
    return t;
  }
};

/// Two models on the same data from different initializations, combined by
/// ensembling, vanilla averaging and OT fusion (estimate = model B).
inline IidPairResult iid_pair(const DataSplit& data, const IidPairSpec& spec) {
  if (spec.samples.empty()) throw DomainError("iid_pair needs at least one sample count");
  const NetworkModel arch = NetworkModel::mlp(data.train.dim(), spec.hidden, data.train.class_count);
  TrainConfig ca = spec.train, cb = spec.train;
  ca.seed = member_seed(spec.seed, 0);
  cb.seed = member_seed(spec.seed, 1);
  const NetworkModel a = train(arch, data.train, ca).model;
  const NetworkModel b = train(arch, data.train, cb).model;
  IidPairResult r;
  r.model_a = evaluate(a, data.test).accuracy;
  r.model_b = evaluate(b, data.test).accuracy;
  r.ensemble = prediction_ensemble({a, b}, data.test).accuracy;
  const NetworkModel vanilla = vanilla_average({a, b});
  r.vanilla = evaluate(vanilla, data.test).accuracy;

  FusionConfig fc;
  fc.model_weights = {0.5, 0.5};
  if (spec.weight_based) {
    fc.alignment = Alignment::wts;
    r.ot_wts = evaluate(fuse({a, b}, b, fc).model, data.test).accuracy;
  }
  fc.alignment = Alignment::acts;
  std::optional<NetworkModel> ot_main;
  for (Index m : spec.samples) {
    fc.sample_batch = sample_batch(data.train, m, spec.seed);
    NetworkModel fused = fuse({a, b}, b, fc).model;
    r.ot_acts.emplace_back(m, evaluate(fused, data.test).accuracy);
    if (m == *std::max_element(spec.samples.begin(), spec.samples.end()) && !ot_main) ot_main = std::move(fused);
  }
  fc.sample_batch = sample_batch(data.train, *std::max_element(spec.samples.begin(), spec.samples.end()), spec.seed);
  fc.solver = SolverKind::sinkhorn;
  for (double reg : spec.regularizations) {
    fc.regularization = reg;
    r.ot_sinkhorn.emplace_back(reg, evaluate(fuse({a, b}, b, fc).model, data.test).accuracy);
  }
  if (spec.finetune_epochs > 0) {
    TrainConfig ft = spec.train;
    ft.epochs = spec.finetune_epochs;
    ft.lr = spec.finetune_lr;
    ft.seed = member_seed(spec.seed, 2);
    r.ot_finetuned = evaluate(finetune(*ot_main, data.train, ft).model, data.test).accuracy;
    r.vanilla_finetuned = evaluate(finetune(vanilla, data.train, ft).model, data.test).accuracy;
  }
  return r;
}

struct WidthSweepSpec {
  std::vector<std::vector<Index>> widths{{40, 20, 10}, {200, 100, 50}, {400, 200, 100}};
  TrainConfig train;
  Index samples = 200;
  FusionConfig fusion;
  std::vector<std::uint64_t> seeds{0};
};

/// For every width configuration, trains a pair per seed, fuses it and
/// reports seed-averaged accuracies and relative gaps to the best individual.
inline Table width_sweep(const DataSplit& data, const WidthSweepSpec& spec) {
  if (spec.widths.size() < 2) throw DomainError("width_sweep needs at least two width configurations");
  if (spec.seeds.empty()) throw DomainError("width_sweep needs at least one seed");
  Table t({"hidden", "model_a_acc", "model_b_acc", "ensemble_acc", "vanilla_acc", "ot_acc", "vanilla_gap", "ot_gap"});
  for (const auto& hidden : spec.widths) {
    std::vector<double> sums(7, 0.0);
    for (std::uint64_t seed : spec.seeds) {
      const NetworkModel arch = NetworkModel::mlp(data.train.dim(), hidden, data.train.class_count);
      TrainConfig ca = spec.train, cb = spec.train;
      ca.seed = member_seed(seed, 0);
      cb.seed = member_seed(seed, 1);
      const NetworkModel a = train(arch, data.train, ca).model;
      const NetworkModel b = train(arch, data.train, cb).model;
      FusionConfig fc = spec.fusion;
      fc.model_weights = {0.5, 0.5};
      if (fc.alignment == Alignment::acts) fc.sample_batch = sample_batch(data.train, spec.samples, seed);
      const double acc_a = evaluate(a, data.test).accuracy, acc_b = evaluate(b, data.test).accuracy;
      const double best = std::max(acc_a, acc_b);
      const double van = evaluate(vanilla_average({a, b}), data.test).accuracy;
      const double ot = evaluate(fuse({a, b}, b, fc).model, data.test).accuracy;
      const std::vector<double> row{acc_a, acc_b, prediction_ensemble({a, b}, data.test).accuracy, van, ot,
                                    (best - van) / best, (best - ot) / best};
      for (std::size_t i = 0; i < row.size(); ++i) sums[i] += row[i];
    }
    std::vector<Cell> row{widths_label(hidden)};
    for (double s : sums) row.emplace_back(s / static_cast<double>(spec.seeds.size()));
    t.add_row(std::move(row));
  }
  return t;
}

struct PruneGridSpec {
  std::vector<Index> hidden{400, 200, 100};
  TrainConfig train;
  PruneGrid grid;
  std::uint64_t seed = 0;
};

/// Trains one model and runs the prune-then-fuse grid on it. An empty layer
/// list in the grid means every hidden layer separately.
inline Table prune_grid(const DataSplit& data, PruneGridSpec spec) {
  const NetworkModel arch = NetworkModel::mlp(data.train.dim(), spec.hidden, data.train.class_count);
  TrainConfig c = spec.train;
  c.seed = member_seed(spec.seed, 0);
  const NetworkModel m = train(arch, data.train, c).model;
  if (spec.grid.layers.empty())
    for (Index l = 0; l + 1 < m.depth(); ++l) spec.grid.layers.emplace_back(l);
  if (spec.grid.ratios.empty()) spec.grid.ratios = {0.3, 0.5, 0.7, 0.9};
  if (spec.grid.criteria.empty())
    spec.grid.criteria = {PruneCriterion::l1, PruneCriterion::l2, PruneCriterion::random};
  spec.grid.seed = spec.seed;
  return prune_fuse_report(m, data.test, spec.grid);
}

}  // namespace otfuse
