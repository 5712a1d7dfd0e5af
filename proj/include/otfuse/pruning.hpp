#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "otfuse/dataset.hpp"
#include "otfuse/fusion.hpp"
#include "otfuse/model.hpp"
#include "otfuse/table.hpp"
#include "otfuse/training.hpp"

namespace otfuse {

enum class PruneCriterion { l1, l2, random };

inline std::string to_string(PruneCriterion c) {
  switch (c) {
    case PruneCriterion::l1: return "l1";
    case PruneCriterion::l2: return "l2";
    case PruneCriterion::random: return "random";
  }
  return "?";
}

inline PruneCriterion parse_prune_criterion(const std::string& s) {
  if (s == "l1") return PruneCriterion::l1;
  if (s == "l2") return PruneCriterion::l2;
  if (s == "random") return PruneCriterion::random;
  throw DomainError("unknown pruning criterion '" + s + "' (expected l1, l2 or random)");
}

struct PruneSpec {
  /// Hidden layers to prune; empty means every hidden layer.
  std::optional<std::vector<Index>> layers;
  double ratio = 0.0;
  PruneCriterion criterion = PruneCriterion::l1;
  std::uint64_t seed = 0;
};

/// Number of neurons a layer of `width` loses at `ratio`.
inline Index pruned_count(Index width, double ratio) {
  return static_cast<Index>(std::floor(ratio * static_cast<double>(width) + 1e-9));
}

/// Norm of each neuron's incoming weight row.
inline Vector neuron_norms(const Matrix& w, PruneCriterion c) {
  Vector n(w.rows());
  for (Index i = 0; i < w.rows(); ++i) n(i) = c == PruneCriterion::l2 ? w.row(i).norm() : w.row(i).lpNorm<1>();
  return n;
}

/// Sorted indices of the neurons of layer `l` that survive.
inline std::vector<Index> kept_neurons(const NetworkModel& model, Index l, const PruneSpec& spec) {
  const Index width = model.width(l);
  const Index drop = pruned_count(width, spec.ratio);
  if (drop >= width)
    throw DomainError("pruning ratio " + std::to_string(spec.ratio) + " would empty layer " + std::to_string(l));
  std::vector<Index> order(static_cast<std::size_t>(width));
  if (spec.criterion == PruneCriterion::random) {
    const auto p = random_permutation(order.size(), spec.seed, 0x9e00 + static_cast<std::uint64_t>(l));
    std::copy(p.begin(), p.end(), order.begin());
  } else {
    const Vector norms = neuron_norms(model.weight(l), spec.criterion);
    for (Index i = 0; i < width; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return norms(a) < norms(b); });
  }
  std::vector<Index> kept(order.begin() + drop, order.end());
  std::sort(kept.begin(), kept.end());
  return kept;
}

/// Removes whole neurons (conv: output channels) and the matching
/// downstream columns or channel blocks.
inline NetworkModel prune_structured(const NetworkModel& model, const PruneSpec& spec) {
  if (!(spec.ratio >= 0.0 && spec.ratio < 1.0))
    throw DomainError("pruning ratio must lie in [0, 1), got " + std::to_string(spec.ratio));
  std::vector<Index> targets;
  if (spec.layers) {
    targets = *spec.layers;
    for (Index l : targets)
      if (l < 0 || l + 1 >= model.depth())
        throw DomainError("layer " + std::to_string(l) + " is not a hidden layer of a depth-" +
                          std::to_string(model.depth()) + " model");
  } else {
    for (Index l = 0; l + 1 < model.depth(); ++l) targets.push_back(l);
  }
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end()), targets.end());

  std::vector<LayerSpec> layers = model.layers();
  std::vector<Matrix> w = model.weights();
  for (Index l : targets) {
    const auto ul = static_cast<std::size_t>(l);
    const std::vector<Index> kept = kept_neurons(model, l, spec);
    const auto k = static_cast<Index>(kept.size());
    const Index block = model.incoming_block(l + 1);
    Matrix rows(k, w[ul].cols());
    Matrix next(w[ul + 1].rows(), k * block);
    for (Index r = 0; r < k; ++r) {
      rows.row(r) = w[ul].row(kept[static_cast<std::size_t>(r)]);
      next.middleCols(r * block, block) = w[ul + 1].middleCols(kept[static_cast<std::size_t>(r)] * block, block);
    }
    w[ul] = std::move(rows);
    w[ul + 1] = std::move(next);
    layers[ul].out_width = k;
    layers[ul + 1].in_width = layers[ul + 1].kind == LayerKind::conv2d ? k : k * block;
  }
  return NetworkModel(model.input_shape(), std::move(layers), std::move(w));
}

/// Fuses the dense model into its pruned counterpart: the result has the
/// pruned widths and weights eta on the aligned dense model.
inline FusionResult fuse_dense_into_pruned(const NetworkModel& dense, const NetworkModel& pruned, double eta = 0.5,
                                           FusionConfig config = [] {
                                             FusionConfig c;
                                             c.alignment = Alignment::wts;
                                             return c;
                                           }()) {
  if (dense.depth() != pruned.depth())
    throw ShapeError("dense model has " + std::to_string(dense.depth()) + " layers, pruned model " +
                     std::to_string(pruned.depth()));
  for (Index l = 0; l < dense.depth(); ++l)
    if (pruned.width(l) > dense.width(l))
      throw ShapeError("pruned layer " + std::to_string(l) + " is wider than the dense layer");
  if (!(eta >= 0.0 && eta <= 1.0)) throw DomainError("fusion proportion must lie in [0, 1]");
  config.model_weights = {eta, 1.0 - eta};
  return fuse({dense, pruned}, pruned, config);
}

struct PruneGrid {
  /// Each entry is a hidden layer index, or nullopt for every hidden layer at once.
  std::vector<std::optional<Index>> layers;
  std::vector<double> ratios;
  std::vector<PruneCriterion> criteria;
  std::uint64_t seed = 0;
  double eta = 0.5;
  FusionConfig fusion = [] {
    FusionConfig c;
    c.alignment = Alignment::wts;
    return c;
  }();
};

/// One row per (layer, ratio, criterion) cell with the accuracy of the pruned
/// model before and after fusing the dense model into it.
inline Table prune_fuse_report(const NetworkModel& model, const Dataset& data, const PruneGrid& grid) {
  Table t({"layer", "ratio", "criterion", "pruned_acc", "fused_acc", "net_sparsity"});
  for (const auto& layer : grid.layers) {
    for (double ratio : grid.ratios) {
      for (PruneCriterion c : grid.criteria) {
        PruneSpec spec;
        if (layer) spec.layers = std::vector<Index>{*layer};
        spec.ratio = ratio;
        spec.criterion = c;
        spec.seed = grid.seed;
        const NetworkModel pruned = prune_structured(model, spec);
        const NetworkModel fused = fuse_dense_into_pruned(model, pruned, grid.eta, grid.fusion).model;
        t.add_row({layer ? Cell{static_cast<std::int64_t>(*layer)} : Cell{std::string("all")}, ratio, to_string(c),
                   evaluate(pruned, data).accuracy, evaluate(fused, data).accuracy, sparsity_vs(pruned, model)});
      }
    }
  }
  return t;
}

}  // namespace otfuse
