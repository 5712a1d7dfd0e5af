#pragma once

// Layer-wise optimal-transport fusion of K networks into the shape of a
// target estimate.
//
// For every layer, each model's incoming weights are first re-expressed in the
// estimate's ordering of the previous layer (W T diag(1/beta)); then its
// neurons are transported onto the estimate's neurons (diag(1/beta) T^T W) and
// the aligned weights are averaged with weights eta.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "otfuse/error.hpp"
#include "otfuse/model.hpp"
#include "otfuse/ot.hpp"
#include "otfuse/table.hpp"
#include "otfuse/types.hpp"

namespace otfuse {

enum class Alignment { acts, wts };
enum class SolverKind { exact, sinkhorn };
enum class HistogramMode { uniform, importance };

inline const char* to_string(Alignment a) { return a == Alignment::acts ? "acts" : "wts"; }
inline const char* to_string(SolverKind s) { return s == SolverKind::exact ? "exact" : "sinkhorn"; }
inline const char* to_string(HistogramMode h) { return h == HistogramMode::uniform ? "uniform" : "importance"; }

struct FusionConfig {
  Alignment alignment = Alignment::acts;
  SolverKind solver = SolverKind::exact;
  double regularization = 0.05;
  /// Model weights eta; empty means uniform. Renormalized onto the simplex.
  std::vector<double> model_weights;
  /// Shared inputs for activation-based alignment, one sample per row.
  std::optional<Matrix> sample_batch;
  HistogramMode histogram = HistogramMode::uniform;
  int ground_cost_exponent = 1;
  /// Average the output layer with a scaled-identity plan when widths agree;
  /// the solved plan is still reported.
  bool identity_output_plan = true;
};

struct FusionReport {
  std::vector<double> model_weights;                 // normalized eta
  std::vector<std::vector<TransportPlan>> plans;     // [layer][model], as solved
  std::vector<std::vector<double>> distances;        // [layer][model], OT cost^(1/p)
  std::vector<double> layer_distance;                // sum_k eta_k * distances[layer][k]
  std::vector<double> trace_ratios;                  // per model, solved output-layer plan
  double last_layer_trace_ratio = 1.0;               // min over models
  std::vector<std::vector<bool>> importance_fallback;  // [model][layer]; last entry is the estimate
};

struct FusionResult {
  NetworkModel model;
  FusionReport report;
};

/// eta projected onto the simplex: nonnegative entries, positive sum.
inline std::vector<double> normalize_weights(const std::vector<double>& eta, std::size_t k) {
  if (eta.empty()) return std::vector<double>(k, 1.0 / static_cast<double>(k));
  if (eta.size() != k)
    throw ShapeError("model weights: got " + std::to_string(eta.size()) + " weights for " + std::to_string(k) + " models");
  long double total = 0.0L;
  for (double e : eta) {
    if (!std::isfinite(e) || e < 0.0) throw DomainError("model weights must be finite and nonnegative");
    total += e;
  }
  if (!(total > 0.0L)) throw DomainError("model weights must not all be zero");
  std::vector<double> out;
  for (double e : eta) out.push_back(static_cast<double>(static_cast<long double>(e) / total));
  return out;
}

/// Neuron supports from a trace: one row per neuron, columns run over samples
/// (and, for conv layers, spatial positions within each sample).
inline Matrix activation_support(const NetworkModel& model, const ActivationTrace& trace, Index layer) {
  if (layer < 0 || layer >= static_cast<Index>(trace.pre_activations.size()))
    throw ShapeError("activation support: trace has no layer " + std::to_string(layer));
  const Matrix& z = trace.pre_activations[static_cast<std::size_t>(layer)];
  const Index neurons = model.width(layer);
  const Index spatial = model.conv_shape(layer).spatial();
  if (z.cols() != neurons * spatial)
    throw ShapeError("activation support: layer " + std::to_string(layer) + " trace has " + std::to_string(z.cols()) +
                     " columns, expected " + std::to_string(neurons * spatial));
  const Index m = z.rows();
  Matrix support(neurons, m * spatial);
  for (Index c = 0; c < neurons; ++c)
    for (Index s = 0; s < m; ++s) support.row(c).segment(s * spatial, spatial) = z.row(s).segment(c * spatial, spatial);
  return support;
}

/// Support of layer `layer`'s neurons: pre-activations over the shared batch
/// (acts) or the incoming weight rows already aligned to the estimate (wts).
inline Matrix get_support(const NetworkModel& model, Alignment psi, Index layer, const ActivationTrace* trace,
                          const Matrix* aligned_incoming) {
  if (layer < 0 || layer >= model.depth())
    throw ShapeError("get_support: layer " + std::to_string(layer) + " out of range for depth " +
                     std::to_string(model.depth()));
  if (psi == Alignment::acts) {
    if (trace == nullptr) throw DomainError("get_support: activation alignment needs an activation trace");
    return activation_support(model, *trace, layer);
  }
  if (aligned_incoming == nullptr) throw DomainError("get_support: weight alignment needs the aligned incoming weights");
  if (aligned_incoming->rows() != model.width(layer))
    throw ShapeError("get_support: aligned weights have " + std::to_string(aligned_incoming->rows()) + " rows, layer has " +
                     std::to_string(model.width(layer)) + " neurons");
  return *aligned_incoming;
}

/// W T diag(1/beta), with T acting on column blocks of width `block`.
inline Matrix align_incoming(const Matrix& w, const Matrix& t_prev, const Vector& beta_prev, Index block = 1) {
  if (block < 1 || w.cols() != t_prev.rows() * block || t_prev.cols() != beta_prev.size())
    throw ShapeError("align_incoming: weights " + shape_str(w) + ", previous plan " + shape_str(t_prev) +
                     ", block " + std::to_string(block) + ", histogram of size " + std::to_string(beta_prev.size()));
  for (Index q = 0; q < beta_prev.size(); ++q)
    if (!(beta_prev(q) > 0.0)) throw DomainError("align_incoming: histogram entry " + std::to_string(q) + " is zero");
  Matrix scaled = t_prev;
  for (Index q = 0; q < scaled.cols(); ++q) scaled.col(q) /= beta_prev(q);
  if (block == 1) return w * scaled;
  Matrix out = Matrix::Zero(w.rows(), scaled.cols() * block);
  for (Index q = 0; q < scaled.cols(); ++q)
    for (Index p = 0; p < scaled.rows(); ++p)
      if (scaled(p, q) != 0.0) out.middleCols(q * block, block) += scaled(p, q) * w.middleCols(p * block, block);
  return out;
}

/// diag(1/beta) T^T W: row q becomes the T-weighted mean of W's rows.
inline Matrix align_neurons(const Matrix& w_hat, const Matrix& t, const Vector& beta) {
  if (t.rows() != w_hat.rows())
    throw ShapeError("align_neurons: plan " + shape_str(t) + " does not match weights " + shape_str(w_hat));
  return barycentric_project(t, w_hat, beta);
}

struct ImportanceHistograms {
  std::vector<Vector> histograms;  // one per layer
  std::vector<bool> fallback;      // layer fell back to uniform
};

inline constexpr double kImportanceFloor = 1e-8;

/// Per-neuron mass proportional to |mean| * std of its pre-activations over
/// the batch, floored and normalized. The output layer stays uniform.
inline ImportanceHistograms importance_histogram(const NetworkModel& model, const ActivationTrace& trace) {
  if (static_cast<Index>(trace.pre_activations.size()) != model.depth())
    throw ShapeError("importance_histogram: trace covers " + std::to_string(trace.pre_activations.size()) +
                     " layers, model has " + std::to_string(model.depth()));
  ImportanceHistograms out;
  for (Index l = 0; l < model.depth(); ++l) {
    const Index n = model.width(l);
    if (l + 1 == model.depth()) {
      out.histograms.push_back(uniform_histogram(n));
      out.fallback.push_back(false);
      continue;
    }
    const Matrix s = activation_support(model, trace, l);
    Vector raw(n);
    for (Index i = 0; i < n; ++i) {
      const double mean = s.row(i).mean();
      const double var = (s.row(i).array() - mean).square().mean();
      raw(i) = std::abs(mean) * std::sqrt(var);
    }
    if (!(raw.maxCoeff() > 0.0)) {
      out.histograms.push_back(uniform_histogram(n));
      out.fallback.push_back(true);
      continue;
    }
    raw = raw.cwiseMax(kImportanceFloor);
    out.histograms.push_back(raw / raw.sum());
    out.fallback.push_back(false);
  }
  return out;
}

/// Scaled identity diag(h) for a square layer.
inline Matrix scaled_identity(const Vector& h) { return h.asDiagonal().toDenseMatrix(); }

/// trace(T) / sum(T); for rectangular plans the leading diagonal is used.
inline double trace_ratio(const Matrix& t) {
  const double total = t.sum();
  if (!(total > 0.0)) return 0.0;
  return std::clamp(t.diagonal().sum() / total, 0.0, 1.0);
}

namespace detail {

inline void check_compatible(const NetworkModel& m, const NetworkModel& estimate, std::size_t k) {
  const std::string tag = "fuse: model " + std::to_string(k);
  if (m.depth() != estimate.depth())
    throw ShapeError(tag + " has depth " + std::to_string(m.depth()) + ", estimate has " + std::to_string(estimate.depth()));
  if (!(m.input_shape() == estimate.input_shape())) throw ShapeError(tag + " has a different input shape");
  for (Index l = 0; l < m.depth(); ++l) {
    const LayerSpec &a = m.layer(l), &b = estimate.layer(l);
    if (a.kind != b.kind || a.kernel_h != b.kernel_h || a.kernel_w != b.kernel_w || a.pool != b.pool ||
        a.activation != b.activation)
      throw ShapeError(tag + " layer " + std::to_string(l) + " differs in kind, kernel, pooling or activation");
  }
  if (m.output_dim() != estimate.output_dim()) throw ShapeError(tag + " has a different output width");
}

inline bool identical(const NetworkModel& a, const NetworkModel& b) {
  if (!a.same_architecture(b)) return false;
  for (Index l = 0; l < a.depth(); ++l)
    if (a.weight(l) != b.weight(l)) return false;
  return true;
}

}  // namespace detail

/// Fuses `models` into a network shaped like `estimate`.
inline FusionResult fuse(const std::vector<NetworkModel>& models, const NetworkModel& estimate,
                         const FusionConfig& config) {
  if (models.empty()) throw DomainError("fuse: need at least one model");
  for (std::size_t k = 0; k < models.size(); ++k) detail::check_compatible(models[k], estimate, k);
  if (config.ground_cost_exponent != 1 && config.ground_cost_exponent != 2)
    throw DomainError("fuse: ground cost exponent must be 1 or 2");
  if (config.solver == SolverKind::sinkhorn && !(config.regularization > 0.0))
    throw DomainError("fuse: sinkhorn regularization must be positive");
  const bool acts = config.alignment == Alignment::acts;
  const bool need_trace = acts || config.histogram == HistogramMode::importance;
  if (need_trace && (!config.sample_batch || config.sample_batch->rows() < 1))
    throw DomainError("fuse: activation alignment and importance histograms need a sample batch");

  const std::size_t K = models.size();
  const Index L = estimate.depth();
  FusionReport report;
  report.model_weights = normalize_weights(config.model_weights, K);

  std::vector<bool> is_anchor(K);
  for (std::size_t k = 0; k < K; ++k) is_anchor[k] = detail::identical(models[k], estimate);

  std::vector<ActivationTrace> traces;
  ActivationTrace estimate_trace;
  if (need_trace) {
    for (const auto& m : models) traces.push_back(forward(m, *config.sample_batch).trace);
    estimate_trace = forward(estimate, *config.sample_batch).trace;
  }

  auto histograms_for = [&](const NetworkModel& m, const ActivationTrace* trace) {
    ImportanceHistograms h;
    if (config.histogram == HistogramMode::importance) return importance_histogram(m, *trace);
    for (Index l = 0; l < m.depth(); ++l) {
      h.histograms.push_back(uniform_histogram(m.width(l)));
      h.fallback.push_back(false);
    }
    return h;
  };
  std::vector<ImportanceHistograms> model_hist;
  for (std::size_t k = 0; k < K; ++k) model_hist.push_back(histograms_for(models[k], need_trace ? &traces[k] : nullptr));
  const ImportanceHistograms estimate_hist = histograms_for(estimate, need_trace ? &estimate_trace : nullptr);
  for (const auto& h : model_hist) report.importance_fallback.push_back(h.fallback);
  report.importance_fallback.push_back(estimate_hist.fallback);

  std::vector<Matrix> prev_plans(K);
  Vector prev_beta;
  std::vector<Matrix> fused_weights;
  report.plans.resize(static_cast<std::size_t>(L));
  report.distances.resize(static_cast<std::size_t>(L));
  report.layer_distance.assign(static_cast<std::size_t>(L), 0.0);
  report.trace_ratios.assign(K, 1.0);

  for (Index l = 0; l < L; ++l) {
    const std::size_t ls = static_cast<std::size_t>(l);
    const bool output_layer = l + 1 == L;
    const Vector& beta = estimate_hist.histograms[ls];
    const Matrix target =
        acts ? activation_support(estimate, estimate_trace, l) : estimate.weight(l);  // estimate's own plan is identity
    Matrix fused = Matrix::Zero(estimate.width(l), estimate.layer(l).weight_cols());

    for (std::size_t k = 0; k < K; ++k) {
      const NetworkModel& m = models[k];
      const Matrix w_hat = l == 0 || is_anchor[k] ? m.weight(l)
                                                  : align_incoming(m.weight(l), prev_plans[k], prev_beta, m.incoming_block(l));
      const Vector& alpha = model_hist[k].histograms[ls];

      TransportPlan plan;
      if (is_anchor[k]) {
        plan.coupling = scaled_identity(beta);
        plan.transport_cost = 0.0;
      } else {
        const Matrix source = get_support(m, config.alignment, l, need_trace ? &traces[k] : nullptr, &w_hat);
        try {
          const CostMatrix cost = build_cost_matrix(source, target, config.ground_cost_exponent);
          plan = config.solver == SolverKind::exact
                     ? solve_exact(cost, alpha, beta)
                     : solve_sinkhorn(cost, alpha, beta, SinkhornOptions{.regularization = config.regularization});
        } catch (const Error& e) {
          throw SolverError("fuse: layer " + std::to_string(l) + ", model " + std::to_string(k) + ": " + e.what());
        }
      }
      const double dist = std::pow(std::max(0.0, plan.transport_cost), 1.0 / config.ground_cost_exponent);
      report.distances[ls].push_back(dist);
      report.layer_distance[ls] += report.model_weights[k] * dist;

      Matrix used = plan.coupling;
      if (output_layer) {
        report.trace_ratios[k] = trace_ratio(plan.coupling);
        if (config.identity_output_plan && m.width(l) == estimate.width(l)) used = scaled_identity(beta);
      }
      // The anchor's plans are all diag(beta), under which both alignments are the identity map.
      const Matrix aligned = is_anchor[k] ? w_hat : align_neurons(w_hat, used, beta);
      if (report.model_weights[k] != 0.0) fused += report.model_weights[k] * aligned;
      prev_plans[k] = std::move(used);
      report.plans[ls].push_back(std::move(plan));
    }
    prev_beta = beta;
    fused_weights.push_back(std::move(fused));
  }
  report.last_layer_trace_ratio = *std::min_element(report.trace_ratios.begin(), report.trace_ratios.end());
  return {estimate.with_weights(std::move(fused_weights)), std::move(report)};
}

/// Per-layer transport distances, ready for CSV: layer, eta-weighted
/// distance, then one column per model.
inline Table layer_distance_report(const FusionReport& report) {
  std::vector<std::string> cols{"layer", "distance"};
  const std::size_t K = report.model_weights.size();
  for (std::size_t k = 0; k < K; ++k) cols.push_back("model_" + std::to_string(k));
  Table t(cols);
  for (std::size_t l = 0; l < report.layer_distance.size(); ++l) {
    std::vector<Cell> row{static_cast<std::int64_t>(l), report.layer_distance[l]};
    for (std::size_t k = 0; k < K; ++k) row.emplace_back(report.distances[l][k]);
    t.add_row(std::move(row));
  }
  return t;
}

}  // namespace otfuse
