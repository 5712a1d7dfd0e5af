#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "otfuse/dataset.hpp"
#include "otfuse/error.hpp"
#include "otfuse/model.hpp"
#include "otfuse/rng.hpp"

namespace otfuse {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.5;
  Index batch_size = 64;
  int epochs = 10;
  std::uint64_t seed = 0;
  /// (epoch, factor): from that 1-based epoch on, the rate is multiplied by factor.
  std::vector<std::pair<int, double>> lr_schedule;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw DomainError("learning rate must be finite and nonnegative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw DomainError("momentum must lie in [0, 1)");
    if (batch_size < 1) throw DomainError("batch size must be positive");
    if (epochs < 1) throw DomainError("epochs must be at least 1");
    for (const auto& [e, f] : lr_schedule)
      if (e < 1 || !(f > 0.0)) throw DomainError("learning-rate schedule entries need epoch >= 1 and factor > 0");
  }

  double rate_at(int epoch) const {
    double r = lr;
    for (const auto& [e, f] : lr_schedule)
      if (epoch >= e) r *= f;
    return r;
  }
};

/// Uniform in +-1/sqrt(fan_in) per layer, seeded.
inline NetworkModel init_model(const NetworkModel& arch, std::uint64_t seed) {
  std::vector<Matrix> w;
  for (Index l = 0; l < arch.depth(); ++l) {
    const Matrix& shape = arch.weight(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(shape.cols()));
    CounterRng rng(seed, 0x1000 + static_cast<std::uint64_t>(l));
    Matrix m(shape.rows(), shape.cols());
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    w.push_back(std::move(m));
  }
  return arch.with_weights(std::move(w));
}

struct LossGradient {
  double loss = 0.0;
  std::vector<Matrix> gradients;
};

namespace detail {

inline void check_labels(const NetworkModel& model, const Matrix& x, const std::vector<Index>& labels) {
  if (static_cast<Index>(labels.size()) != x.rows())
    throw ShapeError("got " + std::to_string(labels.size()) + " labels for " + std::to_string(x.rows()) + " samples");
  for (Index y : labels)
    if (y < 0 || y >= model.output_dim())
      throw DomainError("label " + std::to_string(y) + " outside the model's " + std::to_string(model.output_dim()) +
                        " outputs");
}

/// Turns scores into d(mean loss)/d(scores) in place and returns the mean loss.
inline double softmax_xent(Matrix& scores, const std::vector<Index>& labels) {
  const Index m = scores.rows();
  double loss = 0.0;
  for (Index s = 0; s < m; ++s) {
    auto row = scores.row(s);
    const double mx = row.maxCoeff();
    row.array() = (row.array() - mx).exp();
    const double z = row.sum();
    row /= z;
    const Index y = labels[static_cast<std::size_t>(s)];
    loss -= std::log(std::max(row(y), std::numeric_limits<double>::min()));
    row(y) -= 1.0;
  }
  scores /= static_cast<double>(m);
  return loss / static_cast<double>(m);
}

}  // namespace detail

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// every weight matrix.
inline LossGradient loss_and_gradient(const NetworkModel& model, const Matrix& x, const std::vector<Index>& labels) {
  detail::check_labels(model, x, labels);
  detail::ForwardCache cache = detail::forward_pass(model, x, true);
  LossGradient out;
  Matrix delta = std::move(cache.output);
  out.loss = detail::softmax_xent(delta, labels);
  out.gradients.resize(static_cast<std::size_t>(model.depth()));
  const Index m = x.rows();
  for (Index l = model.depth() - 1; l >= 0; --l) {
    const auto ul = static_cast<std::size_t>(l);
    const LayerSpec& spec = model.layer(l);
    const Matrix& w = model.weight(l);
    const Matrix& a = cache.inputs[ul];
    // delta is d(loss)/d(layer output after activation and pooling).
    if (spec.kind == LayerKind::conv2d && spec.pool) {
      const FeatureShape pre = model.conv_shape(l);
      Matrix unpooled = Matrix::Zero(m, pre.size());
      const auto& arg = cache.pool_argmax[ul];
      const Index cells = delta.cols();
      for (Index s = 0; s < m; ++s)
        for (Index c = 0; c < cells; ++c) unpooled(s, arg[static_cast<std::size_t>(s * cells + c)]) += delta(s, c);
      delta = std::move(unpooled);
    }
    if (spec.activation == Activation::relu) delta.array() *= (cache.pre[ul].array() > 0.0).cast<double>();
    Matrix grad_in;
    if (spec.kind == LayerKind::dense) {
      out.gradients[ul].noalias() = delta.transpose() * a;
      if (l > 0) grad_in.noalias() = delta * w;
    } else {
      const FeatureShape in = model.in_shape(l);
      const detail::ConvGeometry g{in.channels, in.height, in.width, spec.kernel_h, spec.kernel_w};
      Matrix gw = Matrix::Zero(w.rows(), w.cols());
      if (l > 0) grad_in = Matrix::Zero(m, in.size());
      Matrix cols, dcols;
      for (Index s = 0; s < m; ++s) {
        detail::im2col(a.row(s).data(), g, cols);
        const Eigen::Map<const Matrix> dresp(delta.row(s).data(), spec.out_width, g.positions());
        gw.noalias() += dresp * cols.transpose();
        if (l > 0) {
          dcols.noalias() = w.transpose() * dresp;
          detail::col2im(dcols, g, grad_in.row(s).data());
        }
      }
      out.gradients[ul] = std::move(gw);
    }
    delta = std::move(grad_in);
  }
  return out;
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> test_accuracy;
};

struct TrainResult {
  NetworkModel model;
  std::vector<EpochStats> curve;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;  // NaN where the class is absent
  Index correct = 0;
  Index total = 0;
};

/// Index of the largest score; ties go to the lowest index.
inline Index argmax_row(const Eigen::Ref<const Eigen::RowVectorXd>& r) {
  Index best = 0;
  for (Index c = 1; c < r.size(); ++c)
    if (r(c) > r(best)) best = c;
  return best;
}

inline EvalResult score_predictions(const Matrix& scores, const Dataset& data) {
  EvalResult r;
  r.total = data.size();
  std::vector<Index> hit(static_cast<std::size_t>(data.class_count), 0), seen(hit.size(), 0);
  for (Index s = 0; s < scores.rows(); ++s) {
    const auto y = static_cast<std::size_t>(data.labels[static_cast<std::size_t>(s)]);
    ++seen[y];
    if (argmax_row(scores.row(s)) == static_cast<Index>(y)) {
      ++hit[y];
      ++r.correct;
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  for (std::size_t c = 0; c < hit.size(); ++c)
    r.per_class.push_back(seen[c] ? static_cast<double>(hit[c]) / static_cast<double>(seen[c])
                                  : std::numeric_limits<double>::quiet_NaN());
  return r;
}

namespace detail {

inline Matrix batched_predict(const NetworkModel& model, const Matrix& x) {
  constexpr Index chunk = 1024;
  Matrix out(x.rows(), model.output_dim());
  for (Index s = 0; s < x.rows(); s += chunk) {
    const Index k = std::min(chunk, x.rows() - s);
    out.middleRows(s, k) = predict(model, x.middleRows(s, k));
  }
  return out;
}

}  // namespace detail

inline EvalResult evaluate(const NetworkModel& model, const Dataset& data) {
  if (data.class_count > model.output_dim())
    throw ShapeError("dataset has " + std::to_string(data.class_count) + " classes, model outputs " +
                     std::to_string(model.output_dim()));
  return score_predictions(detail::batched_predict(model, data.features), data);
}

/// Accuracy of the argmax of the mean output scores.
inline EvalResult prediction_ensemble(const std::vector<NetworkModel>& models, const Dataset& data) {
  if (models.empty()) throw DomainError("prediction_ensemble needs at least one model");
  Matrix sum = detail::batched_predict(models.front(), data.features);
  for (std::size_t k = 1; k < models.size(); ++k) {
    if (models[k].output_dim() != models.front().output_dim())
      throw ShapeError("prediction_ensemble: output dimensions differ");
    sum += detail::batched_predict(models[k], data.features);
  }
  if (models.size() > 1) sum /= static_cast<double>(models.size());
  return score_predictions(sum, data);
}

/// Mini-batch SGD with momentum on softmax cross-entropy, starting from the
/// given weights. Passing `eval` records test accuracy after each epoch.
inline TrainResult finetune(const NetworkModel& start, const Dataset& data, const TrainConfig& config,
                            const Dataset* eval = nullptr) {
  config.validate();
  data.validate();
  if (data.dim() != start.input_dim())
    throw ShapeError("training data has " + std::to_string(data.dim()) + " features, model expects " +
                     std::to_string(start.input_dim()));
  for (Index y : data.labels)
    if (y >= start.output_dim()) throw DomainError("label " + std::to_string(y) + " exceeds the model's outputs");

  std::vector<Matrix> w = start.weights();
  std::vector<Matrix> velocity;
  for (const auto& m : w) velocity.push_back(Matrix::Zero(m.rows(), m.cols()));
  TrainResult result{start, {}};
  const Index n = data.size();
  Matrix xb;
  std::vector<Index> yb;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double rate = config.rate_at(epoch);
    const auto order = random_permutation(static_cast<std::size_t>(n), config.seed, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    for (Index begin = 0; begin < n; begin += config.batch_size) {
      const Index k = std::min(config.batch_size, n - begin);
      xb.resize(k, data.dim());
      yb.resize(static_cast<std::size_t>(k));
      for (Index r = 0; r < k; ++r) {
        const auto i = static_cast<Index>(order[static_cast<std::size_t>(begin + r)]);
        xb.row(r) = data.features.row(i);
        yb[static_cast<std::size_t>(r)] = data.labels[static_cast<std::size_t>(i)];
      }
      const LossGradient lg = loss_and_gradient(result.model, xb, yb);
      if (!std::isfinite(lg.loss))
        throw DivergenceError("training diverged (non-finite loss) in epoch " + std::to_string(epoch), epoch);
      loss_sum += lg.loss * static_cast<double>(k);
      for (std::size_t l = 0; l < w.size(); ++l) {
        velocity[l] = config.momentum * velocity[l] + lg.gradients[l];
        w[l] -= rate * velocity[l];
      }
      result.model = start.with_weights(w);
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(st.train_loss))
      throw DivergenceError("training diverged (non-finite loss) in epoch " + std::to_string(epoch), epoch);
    if (eval) st.test_accuracy = evaluate(result.model, *eval).accuracy;
    result.curve.push_back(st);
  }
  return result;
}

/// Trains from a fresh seeded initialization of `arch`.
inline TrainResult train(const NetworkModel& arch, const Dataset& data, const TrainConfig& config,
                         const Dataset* eval = nullptr) {
  return finetune(init_model(arch, config.seed), data, config, eval);
}

/// Elementwise weighted average of identically shaped models.
inline NetworkModel vanilla_average(const std::vector<NetworkModel>& models, std::vector<double> eta = {}) {
  if (models.empty()) throw DomainError("vanilla_average needs at least one model");
  if (eta.empty()) eta.assign(models.size(), 1.0 / static_cast<double>(models.size()));
  if (eta.size() != models.size())
    throw ShapeError("vanilla_average: " + std::to_string(eta.size()) + " weights for " +
                     std::to_string(models.size()) + " models");
  long double total = 0.0L;
  for (double e : eta) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw DomainError("vanilla_average: weights must be finite and nonnegative");
    total += e;
  }
  if (total <= 0.0L) throw DomainError("vanilla_average: weights sum to zero");
  for (const auto& m : models)
    if (!m.same_architecture(models.front()))
      throw ShapeError("Vanilla averaging can not be used due to different sizes: " + m.describe() + " vs " +
                       models.front().describe());
  std::vector<Matrix> w;
  for (Index l = 0; l < models.front().depth(); ++l) {
    Matrix acc = Matrix::Zero(models.front().weight(l).rows(), models.front().weight(l).cols());
    for (std::size_t k = 0; k < models.size(); ++k)
      acc += static_cast<double>(static_cast<long double>(eta[k]) / total) * models[k].weight(l);
    w.push_back(std::move(acc));
  }
  return models.front().with_weights(std::move(w));
}

}  // namespace otfuse
