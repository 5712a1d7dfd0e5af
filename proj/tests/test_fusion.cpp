#include <gtest/gtest.h>

#include "otfuse/fusion.hpp"
#include "support/builders.hpp"

using namespace otfuse;
using otfuse::test::mat;
using otfuse::test::vec;

namespace {

double max_weight_diff(const NetworkModel& a, const NetworkModel& b) {
  double d = 0.0;
  for (Index l = 0; l < a.depth(); ++l) d = std::max(d, (a.weight(l) - b.weight(l)).cwiseAbs().maxCoeff());
  return d;
}

FusionConfig wts_config(std::vector<double> eta = {}) {
  FusionConfig c;
  c.alignment = Alignment::wts;
  c.model_weights = std::move(eta);
  return c;
}

FusionConfig acts_config(const Matrix& batch, std::vector<double> eta = {}) {
  FusionConfig c;
  c.alignment = Alignment::acts;
  c.sample_batch = batch;
  c.model_weights = std::move(eta);
  return c;
}

}  // namespace

TEST(GetSupport, WeightsPassThrough) {
  const NetworkModel m = NetworkModel::mlp(2, {2}, 1);
  const Matrix w = mat({{1, 2}, {3, 4}});
  EXPECT_EQ(get_support(m, Alignment::wts, 0, nullptr, &w), w);
}

TEST(GetSupport, SingleSampleActivations) {
  const NetworkModel m = test::random_mlp(3, {2}, 1, 1);
  const ActivationTrace trace = forward(m, test::random_matrix(1, 3, 2)).trace;
  const Matrix s = get_support(m, Alignment::acts, 0, &trace, nullptr);
  ASSERT_EQ(s.rows(), 2);
  ASSERT_EQ(s.cols(), 1);
  EXPECT_EQ(s.col(0), trace.pre_activations[0].row(0).transpose());
}

TEST(GetSupport, IdenticalModelsGiveZeroDiagonalCost) {
  const NetworkModel m = test::random_mlp(4, {6}, 2, 3);
  const Matrix batch = test::random_matrix(10, 4, 4);
  const ActivationTrace t1 = forward(m, batch).trace, t2 = forward(m, batch).trace;
  const Matrix s1 = get_support(m, Alignment::acts, 0, &t1, nullptr);
  const Matrix s2 = get_support(m, Alignment::acts, 0, &t2, nullptr);
  EXPECT_EQ(s1, s2);
  const CostMatrix c = build_cost_matrix(s1, s2);
  for (Index i = 0; i < c.rows(); ++i) EXPECT_EQ(c(i, i), 0.0);
}

TEST(GetSupport, ConvChannelsConcatenateSamplesAndPositions) {
  const NetworkModel cnn = test::random_cnn(5);
  const ActivationTrace t = forward(cnn, test::random_matrix(2, 64, 6)).trace;
  const Matrix s = get_support(cnn, Alignment::acts, 0, &t, nullptr);
  EXPECT_EQ(s.rows(), 3);
  EXPECT_EQ(s.cols(), 2 * 64);
  EXPECT_EQ(s(1, 64 + 5), t.pre_activations[0](1, 64 + 5));
}

TEST(GetSupport, Errors) {
  const NetworkModel m = test::random_mlp(3, {2}, 1, 1);
  EXPECT_THROW(get_support(m, Alignment::acts, 0, nullptr, nullptr), DomainError);
  EXPECT_THROW(get_support(m, Alignment::wts, 0, nullptr, nullptr), DomainError);
  const Matrix w = Matrix::Zero(2, 3);
  EXPECT_THROW(get_support(m, Alignment::wts, 5, nullptr, &w), ShapeError);
  EXPECT_THROW(get_support(m, Alignment::wts, -1, nullptr, &w), ShapeError);
}

TEST(AlignIncoming, ScaledIdentityKeepsWeights) {
  const Matrix w = test::random_matrix(3, 4, 1);
  const Vector beta = vec({.1, .2, .3, .4});
  EXPECT_TRUE(align_incoming(w, scaled_identity(beta), beta).isApprox(w, 1e-14));
}

TEST(AlignIncoming, PermutationPermutesColumns) {
  const Matrix w = mat({{1, 2, 3}, {4, 5, 6}});
  Matrix p = Matrix::Zero(3, 3);
  p(0, 1) = p(1, 2) = p(2, 0) = 1.0;
  const Matrix got = align_incoming(w, p / 3.0, uniform_histogram(3));
  EXPECT_TRUE(got.isApprox(w * p, 1e-14));
}

TEST(AlignIncoming, UniformCouplingAveragesColumns) {
  EXPECT_TRUE(align_incoming(mat({{1, 3}}), mat({{.25, .25}, {.25, .25}}), vec({.5, .5})).isApprox(mat({{2, 2}})));
}

TEST(AlignIncoming, ColumnsLieOnSimplex) {
  const Matrix t = mat({{.1, .2}, {.3, .05}, {.1, .25}});
  const Vector beta = t.colwise().sum().transpose();
  Matrix scaled = t;
  for (Index q = 0; q < 2; ++q) scaled.col(q) /= beta(q);
  for (Index q = 0; q < 2; ++q) EXPECT_NEAR(scaled.col(q).sum(), 1.0, 1e-9);
  // Columns of the result are convex combinations of the original columns.
  const Matrix w = mat({{0, 1, 2}});
  const Matrix got = align_incoming(w, t, beta);
  EXPECT_GE(got.minCoeff(), 0.0);
  EXPECT_LE(got.maxCoeff(), 2.0);
}

TEST(AlignIncoming, BlockStructure) {
  // Two previous neurons, each owning a block of 2 columns; swap them.
  const Matrix w = mat({{1, 2, 3, 4}});
  const Matrix got = align_incoming(w, mat({{0, .5}, {.5, 0}}), vec({.5, .5}), 2);
  EXPECT_EQ(got, mat({{3, 4, 1, 2}}));
}

TEST(AlignIncoming, Errors) {
  EXPECT_THROW(align_incoming(Matrix::Zero(2, 3), Matrix::Zero(2, 2), uniform_histogram(2)), ShapeError);
  EXPECT_THROW(align_incoming(Matrix::Zero(2, 2), Matrix::Zero(2, 2), vec({1, 0})), DomainError);
}

TEST(AlignNeurons, ScaledIdentity) {
  const Matrix w = test::random_matrix(3, 2, 3);
  EXPECT_TRUE(align_neurons(w, Matrix::Identity(3, 3) / 3.0, uniform_histogram(3)).isApprox(w, 1e-14));
}

TEST(AlignNeurons, PermutationPermutesRows) {
  const Matrix w = mat({{1, 1}, {2, 2}, {3, 3}});
  Matrix t = Matrix::Zero(3, 3);
  t(0, 1) = t(1, 2) = t(2, 0) = 1.0 / 3.0;
  EXPECT_TRUE(align_neurons(w, t, uniform_histogram(3)).isApprox(mat({{3, 3}, {1, 1}, {2, 2}})));
}

TEST(AlignNeurons, UniformCouplingAveragesRows) {
  EXPECT_TRUE(align_neurons(mat({{0, 0}, {2, 4}}), mat({{.25, .25}, {.25, .25}}), vec({.5, .5}))
                  .isApprox(mat({{1, 2}, {1, 2}})));
}

TEST(AlignNeurons, ZeroMass) {
  EXPECT_THROW(align_neurons(mat({{0, 0}, {2, 4}}), mat({{.5, 0}, {.5, 0}}), vec({1, 0})), DomainError);
}

TEST(Fuse, SingleModelAnchor) {
  const NetworkModel m = test::random_mlp(5, {4, 3}, 2, 1);
  const Matrix batch = test::random_matrix(6, 5, 2);
  for (const FusionConfig& cfg : {wts_config(), acts_config(batch)}) {
    const FusionResult r = fuse({m}, m, cfg);
    EXPECT_EQ(max_weight_diff(r.model, m), 0.0);
    for (const auto& layer : r.report.plans) EXPECT_TRUE(layer[0].coupling.isDiagonal());
  }
}

TEST(Fuse, SelfFusionIdentity) {
  const NetworkModel m = test::random_mlp(6, {5, 4}, 3, 2);
  const Matrix batch = test::random_matrix(8, 6, 3);
  for (const FusionConfig& cfg : {wts_config({.5, .5}), acts_config(batch, {.5, .5})}) {
    const FusionResult r = fuse({m, m}, m, cfg);
    EXPECT_LE(max_weight_diff(r.model, m), 1e-9);
    for (double d : r.report.layer_distance) EXPECT_EQ(d, 0.0);
  }
}

TEST(Fuse, AnchorFixity) {
  const NetworkModel a = test::random_mlp(6, {5, 4}, 3, 10);
  const NetworkModel b = test::random_mlp(6, {5, 4}, 3, 11);
  const Matrix batch = test::random_matrix(8, 6, 3);
  for (const FusionConfig& cfg : {wts_config({0, 1}), acts_config(batch, {0, 1})}) {
    const FusionResult r = fuse({a, b}, b, cfg);
    EXPECT_EQ(max_weight_diff(r.model, b), 0.0);
    for (const auto& layer : r.report.plans) EXPECT_TRUE(layer[1].coupling.isApprox(scaled_identity(uniform_histogram(layer[1].coupling.rows()))));
  }
}

TEST(Fuse, PermutationTwinRecoveryMlp) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const NetworkModel m = test::random_mlp(10, {12, 8, 6}, 4, seed);
    const NetworkModel twin = permute_model(m, test::random_hidden_permutations(m, seed + 1000));
    const FusionResult r = fuse({twin, m}, m, wts_config({.5, .5}));
    EXPECT_LE(max_weight_diff(r.model, m), 1e-6);
    EXPECT_NEAR(r.report.last_layer_trace_ratio, 1.0, 1e-9);
    for (double d : r.report.layer_distance) EXPECT_NEAR(d, 0.0, 1e-9);
  }
}

TEST(Fuse, PermutationTwinRecoveryActs) {
  const NetworkModel m = test::random_mlp(10, {12, 8}, 4, 7);
  const NetworkModel twin = permute_model(m, test::random_hidden_permutations(m, 77));
  const FusionResult r = fuse({twin, m}, m, acts_config(test::random_matrix(20, 10, 8), {.5, .5}));
  EXPECT_LE(max_weight_diff(r.model, m), 1e-6);
}

TEST(Fuse, PermutationTwinRecoveryCnn) {
  const NetworkModel m = test::random_cnn(3);
  const NetworkModel twin = permute_model(m, test::random_hidden_permutations(m, 33));
  EXPECT_LE(max_weight_diff(fuse({twin, m}, m, wts_config({.5, .5})).model, m), 1e-6);
  EXPECT_LE(max_weight_diff(fuse({twin, m}, m, acts_config(test::random_matrix(4, 64, 9), {.5, .5})).model, m), 1e-6);
}

TEST(Fuse, AlignmentPreservesFunctionForPermutations) {
  const NetworkModel m = test::random_cnn(4);
  const NetworkModel twin = permute_model(m, test::random_hidden_permutations(m, 44));
  // eta = (1, 0) returns the twin aligned onto m, which is a pure relabeling.
  const NetworkModel aligned = fuse({twin, m}, m, wts_config({1, 0})).model;
  const Matrix x = test::random_matrix(5, 64, 10);
  EXPECT_LE((predict(aligned, x) - predict(twin, x)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Fuse, WidthContract) {
  const NetworkModel wide = test::random_mlp(6, {10, 8}, 3, 20);
  const NetworkModel narrow = test::random_mlp(6, {4, 5}, 3, 21);
  const NetworkModel mid = test::random_mlp(6, {7, 3}, 3, 22);
  const Matrix batch = test::random_matrix(12, 6, 23);
  for (const FusionConfig& cfg : {wts_config(), acts_config(batch)}) {
    for (const NetworkModel* est : {&wide, &narrow, &mid}) {
      const FusionResult r = fuse({wide, narrow, mid}, *est, cfg);
      EXPECT_EQ(r.model.widths(), est->widths());
      const Matrix x = test::random_matrix(3, 6, 24);
      EXPECT_TRUE(predict(r.model, x).allFinite());
    }
  }
  const NetworkModel cnn_wide = test::random_cnn(30);
  std::vector<LayerSpec> narrow_layers{LayerSpec::conv(1, 2, 3, true), LayerSpec::conv(2, 3, 3, false),
                                       LayerSpec::dense(3 * 16, 4), LayerSpec::dense(4, 3, Activation::none)};
  const NetworkModel cnn_narrow = test::randomize(NetworkModel::zeros({1, 8, 8}, narrow_layers), 31);
  const FusionResult r = fuse({cnn_wide, cnn_narrow}, cnn_narrow, wts_config());
  EXPECT_EQ(r.model.widths(), cnn_narrow.widths());
}

TEST(Fuse, EtaNormalizationIsBitIdentical) {
  const NetworkModel a = test::random_mlp(6, {5}, 3, 40);
  const NetworkModel b = test::random_mlp(6, {5}, 3, 41);
  const NetworkModel ref = fuse({a, b}, b, wts_config({1, 3})).model;
  for (double scale : {2.0, 0.5, 1024.0, 3.0}) {
    const NetworkModel got = fuse({a, b}, b, wts_config({1 * scale, 3 * scale})).model;
    for (Index l = 0; l < ref.depth(); ++l) EXPECT_EQ(got.weight(l), ref.weight(l)) << "scale " << scale;
  }
}

TEST(Fuse, IndependentPairHasPositiveDistances) {
  const NetworkModel a = test::random_mlp(6, {5, 4}, 3, 50);
  const NetworkModel b = test::random_mlp(6, {5, 4}, 3, 51);
  const FusionResult r = fuse({a, b}, b, acts_config(test::random_matrix(10, 6, 52), {.5, .5}));
  for (double d : r.report.layer_distance) EXPECT_GT(d, 0.0);
  const Table t = layer_distance_report(r.report);
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t.columns, (std::vector<std::string>{"layer", "distance", "model_0", "model_1"}));
  EXPECT_EQ(t.number(2, "model_1"), 0.0);
  EXPECT_GE(r.report.last_layer_trace_ratio, 0.0);
  EXPECT_LE(r.report.last_layer_trace_ratio, 1.0);
}

TEST(Fuse, SinkhornSolverOnTwin) {
  const NetworkModel m = test::random_mlp(8, {6}, 3, 60);
  const NetworkModel twin = permute_model(m, test::random_hidden_permutations(m, 61));
  FusionConfig cfg = wts_config({.5, .5});
  cfg.solver = SolverKind::sinkhorn;
  cfg.regularization = 0.01;
  EXPECT_LE(max_weight_diff(fuse({twin, m}, m, cfg).model, m), 1e-3);
}

TEST(Fuse, Errors) {
  const NetworkModel a = test::random_mlp(6, {5}, 3, 1);
  const NetworkModel deep = test::random_mlp(6, {5, 4}, 3, 2);
  EXPECT_THROW(fuse({deep}, a, wts_config()), ShapeError);
  FusionConfig no_batch;
  no_batch.alignment = Alignment::acts;
  EXPECT_THROW(fuse({a}, a, no_batch), DomainError);
  EXPECT_THROW(fuse({a}, a, wts_config({0})), DomainError);
  EXPECT_THROW(fuse({a}, a, wts_config({.5, .5})), ShapeError);
  EXPECT_THROW(fuse({}, a, wts_config()), DomainError);
}

TEST(ImportanceHistogram, EqualActivationsGiveUniform) {
  const NetworkModel m = NetworkModel::mlp(2, {3}, 1);
  ActivationTrace constant{{Matrix::Constant(4, 3, 2.0), Matrix::Zero(4, 1)}, 0};
  const ImportanceHistograms h = importance_histogram(m, constant);
  EXPECT_TRUE(h.histograms[0].isApprox(uniform_histogram(3)));
  Matrix varying(2, 3);
  varying << 1, 1, 1, 3, 3, 3;
  const ImportanceHistograms h2 = importance_histogram(m, {{varying, Matrix::Zero(2, 1)}, 0});
  EXPECT_TRUE(h2.histograms[0].isApprox(uniform_histogram(3)));
  EXPECT_FALSE(h2.fallback[0]);
}

TEST(ImportanceHistogram, DeadNeuronHitsFloor) {
  const NetworkModel m = NetworkModel::mlp(2, {2}, 1);
  Matrix acts(2, 2);
  acts << 1, 0, 3, 0;  // neuron 0: mean 2, std 1; neuron 1 dead
  const ImportanceHistograms h = importance_histogram(m, {{acts, Matrix::Zero(2, 1)}, 0});
  EXPECT_NEAR(h.histograms[0](1), kImportanceFloor / (2.0 + kImportanceFloor), 1e-20);
  EXPECT_NEAR(h.histograms[0].sum(), 1.0, 1e-12);
}

TEST(ImportanceHistogram, ZeroProductFallsBack) {
  // Samples (1,1) and (1,-1): means (1,0), stds (0,1), products (0,0).
  const NetworkModel m = NetworkModel::mlp(2, {2}, 1);
  Matrix acts(2, 2);
  acts << 1, 1, 1, -1;
  const ImportanceHistograms h = importance_histogram(m, {{acts, Matrix::Zero(2, 1)}, 0});
  EXPECT_TRUE(h.histograms[0].isApprox(uniform_histogram(2)));
  EXPECT_TRUE(h.fallback[0]);
}

TEST(ImportanceHistogram, FusionWithImportanceSelfIdentity) {
  const NetworkModel m = test::random_mlp(6, {5, 4}, 3, 70);
  FusionConfig cfg = acts_config(test::random_matrix(9, 6, 71), {.5, .5});
  cfg.histogram = HistogramMode::importance;
  EXPECT_LE(max_weight_diff(fuse({m, m}, m, cfg).model, m), 1e-9);
  const NetworkModel other = test::random_mlp(6, {5, 4}, 3, 72);
  const FusionResult r = fuse({other, m}, m, cfg);
  EXPECT_TRUE(r.model.weight(0).allFinite());
}
