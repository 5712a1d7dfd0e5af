#include <gtest/gtest.h>
#include <zlib.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "otfuse/training.hpp"
#include "support/builders.hpp"

using namespace otfuse;
using otfuse::test::mat;

namespace {

Dataset labelled(const Matrix& x, std::vector<Index> y, Index classes) {
  Dataset d;
  d.features = x;
  d.labels = std::move(y);
  d.class_count = classes;
  d.shape = {1, 1, x.cols()};
  return d;
}

Dataset balanced(Index per_class, Index classes, Index dim, std::uint64_t seed) {
  std::vector<Index> y;
  for (Index i = 0; i < per_class * classes; ++i) y.push_back(i % classes);
  return labelled(test::random_matrix(per_class * classes, dim, seed).cwiseAbs(), y, classes);
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("otfuse_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Split, SpecialLabelGoesToReceiver) {
  std::vector<Index> y;
  for (Index i = 0; i < 200; ++i) y.push_back(i % 10);
  const Dataset d = labelled(Matrix::Zero(200, 2), y, 10);
  const auto [a, b] = split_heterogeneous(d, {4, 0.1, 3});
  const auto count4 = [](const Dataset& s) { return std::count(s.labels.begin(), s.labels.end(), Index{4}); };
  EXPECT_EQ(count4(a), 20);
  EXPECT_EQ(count4(b), 0);
  EXPECT_EQ(a.size(), 20 + 18);  // all 4s plus 10% of the other 180
  EXPECT_EQ(b.size(), 162);
}

TEST(Split, FractionWithoutSpecialLabel) {
  const Dataset d = balanced(10, 10, 2, 1);
  const auto [a, b] = split_heterogeneous(d, {std::nullopt, 0.3, 5});
  EXPECT_EQ(a.size(), 30);
  EXPECT_EQ(b.size(), 70);
  const auto [h1, h2] = split_heterogeneous(d, {std::nullopt, 0.5, 5});
  EXPECT_EQ(h1.size(), h2.size());
}

TEST(Split, DisjointExhaustiveAndDeterministic) {
  Matrix x(97, 1);
  for (Index i = 0; i < 97; ++i) x(i, 0) = static_cast<double>(i);
  std::vector<Index> y;
  for (Index i = 0; i < 97; ++i) y.push_back((i * 7) % 5);
  const Dataset d = labelled(x, y, 5);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const SplitSpec& spec : {SplitSpec{2, 0.25, seed}, SplitSpec{std::nullopt, 0.6, seed}}) {
      const auto [a, b] = split_heterogeneous(d, spec);
      std::set<double> seen;
      for (Index i = 0; i < a.size(); ++i) seen.insert(a.features(i, 0));
      for (Index i = 0; i < b.size(); ++i) EXPECT_EQ(seen.count(b.features(i, 0)), 0u);
      for (Index i = 0; i < b.size(); ++i) seen.insert(b.features(i, 0));
      EXPECT_EQ(static_cast<Index>(seen.size()), d.size());
      EXPECT_EQ(a.size() + b.size(), d.size());
      const auto again = split_heterogeneous(d, spec);
      EXPECT_EQ(again.first.features, a.features);
    }
  }
}

TEST(Split, Errors) {
  const Dataset d = balanced(2, 3, 2, 1);
  EXPECT_THROW(split_heterogeneous(d, {std::nullopt, 0.0, 0}), DomainError);
  EXPECT_THROW(split_heterogeneous(d, {std::nullopt, 1.0, 0}), DomainError);
  EXPECT_THROW(split_heterogeneous(d, {7, 0.5, 0}), DomainError);
  const Dataset tiny = labelled(Matrix::Zero(1, 1), {0}, 2);
  EXPECT_THROW(split_heterogeneous(tiny, {std::nullopt, 0.5, 0}), DomainError);
}

TEST(Train, ZeroRateLeavesWeights) {
  const Dataset d = balanced(8, 3, 4, 2);
  const NetworkModel start = init_model(NetworkModel::mlp(4, {5}, 3), 9);
  TrainConfig c;
  c.lr = 0.0;
  c.epochs = 1;
  const TrainResult r = finetune(start, d, c);
  for (Index l = 0; l < start.depth(); ++l) EXPECT_EQ(r.model.weight(l), start.weight(l));
  ASSERT_EQ(r.curve.size(), 1u);
  EXPECT_FALSE(r.curve[0].test_accuracy.has_value());
}

TEST(Train, SeparableBlobsReachFullTrainAccuracy) {
  CounterRng rng(4, 0);
  Matrix x(80, 2);
  std::vector<Index> y;
  for (Index i = 0; i < 80; ++i) {
    const Index c = i % 2;
    x(i, 0) = (c ? 0.8 : 0.2) + 0.05 * rng.normal();
    x(i, 1) = (c ? 0.2 : 0.8) + 0.05 * rng.normal();
    y.push_back(c);
  }
  const Dataset d = labelled(x, y, 2);
  TrainConfig c;
  c.epochs = 50;
  c.batch_size = 8;
  c.lr = 0.1;
  const TrainResult r = train(NetworkModel::mlp(2, {8}, 2), d, c, &d);
  EXPECT_EQ(evaluate(r.model, d).accuracy, 1.0);
  EXPECT_EQ(*r.curve.back().test_accuracy, 1.0);
  EXPECT_LT(r.curve.back().train_loss, r.curve.front().train_loss);
}

TEST(Train, SeedDeterminism) {
  const Dataset d = balanced(10, 3, 4, 3);
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 7;
  c.seed = 11;
  const NetworkModel arch = NetworkModel::mlp(4, {6, 5}, 3);
  const NetworkModel m1 = train(arch, d, c).model, m2 = train(arch, d, c).model;
  for (Index l = 0; l < arch.depth(); ++l) EXPECT_EQ(m1.weight(l), m2.weight(l));
  c.seed = 12;
  EXPECT_NE(train(arch, d, c).model.weight(0), m1.weight(0));
}

TEST(Train, DivergenceReportsEpoch) {
  const Dataset d = balanced(10, 3, 4, 3);
  TrainConfig c;
  c.lr = 1e200;
  c.epochs = 3;
  c.batch_size = 5;
  try {
    train(NetworkModel::mlp(4, {6}, 3), d, c);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 1);
  }
}

TEST(Train, ConfigValidation) {
  const Dataset d = balanced(2, 3, 4, 3);
  const NetworkModel arch = NetworkModel::mlp(4, {6}, 3);
  TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(train(arch, d, c), DomainError);
  c = {};
  c.lr = -1;
  EXPECT_THROW(train(arch, d, c), DomainError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(train(arch, d, c), DomainError);
  c = {};
  EXPECT_THROW(train(NetworkModel::mlp(5, {6}, 3), d, c), ShapeError);
  EXPECT_THROW(train(NetworkModel::mlp(4, {6}, 2), d, c), DomainError);
}

TEST(Train, ScheduleCompoundsFactors) {
  TrainConfig c;
  c.lr = 0.01;
  c.lr_schedule = {{3, 0.5}, {5, 0.1}};
  EXPECT_DOUBLE_EQ(c.rate_at(1), 0.01);
  EXPECT_DOUBLE_EQ(c.rate_at(3), 0.005);
  EXPECT_DOUBLE_EQ(c.rate_at(6), 0.0005);
}

TEST(Init, UniformWithinFanInBound) {
  const NetworkModel m = init_model(NetworkModel::mlp(16, {9}, 4), 5);
  EXPECT_LE(m.weight(0).cwiseAbs().maxCoeff(), 0.25);
  EXPECT_LE(m.weight(1).cwiseAbs().maxCoeff(), 1.0 / 3.0);
  EXPECT_GT(m.weight(0).cwiseAbs().maxCoeff(), 0.2);
  EXPECT_EQ(init_model(NetworkModel::mlp(16, {9}, 4), 5).weight(0), m.weight(0));
}

namespace {

NetworkModel probe_network() {
  // 3 -> 2 relu -> 2: ten weights.
  return NetworkModel({3, 1, 1}, {LayerSpec::dense(3, 2), LayerSpec::dense(2, 2, Activation::none)},
                      {mat({{0.3, -0.2, 0.5}, {-0.4, 0.6, 0.1}}), mat({{0.7, -0.5}, {0.2, 0.9}})});
}

void expect_gradient_matches(const NetworkModel& model, const Matrix& x, const std::vector<Index>& y) {
  const LossGradient g = loss_and_gradient(model, x, y);
  const double h = 1e-6;
  for (Index l = 0; l < model.depth(); ++l) {
    for (Index i = 0; i < model.weight(l).size(); ++i) {
      std::vector<Matrix> plus = model.weights(), minus = model.weights();
      plus[static_cast<std::size_t>(l)].data()[i] += h;
      minus[static_cast<std::size_t>(l)].data()[i] -= h;
      const double fd = (loss_and_gradient(model.with_weights(plus), x, y).loss -
                         loss_and_gradient(model.with_weights(minus), x, y).loss) /
                        (2 * h);
      const double an = g.gradients[static_cast<std::size_t>(l)].data()[i];
      EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(1e-3, std::abs(fd))) << "layer " << l << " entry " << i;
    }
  }
}

}  // namespace

TEST(Gradient, TenParameterProbe) {
  const NetworkModel m = probe_network();
  EXPECT_EQ(count_params(m), 10);
  expect_gradient_matches(m, mat({{0.5, 0.1, 0.9}, {0.2, 0.8, 0.3}, {0.9, 0.4, 0.6}}), {0, 1, 1});
}

TEST(Gradient, ConvAndPool) {
  std::vector<LayerSpec> layers{LayerSpec::conv(1, 2, 3, true), LayerSpec::conv(2, 2, 3, false),
                                LayerSpec::dense(2 * 4, 3, Activation::none)};
  const NetworkModel m = test::randomize(NetworkModel::zeros({1, 4, 4}, layers), 8);
  expect_gradient_matches(m, test::random_matrix(3, 16, 9).cwiseAbs(), {0, 2, 1});
}

TEST(Evaluate, PerfectAndChance) {
  const Dataset d = labelled(Matrix::Identity(3, 3), {0, 1, 2}, 3);
  const NetworkModel perfect({3, 1, 1}, {LayerSpec::dense(3, 3, Activation::none)}, {Matrix::Identity(3, 3)});
  EXPECT_EQ(evaluate(perfect, d).accuracy, 1.0);
  const Dataset bal = balanced(5, 4, 3, 2);
  const EvalResult chance = evaluate(NetworkModel::mlp(3, {2}, 4), bal);
  EXPECT_DOUBLE_EQ(chance.accuracy, 0.25);
  EXPECT_EQ(chance.per_class[0], 1.0);  // ties go to class 0
  EXPECT_EQ(chance.per_class[3], 0.0);
}

TEST(Evaluate, AbsentClassIsNaN) {
  const Dataset d = labelled(Matrix::Identity(2, 3), {0, 1}, 3);
  const EvalResult r = evaluate(NetworkModel::mlp(3, {2}, 3), d);
  EXPECT_TRUE(std::isnan(r.per_class[2]));
  EXPECT_GE(r.accuracy, 0.0);
  EXPECT_LE(r.accuracy, 1.0);
}

TEST(Ensemble, SingleAndDuplicateEqualEvaluate) {
  const Dataset d = balanced(20, 3, 4, 6);
  const NetworkModel m = test::random_mlp(4, {5}, 3, 7);
  const double single = evaluate(m, d).accuracy;
  EXPECT_EQ(prediction_ensemble({m}, d).accuracy, single);
  EXPECT_EQ(prediction_ensemble({m, m}, d).accuracy, single);
  EXPECT_THROW(prediction_ensemble({}, d), DomainError);
}

TEST(Vanilla, Basics) {
  const NetworkModel a = test::random_mlp(4, {5}, 3, 1), b = test::random_mlp(4, {5}, 3, 2);
  for (Index l = 0; l < a.depth(); ++l) {
    EXPECT_TRUE(vanilla_average({a, a}).weight(l).isApprox(a.weight(l), 1e-15));
    EXPECT_EQ(vanilla_average({a, b}, {1, 0}).weight(l), a.weight(l));
    EXPECT_TRUE(vanilla_average({a, b}).weight(l).isApprox(0.5 * (a.weight(l) + b.weight(l))));
  }
  try {
    vanilla_average({a, test::random_mlp(4, {6}, 3, 3)});
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("Vanilla averaging can not be used due to different sizes"), std::string::npos);
  }
  EXPECT_THROW(vanilla_average({a, b}, {1}), ShapeError);
  EXPECT_THROW(vanilla_average({a, b}, {0, 0}), DomainError);
}

TEST(Synthetic, DeterministicBoundedAndBalanced) {
  SyntheticSpec s;
  s.train_size = 500;
  s.test_size = 100;
  const DataSplit d1 = synthetic_dataset(s), d2 = synthetic_dataset(s);
  EXPECT_EQ(d1.train.features, d2.train.features);
  EXPECT_EQ(d1.train.dim(), 196);
  EXPECT_GE(d1.train.features.minCoeff(), 0.0);
  EXPECT_LE(d1.train.features.maxCoeff(), 1.0);
  std::vector<Index> counts(10, 0);
  for (Index y : d1.train.labels) ++counts[static_cast<std::size_t>(y)];
  for (Index c : counts) EXPECT_GT(c, 20);
  EXPECT_NE(d1.train.features.row(0), d1.test.features.row(0));
  s.seed = 1;
  EXPECT_NE(synthetic_dataset(s).train.features, d1.train.features);
}

TEST(Subsample, SeededAndOrdered) {
  const Dataset d = balanced(50, 2, 3, 1);
  const Dataset s = subsample(d, 10, 4);
  EXPECT_EQ(s.size(), 10);
  EXPECT_EQ(subsample(d, 10, 4).features, s.features);
  EXPECT_EQ(subsample(d, 1000, 4).size(), 100);
  EXPECT_EQ(sample_batch(d, 7, 2), sample_batch(d, 7, 2));
  EXPECT_EQ(sample_batch(d, 7, 2).rows(), 7);
  EXPECT_THROW(sample_batch(d, 0, 2), DomainError);
}

TEST(Idx, PlainAndGzipRoundTrip) {
  const auto dir = scratch_dir("idx");
  std::vector<unsigned char> img, lab;
  put_be32(img, 0x803);
  put_be32(img, 2);
  put_be32(img, 2);
  put_be32(img, 3);
  for (int i = 0; i < 12; ++i) img.push_back(static_cast<unsigned char>(i * 20));
  put_be32(lab, 0x801);
  put_be32(lab, 2);
  lab.push_back(7);
  lab.push_back(3);
  write_bytes(dir / "img", img);
  write_bytes(dir / "lab", lab);
  const Dataset d = load_idx((dir / "img").string(), (dir / "lab").string());
  EXPECT_EQ(d.size(), 2);
  EXPECT_EQ(d.shape, (FeatureShape{1, 2, 3}));
  EXPECT_DOUBLE_EQ(d.features(1, 5), 220.0 / 255.0);
  EXPECT_EQ(d.labels, (std::vector<Index>{7, 3}));

  gzFile gz = gzopen((dir / "img.gz").string().c_str(), "wb");
  gzwrite(gz, img.data(), static_cast<unsigned>(img.size()));
  gzclose(gz);
  EXPECT_EQ(load_idx((dir / "img.gz").string(), (dir / "lab").string()).features, d.features);

  std::vector<unsigned char> bad = img;
  bad[3] = 0x01;
  write_bytes(dir / "bad", bad);
  EXPECT_THROW(load_idx((dir / "bad").string(), (dir / "lab").string()), DomainError);
  img.resize(img.size() - 1);
  write_bytes(dir / "short", img);
  EXPECT_THROW(load_idx((dir / "short").string(), (dir / "lab").string()), ShapeError);
  EXPECT_THROW(load_idx((dir / "missing").string(), (dir / "lab").string()), Error);
}

TEST(Csv, LoadsWithScaleAndRejectsRagged) {
  const auto dir = scratch_dir("csv");
  std::ofstream(dir / "ok.csv") << "label,a,b\n1,255,0\n0,51,102\n";
  const Dataset d = load_csv((dir / "ok.csv").string(), 1.0 / 255.0);
  EXPECT_EQ(d.size(), 2);
  EXPECT_EQ(d.class_count, 2);
  EXPECT_DOUBLE_EQ(d.features(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(d.features(1, 1), 0.4);
  std::ofstream(dir / "ragged.csv") << "1,2,3\n0,1\n";
  EXPECT_THROW(load_csv((dir / "ragged.csv").string()), ShapeError);
  std::ofstream(dir / "text.csv") << "1,2\n0,x\n";
  EXPECT_THROW(load_csv((dir / "text.csv").string()), DomainError);
}

TEST(LoadData, SourcesAndErrors) {
  SyntheticSpec s;
  s.train_size = 30;
  s.test_size = 10;
  EXPECT_EQ(load_data("synthetic", s).train.size(), 30);
  const auto dir = scratch_dir("empty");
  EXPECT_THROW(load_data(dir.string(), s), Error);
  EXPECT_THROW(load_data((dir / "nope").string(), s), Error);
  std::ofstream(dir / "train.csv") << "0,0,255\n1,255,0\n";
  std::ofstream(dir / "test.csv") << "1,255,0\n";
  const DataSplit d = load_data(dir.string(), s);
  EXPECT_EQ(d.test.class_count, 2);
  EXPECT_DOUBLE_EQ(d.train.features(0, 1), 1.0);
}
