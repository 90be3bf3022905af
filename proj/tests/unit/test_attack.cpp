#include "advcube/attack.hpp"
#include "advcube/scenegen.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

namespace advcube {
namespace {

SpectralIndex small_index(int q = 6) {
  return build_spectral_index(synth_material_library(q, 21), am15_solar_fixture(), sentinel2a_bands());
}

ArchConfig host_arch(int size) {
  ArchConfig a;
  a.input_height = a.input_width = size;
  a.conv_specs = {{4, 3, 1, 1, true}, {8, 3, 1, 1, true}};
  a.dense_specs = {16, 1};
  return a;
}

std::vector<DataCube> hosts(int size, int count, std::uint64_t seed) {
  ScenegenConfig cfg;
  cfg.size = size;
  cfg.count = count;
  cfg.seed = seed;
  cfg.density_min = cfg.density_max = 0.1;
  std::vector<DataCube> out;
  for (auto& s : synth_scenes(cfg, 1)) out.push_back(std::move(s.cube));
  return out;
}

TEST(LossTerms, ParseAndPrint) {
  for (const char* s : {"psi", "psi+nps", "psi+cloak", "psi+nps+cloak"}) EXPECT_EQ(LossTerms::parse(s).to_string(), s);
  EXPECT_TRUE(LossTerms::parse("psi+nps").nps);
  EXPECT_FALSE(LossTerms::parse("psi+nps").cloak);
  EXPECT_THROW(LossTerms::parse("nps"), std::invalid_argument);
  EXPECT_THROW(LossTerms::parse("psi+psi"), std::invalid_argument);
}

TEST(LossTotal, WeightedSum) {
  EXPECT_EQ(loss_total(1, 2, 10, 5, 0.05).total, 11.5);
  EXPECT_THROW(loss_total(1, 2, 3, -1, 0), std::invalid_argument);
}

TEST(LossTotal, EffectiveWeightsFollowTerms) {
  AttackConfig cfg;
  EXPECT_EQ(cfg.effective_alpha(), 0.0);
  EXPECT_EQ(cfg.effective_beta(), 0.0);
  cfg.terms = LossTerms::parse("psi+nps+cloak");
  EXPECT_EQ(cfg.effective_alpha(), cfg.alpha);
  EXPECT_EQ(cfg.effective_beta(), cfg.beta);
}

TEST(LossBias, SumOfNegativeLogConfidence) {
  EXPECT_NEAR(loss_bias({0.5, 0.25}), std::log(2.0) + std::log(4.0), 1e-12);
  EXPECT_NEAR(loss_bias({0.0}), -std::log(kConfidenceEpsilon), 1e-9);
}

TEST(Hull, SoftmaxWeightsOnSimplex) {
  const auto index = small_index(9);
  auto p = init_params(20, 25, 9, 3, 5.0);
  const auto w = mixing_weights(p);
  for (int r = 0; r < 500; ++r) {
    double s = 0.0;
    for (int q = 0; q < 9; ++q) {
      const double v = w[static_cast<std::size_t>(r * 9 + q)];
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Hull, RealizedPixelsAreConvexCombinations) {
  const auto index = small_index(7);
  const auto p = init_params(5, 4, 7, 8, 3.0);
  const auto cube = realize_cube(p, index);
  // Independent softmax for each pixel, then C w.
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 4; ++j) {
      double mx = -1e300;
      for (int q = 0; q < 7; ++q) mx = std::max(mx, static_cast<double>(p.logits.at(i, j, q)));
      Eigen::VectorXd w(7);
      for (int q = 0; q < 7; ++q) w(q) = std::exp(p.logits.at(i, j, q) - mx);
      w /= w.sum();
      const Eigen::VectorXd pixel = index.columns * w;
      for (int b = 0; b < kBandCount; ++b) EXPECT_NEAR(cube.at(i, j, b), pixel(b), 1e-6);
    }
  }
}

TEST(Hull, ZeroLogitsGiveMeanColumn) {
  const auto index = small_index(5);
  const auto cube = realize_cube(init_params(2, 2, 5, 0, 0.0), index);
  const Eigen::VectorXd mean = index.columns.rowwise().mean();
  for (int b = 0; b < kBandCount; ++b) EXPECT_NEAR(cube.at(1, 1, b), mean(b), 1e-6);
}

TEST(Free, SigmoidOfLogits) {
  const auto p = init_params(2, 3, 5, 4, 2.0, Parametrization::Free);
  EXPECT_EQ(p.depth(), kBandCount);
  const auto cube = realize_cube(p, small_index(5));
  for (std::size_t i = 0; i < cube.size(); ++i) EXPECT_NEAR(cube[i], 1.0 / (1.0 + std::exp(-p.logits[i])), 1e-6);
  EXPECT_THROW(mixing_weights(p), std::invalid_argument);
}

TEST(Hull, RejectsIndexMismatch) {
  EXPECT_THROW(realize_cube(init_params(2, 2, 4, 0), small_index(5)), std::invalid_argument);
}

TEST(Nps, ZeroWhenPixelsAreIndexColumns) {
  const auto index = small_index(6);
  TensorF cube({2, 3, kBandCount});
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      for (int b = 0; b < kBandCount; ++b) cube.at(i, j, b) = static_cast<float>(index.columns(b, (i * 3 + j) % 6));
    }
  }
  EXPECT_NEAR(loss_nps(cube, index), 0.0, 1e-6);
}

TEST(Nps, MeanNearestDistance) {
  SpectralIndex index;
  index.columns = IndexMatrix::Zero(kBandCount, 2);
  index.columns.col(1).setConstant(1.0);
  index.names = {"black", "white"};
  TensorF cube({1, 2, kBandCount});
  for (int b = 0; b < kBandCount; ++b) {
    cube.at(0, 0, b) = 0.1f;
    cube.at(0, 1, b) = 0.7f;
  }
  const double expected = 0.5 * (0.1 + 0.3) * std::sqrt(13.0);
  EXPECT_NEAR(loss_nps(cube, index), expected, 1e-6);
}

TEST(Cloak, VisibleBandDistanceToCrop) {
  DataCube roa = DataCube::zeros(6, 6);
  TensorF cube({2, 2, kBandCount});
  for (std::size_t i = 0; i < cube.size(); ++i) cube[i] = 0.5f;
  EXPECT_NEAR(loss_cloak(cube, roa, 1, 2), std::sqrt(4 * 3 * 0.25), 1e-6);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      for (int b = 0; b < kBandCount; ++b) roa.at(3 + i, 4 + j, b) = cube.at(i, j, b);
    }
  }
  EXPECT_NEAR(loss_cloak(cube, roa, 3, 4), 0.0, 1e-12);
  EXPECT_THROW(loss_cloak(cube, roa, 5, 5), std::out_of_range);
}

TEST(Embed, IdentityCopiesPatchAndLeavesRest) {
  const auto host = hosts(12, 1, 3)[0];
  TensorF patch({3, 2, kBandCount});
  for (std::size_t i = 0; i < patch.size(); ++i) patch[i] = static_cast<float>(i % 10) / 10.0f;
  Transform t;
  t.row = 4;
  t.col = 7;
  const auto out = embed(host, patch, t);
  for (int r = 0; r < 12; ++r) {
    for (int c = 0; c < 12; ++c) {
      const bool inside = r >= 4 && r < 7 && c >= 7 && c < 9;
      for (int b = 0; b < kBandCount; ++b) {
        EXPECT_EQ(out.at(r, c, b), inside ? patch.at(r - 4, c - 7, b) : host.at(r, c, b));
      }
    }
  }
}

TEST(Embed, QuarterTurnIsCounterclockwise) {
  TensorF patch({2, 3, kBandCount});
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) patch.at(i, j, 0) = static_cast<float>(i * 3 + j) / 10.0f;
  }
  Transform t;
  t.rotation = 1;
  EXPECT_EQ(rotated_size(2, 3, 1), std::make_pair(3, 2));
  const auto out = embed(DataCube::zeros(4, 4), patch, t);
  // Counterclockwise: the last column of the patch becomes the first row.
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) EXPECT_EQ(out.at(i, j, 0), patch.at(j, 2 - i, 0));
  }
  t.rotation = 2;
  const auto half = embed(DataCube::zeros(4, 4), patch, t);
  EXPECT_EQ(half.at(0, 0, 0), patch.at(1, 2, 0));
}

TEST(Embed, ScaleNoiseClampAndCorruption) {
  DataCube host = DataCube::zeros(3, 3);
  for (std::size_t i = 0; i < host.data.size(); ++i) host.data[i] = 0.25f;
  TensorF patch({1, 1, kBandCount});
  for (std::size_t i = 0; i < patch.size(); ++i) patch[i] = 0.8f;
  Transform t;
  t.row = t.col = 1;
  t.scale = 1.1;
  t.noise = TensorF({1, 1, kBandCount});
  t.noise[0] = 0.05f;
  t.noise[1] = -0.3f;
  t.corrupted[5] = true;
  const auto out = embed(host, patch, t);
  EXPECT_NEAR(out.at(1, 1, 0), 0.93, 1e-6);
  EXPECT_NEAR(out.at(1, 1, 1), 0.58, 1e-6);
  EXPECT_NEAR(out.at(1, 1, 2), 0.88, 1e-6);
  EXPECT_EQ(out.at(1, 1, 5), 0.25f);
  t.scale = 1.5;
  EXPECT_EQ(embed(host, patch, t).at(1, 1, 2), 1.0f);
}

TEST(Embed, OutOfBoundsThrows) {
  Transform t;
  t.row = 3;
  EXPECT_THROW(embed(DataCube::zeros(4, 4), TensorF({2, 2, kBandCount}), t), std::out_of_range);
}

TEST(Transforms, RespectConfigRanges) {
  AttackConfig cfg;
  cfg.layout = {{5, 7}};
  Rng rng(4);
  std::set<int> rotations;
  for (int k = 0; k < 300; ++k) {
    const auto t = sample_transform(rng, cfg, 32, 32, cfg.layout)[0];
    rotations.insert(t.rotation);
    const auto [h, w] = rotated_size(5, 7, t.rotation);
    EXPECT_GE(t.row, 0);
    EXPECT_LE(t.row + h, 32);
    EXPECT_LE(t.col + w, 32);
    EXPECT_GE(t.scale, 1.0 - cfg.scale_delta);
    EXPECT_LE(t.scale, 1.0 + cfg.scale_delta);
    for (std::size_t i = 0; i < t.noise.size(); ++i) EXPECT_LE(std::abs(t.noise[i]), cfg.noise_clip + 1e-7);
  }
  EXPECT_EQ(rotations.size(), 4u);
  cfg.rotate = false;
  for (int k = 0; k < 20; ++k) EXPECT_EQ(sample_transform(rng, cfg, 32, 32, cfg.layout)[0].rotation, 0);
}

TEST(Transforms, MultiCubePlacementsDoNotOverlap) {
  for (auto proximity : {Proximity::Low, Proximity::High}) {
    AttackConfig cfg;
    cfg.layout = {{6, 6}, {6, 6}, {6, 6}, {6, 6}};
    cfg.proximity = proximity;
    Rng rng(9);
    for (int k = 0; k < 100; ++k) {
      const auto ts = sample_transform(rng, cfg, 48, 48, cfg.layout);
      ASSERT_EQ(ts.size(), 4u);
      for (std::size_t a = 0; a < 4; ++a) {
        for (std::size_t b = a + 1; b < 4; ++b) {
          const bool apart = ts[a].row + 6 <= ts[b].row || ts[b].row + 6 <= ts[a].row ||
                             ts[a].col + 6 <= ts[b].col || ts[b].col + 6 <= ts[a].col;
          EXPECT_TRUE(apart);
        }
      }
      if (proximity == Proximity::High) {
        int r0 = 1 << 20, r1 = -1, c0 = 1 << 20, c1 = -1;
        for (const auto& t : ts) {
          r0 = std::min(r0, t.row);
          r1 = std::max(r1, t.row);
          c0 = std::min(c0, t.col);
          c1 = std::max(c1, t.col);
        }
        EXPECT_LE(r1 - r0, 15);
        EXPECT_LE(c1 - c0, 15);
      }
    }
  }
}

TEST(Transforms, ImpossibleLayoutThrows) {
  AttackConfig cfg;
  cfg.layout = {{20, 20}};
  Rng rng(1);
  EXPECT_THROW(sample_transform(rng, cfg, 16, 16, cfg.layout), std::invalid_argument);
}

TEST(GraphEmbedding, MatchesDirectEmbedding) {
  const auto host = hosts(10, 1, 5)[0];
  TensorF patch({3, 4, kBandCount});
  for (std::size_t i = 0; i < patch.size(); ++i) patch[i] = static_cast<float>((i * 7) % 11) / 11.0f;
  Transform t;
  t.rotation = 3;
  t.row = 2;
  t.col = 5;
  t.scale = 0.9;
  const auto bands = BandSubset::cloud_sensitive();
  Graph<float> g;
  auto h = g.constant(extract_bands(host, bands));
  auto p = g.constant(patch);
  g.mark_output("out", add_embedding(g, h, {p}, {t}, bands));
  const auto got = evaluate(g, {}).at("out");
  const auto want = extract_bands(embed(host, patch, t), bands);
  ASSERT_EQ(got.shape(), want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_FLOAT_EQ(got[i], want[i]);
}

TEST(GraphEmbedding, SeveralPatchesMatchDirectEmbedding) {
  const auto host = hosts(24, 1, 6)[0];
  std::vector<TensorF> patches;
  std::vector<Transform> transforms;
  for (int k = 0; k < 4; ++k) {
    TensorF patch({3, 3, kBandCount});
    for (std::size_t i = 0; i < patch.size(); ++i) patch[i] = static_cast<float>((i * 5 + k) % 13) / 13.0f;
    patches.push_back(patch);
    Transform t;
    t.rotation = k;
    t.row = 2 + 5 * k;
    t.col = 18 - 4 * k;
    transforms.push_back(t);
  }
  const auto bands = BandSubset::cloud_sensitive();
  Graph<float> g;
  auto h = g.constant(extract_bands(host, bands));
  std::vector<NodeId> nodes;
  for (const auto& p : patches) nodes.push_back(g.constant(p));
  g.mark_output("out", add_embedding(g, h, nodes, transforms, bands));
  const auto got = evaluate(g, {}).at("out");
  const auto want = extract_bands(embed(host, patches, transforms), bands);
  ASSERT_EQ(got.shape(), want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_FLOAT_EQ(got[i], want[i]);
}

// The objective with everything random held fixed, in double precision.
struct ObjectiveFixture {
  SpectralIndex index = small_index(5);
  DetectorModel detector = build_detector(host_arch(16), 13);
  std::vector<DataCube> batch = hosts(16, 2, 40);
  DataCube roa = hosts(16, 1, 77)[0];
  std::vector<CubeParams> params = {init_params(4, 4, 5, 2, 1.0)};
  std::vector<std::vector<Transform>> transforms;
  std::vector<std::pair<int, int>> crops = {{3, 6}};

  ObjectiveFixture() {
    for (int k = 0; k < 2; ++k) {
      Transform t;
      t.rotation = k + 1;
      t.row = 2 + 5 * k;
      t.col = 9 - 4 * k;
      t.scale = 0.95;
      t.noise = TensorF::constant({4, 4, kBandCount}, 0.01f);
      transforms.push_back({t});
    }
  }
};

TEST(AttackObjective, ValueMatchesComponentLosses) {
  ObjectiveFixture f;
  const double alpha = 5.0, beta = 0.05;
  auto obj = build_attack_objective<double>(f.params, f.batch, f.transforms, f.roa, f.crops, f.detector, f.index,
                                            alpha, beta);
  const double total = evaluate(obj.graph, obj.bindings).at("total").item();
  const auto cube = realize_cube(f.params[0], f.index);
  std::vector<DataCube> embedded;
  for (std::size_t k = 0; k < f.batch.size(); ++k) embedded.push_back(embed(f.batch[k], cube, f.transforms[k][0]));
  const double psi = loss_bias(f.detector, embedded);
  const double phi = loss_nps(cube, f.index);
  const double omega = loss_cloak(cube, f.roa, 3, 6);
  EXPECT_NEAR(total, loss_total(psi, phi, omega, alpha, beta).total, 1e-4 * std::max(1.0, std::abs(total)));
}

TEST(AttackObjective, GradientMatchesCentralDifferences) {
  ObjectiveFixture f;
  auto obj = build_attack_objective<double>(f.params, f.batch, f.transforms, f.roa, f.crops, f.detector, f.index,
                                            5.0, 0.05);
  EXPECT_LT(test::worst_gradient_error(obj.graph, obj.bindings, {"logits0"}, "total", 1e-6), 1e-2);
}

TEST(AttackObjective, PsiOnlyGradientMatchesCentralDifferences) {
  ObjectiveFixture f;
  auto obj = build_attack_objective<double>(f.params, f.batch, f.transforms, f.roa, f.crops, f.detector, f.index,
                                            0.0, 0.0);
  EXPECT_LT(test::worst_gradient_error(obj.graph, obj.bindings, {"logits0"}, "total", 1e-6), 1e-3);
}

class Optimize : public ::testing::Test {
 protected:
  SpectralIndex index = small_index(5);
  DetectorModel detector = build_detector(host_arch(16), 13);
  std::vector<DataCube> train = hosts(16, 6, 50);
  DataCube roa = hosts(16, 1, 51)[0];

  AttackConfig config(int steps) const {
    AttackConfig cfg;
    cfg.steps = steps;
    cfg.batch_size = 3;
    cfg.layout = {{4, 4}};
    cfg.best_window = 2;
    cfg.lr = 0.1;
    cfg.terms = LossTerms::parse("psi+nps+cloak");
    return cfg;
  }
};

TEST_F(Optimize, LeavesDetectorUntouchedAndTracesEveryStep) {
  const auto before = weights_hash(detector);
  const auto cfg = config(6);
  const auto result = optimize_cube({init_params(4, 4, 5, 1)}, train, roa, detector, index, cfg);
  EXPECT_EQ(weights_hash(detector), before);
  ASSERT_EQ(result.trace.size(), 6u);
  for (int s = 0; s < 6; ++s) {
    const auto& row = result.trace[static_cast<std::size_t>(s)];
    EXPECT_EQ(row.step, s);
    EXPECT_NEAR(row.loss.total, row.loss.psi + cfg.alpha * row.loss.phi + cfg.beta * row.loss.omega,
                1e-6 * std::max(1.0, row.loss.total));
  }
  EXPECT_GE(result.best_step, 0);
  EXPECT_LT(result.best_step, 6);
  EXPECT_EQ(result.best[0].logits.shape(), (Shape{4, 4, 5}));
}

TEST_F(Optimize, DeterministicAcrossThreadCounts) {
  auto cfg = config(4);
  const auto a = optimize_cube({init_params(4, 4, 5, 1)}, train, roa, detector, index, cfg);
  cfg.threads = 3;
  const auto b = optimize_cube({init_params(4, 4, 5, 1)}, train, roa, detector, index, cfg);
  EXPECT_EQ(a.last[0].logits.data(), b.last[0].logits.data());
  EXPECT_EQ(a.best_step, b.best_step);
}

TEST_F(Optimize, ZeroStepsReturnsInitial) {
  const auto init = init_params(4, 4, 5, 1);
  const auto r = optimize_cube({init}, train, roa, detector, index, config(0));
  EXPECT_EQ(r.best_step, -1);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_EQ(r.best[0].logits.data(), init.logits.data());
}

TEST_F(Optimize, PsiDecreasesOnAverage) {
  auto cfg = config(40);
  cfg.terms = LossTerms{};
  cfg.batch_size = 6;
  cfg.rotate = false;
  cfg.scale_delta = 0.0;
  cfg.noise_sigma = 0.0;
  cfg.corruption_prob = 0.0;
  const auto r = optimize_cube({init_params(4, 4, 5, 1)}, train, roa, detector, index, cfg);
  double first = 0, last = 0;
  for (int s = 0; s < 5; ++s) {
    first += r.trace[static_cast<std::size_t>(s)].loss.psi;
    last += r.trace[r.trace.size() - 1 - static_cast<std::size_t>(s)].loss.psi;
  }
  EXPECT_LT(last, first);
}

TEST(AttackConfig, Validation) {
  AttackConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.scale_delta = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AttackConfig{};
  cfg.layout.clear();
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AttackConfig{};
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace advcube
