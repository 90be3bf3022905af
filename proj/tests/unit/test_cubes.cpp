#include "advcube/cube.hpp"
#include "advcube/scenegen.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

namespace advcube {
namespace {

DataCube ramp_cube(int h, int w, int b) {
  DataCube c = DataCube::zeros(h, w, b);
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] = static_cast<float>(i % 97) / 96.0f;
  return c;
}

TEST(BandSubset, SortsAndValidates) {
  BandSubset s({8, 1, 2});
  EXPECT_EQ(s.indices(), (std::vector<int>{1, 2, 8}));
  EXPECT_EQ(s, BandSubset::cloud_sensitive());
  EXPECT_EQ(BandSubset::all().size(), 13);
  EXPECT_THROW(BandSubset({0, 2}), std::invalid_argument);
  EXPECT_THROW(BandSubset({14}), std::invalid_argument);
  EXPECT_THROW(BandSubset({2, 2}), std::invalid_argument);
  EXPECT_THROW(BandSubset(std::vector<int>{}), std::invalid_argument);
}

TEST(BandSubset, ExtractPicksOneBasedBands) {
  const auto cube = ramp_cube(3, 4, 13);
  const auto sub = extract_bands(cube, BandSubset::visible());
  ASSERT_EQ(sub.shape(), (Shape{3, 4, 3}));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      EXPECT_EQ(sub.at(i, j, 0), cube.at(i, j, 1));
      EXPECT_EQ(sub.at(i, j, 2), cube.at(i, j, 3));
    }
  }
}

TEST(Msc1, RoundTripIsBitwise) {
  test::TempDir dir("msc1");
  auto cube = ramp_cube(7, 5, 13);
  cube.data[3] = 0.1f;  // not exactly representable in decimal
  write_cube(cube, dir / "c.msc1");
  const auto back = read_cube(dir / "c.msc1");
  ASSERT_EQ(back.data.shape(), cube.data.shape());
  EXPECT_EQ(std::memcmp(back.data.raw(), cube.data.raw(), cube.data.size() * sizeof(float)), 0);
}

TEST(Msc1, LayoutIsMagicDimsThenLittleEndianFloats) {
  test::TempDir dir("msc1_layout");
  DataCube c = DataCube::zeros(1, 2, 3);
  c.data[4] = 1.0f;
  write_cube(c, dir / "c.msc1");
  const auto bytes = test::slurp(dir / "c.msc1");
  ASSERT_EQ(bytes.size(), 4u + 12u + 6u * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "MSC1");
  auto u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | static_cast<unsigned char>(bytes[off + static_cast<std::size_t>(k)]);
    return v;
  };
  EXPECT_EQ(u32(4), 1u);
  EXPECT_EQ(u32(8), 2u);
  EXPECT_EQ(u32(12), 3u);
  EXPECT_EQ(u32(16 + 4 * 4), 0x3f800000u);
}

TEST(Msc1, RejectsCorruptFiles) {
  test::TempDir dir("msc1_bad");
  std::ofstream(dir / "a.msc1", std::ios::binary) << "MSC2";
  EXPECT_ANY_THROW(read_cube(dir / "a.msc1"));
  write_cube(ramp_cube(2, 2, 13), dir / "b.msc1");
  std::filesystem::resize_file(dir / "b.msc1", 30);
  EXPECT_ANY_THROW(read_cube(dir / "b.msc1"));
  EXPECT_ANY_THROW(read_cube(dir / "missing.msc1"));
}

TEST(Cube, ValidationRejectsOutOfRange) {
  auto c = ramp_cube(2, 2, 13);
  EXPECT_NO_THROW(validate_cube(c));
  c.data[0] = 1.5f;
  EXPECT_ANY_THROW(validate_cube(c));
  c.data[0] = std::nanf("");
  EXPECT_ANY_THROW(validate_cube(c));
}

TEST(Labels, ThresholdIsStrict) {
  EXPECT_EQ(label_by_threshold(0.30, 0.30), Label::NotCloudy);
  EXPECT_EQ(label_by_threshold(0.3000001, 0.30), Label::Cloudy);
  EXPECT_EQ(label_by_threshold(0.70, 0.70), Label::NotCloudy);
  CloudMask m{2, 2, {1, 1, 0, 1}};
  EXPECT_DOUBLE_EQ(m.cloud_fraction(), 0.75);
  EXPECT_EQ(label_by_threshold(m, 0.70), Label::Cloudy);
}

TEST(Scenegen, DeterministicInSeed) {
  ScenegenConfig cfg;
  cfg.size = 32;
  const auto a = synth_scene(17, cfg);
  const auto b = synth_scene(17, cfg);
  const auto c = synth_scene(18, cfg);
  EXPECT_EQ(a.cube.data.data(), b.cube.data.data());
  EXPECT_EQ(a.mask.cells, b.mask.cells);
  EXPECT_NE(a.cube.data.data(), c.cube.data.data());
}

TEST(Scenegen, ThreadCountDoesNotChangeScenes) {
  ScenegenConfig cfg;
  cfg.size = 32;
  cfg.count = 6;
  cfg.density_min = 0.0;
  cfg.density_max = 1.0;
  const auto a = synth_scenes(cfg, 1);
  const auto b = synth_scenes(cfg, 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].cube.data.data(), b[i].cube.data.data());
}

TEST(Scenegen, CubesAreValidWithConsistentMasks) {
  ScenegenConfig cfg;
  cfg.size = 48;
  cfg.density_min = 0.0;
  cfg.density_max = 1.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = synth_scene(seed, cfg);
    EXPECT_NO_THROW(validate_cube(s.cube));
    EXPECT_EQ(s.cube.bands(), 13);
    EXPECT_EQ(s.mask.height, 48);
    EXPECT_EQ(s.mask.cells.size(), 48u * 48u);
    for (auto v : s.mask.cells) EXPECT_LE(v, 1);
  }
}

TEST(Scenegen, CoverageGrowsWithDensity) {
  ScenegenConfig cfg;
  cfg.size = 64;
  double prev = -1.0;
  for (double d : {0.0, 0.3, 0.6, 0.9}) {
    cfg.density_min = cfg.density_max = d;
    double mean = 0.0;
    for (std::uint64_t seed = 0; seed < 12; ++seed) mean += synth_scene(seed, cfg).mask.cloud_fraction() / 12.0;
    EXPECT_GT(mean, prev);
    prev = mean;
  }
}

TEST(Scenegen, CloudIsBrighterThanTerrainInDetectorBands) {
  const auto cloud = cloud_profile();
  const auto bands = BandSubset::cloud_sensitive();
  for (auto kind : {TerrainKind::Hills, TerrainKind::Desert, TerrainKind::Mixed}) {
    const auto t = terrain_profile(kind);
    for (int b : bands.indices()) EXPECT_GT(cloud(b - 1), t(b - 1));
  }
}

TEST(Scenegen, ConfigValidation) {
  ScenegenConfig cfg;
  cfg.density_min = 0.8;
  cfg.density_max = 0.2;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = ScenegenConfig{};
  cfg.size = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Dataset, LabelsMatchMasksAndThreshold) {
  ScenegenConfig cfg;
  cfg.size = 32;
  cfg.count = 16;
  cfg.density_min = 0.0;
  cfg.density_max = 1.0;
  const auto data = build_labeled_dataset(cfg, 0.30, Split::Train, 1);
  ASSERT_EQ(data.size(), 16u);
  const auto scenes = synth_scenes(cfg, 1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_DOUBLE_EQ(data.items[i].cloud_fraction, scenes[i].mask.cloud_fraction());
    EXPECT_EQ(data.items[i].label, label_by_threshold(scenes[i].mask, 0.30));
  }
  const auto th70 = data.relabeled(0.70);
  EXPECT_DOUBLE_EQ(th70.threshold, 0.70);
  EXPECT_LE(th70.count(Label::Cloudy), data.count(Label::Cloudy));
  for (const auto& item : th70.items) EXPECT_EQ(item.label, label_by_threshold(item.cloud_fraction, 0.70));
}

TEST(Dataset, DirectoryRoundTrip) {
  test::TempDir dir("dataset");
  ScenegenConfig cfg;
  cfg.size = 16;
  cfg.count = 5;
  cfg.density_min = 0.0;
  cfg.density_max = 1.0;
  const auto data = build_labeled_dataset(cfg, 0.30, Split::Val, 1);
  write_dataset(data, dir.path());
  const auto back = read_dataset(dir.path());
  EXPECT_EQ(back.split, Split::Val);
  EXPECT_DOUBLE_EQ(back.threshold, 0.30);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back.items[i].label, data.items[i].label);
    EXPECT_EQ(back.items[i].seed, data.items[i].seed);
    EXPECT_EQ(back.items[i].terrain, data.items[i].terrain);
    EXPECT_EQ(back.items[i].cloud_fraction, data.items[i].cloud_fraction);
    EXPECT_EQ(back.items[i].cube.data.data(), data.items[i].cube.data.data());
  }
}

TEST(Dataset, RejectsInconsistentLabels) {
  test::TempDir dir("dataset_bad");
  ScenegenConfig cfg;
  cfg.size = 16;
  cfg.count = 2;
  write_dataset(build_labeled_dataset(cfg, 0.30, Split::Train, 1), dir.path());
  auto text = test::slurp(dir / "labels.csv");
  const bool was_cloudy = text.find(",cloudy\n") != std::string::npos;
  const auto pos = text.find(was_cloudy ? ",cloudy\n" : ",not_cloudy\n");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, was_cloudy ? 8 : 12, was_cloudy ? ",not_cloudy\n" : ",cloudy\n");
  std::ofstream(dir / "labels.csv", std::ios::binary) << text;
  EXPECT_ANY_THROW(read_dataset(dir.path()));
}

}  // namespace
}  // namespace advcube
