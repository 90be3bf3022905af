#include "advcube/scenegen.hpp"

#include "advcube/parallel.hpp"
#include "advcube/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace advcube {

namespace {

using Field = Eigen::MatrixXf;

BandVector bands(std::initializer_list<double> v) {
  BandVector b;
  std::copy(v.begin(), v.end(), b.data());
  return b;
}

// Band order: B1 B2 B3 B4 B5 B6 B7 B8 B8A B9 B10 B11 B12.
const BandVector kVegetation = bands({0.10, 0.08, 0.07, 0.04, 0.09, 0.22, 0.28, 0.31, 0.32, 0.11, 0.004, 0.16, 0.07});
const BandVector kSoil = bands({0.12, 0.13, 0.17, 0.22, 0.25, 0.27, 0.29, 0.30, 0.31, 0.12, 0.006, 0.35, 0.28});
const BandVector kSand = bands({0.18, 0.21, 0.28, 0.36, 0.39, 0.41, 0.43, 0.44, 0.45, 0.17, 0.008, 0.52, 0.45});
const BandVector kRock = bands({0.13, 0.14, 0.18, 0.23, 0.25, 0.26, 0.27, 0.28, 0.29, 0.11, 0.006, 0.33, 0.30});
const BandVector kCloud = bands({0.72, 0.70, 0.68, 0.67, 0.67, 0.68, 0.68, 0.69, 0.69, 0.42, 0.38, 0.48, 0.34});

constexpr float kTerrainGainMax = 1.15f;

float smoothstep(float e0, float e1, float x) {
  const float t = std::clamp((x - e0) / (e1 - e0), 0.0f, 1.0f);
  return t * t * (3.0f - 2.0f * t);
}

/// Value noise summed over octaves, normalised to [0,1].
Field fractal_noise(int size, int octaves, double base_cells, Rng rng) {
  Field out = Field::Zero(size, size);
  double amplitude = 1.0, total = 0.0, cells = base_cells;
  for (int o = 0; o < octaves; ++o) {
    const int n = static_cast<int>(std::ceil(cells)) + 2;
    Field lattice(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) lattice(i, j) = static_cast<float>(rng.uniform());
    const double step = cells / size;
    for (int y = 0; y < size; ++y) {
      const double fy = y * step;
      const int y0 = static_cast<int>(fy);
      const float ty = smoothstep(0.0f, 1.0f, static_cast<float>(fy - y0));
      for (int x = 0; x < size; ++x) {
        const double fx = x * step;
        const int x0 = static_cast<int>(fx);
        const float tx = smoothstep(0.0f, 1.0f, static_cast<float>(fx - x0));
        const float top = lattice(y0, x0) + tx * (lattice(y0, x0 + 1) - lattice(y0, x0));
        const float bot = lattice(y0 + 1, x0) + tx * (lattice(y0 + 1, x0 + 1) - lattice(y0 + 1, x0));
        out(y, x) += static_cast<float>(amplitude) * (top + ty * (bot - top));
      }
    }
    total += amplitude;
    amplitude *= 0.5;
    cells *= 2.0;
  }
  out /= static_cast<float>(total);
  return out;
}

Eigen::VectorXf terrain_pixel(TerrainKind kind, float n1, float n2, float n3) {
  BandVector v;
  switch (kind) {
    case TerrainKind::Hills: {
      const double t = std::pow(n1, 1.5);
      v = (1.0 - t) * kVegetation + t * kSoil;
      v *= 0.8 + 0.4 * n2;
      break;
    }
    case TerrainKind::Desert: {
      v = (1.0 - n1) * kSand + n1 * kRock;
      v *= 0.85 + 0.3 * n2;
      break;
    }
    case TerrainKind::Mixed: {
      const double w = smoothstep(0.4f, 0.6f, n3);
      v = (1.0 - w) * terrain_pixel(TerrainKind::Hills, n1, n2, 0).cast<double>() +
          w * terrain_pixel(TerrainKind::Desert, n1, n2, 0).cast<double>();
      break;
    }
  }
  return v.cast<float>();
}

}  // namespace

void ScenegenConfig::validate() const {
  if (size <= 0) throw std::invalid_argument("scene size must be positive");
  if (!(density_min >= 0.0 && density_max <= 1.0 && density_min <= density_max)) {
    throw std::invalid_argument("cloud_density must lie in [0,1]");
  }
  if (count < 0) throw std::invalid_argument("scene count must be >= 0");
  if (!(cloud_margin >= 0.0)) throw std::invalid_argument("cloud_margin must be >= 0");
}

BandVector terrain_profile(TerrainKind kind) {
  switch (kind) {
    case TerrainKind::Hills: return 0.5 * (kVegetation + kSoil);
    case TerrainKind::Desert: return 0.5 * (kSand + kRock);
    case TerrainKind::Mixed: return 0.25 * (kVegetation + kSoil + kSand + kRock);
  }
  return kSoil;
}

BandVector cloud_profile() { return kCloud; }

Scene synth_scene(std::uint64_t seed, const ScenegenConfig& params) {
  params.validate();
  const int size = params.size;
  Rng rng(seed);
  Scene scene;
  scene.seed = seed;
  scene.density = params.density_min == params.density_max
                      ? params.density_min
                      : rng.uniform(params.density_min, params.density_max);
  scene.terrain = params.terrain ? *params.terrain : static_cast<TerrainKind>(rng.uniform_int(0, 2));

  const double cells = std::max(2.0, size / 32.0);
  const Field n1 = fractal_noise(size, 4, cells, rng.fork(1));
  const Field n2 = fractal_noise(size, 5, 2.0 * cells, rng.fork(2));
  const Field n3 = fractal_noise(size, 2, 0.5 * cells + 1.0, rng.fork(3));
  const Field thickness = fractal_noise(size, 3, cells, rng.fork(4));
  const Field edge = fractal_noise(size, 4, 2.0 * cells, rng.fork(5));

  // Cloud alpha: union of soft ellipses, blob count from a Boolean-model
  // coverage estimate over a domain padded so edge blobs are not lost.
  Field alpha = Field::Zero(size, size);
  if (scene.density > 0.0) {
    Rng blob_rng = rng.fork(6);
    const double margin = 0.3 * size;
    const double extent = size + 2.0 * margin;
    const double mean_axis = 0.14 * size;
    const double mean_area = std::numbers::pi * mean_axis * mean_axis;
    const double coverage = std::min(scene.density, 0.999);
    const double expected = -std::log1p(-coverage) * extent * extent / mean_area;
    const int blobs = std::poisson_distribution<int>(expected)(blob_rng.engine());
    Field keep = Field::Ones(size, size);  // product of (1 - alpha_i)
    for (int k = 0; k < blobs; ++k) {
      const double cy = blob_rng.uniform(-margin, size + margin);
      const double cx = blob_rng.uniform(-margin, size + margin);
      const double a = blob_rng.uniform(0.06, 0.22) * size;
      const double b = blob_rng.uniform(0.06, 0.22) * size;
      const double theta = blob_rng.uniform(0.0, std::numbers::pi);
      const double ct = std::cos(theta), st = std::sin(theta);
      const double reach = 1.3 * std::max(a, b);
      const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
      const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + reach)));
      const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
      const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + reach)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double dy = y - cy, dx = x - cx;
          const double u = (dx * ct + dy * st) / a;
          const double v = (-dx * st + dy * ct) / b;
          const double r = std::sqrt(u * u + v * v) * (1.0 + 0.2 * (edge(y, x) - 0.5));
          const float ai = static_cast<float>(std::clamp((1.25 - r) / 0.5, 0.0, 1.0));
          keep(y, x) *= 1.0f - ai;
        }
      }
    }
    alpha = Field::Ones(size, size) - keep;
  }

  BandVector brightest = (kTerrainGainMax * kSand).cwiseMax(kTerrainGainMax * kSoil);
  BandVector cloud = kCloud;
  const auto sensitive = BandSubset::cloud_sensitive();
  for (int b : sensitive.indices()) {
    cloud[b - 1] = std::max(cloud[b - 1], brightest[b - 1] + params.cloud_margin);
  }

  scene.cube = DataCube::zeros(size, size);
  scene.mask.height = size;
  scene.mask.width = size;
  scene.mask.cells.assign(static_cast<std::size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Eigen::VectorXf ground = terrain_pixel(scene.terrain, n1(y, x), n2(y, x), n3(y, x));
      const float a = alpha(y, x);
      const float thick = 0.85f + 0.3f * thickness(y, x);
      for (int b = 0; b < kBandCount; ++b) {
        const float c = std::min(1.0f, static_cast<float>(cloud[b]) * thick);
        scene.cube.at(y, x, b) = std::clamp((1.0f - a) * ground[b] + a * c, 0.0f, 1.0f);
      }
      scene.mask.cells[static_cast<std::size_t>(y) * size + x] = a > 0.5f ? 1 : 0;
    }
  }
  return scene;
}

std::vector<Scene> synth_scenes(const ScenegenConfig& params, int threads) {
  params.validate();
  std::vector<Scene> scenes(static_cast<std::size_t>(params.count));
  parallel_for(scenes.size(), threads,
               [&](std::size_t i) { scenes[i] = synth_scene(params.seed + i, params); });
  return scenes;
}

LabeledDataset build_labeled_dataset(const ScenegenConfig& params, double threshold, Split split, int threads) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0,1)");
  auto scenes = synth_scenes(params, threads);
  LabeledDataset ds;
  ds.threshold = threshold;
  ds.split = split;
  ds.items.reserve(scenes.size());
  for (auto& s : scenes) {
    LabeledItem item;
    item.cloud_fraction = s.mask.cloud_fraction();
    item.label = label_by_threshold(item.cloud_fraction, threshold);
    item.terrain = s.terrain;
    item.seed = s.seed;
    item.cube = std::move(s.cube);
    ds.items.push_back(std::move(item));
  }
  return ds;
}

std::vector<Spectrum> synth_material_library(int count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("material count must be >= 1");
  std::vector<double> grid;
  for (double nm = 350.0; nm <= 2500.0; nm += 5.0) grid.push_back(nm);
  auto gauss = [](double x, double mu, double sigma) { return std::exp(-0.5 * std::pow((x - mu) / sigma, 2)); };
  auto logistic = [](double x, double mu, double width) { return 1.0 / (1.0 + std::exp(-(x - mu) / width)); };

  std::vector<Spectrum> library;
  Rng root(seed);
  for (int q = 0; q < count; ++q) {
    Rng rng = root.fork(static_cast<std::uint64_t>(q));
    Spectrum s;
    s.name = "paint_" + std::string(q < 9 ? "0" : "") + std::to_string(q + 1);
    s.wavelengths_nm = grid;
    const int family = q % 4;
    const double binder_depth = rng.uniform(0.05, 0.15);
    const double swir_drop = rng.uniform(0.1, 0.35);
    if (family == 0) {
      // Neutral whites, greys and blacks.
      const double level = rng.uniform(0.04, 0.92);
      for (double nm : grid) {
        double v = level * (1.0 - swir_drop * logistic(nm, 1500.0, 150.0));
        v *= 1.0 - binder_depth * (gauss(nm, 1730.0, 30.0) + gauss(nm, 2310.0, 40.0));
        s.values.push_back(v);
      }
    } else {
      const double dark = rng.uniform(0.03, 0.15);
      const double nir = rng.uniform(0.25, 0.85);
      const double nir_edge = rng.uniform(680.0, 760.0);
      const bool long_pass = family == 2;
      const double hue = rng.uniform(420.0, 640.0);
      const double width = rng.uniform(30.0, 80.0);
      const double height = rng.uniform(0.25, 0.8);
      for (double nm : grid) {
        double vis = long_pass ? dark + height * logistic(nm, hue, 15.0) : dark + height * gauss(nm, hue, width);
        const double w = logistic(nm, nir_edge, 20.0);
        double v = (1.0 - w) * vis + w * std::max(nir, long_pass ? vis : 0.0);
        v *= 1.0 - swir_drop * logistic(nm, 1500.0, 150.0);
        v *= 1.0 - binder_depth * (gauss(nm, 1730.0, 30.0) + gauss(nm, 2310.0, 40.0));
        s.values.push_back(v);
      }
    }
    for (auto& v : s.values) v = std::clamp(v, 0.01, 0.95);
    library.push_back(std::move(s));
  }
  return library;
}

Spectrum am15_solar_fixture() {
  static const std::vector<std::pair<double, double>> samples = {
      {300, 0.00},  {320, 0.20},  {350, 0.40},  {380, 0.70},  {400, 1.10},  {450, 1.50},  {500, 1.55},
      {550, 1.53},  {600, 1.50},  {650, 1.42},  {700, 1.33},  {720, 1.05},  {740, 1.28},  {760, 0.60},
      {770, 1.20},  {800, 1.12},  {850, 1.00},  {900, 0.90},  {930, 0.45},  {940, 0.25},  {950, 0.35},
      {970, 0.65},  {1000, 0.75}, {1050, 0.68}, {1100, 0.55}, {1120, 0.15}, {1140, 0.20}, {1200, 0.50},
      {1250, 0.45}, {1300, 0.40}, {1340, 0.15}, {1360, 0.02}, {1380, 0.005}, {1400, 0.005}, {1420, 0.05},
      {1450, 0.10}, {1500, 0.25}, {1550, 0.28}, {1600, 0.26}, {1650, 0.24}, {1700, 0.20}, {1750, 0.18},
      {1800, 0.08}, {1850, 0.01}, {1900, 0.002}, {1950, 0.03}, {2000, 0.06}, {2050, 0.08}, {2100, 0.085},
      {2200, 0.075}, {2300, 0.06}, {2400, 0.04}, {2500, 0.03}};
  Spectrum s;
  s.name = "solar";
  for (auto [nm, v] : samples) {
    s.wavelengths_nm.push_back(nm);
    s.values.push_back(v);
  }
  return s;
}

}  // namespace advcube
