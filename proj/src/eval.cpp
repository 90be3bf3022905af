#include "advcube/eval.hpp"

#include "advcube/config_io.hpp"
#include "advcube/csv.hpp"
#include "advcube/hash.hpp"
#include "advcube/parallel.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>

namespace advcube {

std::string to_string(EvalPlacement p) { return p == EvalPlacement::Random ? "random" : "centered"; }

EvalPlacement placement_from_string(const std::string& name) {
  if (name == "random") return EvalPlacement::Random;
  if (name == "centered") return EvalPlacement::Centered;
  throw std::invalid_argument("unknown placement '" + name + "' (expected random or centered)");
}

SetMetrics metrics_from_confidences(std::vector<double> confidences) {
  if (confidences.empty()) throw std::invalid_argument("metrics: empty dataset");
  SetMetrics m;
  double correct = 0.0, sum = 0.0;
  for (double f : confidences) {
    correct += f <= kDecisionThreshold ? 1.0 : 0.0;
    sum += f;
  }
  m.accuracy = correct / static_cast<double>(confidences.size());
  m.cloudy = sum / static_cast<double>(confidences.size());
  m.confidences = std::move(confidences);
  return m;
}

namespace {

Transform centered_transform(int host_h, int host_w, const CubeShape& shape) {
  Transform t;
  t.row = (host_h - shape.rows) / 2;
  t.col = (host_w - shape.cols) / 2;
  return t;
}

}  // namespace

SetMetrics attack_metrics(const DetectorModel& detector, const std::vector<DataCube>& dataset,
                          const std::vector<TensorF>& patches, const AttackConfig& cfg, EvalPlacement placement,
                          std::uint64_t seed, int threads) {
  if (dataset.empty()) throw std::invalid_argument("attack_metrics: empty dataset");
  if (patches.empty()) return metrics_from_confidences(score_cubes(detector, dataset, threads));
  if (placement == EvalPlacement::Centered && patches.size() != 1) {
    throw std::invalid_argument("attack_metrics: centered placement needs a single cube");
  }
  std::vector<CubeShape> layout;
  for (const auto& p : patches) {
    if (p.rank() != 3 || p.dim(2) != kBandCount) throw std::invalid_argument("attack_metrics: cubes must be [M, N, 13]");
    layout.push_back({p.dim(0), p.dim(1)});
  }

  const Rng root(seed);
  std::vector<DataCube> embedded(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    const DataCube& host = dataset[i];
    if (placement == EvalPlacement::Centered) {
      embedded[i] = embed(host, patches.front(), centered_transform(host.height(), host.width(), layout.front()));
    } else {
      Rng rng = root.fork(i);
      embedded[i] = embed(host, patches, sample_transform(rng, cfg, host.height(), host.width(), layout));
    }
  });
  return metrics_from_confidences(score_cubes(detector, embedded, threads));
}

namespace {

std::vector<TensorF> realize_all(const std::vector<CubeParams>& params, const SpectralIndex& index) {
  std::vector<TensorF> patches;
  for (const auto& p : params) patches.push_back(realize_cube(p, index));
  return patches;
}

}  // namespace

SetMetrics attack_metrics(const DetectorModel& detector, const std::vector<DataCube>& dataset,
                          const std::vector<CubeParams>& params, const SpectralIndex& index,
                          const AttackConfig& cfg, EvalPlacement placement, std::uint64_t seed, int threads) {
  return attack_metrics(detector, dataset, realize_all(params, index), cfg, placement, seed, threads);
}

std::string config_hash(const AttackConfig& cfg) { return sha256_hex(nlohmann::json(cfg).dump()); }

AttackReport evaluate_attack(const DetectorModel& detector, const AttackSets& sets,
                             const std::vector<CubeParams>& params, const SpectralIndex& index,
                             const AttackConfig& cfg, EvalPlacement placement, std::uint64_t eval_seed,
                             int threads) {
  return evaluate_attack(detector, sets, realize_all(params, index), cfg, placement, eval_seed, threads);
}

AttackReport evaluate_attack(const DetectorModel& detector, const AttackSets& sets, const std::vector<TensorF>& patches,
                             const AttackConfig& cfg, EvalPlacement placement, std::uint64_t eval_seed,
                             int threads) {
  const Rng root(eval_seed);
  auto train = attack_metrics(detector, sets.train, patches, cfg, placement, root.fork(0).next_u64(), threads);
  auto test = attack_metrics(detector, sets.test, patches, cfg, placement, root.fork(1).next_u64(), threads);
  AttackReport r;
  r.accuracy_train = train.accuracy;
  r.cloudy_train = train.cloudy;
  r.confidences_train = std::move(train.confidences);
  r.accuracy_test = test.accuracy;
  r.cloudy_test = test.cloudy;
  r.confidences_test = std::move(test.confidences);
  r.config_hash = config_hash(cfg);
  r.seeds = {cfg.seed};
  return r;
}

void ExperimentGrid::validate() const {
  std::set<std::string> names;
  for (const auto& r : rows) {
    if (r.name.empty()) throw std::invalid_argument("grid: row with empty name");
    if (r.name.find_first_of(",\n") != std::string::npos) {
      throw std::invalid_argument("grid: row name '" + r.name + "' contains a comma or newline");
    }
    if (!names.insert(r.name).second) throw std::invalid_argument("grid: duplicate row name '" + r.name + "'");
    if (!r.baseline && r.seeds.empty()) throw std::invalid_argument("grid: row '" + r.name + "' has no seeds");
    r.config.validate();
  }
}

namespace {

AttackReport run_row(const ExperimentRow& row, const ExperimentGrid& grid, const GridAssets& assets, int threads) {
  const auto it = assets.detectors.find(row.detector);
  if (it == assets.detectors.end()) throw std::invalid_argument("unknown detector '" + row.detector + "'");
  const auto& [model, sets] = it->second;

  if (row.baseline) {
    auto r = evaluate_attack(model, sets, {}, assets.index, row.config, grid.placement, grid.eval_seed, threads);
    r.seeds.clear();
    return r;
  }

  AttackReport mean;
  mean.accuracy_train = mean.accuracy_test = mean.cloudy_train = mean.cloudy_test = 0.0;
  for (std::uint64_t seed : row.seeds) {
    AttackConfig cfg = row.config;
    cfg.seed = seed;
    cfg.threads = threads;
    std::vector<CubeParams> init;
    for (std::size_t c = 0; c < cfg.layout.size(); ++c) {
      init.push_back(init_params(cfg.layout[c].rows, cfg.layout[c].cols, assets.index.materials(),
                                 Rng(seed).fork(c).next_u64(), cfg.init_sigma, cfg.parametrization));
    }
    const auto result = optimize_cube(init, sets.train, sets.roa, model, assets.index, cfg);
    const auto r = evaluate_attack(model, sets, result.best, assets.index, cfg, grid.placement, grid.eval_seed, threads);
    mean.accuracy_train += r.accuracy_train;
    mean.accuracy_test += r.accuracy_test;
    mean.cloudy_train += r.cloudy_train;
    mean.cloudy_test += r.cloudy_test;
    mean.confidences_train.insert(mean.confidences_train.end(), r.confidences_train.begin(), r.confidences_train.end());
    mean.confidences_test.insert(mean.confidences_test.end(), r.confidences_test.begin(), r.confidences_test.end());
  }
  const double n = static_cast<double>(row.seeds.size());
  mean.accuracy_train /= n;
  mean.accuracy_test /= n;
  mean.cloudy_train /= n;
  mean.cloudy_test /= n;
  mean.config_hash = config_hash(row.config);
  mean.seeds = row.seeds;
  return mean;
}

}  // namespace

std::vector<GridRowResult> run_grid(const ExperimentGrid& grid, const GridAssets& assets, int threads) {
  grid.validate();
  std::vector<GridRowResult> out;
  for (const auto& row : grid.rows) {
    GridRowResult r;
    r.name = row.name;
    try {
      r.report = run_row(row, grid, assets, threads);
      r.seed_count = row.baseline ? 0 : static_cast<int>(row.seeds.size());
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string grid_csv(const std::vector<GridRowResult>& rows) {
  std::ostringstream out;
  out << "row_name,acc_train,acc_test,cloudy_train,cloudy_test,seed_count\n";
  for (const auto& r : rows) {
    out << r.name;
    if (r.report) {
      out << ',' << csv::format(r.report->accuracy_train) << ',' << csv::format(r.report->accuracy_test) << ','
          << csv::format(r.report->cloudy_train) << ',' << csv::format(r.report->cloudy_test);
    } else {
      out << ",nan,nan,nan,nan";
    }
    out << ',' << r.seed_count << '\n';
  }
  return out.str();
}

void write_grid_csv(const std::vector<GridRowResult>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << grid_csv(rows);
}

Rgb8 to_rgb(const TensorF& cube, int red_band, int green_band, int blue_band) {
  if (cube.rank() != 3) throw std::invalid_argument("to_rgb: expected an [H, W, B] tensor");
  const int bands[3] = {red_band, green_band, blue_band};
  for (int b : bands) {
    if (b < 1 || b > cube.dim(2)) throw std::invalid_argument("to_rgb: band " + std::to_string(b) + " out of range");
  }
  Rgb8 img;
  img.height = cube.dim(0);
  img.width = cube.dim(1);
  img.pixels.resize(static_cast<std::size_t>(img.height) * img.width * 3);
  std::size_t k = 0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int b : bands) {
        const double v = std::clamp(static_cast<double>(cube.at(y, x, b - 1)), 0.0, 1.0);
        img.pixels[k++] = static_cast<std::uint8_t>(std::lround(255.0 * v));
      }
    }
  }
  return img;
}

Rgb8 visible_rgb(const TensorF& cube) { return to_rgb(cube, 4, 3, 2); }
Rgb8 false_colour_rgb(const TensorF& cube) { return to_rgb(cube, 8, 2, 1); }

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const Rgb8& image, const std::filesystem::path& path) {
  if (image.height <= 0 || image.width <= 0) throw std::invalid_argument("write_png: empty image");
  File file(std::fopen(path.c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("write_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng error writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed encoder settings so identical images give identical files.
  png_set_compression_level(png, 9);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, image.pixels.data() + static_cast<std::size_t>(y) * image.width * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Rgb8 read_png(const std::filesystem::path& path) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("read_png: libpng init failed");
  }
  Rgb8 img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: cannot decode " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: " + path.string() + " is not 8-bit RGB");
  }
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.pixels.resize(static_cast<std::size_t>(img.height) * img.width * 3);
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3, nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

RenderedFiles render_cube_images(const std::vector<CubeParams>& params, const SpectralIndex& index,
                                 const DataCube& roa, const std::filesystem::path& out_dir, const std::string& stem) {
  if (params.empty()) throw std::invalid_argument("render: no cube to render");
  return render_cube_images(realize_cube(params.front(), index), roa, out_dir, stem);
}

RenderedFiles render_cube_images(const TensorF& cube, const DataCube& roa, const std::filesystem::path& out_dir,
                                 const std::string& stem) {
  if (cube.rank() != 3 || cube.dim(2) != kBandCount) throw std::invalid_argument("render: cube must be [M, N, 13]");
  std::filesystem::create_directories(out_dir);
  if (cube.dim(0) > roa.height() || cube.dim(1) > roa.width()) {
    throw std::invalid_argument("render: cube is larger than the ROA");
  }
  RenderedFiles files{out_dir / (stem + "_visible.png"), out_dir / (stem + "_false_colour.png"),
                      out_dir / (stem + "_roa.png")};
  write_png(visible_rgb(cube), files.cube_visible);
  write_png(false_colour_rgb(cube), files.cube_false_colour);
  const auto placed = embed(roa, cube, centered_transform(roa.height(), roa.width(), {cube.dim(0), cube.dim(1)}));
  write_png(visible_rgb(placed.data), files.roa_visible);
  return files;
}

}  // namespace advcube
