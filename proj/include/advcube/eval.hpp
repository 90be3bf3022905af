#pragma once

#include "advcube/attack.hpp"
#include "advcube/attack_sets.hpp"
#include "advcube/detector.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace advcube {

/// Confidence at or below which an item counts as correctly "not cloudy".
inline constexpr double kDecisionThreshold = 0.5;

/// Random draws a fresh transform per item from the attack config; Centered
/// places the first cube unrotated in the middle of the host, without scale,
/// noise or corruption (single-cube layouts only).
enum class EvalPlacement { Random, Centered };
std::string to_string(EvalPlacement p);
EvalPlacement placement_from_string(const std::string& name);

struct SetMetrics {
  double accuracy = 1.0;
  double cloudy = 0.0;
  std::vector<double> confidences;
};

/// Accuracy is the fraction of confidences <= 0.5, Cloudy their mean.
SetMetrics metrics_from_confidences(std::vector<double> confidences);

/// Scores `dataset` with the cubes embedded (or as-is when `params` is empty).
/// Transforms come from Rng(seed).fork(item).
SetMetrics attack_metrics(const DetectorModel& detector, const std::vector<DataCube>& dataset,
                          const std::vector<CubeParams>& params, const SpectralIndex& index,
                          const AttackConfig& cfg, EvalPlacement placement, std::uint64_t seed, int threads = 1);
/// Same with already realized [M, N, 13] cubes.
SetMetrics attack_metrics(const DetectorModel& detector, const std::vector<DataCube>& dataset,
                          const std::vector<TensorF>& patches, const AttackConfig& cfg, EvalPlacement placement,
                          std::uint64_t seed, int threads = 1);

struct AttackReport {
  double accuracy_train = 1.0;
  double accuracy_test = 1.0;
  double cloudy_train = 0.0;
  double cloudy_test = 0.0;
  std::vector<double> confidences_train;
  std::vector<double> confidences_test;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
};

/// Report for one cube set on both D and E.
AttackReport evaluate_attack(const DetectorModel& detector, const AttackSets& sets,
                             const std::vector<CubeParams>& params, const SpectralIndex& index,
                             const AttackConfig& cfg, EvalPlacement placement, std::uint64_t eval_seed,
                             int threads = 1);
AttackReport evaluate_attack(const DetectorModel& detector, const AttackSets& sets, const std::vector<TensorF>& patches,
                             const AttackConfig& cfg, EvalPlacement placement, std::uint64_t eval_seed,
                             int threads = 1);

/// SHA-256 of the canonical JSON form of the config.
std::string config_hash(const AttackConfig& cfg);

struct ExperimentRow {
  std::string name;
  std::string detector = "default";
  AttackConfig config;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  bool baseline = false;  // no cube: reports the clean detector on D and E
};

struct ExperimentGrid {
  std::vector<ExperimentRow> rows;
  EvalPlacement placement = EvalPlacement::Random;
  std::uint64_t eval_seed = 0;

  void validate() const;
};

/// A detector and the attack sets D, E and ROA it was filtered with.
struct DetectorAssets {
  DetectorModel model;
  AttackSets sets;
};

struct GridAssets {
  SpectralIndex index;
  std::map<std::string, DetectorAssets> detectors;
};

struct GridRowResult {
  std::string name;
  std::optional<AttackReport> report;  // empty when the row failed
  std::string error;
  int seed_count = 0;
};

/// Runs every row over its seeds and averages the metrics. A failing row is
/// recorded with its error and the remaining rows still run.
std::vector<GridRowResult> run_grid(const ExperimentGrid& grid, const GridAssets& assets, int threads = 1);

/// CSV with header row_name,acc_train,acc_test,cloudy_train,cloudy_test,seed_count.
/// Failed rows carry "nan" metrics and seed_count 0.
void write_grid_csv(const std::vector<GridRowResult>& rows, const std::filesystem::path& path);
std::string grid_csv(const std::vector<GridRowResult>& rows);

/// 8-bit RGB image, row-major, value = round(255 x).
struct Rgb8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3
};

/// Maps three 1-based bands of an [H, W, 13] tensor to R, G, B.
Rgb8 to_rgb(const TensorF& cube, int red_band, int green_band, int blue_band);
/// True colour from the visible bands: 4 -> R, 3 -> G, 2 -> B.
Rgb8 visible_rgb(const TensorF& cube);
/// False colour from the cloud-sensitive bands: 8 -> R, 2 -> G, 1 -> B.
Rgb8 false_colour_rgb(const TensorF& cube);

void write_png(const Rgb8& image, const std::filesystem::path& path);
Rgb8 read_png(const std::filesystem::path& path);

struct RenderedFiles {
  std::filesystem::path cube_visible;
  std::filesystem::path cube_false_colour;
  std::filesystem::path roa_visible;
};

/// Writes <stem>_visible.png, <stem>_false_colour.png and <stem>_roa.png (the
/// first cube embedded unrotated in the centre of the ROA, visible bands).
RenderedFiles render_cube_images(const std::vector<CubeParams>& params, const SpectralIndex& index,
                                 const DataCube& roa, const std::filesystem::path& out_dir,
                                 const std::string& stem = "cube");
RenderedFiles render_cube_images(const TensorF& cube, const DataCube& roa, const std::filesystem::path& out_dir,
                                 const std::string& stem = "cube");

}  // namespace advcube
