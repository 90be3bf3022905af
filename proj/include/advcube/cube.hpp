#pragma once

#include "advcube/spectra.hpp"
#include "advcube/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

namespace advcube {

/// H x W x B reflectance tensor, values in [0,1], band-fastest.
struct DataCube {
  TensorF data;
  double ground_resolution_m = 20.0;

  DataCube() = default;
  explicit DataCube(TensorF d, double resolution_m = 20.0) : data(std::move(d)), ground_resolution_m(resolution_m) {}

  static DataCube zeros(int height, int width, int bands = kBandCount) {
    return DataCube(TensorF({height, width, bands}));
  }

  int height() const { return data.dim(0); }
  int width() const { return data.dim(1); }
  int bands() const { return data.dim(2); }
  float at(int row, int col, int band) const { return data.at(row, col, band); }
  float& at(int row, int col, int band) { return data.at(row, col, band); }
};

/// Throws unless the cube is rank 3 with all values in [0,1].
void validate_cube(const DataCube& cube);

struct CloudMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> cells;  // row-major, 1 = cloud

  double cloud_fraction() const;
};

/// Sorted, unique, 1-based Sentinel-2A band indices.
class BandSubset {
 public:
  BandSubset(std::initializer_list<int> indices) : BandSubset(std::vector<int>(indices)) {}
  explicit BandSubset(std::vector<int> indices);

  static BandSubset cloud_sensitive() { return {1, 2, 8}; }
  static BandSubset visible() { return {2, 3, 4}; }
  static BandSubset all();

  const std::vector<int>& indices() const { return indices_; }
  int size() const { return static_cast<int>(indices_.size()); }
  int zero_based(int k) const { return indices_[static_cast<std::size_t>(k)] - 1; }
  bool contains(int band) const;
  std::string to_string() const;

  friend bool operator==(const BandSubset&, const BandSubset&) = default;

 private:
  std::vector<int> indices_;
};

TensorF extract_bands(const DataCube& cube, const BandSubset& subset);
TensorF extract_bands(const TensorF& cube, const BandSubset& subset);

/// MSC1: "MSC1", then H, W, B as little-endian u32, then H*W*B little-endian
/// float32 values, row-major and band-fastest.
void write_cube(const DataCube& cube, const std::filesystem::path& path);
DataCube read_cube(const std::filesystem::path& path);

enum class Label { NotCloudy = 0, Cloudy = 1 };

/// Cloudy iff the cloud fraction strictly exceeds the threshold.
Label label_by_threshold(double cloud_fraction, double threshold);
Label label_by_threshold(const CloudMask& mask, double threshold);

enum class Split { Train, Val, Test };

enum class TerrainKind { Hills, Desert, Mixed };

std::string to_string(TerrainKind kind);
TerrainKind terrain_from_string(const std::string& name);
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct LabeledItem {
  DataCube cube;
  Label label = Label::NotCloudy;
  double cloud_fraction = 0.0;
  TerrainKind terrain = TerrainKind::Hills;
  std::uint64_t seed = 0;
};

struct LabeledDataset {
  std::vector<LabeledItem> items;
  double threshold = 0.30;
  Split split = Split::Train;

  std::size_t size() const { return items.size(); }
  std::size_t count(Label label) const;
  /// Recomputes every label from its stored cloud fraction at `threshold`.
  LabeledDataset relabeled(double new_threshold) const;
};

/// Dataset directory: one MSC1 file per item plus labels.csv with header
/// file,seed,terrain,cloud_fraction,label and dataset.json holding the
/// threshold and split.
void write_dataset(const LabeledDataset& data, const std::filesystem::path& dir);
LabeledDataset read_dataset(const std::filesystem::path& dir);

}  // namespace advcube
