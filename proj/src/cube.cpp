#include "advcube/cube.hpp"

#include "advcube/csv.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace advcube {

static_assert(std::endian::native == std::endian::little, "MSC1 I/O assumes a little-endian host");

void validate_cube(const DataCube& cube) {
  if (cube.data.rank() != 3) throw std::invalid_argument("data cube must be rank 3 [H,W,B]");
  const auto& d = cube.data.data();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!(d[i] >= 0.0f && d[i] <= 1.0f)) {
      throw std::invalid_argument("data cube value " + std::to_string(d[i]) + " outside [0,1] at element " +
                                  std::to_string(i));
    }
  }
}

double CloudMask::cloud_fraction() const {
  if (cells.empty()) return 0.0;
  const auto ones = std::count(cells.begin(), cells.end(), std::uint8_t{1});
  return static_cast<double>(ones) / static_cast<double>(cells.size());
}

BandSubset::BandSubset(std::vector<int> indices) : indices_(std::move(indices)) {
  std::sort(indices_.begin(), indices_.end());
  if (indices_.empty()) throw std::invalid_argument("band subset must not be empty");
  if (std::adjacent_find(indices_.begin(), indices_.end()) != indices_.end()) {
    throw std::invalid_argument("band subset has duplicate indices");
  }
  if (indices_.front() < 1 || indices_.back() > kBandCount) {
    throw std::invalid_argument("band subset indices must lie in 1..13");
  }
}

BandSubset BandSubset::all() {
  std::vector<int> v(kBandCount);
  for (int i = 0; i < kBandCount; ++i) v[static_cast<std::size_t>(i)] = i + 1;
  return BandSubset(std::move(v));
}

bool BandSubset::contains(int band) const { return std::binary_search(indices_.begin(), indices_.end(), band); }

std::string BandSubset::to_string() const {
  std::string s = "{";
  for (std::size_t i = 0; i < indices_.size(); ++i) s += (i ? "," : "") + std::to_string(indices_[i]);
  return s + "}";
}

TensorF extract_bands(const TensorF& cube, const BandSubset& subset) {
  const int h = cube.dim(0), w = cube.dim(1), b = cube.dim(2);
  if (subset.indices().back() > b) {
    throw std::invalid_argument("band subset " + subset.to_string() + " exceeds cube with " + std::to_string(b) +
                                " bands");
  }
  const int k = subset.size();
  TensorF out({h, w, k});
  const float* src = cube.raw();
  float* dst = out.raw();
  const std::size_t pixels = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int j = 0; j < k; ++j) dst[p * k + j] = src[p * b + subset.zero_based(j)];
  }
  return out;
}

TensorF extract_bands(const DataCube& cube, const BandSubset& subset) { return extract_bands(cube.data, subset); }

void write_cube(const DataCube& cube, const std::filesystem::path& path) {
  validate_cube(cube);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write("MSC1", 4);
  const std::array<std::uint32_t, 3> dims = {static_cast<std::uint32_t>(cube.height()),
                                             static_cast<std::uint32_t>(cube.width()),
                                             static_cast<std::uint32_t>(cube.bands())};
  out.write(reinterpret_cast<const char*>(dims.data()), sizeof(dims));
  out.write(reinterpret_cast<const char*>(cube.data.raw()),
            static_cast<std::streamsize>(cube.data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

DataCube read_cube(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MSC1", 4) != 0) throw std::runtime_error(path.string() + ": bad magic");
  std::array<std::uint32_t, 3> dims{};
  in.read(reinterpret_cast<char*>(dims.data()), sizeof(dims));
  if (!in) throw std::runtime_error(path.string() + ": truncated header");
  for (auto d : dims) {
    if (d == 0 || d > (1u << 16)) throw std::runtime_error(path.string() + ": implausible dimension " + std::to_string(d));
  }
  DataCube cube(TensorF({static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2])}));
  const auto bytes = static_cast<std::streamsize>(cube.data.size() * sizeof(float));
  in.read(reinterpret_cast<char*>(cube.data.raw()), bytes);
  if (in.gcount() != bytes) throw std::runtime_error(path.string() + ": truncated payload");
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path.string() + ": trailing bytes");
  try {
    validate_cube(cube);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  return cube;
}

Label label_by_threshold(double cloud_fraction, double threshold) {
  return cloud_fraction > threshold ? Label::Cloudy : Label::NotCloudy;
}

Label label_by_threshold(const CloudMask& mask, double threshold) {
  return label_by_threshold(mask.cloud_fraction(), threshold);
}

std::string to_string(TerrainKind kind) {
  switch (kind) {
    case TerrainKind::Hills: return "hills";
    case TerrainKind::Desert: return "desert";
    case TerrainKind::Mixed: return "mixed";
  }
  return "?";
}

TerrainKind terrain_from_string(const std::string& name) {
  if (name == "hills") return TerrainKind::Hills;
  if (name == "desert") return TerrainKind::Desert;
  if (name == "mixed") return TerrainKind::Mixed;
  throw std::invalid_argument("unknown terrain kind '" + name + "' (expected hills, desert or mixed)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
}

std::size_t LabeledDataset::count(Label label) const {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [&](const LabeledItem& it) { return it.label == label; }));
}

LabeledDataset LabeledDataset::relabeled(double new_threshold) const {
  LabeledDataset out = *this;
  out.threshold = new_threshold;
  for (auto& it : out.items) it.label = label_by_threshold(it.cloud_fraction, new_threshold);
  return out;
}

namespace {

std::string item_file(std::size_t i) {
  std::string digits = std::to_string(i);
  return "cube_" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits + ".msc1";
}

}  // namespace

void write_dataset(const LabeledDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream labels(dir / "labels.csv", std::ios::binary);
  if (!labels) throw std::runtime_error("cannot write " + (dir / "labels.csv").string());
  labels << "file,seed,terrain,cloud_fraction,label\n";
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    const auto& it = data.items[i];
    const auto file = item_file(i);
    write_cube(it.cube, dir / file);
    labels << file << ',' << it.seed << ',' << to_string(it.terrain) << ',' << csv::format(it.cloud_fraction) << ','
           << (it.label == Label::Cloudy ? "cloudy" : "not_cloudy") << '\n';
  }
  std::ofstream meta(dir / "dataset.json", std::ios::binary);
  if (!meta) throw std::runtime_error("cannot write " + (dir / "dataset.json").string());
  meta << nlohmann::json{{"threshold", data.threshold}, {"split", to_string(data.split)}, {"count", data.size()}}.dump(2)
       << '\n';
}

LabeledDataset read_dataset(const std::filesystem::path& dir) {
  LabeledDataset data;
  {
    std::ifstream meta(dir / "dataset.json");
    if (!meta) throw std::runtime_error("cannot open " + (dir / "dataset.json").string());
    const auto j = nlohmann::json::parse(meta);
    data.threshold = j.at("threshold").get<double>();
    data.split = split_from_string(j.at("split").get<std::string>());
  }
  const auto path = dir / "labels.csv";
  const auto rows = csv::read(path);
  if (rows.empty() || rows.front().fields != std::vector<std::string>{"file", "seed", "terrain", "cloud_fraction", "label"}) {
    throw csv::ParseError(path, rows.empty() ? 1 : rows.front().line,
                          "expected header file,seed,terrain,cloud_fraction,label");
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() != 5) throw csv::ParseError(path, row.line, "expected 5 fields");
    LabeledItem it;
    it.cube = read_cube(dir / row.fields[0]);
    try {
      it.seed = std::stoull(row.fields[1]);
      it.terrain = terrain_from_string(row.fields[2]);
    } catch (const std::exception& e) {
      throw csv::ParseError(path, row.line, e.what());
    }
    it.cloud_fraction = csv::parse_double(path, row, 3);
    if (row.fields[4] == "cloudy") {
      it.label = Label::Cloudy;
    } else if (row.fields[4] == "not_cloudy") {
      it.label = Label::NotCloudy;
    } else {
      throw csv::ParseError(path, row.line, "label must be cloudy or not_cloudy");
    }
    if (it.label != label_by_threshold(it.cloud_fraction, data.threshold)) {
      throw csv::ParseError(path, row.line, "label disagrees with cloud fraction at threshold " +
                                                csv::format(data.threshold));
    }
    data.items.push_back(std::move(it));
  }
  return data;
}

}  // namespace advcube
