#pragma once

#include "advcube/adam.hpp"
#include "advcube/cube.hpp"
#include "advcube/graph.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace advcube {

struct ConvSpec {
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  bool pool = true;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Detector architecture. Widths in conv_specs / dense_specs are the base
/// widths before width_multiplier; the last dense width must be 1.
struct ArchConfig {
  BandSubset input_bands = BandSubset::cloud_sensitive();
  int input_height = 128;
  int input_width = 128;
  std::vector<ConvSpec> conv_specs = {
      {16, 5, 2, 2, true}, {32, 3, 2, 1, true}, {64, 3, 1, 1, true}, {64, 3, 1, 1, true}};
  std::vector<int> dense_specs = {300, 1};
  double width_multiplier = 1.0;
  int extra_conv_layers = 0;

  /// Conv stack after applying the multiplier, with the extra 3x3 same-size
  /// layers appended after the last base layer.
  std::vector<ConvSpec> effective_convs() const;
  std::vector<int> effective_dense() const;
  void validate() const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Parameter names and shapes in creation order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ArchConfig& arch);
std::size_t parameter_count(const ArchConfig& arch);

struct EpochRecord {
  int stage = 1;
  int epoch = 0;
  double learning_rate = 0.0;
  double mean_loss = 0.0;
  double val_accuracy = -1.0;  // -1 when no validation set was given
};

struct DetectorModel {
  ArchConfig arch;
  std::map<std::string, TensorF> weights;
  bool feature_frozen = false;
  std::vector<EpochRecord> history;

  std::size_t parameter_count() const;
  /// Names of the feature-extraction (conv) or decision (dense) weights.
  std::vector<std::string> conv_weight_names() const;
  std::vector<std::string> dense_weight_names() const;
};

/// He-uniform weights, zero biases; deterministic in seed.
DetectorModel build_detector(const ArchConfig& arch, std::uint64_t seed);

/// Adds the detector's weight leaves and layers to `graph`, reading `input`
/// ([H, W, |input_bands|]). Returns the sigmoid confidence node (shape [1]).
template <typename Scalar>
NodeId add_detector(Graph<Scalar>& graph, const ArchConfig& arch, NodeId input);

/// Weight leaves only, so that several inputs can share one set of weights.
using DetectorLeaves = std::map<std::string, NodeId>;
template <typename Scalar>
DetectorLeaves add_detector_leaves(Graph<Scalar>& graph, const ArchConfig& arch);
template <typename Scalar>
NodeId add_detector(Graph<Scalar>& graph, const ArchConfig& arch, NodeId input, const DetectorLeaves& leaves);
/// Pre-sigmoid output (shape [1]); add_detector is sigmoid of this.
template <typename Scalar>
NodeId add_detector_logit(Graph<Scalar>& graph, const ArchConfig& arch, NodeId input, const DetectorLeaves& leaves);

template <typename Scalar>
Bindings<Scalar> detector_bindings(const DetectorModel& model);

/// Cloudy-class confidence in (0,1) for a subcube holding the model's input bands.
double forward(const DetectorModel& model, const TensorF& subcube);
std::vector<double> forward_batch(const DetectorModel& model, std::span<const TensorF> subcubes, int threads);

/// Scores full 13-band cubes (bands are extracted per the model's arch).
std::vector<double> score_cubes(const DetectorModel& model, std::span<const DataCube> cubes, int threads);

inline constexpr double kConfidenceEpsilon = 1e-7;

/// -y log(p) - w (1-y) log(1-p) with p clamped to [eps, 1-eps]; w = 2 by default.
double loss_weighted_bce(double y, double confidence, double fp_weight = 2.0);

/// Graph form of the weighted BCE on a confidence node, returns a [1] node.
template <typename Scalar>
NodeId add_weighted_bce(Graph<Scalar>& graph, NodeId confidence, double y, double fp_weight);

/// Same loss computed from the pre-sigmoid output. It is unclamped, so the
/// gradient does not vanish when the sigmoid saturates.
template <typename Scalar>
NodeId add_weighted_bce_logit(Graph<Scalar>& graph, NodeId logit, double y, double fp_weight);

/// eta0 * exp(-decay * epoch).
double lr_schedule(double eta0, int epoch, double decay = 0.6);

struct TrainConfig {
  int epochs_stage1 = 30;
  int epochs_stage2 = 30;
  double initial_lr = 0.01;
  double decay_rate = 0.6;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double fp_weight = 2.0;
  double threshold_stage1 = 0.30;
  double threshold_stage2 = 0.70;
  bool flip_augment = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int threads = 1;

  void validate() const;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stage 1: all weights on th30. Stage 2: dense weights only on th70, conv
/// weights untouched. Validation accuracy per epoch is recorded when `val`
/// is given.
DetectorModel train_two_stage(DetectorModel model, const LabeledDataset& th30, const LabeledDataset& th70,
                              const TrainConfig& cfg, const LabeledDataset* val = nullptr);

/// Fraction of items whose thresholded confidence (> 0.5 = cloudy) matches the label.
double detector_accuracy(const DetectorModel& model, const LabeledDataset& data, int threads);

/// MSDM container: "MSDM", u32 version, u32 length + JSON arch block, u32
/// tensor count, then per tensor u32 name length, name, u32 rank, u32 dims,
/// float32 payload. All integers and floats little-endian.
inline constexpr std::uint32_t kModelFormatVersion = 1;
void save_model(const DetectorModel& model, const std::filesystem::path& path);
DetectorModel load_model(const std::filesystem::path& path);

/// FNV-1a over weight names, shapes and bytes.
std::uint64_t weights_hash(const DetectorModel& model);

}  // namespace advcube
