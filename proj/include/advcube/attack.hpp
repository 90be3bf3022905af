#pragma once

#include "advcube/adam.hpp"
#include "advcube/cube.hpp"
#include "advcube/detector.hpp"
#include "advcube/graph.hpp"
#include "advcube/rng.hpp"
#include "advcube/spectra.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace advcube {

/// Hull: p = C softmax(a) with a in R^{MxNxQ}. Free: p = sigmoid(a) with
/// a in R^{MxNx13}, which drops the paint constraint (ablation baseline).
enum class Parametrization { Hull, Free };

std::string to_string(Parametrization p);
Parametrization parametrization_from_string(const std::string& name);

struct CubeParams {
  TensorF logits;  // [M, N, Q] or [M, N, 13]
  Parametrization parametrization = Parametrization::Hull;

  int rows() const { return logits.dim(0); }
  int cols() const { return logits.dim(1); }
  int depth() const { return logits.dim(2); }
};

/// Gaussian logits with standard deviation sigma (0 gives uniform mixtures).
CubeParams init_params(int rows, int cols, int materials, std::uint64_t seed, double sigma = 0.01,
                       Parametrization parametrization = Parametrization::Hull);

/// M x N x 13 cube in [0,1]. Hull pixels are computed in double precision as
/// C w with w = softmax(a).
TensorF realize_cube(const CubeParams& params, const SpectralIndex& index);

/// Per-pixel mixing weights softmax(a), [M, N, Q]; hull parametrization only.
TensorD mixing_weights(const CubeParams& params);

struct Transform {
  int rotation = 0;  // quarter turns counterclockwise, 0..3
  int row = 0;       // top-left of the rotated patch in the host
  int col = 0;
  double scale = 1.0;
  TensorF noise;                         // [M', N', 13] in host orientation; empty = none
  std::array<bool, kBandCount> corrupted{};  // band reverts to host values

  static Transform identity() { return {}; }
};

/// Spatial size of a patch after `rotation` quarter turns.
std::pair<int, int> rotated_size(int rows, int cols, int rotation);

struct CubeShape {
  int rows = 25;
  int cols = 25;
  friend bool operator==(const CubeShape&, const CubeShape&) = default;
};

enum class Proximity { Low, High };
std::string to_string(Proximity p);
Proximity proximity_from_string(const std::string& name);

struct LossTerms {
  bool nps = false;
  bool cloak = false;

  /// "psi", "psi+nps", "psi+cloak", "psi+nps+cloak".
  static LossTerms parse(const std::string& spec);
  std::string to_string() const;
  friend bool operator==(const LossTerms&, const LossTerms&) = default;
};

struct AttackConfig {
  double alpha = 5.0;
  double beta = 0.05;
  LossTerms terms;
  Parametrization parametrization = Parametrization::Hull;
  int steps = 500;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 8;
  double init_sigma = 0.01;
  bool rotate = true;
  double scale_delta = 0.1;
  double noise_sigma = 0.02;
  double noise_clip = 0.05;
  double corruption_prob = 0.05;
  std::vector<CubeShape> layout = {{25, 25}};
  Proximity proximity = Proximity::Low;
  int best_window = 50;
  std::uint64_t seed = 0;
  int threads = 1;

  /// Weights actually applied to phi and omega given the enabled terms.
  double effective_alpha() const { return terms.nps ? alpha : 0.0; }
  double effective_beta() const { return terms.cloak ? beta : 0.0; }
  void validate() const;
};

/// One transform per cube in `layout`. Low proximity places anchors uniformly
/// over the host; high proximity keeps every anchor inside one square box of
/// side 2.5 x the largest patch side. Both reject overlapping placements and
/// throw after the retry budget.
std::vector<Transform> sample_transform(Rng& rng, const AttackConfig& cfg, int host_height, int host_width,
                                        const std::vector<CubeShape>& layout);

/// Index map for writing one transformed patch into a host restricted to
/// `bands`: patch element src[i] (flat into [M,N,13]) lands on host element
/// dst[i] (flat into [H,W,|bands|]) after value = clamp(scale p + noise[i]).
struct EmbedPlan {
  std::vector<int> src;
  std::vector<int> dst;
  std::vector<float> noise;
  double scale = 1.0;
};

EmbedPlan embed_plan(int host_height, int host_width, int patch_rows, int patch_cols, const Transform& t,
                     const BandSubset& bands);

/// Writes each patch into the host. Pixels outside every patch are copied
/// unchanged; corrupted bands keep host values.
DataCube embed(const DataCube& host, const std::vector<TensorF>& patches, const std::vector<Transform>& transforms);
DataCube embed(const DataCube& host, const TensorF& patch, const Transform& t);

/// Graph form of embed on a host subcube holding `bands`. The clamp passes
/// gradients straight through.
template <typename Scalar>
NodeId add_embedding(Graph<Scalar>& graph, NodeId host, const std::vector<NodeId>& patches,
                     const std::vector<Transform>& transforms, const BandSubset& bands);

/// Sum over the batch of -log f, with f clamped at the detector epsilon.
double loss_bias(const DetectorModel& detector, const std::vector<DataCube>& batch, int threads = 1);
double loss_bias(const std::vector<double>& confidences);

/// Mean over pixels of the distance to the nearest column of C.
double loss_nps(const TensorF& cube, const SpectralIndex& index);

/// L2 distance between the cube's visible bands and the given crop of the ROA.
double loss_cloak(const TensorF& cube, const DataCube& roa, int crop_row, int crop_col);
/// Same with a crop position drawn from rng.
double loss_cloak(const TensorF& cube, const DataCube& roa, Rng& rng);

struct LossBreakdown {
  double psi = 0.0;
  double phi = 0.0;
  double omega = 0.0;
  double total = 0.0;
};

LossBreakdown loss_total(double psi, double phi, double omega, double alpha, double beta);

struct TraceRow {
  int step = 0;
  LossBreakdown loss;
  double mean_conf = 0.0;
};

struct AttackResult {
  std::vector<CubeParams> best;
  std::vector<CubeParams> last;
  int best_step = -1;  // -1 when no step ran
  std::vector<TraceRow> trace;
};

class AttackError : public std::runtime_error {
 public:
  AttackError(const std::string& what, std::vector<CubeParams> last_good)
      : std::runtime_error(what), last_good_params(std::move(last_good)) {}
  std::vector<CubeParams> last_good_params;
};

/// Adam on the logits of every cube in the layout. The detector and the index
/// are constants. Returns the parameters with the lowest running mean of psi
/// over cfg.best_window steps.
AttackResult optimize_cube(const std::vector<CubeParams>& initial, const std::vector<DataCube>& train_set,
                           const DataCube& roa, const DetectorModel& detector, const SpectralIndex& index,
                           const AttackConfig& cfg);

/// Objective of one step with everything random held fixed, for gradient
/// checks: psi over `hosts` embedded with `transforms[k]`, plus alpha phi and
/// beta omega against the ROA crops at `crops[c]`. Built in Scalar precision,
/// with leaves "logits0", "logits1", ... and output "total".
template <typename Scalar>
struct AttackObjective {
  Graph<Scalar> graph;
  Bindings<Scalar> bindings;
};

template <typename Scalar>
AttackObjective<Scalar> build_attack_objective(const std::vector<CubeParams>& params, const std::vector<DataCube>& hosts,
                                               const std::vector<std::vector<Transform>>& transforms,
                                               const DataCube& roa, const std::vector<std::pair<int, int>>& crops,
                                               const DetectorModel& detector, const SpectralIndex& index,
                                               double alpha, double beta);

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path);

}  // namespace advcube
