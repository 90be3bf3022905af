#include "advcube/attack.hpp"

#include "advcube/csv.hpp"
#include "advcube/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>

namespace advcube {

std::string to_string(Parametrization p) { return p == Parametrization::Hull ? "hull" : "free"; }

Parametrization parametrization_from_string(const std::string& name) {
  if (name == "hull") return Parametrization::Hull;
  if (name == "free") return Parametrization::Free;
  throw std::invalid_argument("unknown parametrization '" + name + "' (expected hull or free)");
}

std::string to_string(Proximity p) { return p == Proximity::Low ? "low" : "high"; }

Proximity proximity_from_string(const std::string& name) {
  if (name == "low") return Proximity::Low;
  if (name == "high") return Proximity::High;
  throw std::invalid_argument("unknown proximity '" + name + "' (expected low or high)");
}

LossTerms LossTerms::parse(const std::string& spec) {
  LossTerms t;
  bool psi = false;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const auto end = std::min(spec.find('+', start), spec.size());
    const auto term = spec.substr(start, end - start);
    bool* slot = term == "psi" ? &psi : term == "nps" ? &t.nps : term == "cloak" ? &t.cloak : nullptr;
    if (slot && *slot) throw std::invalid_argument("loss term '" + term + "' repeated in '" + spec + "'");
    if (slot) {
      *slot = true;
    } else {
      throw std::invalid_argument("unknown loss term '" + term + "' in '" + spec + "'");
    }
    start = end + 1;
  }
  if (!psi) throw std::invalid_argument("loss '" + spec + "' must include psi");
  return t;
}

std::string LossTerms::to_string() const {
  std::string s = "psi";
  if (nps) s += "+nps";
  if (cloak) s += "+cloak";
  return s;
}

void AttackConfig::validate() const {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("attack: alpha and beta must be >= 0");
  if (steps < 0) throw std::invalid_argument("attack: steps must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("attack: lr must be positive");
  if (batch_size < 1) throw std::invalid_argument("attack: batch_size must be >= 1");
  if (init_sigma < 0.0) throw std::invalid_argument("attack: init_sigma must be >= 0");
  if (scale_delta < 0.0 || scale_delta >= 1.0) throw std::invalid_argument("attack: scale_delta must be in [0,1)");
  if (noise_sigma < 0.0 || noise_clip < 0.0) throw std::invalid_argument("attack: noise settings must be >= 0");
  if (corruption_prob < 0.0 || corruption_prob > 1.0) {
    throw std::invalid_argument("attack: corruption_prob must be in [0,1]");
  }
  if (layout.empty()) throw std::invalid_argument("attack: layout needs at least one cube");
  for (const auto& c : layout) {
    if (c.rows < 1 || c.cols < 1) throw std::invalid_argument("attack: cube sizes must be positive");
  }
  if (best_window < 1) throw std::invalid_argument("attack: best_window must be >= 1");
  if (threads < 1) throw std::invalid_argument("attack: threads must be >= 1");
}

CubeParams init_params(int rows, int cols, int materials, std::uint64_t seed, double sigma,
                       Parametrization parametrization) {
  if (rows < 1 || cols < 1 || materials < 1) throw std::invalid_argument("init_params: sizes must be >= 1");
  const int depth = parametrization == Parametrization::Hull ? materials : kBandCount;
  CubeParams p;
  p.parametrization = parametrization;
  p.logits = TensorF({rows, cols, depth});
  if (sigma > 0.0) {
    Rng rng(seed);
    for (std::size_t i = 0; i < p.logits.size(); ++i) p.logits[i] = static_cast<float>(rng.normal(0.0, sigma));
  }
  return p;
}

namespace {

void check_index(const CubeParams& params, const SpectralIndex& index) {
  if (params.logits.rank() != 3) throw std::invalid_argument("cube logits must be [M,N,depth]");
  if (params.parametrization == Parametrization::Hull && params.depth() != index.materials()) {
    throw std::invalid_argument("cube has " + std::to_string(params.depth()) + " logits per pixel, index has " +
                                std::to_string(index.materials()) + " materials");
  }
  if (params.parametrization == Parametrization::Free && params.depth() != kBandCount) {
    throw std::invalid_argument("free cube logits must have 13 entries per pixel");
  }
}

}  // namespace

TensorD mixing_weights(const CubeParams& params) {
  if (params.parametrization != Parametrization::Hull) {
    throw std::invalid_argument("mixing weights exist only for the hull parametrization");
  }
  const int q = params.depth();
  const auto pixels = static_cast<Eigen::Index>(params.rows()) * params.cols();
  TensorD w(params.logits.shape());
  auto lm = params.logits.matrix(pixels, q);
  auto wm = w.matrix(pixels, q);
  for (Eigen::Index r = 0; r < pixels; ++r) {
    const Eigen::RowVectorXd a = lm.row(r).cast<double>();
    const Eigen::RowVectorXd e = (a.array() - a.maxCoeff()).exp();
    wm.row(r) = e / e.sum();
  }
  return w;
}

TensorF realize_cube(const CubeParams& params, const SpectralIndex& index) {
  check_index(params, index);
  TensorF out({params.rows(), params.cols(), kBandCount});
  const auto pixels = static_cast<Eigen::Index>(params.rows()) * params.cols();
  auto om = out.matrix(pixels, kBandCount);
  if (params.parametrization == Parametrization::Free) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(1.0 / (1.0 + std::exp(-params.logits[i])));
    return out;
  }
  const auto w = mixing_weights(params);
  const Eigen::MatrixXd p = w.matrix(pixels, params.depth()) * index.columns.transpose();
  om = p.cwiseMax(0.0).cwiseMin(1.0).cast<float>();
  return out;
}

std::pair<int, int> rotated_size(int rows, int cols, int rotation) {
  return rotation % 2 == 0 ? std::pair{rows, cols} : std::pair{cols, rows};
}

namespace {

struct Rect {
  int row, col, rows, cols;
  bool overlaps(const Rect& o) const {
    return row < o.row + o.rows && o.row < row + rows && col < o.col + o.cols && o.col < col + cols;
  }
};

constexpr int kPlacementAttempts = 1000;

}  // namespace

std::vector<Transform> sample_transform(Rng& rng, const AttackConfig& cfg, int host_height, int host_width,
                                        const std::vector<CubeShape>& layout) {
  if (layout.empty()) throw std::invalid_argument("sample_transform: empty layout");
  int side = 0;
  for (const auto& c : layout) {
    const bool fits = c.rows <= host_height && c.cols <= host_width &&
                      (!cfg.rotate || (c.cols <= host_height && c.rows <= host_width));
    if (!fits) {
      throw std::invalid_argument("sample_transform: " + std::to_string(c.rows) + "x" + std::to_string(c.cols) +
                                  " cube does not fit a " + std::to_string(host_height) + "x" +
                                  std::to_string(host_width) + " host");
    }
    side = std::max({side, c.rows, c.cols});
  }
  const int box = static_cast<int>(std::floor(2.5 * side));

  std::vector<Transform> out(layout.size());
  bool placed = false;
  for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
    int box_row = 0;
    int box_col = 0;
    if (cfg.proximity == Proximity::High) {
      box_row = rng.uniform_int(0, std::max(0, host_height - box));
      box_col = rng.uniform_int(0, std::max(0, host_width - box));
    }
    std::vector<Rect> rects;
    placed = true;
    for (std::size_t c = 0; c < layout.size(); ++c) {
      auto& t = out[c];
      t.rotation = cfg.rotate ? rng.uniform_int(0, 3) : 0;
      const auto [mr, mc] = rotated_size(layout[c].rows, layout[c].cols, t.rotation);
      const int max_row = host_height - mr;
      const int max_col = host_width - mc;
      if (cfg.proximity == Proximity::High) {
        const int lo_r = std::min(box_row, max_row);
        const int lo_c = std::min(box_col, max_col);
        t.row = rng.uniform_int(lo_r, std::min(box_row + box, max_row));
        t.col = rng.uniform_int(lo_c, std::min(box_col + box, max_col));
      } else {
        t.row = rng.uniform_int(0, max_row);
        t.col = rng.uniform_int(0, max_col);
      }
      const Rect r{t.row, t.col, mr, mc};
      for (const auto& other : rects) {
        if (r.overlaps(other)) placed = false;
      }
      rects.push_back(r);
      if (!placed) break;
    }
  }
  if (!placed) {
    throw std::runtime_error("sample_transform: could not place " + std::to_string(layout.size()) +
                             " non-overlapping cubes in a " + std::to_string(host_height) + "x" +
                             std::to_string(host_width) + " host after " + std::to_string(kPlacementAttempts) +
                             " attempts");
  }

  for (std::size_t c = 0; c < layout.size(); ++c) {
    auto& t = out[c];
    const auto [mr, mc] = rotated_size(layout[c].rows, layout[c].cols, t.rotation);
    t.scale = cfg.scale_delta > 0.0 ? rng.uniform(1.0 - cfg.scale_delta, 1.0 + cfg.scale_delta) : 1.0;
    if (cfg.noise_sigma > 0.0) {
      t.noise = TensorF({mr, mc, kBandCount});
      for (std::size_t i = 0; i < t.noise.size(); ++i) {
        t.noise[i] = static_cast<float>(std::clamp(rng.normal(0.0, cfg.noise_sigma), -cfg.noise_clip, cfg.noise_clip));
      }
    } else {
      t.noise = TensorF();
    }
    for (auto& band : t.corrupted) band = cfg.corruption_prob > 0.0 && rng.bernoulli(cfg.corruption_prob);
  }
  return out;
}

EmbedPlan embed_plan(int host_height, int host_width, int patch_rows, int patch_cols, const Transform& t,
                     const BandSubset& bands) {
  if (t.rotation < 0 || t.rotation > 3) throw std::invalid_argument("embed: rotation must be 0..3 quarter turns");
  const auto [mr, mc] = rotated_size(patch_rows, patch_cols, t.rotation);
  if (t.row < 0 || t.col < 0 || t.row + mr > host_height || t.col + mc > host_width) {
    throw std::out_of_range("embed: " + std::to_string(mr) + "x" + std::to_string(mc) + " patch at (" +
                            std::to_string(t.row) + "," + std::to_string(t.col) + ") is outside the " +
                            std::to_string(host_height) + "x" + std::to_string(host_width) + " host");
  }
  if (!t.noise.empty() && t.noise.shape() != Shape{mr, mc, kBandCount}) {
    throw std::invalid_argument("embed: noise shape " + shape_string(t.noise.shape()) + " does not match patch");
  }
  EmbedPlan plan;
  plan.scale = t.scale;
  const int k = bands.size();
  for (int i = 0; i < mr; ++i) {
    for (int j = 0; j < mc; ++j) {
      int si = i;
      int sj = j;
      switch (t.rotation) {
        case 1: si = j; sj = patch_cols - 1 - i; break;
        case 2: si = patch_rows - 1 - i; sj = patch_cols - 1 - j; break;
        case 3: si = patch_rows - 1 - j; sj = i; break;
        default: break;
      }
      for (int b = 0; b < k; ++b) {
        const int band = bands.zero_based(b);
        if (t.corrupted[static_cast<std::size_t>(band)]) continue;
        plan.src.push_back((si * patch_cols + sj) * kBandCount + band);
        plan.dst.push_back(((t.row + i) * host_width + (t.col + j)) * k + b);
        plan.noise.push_back(t.noise.empty() ? 0.0f : t.noise.at(i, j, band));
      }
    }
  }
  return plan;
}

DataCube embed(const DataCube& host, const std::vector<TensorF>& patches, const std::vector<Transform>& transforms) {
  if (patches.size() != transforms.size()) throw std::invalid_argument("embed: one transform per patch required");
  DataCube out = host;
  const auto all = BandSubset::all();
  for (std::size_t c = 0; c < patches.size(); ++c) {
    const auto& p = patches[c];
    if (p.rank() != 3 || p.dim(2) != kBandCount) throw std::invalid_argument("embed: patch must be [M,N,13]");
    const auto plan = embed_plan(host.height(), host.width(), p.dim(0), p.dim(1), transforms[c], all);
    const auto s = static_cast<float>(plan.scale);
    for (std::size_t i = 0; i < plan.src.size(); ++i) {
      const float v = p[static_cast<std::size_t>(plan.src[i])] * s + 0.0f + plan.noise[i];
      out.data[static_cast<std::size_t>(plan.dst[i])] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return out;
}

DataCube embed(const DataCube& host, const TensorF& patch, const Transform& t) {
  return embed(host, std::vector<TensorF>{patch}, std::vector<Transform>{t});
}

template <typename Scalar>
NodeId add_embedding(Graph<Scalar>& graph, NodeId host, const std::vector<NodeId>& patches,
                     const std::vector<Transform>& transforms, const BandSubset& bands) {
  if (patches.size() != transforms.size()) throw std::invalid_argument("embed: one transform per patch required");
  const Shape hs = graph.shape(host);
  if (hs.size() != 3 || hs[2] != bands.size()) throw std::invalid_argument("embed: host must be [H,W,|bands|]");
  NodeId out = host;
  for (std::size_t c = 0; c < patches.size(); ++c) {
    const Shape ps = graph.shape(patches[c]);
    if (ps.size() != 3 || ps[2] != kBandCount) throw std::invalid_argument("embed: patch must be [M,N,13]");
    auto plan = embed_plan(hs[0], hs[1], ps[0], ps[1], transforms[c], bands);
    if (plan.src.empty()) continue;
    const int n = static_cast<int>(plan.src.size());
    auto v = graph.affine(graph.gather(patches[c], std::move(plan.src), {n}), plan.scale, 0.0);
    Tensor<Scalar> noise({n});
    for (int i = 0; i < n; ++i) noise[static_cast<std::size_t>(i)] = static_cast<Scalar>(plan.noise[static_cast<std::size_t>(i)]);
    v = graph.clamp_ste(graph.add(v, graph.constant(std::move(noise))), 0.0, 1.0);
    out = graph.scatter(out, v, std::move(plan.dst));
  }
  return out;
}

template NodeId add_embedding<float>(Graph<float>&, NodeId, const std::vector<NodeId>&, const std::vector<Transform>&,
                                     const BandSubset&);
template NodeId add_embedding<double>(Graph<double>&, NodeId, const std::vector<NodeId>&,
                                      const std::vector<Transform>&, const BandSubset&);

double loss_bias(const std::vector<double>& confidences) {
  double psi = 0.0;
  for (double f : confidences) psi -= std::log(std::clamp(f, kConfidenceEpsilon, 1.0));
  return psi;
}

double loss_bias(const DetectorModel& detector, const std::vector<DataCube>& batch, int threads) {
  return loss_bias(score_cubes(detector, batch, threads));
}

double loss_nps(const TensorF& cube, const SpectralIndex& index) {
  if (cube.rank() != 3 || cube.dim(2) != kBandCount) throw std::invalid_argument("loss_nps: cube must be [M,N,13]");
  const auto pixels = static_cast<Eigen::Index>(cube.dim(0)) * cube.dim(1);
  const auto pm = cube.matrix(pixels, kBandCount);
  double sum = 0.0;
  for (Eigen::Index r = 0; r < pixels; ++r) {
    const Eigen::Matrix<double, kBandCount, 1> p = pm.row(r).transpose().cast<double>();
    sum += (index.columns.colwise() - p).colwise().norm().minCoeff();
  }
  return sum / static_cast<double>(pixels);
}

double loss_cloak(const TensorF& cube, const DataCube& roa, int crop_row, int crop_col) {
  const int m = cube.dim(0);
  const int n = cube.dim(1);
  if (roa.height() < m || roa.width() < n) {
    throw std::invalid_argument("loss_cloak: ROA " + std::to_string(roa.height()) + "x" + std::to_string(roa.width()) +
                                " is smaller than the " + std::to_string(m) + "x" + std::to_string(n) + " cube");
  }
  if (crop_row < 0 || crop_col < 0 || crop_row + m > roa.height() || crop_col + n > roa.width()) {
    throw std::out_of_range("loss_cloak: crop outside the ROA");
  }
  const auto v = BandSubset::visible();
  double sum = 0.0;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int b : v.indices()) {
        const double d = static_cast<double>(cube.at(i, j, b - 1)) - roa.at(crop_row + i, crop_col + j, b - 1);
        sum += d * d;
      }
    }
  }
  return std::sqrt(sum);
}

double loss_cloak(const TensorF& cube, const DataCube& roa, Rng& rng) {
  if (roa.height() < cube.dim(0) || roa.width() < cube.dim(1)) return loss_cloak(cube, roa, 0, 0);
  const int r = rng.uniform_int(0, roa.height() - cube.dim(0));
  const int c = rng.uniform_int(0, roa.width() - cube.dim(1));
  return loss_cloak(cube, roa, r, c);
}

LossBreakdown loss_total(double psi, double phi, double omega, double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("loss_total: alpha and beta must be >= 0");
  return {psi, phi, omega, psi + alpha * phi + beta * omega};
}

namespace {

// Realized cube, phi and omega nodes for one cube's logits leaf.
struct CubeNodes {
  NodeId patch;
  NodeId phi;
  NodeId omega;
};

template <typename Scalar>
CubeNodes add_cube_terms(Graph<Scalar>& g, const std::string& leaf, const CubeParams& params,
                         const SpectralIndex& index, const DataCube& roa, std::pair<int, int> crop) {
  const int m = params.rows();
  const int n = params.cols();
  const int pixels = m * n;
  const auto logits = g.input(leaf, params.logits.shape());
  Tensor<Scalar> columns({kBandCount, index.materials()});
  columns.matrix(kBandCount, index.materials()) = index.columns.cast<Scalar>();
  const auto c = g.constant(columns);

  NodeId flat;
  if (params.parametrization == Parametrization::Hull) {
    Tensor<Scalar> ct({index.materials(), kBandCount});
    ct.matrix(index.materials(), kBandCount) = index.columns.transpose().cast<Scalar>();
    flat = g.matmul(g.softmax(g.reshape(logits, {pixels, params.depth()})), g.constant(std::move(ct)));
  } else {
    flat = g.reshape(g.sigmoid(logits), {pixels, kBandCount});
  }
  CubeNodes out;
  out.patch = g.reshape(flat, {m, n, kBandCount});
  out.phi = g.mean(g.min_distance(flat, c));

  if (roa.height() < m || roa.width() < n) {
    throw std::invalid_argument("loss_cloak: ROA smaller than the " + std::to_string(m) + "x" + std::to_string(n) +
                                " cube");
  }
  const auto v = BandSubset::visible();
  std::vector<int> idx;
  Tensor<Scalar> neg_crop({pixels * v.size()});
  std::size_t k = 0;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int b : v.indices()) {
        idx.push_back((i * n + j) * kBandCount + b - 1);
        neg_crop[k++] = -static_cast<Scalar>(roa.at(crop.first + i, crop.second + j, b - 1));
      }
    }
  }
  out.omega = g.norm2(g.add(g.gather(out.patch, std::move(idx), {pixels * v.size()}), g.constant(std::move(neg_crop))));
  return out;
}

std::string logits_name(std::size_t c) { return "logits" + std::to_string(c); }

template <typename Scalar>
NodeId sum_nodes(Graph<Scalar>& g, const std::vector<NodeId>& xs) {
  NodeId acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = g.add(acc, xs[i]);
  return acc;
}

// -log f computed from the detector logit z as -log_sigmoid(z), which keeps a
// usable gradient when f is far below the BCE clamp.
template <typename Scalar>
NodeId add_psi(Graph<Scalar>& g, NodeId logit) {
  return g.scale(g.log_sigmoid(logit), -1.0);
}

std::pair<int, int> sample_crop(Rng& rng, const DataCube& roa, const CubeShape& shape) {
  if (roa.height() < shape.rows || roa.width() < shape.cols) {
    throw std::invalid_argument("loss_cloak: ROA smaller than the " + std::to_string(shape.rows) + "x" +
                                std::to_string(shape.cols) + " cube");
  }
  return {rng.uniform_int(0, roa.height() - shape.rows), rng.uniform_int(0, roa.width() - shape.cols)};
}

}  // namespace

template <typename Scalar>
AttackObjective<Scalar> build_attack_objective(const std::vector<CubeParams>& params, const std::vector<DataCube>& hosts,
                                               const std::vector<std::vector<Transform>>& transforms,
                                               const DataCube& roa, const std::vector<std::pair<int, int>>& crops,
                                               const DetectorModel& detector, const SpectralIndex& index,
                                               double alpha, double beta) {
  if (params.empty() || hosts.empty()) throw std::invalid_argument("attack objective needs cubes and hosts");
  if (transforms.size() != hosts.size() || crops.size() != params.size()) {
    throw std::invalid_argument("attack objective: one transform list per host and one crop per cube required");
  }
  AttackObjective<Scalar> obj;
  auto& g = obj.graph;
  std::vector<NodeId> patches, phis, omegas;
  for (std::size_t c = 0; c < params.size(); ++c) {
    check_index(params[c], index);
    const auto nodes = add_cube_terms(g, logits_name(c), params[c], index, roa, crops[c]);
    patches.push_back(nodes.patch);
    phis.push_back(nodes.phi);
    omegas.push_back(nodes.omega);
    obj.bindings.emplace(logits_name(c), params[c].logits.template cast<Scalar>());
  }
  const auto leaves = add_detector_leaves(g, detector.arch);
  std::vector<NodeId> psis;
  for (std::size_t k = 0; k < hosts.size(); ++k) {
    const auto host = g.constant(extract_bands(hosts[k], detector.arch.input_bands).template cast<Scalar>());
    const auto embedded = add_embedding(g, host, patches, transforms[k], detector.arch.input_bands);
    psis.push_back(add_psi(g, add_detector_logit(g, detector.arch, embedded, leaves)));
  }
  const auto psi = sum_nodes(g, psis);
  const auto phi = sum_nodes(g, phis);
  const auto omega = sum_nodes(g, omegas);
  g.mark_output("psi", psi);
  g.mark_output("phi", phi);
  g.mark_output("omega", omega);
  g.mark_output("total", g.add(psi, g.add(g.scale(phi, alpha), g.scale(omega, beta))));
  for (auto& [name, t] : detector_bindings<Scalar>(detector)) obj.bindings.emplace(name, std::move(t));
  return obj;
}

template AttackObjective<float> build_attack_objective<float>(
    const std::vector<CubeParams>&, const std::vector<DataCube>&, const std::vector<std::vector<Transform>>&,
    const DataCube&, const std::vector<std::pair<int, int>>&, const DetectorModel&, const SpectralIndex&, double, double);
template AttackObjective<double> build_attack_objective<double>(
    const std::vector<CubeParams>&, const std::vector<DataCube>&, const std::vector<std::vector<Transform>>&,
    const DataCube&, const std::vector<std::pair<int, int>>&, const DetectorModel&, const SpectralIndex&, double, double);

namespace {

template <typename Fn>
void for_each_chunk(std::size_t n, int threads, Fn&& fn) {
  const std::size_t chunks = std::min<std::size_t>(std::max(1, threads), std::max<std::size_t>(n, 1));
  parallel_for(chunks, threads, [&](std::size_t c) { fn(n * c / chunks, n * (c + 1) / chunks); });
}

bool finite(const TensorF& t) { return t.data().allFinite(); }

}  // namespace

AttackResult optimize_cube(const std::vector<CubeParams>& initial, const std::vector<DataCube>& train_set,
                           const DataCube& roa, const DetectorModel& detector, const SpectralIndex& index,
                           const AttackConfig& cfg) {
  cfg.validate();
  if (initial.empty()) throw std::invalid_argument("optimize_cube: no cubes to optimize");
  if (train_set.empty()) throw std::invalid_argument("optimize_cube: empty training set D");
  if (initial.size() != cfg.layout.size()) {
    throw std::invalid_argument("optimize_cube: layout has " + std::to_string(cfg.layout.size()) + " cubes, got " +
                                std::to_string(initial.size()) + " parameter sets");
  }
  for (std::size_t c = 0; c < initial.size(); ++c) {
    check_index(initial[c], index);
    if (initial[c].rows() != cfg.layout[c].rows || initial[c].cols() != cfg.layout[c].cols) {
      throw std::invalid_argument("optimize_cube: cube " + std::to_string(c) + " size does not match the layout");
    }
  }

  AttackResult result;
  result.best = initial;
  result.last = initial;
  if (cfg.steps == 0) return result;

  const std::size_t cubes = initial.size();
  const int host_h = train_set.front().height();
  const int host_w = train_set.front().width();
  const Rng root(cfg.seed);
  const auto& bands = detector.arch.input_bands;
  const auto weights = detector_bindings<float>(detector);

  // Host subcubes restricted to the detector's bands are reused every step.
  std::vector<TensorF> host_sub(train_set.size());
  parallel_for(train_set.size(), cfg.threads,
               [&](std::size_t i) { host_sub[i] = extract_bands(train_set[i], bands); });

  std::vector<AdamState<float>> adam;
  for (const auto& p : initial) {
    adam.emplace_back(p.logits.shape(), AdamHyper{cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon});
  }
  std::vector<CubeParams> params = initial;
  std::deque<double> window;
  double window_sum = 0.0;
  double best_mean = std::numeric_limits<double>::infinity();
  const double alpha = cfg.effective_alpha();
  const double beta = cfg.effective_beta();

  for (int step = 0; step < cfg.steps; ++step) {
    const auto s = static_cast<std::uint64_t>(step);
    std::vector<TensorF> patches(cubes);
    for (std::size_t c = 0; c < cubes; ++c) patches[c] = realize_cube(params[c], index);

    // Per-item psi and its gradient with respect to each realized patch.
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    std::vector<double> confidences(batch);
    std::vector<double> psis(batch);
    std::vector<std::vector<TensorF>> dpatch(batch);
    for_each_chunk(batch, cfg.threads, [&](std::size_t begin, std::size_t end) {
      auto bindings = weights;
      for (std::size_t k = begin; k < end; ++k) {
        Rng item = root.fork({s, k});
        const auto host_index = static_cast<std::size_t>(item.uniform_int(0, static_cast<int>(train_set.size()) - 1));
        Rng trng = item.fork(1);
        const auto transforms = sample_transform(trng, cfg, host_h, host_w, cfg.layout);
        Graph<float> g;
        std::vector<NodeId> leaves;
        std::vector<std::string> wrt;
        for (std::size_t c = 0; c < cubes; ++c) {
          wrt.push_back("patch" + std::to_string(c));
          leaves.push_back(g.input(wrt.back(), patches[c].shape()));
          bindings.insert_or_assign(wrt.back(), patches[c]);
        }
        const auto host = g.constant(host_sub[host_index]);
        const auto embedded = add_embedding(g, host, leaves, transforms, bands);
        const auto logit = add_detector_logit(g, detector.arch, embedded, add_detector_leaves(g, detector.arch));
        g.mark_output("confidence", g.sigmoid(logit));
        g.mark_output("psi", add_psi(g, logit));
        auto vg = value_and_gradient(g, bindings, wrt, "psi");
        confidences[k] = vg.outputs.at("confidence").item();
        psis[k] = vg.outputs.at("psi").item();
        for (const auto& name : wrt) dpatch[k].push_back(std::move(vg.gradients.at(name)));
      }
    });

    // Cube-level graph: the linear term <dpsi/dP, P> carries the batch
    // gradient back through the parametrization alongside phi and omega.
    Graph<float> g;
    Bindings<float> bindings;
    std::vector<NodeId> lin, phis, omegas;
    std::vector<std::string> wrt;
    for (std::size_t c = 0; c < cubes; ++c) {
      Rng crop_rng = root.fork({s, batch + c});
      const auto crop = sample_crop(crop_rng, roa, cfg.layout[c]);
      const auto nodes = add_cube_terms(g, logits_name(c), params[c], index, roa, crop);
      TensorF gsum(patches[c].shape());
      for (std::size_t k = 0; k < batch; ++k) gsum.data() += dpatch[k][c].data();
      lin.push_back(g.sum(g.mul(nodes.patch, g.constant(std::move(gsum)))));
      phis.push_back(nodes.phi);
      omegas.push_back(nodes.omega);
      wrt.push_back(logits_name(c));
      bindings.emplace(wrt.back(), params[c].logits);
    }
    const auto phi = sum_nodes(g, phis);
    const auto omega = sum_nodes(g, omegas);
    g.mark_output("phi", phi);
    g.mark_output("omega", omega);
    g.mark_output("objective", g.add(sum_nodes(g, lin), g.add(g.scale(phi, alpha), g.scale(omega, beta))));
    auto vg = value_and_gradient(g, bindings, wrt, "objective");

    double psi_sum = 0.0;
    for (double p : psis) psi_sum += p;
    TraceRow row;
    row.step = step;
    row.loss = loss_total(psi_sum, vg.outputs.at("phi").item(), vg.outputs.at("omega").item(), alpha,
                          beta);
    double conf_sum = 0.0;
    for (double f : confidences) conf_sum += f;
    row.mean_conf = conf_sum / static_cast<double>(batch);

    bool ok = std::isfinite(row.loss.total);
    for (const auto& name : wrt) ok = ok && finite(vg.gradients.at(name));
    if (!ok) {
      throw AttackError("optimize_cube: non-finite loss or gradient at step " + std::to_string(step) + " (psi " +
                            std::to_string(row.loss.psi) + ", phi " + std::to_string(row.loss.phi) + ", omega " +
                            std::to_string(row.loss.omega) + ")",
                        params);
    }
    result.trace.push_back(row);

    window.push_back(row.loss.psi);
    window_sum += row.loss.psi;
    if (static_cast<int>(window.size()) > cfg.best_window) {
      window_sum -= window.front();
      window.pop_front();
    }
    const double running = window_sum / static_cast<double>(window.size());
    if (running < best_mean) {
      best_mean = running;
      result.best = params;
      result.best_step = step;
    }

    for (std::size_t c = 0; c < cubes; ++c) {
      auto [updated, state] = adam_step(params[c].logits, vg.gradients.at(wrt[c]), std::move(adam[c]));
      params[c].logits = std::move(updated);
      adam[c] = std::move(state);
    }
  }
  result.last = params;
  return result;
}

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,psi,phi,omega,total,mean_conf\n";
  for (const auto& r : trace) {
    out << r.step << ',' << csv::format(r.loss.psi) << ',' << csv::format(r.loss.phi) << ','
        << csv::format(r.loss.omega) << ',' << csv::format(r.loss.total) << ',' << csv::format(r.mean_conf) << '\n';
  }
}

}  // namespace advcube
