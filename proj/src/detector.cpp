#include "advcube/detector.hpp"

#include "advcube/config_io.hpp"
#include "advcube/parallel.hpp"
#include "advcube/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace advcube {

namespace {

std::string conv_name(std::size_t i, const char* part) { return "conv" + std::to_string(i) + "." + part; }
std::string dense_name(std::size_t i, const char* part) { return "dense" + std::to_string(i) + "." + part; }

int scaled_width(int base, double multiplier) {
  return std::max(1, static_cast<int>(std::lround(base * multiplier)));
}

}  // namespace

std::vector<ConvSpec> ArchConfig::effective_convs() const {
  std::vector<ConvSpec> out;
  for (auto spec : conv_specs) {
    spec.out_channels = scaled_width(spec.out_channels, width_multiplier);
    out.push_back(spec);
  }
  if (!out.empty()) {
    for (int i = 0; i < extra_conv_layers; ++i) out.push_back({out.back().out_channels, 3, 1, 1, false});
  }
  return out;
}

std::vector<int> ArchConfig::effective_dense() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < dense_specs.size(); ++i) {
    out.push_back(i + 1 == dense_specs.size() ? dense_specs[i] : scaled_width(dense_specs[i], width_multiplier));
  }
  return out;
}

void ArchConfig::validate() const {
  if (input_height < 1 || input_width < 1) throw std::invalid_argument("arch: input size must be positive");
  if (conv_specs.empty()) throw std::invalid_argument("arch: at least one conv layer is required");
  if (dense_specs.empty() || dense_specs.back() != 1) {
    throw std::invalid_argument("arch: the last dense layer must have width 1");
  }
  if (!(width_multiplier > 0.0)) throw std::invalid_argument("arch: width_multiplier must be positive");
  if (extra_conv_layers < 0) throw std::invalid_argument("arch: extra_conv_layers must be >= 0");
  for (int w : dense_specs) {
    if (w < 1) throw std::invalid_argument("arch: dense widths must be positive");
  }
  int h = input_height;
  int w = input_width;
  std::size_t layer = 0;
  for (const auto& c : effective_convs()) {
    if (c.out_channels < 1 || c.kernel < 1 || c.stride < 1 || c.padding < 0) {
      throw std::invalid_argument("arch: conv layer " + std::to_string(layer) + " has a non-positive size");
    }
    if (h + 2 * c.padding < c.kernel || w + 2 * c.padding < c.kernel) {
      throw std::invalid_argument("arch: conv layer " + std::to_string(layer) + " kernel does not fit a " +
                                  std::to_string(h) + "x" + std::to_string(w) + " input");
    }
    h = (h + 2 * c.padding - c.kernel) / c.stride + 1;
    w = (w + 2 * c.padding - c.kernel) / c.stride + 1;
    if (c.pool) {
      h /= 2;
      w /= 2;
    }
    if (h < 1 || w < 1) {
      throw std::invalid_argument("arch: pooled feature map smaller than 1x1 after conv layer " +
                                  std::to_string(layer));
    }
    ++layer;
  }
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ArchConfig& arch) {
  arch.validate();
  std::vector<std::pair<std::string, Shape>> out;
  int h = arch.input_height;
  int w = arch.input_width;
  int channels = arch.input_bands.size();
  const auto convs = arch.effective_convs();
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const auto& c = convs[i];
    out.emplace_back(conv_name(i, "weight"), Shape{c.kernel, c.kernel, channels, c.out_channels});
    out.emplace_back(conv_name(i, "bias"), Shape{c.out_channels});
    h = (h + 2 * c.padding - c.kernel) / c.stride + 1;
    w = (w + 2 * c.padding - c.kernel) / c.stride + 1;
    if (c.pool) {
      h /= 2;
      w /= 2;
    }
    channels = c.out_channels;
  }
  int n = h * w * channels;
  const auto dense = arch.effective_dense();
  for (std::size_t i = 0; i < dense.size(); ++i) {
    out.emplace_back(dense_name(i, "weight"), Shape{n, dense[i]});
    out.emplace_back(dense_name(i, "bias"), Shape{dense[i]});
    n = dense[i];
  }
  return out;
}

std::size_t parameter_count(const ArchConfig& arch) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_shapes(arch)) n += shape_size(shape);
  return n;
}

std::size_t DetectorModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : weights) n += t.size();
  return n;
}

std::vector<std::string> DetectorModel::conv_weight_names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : weights) {
    if (name.rfind("conv", 0) == 0) out.push_back(name);
  }
  return out;
}

std::vector<std::string> DetectorModel::dense_weight_names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : weights) {
    if (name.rfind("dense", 0) == 0) out.push_back(name);
  }
  return out;
}

DetectorModel build_detector(const ArchConfig& arch, std::uint64_t seed) {
  DetectorModel model;
  model.arch = arch;
  const Rng root(seed);
  std::uint64_t stream = 0;
  for (const auto& [name, shape] : parameter_shapes(arch)) {
    TensorF t(shape);
    if (shape.size() > 1) {
      // fan-in is every axis but the last: K*K*Cin for conv, n for dense
      const auto fan_in = static_cast<double>(shape_size(shape) / static_cast<std::size_t>(shape.back()));
      const double limit = std::sqrt(6.0 / fan_in);
      Rng rng = root.fork(stream);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-limit, limit));
    }
    ++stream;
    model.weights.emplace(name, std::move(t));
  }
  return model;
}

template <typename Scalar>
DetectorLeaves add_detector_leaves(Graph<Scalar>& graph, const ArchConfig& arch) {
  DetectorLeaves leaves;
  for (const auto& [name, shape] : parameter_shapes(arch)) leaves.emplace(name, graph.input(name, shape));
  return leaves;
}

template <typename Scalar>
NodeId add_detector_logit(Graph<Scalar>& graph, const ArchConfig& arch, NodeId input, const DetectorLeaves& leaves) {
  NodeId x = input;
  const auto convs = arch.effective_convs();
  for (std::size_t i = 0; i < convs.size(); ++i) {
    x = graph.conv2d(x, leaves.at(conv_name(i, "weight")), leaves.at(conv_name(i, "bias")), convs[i].stride,
                     convs[i].padding);
    x = graph.relu(x);
    if (convs[i].pool) x = graph.maxpool2(x);
  }
  const auto dense = arch.effective_dense();
  for (std::size_t i = 0; i < dense.size(); ++i) {
    x = graph.dense(x, leaves.at(dense_name(i, "weight")), leaves.at(dense_name(i, "bias")));
    if (i + 1 < dense.size()) x = graph.relu(x);
  }
  return x;
}

template <typename Scalar>
NodeId add_detector(Graph<Scalar>& graph, const ArchConfig& arch, NodeId input, const DetectorLeaves& leaves) {
  return graph.sigmoid(add_detector_logit(graph, arch, input, leaves));
}

template <typename Scalar>
NodeId add_detector(Graph<Scalar>& graph, const ArchConfig& arch, NodeId input) {
  const auto leaves = add_detector_leaves(graph, arch);
  return add_detector(graph, arch, input, leaves);
}

template <typename Scalar>
Bindings<Scalar> detector_bindings(const DetectorModel& model) {
  Bindings<Scalar> b;
  for (const auto& [name, t] : model.weights) {
    if constexpr (std::is_same_v<Scalar, float>) {
      b.emplace(name, t);
    } else {
      b.emplace(name, t.template cast<Scalar>());
    }
  }
  return b;
}

template DetectorLeaves add_detector_leaves<float>(Graph<float>&, const ArchConfig&);
template DetectorLeaves add_detector_leaves<double>(Graph<double>&, const ArchConfig&);
template NodeId add_detector_logit<float>(Graph<float>&, const ArchConfig&, NodeId, const DetectorLeaves&);
template NodeId add_detector_logit<double>(Graph<double>&, const ArchConfig&, NodeId, const DetectorLeaves&);
template NodeId add_detector<float>(Graph<float>&, const ArchConfig&, NodeId, const DetectorLeaves&);
template NodeId add_detector<double>(Graph<double>&, const ArchConfig&, NodeId, const DetectorLeaves&);
template NodeId add_detector<float>(Graph<float>&, const ArchConfig&, NodeId);
template NodeId add_detector<double>(Graph<double>&, const ArchConfig&, NodeId);
template Bindings<float> detector_bindings<float>(const DetectorModel&);
template Bindings<double> detector_bindings<double>(const DetectorModel&);

namespace {

Shape input_shape(const ArchConfig& arch) { return {arch.input_height, arch.input_width, arch.input_bands.size()}; }

Graph<float> scoring_graph(const ArchConfig& arch) {
  Graph<float> g;
  const auto x = g.input("x", input_shape(arch));
  g.mark_output("confidence", add_detector(g, arch, x));
  return g;
}

// Splits [0, n) into contiguous chunks, one per worker, so each worker can
// own a copy of the weight bindings and swap only the input per item.
template <typename Fn>
void for_each_chunked(std::size_t n, int threads, Fn&& fn) {
  const std::size_t chunks = std::min<std::size_t>(std::max(1, threads), std::max<std::size_t>(n, 1));
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = n * c / chunks;
    const std::size_t end = n * (c + 1) / chunks;
    fn(begin, end);
  });
}

}  // namespace

std::vector<double> forward_batch(const DetectorModel& model, std::span<const TensorF> subcubes, int threads) {
  const Shape expected = input_shape(model.arch);
  for (const auto& x : subcubes) {
    if (x.rank() == 3 && x.dim(2) != expected[2]) {
      throw std::invalid_argument("detector expects " + std::to_string(expected[2]) + " bands (" +
                                  model.arch.input_bands.to_string() + "), got " + std::to_string(x.dim(2)));
    }
    if (x.shape() != expected) {
      throw std::invalid_argument("detector expects input " + shape_string(expected) + ", got " +
                                  shape_string(x.shape()));
    }
  }
  const auto graph = scoring_graph(model.arch);
  const auto base = detector_bindings<float>(model);
  std::vector<double> out(subcubes.size());
  for_each_chunked(subcubes.size(), threads, [&](std::size_t begin, std::size_t end) {
    auto bindings = base;
    for (std::size_t i = begin; i < end; ++i) {
      bindings.insert_or_assign("x", subcubes[i]);
      out[i] = evaluate(graph, bindings).at("confidence").item();
    }
  });
  return out;
}

double forward(const DetectorModel& model, const TensorF& subcube) {
  return forward_batch(model, std::span<const TensorF>(&subcube, 1), 1).front();
}

std::vector<double> score_cubes(const DetectorModel& model, std::span<const DataCube> cubes, int threads) {
  const auto graph = scoring_graph(model.arch);
  const auto base = detector_bindings<float>(model);
  std::vector<double> out(cubes.size());
  for_each_chunked(cubes.size(), threads, [&](std::size_t begin, std::size_t end) {
    auto bindings = base;
    for (std::size_t i = begin; i < end; ++i) {
      bindings.insert_or_assign("x", extract_bands(cubes[i], model.arch.input_bands));
      out[i] = evaluate(graph, bindings).at("confidence").item();
    }
  });
  return out;
}

double loss_weighted_bce(double y, double confidence, double fp_weight) {
  const double p = std::clamp(confidence, kConfidenceEpsilon, 1.0 - kConfidenceEpsilon);
  return -y * std::log(p) - fp_weight * (1.0 - y) * std::log(1.0 - p);
}

template <typename Scalar>
NodeId add_weighted_bce(Graph<Scalar>& graph, NodeId confidence, double y, double fp_weight) {
  const auto p = graph.clamp(confidence, kConfidenceEpsilon, 1.0 - kConfidenceEpsilon);
  const auto pos = graph.scale(graph.log(p), -y);
  const auto neg = graph.scale(graph.log(graph.affine(p, -1.0, 1.0)), -fp_weight * (1.0 - y));
  return graph.add(pos, neg);
}

template <typename Scalar>
NodeId add_weighted_bce_logit(Graph<Scalar>& graph, NodeId logit, double y, double fp_weight) {
  const auto pos = graph.scale(graph.log_sigmoid(logit), -y);
  const auto neg = graph.scale(graph.log_sigmoid(graph.scale(logit, -1.0)), -fp_weight * (1.0 - y));
  return graph.add(pos, neg);
}

template NodeId add_weighted_bce<float>(Graph<float>&, NodeId, double, double);
template NodeId add_weighted_bce<double>(Graph<double>&, NodeId, double, double);
template NodeId add_weighted_bce_logit<float>(Graph<float>&, NodeId, double, double);
template NodeId add_weighted_bce_logit<double>(Graph<double>&, NodeId, double, double);

double lr_schedule(double eta0, int epoch, double decay) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch");
  return eta0 * std::exp(-decay * epoch);
}

void TrainConfig::validate() const {
  if (epochs_stage1 < 0 || epochs_stage2 < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (!(initial_lr > 0.0)) throw std::invalid_argument("train: initial_lr must be positive");
  if (decay_rate < 0.0) throw std::invalid_argument("train: decay_rate must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (fp_weight < 0.0) throw std::invalid_argument("train: fp_weight must be >= 0");
  for (double t : {threshold_stage1, threshold_stage2}) {
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("train: thresholds must lie in [0,1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("train: Adam betas must lie in [0,1)");
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("train: epsilon must be positive");
  if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
}

namespace {

TensorF flipped(const TensorF& x, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return x;
  const int h = x.dim(0);
  const int w = x.dim(1);
  const int c = x.dim(2);
  TensorF out(x.shape());
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const int si = vertical ? h - 1 - i : i;
      const int sj = horizontal ? w - 1 - j : j;
      for (int k = 0; k < c; ++k) out.at(i, j, k) = x.at(si, sj, k);
    }
  }
  return out;
}

bool all_finite(const TensorF& t) { return t.data().allFinite(); }

void train_stage(DetectorModel& model, const LabeledDataset& data, const TrainConfig& cfg, int stage, int epochs,
                 const std::vector<std::string>& trainable, const LabeledDataset* val) {
  if (epochs == 0) return;
  if (data.size() == 0) throw std::invalid_argument("train: stage " + std::to_string(stage) + " dataset is empty");
  const Rng root = Rng(cfg.seed).fork(static_cast<std::uint64_t>(stage));

  // Graphs for both labels; structure is shared, only the loss constant differs.
  std::array<Graph<float>, 2> graphs;
  for (int y = 0; y < 2; ++y) {
    auto& g = graphs[static_cast<std::size_t>(y)];
    const auto x = g.input("x", input_shape(model.arch));
    DetectorLeaves leaves = add_detector_leaves(g, model.arch);
    g.mark_output("loss", add_weighted_bce_logit(g, add_detector_logit(g, model.arch, x, leaves), y, cfg.fp_weight));
  }

  std::map<std::string, AdamState<float>> adam;
  for (const auto& name : trainable) {
    adam.emplace(name, AdamState<float>(model.weights.at(name).shape(),
                                        AdamHyper{cfg.initial_lr, cfg.beta1, cfg.beta2, cfg.epsilon}));
  }

  std::vector<std::size_t> order(data.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr = lr_schedule(cfg.initial_lr, epoch, cfg.decay_rate);
    for (auto& [name, state] : adam) state.hyper.lr = lr;
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = root.fork({1, static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), shuffle.engine());

    double loss_sum = 0.0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t count = end - start;
      std::vector<double> losses(count);
      std::vector<NamedTensors<float>> grads(count);
      const auto base = detector_bindings<float>(model);
      for_each_chunked(count, cfg.threads, [&](std::size_t b, std::size_t e) {
        auto bindings = base;
        for (std::size_t k = b; k < e; ++k) {
          const auto idx = order[start + k];
          const auto& item = data.items[idx];
          auto x = extract_bands(item.cube, model.arch.input_bands);
          if (cfg.flip_augment) {
            Rng flip = root.fork({2, static_cast<std::uint64_t>(epoch), idx});
            x = flipped(x, flip.bernoulli(0.5), flip.bernoulli(0.5));
          }
          bindings.insert_or_assign("x", std::move(x));
          const int y = item.label == Label::Cloudy ? 1 : 0;
          auto vg = value_and_gradient(graphs[static_cast<std::size_t>(y)], bindings, trainable, "loss");
          losses[k] = vg.outputs.at("loss").item();
          grads[k] = std::move(vg.gradients);
        }
      });

      double batch_loss = 0.0;
      for (double l : losses) batch_loss += l;
      loss_sum += batch_loss;
      for (const auto& name : trainable) {
        TensorF g(model.weights.at(name).shape());
        for (std::size_t k = 0; k < count; ++k) g.data() += grads[k].at(name).data();
        g.data() /= static_cast<float>(count);
        if (!std::isfinite(batch_loss) || !all_finite(g)) {
          throw TrainingError("non-finite loss or gradient in stage " + std::to_string(stage) + ", epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batch) + " (weight " + name +
                              ")");
        }
        auto [updated, state] = adam_step(model.weights.at(name), g, std::move(adam.at(name)));
        model.weights.at(name) = std::move(updated);
        adam.at(name) = std::move(state);
      }
    }
    EpochRecord rec;
    rec.stage = stage;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    rec.mean_loss = loss_sum / static_cast<double>(data.size());
    if (val) rec.val_accuracy = detector_accuracy(model, *val, cfg.threads);
    model.history.push_back(rec);
  }
}

}  // namespace

DetectorModel train_two_stage(DetectorModel model, const LabeledDataset& th30, const LabeledDataset& th70,
                              const TrainConfig& cfg, const LabeledDataset* val) {
  cfg.validate();
  model.arch.validate();
  train_stage(model, th30, cfg, 1, cfg.epochs_stage1, [&] {
    std::vector<std::string> all;
    for (const auto& [name, t] : model.weights) all.push_back(name);
    return all;
  }(), val);
  model.feature_frozen = true;
  train_stage(model, th70, cfg, 2, cfg.epochs_stage2, model.dense_weight_names(), val);
  return model;
}

double detector_accuracy(const DetectorModel& model, const LabeledDataset& data, int threads) {
  if (data.size() == 0) throw std::invalid_argument("detector_accuracy: empty dataset");
  std::vector<DataCube> cubes;
  cubes.reserve(data.size());
  for (const auto& item : data.items) cubes.push_back(item.cube);
  const auto scores = score_cubes(model, cubes, threads);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool cloudy = scores[i] > 0.5;
    correct += cloudy == (data.items[i].label == Label::Cloudy);
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("model file truncated reading " + what);
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

void put_f32(std::ostream& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

float get_f32(std::istream& in, const std::string& what) {
  const std::uint32_t v = get_u32(in, what);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace

void save_model(const DetectorModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  nlohmann::json header;
  header["arch"] = model.arch;
  header["feature_frozen"] = model.feature_frozen;
  auto& hist = header["history"] = nlohmann::json::array();
  for (const auto& r : model.history) {
    hist.push_back({{"stage", r.stage},
                    {"epoch", r.epoch},
                    {"learning_rate", r.learning_rate},
                    {"mean_loss", r.mean_loss},
                    {"val_accuracy", r.val_accuracy}});
  }
  const auto text = header.dump();
  out.write("MSDM", 4);
  put_u32(out, kModelFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_u32(out, static_cast<std::uint32_t>(model.weights.size()));
  for (const auto& [name, t] : model.weights) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.size(); ++i) put_f32(out, t[i]);
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

DetectorModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "MSDM") {
    throw std::runtime_error(path.string() + ": bad magic, not a detector model");
  }
  const auto version = get_u32(in, "version");
  if (version != kModelFormatVersion) {
    throw std::runtime_error(path.string() + ": unsupported model format version " + std::to_string(version));
  }
  const auto len = get_u32(in, "header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw std::runtime_error("model file truncated reading header");
  DetectorModel model;
  const auto header = nlohmann::json::parse(text);
  model.arch = header.at("arch").get<ArchConfig>();
  model.feature_frozen = header.value("feature_frozen", false);
  if (auto it = header.find("history"); it != header.end()) {
    for (const auto& r : *it) {
      model.history.push_back({r.at("stage").get<int>(), r.at("epoch").get<int>(), r.at("learning_rate").get<double>(),
                               r.at("mean_loss").get<double>(), r.at("val_accuracy").get<double>()});
    }
  }
  const auto count = get_u32(in, "tensor count");
  for (std::uint32_t n = 0; n < count; ++n) {
    const auto name_len = get_u32(in, "name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw std::runtime_error("model file truncated reading tensor name");
    const auto rank = get_u32(in, name + " rank");
    if (rank == 0 || rank > 8) throw std::runtime_error("model file: tensor " + name + " has invalid rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(get_u32(in, name + " shape")));
    TensorF t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = get_f32(in, name + " payload");
    model.weights.emplace(std::move(name), std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("model file has trailing bytes");
  for (const auto& [name, shape] : parameter_shapes(model.arch)) {
    auto it = model.weights.find(name);
    if (it == model.weights.end()) throw std::runtime_error("model file is missing tensor " + name);
    if (it->second.shape() != shape) {
      throw std::runtime_error("model tensor " + name + " has shape " + shape_string(it->second.shape()) +
                               ", architecture expects " + shape_string(shape));
    }
  }
  if (model.weights.size() != parameter_shapes(model.arch).size()) {
    throw std::runtime_error("model file holds tensors not in its architecture");
  }
  return model;
}

std::uint64_t weights_hash(const DetectorModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : model.weights) {
    mix(name.data(), name.size());
    for (int d : t.shape()) mix(&d, sizeof d);
    mix(t.raw(), t.size() * sizeof(float));
  }
  return h;
}

}  // namespace advcube
