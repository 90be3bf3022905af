#include "advcube/config_io.hpp"

#include <fstream>

namespace advcube {

using nlohmann::json;

namespace {

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok |= it.key() == k;
    if (!ok) throw std::invalid_argument(std::string(what) + ": unknown field '" + it.key() + "'");
  }
}

}  // namespace

void to_json(json& j, const ConvSpec& c) {
  j = json{{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride},
           {"padding", c.padding},           {"pool", c.pool}};
}

void from_json(const json& j, ConvSpec& c) {
  reject_unknown(j, {"out_channels", "kernel", "stride", "padding", "pool"}, "conv spec");
  get_if(j, "out_channels", c.out_channels);
  get_if(j, "kernel", c.kernel);
  get_if(j, "stride", c.stride);
  get_if(j, "padding", c.padding);
  get_if(j, "pool", c.pool);
}

void to_json(json& j, const ArchConfig& a) {
  j = json{{"input_bands", a.input_bands.indices()},
           {"input_height", a.input_height},
           {"input_width", a.input_width},
           {"conv_specs", a.conv_specs},
           {"dense_specs", a.dense_specs},
           {"width_multiplier", a.width_multiplier},
           {"extra_conv_layers", a.extra_conv_layers}};
}

void from_json(const json& j, ArchConfig& a) {
  reject_unknown(j,
                 {"input_bands", "input_height", "input_width", "conv_specs", "dense_specs", "width_multiplier",
                  "extra_conv_layers"},
                 "arch config");
  if (auto it = j.find("input_bands"); it != j.end()) a.input_bands = BandSubset(it->get<std::vector<int>>());
  get_if(j, "input_height", a.input_height);
  get_if(j, "input_width", a.input_width);
  get_if(j, "conv_specs", a.conv_specs);
  get_if(j, "dense_specs", a.dense_specs);
  get_if(j, "width_multiplier", a.width_multiplier);
  get_if(j, "extra_conv_layers", a.extra_conv_layers);
  a.validate();
}

void to_json(json& j, const TrainConfig& t) {
  j = json{{"epochs_stage1", t.epochs_stage1},
           {"epochs_stage2", t.epochs_stage2},
           {"initial_lr", t.initial_lr},
           {"decay_rate", t.decay_rate},
           {"batch_size", t.batch_size},
           {"seed", t.seed},
           {"fp_weight", t.fp_weight},
           {"threshold_stage1", t.threshold_stage1},
           {"threshold_stage2", t.threshold_stage2},
           {"flip_augment", t.flip_augment},
           {"beta1", t.beta1},
           {"beta2", t.beta2},
           {"epsilon", t.epsilon}};
}

void from_json(const json& j, TrainConfig& t) {
  reject_unknown(j,
                 {"epochs_stage1", "epochs_stage2", "initial_lr", "decay_rate", "batch_size", "seed", "fp_weight",
                  "threshold_stage1", "threshold_stage2", "flip_augment", "beta1", "beta2", "epsilon"},
                 "train config");
  get_if(j, "epochs_stage1", t.epochs_stage1);
  get_if(j, "epochs_stage2", t.epochs_stage2);
  get_if(j, "initial_lr", t.initial_lr);
  get_if(j, "decay_rate", t.decay_rate);
  get_if(j, "batch_size", t.batch_size);
  get_if(j, "seed", t.seed);
  get_if(j, "fp_weight", t.fp_weight);
  get_if(j, "threshold_stage1", t.threshold_stage1);
  get_if(j, "threshold_stage2", t.threshold_stage2);
  get_if(j, "flip_augment", t.flip_augment);
  get_if(j, "beta1", t.beta1);
  get_if(j, "beta2", t.beta2);
  get_if(j, "epsilon", t.epsilon);
  t.validate();
}

void to_json(json& j, const ScenegenConfig& s) {
  j = json{{"size", s.size},
           {"cloud_density", s.density_min == s.density_max ? json(s.density_min)
                                                            : json::array({s.density_min, s.density_max})},
           {"terrain", s.terrain ? to_string(*s.terrain) : std::string("random")},
           {"seed", s.seed},
           {"counts", s.count},
           {"cloud_margin", s.cloud_margin}};
}

void from_json(const json& j, ScenegenConfig& s) {
  reject_unknown(j, {"size", "cloud_density", "terrain", "seed", "counts", "cloud_margin"}, "scenegen config");
  get_if(j, "size", s.size);
  if (auto it = j.find("cloud_density"); it != j.end()) {
    if (it->is_array()) {
      const auto range = it->get<std::vector<double>>();
      if (range.size() != 2) throw std::invalid_argument("cloud_density range must have two entries");
      s.density_min = range[0];
      s.density_max = range[1];
    } else {
      s.density_min = s.density_max = it->get<double>();
    }
  }
  if (auto it = j.find("terrain"); it != j.end()) {
    const auto name = it->get<std::string>();
    s.terrain = name == "random" ? std::nullopt : std::optional<TerrainKind>(terrain_from_string(name));
  }
  get_if(j, "seed", s.seed);
  get_if(j, "counts", s.count);
  get_if(j, "cloud_margin", s.cloud_margin);
  s.validate();
}

void to_json(json& j, const AttackConfig& a) {
  json layout = json::array();
  for (const auto& c : a.layout) layout.push_back({c.rows, c.cols});
  j = json{{"alpha", a.alpha},
           {"beta", a.beta},
           {"loss", a.terms.to_string()},
           {"parametrization", to_string(a.parametrization)},
           {"steps", a.steps},
           {"lr", a.lr},
           {"beta1", a.beta1},
           {"beta2", a.beta2},
           {"epsilon", a.epsilon},
           {"batch_size", a.batch_size},
           {"init_sigma", a.init_sigma},
           {"rotate", a.rotate},
           {"scale_delta", a.scale_delta},
           {"noise_sigma", a.noise_sigma},
           {"noise_clip", a.noise_clip},
           {"corruption_prob", a.corruption_prob},
           {"layout", layout},
           {"proximity", to_string(a.proximity)},
           {"best_window", a.best_window},
           {"seed", a.seed}};
}

void from_json(const json& j, AttackConfig& a) {
  reject_unknown(j,
                 {"alpha", "beta", "loss", "parametrization", "steps", "lr", "beta1", "beta2", "epsilon", "batch_size",
                  "init_sigma", "rotate", "scale_delta", "noise_sigma", "noise_clip", "corruption_prob", "layout",
                  "proximity", "best_window", "seed"},
                 "attack config");
  get_if(j, "alpha", a.alpha);
  get_if(j, "beta", a.beta);
  if (auto it = j.find("loss"); it != j.end()) a.terms = LossTerms::parse(it->get<std::string>());
  if (auto it = j.find("parametrization"); it != j.end()) {
    a.parametrization = parametrization_from_string(it->get<std::string>());
  }
  get_if(j, "steps", a.steps);
  get_if(j, "lr", a.lr);
  get_if(j, "beta1", a.beta1);
  get_if(j, "beta2", a.beta2);
  get_if(j, "epsilon", a.epsilon);
  get_if(j, "batch_size", a.batch_size);
  get_if(j, "init_sigma", a.init_sigma);
  get_if(j, "rotate", a.rotate);
  get_if(j, "scale_delta", a.scale_delta);
  get_if(j, "noise_sigma", a.noise_sigma);
  get_if(j, "noise_clip", a.noise_clip);
  get_if(j, "corruption_prob", a.corruption_prob);
  if (auto it = j.find("layout"); it != j.end()) {
    a.layout.clear();
    for (const auto& c : *it) {
      const auto dims = c.get<std::vector<int>>();
      if (dims.size() != 2) throw std::invalid_argument("attack config: layout entries are [rows, cols]");
      a.layout.push_back({dims[0], dims[1]});
    }
  }
  if (auto it = j.find("proximity"); it != j.end()) a.proximity = proximity_from_string(it->get<std::string>());
  get_if(j, "best_window", a.best_window);
  get_if(j, "seed", a.seed);
  a.validate();
}

void to_json(json& j, const ExperimentGrid& g) {
  json rows = json::array();
  for (const auto& r : g.rows) {
    rows.push_back({{"name", r.name}, {"detector", r.detector}, {"baseline", r.baseline}, {"seeds", r.seeds},
                    {"attack", r.config}});
  }
  j = json{{"placement", to_string(g.placement)}, {"eval_seed", g.eval_seed}, {"rows", rows}};
}

void from_json(const json& j, ExperimentGrid& g) {
  reject_unknown(j, {"placement", "eval_seed", "attack", "rows"}, "grid config");
  if (auto it = j.find("placement"); it != j.end()) g.placement = placement_from_string(it->get<std::string>());
  get_if(j, "eval_seed", g.eval_seed);
  // Rows patch the grid-level attack settings.
  const json shared = j.value("attack", json::object());
  g.rows.clear();
  for (const auto& r : j.at("rows")) {
    reject_unknown(r, {"name", "detector", "baseline", "seeds", "attack"}, "grid row");
    ExperimentRow row;
    row.name = r.at("name").get<std::string>();
    get_if(r, "detector", row.detector);
    get_if(r, "baseline", row.baseline);
    get_if(r, "seeds", row.seeds);
    json attack = shared;
    attack.merge_patch(r.value("attack", json::object()));
    row.config = attack.get<AttackConfig>();
    g.rows.push_back(std::move(row));
  }
  g.validate();
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace advcube
