#include "advcube/cli.hpp"

#include "advcube/attack.hpp"
#include "advcube/attack_sets.hpp"
#include "advcube/config_io.hpp"
#include "advcube/csv.hpp"
#include "advcube/eval.hpp"
#include "advcube/hash.hpp"
#include "advcube/parallel.hpp"
#include "advcube/scenegen.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#ifndef ADVCUBE_VERSION
#define ADVCUBE_VERSION "0.0.0"
#endif

namespace advcube::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void log(const std::string& msg) { std::cerr << "advcube: " << msg << '\n'; }

/// Inputs and outputs of one invocation, written next to the primary output.
struct RunManifest {
  RunManifest(std::string cmd, std::vector<std::string> argv) : command(std::move(cmd)), args(std::move(argv)) {}

  std::string command;
  std::vector<std::string> args;
  std::map<std::string, std::string> configs;
  std::optional<std::uint64_t> seed;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;

  void write(const fs::path& path) const {
    json in = json::object(), out = json::object(), cfg = json::object();
    for (const auto& [key, p] : configs) cfg[key] = {{"path", p}, {"sha256", sha256_file(p)}};
    for (const auto& p : inputs) in[p.string()] = sha256_file(p);
    for (const auto& p : outputs) out[p.string()] = sha256_file(p);
    json j = {{"command", command}, {"args", args},    {"configs", cfg},
              {"inputs", in},       {"outputs", out}, {"tool_version", ADVCUBE_VERSION}};
    j["seed"] = seed ? json(*seed) : json(nullptr);
    write_json(path, j);
  }
};

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

fs::path manifest_path(const fs::path& primary) {
  if (fs::is_directory(primary)) return primary / "manifest.json";
  return with_suffix(primary, ".manifest.json");
}

SpectralIndex load_index(const std::string& path) {
  return path.empty() ? build_spectral_index(synth_material_library(80, 11), am15_solar_fixture(), sentinel2a_bands())
                      : read_spectral_index(path);
}

std::vector<fs::path> dataset_files(const fs::path& dir) {
  std::vector<fs::path> files = {dir / "dataset.json", dir / "labels.csv"};
  for (const auto& row : csv::read(dir / "labels.csv")) {
    if (row.line > 1 && !row.fields.empty()) files.push_back(dir / row.fields[0]);
  }
  return files;
}

// Flags shared by the subcommands that rebuild the attack sets D, E and T.
struct SetFlags {
  std::string scenegen;
  int train_count = 100;
  int test_count = 100;
  std::string roa = "hills";

  void add(CLI::App* app) {
    app->add_option("--scenegen", scenegen, "Scene generator config (JSON) used to draw D and E")->required();
    app->add_option("--train-count", train_count, "Number of cubes in the attack training set D")
        ->capture_default_str();
    app->add_option("--test-count", test_count, "Number of cubes in the attack test set E")->capture_default_str();
    app->add_option("--roa", roa, "Terrain of the region of attack T: hills, desert or mixed")->capture_default_str();
  }

  AttackSets build(const DetectorModel& model, int threads, RunManifest& m) const {
    m.configs["scenegen"] = scenegen;
    auto gen = load_config<ScenegenConfig>(scenegen);
    gen.size = model.arch.input_height;
    return build_attack_sets(gen, model, train_count, test_count, terrain_from_string(roa), threads);
  }
};

struct Context {
  int threads = default_threads();
  std::function<void()> action;
  std::vector<std::string> args;
};

void add_threads(CLI::App* app, Context& ctx) {
  app->add_option("--threads", ctx.threads, "Worker threads (default: hardware concurrency)");
}

void add_build_index(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("build-index", "Build the spectral index C from material, solar and band tables");
  auto materials = std::make_shared<std::string>();
  auto solar = std::make_shared<std::string>();
  auto bands = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  app->add_option("--materials", *materials, "Material library CSV (default: built-in 80-material synthetic library)");
  app->add_option("--solar", *solar, "Solar spectrum CSV (default: built-in AM1.5-shaped fixture)");
  app->add_option("--bands", *bands, "Band table CSV (default: built-in Sentinel-2A table)");
  app->add_option("--out", *out, "Output spectral index CSV")->required();
  add_threads(app, ctx);
  app->callback([=, &ctx] {
    ctx.action = [=, &ctx] {
      RunManifest m{"build-index", ctx.args};
      const auto lib = materials->empty() ? synth_material_library(80, 11) : load_material_library(*materials);
      const auto sol = solar->empty() ? am15_solar_fixture() : load_solar_spectrum(*solar);
      const auto tab = bands->empty() ? sentinel2a_bands() : load_band_table(*bands);
      for (const auto* p : {materials.get(), solar.get(), bands.get()}) {
        if (!p->empty()) m.inputs.emplace_back(*p);
      }
      const auto index = build_spectral_index(lib, sol, tab);
      write_spectral_index(*out, index);
      m.outputs.emplace_back(*out);
      m.write(manifest_path(*out));
      log("wrote " + std::to_string(index.materials()) + " index columns to " + *out);
    };
  });
}

void add_gen_data(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("gen-data", "Generate a labelled synthetic dataset directory");
  auto config = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto threshold = std::make_shared<double>(0.30);
  auto split = std::make_shared<std::string>("train");
  app->add_option("--config", *config, "Scene generator config (JSON)")->required();
  app->add_option("--out", *out, "Output directory for MSC1 cubes, labels.csv and dataset.json")->required();
  app->add_option("--threshold", *threshold, "Cloud fraction above which a cube is labelled cloudy")
      ->capture_default_str();
  app->add_option("--split", *split, "Split tag stored with the dataset: train, val or test")->capture_default_str();
  add_threads(app, ctx);
  app->callback([=, &ctx] {
    ctx.action = [=, &ctx] {
      RunManifest m{"gen-data", ctx.args};
      m.configs["scenegen"] = *config;
      const auto gen = load_config<ScenegenConfig>(*config);
      m.seed = gen.seed;
      const auto data = build_labeled_dataset(gen, *threshold, split_from_string(*split), ctx.threads);
      write_dataset(data, *out);
      m.outputs = dataset_files(*out);
      m.write(manifest_path(*out));
      log("wrote " + std::to_string(data.size()) + " cubes (" + std::to_string(data.count(Label::Cloudy)) +
          " cloudy) to " + *out);
    };
  });
}

void write_history_csv(const DetectorModel& model, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "stage,epoch,learning_rate,mean_loss,val_accuracy\n";
  for (const auto& r : model.history) {
    out << r.stage << ',' << r.epoch << ',' << csv::format(r.learning_rate) << ',' << csv::format(r.mean_loss) << ','
        << csv::format(r.val_accuracy) << '\n';
  }
}

void add_train(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("train", "Two-stage detector training on TH30 then TH70");
  auto th30 = std::make_shared<std::string>();
  auto th70 = std::make_shared<std::string>();
  auto val = std::make_shared<std::string>();
  auto arch = std::make_shared<std::string>();
  auto config = std::make_shared<std::string>();
  auto init_seed = std::make_shared<std::uint64_t>(0);
  auto out = std::make_shared<std::string>();
  app->add_option("--th30", *th30, "Stage-1 dataset directory (relabelled at the stage-1 threshold)")->required();
  app->add_option("--th70", *th70, "Stage-2 dataset directory (relabelled at the stage-2 threshold)")->required();
  app->add_option("--val", *val, "Optional validation dataset directory, scored at the stage-2 threshold");
  app->add_option("--arch", *arch, "Architecture config (JSON); default architecture when omitted");
  app->add_option("--config", *config, "Training config (JSON); defaults when omitted");
  app->add_option("--init-seed", *init_seed, "Seed for the initial detector weights")->capture_default_str();
  app->add_option("--out", *out, "Output model container (MSDM); history goes to <out>.history.csv")->required();
  add_threads(app, ctx);
  app->callback([=, &ctx] {
    ctx.action = [=, &ctx] {
      RunManifest m{"train", ctx.args};
      ArchConfig a;
      if (!arch->empty()) {
        a = load_config<ArchConfig>(*arch);
        m.configs["arch"] = *arch;
      }
      TrainConfig t;
      if (!config->empty()) {
        t = load_config<TrainConfig>(*config);
        m.configs["train"] = *config;
      }
      t.threads = ctx.threads;
      m.seed = t.seed;
      const auto d30 = read_dataset(*th30).relabeled(t.threshold_stage1);
      const auto d70 = read_dataset(*th70).relabeled(t.threshold_stage2);
      m.inputs = dataset_files(*th30);
      for (auto& f : dataset_files(*th70)) m.inputs.push_back(f);
      std::optional<LabeledDataset> v;
      if (!val->empty()) {
        v = read_dataset(*val).relabeled(t.threshold_stage2);
        for (auto& f : dataset_files(*val)) m.inputs.push_back(f);
      }
      log("training " + std::to_string(parameter_count(a)) + " parameters on " + std::to_string(d30.size()) + " + " +
          std::to_string(d70.size()) + " cubes");
      const auto model = train_two_stage(build_detector(a, *init_seed), d30, d70, t, v ? &*v : nullptr);
      save_model(model, *out);
      const auto history = with_suffix(*out, ".history.csv");
      write_history_csv(model, history);
      m.outputs = {*out, history};
      m.write(manifest_path(*out));
      if (v) log("validation accuracy " + csv::format(detector_accuracy(model, *v, ctx.threads)));
    };
  });
}

std::vector<fs::path> cube_outputs(const fs::path& out, std::size_t n) {
  if (n == 1) return {out};
  std::vector<fs::path> paths;
  for (std::size_t k = 0; k < n; ++k) {
    auto p = out;
    p.replace_filename(out.stem().string() + "_" + std::to_string(k) + out.extension().string());
    paths.push_back(p);
  }
  return paths;
}

void add_attack(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("attack", "Optimise adversarial cubes against a trained detector");
  auto model_path = std::make_shared<std::string>();
  auto index_path = std::make_shared<std::string>();
  auto config = std::make_shared<std::string>();
  auto loss = std::make_shared<std::string>();
  auto seed = std::make_shared<std::optional<std::uint64_t>>();
  auto steps = std::make_shared<std::optional<int>>();
  auto out = std::make_shared<std::string>();
  auto sets = std::make_shared<SetFlags>();
  app->add_option("--model", *model_path, "Trained detector (MSDM)")->required();
  app->add_option("--index", *index_path, "Spectral index CSV (default: built-in synthetic index)");
  app->add_option("--config", *config, "Attack config (JSON); defaults when omitted");
  app->add_option("--loss", *loss, "Loss terms overriding the config: psi, psi+nps, psi+cloak or psi+nps+cloak");
  app->add_option("--seed", *seed, "Attack seed overriding the config");
  app->add_option("--steps", *steps, "Optimisation steps overriding the config");
  app->add_option("--out", *out,
                  "Output MSC1 cube; also writes <out>.json, <out>.trace.csv and <out>.roa.msc1 (numbered _k "
                  "files for multi-cube layouts)")
      ->required();
  sets->add(app);
  add_threads(app, ctx);
  app->callback([=, &ctx] {
    ctx.action = [=, &ctx] {
      RunManifest m{"attack", ctx.args};
      AttackConfig cfg;
      if (!config->empty()) {
        cfg = load_config<AttackConfig>(*config);
        m.configs["attack"] = *config;
      }
      if (!loss->empty()) cfg.terms = LossTerms::parse(*loss);
      if (*seed) cfg.seed = **seed;
      if (*steps) cfg.steps = **steps;
      cfg.threads = ctx.threads;
      cfg.validate();
      m.seed = cfg.seed;
      const auto model = load_model(*model_path);
      m.inputs.emplace_back(*model_path);
      const auto index = load_index(*index_path);
      if (!index_path->empty()) m.inputs.emplace_back(*index_path);
      const auto s = sets->build(model, ctx.threads, m);
      log("attack sets: |D| = " + std::to_string(s.train.size()) + ", |E| = " + std::to_string(s.test.size()));

      std::vector<CubeParams> init;
      for (std::size_t c = 0; c < cfg.layout.size(); ++c) {
        init.push_back(init_params(cfg.layout[c].rows, cfg.layout[c].cols, index.materials(),
                                   Rng(cfg.seed).fork(c).next_u64(), cfg.init_sigma, cfg.parametrization));
      }
      const auto before = weights_hash(model);
      const auto result = optimize_cube(init, s.train, s.roa, model, index, cfg);
      if (weights_hash(model) != before) throw std::logic_error("detector weights changed during the attack");

      const fs::path base(*out);
      const auto files = cube_outputs(base, result.best.size());
      json cubes = json::array();
      for (std::size_t c = 0; c < files.size(); ++c) {
        write_cube(DataCube(realize_cube(result.best[c], index)), files[c]);
        const auto& p = result.best[c];
        cubes.push_back({{"file", files[c].filename().string()},
                         {"logits_shape", p.logits.shape()},
                         {"logits", std::vector<float>(p.logits.data().data(), p.logits.data().data() + p.logits.size())}});
        m.outputs.push_back(files[c]);
      }
      const auto roa_file = with_suffix(base, ".roa.msc1");
      write_cube(s.roa, roa_file);
      const auto trace = with_suffix(base, ".trace.csv");
      write_trace_csv(result.trace, trace);
      const auto sidecar = with_suffix(base, ".json");
      write_json(sidecar, {{"seed", cfg.seed},
                           {"config_hash", config_hash(cfg)},
                           {"config", cfg},
                           {"parametrization", to_string(cfg.parametrization)},
                           {"best_step", result.best_step},
                           {"roa_seed", s.roa_seed},
                           {"cubes", cubes}});
      m.outputs.push_back(roa_file);
      m.outputs.push_back(trace);
      m.outputs.push_back(sidecar);
      m.write(manifest_path(base));
      log("best step " + std::to_string(result.best_step) + "; wrote " + base.string());
    };
  });
}

void add_evaluate(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("evaluate", "Score the attack sets with optimised cubes embedded");
  auto model_path = std::make_shared<std::string>();
  auto cubes = std::make_shared<std::vector<std::string>>();
  auto config = std::make_shared<std::string>();
  auto placement = std::make_shared<std::string>("random");
  auto eval_seed = std::make_shared<std::uint64_t>(0);
  auto name = std::make_shared<std::string>("evaluate");
  auto report = std::make_shared<std::string>();
  auto confidences = std::make_shared<std::string>();
  auto sets = std::make_shared<SetFlags>();
  app->add_option("--model", *model_path, "Trained detector (MSDM)")->required();
  app->add_option("--cube", *cubes, "Optimised MSC1 cube; repeat for multi-cube layouts; omit for the clean baseline");
  app->add_option("--config", *config, "Attack config (JSON) supplying the evaluation transforms");
  app->add_option("--placement", *placement, "Evaluation placement: random or centered")->capture_default_str();
  app->add_option("--eval-seed", *eval_seed, "Seed of the evaluation transforms")->capture_default_str();
  app->add_option("--name", *name, "Row name written to the report")->capture_default_str();
  app->add_option("--report", *report, "Output report CSV")->required();
  app->add_option("--confidences", *confidences, "Optional CSV of per-item confidences");
  sets->add(app);
  add_threads(app, ctx);
  app->callback([=, &ctx] {
    ctx.action = [=, &ctx] {
      RunManifest m{"evaluate", ctx.args};
      AttackConfig cfg;
      if (!config->empty()) {
        cfg = load_config<AttackConfig>(*config);
        m.configs["attack"] = *config;
      }
      m.seed = *eval_seed;
      const auto model = load_model(*model_path);
      m.inputs.emplace_back(*model_path);
      std::vector<TensorF> patches;
      for (const auto& c : *cubes) {
        patches.push_back(read_cube(c).data);
        m.inputs.emplace_back(c);
      }
      const auto s = sets->build(model, ctx.threads, m);
      const auto r =
          evaluate_attack(model, s, patches, cfg, placement_from_string(*placement), *eval_seed, ctx.threads);
      GridRowResult row{*name, r, "", patches.empty() ? 0 : 1};
      write_grid_csv({row}, *report);
      m.outputs.emplace_back(*report);
      if (!confidences->empty()) {
        std::ofstream out(*confidences, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + *confidences);
        out << "set,item,confidence\n";
        for (std::size_t i = 0; i < r.confidences_train.size(); ++i) {
          out << "train," << i << ',' << csv::format(r.confidences_train[i]) << '\n';
        }
        for (std::size_t i = 0; i < r.confidences_test.size(); ++i) {
          out << "test," << i << ',' << csv::format(r.confidences_test[i]) << '\n';
        }
        out.close();
        m.outputs.emplace_back(*confidences);
      }
      m.write(manifest_path(*report));
      log("accuracy train " + csv::format(r.accuracy_train) + " test " + csv::format(r.accuracy_test) +
          "; cloudy train " + csv::format(r.cloudy_train) + " test " + csv::format(r.cloudy_test));
    };
  });
}

void add_grid(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("grid", "Run an experiment grid and write the summary table");
  auto config = std::make_shared<std::string>();
  auto index_path = std::make_shared<std::string>();
  auto models = std::make_shared<std::vector<std::string>>();
  auto out = std::make_shared<std::string>();
  auto sets = std::make_shared<SetFlags>();
  app->add_option("--config", *config, "Experiment grid config (JSON)")->required();
  app->add_option("--index", *index_path, "Spectral index CSV (default: built-in synthetic index)");
  app->add_option("--model", *models, "Detector as name=path.msdm; repeat for each detector the grid names")
      ->required();
  app->add_option("--out", *out, "Output report CSV")->required();
  sets->add(app);
  add_threads(app, ctx);
  app->callback([=, &ctx] {
    ctx.action = [=, &ctx] {
      RunManifest m{"grid", ctx.args};
      m.configs["grid"] = *config;
      const auto grid = load_config<ExperimentGrid>(*config);
      m.seed = grid.eval_seed;
      GridAssets assets;
      assets.index = load_index(*index_path);
      if (!index_path->empty()) m.inputs.emplace_back(*index_path);
      for (const auto& spec : *models) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--model expects name=path, got " + spec);
        const auto name = spec.substr(0, eq), path = spec.substr(eq + 1);
        auto model = load_model(path);
        m.inputs.emplace_back(path);
        auto s = sets->build(model, ctx.threads, m);
        assets.detectors.emplace(name, DetectorAssets{std::move(model), std::move(s)});
      }
      const auto rows = run_grid(grid, assets, ctx.threads);
      write_grid_csv(rows, *out);
      m.outputs.emplace_back(*out);
      m.write(manifest_path(*out));
      bool failed = false;
      for (const auto& r : rows) {
        if (!r.report) {
          log("row " + r.name + " failed: " + r.error);
          failed = true;
        }
      }
      if (failed) throw std::runtime_error("one or more grid rows failed");
    };
  });
}

void add_render(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("render", "Render a cube and its placement in the ROA as PNG images");
  auto cube = std::make_shared<std::string>();
  auto roa = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();
  auto stem = std::make_shared<std::string>("cube");
  app->add_option("--cube", *cube, "Optimised MSC1 cube")->required();
  app->add_option("--roa", *roa, "Region-of-attack MSC1 cube (e.g. <attack out>.roa.msc1)")->required();
  app->add_option("--out-dir", *out_dir, "Directory for the PNG files")->required();
  app->add_option("--stem", *stem, "File name stem of the PNG files")->capture_default_str();
  add_threads(app, ctx);
  app->callback([=, &ctx] {
    ctx.action = [=, &ctx] {
      RunManifest m{"render", ctx.args};
      m.inputs = {*cube, *roa};
      const auto files = render_cube_images(read_cube(*cube).data, read_cube(*roa), *out_dir, *stem);
      m.outputs = {files.cube_visible, files.cube_false_colour, files.roa_visible};
      m.write(fs::path(*out_dir) / (*stem + ".manifest.json"));
      log("wrote images to " + *out_dir);
    };
  });
}

std::unique_ptr<CLI::App> make_app(Context& ctx) {
  auto app = std::make_unique<CLI::App>("Adversarial cubes against a multispectral cloud detector", "advcube");
  app->require_subcommand(1);
  add_build_index(*app, ctx);
  add_gen_data(*app, ctx);
  add_train(*app, ctx);
  add_attack(*app, ctx);
  add_evaluate(*app, ctx);
  add_grid(*app, ctx);
  add_render(*app, ctx);
  return app;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  Context ctx;
  ctx.args = args;
  auto app = make_app(ctx);
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app->parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app->exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app->exit(e);
  } catch (const CLI::ParseError& e) {
    app->exit(e);
    return 2;
  }
  try {
    if (ctx.threads < 1) throw std::invalid_argument("--threads must be at least 1");
    ctx.action();
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return 1;
  }
  return 0;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

std::vector<std::string> subcommands() {
  Context ctx;
  auto app = make_app(ctx);
  std::vector<std::string> names;
  for (const auto* sub : app->get_subcommands({})) names.push_back(sub->get_name());
  return names;
}

std::vector<FlagInfo> list_flags() {
  Context ctx;
  auto app = make_app(ctx);
  std::vector<FlagInfo> out;
  for (const auto* sub : app->get_subcommands({})) {
    for (const auto* opt : sub->get_options()) {
      for (const auto& name : opt->get_lnames()) {
        out.push_back({sub->get_name(), "--" + name, opt->get_description()});
      }
    }
  }
  return out;
}

std::string help(const std::string& subcommand) {
  Context ctx;
  auto app = make_app(ctx);
  const auto* sub = app->get_subcommand(subcommand);
  return sub->help();
}

}  // namespace advcube::cli
