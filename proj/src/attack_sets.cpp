#include "advcube/attack_sets.hpp"

#include "advcube/parallel.hpp"

#include <algorithm>

namespace advcube {

namespace {

struct Filtered {
  std::vector<DataCube> cubes;
  std::vector<std::uint64_t> seeds;
  std::vector<TerrainKind> terrain;
};

Filtered filter_not_cloudy(const ScenegenConfig& gen, std::uint64_t first_seed, int count,
                           const DetectorModel& detector, int threads, const char* which) {
  Filtered out;
  const auto budget = static_cast<std::uint64_t>(count) * 10;
  const auto chunk = static_cast<std::uint64_t>(std::max(8, 4 * threads));
  std::uint64_t scanned = 0;
  while (static_cast<int>(out.cubes.size()) < count && scanned < budget) {
    const auto n = std::min(chunk, budget - scanned);
    std::vector<Scene> scenes(n);
    parallel_for(n, threads, [&](std::size_t i) { scenes[i] = synth_scene(first_seed + scanned + i, gen); });
    std::vector<DataCube> cubes;
    cubes.reserve(n);
    for (auto& s : scenes) cubes.push_back(s.cube);
    const auto scores = score_cubes(detector, cubes, threads);
    for (std::size_t i = 0; i < n && static_cast<int>(out.cubes.size()) < count; ++i) {
      if (scores[i] <= 0.5) {
        out.cubes.push_back(std::move(cubes[i]));
        out.seeds.push_back(scenes[i].seed);
        out.terrain.push_back(scenes[i].terrain);
      }
    }
    scanned += n;
  }
  if (static_cast<int>(out.cubes.size()) < count) {
    throw std::runtime_error(std::string("build_attack_sets: only ") + std::to_string(out.cubes.size()) + " of " +
                             std::to_string(count) + " " + which + " cubes scored not cloudy within " +
                             std::to_string(budget) + " scenes");
  }
  return out;
}

}  // namespace

AttackSets build_attack_sets(const ScenegenConfig& gen, const DetectorModel& detector, int train_count,
                             int test_count, TerrainKind roa_terrain, int threads) {
  gen.validate();
  if (train_count < 1 || test_count < 0) throw std::invalid_argument("build_attack_sets: bad set sizes");
  if (gen.size != detector.arch.input_height || gen.size != detector.arch.input_width) {
    throw std::invalid_argument("build_attack_sets: scene size does not match the detector input");
  }
  auto d = filter_not_cloudy(gen, gen.seed, train_count, detector, threads, "training");
  auto e = filter_not_cloudy(gen, gen.seed + kTestSeedOffset, test_count, detector, threads, "test");
  AttackSets sets;
  const auto it = std::find(d.terrain.begin(), d.terrain.end(), roa_terrain);
  if (it == d.terrain.end()) {
    throw std::runtime_error("build_attack_sets: no " + to_string(roa_terrain) + " cube in the training set");
  }
  const auto roa = static_cast<std::size_t>(it - d.terrain.begin());
  sets.roa = d.cubes[roa];
  sets.roa_seed = d.seeds[roa];
  sets.train = std::move(d.cubes);
  sets.train_seeds = std::move(d.seeds);
  sets.train_terrain = std::move(d.terrain);
  sets.test = std::move(e.cubes);
  sets.test_seeds = std::move(e.seeds);
  return sets;
}

}  // namespace advcube
