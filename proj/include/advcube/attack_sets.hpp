#pragma once

#include "advcube/detector.hpp"
#include "advcube/scenegen.hpp"

#include <cstdint>
#include <vector>

namespace advcube {

/// Seed offset separating the test set E from the training set D.
inline constexpr std::uint64_t kTestSeedOffset = 1'000'000;

struct AttackSets {
  std::vector<DataCube> train;  // D
  std::vector<DataCube> test;   // E
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> test_seeds;
  std::vector<TerrainKind> train_terrain;
  DataCube roa;  // T, the first item of D on the requested terrain
  std::uint64_t roa_seed = 0;
};

/// Scenes from `gen` (seeds gen.seed.. for D, gen.seed + kTestSeedOffset..
/// for E) that the detector scores at most 0.5, scanned in seed order. At
/// most 10x the requested count is scanned per set.
AttackSets build_attack_sets(const ScenegenConfig& gen, const DetectorModel& detector, int train_count,
                             int test_count, TerrainKind roa_terrain, int threads = 1);

}  // namespace advcube
