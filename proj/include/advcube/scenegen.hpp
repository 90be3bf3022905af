#pragma once

#include "advcube/cube.hpp"
#include "advcube/spectra.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace advcube {

/// Synthetic scene generator settings. `cloud_density` may be a range, in which
/// case each scene draws its density uniformly from it; an unset terrain draws
/// hills/desert/mixed uniformly per scene.
struct ScenegenConfig {
  int size = 128;
  double density_min = 0.5;
  double density_max = 0.5;
  std::optional<TerrainKind> terrain;
  std::uint64_t seed = 0;
  int count = 1;
  /// Minimum brightness excess of cloud over the brightest terrain preset in
  /// bands 1, 2 and 8.
  double cloud_margin = 0.15;

  void validate() const;
};

struct Scene {
  DataCube cube;
  CloudMask mask;
  TerrainKind terrain = TerrainKind::Hills;
  double density = 0.0;
  std::uint64_t seed = 0;
};

/// Deterministic in `seed`: multi-octave noise terrain with per-kind band
/// profiles, overlaid with soft elliptical cloud blobs whose expected coverage
/// tracks the density. Mask = cloud alpha > 0.5.
Scene synth_scene(std::uint64_t seed, const ScenegenConfig& params);

/// Scenes for seeds params.seed .. params.seed + params.count - 1.
std::vector<Scene> synth_scenes(const ScenegenConfig& params, int threads = 1);

LabeledDataset build_labeled_dataset(const ScenegenConfig& params, double threshold, Split split, int threads = 1);

/// Mean per-band reflectance of a terrain preset (13 bands), and the cloud
/// top spectrum before thickness modulation.
BandVector terrain_profile(TerrainKind kind);
BandVector cloud_profile();

/// Smooth synthetic paint reflectances on a 350-2500 nm grid.
std::vector<Spectrum> synth_material_library(int count, std::uint64_t seed);

/// Coarse AM1.5-shaped global irradiance curve (W m^-2 nm^-1), 300-2500 nm.
Spectrum am15_solar_fixture();

}  // namespace advcube
