#pragma once

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace advcube {

inline constexpr int kBandCount = 13;

/// Sampled spectral curve (reflectance or normalised irradiance).
struct Spectrum {
  std::string name;
  std::vector<double> wavelengths_nm;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double min_nm() const { return wavelengths_nm.front(); }
  double max_nm() const { return wavelengths_nm.back(); }
  /// Linear interpolation; the argument must lie inside [min_nm, max_nm].
  double at(double nm) const;
};

/// Throws std::invalid_argument unless wavelengths are strictly increasing
/// and values finite and non-negative (and <= 1 for reflectances).
void validate_spectrum(const Spectrum& s, bool reflectance);

struct Band {
  int index = 0;
  double min_nm = 0.0;
  double max_nm = 0.0;
};

using BandTable = std::array<Band, kBandCount>;

void validate_band_table(const BandTable& bands);

using BandVector = Eigen::Matrix<double, kBandCount, 1>;
using IndexMatrix = Eigen::Matrix<double, kBandCount, Eigen::Dynamic>;

/// Spectral index: one 13-band column per material, entries in [0,1].
struct SpectralIndex {
  IndexMatrix columns;
  std::vector<std::string> names;

  int materials() const { return static_cast<int>(columns.cols()); }
};

std::vector<Spectrum> load_material_library(const std::filesystem::path& path);
void write_material_library(const std::filesystem::path& path, const std::vector<Spectrum>& library);

Spectrum load_solar_spectrum(const std::filesystem::path& path);
BandTable load_band_table(const std::filesystem::path& path);

/// Standard Sentinel-2A band ranges (13 bands, 8A listed as band 9).
BandTable sentinel2a_bands();

/// Reflectance times peak-normalised solar irradiance, interpolated onto the
/// reflectance grid points that fall inside the solar range, clipped to [0,1].
Spectrum apply_solar(const Spectrum& reflectance, const Spectrum& solar);

/// Per-band mean of the piecewise-linear spectrum (trapezoid rule with
/// interpolated band edges, divided by the band width).
BandVector integrate_bands(const Spectrum& spectrum, const BandTable& bands);

SpectralIndex build_spectral_index(const std::vector<Spectrum>& library, const Spectrum& solar,
                                   const BandTable& bands);

void write_spectral_index(const std::filesystem::path& path, const SpectralIndex& index);
SpectralIndex read_spectral_index(const std::filesystem::path& path);

}  // namespace advcube
