#include "advcube/spectra.hpp"

#include "advcube/csv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace advcube {

double Spectrum::at(double nm) const {
  if (nm < min_nm() || nm > max_nm()) {
    throw std::out_of_range("wavelength " + csv::format(nm) + " nm outside spectrum '" + name + "'");
  }
  auto hi = std::lower_bound(wavelengths_nm.begin(), wavelengths_nm.end(), nm);
  const auto j = static_cast<std::size_t>(hi - wavelengths_nm.begin());
  if (wavelengths_nm[j] == nm) return values[j];
  const double x0 = wavelengths_nm[j - 1], x1 = wavelengths_nm[j];
  const double t = (nm - x0) / (x1 - x0);
  return values[j - 1] + t * (values[j] - values[j - 1]);
}

void validate_spectrum(const Spectrum& s, bool reflectance) {
  if (s.wavelengths_nm.size() != s.values.size()) {
    throw std::invalid_argument("spectrum '" + s.name + "': wavelength and value counts differ");
  }
  if (s.values.size() < 2) throw std::invalid_argument("spectrum '" + s.name + "' needs at least two samples");
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    if (i > 0 && !(s.wavelengths_nm[i] > s.wavelengths_nm[i - 1])) {
      throw std::invalid_argument("spectrum '" + s.name + "': wavelengths not strictly increasing at sample " +
                                  std::to_string(i));
    }
    const double v = s.values[i];
    if (!std::isfinite(v) || v < 0.0 || (reflectance && v > 1.0)) {
      throw std::invalid_argument("spectrum '" + s.name + "': value " + csv::format(v) + " out of range at sample " +
                                  std::to_string(i));
    }
  }
}

void validate_band_table(const BandTable& bands) {
  std::set<int> seen;
  for (const auto& b : bands) {
    if (b.index < 1 || b.index > kBandCount || !seen.insert(b.index).second) {
      throw std::invalid_argument("band table: band indices must be unique in 1..13");
    }
    if (!(b.min_nm < b.max_nm)) {
      throw std::invalid_argument("band table: band " + std::to_string(b.index) + " has min_nm >= max_nm");
    }
  }
}

std::vector<Spectrum> load_material_library(const std::filesystem::path& path) {
  const auto rows = csv::read(path);
  if (rows.empty()) throw std::runtime_error(path.string() + ": no materials");
  const auto& header = rows.front();
  if (header.fields.empty() || header.fields[0] != "wavelength_nm") {
    throw csv::ParseError(path, header.line, "header must start with 'wavelength_nm'");
  }
  if (header.fields.size() < 2) throw csv::ParseError(path, header.line, "no materials");
  std::vector<Spectrum> library(header.fields.size() - 1);
  for (std::size_t m = 0; m < library.size(); ++m) {
    library[m].name = header.fields[m + 1];
    if (library[m].name.empty()) throw csv::ParseError(path, header.line, "empty material name");
  }
  if (rows.size() < 3) throw csv::ParseError(path, rows.back().line, "need at least two wavelength samples");
  double previous = -1.0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() != header.fields.size()) {
      throw csv::ParseError(path, row.line, "expected " + std::to_string(header.fields.size()) + " fields, got " +
                                                std::to_string(row.fields.size()));
    }
    const double nm = csv::parse_double(path, row, 0);
    if (r > 1 && !(nm > previous)) throw csv::ParseError(path, row.line, "wavelengths must be strictly increasing");
    previous = nm;
    for (std::size_t m = 0; m < library.size(); ++m) {
      const double v = csv::parse_double(path, row, m + 1);
      if (v < 0.0 || v > 1.0) {
        throw csv::ParseError(path, row.line, "reflectance " + row.fields[m + 1] + " outside [0,1]");
      }
      library[m].wavelengths_nm.push_back(nm);
      library[m].values.push_back(v);
    }
  }
  return library;
}

void write_material_library(const std::filesystem::path& path, const std::vector<Spectrum>& library) {
  if (library.empty()) throw std::invalid_argument("no materials");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "wavelength_nm";
  for (const auto& s : library) out << ',' << s.name;
  out << '\n';
  const auto& grid = library.front().wavelengths_nm;
  for (const auto& s : library) {
    if (s.wavelengths_nm != grid) throw std::invalid_argument("library spectra must share one wavelength grid");
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    out << csv::format(grid[i]);
    for (const auto& s : library) out << ',' << csv::format(s.values[i]);
    out << '\n';
  }
}

Spectrum load_solar_spectrum(const std::filesystem::path& path) {
  const auto rows = csv::read(path);
  if (rows.empty()) throw std::runtime_error(path.string() + ": empty solar spectrum");
  const auto& header = rows.front();
  if (header.fields.size() != 2 || header.fields[0] != "wavelength_nm" || header.fields[1] != "irradiance") {
    throw csv::ParseError(path, header.line, "header must be 'wavelength_nm,irradiance'");
  }
  Spectrum s;
  s.name = "solar";
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() != 2) throw csv::ParseError(path, row.line, "expected 2 fields");
    const double nm = csv::parse_double(path, row, 0);
    const double v = csv::parse_double(path, row, 1);
    if (!s.wavelengths_nm.empty() && !(nm > s.wavelengths_nm.back())) {
      throw csv::ParseError(path, row.line, "wavelengths must be strictly increasing");
    }
    if (v < 0.0) throw csv::ParseError(path, row.line, "irradiance must be >= 0");
    s.wavelengths_nm.push_back(nm);
    s.values.push_back(v);
  }
  validate_spectrum(s, false);
  return s;
}

BandTable load_band_table(const std::filesystem::path& path) {
  const auto rows = csv::read(path);
  if (rows.empty()) throw std::runtime_error(path.string() + ": empty band table");
  const auto& header = rows.front();
  if (header.fields.size() != 3 || header.fields[0] != "band" || header.fields[1] != "min_nm" ||
      header.fields[2] != "max_nm") {
    throw csv::ParseError(path, header.line, "header must be 'band,min_nm,max_nm'");
  }
  if (rows.size() != kBandCount + 1) {
    throw csv::ParseError(path, rows.back().line,
                          "expected exactly 13 bands, got " + std::to_string(rows.size() - 1));
  }
  BandTable table{};
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() != 3) throw csv::ParseError(path, row.line, "expected 3 fields");
    table[r - 1] = {csv::parse_int(path, row, 0), csv::parse_double(path, row, 1), csv::parse_double(path, row, 2)};
  }
  validate_band_table(table);
  std::sort(table.begin(), table.end(), [](const Band& a, const Band& b) { return a.index < b.index; });
  return table;
}

BandTable sentinel2a_bands() {
  return {{{1, 433, 453},
           {2, 458, 523},
           {3, 543, 578},
           {4, 650, 680},
           {5, 698, 713},
           {6, 733, 748},
           {7, 773, 793},
           {8, 785, 900},
           {9, 855, 875},
           {10, 935, 955},
           {11, 1360, 1390},
           {12, 1565, 1655},
           {13, 2100, 2280}}};
}

Spectrum apply_solar(const Spectrum& reflectance, const Spectrum& solar) {
  validate_spectrum(solar, false);
  const double lo = std::max(reflectance.min_nm(), solar.min_nm());
  const double hi = std::min(reflectance.max_nm(), solar.max_nm());
  if (!(lo < hi)) {
    throw std::invalid_argument("spectra '" + reflectance.name + "' and '" + solar.name +
                                "' have disjoint wavelength ranges");
  }
  const double peak = *std::max_element(solar.values.begin(), solar.values.end());
  Spectrum out;
  out.name = reflectance.name;
  for (std::size_t i = 0; i < reflectance.size(); ++i) {
    const double nm = reflectance.wavelengths_nm[i];
    if (nm < lo || nm > hi) continue;
    const double illum = peak > 0.0 ? solar.at(nm) / peak : 0.0;
    out.wavelengths_nm.push_back(nm);
    out.values.push_back(std::clamp(reflectance.values[i] * illum, 0.0, 1.0));
  }
  if (out.size() < 2) {
    throw std::invalid_argument("spectra '" + reflectance.name + "' and solar overlap in fewer than two samples");
  }
  return out;
}

BandVector integrate_bands(const Spectrum& spectrum, const BandTable& bands) {
  BandVector result;
  for (const auto& band : bands) {
    if (band.min_nm < spectrum.min_nm() || band.max_nm > spectrum.max_nm()) {
      throw std::invalid_argument("band " + std::to_string(band.index) + " [" + csv::format(band.min_nm) + ", " +
                                  csv::format(band.max_nm) + "] nm outside the support of spectrum '" +
                                  spectrum.name + "'");
    }
    double area = 0.0;
    double x_prev = band.min_nm;
    double y_prev = spectrum.at(band.min_nm);
    for (std::size_t i = 0; i < spectrum.size(); ++i) {
      const double x = spectrum.wavelengths_nm[i];
      if (x <= band.min_nm) continue;
      if (x >= band.max_nm) break;
      area += 0.5 * (spectrum.values[i] + y_prev) * (x - x_prev);
      x_prev = x;
      y_prev = spectrum.values[i];
    }
    area += 0.5 * (spectrum.at(band.max_nm) + y_prev) * (band.max_nm - x_prev);
    result[band.index - 1] = area / (band.max_nm - band.min_nm);
  }
  return result;
}

SpectralIndex build_spectral_index(const std::vector<Spectrum>& library, const Spectrum& solar,
                                   const BandTable& bands) {
  if (library.empty()) throw std::invalid_argument("material library is empty");
  validate_band_table(bands);
  SpectralIndex index;
  index.columns.resize(kBandCount, static_cast<Eigen::Index>(library.size()));
  for (std::size_t q = 0; q < library.size(); ++q) {
    validate_spectrum(library[q], true);
    index.columns.col(static_cast<Eigen::Index>(q)) =
        integrate_bands(apply_solar(library[q], solar), bands).cwiseMax(0.0).cwiseMin(1.0);
    index.names.push_back(library[q].name);
  }
  return index;
}

void write_spectral_index(const std::filesystem::path& path, const SpectralIndex& index) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "band";
  for (const auto& n : index.names) out << ',' << n;
  out << '\n';
  for (int b = 0; b < kBandCount; ++b) {
    out << (b + 1);
    for (Eigen::Index q = 0; q < index.columns.cols(); ++q) out << ',' << csv::format(index.columns(b, q));
    out << '\n';
  }
}

SpectralIndex read_spectral_index(const std::filesystem::path& path) {
  const auto rows = csv::read(path);
  if (rows.empty()) throw std::runtime_error(path.string() + ": empty spectral index");
  const auto& header = rows.front();
  if (header.fields.size() < 2 || header.fields[0] != "band") {
    throw csv::ParseError(path, header.line, "header must be 'band,<material>,...'");
  }
  if (rows.size() != kBandCount + 1) throw csv::ParseError(path, rows.back().line, "expected 13 band rows");
  SpectralIndex index;
  index.names.assign(header.fields.begin() + 1, header.fields.end());
  index.columns.resize(kBandCount, static_cast<Eigen::Index>(index.names.size()));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() != header.fields.size()) throw csv::ParseError(path, row.line, "wrong field count");
    if (csv::parse_int(path, row, 0) != static_cast<int>(r)) throw csv::ParseError(path, row.line, "bands out of order");
    for (std::size_t q = 0; q < index.names.size(); ++q) {
      const double v = csv::parse_double(path, row, q + 1);
      if (v < 0.0 || v > 1.0) throw csv::ParseError(path, row.line, "index entry outside [0,1]");
      index.columns(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(q)) = v;
    }
  }
  return index;
}

}  // namespace advcube
