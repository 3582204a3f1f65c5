#include "hybridflow/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hf {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) {
    // trim
    auto b = field.find_first_not_of(" \t\r");
    auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
  }
  return out;
}

}  // namespace

SensorSeries ingest_sensor_series(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open sensor series", {path.string()});

  Diagnostics diag;
  std::string line;
  if (!std::getline(in, line))
    throw ValidationError("sensor series '" + path.string() + "'",
                          {"missing header"});
  auto header = split_csv(line);
  const std::vector<std::string> expected = {"sensor_id", "t_seconds",
                                             "flow_veh_per_h", "mean_speed_m_per_s"};
  if (header != expected)
    throw ValidationError("sensor series '" + path.string() + "'",
                          {"header must be sensor_id,t_seconds,flow_veh_per_h,"
                           "mean_speed_m_per_s"});

  SensorSeries series;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = split_csv(line);
    if (fields.size() != 4) {
      diag.error("line " + std::to_string(line_no) + ": expected 4 columns");
      continue;
    }
    SeriesPoint p;
    try {
      p.t_s = std::stod(fields[1]);
      p.flow_vph = std::stod(fields[2]);
      p.speed_mps = std::stod(fields[3]);
    } catch (...) {
      diag.error("line " + std::to_string(line_no) + ": malformed number");
      continue;
    }
    if (p.flow_vph < 0)
      diag.error("line " + std::to_string(line_no) + ": negative flow");
    if (p.speed_mps < 0)
      diag.error("line " + std::to_string(line_no) + ": negative speed");
    auto& vec = series[fields[0]];
    if (!vec.empty() && p.t_s <= vec.back().t_s)
      diag.error("line " + std::to_string(line_no) +
                 ": non-monotonic timestamp for sensor '" + fields[0] + "'");
    vec.push_back(p);
  }
  diag.throw_if_failed("sensor series '" + path.string() + "' is invalid");

  // flag gaps against each series' own cadence, carrying values forward
  for (auto& [id, vec] : series) {
    if (vec.size() < 2) continue;
    double cadence = vec[1].t_s - vec[0].t_s;
    for (std::size_t i = 2; i < vec.size(); ++i)
      cadence = std::min(cadence, vec[i].t_s - vec[i - 1].t_s);
    if (!(cadence > 0)) continue;
    std::vector<SeriesPoint> filled;
    filled.push_back(vec[0]);
    for (std::size_t i = 1; i < vec.size(); ++i) {
      double expected_t = filled.back().t_s + cadence;
      while (vec[i].t_s > expected_t + cadence * 0.5) {
        SeriesPoint gap = filled.back();
        gap.t_s = expected_t;
        gap.gap = true;
        filled.push_back(gap);
        expected_t += cadence;
      }
      filled.push_back(vec[i]);
    }
    vec = std::move(filled);
  }
  return series;
}

SeriesPoint series_at(const std::vector<SeriesPoint>& series, double t_s) {
  SeriesPoint out;
  out.t_s = t_s;
  for (const auto& p : series) {
    if (p.t_s > t_s + 1e-9) break;
    out = p;
  }
  return out;
}

}  // namespace hf
