#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hybridflow/validation.hpp"

namespace hf {

struct SeriesPoint {
  double t_s = 0.0;
  double flow_vph = 0.0;
  double speed_mps = 0.0;
  bool gap = false;  // filled in by carry-forward over a missing interval
};

using SensorSeries = std::map<std::string, std::vector<SeriesPoint>>;

// Delimited text with a mandatory header:
//   sensor_id,t_seconds,flow_veh_per_h,mean_speed_m_per_s
// Missing intervals (relative to each series' own cadence) are filled with
// carried-forward values flagged as gaps.
SensorSeries ingest_sensor_series(const std::filesystem::path& path);

// series value at time t (carry-forward; zero flow before the first point)
SeriesPoint series_at(const std::vector<SeriesPoint>& series, double t_s);

}  // namespace hf
