#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "hybridflow/control.hpp"
#include "hybridflow/coupling.hpp"
#include "hybridflow/network.hpp"

namespace hf {

struct InputAgentDef {
  enum class Kind { flow_mass, scripted, replay };
  Kind kind = Kind::flow_mass;
  std::string road;
  int lane = -1;  // -1: spread over all lanes
  double position_m = 0.0;
  // flow_mass: constant flow or piecewise profile of (t_s, flow_vph)
  double flow_vph = 0.0;
  std::vector<std::pair<double, double>> profile;
  double speed_mps = 25.0;
  // scripted
  struct Event {
    double t_s = 0.0;
    int lane = 0;
    double speed_mps = 25.0;
  };
  std::vector<Event> events;
  // replay
  std::string series_file;

  double flow_at(double t_s) const;
};

struct PartitionDef {
  std::string name;
  std::vector<int> units;
  std::string span_from, span_to;  // alternative to explicit units
  Representation repr = Representation::micro;
};

struct InitDef {
  bool macro = true;
  std::string cluster;
  std::vector<double> densities;  // uniform when a single value
  double speed = -1.0;            // km/h (macro) or m/s (micro); -1: equilibrium
};

struct TurnRatio {
  std::string node, from_road, to_road;
  double p = 1.0;
};

struct Scenario {
  std::string name;
  std::filesystem::path base_dir;

  double duration_s = 3600.0;
  double base_step_s = 10.0;
  int micro_substeps = 20;
  std::uint64_t seed = 1;
  double sensor_interval_s = 60.0;

  IdmParams idm;
  MobilParams mobil;
  MetanetParams metanet;  // step_h kept in sync with base_step_s
  double segment_target_m = 500.0;
  WarmupConfig warmup;
  ControlPolicy policy;

  std::vector<Node> nodes;
  std::vector<Road> roads;
  std::vector<Sensor> sensors;
  std::vector<Connection> connections;
  std::vector<TurnRatio> turn_ratios;

  Representation default_repr = Representation::micro;
  std::vector<PartitionDef> partition_defs;
  std::vector<InitDef> init_defs;
  std::vector<InputAgentDef> inputs;

  // built during load
  RoadNetwork network;
  SensorGraph graph;
  ClusterPartition initial_partition;

  double micro_dt_s() const { return base_step_s / micro_substeps; }
  long total_steps() const { return std::lround(duration_s / base_step_s); }
};

Scenario load_scenario(const std::filesystem::path& path);
Scenario parse_scenario(const std::string& text, const std::string& name,
                        const std::filesystem::path& base_dir = ".");

// canonical form; load(write(s)) parses back to an identical scenario
void write_scenario(const Scenario& s, std::ostream& os);
std::string scenario_to_string(const Scenario& s);

}  // namespace hf
