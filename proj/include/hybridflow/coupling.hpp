#pragma once

#include <span>
#include <utility>
#include <vector>

#include "hybridflow/macro.hpp"
#include "hybridflow/micro.hpp"
#include "hybridflow/rng.hpp"

namespace hf {

struct SensorReading {
  int sensor = -1;
  double t_begin_s = 0.0;
  double t_end_s = 0.0;
  double flow_vph = 0.0;
  double mean_speed_mps = 0.0;
  // exact event count for measured readings; macro virtual readings round
  // flow * interval to the nearest integer and keep flow authoritative
  long count = 0;
  int epoch = -1;  // barrier step that published it
};

// Aggregate crossing events into a reading. Intervals with no crossings report
// zero flow and carry the previous mean speed forward.
SensorReading record_sensor(std::span<const CrossingEvent> events, int sensor,
                            double t0_s, double t1_s, double carry_speed_mps);

// Tile a linear interval chain into METANET segments of roughly
// target_length_m each, never spanning an interval boundary.
std::vector<MacroSegment> tile_segments(const RoadNetwork& net,
                                        const std::vector<RoadInterval>& chain,
                                        double target_length_m);

// Per segment: rho = count/(L*lambda), v = mean vehicle speed (free speed when
// empty), q = rho*v*lambda. Throws when a vehicle lies outside the tiling.
MacroClusterState aggregate_micro_to_macro(const MicroState& micro,
                                           std::vector<MacroSegment> geometry,
                                           const MetanetParams& p);

// Empty micro state covering a cluster's geometry.
MicroState make_micro_state(const RoadNetwork& net, const ClusterPartition& partition,
                            int cluster_id, double time_s);

struct WarmupConfig {
  double duration_s = 30.0;
  double dt_s = 0.5;
};

struct DisaggregationResult {
  // road/lane/pos/speed are set; ids and routes are the caller's concern
  std::vector<Vehicle> vehicles;
  double mass_in = 0.0;  // Sum rho*L*lambda before apportionment
  long count_out = 0;
};

// Largest-remainder apportionment of per-segment vehicle counts, placement at
// jittered equal spacing, then a per-segment closed-ring warm-up that settles
// speeds near the car-following fixed point without changing any count.
DisaggregationResult disaggregate_macro_to_micro(const MacroClusterState& macro,
                                                 const IdmParams& idm,
                                                 const WarmupConfig& warmup,
                                                 Rng& rng);

enum class HeadwayModel { poisson, uniform };

struct GenerationSchedule {
  double total_flow_vph = 0.0;
  std::vector<double> lane_weights;  // normalized; one entry per lane
  double speed_mps = 0.0;
  HeadwayModel model = HeadwayModel::poisson;

  double mean_headway_s() const {
    return total_flow_vph > 0 ? kSecondsPerHour / total_flow_vph : kInfGap;
  }
};

// Arrival process matching a reading's flow and speed, thinned across lanes
// proportionally to the weights (equal when omitted).
GenerationSchedule schedule_generation(const SensorReading& reading, int lanes,
                                       std::vector<double> weights = {},
                                       HeadwayModel model = HeadwayModel::poisson);

struct ArrivalState {
  double next_s = -1.0;            // poisson: pending arrival time
  double carry = 0.0;              // uniform: fractional vehicle accumulator
  std::vector<double> lane_acc;    // uniform: weighted round-robin credit
};

// Arrival times and lanes inside [t0, t1). The uniform model integrates the
// flow exactly (one vehicle per accumulated unit); the poisson model draws
// exponential headways.
std::vector<std::pair<double, int>> draw_arrivals(const GenerationSchedule& s,
                                                  double t0_s, double t1_s,
                                                  ArrivalState& state, Rng& rng);

}  // namespace hf
