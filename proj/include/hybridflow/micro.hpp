#pragma once

#include <limits>
#include <optional>
#include <vector>

#include "hybridflow/network.hpp"

namespace hf {

inline constexpr double kInfGap = std::numeric_limits<double>::infinity();

struct IdmParams {
  double desired_speed_mps = 33.3;
  double time_headway_s = 1.5;
  double min_gap_m = 2.0;
  double max_accel = 1.0;      // m/s^2
  double comfort_decel = 1.5;  // m/s^2
  double exponent = 4.0;
  double vehicle_length_m = 5.0;

  void validate(Diagnostics& diag) const;
};

struct MobilParams {
  double politeness = 0.5;
  double threshold = 0.2;     // m/s^2 gain required to change lanes
  double safe_braking = 4.0;  // m/s^2 deceleration bound imposed on followers

  void validate(Diagnostics& diag) const;
};

struct IdmInput {
  double speed_mps = 0.0;
  double gap_m = kInfGap;          // bumper-to-bumper; infinity when free
  double approach_rate_mps = 0.0;  // own speed minus leader speed
};

// Car-following acceleration. Free-flow term minus interaction term; the
// dynamic part of the desired gap is floored at zero so the interaction never
// turns attractive when the leader pulls away.
double idm_acceleration(const IdmInput& in, const IdmParams& p);

// Gap at which idm_acceleration(v, gap, 0) == 0. Only defined for v below the
// desired speed.
double equilibrium_gap(double speed_mps, const IdmParams& p);

// Inverse of equilibrium_gap, solved by bisection. Returns the speed a vehicle
// settles at when holding `gap_m` behind its leader.
double equilibrium_speed_for_gap(double gap_m, const IdmParams& p);

struct Vehicle {
  long id = 0;
  int road = -1;
  int lane = 0;
  double pos_m = 0.0;  // front bumper
  double speed_mps = 0.0;
  double length_m = 5.0;
  IdmParams idm;
  MobilParams mobil;
  std::vector<int> route_nodes;  // nodes ahead; front() is the current road's end
  std::size_t route_next = 0;
  double served_stop_pos = -1.0;  // stop sign on the current road already honoured
};

struct NeighborView {
  bool present = false;
  double gap_m = kInfGap;  // bumper-to-bumper to the subject
  double speed_mps = 0.0;
};

struct LaneContextView {
  NeighborView leader;
  NeighborView follower;
};

enum class LaneChange { stay, left, right };

// MOBIL. Change iff the politeness-weighted acceleration gain exceeds the
// threshold and the new follower is not forced below -safe_braking.
LaneChange mobil_decision(const Vehicle& subject, const LaneContextView& current,
                          const std::optional<LaneContextView>& left,
                          const std::optional<LaneContextView>& right,
                          const MobilParams& mp, const IdmParams& ip);

// Lanes of the vehicle's current road that continue toward its next route
// node. Throws when the route cannot be continued from this road.
std::vector<int> navigation_target(const Vehicle& v, const RoadNetwork& net);

struct CrossingEvent {
  long vehicle = 0;
  int sensor = -1;
  double speed_mps = 0.0;
  double time_s = 0.0;
};

struct MicroState {
  const RoadNetwork* net = nullptr;
  std::vector<RoadInterval> intervals;  // geometry owned by the cluster
  std::vector<int> output_sensors;      // crossing one of these leaves the cluster
  std::vector<Vehicle> vehicles;
  double time_s = 0.0;

  bool contains(int road, double pos) const;
};

struct MicroStepResult {
  std::vector<CrossingEvent> crossings;  // every sensor passage this step
  struct Departure {
    Vehicle vehicle;
    CrossingEvent crossing;
  };
  std::vector<Departure> departures;  // left through an output sensor
};

// One synchronous time step: navigation, then MOBIL, then IDM, decisions taken
// from the pre-step state; ballistic integration with speed clamped at zero.
MicroStepResult step_micro_cluster(MicroState& state, double dt_s);

// true when a vehicle can be inserted at (road, lane, pos, speed) without
// violating the minimum gap or forcing emergency braking on either side.
bool injection_safe(const MicroState& state, int road, int lane, double pos_m,
                    double speed_mps, const IdmParams& p, double safe_braking);

}  // namespace hf
