#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hybridflow/coupling.hpp"
#include "hybridflow/network.hpp"

namespace hf {

enum class PolicyMode { fixed, cpu_reduce, balance, jam_probe, shockwave };
const char* to_string(PolicyMode m);
std::optional<PolicyMode> policy_mode_from(const std::string& name);

struct ControlPolicy {
  PolicyMode mode = PolicyMode::fixed;
  double micro_vehicle_budget = 1000.0;
  double congestion_on = 40.0;   // veh/km/lane, >= critical density
  double congestion_off = 30.0;  // < congestion_on (hysteresis)
  int control_period = 10;       // in base steps
  bool shockwave_tracking = false;

  void validate(Diagnostics& diag) const;
};

enum class CommandKind { to_micro, to_macro, merge, split, shift };
const char* to_string(CommandKind k);

struct SwitchCommand {
  CommandKind kind = CommandKind::to_micro;
  int cluster_a = -1;
  int cluster_b = -1;                               // merge / shift
  int sensor = -1;                                  // split
  ShiftDirection dir = ShiftDirection::from_a_to_b; // shift
};

struct ClusterMetrics {
  int cluster_id = -1;
  Representation repr = Representation::micro;
  double vehicle_count = 0.0;  // live vehicles (micro) or Sum rho*L*lambda (macro)
  std::vector<double> segment_densities;
  bool macro_eligible = false;
};

struct ControlSnapshot {
  double t_s = 0.0;
  std::vector<ClusterMetrics> clusters;
};

// hysteresis state machine: enters at any rho >= on, leaves when all <= off
class CongestionTracker {
 public:
  bool update(int cluster_id, const std::vector<double>& densities,
              const ControlPolicy& policy);
  bool congested(int cluster_id) const;
  void forget(int cluster_id);
  void seed(int cluster_id, bool state);

 private:
  std::map<int, bool> state_;
};

std::vector<SwitchCommand> evaluate_policy(const ControlSnapshot& snapshot,
                                           const ControlPolicy& policy,
                                           const CongestionTracker& tracker,
                                           const ClusterPartition& partition);

// Shockwave-front tracking along a linear corridor of clusters.
struct CorridorSample {
  double pos_m = 0.0;  // centre of the sample along the corridor
  double density = 0.0;
  int cluster_id = -1;
  int unit = -1;
};

struct FrontTrack {
  bool active = false;
  double position_m = -1.0;
};

struct FrontResult {
  FrontTrack track;
  std::vector<SwitchCommand> commands;
};

// Locates the steepest upstream density rise at or above congestion_on and
// keeps the micro window at least one minimal unit wide on both sides of it.
FrontResult track_front(const std::vector<CorridorSample>& corridor,
                        const FrontTrack& previous, const ControlPolicy& policy,
                        const ClusterPartition& partition);

// ---------------------------------------------------------------------------
// command application

struct ModelParams {
  IdmParams idm;
  MobilParams mobil;
  MetanetParams metanet;
  double segment_target_m = 500.0;
  WarmupConfig warmup;
};

struct WorldView {
  const RoadNetwork* net = nullptr;
  const SensorGraph* graph = nullptr;
  ClusterPartition* partition = nullptr;
  std::map<int, MicroState>* micro = nullptr;
  std::map<int, MacroClusterState>* macro = nullptr;
  const ModelParams* params = nullptr;
  double now_s = 0.0;
  std::function<Rng&(int cluster_id)> cluster_rng;
  // id + route assignment for vehicles materialized inside a cluster
  std::function<void(Vehicle&, int cluster_id)> prepare_vehicle;
  std::function<void(const std::string&)> diagnostic;
  double* conversion_residual = nullptr;  // apportionment slack, ledger units
};

struct AppliedCommand {
  SwitchCommand cmd;
  bool ok = false;
  std::string note;  // failure reason or affected cluster ids
};

// Geometry commands first, then representation switches; a failing command is
// rolled back alone and reported in its note.
std::vector<AppliedCommand> apply_commands(WorldView& world,
                                           const std::vector<SwitchCommand>& commands);

}  // namespace hf
