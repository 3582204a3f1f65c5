#pragma once

#include <vector>

#include "hybridflow/units.hpp"
#include "hybridflow/validation.hpp"

namespace hf {

struct MetanetParams {
  double step_h = 10.0 / 3600.0;            // T_s
  double relaxation_h = 18.0 / 3600.0;      // tau
  double convection = 0.6;                  // eta, dimensionless
  double anticipation_km2_h = 35.0;         // nu
  double regularization = 13.0;             // kappa, veh/km/lane
  double free_speed_kmh = 110.0;            // v_f
  double critical_density = 33.5;           // rho_cr, veh/km/lane
  double fd_exponent = 1.867;               // a
  double jam_density = 180.0;               // rho_max, veh/km/lane

  // min_segment_km <= 0 skips the CFL bound (no segments configured yet)
  void validate(Diagnostics& diag, double min_segment_km) const;
};

struct MacroSegment {
  double length_km = 0.5;
  int lanes = 1;
  double density = 0.0;    // veh/km/lane
  double speed_kmh = 0.0;
  double flow_vph() const { return density * speed_kmh * lanes; }
  // geometry anchor on the road network
  int road = -1;
  double begin_m = 0.0;
  double end_m = 0.0;
};

// fundamental diagram V_e(rho) = v_f * exp(-(1/a) * (rho/rho_cr)^a)
double equilibrium_speed(double density, const MetanetParams& p);

// flows q_i(k) of the current state, one per segment
std::vector<double> segment_flows(const std::vector<MacroSegment>& segments);

// density conservation, evaluated on the k-state; returns clamped k+1 values
std::vector<double> step_density(const std::vector<MacroSegment>& k_state,
                                 const MetanetParams& p, double inflow_vph,
                                 int* clamp_events = nullptr);

// momentum update (relaxation + convection + anticipation), evaluated on the
// k-state; downstream_density < 0 selects a zero-gradient boundary
std::vector<double> step_speed(const std::vector<MacroSegment>& k_state,
                               const MetanetParams& p, double upstream_speed_kmh,
                               double downstream_density,
                               int* clamp_events = nullptr);

struct MacroBoundary {
  double upstream_flow_vph = 0.0;
  double upstream_speed_kmh = 0.0;
  double downstream_density = -1.0;  // < 0: zero gradient
};

struct MacroClusterState {
  std::vector<MacroSegment> segments;
  bool ring = false;  // tail feeds head; boundary is ignored
  MacroBoundary boundary;
  int clamp_events = 0;
  // flow/speed the cluster discharged during its latest step
  double last_outflow_vph = 0.0;
  double last_out_speed_kmh = 0.0;

  double total_vehicles() const {
    double m = 0.0;
    for (const auto& s : segments) m += s.density * s.length_km * s.lanes;
    return m;
  }
};

// One T_s step: flows, then densities, then speeds, all from the k-state.
void step_macro_cluster(MacroClusterState& state, const MetanetParams& p);

}  // namespace hf
