#include "hybridflow/macro.hpp"

#include <cmath>
#include <stdexcept>

namespace hf {

void MetanetParams::validate(Diagnostics& diag, double min_segment_km) const {
  if (!(step_h > 0)) diag.error("metanet: step duration must be > 0");
  if (!(relaxation_h > 0)) diag.error("metanet: relaxation time must be > 0");
  if (!(convection > 0)) diag.error("metanet: convection coefficient must be > 0");
  if (!(anticipation_km2_h > 0)) diag.error("metanet: anticipation must be > 0");
  if (!(regularization > 0)) diag.error("metanet: regularization must be > 0");
  if (!(free_speed_kmh > 0)) diag.error("metanet: free speed must be > 0");
  if (!(critical_density > 0)) diag.error("metanet: critical density must be > 0");
  if (!(fd_exponent > 0)) diag.error("metanet: diagram exponent must be > 0");
  if (!(jam_density > 0)) diag.error("metanet: jam density must be > 0");
  if (!(step_h < relaxation_h))
    diag.error("metanet: step duration must be shorter than the relaxation time");
  if (min_segment_km > 0 && !(step_h * free_speed_kmh < min_segment_km))
    diag.error("metanet: step * free speed exceeds the shortest segment (" +
               std::to_string(step_h * free_speed_kmh) + " km >= " +
               std::to_string(min_segment_km) + " km)");
}

double equilibrium_speed(double density, const MetanetParams& p) {
  if (density < 0) throw std::invalid_argument("equilibrium_speed: negative density");
  return p.free_speed_kmh *
         std::exp(-(1.0 / p.fd_exponent) *
                  std::pow(density / p.critical_density, p.fd_exponent));
}

std::vector<double> segment_flows(const std::vector<MacroSegment>& segments) {
  std::vector<double> q(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) q[i] = segments[i].flow_vph();
  return q;
}

std::vector<double> step_density(const std::vector<MacroSegment>& k_state,
                                 const MetanetParams& p, double inflow_vph,
                                 int* clamp_events) {
  const auto q = segment_flows(k_state);
  std::vector<double> out(k_state.size());
  for (std::size_t i = 0; i < k_state.size(); ++i) {
    double q_in = i == 0 ? inflow_vph : q[i - 1];
    double rho = k_state[i].density +
                 (p.step_h / (k_state[i].length_km * k_state[i].lanes)) * (q_in - q[i]);
    if (rho < 0.0 || rho > p.jam_density) {
      if (clamp_events) ++*clamp_events;
      rho = std::min(std::max(rho, 0.0), p.jam_density);
    }
    out[i] = rho;
  }
  return out;
}

std::vector<double> step_speed(const std::vector<MacroSegment>& k_state,
                               const MetanetParams& p, double upstream_speed_kmh,
                               double downstream_density, int* clamp_events) {
  const std::size_t n = k_state.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& seg = k_state[i];
    double v_up = i == 0 ? upstream_speed_kmh : k_state[i - 1].speed_kmh;
    double rho_down =
        i + 1 < n ? k_state[i + 1].density
                  : (downstream_density >= 0 ? downstream_density : seg.density);
    double relaxation =
        (p.step_h / p.relaxation_h) * (equilibrium_speed(seg.density, p) - seg.speed_kmh);
    double convection =
        (p.step_h * p.convection / seg.length_km) * seg.speed_kmh * (v_up - seg.speed_kmh);
    double anticipation = (p.step_h * p.anticipation_km2_h /
                           (p.relaxation_h * seg.length_km)) *
                          (rho_down - seg.density) / (seg.density + p.regularization);
    double v = seg.speed_kmh + relaxation + convection - anticipation;
    if (v < 0.0) {
      if (clamp_events) ++*clamp_events;
      v = 0.0;
    }
    out[i] = v;
  }
  return out;
}

namespace {

// ring variants: index arithmetic wraps instead of consulting the boundary
std::vector<double> step_density_ring(const std::vector<MacroSegment>& k,
                                      const MetanetParams& p, int* clamps) {
  const auto q = segment_flows(k);
  const std::size_t n = k.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double q_in = q[(i + n - 1) % n];
    double rho =
        k[i].density + (p.step_h / (k[i].length_km * k[i].lanes)) * (q_in - q[i]);
    if (rho < 0.0 || rho > p.jam_density) {
      if (clamps) ++*clamps;
      rho = std::min(std::max(rho, 0.0), p.jam_density);
    }
    out[i] = rho;
  }
  return out;
}

std::vector<double> step_speed_ring(const std::vector<MacroSegment>& k,
                                    const MetanetParams& p, int* clamps) {
  const std::size_t n = k.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v_up = k[(i + n - 1) % n].speed_kmh;
    double rho_down = k[(i + 1) % n].density;
    double relaxation = (p.step_h / p.relaxation_h) *
                        (equilibrium_speed(k[i].density, p) - k[i].speed_kmh);
    double convection = (p.step_h * p.convection / k[i].length_km) * k[i].speed_kmh *
                        (v_up - k[i].speed_kmh);
    double anticipation =
        (p.step_h * p.anticipation_km2_h / (p.relaxation_h * k[i].length_km)) *
        (rho_down - k[i].density) / (k[i].density + p.regularization);
    double v = k[i].speed_kmh + relaxation + convection - anticipation;
    if (v < 0.0) {
      if (clamps) ++*clamps;
      v = 0.0;
    }
    out[i] = v;
  }
  return out;
}

}  // namespace

void step_macro_cluster(MacroClusterState& state, const MetanetParams& p) {
  if (state.segments.empty())
    throw std::invalid_argument("step_macro_cluster: no segments");

  auto& segs = state.segments;
  state.last_outflow_vph = segs.back().flow_vph();
  state.last_out_speed_kmh = segs.back().speed_kmh;

  std::vector<double> rho, v;
  if (state.ring) {
    rho = step_density_ring(segs, p, &state.clamp_events);
    v = step_speed_ring(segs, p, &state.clamp_events);
  } else {
    rho = step_density(segs, p, state.boundary.upstream_flow_vph, &state.clamp_events);
    v = step_speed(segs, p, state.boundary.upstream_speed_kmh,
                   state.boundary.downstream_density, &state.clamp_events);
  }
  for (std::size_t i = 0; i < segs.size(); ++i) {
    segs[i].density = rho[i];
    segs[i].speed_kmh = v[i];
  }
}

}  // namespace hf
