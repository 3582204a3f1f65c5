#include "hybridflow/coupling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hf {

SensorReading record_sensor(std::span<const CrossingEvent> events, int sensor,
                            double t0_s, double t1_s, double carry_speed_mps) {
  SensorReading r;
  r.sensor = sensor;
  r.t_begin_s = t0_s;
  r.t_end_s = t1_s;
  double speed_sum = 0.0;
  for (const auto& ev : events) {
    if (ev.sensor != sensor) continue;
    if (ev.time_s < t0_s || ev.time_s > t1_s) continue;
    ++r.count;
    speed_sum += ev.speed_mps;
  }
  r.flow_vph = r.count / s_to_h(t1_s - t0_s);
  r.mean_speed_mps = r.count > 0 ? speed_sum / r.count : carry_speed_mps;
  return r;
}

std::vector<MacroSegment> tile_segments(const RoadNetwork& net,
                                        const std::vector<RoadInterval>& chain,
                                        double target_length_m) {
  if (!(target_length_m > 0))
    throw std::invalid_argument("tile_segments: target length must be > 0");
  std::vector<MacroSegment> out;
  for (const auto& iv : chain) {
    int n = std::max(1, int(std::lround(iv.length_m() / target_length_m)));
    double piece = iv.length_m() / n;
    for (int k = 0; k < n; ++k) {
      MacroSegment seg;
      seg.road = iv.road;
      seg.begin_m = iv.begin_m + k * piece;
      seg.end_m = k + 1 == n ? iv.end_m : iv.begin_m + (k + 1) * piece;
      seg.length_km = m_to_km(seg.end_m - seg.begin_m);
      seg.lanes = net.roads[iv.road].lane_count;
      out.push_back(seg);
    }
  }
  return out;
}

MacroClusterState aggregate_micro_to_macro(const MicroState& micro,
                                           std::vector<MacroSegment> geometry,
                                           const MetanetParams& p) {
  std::vector<long> counts(geometry.size(), 0);
  std::vector<double> speed_sum(geometry.size(), 0.0);
  for (const auto& v : micro.vehicles) {
    int seg = -1;
    for (std::size_t i = 0; i < geometry.size(); ++i) {
      const auto& g = geometry[i];
      if (v.road == g.road && v.pos_m >= g.begin_m - 1e-9 &&
          (v.pos_m < g.end_m || (v.pos_m <= g.end_m + 1e-9 && i + 1 == geometry.size()))) {
        seg = int(i);
        break;
      }
    }
    if (seg < 0)
      throw std::invalid_argument(
          "aggregate_micro_to_macro: geometry does not tile the cluster (vehicle " +
          std::to_string(v.id) + " uncovered)");
    ++counts[seg];
    speed_sum[seg] += v.speed_mps;
  }

  MacroClusterState state;
  state.segments = std::move(geometry);
  for (std::size_t i = 0; i < state.segments.size(); ++i) {
    auto& seg = state.segments[i];
    seg.density = counts[i] / (seg.length_km * seg.lanes);
    seg.speed_kmh = counts[i] > 0 ? mps_to_kmh(speed_sum[i] / counts[i])
                                  : p.free_speed_kmh;
  }
  return state;
}

MicroState make_micro_state(const RoadNetwork& net, const ClusterPartition& partition,
                            int cluster_id, double time_s) {
  const Cluster* c = partition.find(cluster_id);
  if (!c) throw std::invalid_argument("make_micro_state: unknown cluster");
  MicroState s;
  s.net = &net;
  s.intervals = partition.cluster_intervals(cluster_id);
  s.output_sensors = c->output_sensors;
  s.time_s = time_s;
  return s;
}

namespace {

struct RingVehicle {
  double pos = 0.0;  // front bumper, local coordinate
  double speed = 0.0;
  double length = 0.0;
};

// closed single-lane ring, car-following only
void warm_up_ring(std::vector<RingVehicle>& ring, double circumference,
                  const IdmParams& idm, const WarmupConfig& cfg) {
  if (ring.empty()) return;
  const int steps = int(std::lround(cfg.duration_s / cfg.dt_s));
  const std::size_t n = ring.size();
  std::vector<double> accel(n);
  for (int k = 0; k < steps; ++k) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto& me = ring[j];
      const auto& lead = ring[(j + 1) % n];
      double ahead = lead.pos - me.pos;
      if (ahead <= 0) ahead += circumference;  // wrapped neighbour (or self, n == 1)
      IdmInput in;
      in.speed_mps = me.speed;
      in.gap_m = ahead - lead.length;
      in.approach_rate_mps = me.speed - lead.speed;
      accel[j] = idm_acceleration(in, idm);
    }
    for (std::size_t j = 0; j < n; ++j) {
      double v1 = std::max(0.0, ring[j].speed + accel[j] * cfg.dt_s);
      ring[j].pos += 0.5 * (ring[j].speed + v1) * cfg.dt_s;
      if (ring[j].pos >= circumference) ring[j].pos -= circumference;
      ring[j].speed = v1;
    }
  }
}

}  // namespace

DisaggregationResult disaggregate_macro_to_micro(const MacroClusterState& macro,
                                                 const IdmParams& idm,
                                                 const WarmupConfig& warmup,
                                                 Rng& rng) {
  const auto& segs = macro.segments;
  DisaggregationResult result;

  // integer counts by largest remainder, total preserved
  std::vector<double> target(segs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    target[i] = segs[i].density * segs[i].length_km * segs[i].lanes;
    total += target[i];
  }
  result.mass_in = total;
  long want = std::lround(total);
  std::vector<long> count(segs.size());
  long assigned = 0;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    count[i] = long(std::floor(target[i]));
    assigned += count[i];
  }
  std::vector<std::size_t> by_remainder(segs.size());
  std::iota(by_remainder.begin(), by_remainder.end(), 0u);
  std::sort(by_remainder.begin(), by_remainder.end(), [&](std::size_t a, std::size_t b) {
    double ra = target[a] - std::floor(target[a]);
    double rb = target[b] - std::floor(target[b]);
    if (ra != rb) return ra > rb;
    return a < b;
  });
  for (std::size_t k = 0; assigned < want && k < by_remainder.size(); ++k, ++assigned)
    ++count[by_remainder[k]];
  result.count_out = std::accumulate(count.begin(), count.end(), 0L);

  for (std::size_t i = 0; i < segs.size(); ++i) {
    const auto& seg = segs[i];
    if (count[i] == 0) continue;
    const double seg_len = seg.end_m - seg.begin_m;
    double speed = std::min(kmh_to_mps(seg.speed_kmh),
                            idm.desired_speed_mps * (1.0 - 1e-9));
    speed = std::max(speed, 0.0);

    // spread the segment count over the lanes, remainder to the left lanes
    std::vector<long> lane_count(seg.lanes, count[i] / seg.lanes);
    for (long r = 0; r < count[i] % seg.lanes; ++r) ++lane_count[r];

    for (int lane = 0; lane < seg.lanes; ++lane) {
      long n = lane_count[lane];
      if (n == 0) continue;
      double spacing = seg_len / double(n);
      if (spacing < idm.min_gap_m + idm.vehicle_length_m)
        throw std::invalid_argument(
            "disaggregate: demanded density exceeds jam spacing in segment " +
            std::to_string(i));
      double jitter_max =
          std::max(0.0, std::min(0.2 * spacing,
                                 0.45 * (spacing - idm.vehicle_length_m -
                                         idm.min_gap_m)));
      std::vector<RingVehicle> ring(n);
      for (long j = 0; j < n; ++j) {
        double jitter = jitter_max > 0 ? rng.uniform(-jitter_max, jitter_max) : 0.0;
        ring[j].pos = (j + 0.5) * spacing + jitter;
        if (ring[j].pos < 0) ring[j].pos += seg_len;
        if (ring[j].pos >= seg_len) ring[j].pos -= seg_len;
        ring[j].speed = speed;
        ring[j].length = idm.vehicle_length_m;
      }
      std::sort(ring.begin(), ring.end(),
                [](const RingVehicle& a, const RingVehicle& b) { return a.pos < b.pos; });

      warm_up_ring(ring, seg_len, idm, warmup);

      for (const auto& rv : ring) {
        Vehicle v;
        v.road = seg.road;
        v.lane = lane;
        v.pos_m = seg.begin_m + rv.pos;
        v.speed_mps = rv.speed;
        v.length_m = rv.length;
        v.idm = idm;
        result.vehicles.push_back(v);
      }
    }
  }

  std::sort(result.vehicles.begin(), result.vehicles.end(),
            [](const Vehicle& a, const Vehicle& b) {
              return std::tie(a.road, a.pos_m, a.lane) <
                     std::tie(b.road, b.pos_m, b.lane);
            });
  return result;
}

GenerationSchedule schedule_generation(const SensorReading& reading, int lanes,
                                       std::vector<double> weights,
                                       HeadwayModel model) {
  if (lanes <= 0)
    throw std::invalid_argument("schedule_generation: need at least one lane");
  GenerationSchedule s;
  s.total_flow_vph = std::max(0.0, reading.flow_vph);
  s.speed_mps = std::max(0.0, reading.mean_speed_mps);
  s.model = model;
  if (weights.empty()) weights.assign(lanes, 1.0);
  if (int(weights.size()) != lanes)
    throw std::invalid_argument("schedule_generation: one weight per lane expected");
  double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sum > 0))
    throw std::invalid_argument("schedule_generation: weights must sum to > 0");
  for (auto& w : weights) w /= sum;
  s.lane_weights = std::move(weights);
  return s;
}

std::vector<std::pair<double, int>> draw_arrivals(const GenerationSchedule& s,
                                                  double t0_s, double t1_s,
                                                  ArrivalState& state, Rng& rng) {
  std::vector<std::pair<double, int>> out;
  if (s.total_flow_vph <= 0 || t1_s <= t0_s) {
    state.next_s = -1.0;
    return out;
  }
  if (state.lane_acc.size() != s.lane_weights.size())
    state.lane_acc.assign(s.lane_weights.size(), 0.0);

  if (s.model == HeadwayModel::poisson) {
    double mean = s.mean_headway_s();
    if (state.next_s < t0_s) state.next_s = t0_s + rng.exponential(mean);
    while (state.next_s < t1_s) {
      out.emplace_back(state.next_s, int(rng.weighted_pick(s.lane_weights)));
      state.next_s += rng.exponential(mean);
    }
  } else {
    state.carry += s.total_flow_vph * s_to_h(t1_s - t0_s);
    long n = long(std::floor(state.carry));
    state.carry -= double(n);
    for (long k = 0; k < n; ++k) {
      double when = t0_s + (k + 0.5) * (t1_s - t0_s) / double(n);
      int lane = 0;
      // weighted round robin: spend accumulated credit
      for (std::size_t l = 0; l < state.lane_acc.size(); ++l)
        state.lane_acc[l] += s.lane_weights[l];
      for (std::size_t l = 1; l < state.lane_acc.size(); ++l)
        if (state.lane_acc[l] > state.lane_acc[lane]) lane = int(l);
      state.lane_acc[lane] -= 1.0;
      out.emplace_back(when, lane);
    }
  }
  return out;
}

}  // namespace hf
