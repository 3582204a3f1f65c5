#include "hybridflow/micro.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace hf {

namespace {
constexpr double kTiny = 1e-9;
constexpr double kLeaderHorizon_m = 600.0;
constexpr double kFollowerHorizon_m = 300.0;
constexpr double kYieldBraking = 2.5;  // m/s^2 accepted when claiming a merge gap
// no lane changes right after a junction: traffic crossing the node decides
// against the pre-change state and must not find the mouth newly occupied
constexpr double kNoWeaveZone_m = 30.0;
}  // namespace

void IdmParams::validate(Diagnostics& diag) const {
  if (!(desired_speed_mps > 0)) diag.error("idm: desired speed must be > 0");
  if (!(time_headway_s > 0)) diag.error("idm: time headway must be > 0");
  if (!(min_gap_m > 0)) diag.error("idm: minimum gap must be > 0");
  if (!(max_accel > 0)) diag.error("idm: max acceleration must be > 0");
  if (!(comfort_decel > 0)) diag.error("idm: comfortable deceleration must be > 0");
  if (!(exponent > 0)) diag.error("idm: exponent must be > 0");
  if (!(vehicle_length_m > 0)) diag.error("idm: vehicle length must be > 0");
}

void MobilParams::validate(Diagnostics& diag) const {
  if (politeness < 0) diag.error("mobil: politeness must be >= 0");
  if (!(safe_braking > 0)) diag.error("mobil: safe braking limit must be > 0");
}

double idm_acceleration(const IdmInput& in, const IdmParams& p) {
  if (!std::isfinite(in.speed_mps) || in.speed_mps < 0)
    throw std::invalid_argument("idm_acceleration: speed must be finite and >= 0");
  if (std::isnan(in.gap_m) || !std::isfinite(in.approach_rate_mps))
    throw std::invalid_argument("idm_acceleration: non-finite input");

  double free_term = std::pow(in.speed_mps / p.desired_speed_mps, p.exponent);
  double interaction = 0.0;
  if (std::isfinite(in.gap_m)) {
    if (!(in.gap_m > 0))
      throw std::invalid_argument("idm_acceleration: gap must be > 0");
    double dynamic = in.speed_mps * p.time_headway_s +
                     in.speed_mps * in.approach_rate_mps /
                         (2.0 * std::sqrt(p.max_accel * p.comfort_decel));
    double s_star = p.min_gap_m + std::max(0.0, dynamic);
    interaction = (s_star / in.gap_m) * (s_star / in.gap_m);
  }
  return p.max_accel * (1.0 - free_term - interaction);
}

double equilibrium_gap(double speed_mps, const IdmParams& p) {
  if (!(speed_mps >= 0) || speed_mps >= p.desired_speed_mps)
    throw std::invalid_argument("equilibrium_gap: speed must lie in [0, v0)");
  return (p.min_gap_m + speed_mps * p.time_headway_s) /
         std::sqrt(1.0 - std::pow(speed_mps / p.desired_speed_mps, p.exponent));
}

double equilibrium_speed_for_gap(double gap_m, const IdmParams& p) {
  if (gap_m <= p.min_gap_m) return 0.0;
  double lo = 0.0;
  double hi = p.desired_speed_mps * (1.0 - 1e-12);
  if (equilibrium_gap(hi, p) < gap_m) return hi;
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    (equilibrium_gap(mid, p) < gap_m ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

namespace {

double accel_toward(double speed, const NeighborView& leader, const IdmParams& p) {
  IdmInput in;
  in.speed_mps = speed;
  in.gap_m = leader.present ? leader.gap_m : kInfGap;
  in.approach_rate_mps = speed - (leader.present ? leader.speed_mps : 0.0);
  return idm_acceleration(in, p);
}

double accel_plain(double speed, double gap, double lead_speed, const IdmParams& p) {
  IdmInput in;
  in.speed_mps = speed;
  in.gap_m = gap;
  in.approach_rate_mps = speed - lead_speed;
  return idm_acceleration(in, p);
}

}  // namespace

LaneChange mobil_decision(const Vehicle& subject, const LaneContextView& current,
                          const std::optional<LaneContextView>& left,
                          const std::optional<LaneContextView>& right,
                          const MobilParams& mp, const IdmParams& ip) {
  const double a_c = accel_toward(subject.speed_mps, current.leader, ip);

  auto evaluate = [&](const LaneContextView& tgt) -> std::optional<double> {
    if (tgt.leader.present && tgt.leader.gap_m <= 0) return {};
    if (tgt.follower.present && tgt.follower.gap_m <= 0) return {};
    double a_new = accel_toward(subject.speed_mps, tgt.leader, ip);
    double follower_delta = 0.0;
    if (tgt.follower.present) {
      double imposed = accel_plain(tgt.follower.speed_mps, tgt.follower.gap_m,
                                   subject.speed_mps, ip);
      if (imposed < -mp.safe_braking) return {};  // safety veto
      double before = tgt.leader.present
                          ? accel_plain(tgt.follower.speed_mps,
                                        tgt.follower.gap_m + subject.length_m +
                                            tgt.leader.gap_m,
                                        tgt.leader.speed_mps, ip)
                          : accel_plain(tgt.follower.speed_mps, kInfGap, 0.0, ip);
      follower_delta = imposed - before;
    }
    double old_delta = 0.0;
    if (current.follower.present) {
      double before = accel_plain(current.follower.speed_mps,
                                  current.follower.gap_m, subject.speed_mps, ip);
      double after = current.leader.present
                         ? accel_plain(current.follower.speed_mps,
                                       current.follower.gap_m + subject.length_m +
                                           current.leader.gap_m,
                                       current.leader.speed_mps, ip)
                         : accel_plain(current.follower.speed_mps, kInfGap, 0.0, ip);
      old_delta = after - before;
    }
    return (a_new - a_c) + mp.politeness * (follower_delta + old_delta);
  };

  std::optional<double> gain_left, gain_right;
  if (left) gain_left = evaluate(*left);
  if (right) gain_right = evaluate(*right);
  bool ok_left = gain_left && *gain_left > mp.threshold;
  bool ok_right = gain_right && *gain_right > mp.threshold;
  if (ok_left && ok_right) {
    if (*gain_left > *gain_right) return LaneChange::left;
    if (*gain_right > *gain_left) return LaneChange::right;
    return LaneChange::stay;  // exact tie
  }
  if (ok_left) return LaneChange::left;
  if (ok_right) return LaneChange::right;
  return LaneChange::stay;
}

namespace {

int next_route_road(const RoadNetwork& net, int road,
                    const std::vector<int>& route, std::size_t rn) {
  if (rn + 1 >= route.size()) return -1;
  for (int r : net.successor_roads(road))
    if (net.node_index(net.roads[r].to_node) == route[rn + 1]) return r;
  return -1;
}

int mapped_lane(const RoadNetwork& net, int from_road, int to_road, int lane) {
  for (const auto& l : net.lane_links(from_road, to_road))
    if (l.from_lane == lane) return l.to_lane;
  return -1;
}

// Merging roads yield to the earliest-declared feeder of the contested lane.
bool must_yield(const RoadNetwork& net, int road, int next_road, int target_lane) {
  for (int other : net.predecessor_roads(next_road)) {
    if (other == road) continue;
    bool conflicts = false;
    for (const auto& l : net.lane_links(other, next_road))
      if (l.to_lane == target_lane) conflicts = true;
    if (conflicts && other < road) return true;
  }
  return false;
}

// A crossing vehicle may not land on top of whoever already occupies the
// junction mouth; protects against simultaneous entry from two feeders.
bool merge_mouth_occupied(const MicroState& s, int next_road, int target_lane,
                          double landing_m) {
  for (const auto& o : s.vehicles)
    if (o.road == next_road && o.lane == target_lane &&
        o.pos_m - o.length_m < landing_m)
      return true;
  return false;
}

bool is_merge_lane(const RoadNetwork& net, int next_road, int target_lane) {
  int feeders = 0;
  for (int pr : net.predecessor_roads(next_road))
    for (const auto& l : net.lane_links(pr, next_road))
      if (l.to_lane == target_lane) ++feeders;
  return feeders > 1;
}

// Gap acceptance at a merge junction, evaluated like the lane-change safety
// criterion: neither the entering vehicle nor the approaching traffic may be
// forced into emergency braking.
bool merge_entry_clear(const MicroState& s, const RoadNetwork& net,
                       const Vehicle& v, int next_road, int target_lane,
                       double safe_braking) {
  const double s0 = v.idm.min_gap_m;
  for (const auto& o : s.vehicles) {
    if (o.id == v.id) continue;
    // vehicles just past the junction act as the entering vehicle's leader
    if (o.road == next_road && o.lane == target_lane) {
      double gap = o.pos_m - o.length_m;  // measured from the junction
      if (gap < 2.0 * s0) return false;
      if (gap < 200.0 &&
          accel_plain(v.speed_mps, gap, o.speed_mps, v.idm) < -safe_braking)
        return false;
    }
    // conflicting traffic approaching the junction becomes the new follower;
    // accepted on a time-headway basis, as if merging from a parallel lane
    if (o.road != v.road && o.road != next_road) {
      int nl = mapped_lane(net, o.road, next_road, o.lane);
      if (nl != target_lane) continue;
      const auto& sc = net.successor_roads(o.road);
      if (std::find(sc.begin(), sc.end(), next_road) == sc.end()) continue;
      double gap = net.roads[o.road].length_m - o.pos_m - v.length_m;
      if (gap < s0 + 1.0 * o.speed_mps) return false;
    }
  }
  return true;
}

}  // namespace

std::vector<int> navigation_target(const Vehicle& v, const RoadNetwork& net) {
  std::vector<int> all(net.roads[v.road].lane_count);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  if (v.route_next + 1 >= v.route_nodes.size()) return all;  // road ends the route
  int nr = next_route_road(net, v.road, v.route_nodes, v.route_next);
  if (nr < 0)
    throw std::invalid_argument("navigation: route node unreachable from road '" +
                                net.roads[v.road].id + "'");
  std::vector<int> lanes;
  for (const auto& l : net.lane_links(v.road, nr)) lanes.push_back(l.from_lane);
  std::sort(lanes.begin(), lanes.end());
  lanes.erase(std::unique(lanes.begin(), lanes.end()), lanes.end());
  return lanes;
}

bool MicroState::contains(int road, double pos) const {
  for (const auto& iv : intervals)
    if (iv.road == road && pos >= iv.begin_m - kTiny && pos <= iv.end_m + kTiny)
      return true;
  return false;
}

// ---------------------------------------------------------------------------
// stepping

namespace {

struct LaneOrder {
  // vehicle indices per (road, lane), sorted by front position then id
  std::map<std::pair<int, int>, std::vector<int>> by_lane;

  explicit LaneOrder(const MicroState& s) {
    for (std::size_t i = 0; i < s.vehicles.size(); ++i) {
      const auto& v = s.vehicles[i];
      by_lane[{v.road, v.lane}].push_back(int(i));
    }
    for (auto& [key, vec] : by_lane)
      std::sort(vec.begin(), vec.end(), [&](int a, int b) {
        const auto& va = s.vehicles[a];
        const auto& vb = s.vehicles[b];
        return std::tie(va.pos_m, va.id) < std::tie(vb.pos_m, vb.id);
      });
  }

  const std::vector<int>* lane(int road, int ln) const {
    auto it = by_lane.find({road, ln});
    return it == by_lane.end() ? nullptr : &it->second;
  }
};

double active_speed_limit(const RoadNetwork& net, const Vehicle& v) {
  double limit = kInfGap;
  double best_pos = -1.0;
  for (const auto& sg : net.roads[v.road].signs) {
    if (sg.kind != SignKind::speed_limit) continue;
    if (sg.lane >= 0 && sg.lane != v.lane) continue;
    if (sg.position_m <= v.pos_m + kTiny && sg.position_m >= best_pos) {
      best_pos = sg.position_m;
      limit = sg.limit_mps;
    }
  }
  return limit;
}

struct Prober {
  const MicroState& s;
  const LaneOrder& order;

  NeighborView ahead(const Vehicle& v, int lane) const {
    NeighborView out;
    double best = kLeaderHorizon_m;
    auto consider_vehicle = [&](const Vehicle& o, double gap) {
      if (gap < best) {
        best = gap;
        out.present = true;
        out.gap_m = std::max(gap, 0.01);  // touching bumpers brake maximally
        out.speed_mps = o.speed_mps;
      }
    };
    auto consider_wall = [&](double gap) {
      if (gap < best) {
        best = gap;
        out.present = true;
        out.gap_m = std::max(gap, 0.01);
        out.speed_mps = 0.0;
      }
    };

    int road = v.road;
    int ln = lane;
    double base = 0.0;  // distance from v's front to the start of the scanned road
    std::size_t rn = v.route_next;
    for (int depth = 0; depth < 8 && base < kLeaderHorizon_m; ++depth) {
      double from = depth == 0 ? v.pos_m : 0.0;
      if (const auto* lv = order.lane(road, ln)) {
        for (int idx : *lv) {
          const Vehicle& o = s.vehicles[idx];
          if (o.id == v.id) continue;
          if (o.pos_m >= from - kTiny) {
            consider_vehicle(o, base + o.pos_m - o.length_m - (depth == 0 ? v.pos_m : 0.0));
            break;
          }
        }
      }
      // unserved stop signs act as a standing obstacle just past the sign
      for (const auto& sg : s.net->roads[road].signs) {
        if (sg.kind != SignKind::stop) continue;
        if (sg.lane >= 0 && sg.lane != ln) continue;
        if (depth == 0 && sg.position_m <= v.served_stop_pos + kTiny) continue;
        if (!s.contains(road, sg.position_m)) continue;
        if (sg.position_m >= from - kTiny)
          consider_wall(base + sg.position_m + v.idm.min_gap_m -
                        (depth == 0 ? v.pos_m : 0.0));
      }

      double road_len = s.net->roads[road].length_m;
      base += road_len - from;
      int nr = next_route_road(*s.net, road, v.route_nodes, rn);
      if (nr < 0) {
        if (rn + 1 < v.route_nodes.size()) consider_wall(base);  // dead end
        break;
      }
      int nl = mapped_lane(*s.net, road, nr, ln);
      if (nl < 0) {
        consider_wall(base);  // this lane does not continue
        break;
      }
      if (depth == 0 && must_yield(*s.net, road, nr, nl) &&
          !merge_entry_clear(s, *s.net, v, nr, nl, kYieldBraking)) {
        consider_wall(base + v.idm.min_gap_m);  // hold at the junction
        break;
      }
      if (!s.contains(nr, 0.0)) break;  // beyond the cluster boundary: free road
      road = nr;
      ln = nl;
      ++rn;
    }
    return out;
  }

  NeighborView behind(const Vehicle& v, int lane) const {
    NeighborView out;
    double best = kFollowerHorizon_m;
    // same road
    if (const auto* lv = order.lane(v.road, lane)) {
      for (auto it = lv->rbegin(); it != lv->rend(); ++it) {
        const Vehicle& o = s.vehicles[*it];
        if (o.id == v.id) continue;
        if (o.pos_m < v.pos_m - kTiny) {
          double gap = v.pos_m - v.length_m - o.pos_m;
          if (gap < best) {
            out.present = true;
            out.gap_m = std::max(gap, 0.01);
            out.speed_mps = o.speed_mps;
          }
          break;
        }
      }
    }
    if (out.present) return out;
    // nearest vehicle at the tail of each feeding road
    double base = v.pos_m - v.length_m;
    for (int pr : s.net->predecessor_roads(v.road)) {
      int pl = -1;
      for (const auto& l : s.net->lane_links(pr, v.road))
        if (l.to_lane == lane) pl = l.from_lane;
      if (pl < 0) continue;
      if (const auto* lv = order.lane(pr, pl)) {
        if (!lv->empty()) {
          const Vehicle& o = s.vehicles[lv->back()];
          double gap = base + (s.net->roads[pr].length_m - o.pos_m);
          if (gap < best && gap < out.gap_m) {
            out.present = true;
            out.gap_m = std::max(gap, 0.01);
            out.speed_mps = o.speed_mps;
          }
        }
      }
    }
    return out;
  }

  LaneContextView context(const Vehicle& v, int lane) const {
    return {ahead(v, lane), behind(v, lane)};
  }
};

}  // namespace

bool injection_safe(const MicroState& state, int road, int lane, double pos_m,
                    double speed_mps, const IdmParams& p, double safe_braking) {
  const Vehicle* leader = nullptr;
  const Vehicle* follower = nullptr;
  for (const auto& o : state.vehicles) {
    if (o.road != road || o.lane != lane) continue;
    if (o.pos_m >= pos_m) {
      if (!leader || o.pos_m < leader->pos_m) leader = &o;
    } else {
      if (!follower || o.pos_m > follower->pos_m) follower = &o;
    }
  }
  if (leader) {
    double gap = leader->pos_m - leader->length_m - pos_m;
    if (gap < p.min_gap_m) return false;
    if (accel_plain(speed_mps, gap, leader->speed_mps, p) < -safe_braking) return false;
  }
  if (follower) {
    double gap = pos_m - p.vehicle_length_m - follower->pos_m;
    if (gap < p.min_gap_m) return false;
    if (accel_plain(follower->speed_mps, gap, speed_mps, p) < -safe_braking)
      return false;
  }
  return true;
}

MicroStepResult step_micro_cluster(MicroState& state, double dt_s) {
  if (!(dt_s > 0)) throw std::invalid_argument("step_micro_cluster: dt must be > 0");
  const RoadNetwork& net = *state.net;
  MicroStepResult result;

  LaneOrder order(state);
  Prober probe{state, order};

  struct Decision {
    int lane;
    double accel;
  };
  std::vector<Decision> dec(state.vehicles.size());

  for (std::size_t i = 0; i < state.vehicles.size(); ++i) {
    const Vehicle& v = state.vehicles[i];
    IdmParams eff = v.idm;
    eff.desired_speed_mps =
        std::min(eff.desired_speed_mps, active_speed_limit(net, v));

    LaneContextView cur = probe.context(v, v.lane);
    std::optional<LaneContextView> left, right;
    if (v.lane > 0) left = probe.context(v, v.lane - 1);
    if (v.lane + 1 < net.roads[v.road].lane_count)
      right = probe.context(v, v.lane + 1);

    auto required = navigation_target(v, net);
    auto is_required = [&](int ln) {
      return std::binary_search(required.begin(), required.end(), ln);
    };

    int target = v.lane;
    if (!is_required(v.lane)) {
      // mandatory change toward the nearest connecting lane; only the safety
      // criterion applies
      int nearest = required.empty() ? v.lane : required.front();
      for (int ln : required)
        if (std::abs(ln - v.lane) < std::abs(nearest - v.lane)) nearest = ln;
      int step = nearest < v.lane ? -1 : 1;
      const auto& side = step < 0 ? left : right;
      if (side) {
        // urgency doubles the accepted imposed braking close to the junction
        double accept = v.mobil.safe_braking;
        if (net.roads[v.road].length_m - v.pos_m < 150.0) accept *= 2.0;
        bool feasible = !(side->leader.present && side->leader.gap_m <= 0) &&
                        !(side->follower.present && side->follower.gap_m <= 0);
        if (feasible && side->follower.present) {
          double imposed = accel_plain(side->follower.speed_mps,
                                       side->follower.gap_m, v.speed_mps, eff);
          feasible = imposed >= -accept;
        }
        if (feasible) target = v.lane + step;
      }
    } else {
      auto allowed = [&](int ln, const std::optional<LaneContextView>& ctx)
          -> std::optional<LaneContextView> {
        if (!ctx || !is_required(ln)) return {};
        return ctx;
      };
      switch (mobil_decision(v, cur, allowed(v.lane - 1, left),
                             allowed(v.lane + 1, right), v.mobil, eff)) {
        case LaneChange::left: target = v.lane - 1; break;
        case LaneChange::right: target = v.lane + 1; break;
        case LaneChange::stay: break;
      }
    }

    if (target != v.lane && v.pos_m - v.length_m < kNoWeaveZone_m &&
        !net.predecessor_roads(v.road).empty())
      target = v.lane;

    const LaneContextView& occ =
        target == v.lane ? cur : (target < v.lane ? *left : *right);
    dec[i] = {target, accel_toward(v.speed_mps, occ.leader, eff)};
  }

  // lane changes first, re-validated against already-applied moves
  std::vector<std::size_t> change_order;
  for (std::size_t i = 0; i < state.vehicles.size(); ++i)
    if (dec[i].lane != state.vehicles[i].lane) change_order.push_back(i);
  std::sort(change_order.begin(), change_order.end(), [&](std::size_t a, std::size_t b) {
    const auto& va = state.vehicles[a];
    const auto& vb = state.vehicles[b];
    if (va.road != vb.road) return va.road < vb.road;
    if (va.pos_m != vb.pos_m) return va.pos_m > vb.pos_m;  // downstream first
    return va.id < vb.id;
  });
  for (std::size_t i : change_order) {
    Vehicle& v = state.vehicles[i];
    int tgt = dec[i].lane;
    bool clear = true;
    for (const auto& o : state.vehicles) {
      if (o.id == v.id || o.road != v.road || o.lane != tgt) continue;
      double gap = o.pos_m > v.pos_m ? o.pos_m - o.length_m - v.pos_m
                                     : v.pos_m - v.length_m - o.pos_m;
      if (gap < 0.1) {
        clear = false;
        break;
      }
    }
    if (clear) v.lane = tgt;
  }

  // ballistic update with speed clamped at zero
  const double t_end = state.time_s + dt_s;
  std::vector<char> departed(state.vehicles.size(), 0);
  for (std::size_t i = 0; i < state.vehicles.size(); ++i) {
    Vehicle& v = state.vehicles[i];
    double v1 = std::max(0.0, v.speed_mps + dec[i].accel * dt_s);
    double advance = 0.5 * (v.speed_mps + v1) * dt_s;
    v.speed_mps = v1;

    auto emit_crossing = [&](int sensor) -> bool {
      CrossingEvent ev{v.id, sensor, v.speed_mps, t_end};
      result.crossings.push_back(ev);
      bool leaves = std::find(state.output_sensors.begin(), state.output_sensors.end(),
                              sensor) != state.output_sensors.end();
      if (leaves) {
        result.departures.push_back({v, ev});
        departed[i] = 1;
      }
      return leaves;
    };

    double remaining = advance;
    while (!departed[i]) {
      double road_len = net.roads[v.road].length_m;
      double new_pos = std::min(v.pos_m + remaining, road_len);
      bool left_cluster = false;
      for (int s : net.sensors_on_road(v.road)) {
        double ps = net.sensors[s].position_m;
        if (ps > v.pos_m + kTiny && ps <= new_pos + kTiny) {
          if (emit_crossing(s)) {
            left_cluster = true;
            break;
          }
        }
      }
      if (left_cluster) break;
      remaining -= new_pos - v.pos_m;
      v.pos_m = new_pos;
      if (remaining <= kTiny) break;

      // road transition
      int nr = next_route_road(net, v.road, v.route_nodes, v.route_next);
      if (nr < 0) {
        v.speed_mps = 0.0;  // dead end; the probe's wall keeps this rare
        break;
      }
      int nl = mapped_lane(net, v.road, nr, v.lane);
      if (nl < 0) {
        v.speed_mps = 0.0;
        break;
      }
      if (must_yield(net, v.road, nr, nl) &&
          !merge_entry_clear(state, net, v, nr, nl, kYieldBraking)) {
        v.speed_mps = 0.0;  // hold at the junction until the gap is accepted
        break;
      }
      if (is_merge_lane(net, nr, nl) &&
          merge_mouth_occupied(state, nr, nl, remaining + v.idm.min_gap_m)) {
        v.speed_mps = 0.0;  // entering now would land on the mouth occupant
        break;
      }
      v.road = nr;
      v.lane = nl;
      v.pos_m = 0.0;
      v.route_next += 1;
      v.served_stop_pos = -1.0;
      for (int s : net.sensors_on_road(nr))
        if (net.sensors[s].position_m <= kTiny) {
          if (emit_crossing(s)) break;
        }
    }

    // honour stop signs once the vehicle has come to rest at one
    if (!departed[i] && v.speed_mps < 0.2) {
      for (const auto& sg : net.roads[v.road].signs) {
        if (sg.kind != SignKind::stop) continue;
        if (sg.lane >= 0 && sg.lane != v.lane) continue;
        if (sg.position_m > v.served_stop_pos + kTiny &&
            std::abs(sg.position_m - v.pos_m) <= 3.0)
          v.served_stop_pos = sg.position_m;
      }
    }
  }

  // remove departed vehicles, preserving order
  std::size_t w = 0;
  for (std::size_t i = 0; i < state.vehicles.size(); ++i)
    if (!departed[i]) {
      if (w != i) state.vehicles[w] = std::move(state.vehicles[i]);
      ++w;
    }
  state.vehicles.resize(w);
  state.time_s = t_end;

  // Ballistic integration can overshoot into a leader that stopped within the
  // same substep; such contact resolves as an emergency stop at the bumper.
  // An incursion deeper than one substep of travel is a genuine failure.
  const double max_incursion = 0.5 * dt_s * 40.0;
  LaneOrder post(state);
  for (const auto& [key, vec] : post.by_lane)
    for (std::size_t k = vec.size(); k-- > 1;) {
      const Vehicle& lead = state.vehicles[vec[k]];
      Vehicle& me = state.vehicles[vec[k - 1]];
      double gap = lead.pos_m - lead.length_m - me.pos_m;
      if (gap < 0.05 && gap > -max_incursion) {
        me.pos_m = std::max(0.0, lead.pos_m - lead.length_m - 0.05);
        me.speed_mps = std::min(me.speed_mps, lead.speed_mps);
      }
    }
  for (const auto& [key, vec] : post.by_lane)
    for (std::size_t k = 1; k < vec.size(); ++k) {
      const Vehicle& a = state.vehicles[vec[k - 1]];
      const Vehicle& b = state.vehicles[vec[k]];
      double gap = b.pos_m - b.length_m - a.pos_m;
      if (gap < -kTiny) {
        throw SimulationError("vehicle overlap after update on road '" +
                              net.roads[key.first].id + "' lane " +
                              std::to_string(key.second));
      }
    }

  return result;
}

}  // namespace hf
