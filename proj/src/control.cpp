#include "hybridflow/control.hpp"

#include <algorithm>
#include <cmath>

namespace hf {

const char* to_string(PolicyMode m) {
  switch (m) {
    case PolicyMode::fixed: return "static";
    case PolicyMode::cpu_reduce: return "cpu_reduce";
    case PolicyMode::balance: return "balance";
    case PolicyMode::jam_probe: return "jam_probe";
    case PolicyMode::shockwave: return "shockwave";
  }
  return "?";
}

std::optional<PolicyMode> policy_mode_from(const std::string& name) {
  if (name == "static") return PolicyMode::fixed;
  if (name == "cpu_reduce") return PolicyMode::cpu_reduce;
  if (name == "balance") return PolicyMode::balance;
  if (name == "jam_probe") return PolicyMode::jam_probe;
  if (name == "shockwave") return PolicyMode::shockwave;
  return {};
}

const char* to_string(CommandKind k) {
  switch (k) {
    case CommandKind::to_micro: return "to_micro";
    case CommandKind::to_macro: return "to_macro";
    case CommandKind::merge: return "merge";
    case CommandKind::split: return "split";
    case CommandKind::shift: return "shift";
  }
  return "?";
}

void ControlPolicy::validate(Diagnostics& diag) const {
  if (!(congestion_off < congestion_on))
    diag.error("policy: congestion_off must be below congestion_on");
  if (control_period < 1) diag.error("policy: control period must be >= 1");
  if (!(micro_vehicle_budget > 0)) diag.error("policy: budget must be > 0");
}

bool CongestionTracker::update(int cluster_id, const std::vector<double>& densities,
                               const ControlPolicy& policy) {
  bool& state = state_[cluster_id];
  if (!state) {
    for (double d : densities)
      if (d >= policy.congestion_on) {
        state = true;
        break;
      }
  } else {
    bool all_below = true;
    for (double d : densities)
      if (d > policy.congestion_off) {
        all_below = false;
        break;
      }
    if (all_below) state = false;
  }
  return state;
}

bool CongestionTracker::congested(int cluster_id) const {
  auto it = state_.find(cluster_id);
  return it != state_.end() && it->second;
}

void CongestionTracker::forget(int cluster_id) { state_.erase(cluster_id); }

void CongestionTracker::seed(int cluster_id, bool state) { state_[cluster_id] = state; }

namespace {

// micro cluster best suited for demotion: most vehicles, no congestion,
// eligible geometry; ties resolved by lowest id
const ClusterMetrics* pick_demotion(const ControlSnapshot& snap,
                                    const CongestionTracker& tracker, int exclude_id) {
  const ClusterMetrics* best = nullptr;
  for (const auto& m : snap.clusters) {
    if (m.repr != Representation::micro || m.cluster_id == exclude_id) continue;
    if (!m.macro_eligible || tracker.congested(m.cluster_id)) continue;
    if (!best || m.vehicle_count > best->vehicle_count ||
        (m.vehicle_count == best->vehicle_count && m.cluster_id < best->cluster_id))
      best = &m;
  }
  return best;
}

}  // namespace

std::vector<SwitchCommand> evaluate_policy(const ControlSnapshot& snapshot,
                                           const ControlPolicy& policy,
                                           const CongestionTracker& tracker,
                                           const ClusterPartition& partition) {
  (void)partition;
  std::vector<SwitchCommand> out;
  if (policy.mode == PolicyMode::fixed) return out;

  double total_micro = 0.0;
  for (const auto& m : snapshot.clusters)
    if (m.repr == Representation::micro) total_micro += m.vehicle_count;

  auto budget_step = [&] {
    if (total_micro <= policy.micro_vehicle_budget) return;
    if (const auto* victim = pick_demotion(snapshot, tracker, -1))
      out.push_back({CommandKind::to_macro, victim->cluster_id});
  };

  switch (policy.mode) {
    case PolicyMode::fixed:
      break;

    case PolicyMode::cpu_reduce:
      budget_step();
      break;

    case PolicyMode::balance: {
      const ClusterMetrics* probe = nullptr;
      double probe_peak = 0.0;
      for (const auto& m : snapshot.clusters) {
        if (m.repr != Representation::macro || !tracker.congested(m.cluster_id))
          continue;
        double peak = m.segment_densities.empty()
                          ? 0.0
                          : *std::max_element(m.segment_densities.begin(),
                                              m.segment_densities.end());
        if (!probe || peak > probe_peak ||
            (peak == probe_peak && m.cluster_id < probe->cluster_id)) {
          probe = &m;
          probe_peak = peak;
        }
      }
      if (probe && total_micro < policy.micro_vehicle_budget) {
        double projected = total_micro + probe->vehicle_count;
        const ClusterMetrics* victim = nullptr;
        if (projected > policy.micro_vehicle_budget) {
          victim = pick_demotion(snapshot, tracker, probe->cluster_id);
          if (victim) projected -= victim->vehicle_count;
        }
        if (victim) out.push_back({CommandKind::to_macro, victim->cluster_id});
        out.push_back({CommandKind::to_micro, probe->cluster_id});
      } else {
        budget_step();
      }
      break;
    }

    case PolicyMode::jam_probe: {
      for (const auto& m : snapshot.clusters) {
        if (m.repr == Representation::macro && tracker.congested(m.cluster_id))
          out.push_back({CommandKind::to_micro, m.cluster_id});
        else if (m.repr == Representation::micro && !tracker.congested(m.cluster_id) &&
                 m.macro_eligible)
          out.push_back({CommandKind::to_macro, m.cluster_id});
      }
      break;
    }

    case PolicyMode::shockwave: {
      // geometry commands come from track_front; fall back to budget control
      // while no congestion is being tracked
      bool any_congested = false;
      for (const auto& m : snapshot.clusters)
        if (tracker.congested(m.cluster_id)) any_congested = true;
      if (!any_congested) budget_step();
      break;
    }
  }
  return out;
}

FrontResult track_front(const std::vector<CorridorSample>& corridor,
                        const FrontTrack& previous, const ControlPolicy& policy,
                        const ClusterPartition& partition) {
  FrontResult res;
  res.track = previous;
  res.track.active = false;
  if (corridor.size() < 2) return res;

  // steepest density rise whose downstream side is congested
  double best_slope = 0.0;
  double front = -1.0;
  int front_at = -1;  // sample index just downstream of the front
  for (std::size_t i = 0; i + 1 < corridor.size(); ++i) {
    const auto& a = corridor[i];
    const auto& b = corridor[i + 1];
    if (b.density < policy.congestion_on || b.density <= a.density) continue;
    double slope = (b.density - a.density) / std::max(1.0, b.pos_m - a.pos_m);
    if (slope > best_slope) {
      best_slope = slope;
      front = 0.5 * (a.pos_m + b.pos_m);
      front_at = int(i) + 1;
    }
  }
  if (front_at < 0) return res;  // dissolved: tracking disengages
  res.track.active = true;
  res.track.position_m = front;

  // the micro window nearest the front
  int window_id = -1;
  double window_dist = kInfGap;
  std::size_t win_begin = 0, win_end = 0;
  for (std::size_t i = 0; i < corridor.size();) {
    std::size_t j = i;
    while (j < corridor.size() && corridor[j].cluster_id == corridor[i].cluster_id) ++j;
    const Cluster* c = partition.find(corridor[i].cluster_id);
    if (c && c->repr == Representation::micro) {
      double lo = corridor[i].pos_m, hi = corridor[j - 1].pos_m;
      double dist = front < lo ? lo - front : (front > hi ? front - hi : 0.0);
      if (dist < window_dist) {
        window_dist = dist;
        window_id = corridor[i].cluster_id;
        win_begin = i;
        win_end = j;
      }
    }
    i = j;
  }
  if (window_id < 0) return res;  // no window to steer

  auto upstream_neighbor = [&]() -> int {
    return win_begin > 0 ? corridor[win_begin - 1].cluster_id : -1;
  };
  auto downstream_neighbor = [&]() -> int {
    return win_end < corridor.size() ? corridor[win_end].cluster_id : -1;
  };

  if (front < corridor[win_begin].pos_m) {
    if (int up = upstream_neighbor(); up >= 0)
      res.commands.push_back(
          {CommandKind::shift, up, window_id, -1, ShiftDirection::from_a_to_b});
    return res;
  }
  if (front > corridor[win_end - 1].pos_m) {
    if (int down = downstream_neighbor(); down >= 0)
      res.commands.push_back(
          {CommandKind::shift, down, window_id, -1, ShiftDirection::from_a_to_b});
    return res;
  }

  // margins in minimal units between the front and the window edges
  std::vector<int> units;
  int front_unit = -1;
  for (std::size_t i = win_begin; i < win_end; ++i) {
    if (units.empty() || units.back() != corridor[i].unit)
      units.push_back(corridor[i].unit);
    if (front_unit < 0 && corridor[i].pos_m >= front) front_unit = corridor[i].unit;
  }
  if (front_unit < 0) front_unit = units.back();
  int idx = int(std::find(units.begin(), units.end(), front_unit) - units.begin());
  int margin_up = idx;
  int margin_down = int(units.size()) - 1 - idx;

  if (margin_up < 1) {
    if (int up = upstream_neighbor(); up >= 0)
      res.commands.push_back(
          {CommandKind::shift, up, window_id, -1, ShiftDirection::from_a_to_b});
  } else if (margin_down > 1) {
    if (int down = downstream_neighbor(); down >= 0)
      res.commands.push_back(
          {CommandKind::shift, window_id, down, -1, ShiftDirection::from_a_to_b});
  }
  return res;
}

// ---------------------------------------------------------------------------
// command application

namespace {

bool interval_member(const std::vector<RoadInterval>& ivs, int road, double pos) {
  for (const auto& iv : ivs)
    if (iv.road == road && pos >= iv.begin_m - 1e-9 && pos <= iv.end_m + 1e-9)
      return true;
  return false;
}

std::vector<RoadInterval> unit_intervals(const SensorGraph& g, int unit) {
  return g.units[unit].intervals;
}

struct Applier {
  WorldView& w;

  Rng& rng_of(int id) { return w.cluster_rng(id); }

  void note_diag(const std::string& msg) {
    if (w.diagnostic) w.diagnostic(msg);
  }

  MicroState build_micro(int cluster_id, double time_s) {
    return make_micro_state(*w.net, *w.partition, cluster_id, time_s);
  }

  void refresh_micro_geometry(int cluster_id) {
    auto it = w.micro->find(cluster_id);
    if (it == w.micro->end()) return;
    const Cluster* c = w.partition->find(cluster_id);
    it->second.intervals = w.partition->cluster_intervals(cluster_id);
    it->second.output_sensors = c->output_sensors;
  }

  void prepare(std::vector<Vehicle>& vehicles, int cluster_id) {
    for (auto& v : vehicles) {
      v.mobil = w.params->mobil;
      if (w.prepare_vehicle) w.prepare_vehicle(v, cluster_id);
    }
  }

  // ---- representation switches ----------------------------------------

  void to_micro(int id) {
    Cluster* c = w.partition->find(id);
    if (!c) throw std::invalid_argument("unknown cluster");
    if (c->repr != Representation::macro)
      throw std::invalid_argument("cluster is not macro");
    if (w.partition->is_ring(id))
      throw std::invalid_argument("ring clusters stay macro");
    auto& mstate = w.macro->at(id);
    auto dis = disaggregate_macro_to_micro(mstate, w.params->idm, w.params->warmup,
                                           rng_of(id));
    prepare(dis.vehicles, id);
    MicroState ms = build_micro(id, w.now_s);
    ms.vehicles = std::move(dis.vehicles);
    if (w.conversion_residual)
      *w.conversion_residual += dis.mass_in - double(dis.count_out);
    w.macro->erase(id);
    (*w.micro)[id] = std::move(ms);
    c->repr = Representation::micro;
  }

  void to_macro(int id) {
    Cluster* c = w.partition->find(id);
    if (!c) throw std::invalid_argument("unknown cluster");
    if (c->repr != Representation::micro)
      throw std::invalid_argument("cluster is not micro");
    auto chain = w.partition->linear_chain(id);
    if (!chain)
      throw std::invalid_argument("cluster geometry is not macro-eligible");
    auto geometry = tile_segments(*w.net, *chain, w.params->segment_target_m);
    auto& micro = w.micro->at(id);
    MacroClusterState m = aggregate_micro_to_macro(micro, std::move(geometry),
                                                   w.params->metanet);
    m.ring = w.partition->is_ring(id);
    w.micro->erase(id);
    (*w.macro)[id] = std::move(m);
    c->repr = Representation::macro;
  }

  // ---- geometry -------------------------------------------------------

  void merge(int a, int b) {
    const Cluster* ca = w.partition->find(a);
    const Cluster* cb = w.partition->find(b);
    if (!ca || !cb) throw std::invalid_argument("unknown cluster");
    if (ca->repr != cb->repr)
      throw std::invalid_argument("merge of differing representations");
    int new_id = w.partition->next_id;
    ClusterPartition next = merge_clusters(*w.partition, a, b);

    if (ca->repr == Representation::micro) {
      MicroState merged;
      merged.net = w.net;
      const auto& ma = w.micro->at(a);
      const auto& mb = w.micro->at(b);
      merged.time_s = std::max(ma.time_s, mb.time_s);
      merged.vehicles = ma.vehicles;
      merged.vehicles.insert(merged.vehicles.end(), mb.vehicles.begin(),
                             mb.vehicles.end());
      std::sort(merged.vehicles.begin(), merged.vehicles.end(),
                [](const Vehicle& x, const Vehicle& y) { return x.id < y.id; });
      *w.partition = std::move(next);
      w.micro->erase(a);
      w.micro->erase(b);
      merged.intervals = w.partition->cluster_intervals(new_id);
      merged.output_sensors = w.partition->find(new_id)->output_sensors;
      (*w.micro)[new_id] = std::move(merged);
    } else if (ca->repr == Representation::macro) {
      bool a_upstream = false;
      for (int s : ca->output_sensors)
        if (std::find(cb->input_sensors.begin(), cb->input_sensors.end(), s) !=
            cb->input_sensors.end())
          a_upstream = true;
      MacroClusterState merged;
      const auto& sa = w.macro->at(a).segments;
      const auto& sb = w.macro->at(b).segments;
      const auto& first = a_upstream ? sa : sb;
      const auto& second = a_upstream ? sb : sa;
      merged.segments = first;
      merged.segments.insert(merged.segments.end(), second.begin(), second.end());
      *w.partition = std::move(next);
      w.macro->erase(a);
      w.macro->erase(b);
      (*w.macro)[new_id] = std::move(merged);
    } else {
      throw std::invalid_argument("merge supports micro and macro clusters");
    }
  }

  void split(int id, int at_sensor) {
    const Cluster* c = w.partition->find(id);
    if (!c) throw std::invalid_argument("unknown cluster");
    int up_id = w.partition->next_id;
    int down_id = up_id + 1;
    ClusterPartition next = split_cluster(*w.partition, id, at_sensor);
    Representation repr = c->repr;

    if (repr == Representation::micro) {
      MicroState old = std::move(w.micro->at(id));
      w.micro->erase(id);
      *w.partition = std::move(next);
      for (int nid : {up_id, down_id}) {
        MicroState part = build_micro(nid, old.time_s);
        for (const auto& v : old.vehicles)
          if (interval_member(part.intervals, v.road, v.pos_m))
            part.vehicles.push_back(v);
        (*w.micro)[nid] = std::move(part);
      }
    } else if (repr == Representation::macro) {
      MacroClusterState old = std::move(w.macro->at(id));
      w.macro->erase(id);
      *w.partition = std::move(next);
      for (int nid : {up_id, down_id}) {
        MacroClusterState part;
        auto ivs = w.partition->cluster_intervals(nid);
        for (const auto& seg : old.segments)
          if (interval_member(ivs, seg.road, 0.5 * (seg.begin_m + seg.end_m)))
            part.segments.push_back(seg);
        (*w.macro)[nid] = std::move(part);
      }
    } else {
      throw std::invalid_argument("split supports micro and macro clusters");
    }
  }

  void shift(int a, int b, ShiftDirection dir) {
    const Cluster* ca = w.partition->find(a);
    const Cluster* cb = w.partition->find(b);
    if (!ca || !cb) throw std::invalid_argument("unknown cluster");
    int donor = dir == ShiftDirection::from_a_to_b ? a : b;
    int recv = dir == ShiftDirection::from_a_to_b ? b : a;
    std::vector<int> before = w.partition->find(donor)->units;

    ClusterPartition next = shift_boundary(*w.partition, a, b, dir);
    int moved = -1;
    const Cluster* nd = next.find(donor);
    for (int u : before)
      if (!std::binary_search(nd->units.begin(), nd->units.end(), u)) moved = u;
    auto moved_ivs = unit_intervals(*w.graph, moved);

    Representation dr = w.partition->find(donor)->repr;
    Representation rr = w.partition->find(recv)->repr;

    // is the moved unit immediately upstream of the receiver's old geometry?
    bool unit_upstream_of_recv = false;
    for (std::size_t s = 0; s < w.net->sensors.size(); ++s)
      if (w.graph->up_unit[s] == moved &&
          w.partition->clusters[w.partition->cluster_on_down_side(int(s))].id == recv)
        unit_upstream_of_recv = true;

    // detach state for the moved unit from the donor
    std::vector<Vehicle> moved_vehicles;
    std::vector<MacroSegment> moved_segments;
    if (dr == Representation::micro) {
      auto& ms = w.micro->at(donor);
      auto& vs = ms.vehicles;
      for (auto it = vs.begin(); it != vs.end();) {
        if (interval_member(moved_ivs, it->road, it->pos_m)) {
          moved_vehicles.push_back(*it);
          it = vs.erase(it);
        } else {
          ++it;
        }
      }
    } else {
      auto& ms = w.macro->at(donor);
      auto& segs = ms.segments;
      for (auto it = segs.begin(); it != segs.end();) {
        if (interval_member(moved_ivs, it->road, 0.5 * (it->begin_m + it->end_m))) {
          moved_segments.push_back(*it);
          it = segs.erase(it);
        } else {
          ++it;
        }
      }
    }

    *w.partition = std::move(next);
    refresh_micro_geometry(donor);
    refresh_micro_geometry(recv);

    if (rr == Representation::micro) {
      auto& target = w.micro->at(recv);
      if (dr == Representation::macro) {
        // materialize the moved unit's traffic
        MacroClusterState piece;
        piece.segments = std::move(moved_segments);
        auto dis = disaggregate_macro_to_micro(piece, w.params->idm,
                                               w.params->warmup, rng_of(recv));
        prepare(dis.vehicles, recv);
        if (w.conversion_residual)
          *w.conversion_residual += dis.mass_in - double(dis.count_out);
        moved_vehicles = std::move(dis.vehicles);
      }
      target.vehicles.insert(target.vehicles.end(), moved_vehicles.begin(),
                             moved_vehicles.end());
      std::sort(target.vehicles.begin(), target.vehicles.end(),
                [](const Vehicle& x, const Vehicle& y) { return x.id < y.id; });
    } else if (rr == Representation::macro) {
      if (dr == Representation::micro) {
        MicroState piece;
        piece.net = w.net;
        piece.intervals = moved_ivs;
        piece.vehicles = std::move(moved_vehicles);
        auto geometry =
            tile_segments(*w.net, moved_ivs, w.params->segment_target_m);
        auto agg = aggregate_micro_to_macro(piece, std::move(geometry),
                                            w.params->metanet);
        moved_segments = std::move(agg.segments);
      }
      auto& target = w.macro->at(recv);
      if (unit_upstream_of_recv)
        target.segments.insert(target.segments.begin(), moved_segments.begin(),
                               moved_segments.end());
      else
        target.segments.insert(target.segments.end(), moved_segments.begin(),
                               moved_segments.end());
    } else {
      throw std::invalid_argument("shift supports micro and macro clusters");
    }
  }
};

}  // namespace

std::vector<AppliedCommand> apply_commands(WorldView& world,
                                           const std::vector<SwitchCommand>& commands) {
  std::vector<AppliedCommand> out;
  Applier ap{world};

  auto run_one = [&](const SwitchCommand& cmd) {
    AppliedCommand rec;
    rec.cmd = cmd;
    try {
      switch (cmd.kind) {
        case CommandKind::merge: ap.merge(cmd.cluster_a, cmd.cluster_b); break;
        case CommandKind::split: ap.split(cmd.cluster_a, cmd.sensor); break;
        case CommandKind::shift: ap.shift(cmd.cluster_a, cmd.cluster_b, cmd.dir); break;
        case CommandKind::to_micro: ap.to_micro(cmd.cluster_a); break;
        case CommandKind::to_macro: ap.to_macro(cmd.cluster_a); break;
      }
      rec.ok = true;
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.note = e.what();
      ap.note_diag(std::string("command dropped: ") + to_string(cmd.kind) + " on " +
                   std::to_string(cmd.cluster_a) + ": " + e.what());
    }
    out.push_back(std::move(rec));
  };

  // geometry first, then representation switches
  for (const auto& cmd : commands)
    if (cmd.kind == CommandKind::merge || cmd.kind == CommandKind::split ||
        cmd.kind == CommandKind::shift)
      run_one(cmd);
  for (const auto& cmd : commands)
    if (cmd.kind == CommandKind::to_micro || cmd.kind == CommandKind::to_macro)
      run_one(cmd);
  return out;
}

}  // namespace hf
