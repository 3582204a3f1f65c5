#include "hybridflow/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <mutex>
#include <thread>

namespace hf {

namespace {

constexpr double kTiny = 1e-9;

struct PendingVehicle {
  double due_s = 0.0;
  Vehicle vehicle;
};

struct BoundaryChannel {
  int sensor = -1;
  int up_id = 0, down_id = 0;  // cluster ids; 0 is outside
  // published by a micro upstream at the barrier, consumed one step later
  double in_mass = 0.0;
  double in_speed_mps = 0.0;
  int epoch = -1;
  // downstream-side materializer state
  double mass_acc = 0.0;
  std::deque<PendingVehicle> queue;
  std::vector<double> lane_credit;
  // injection geometry on the downstream side
  int inject_road = -1;
  double inject_pos = 0.0;
};

struct AgentRuntime {
  const InputAgentDef* def = nullptr;
  Rng rng{0};
  ArrivalState arrivals;
  std::deque<PendingVehicle> queue;
  std::size_t next_event = 0;  // scripted
  long deferred = 0;
  long deferred_logged = 0;
  int road = -1;
  int entry_sensor = -1;
  int target_cluster = 0;  // refreshed every barrier
};

struct ClusterRuntime {
  std::vector<CrossingEvent> events;
  std::vector<MicroStepResult::Departure> departures;
  // macro bookkeeping for the step that just ran
  std::vector<double> step_flows;   // q_i(k)
  std::vector<double> step_speeds;  // v_i(k)
  double mass_before = 0.0;
  double expected_delta = 0.0;
  // upstream inflow accumulated during prepare for the coming step
  double inflow_mass = 0.0;
  double inflow_momentum = 0.0;  // mass * speed_kmh
};

struct SensorAccumulator {
  long event_count = 0;
  double event_speed_sum = 0.0;
  double state_mass = 0.0;  // Sum q*T_s over state samples
  double state_speed_sum_kmh = 0.0;
  long state_samples = 0;
  double carry_speed_mps = 0.0;
  double window_begin_s = 0.0;
};

class Engine {
 public:
  Engine(const Scenario& sc, const RunOptions& opts)
      : sc_(sc), net_(sc.network), opts_(opts), partition_(sc.initial_partition) {
    params_.idm = sc.idm;
    params_.mobil = sc.mobil;
    params_.metanet = sc.metanet;
    params_.segment_target_m = sc.segment_target_m;
    params_.warmup = sc.warmup;
    step_h_ = s_to_h(sc.base_step_s);
  }

  TimeSeriesOutput run();

 private:
  const Scenario& sc_;
  const RoadNetwork& net_;
  RunOptions opts_;

  ClusterPartition partition_;
  ModelParams params_;
  double step_h_ = 0.0;

  std::map<int, MicroState> micro_;
  std::map<int, MacroClusterState> macro_;
  std::map<int, ClusterRuntime> runtime_;
  std::map<int, Rng> rngs_;
  std::map<int, BoundaryChannel> channels_;  // by sensor index
  std::vector<AgentRuntime> agents_;
  SensorSeries replay_;
  CongestionTracker tracker_;
  FrontTrack front_;

  TimeSeriesOutput out_;
  std::map<int, SensorAccumulator> sensor_acc_;

  long next_vehicle_id_ = 1;
  double injected_ = 0.0;
  double departed_ = 0.0;
  double replay_absorbed_ = 0.0;
  double replay_emitted_ = 0.0;
  double residual_ = 0.0;
  long step_ = 0;
  double t_ = 0.0;
  int clamp_events_seen_ = 0;

  // ---- helpers ----------------------------------------------------------

  Rng& rng_for(int cluster_id) {
    auto it = rngs_.find(cluster_id);
    if (it == rngs_.end())
      it = rngs_
               .emplace(cluster_id,
                        Rng(derive_stream_seed(sc_.seed, StreamKind::cluster,
                                               std::uint64_t(cluster_id))))
               .first;
    return it->second;
  }

  void diag(const std::string& msg) { out_.diagnostics.push_back(msg); }

  const Cluster* cluster_at(int road, double pos) const {
    for (std::size_t s = 0; s < net_.sensors.size(); ++s)
      if (net_.road_index(net_.sensors[s].road) == road &&
          std::abs(net_.sensors[s].position_m - pos) < 1e-6)
        return &partition_.clusters[partition_.cluster_on_down_side(int(s))];
    for (const auto& c : partition_.clusters) {
      if (c.repr == Representation::outside) continue;
      for (int u : c.units)
        for (const auto& iv : partition_.graph->units[u].intervals)
          if (iv.road == road && pos >= iv.begin_m - kTiny && pos <= iv.end_m + kTiny)
            return &c;
    }
    return nullptr;
  }

  std::vector<int> draw_route(int start_road, Rng& rng) const {
    std::vector<int> nodes;
    nodes.push_back(net_.node_index(net_.roads[start_road].from_node));
    nodes.push_back(net_.node_index(net_.roads[start_road].to_node));
    int cur = start_road;
    for (int guard = 0; guard < 64; ++guard) {
      const auto& succ = net_.successor_roads(cur);
      if (succ.empty()) break;
      int chosen = succ[0];
      if (succ.size() > 1) {
        std::vector<double> w(succ.size(), 0.0);
        bool any = false;
        for (const auto& tr : sc_.turn_ratios) {
          if (net_.road_index(tr.from_road) != cur) continue;
          for (std::size_t i = 0; i < succ.size(); ++i)
            if (net_.road_index(tr.to_road) == succ[i]) {
              w[i] = tr.p;
              any = true;
            }
        }
        if (!any) w.assign(succ.size(), 1.0);
        chosen = succ[rng.weighted_pick(w)];
      }
      nodes.push_back(net_.node_index(net_.roads[chosen].to_node));
      cur = chosen;
    }
    return nodes;
  }

  void prepare_vehicle(Vehicle& v, int cluster_id) {
    v.id = next_vehicle_id_++;
    if (v.route_nodes.empty()) {
      v.route_nodes = draw_route(v.road, rng_for(cluster_id));
      v.route_next = 1;
    }
  }

  Vehicle fresh_vehicle(int road, double pos, int lane, double speed, Rng& rng) {
    Vehicle v;
    v.id = next_vehicle_id_++;
    v.road = road;
    v.pos_m = pos;
    v.lane = lane;
    v.speed_mps = std::min(speed, sc_.idm.desired_speed_mps);
    v.length_m = sc_.idm.vehicle_length_m;
    v.idm = sc_.idm;
    v.mobil = sc_.mobil;
    v.route_nodes = draw_route(road, rng);
    v.route_next = 1;
    return v;
  }

  int lane_count_at(int road) const { return net_.roads[road].lane_count; }

  // ---- setup ------------------------------------------------------------

  void init_replay() {
    for (const auto& in : sc_.inputs) {
      if (in.kind != InputAgentDef::Kind::replay) continue;
      auto series = ingest_sensor_series(sc_.base_dir / in.series_file);
      for (auto& [id, vec] : series) replay_[id] = std::move(vec);
    }
  }

  void init_states() {
    for (const auto& c : partition_.clusters) {
      if (c.repr == Representation::outside || c.repr == Representation::replay)
        continue;
      if (c.repr == Representation::micro) {
        micro_[c.id] = make_micro_state(net_, partition_, c.id, 0.0);
      } else {
        auto chain = partition_.linear_chain(c.id);
        MacroClusterState m;
        m.segments = tile_segments(net_, *chain, sc_.segment_target_m);
        for (auto& seg : m.segments) {
          seg.density = 0.0;
          seg.speed_kmh = sc_.metanet.free_speed_kmh;
        }
        m.ring = partition_.is_ring(c.id);
        macro_[c.id] = std::move(m);
      }
    }

    // initial traffic
    for (const auto& d : sc_.init_defs) {
      const Cluster* c = nullptr;
      for (const auto& cc : partition_.clusters)
        if (cc.name == d.cluster) c = &cc;
      if (!c) throw ValidationError("init", {"unknown cluster '" + d.cluster + "'"});
      if (d.macro) {
        auto& m = macro_.at(c->id);
        if (d.densities.size() != 1 && d.densities.size() != m.segments.size())
          throw ValidationError(
              "init", {"cluster '" + d.cluster + "': expected 1 or " +
                       std::to_string(m.segments.size()) + " densities"});
        for (std::size_t i = 0; i < m.segments.size(); ++i) {
          double rho = d.densities.size() == 1 ? d.densities[0] : d.densities[i];
          m.segments[i].density = rho;
          m.segments[i].speed_kmh =
              d.speed < 0 ? equilibrium_speed(rho, sc_.metanet) : d.speed;
        }
        injected_ += m.total_vehicles();
      } else {
        auto chain = partition_.linear_chain(c->id);
        if (!chain)
          throw ValidationError("init", {"cluster '" + d.cluster +
                                         "': micro fill needs a linear corridor"});
        MacroClusterState fill;
        fill.segments = tile_segments(net_, *chain, sc_.segment_target_m);
        for (std::size_t i = 0; i < fill.segments.size(); ++i) {
          double rho = d.densities.size() == 1
                           ? d.densities[0]
                           : d.densities[std::min(i, d.densities.size() - 1)];
          auto& seg = fill.segments[i];
          seg.density = rho;
          if (d.speed >= 0) {
            seg.speed_kmh = mps_to_kmh(d.speed);
          } else if (rho > 0) {
            double spacing = kMetersPerKm / rho;
            seg.speed_kmh = mps_to_kmh(equilibrium_speed_for_gap(
                spacing - sc_.idm.vehicle_length_m, sc_.idm));
          } else {
            seg.speed_kmh = mps_to_kmh(sc_.idm.desired_speed_mps);
          }
        }
        WarmupConfig none;
        none.duration_s = 0.0;
        none.dt_s = sc_.micro_dt_s();
        auto dis = disaggregate_macro_to_micro(fill, sc_.idm, none, rng_for(c->id));
        auto& ms = micro_.at(c->id);
        for (auto& v : dis.vehicles) {
          v.mobil = sc_.mobil;
          prepare_vehicle(v, c->id);
          ms.vehicles.push_back(v);
        }
        injected_ += double(dis.count_out);
        residual_ += dis.mass_in - double(dis.count_out);
      }
    }
  }

  void build_channels() {
    std::map<int, BoundaryChannel> next;
    for (std::size_t s = 0; s < net_.sensors.size(); ++s) {
      int up_idx = partition_.cluster_on_up_side(int(s));
      int down_idx = partition_.cluster_on_down_side(int(s));
      const Cluster& up = partition_.clusters[up_idx];
      const Cluster& down = partition_.clusters[down_idx];
      if (up.id == down.id) continue;  // interior sensor
      BoundaryChannel ch;
      ch.sensor = int(s);
      ch.up_id = up.id;
      ch.down_id = down.id;
      // injection geometry: the downstream interval at the sensor
      int du = partition_.graph->down_unit[s];
      if (du >= 0) {
        int sr = net_.road_index(net_.sensors[s].road);
        double sp = net_.sensors[s].position_m;
        for (const auto& iv : partition_.graph->units[du].intervals) {
          if (iv.road == sr && std::abs(iv.begin_m - sp) < 1e-6) {
            ch.inject_road = iv.road;
            ch.inject_pos = iv.begin_m;
          }
        }
        if (ch.inject_road < 0) {
          for (const auto& iv : partition_.graph->units[du].intervals) {
            if (std::abs(iv.begin_m) < 1e-6) {
              const auto& sc = net_.successor_roads(sr);
              if (std::find(sc.begin(), sc.end(), iv.road) != sc.end()) {
                ch.inject_road = iv.road;
                ch.inject_pos = 0.0;
              }
            }
          }
        }
      }
      // carry state over from the previous structure
      if (auto it = channels_.find(int(s)); it != channels_.end()) {
        auto& old = it->second;
        ch.in_mass = old.in_mass;
        ch.in_speed_mps = old.in_speed_mps;
        ch.epoch = old.epoch;
        ch.mass_acc = old.mass_acc;
        ch.queue = std::move(old.queue);
        ch.lane_credit = std::move(old.lane_credit);
      }
      next[int(s)] = std::move(ch);
    }
    // representation changes can strand queued entities in front of a macro
    // cluster: fold them back into boundary mass
    for (auto& [s, ch] : next) {
      const Cluster* down = partition_.find(ch.down_id);
      if (down && down->repr != Representation::micro && !ch.queue.empty()) {
        ch.mass_acc += double(ch.queue.size());
        ch.queue.clear();
      }
    }
    channels_ = std::move(next);
  }

  void init_agents() {
    for (std::size_t i = 0; i < sc_.inputs.size(); ++i) {
      const auto& def = sc_.inputs[i];
      if (def.kind == InputAgentDef::Kind::replay) continue;
      AgentRuntime a;
      a.def = &def;
      a.rng = Rng(derive_stream_seed(sc_.seed, StreamKind::input, i));
      a.road = net_.road_index(def.road);
      for (std::size_t s = 0; s < net_.sensors.size(); ++s)
        if (net_.road_index(net_.sensors[s].road) == a.road &&
            std::abs(net_.sensors[s].position_m - def.position_m) < 1e-6)
          a.entry_sensor = int(s);
      agents_.push_back(std::move(a));
    }
  }

  // ---- per-step phases ----------------------------------------------------

  void prepare(long k) {
    const double t0 = t_;
    const double t1 = t_ + sc_.base_step_s;

    for (const auto& c : partition_.clusters)
      if (c.repr == Representation::micro || c.repr == Representation::macro)
        runtime_[c.id];
    for (auto& [id, rt] : runtime_) {
      rt.inflow_mass = 0.0;
      rt.inflow_momentum = 0.0;
    }

    // input agents
    for (auto& a : agents_) {
      const Cluster* target = cluster_at(a.road, a.def->position_m);
      a.target_cluster = target ? target->id : 0;
      if (!target) continue;
      if (target->repr == Representation::macro) {
        double q = a.def->kind == InputAgentDef::Kind::flow_mass ? a.def->flow_at(t0) : 0.0;
        if (a.def->kind == InputAgentDef::Kind::scripted) {
          // scripted vehicles enter a macro cluster as plain mass
          while (a.next_event < a.def->events.size() &&
                 a.def->events[a.next_event].t_s < t1) {
            q += 1.0 / step_h_;
            ++a.next_event;
          }
        }
        if (q > 0) {
          double mass = q * step_h_;
          auto& rt = runtime_[target->id];
          rt.inflow_mass += mass;
          rt.inflow_momentum += mass * mps_to_kmh(a.def->speed_mps);
          injected_ += mass;
          if (a.entry_sensor >= 0)
            state_sample(a.entry_sensor, q, mps_to_kmh(a.def->speed_mps));
        }
      } else if (target->repr == Representation::micro) {
        if (a.def->kind == InputAgentDef::Kind::flow_mass) {
          SensorReading cmd;
          cmd.flow_vph = a.def->flow_at(t0);
          cmd.mean_speed_mps = a.def->speed_mps;
          int lanes = a.def->lane >= 0 ? 1 : lane_count_at(a.road);
          auto schedule = schedule_generation(cmd, lanes, {}, HeadwayModel::poisson);
          for (auto [when, lane] : draw_arrivals(schedule, t0, t1, a.arrivals, a.rng)) {
            int use_lane = a.def->lane >= 0 ? a.def->lane : lane;
            Vehicle v = fresh_vehicle(a.road, a.def->position_m, use_lane,
                                      a.def->speed_mps, a.rng);
            a.queue.push_back({when, std::move(v)});
            injected_ += 1.0;
          }
        } else {
          while (a.next_event < a.def->events.size() &&
                 a.def->events[a.next_event].t_s < t1) {
            const auto& ev = a.def->events[a.next_event];
            Vehicle v = fresh_vehicle(a.road, a.def->position_m, ev.lane,
                                      ev.speed_mps, a.rng);
            a.queue.push_back({std::max(ev.t_s, t0), std::move(v)});
            injected_ += 1.0;
            ++a.next_event;
          }
        }
      }
    }

    // boundary exchange into each downstream cluster
    for (auto& [s, ch] : channels_) {
      const Cluster* up = partition_.find(ch.up_id);
      const Cluster* down = partition_.find(ch.down_id);
      // anything a micro upstream published at the last barrier
      double mass = ch.in_mass;
      double speed_mps = ch.in_speed_mps;
      ch.in_mass = 0.0;

      if (up && up->repr == Representation::macro) {
        // synchronous peek: exactly the mass the upstream sheds this step
        const auto& m = macro_.at(ch.up_id);
        mass += m.segments.back().flow_vph() * step_h_;
        speed_mps = kmh_to_mps(m.segments.back().speed_kmh);
      } else if (up && up->repr == Representation::replay) {
        auto it = replay_.find(net_.sensors[s].id);
        SeriesPoint p = it != replay_.end() ? series_at(it->second, t0) : SeriesPoint{};
        mass += p.flow_vph * step_h_;
        speed_mps = p.speed_mps;
        replay_emitted_ += p.flow_vph * step_h_;
      } else if (up && up->repr == Representation::micro) {
        // published at the previous barrier
        assert(ch.epoch < 0 || ch.epoch == k - 1);
      }

      if (!down || down->repr == Representation::outside) {
        departed_ += mass;
        continue;
      }
      if (down->repr == Representation::replay) {
        replay_absorbed_ += mass;
        continue;
      }
      if (down->repr == Representation::macro) {
        auto& rt = runtime_[ch.down_id];
        rt.inflow_mass += mass;
        rt.inflow_momentum += mass * mps_to_kmh(speed_mps);
        continue;
      }
      // micro downstream: integerize and schedule
      ch.mass_acc += mass;
      ch.in_speed_mps = speed_mps;
      long n = long(std::floor(ch.mass_acc));
      if (n > 0 && ch.inject_road >= 0) {
        ch.mass_acc -= double(n);
        int lanes = lane_count_at(ch.inject_road);
        if (int(ch.lane_credit.size()) != lanes) ch.lane_credit.assign(lanes, 0.0);
        for (long i = 0; i < n; ++i) {
          int lane = 0;
          for (int l = 0; l < lanes; ++l) ch.lane_credit[l] += 1.0 / lanes;
          for (int l = 1; l < lanes; ++l)
            if (ch.lane_credit[l] > ch.lane_credit[lane]) lane = l;
          ch.lane_credit[lane] -= 1.0;
          Vehicle v = fresh_vehicle(ch.inject_road, ch.inject_pos, lane,
                                    speed_mps, rng_for(ch.down_id));
          // drivers presort: enter on a lane that serves the drawn route
          auto required = navigation_target(v, net_);
          if (!std::binary_search(required.begin(), required.end(), v.lane) &&
              !required.empty()) {
            v.lane = required[std::size_t(i) % required.size()];
          }
          ch.queue.push_back({t0 + (i + 0.5) * sc_.base_step_s / double(n), std::move(v)});
        }
      }
    }

    // macro boundaries for this step
    for (auto& [id, m] : macro_) {
      if (m.ring) continue;
      auto& rt = runtime_[id];
      m.boundary.upstream_flow_vph = rt.inflow_mass / step_h_;
      m.boundary.upstream_speed_kmh =
          rt.inflow_mass > kTiny ? rt.inflow_momentum / rt.inflow_mass
                                 : m.segments.front().speed_kmh;
      m.boundary.downstream_density = downstream_density_for(id);
    }
  }

  double downstream_density_for(int cluster_id) {
    const Cluster* c = partition_.find(cluster_id);
    // the channel at this cluster's downstream boundary
    for (auto& [s, ch] : channels_) {
      if (ch.up_id != cluster_id) continue;
      const Cluster* down = partition_.find(ch.down_id);
      if (!down) continue;
      int lanes = 1;
      if (ch.inject_road >= 0) lanes = lane_count_at(ch.inject_road);
      if (down->repr == Representation::macro) {
        const auto& dm = macro_.at(down->id);
        return dm.segments.front().density;
      }
      if (down->repr == Representation::replay) {
        auto it = replay_.find(net_.sensors[s].id);
        if (it == replay_.end()) return -1.0;
        SeriesPoint p = series_at(it->second, t_);
        if (p.flow_vph <= 0 && p.speed_mps <= 0) return -1.0;
        if (p.speed_mps < kmh_to_mps(1.0)) return params_.metanet.jam_density;
        return p.flow_vph / (mps_to_kmh(p.speed_mps) * lanes);
      }
      if (down->repr == Representation::micro) {
        // head state over the first stretch of the downstream cluster
        const auto& ms = micro_.at(down->id);
        if (ch.inject_road < 0) return -1.0;
        double win_end = std::min(ch.inject_pos + 200.0,
                                  net_.roads[ch.inject_road].length_m);
        double win_len = win_end - ch.inject_pos;
        if (win_len < 10.0) return -1.0;
        long count = 0;
        double speed_sum = 0.0;
        for (const auto& v : ms.vehicles)
          if (v.road == ch.inject_road && v.pos_m >= ch.inject_pos &&
              v.pos_m < win_end) {
            ++count;
            speed_sum += v.speed_mps;
          }
        if (count == 0) return -1.0;
        return double(count) / (m_to_km(win_len) * lanes);
      }
    }
    (void)c;
    return -1.0;  // network exit: zero gradient
  }

  void step_all() {
    std::vector<int> ids;
    for (const auto& c : partition_.clusters)
      if (c.repr == Representation::micro || c.repr == Representation::macro)
        ids.push_back(c.id);

    auto work = [&](int id) {
      const Cluster* c = partition_.find(id);
      if (c->repr == Representation::micro)
        step_micro_one(id);
      else
        step_macro_one(id);
    };

    int threads = opts_.worker_threads;
    if (threads <= 0) threads = int(std::thread::hardware_concurrency());
    threads = std::max(1, std::min<int>(threads, int(ids.size())));
    std::exception_ptr failure;
    if (threads <= 1) {
      for (int id : ids) work(id);
    } else {
      std::atomic<std::size_t> next{0};
      std::mutex fail_mutex;
      std::vector<std::thread> pool;
      for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
          for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= ids.size()) break;
            try {
              work(ids[i]);
            } catch (...) {
              std::lock_guard<std::mutex> lock(fail_mutex);
              if (!failure) failure = std::current_exception();
            }
          }
        });
      for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);
  }

  void step_micro_one(int id) {
    MicroState& ms = micro_.at(id);
    auto& rt = runtime_.at(id);
    const double dt = sc_.micro_dt_s();

    std::vector<BoundaryChannel*> feeds;
    for (auto& [s, ch] : channels_)
      if (ch.down_id == id && !ch.queue.empty()) feeds.push_back(&ch);
    std::vector<AgentRuntime*> taps;
    for (auto& a : agents_)
      if (a.target_cluster == id && !a.queue.empty()) taps.push_back(&a);

    for (int j = 0; j < sc_.micro_substeps; ++j) {
      const double sub_end = ms.time_s + dt;
      for (auto* ch : feeds) {
        while (!ch->queue.empty() && ch->queue.front().due_s <= sub_end + kTiny) {
          Vehicle& v = ch->queue.front().vehicle;
          // the head vehicle takes any route-compatible lane with a safe gap
          int chosen = -1;
          if (injection_safe(ms, v.road, v.lane, v.pos_m, v.speed_mps, v.idm,
                             v.mobil.safe_braking)) {
            chosen = v.lane;
          } else {
            for (int lane : navigation_target(v, net_)) {
              if (lane == v.lane) continue;
              if (injection_safe(ms, v.road, lane, v.pos_m, v.speed_mps, v.idm,
                                 v.mobil.safe_braking)) {
                chosen = lane;
                break;
              }
            }
          }
          if (chosen < 0) break;
          v.lane = chosen;
          ms.vehicles.push_back(std::move(v));
          ch->queue.pop_front();
        }
      }
      for (auto* a : taps) {
        while (!a->queue.empty() && a->queue.front().due_s <= sub_end + kTiny) {
          Vehicle& v = a->queue.front().vehicle;
          if (!injection_safe(ms, v.road, v.lane, v.pos_m, v.speed_mps, v.idm,
                              v.mobil.safe_braking)) {
            ++a->deferred;
            break;
          }
          if (a->entry_sensor >= 0)
            rt.events.push_back({v.id, a->entry_sensor, v.speed_mps, sub_end});
          ms.vehicles.push_back(std::move(v));
          a->queue.pop_front();
        }
      }
      auto res = step_micro_cluster(ms, dt);
      rt.events.insert(rt.events.end(), res.crossings.begin(), res.crossings.end());
      rt.departures.insert(rt.departures.end(), res.departures.begin(),
                           res.departures.end());
    }
  }

  void step_macro_one(int id) {
    auto& m = macro_.at(id);
    auto& rt = runtime_.at(id);
    rt.step_flows = segment_flows(m.segments);
    rt.step_speeds.clear();
    for (const auto& seg : m.segments) rt.step_speeds.push_back(seg.speed_kmh);
    rt.mass_before = m.total_vehicles();
    rt.expected_delta =
        m.ring ? 0.0
               : step_h_ * (m.boundary.upstream_flow_vph - rt.step_flows.back());
    step_macro_cluster(m, params_.metanet);
  }

  void state_sample(int sensor, double flow_vph, double speed_kmh) {
    auto& acc = sensor_acc_[sensor];
    acc.state_mass += flow_vph * step_h_;
    acc.state_speed_sum_kmh += speed_kmh;
    acc.state_samples += 1;
  }

  void collect(long k) {
    const double t_end = t_;  // run() advances the clock before collecting

    // deterministic event order: by cluster id, preserving per-cluster order
    for (auto& [id, rt] : runtime_) {
      for (const auto& ev : rt.events) {
        auto& acc = sensor_acc_[ev.sensor];
        acc.event_count += 1;
        acc.event_speed_sum += ev.speed_mps;
      }
    }

    // departures cross boundaries
    for (auto& [id, rt] : runtime_) {
      for (auto& dep : rt.departures) {
        auto chit = channels_.find(dep.crossing.sensor);
        if (chit == channels_.end()) {
          departed_ += 1.0;  // boundary without a channel: leaves the world
          continue;
        }
        auto& ch = chit->second;
        const Cluster* down = partition_.find(ch.down_id);
        if (!down || down->repr == Representation::outside) {
          departed_ += 1.0;
        } else if (down->repr == Representation::replay) {
          replay_absorbed_ += 1.0;
        } else if (down->repr == Representation::macro) {
          ch.in_mass += 1.0;
          ch.in_speed_mps = dep.crossing.speed_mps;
        } else {
          // entity handover into the next micro cluster
          Vehicle v = dep.vehicle;
          if (ch.inject_road >= 0) {
            if (v.road != ch.inject_road) {
              int lane = -1;
              for (const auto& l : net_.lane_links(v.road, ch.inject_road))
                if (l.from_lane == v.lane) lane = l.to_lane;
              if (lane < 0) lane = std::min(v.lane, lane_count_at(ch.inject_road) - 1);
              int to_node = net_.node_index(net_.roads[ch.inject_road].to_node);
              bool found = false;
              for (std::size_t i = v.route_next; i < v.route_nodes.size(); ++i)
                if (v.route_nodes[i] == to_node) {
                  v.route_next = i;
                  found = true;
                  break;
                }
              v.road = ch.inject_road;
              v.lane = lane;
              if (!found) {
                v.route_nodes = draw_route(v.road, rng_for(ch.down_id));
                v.route_next = 1;
              }
            }
            v.pos_m = ch.inject_pos;
            v.served_stop_pos = -1.0;
            ch.queue.push_back({t_end, std::move(v)});
          } else {
            departed_ += 1.0;  // no geometry to land on
          }
        }
      }
    }

    // micro upstreams publish their barrier readings
    for (auto& [s, ch] : channels_) {
      const Cluster* up = partition_.find(ch.up_id);
      if (up && up->repr == Representation::micro) {
        long n = 0;
        double speed_sum = 0.0;
        auto rit = runtime_.find(ch.up_id);
        if (rit != runtime_.end())
          for (const auto& ev : rit->second.events)
            if (ev.sensor == s) {
              ++n;
              speed_sum += ev.speed_mps;
            }
        if (n > 0) ch.in_speed_mps = speed_sum / double(n);
        ch.epoch = int(k);
      }
    }

    // macro clusters: conservation residual + virtual sensor samples
    for (auto& [id, m] : macro_) {
      auto& rt = runtime_[id];
      if (!rt.step_flows.empty()) {
        double actual = m.total_vehicles() - rt.mass_before;
        double excess = rt.expected_delta - actual;
        if (std::abs(excess) > 1e-12) residual_ += excess;
      }
      const Cluster* c = partition_.find(id);
      auto sample_from_segment = [&](int sensor, bool at_end) {
        int sr = net_.road_index(net_.sensors[sensor].road);
        double sp = net_.sensors[sensor].position_m;
        for (std::size_t i = 0; i < m.segments.size(); ++i) {
          const auto& seg = m.segments[i];
          bool match = at_end ? (seg.road == sr && std::abs(seg.end_m - sp) < 1e-6)
                              : (seg.road == sr && sp >= seg.begin_m - 1e-6 &&
                                 sp <= seg.end_m + 1e-6);
          if (match && i < rt.step_flows.size()) {
            state_sample(sensor, rt.step_flows[i], rt.step_speeds[i]);
            return true;
          }
        }
        return false;
      };
      for (int s : c->output_sensors)
        if (!sample_from_segment(s, true) && !rt.step_flows.empty())
          state_sample(s, rt.step_flows.back(), rt.step_speeds.back());
      for (int s : c->interior_sensors)
        if (!sample_from_segment(s, true)) sample_from_segment(s, false);
    }

    // replay clusters: their sensors replay the ingested series
    for (const auto& c : partition_.clusters) {
      if (c.repr != Representation::replay) continue;
      std::vector<int> sensors = c.output_sensors;
      sensors.insert(sensors.end(), c.interior_sensors.begin(),
                     c.interior_sensors.end());
      std::sort(sensors.begin(), sensors.end());
      sensors.erase(std::unique(sensors.begin(), sensors.end()), sensors.end());
      for (int s : sensors) {
        auto it = replay_.find(net_.sensors[s].id);
        if (it == replay_.end()) continue;
        SeriesPoint p = series_at(it->second, t_);
        state_sample(s, p.flow_vph, mps_to_kmh(p.speed_mps));
      }
    }

    for (auto& a : agents_)
      if (a.deferred > a.deferred_logged) {
        diag("t=" + format_num(t_end) + " input on road '" + a.def->road +
             "' deferred (queue length " + std::to_string(a.queue.size()) + ")");
        a.deferred_logged = a.deferred;
      }

    // clamp diagnostics
    int clamps = 0;
    for (const auto& [id, m] : macro_) clamps += m.clamp_events;
    if (clamps > clamp_events_seen_) {
      diag("t=" + std::to_string(t_end) + " macro state clamped (" +
           std::to_string(clamps - clamp_events_seen_) + " events)");
      clamp_events_seen_ = clamps;
    }

    flush_readings(t_end);
    emit_segment_rows(t_end);
    ledger_row(t_end);

    for (auto& [id, rt] : runtime_) {
      rt.events.clear();
      rt.departures.clear();
    }
  }

  void flush_readings(double t_end) {
    for (std::size_t s = 0; s < net_.sensors.size(); ++s) {
      auto& acc = sensor_acc_[int(s)];
      double interval = net_.sensors[s].interval_s;
      if (t_end - acc.window_begin_s < interval - kTiny) continue;
      SensorReading r;
      r.sensor = int(s);
      r.t_begin_s = acc.window_begin_s;
      r.t_end_s = t_end;
      double dt_h = s_to_h(t_end - acc.window_begin_s);
      double mass = double(acc.event_count) + acc.state_mass;
      r.count = acc.event_count + long(std::llround(acc.state_mass));
      r.flow_vph = mass / dt_h;
      if (acc.event_count > 0) {
        r.mean_speed_mps = acc.event_speed_sum / double(acc.event_count);
      } else if (acc.state_samples > 0) {
        r.mean_speed_mps =
            kmh_to_mps(acc.state_speed_sum_kmh / double(acc.state_samples));
      } else {
        r.mean_speed_mps = acc.carry_speed_mps;  // carried forward
      }
      r.epoch = int(step_);
      acc.carry_speed_mps = r.mean_speed_mps;
      acc.event_count = 0;
      acc.event_speed_sum = 0.0;
      acc.state_mass = 0.0;
      acc.state_speed_sum_kmh = 0.0;
      acc.state_samples = 0;
      acc.window_begin_s = t_end;
      out_.readings[net_.sensors[s].id].push_back(r);
    }
  }

  void emit_segment_rows(double t_end) {
    for (const auto& c : partition_.clusters) {
      if (c.repr == Representation::macro) {
        const auto& m = macro_.at(c.id);
        auto& rows = out_.segments[c.name];
        for (std::size_t i = 0; i < m.segments.size(); ++i) {
          const auto& seg = m.segments[i];
          rows.push_back({t_end, int(i), seg.density, seg.speed_kmh, seg.flow_vph()});
        }
      } else if (c.repr == Representation::micro) {
        const auto& ms = micro_.at(c.id);
        auto& rows = out_.segments[c.name];
        int idx = 0;
        for (int u : c.units) {
          const auto& unit = partition_.graph->units[u];
          double lane_km = 0.0;
          for (const auto& iv : unit.intervals)
            lane_km += m_to_km(iv.length_m()) * lane_count_at(iv.road);
          long count = 0;
          double speed_sum = 0.0;
          for (const auto& v : ms.vehicles)
            for (const auto& iv : unit.intervals)
              if (v.road == iv.road && v.pos_m >= iv.begin_m - kTiny &&
                  v.pos_m <= iv.end_m + kTiny) {
                ++count;
                speed_sum += v.speed_mps;
                break;
              }
          double rho = lane_km > 0 ? double(count) / lane_km : 0.0;
          double v_kmh = count > 0 ? mps_to_kmh(speed_sum / double(count))
                                   : mps_to_kmh(sc_.idm.desired_speed_mps);
          rows.push_back({t_end, idx++, rho, v_kmh, rho * v_kmh});
        }
      }
    }
  }

  void ledger_row(double t_end) {
    TimeSeriesOutput::LedgerRow row;
    row.t_s = t_end;
    row.injected = injected_;
    for (const auto& [id, ms] : micro_) row.micro += double(ms.vehicles.size());
    for (const auto& [id, m] : macro_) row.macro_mass += m.total_vehicles();
    for (const auto& a : agents_) row.input_queue += double(a.queue.size());
    for (const auto& [s, ch] : channels_)
      row.boundary_pending += ch.mass_acc + double(ch.queue.size()) + ch.in_mass;
    row.departed = departed_;
    row.replay_absorbed = replay_absorbed_;
    row.replay_emitted = replay_emitted_;
    row.residual = residual_;
    row.balance = row.injected + row.replay_emitted - row.micro - row.macro_mass -
                  row.input_queue - row.boundary_pending - row.departed -
                  row.replay_absorbed - row.residual;
    out_.ledger.push_back(row);
  }

  // ---- control ------------------------------------------------------------

  ControlSnapshot snapshot() {
    ControlSnapshot snap;
    snap.t_s = t_;
    for (const auto& c : partition_.clusters) {
      if (c.repr != Representation::micro && c.repr != Representation::macro)
        continue;
      ClusterMetrics m;
      m.cluster_id = c.id;
      m.repr = c.repr;
      if (c.repr == Representation::macro) {
        const auto& mc = macro_.at(c.id);
        m.vehicle_count = mc.total_vehicles();
        for (const auto& seg : mc.segments) m.segment_densities.push_back(seg.density);
        m.macro_eligible = true;
      } else {
        const auto& ms = micro_.at(c.id);
        m.vehicle_count = double(ms.vehicles.size());
        for (int u : c.units) {
          const auto& unit = partition_.graph->units[u];
          double lane_km = 0.0;
          long count = 0;
          for (const auto& iv : unit.intervals) {
            lane_km += m_to_km(iv.length_m()) * lane_count_at(iv.road);
            for (const auto& v : ms.vehicles)
              if (v.road == iv.road && v.pos_m >= iv.begin_m - kTiny &&
                  v.pos_m <= iv.end_m + kTiny)
                ++count;
          }
          m.segment_densities.push_back(lane_km > 0 ? double(count) / lane_km : 0.0);
        }
        m.macro_eligible = partition_.linear_chain(c.id).has_value();
      }
      snap.clusters.push_back(std::move(m));
    }
    return snap;
  }

  std::vector<CorridorSample> corridor_samples() {
    std::vector<CorridorSample> samples;
    // follow clusters downstream from the one fed by the outside
    int cur = -1;
    for (const auto& c : partition_.clusters) {
      if (c.repr == Representation::outside) continue;
      for (int s : c.input_sensors)
        if (partition_.clusters[partition_.cluster_on_up_side(s)].repr ==
            Representation::outside)
          cur = c.id;
      if (cur >= 0) break;
    }
    double offset = 0.0;
    int guard = 0;
    auto snap = snapshot();
    while (cur >= 0 && guard++ < 64) {
      const Cluster* c = partition_.find(cur);
      if (!c) break;
      const ClusterMetrics* m = nullptr;
      for (const auto& cm : snap.clusters)
        if (cm.cluster_id == cur) m = &cm;
      if (c->repr == Representation::macro) {
        const auto& mc = macro_.at(cur);
        for (std::size_t i = 0; i < mc.segments.size(); ++i) {
          const auto& seg = mc.segments[i];
          double len = km_to_m(seg.length_km);
          samples.push_back({offset + 0.5 * len, seg.density, cur,
                             unit_of_position(*c, seg.road, seg.begin_m)});
          offset += len;
        }
      } else if (m) {
        for (std::size_t i = 0; i < c->units.size(); ++i) {
          const auto& unit = partition_.graph->units[c->units[i]];
          samples.push_back({offset + 0.5 * unit.length_m,
                             i < m->segment_densities.size() ? m->segment_densities[i]
                                                             : 0.0,
                             cur, c->units[i]});
          offset += unit.length_m;
        }
      } else {
        for (int u : c->units) offset += partition_.graph->units[u].length_m;
      }
      // next cluster downstream
      int next_id = -1;
      for (int s : c->output_sensors) {
        int didx = partition_.cluster_on_down_side(s);
        const Cluster& down = partition_.clusters[didx];
        if (down.repr != Representation::outside) next_id = down.id;
      }
      cur = next_id;
    }
    return samples;
  }

  int unit_of_position(const Cluster& c, int road, double pos) {
    for (int u : c.units)
      for (const auto& iv : partition_.graph->units[u].intervals)
        if (iv.road == road && pos >= iv.begin_m - 1e-6 && pos <= iv.end_m + 1e-6)
          return u;
    return c.units.empty() ? -1 : c.units.front();
  }

  void control_phase(long k) {
    if (sc_.policy.mode == PolicyMode::fixed) return;
    if ((k + 1) % sc_.policy.control_period != 0) return;

    auto snap = snapshot();
    for (const auto& m : snap.clusters)
      tracker_.update(m.cluster_id, m.segment_densities, sc_.policy);

    auto commands = evaluate_policy(snap, sc_.policy, tracker_, partition_);
    if (sc_.policy.mode == PolicyMode::shockwave && sc_.policy.shockwave_tracking) {
      auto fr = track_front(corridor_samples(), front_, sc_.policy, partition_);
      front_ = fr.track;
      commands.insert(commands.end(), fr.commands.begin(), fr.commands.end());
    }
    if (commands.empty()) return;

    double over_budget = 0.0;
    for (const auto& m : snap.clusters)
      if (m.repr == Representation::micro) over_budget += m.vehicle_count;
    if (over_budget > sc_.policy.micro_vehicle_budget) {
      bool promotes = false;
      for (const auto& c : commands)
        if (c.kind == CommandKind::to_micro) promotes = true;
      if (promotes)
        diag("t=" + std::to_string(t_) + " budget exceeded while congestion active");
    }

    WorldView w;
    w.net = &net_;
    w.graph = &sc_.graph;
    w.partition = &partition_;
    w.micro = &micro_;
    w.macro = &macro_;
    w.params = &params_;
    w.now_s = t_;
    w.cluster_rng = [this](int id) -> Rng& { return rng_for(id); };
    w.prepare_vehicle = [this](Vehicle& v, int id) { prepare_vehicle(v, id); };
    w.diagnostic = [this](const std::string& msg) { diag(msg); };
    w.conversion_residual = &residual_;

    auto applied = apply_commands(w, commands);
    bool any = false;
    for (const auto& a : applied) {
      if (!a.ok) continue;
      any = true;
      ++out_.commands_applied;
      std::string line = "t=" + format_num(t_) + " " +
                         to_string(a.cmd.kind) + " a=" + std::to_string(a.cmd.cluster_a);
      if (a.cmd.cluster_b >= 0) line += " b=" + std::to_string(a.cmd.cluster_b);
      if (a.cmd.sensor >= 0) line += " sensor=" + net_.sensors[a.cmd.sensor].id;
      out_.command_log.push_back(line);
    }
    if (any) {
      build_channels();
      runtime_.clear();
      // clusters created by geometry commands start from the entry condition
      auto snap2 = snapshot();
      for (const auto& m : snap2.clusters) tracker_.seed(m.cluster_id, tracker_.congested(m.cluster_id));
    }
  }

  static std::string format_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
  }
};

TimeSeriesOutput Engine::run() {
  init_replay();
  init_states();
  init_agents();
  build_channels();
  for (std::size_t s = 0; s < net_.sensors.size(); ++s) sensor_acc_[int(s)] = {};

  const long total = sc_.total_steps();
  for (step_ = 0; step_ < total; ++step_) {
    try {
      prepare(step_);
      step_all();
      t_ += sc_.base_step_s;
      for (auto& [id, ms] : micro_) ms.time_s = t_;  // keep clocks aligned
      collect(step_);
      control_phase(step_);
    } catch (const std::exception& e) {
      throw SimulationError("step " + std::to_string(step_) + " (t=" +
                            std::to_string(t_) + " s): " + e.what());
    }
  }
  out_.steps = total;
  out_.injected_total = injected_;
  out_.departed_total = departed_;
  return out_;
}

}  // namespace

TimeSeriesOutput run(const Scenario& scenario, const RunOptions& opts) {
  Engine engine(scenario, opts);
  return engine.run();
}

// ---------------------------------------------------------------------------
// file emission

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace

void emit_outputs(const TimeSeriesOutput& out, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec && !std::filesystem::is_directory(dir))
    throw SimulationError("cannot create output directory '" + dir.string() + "'");

  for (const auto& [sensor, rows] : out.readings) {
    std::ofstream f(dir / ("readings." + sensor + ".csv"));
    if (!f) throw SimulationError("unwritable output directory '" + dir.string() + "'");
    f << "t_begin_s,t_end_s,count,flow_veh_per_h,mean_speed_m_per_s\n";
    for (const auto& r : rows)
      f << num(r.t_begin_s) << "," << num(r.t_end_s) << "," << r.count << ","
        << num(r.flow_vph) << "," << num(r.mean_speed_mps) << "\n";
  }
  for (const auto& [cluster, rows] : out.segments) {
    std::ofstream f(dir / ("segments." + cluster + ".csv"));
    f << "t_s,segment,density_veh_per_km_lane,speed_km_per_h,flow_veh_per_h\n";
    for (const auto& r : rows)
      f << num(r.t_s) << "," << r.segment << "," << num(r.density) << ","
        << num(r.speed_kmh) << "," << num(r.flow_vph) << "\n";
  }
  {
    std::ofstream f(dir / "commands.log");
    for (const auto& line : out.command_log) f << line << "\n";
  }
  {
    std::ofstream f(dir / "ledger.csv");
    f << "t_s,injected,micro,macro_mass,input_queue,boundary_pending,departed,"
         "replay_absorbed,replay_emitted,residual,balance\n";
    for (const auto& r : out.ledger)
      f << num(r.t_s) << "," << num(r.injected) << "," << num(r.micro) << ","
        << num(r.macro_mass) << "," << num(r.input_queue) << ","
        << num(r.boundary_pending) << "," << num(r.departed) << ","
        << num(r.replay_absorbed) << "," << num(r.replay_emitted) << ","
        << num(r.residual) << "," << num(r.balance) << "\n";
  }
  if (!out.diagnostics.empty()) {
    std::ofstream f(dir / "diagnostics.log");
    for (const auto& line : out.diagnostics) f << line << "\n";
  }
}

}  // namespace hf
