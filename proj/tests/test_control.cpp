#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <map>

#include "doctest.h"
#include "helpers.hpp"
#include "hybridflow/control.hpp"

using namespace hf;
using namespace hf::test;

namespace {

ControlPolicy policy(PolicyMode mode) {
  ControlPolicy p;
  p.mode = mode;
  p.micro_vehicle_budget = 100;
  p.congestion_on = 40;
  p.congestion_off = 30;
  p.control_period = 3;
  return p;
}

ClusterMetrics metrics(int id, Representation repr, double count,
                       std::vector<double> densities, bool eligible = true) {
  ClusterMetrics m;
  m.cluster_id = id;
  m.repr = repr;
  m.vehicle_count = count;
  m.segment_densities = std::move(densities);
  m.macro_eligible = eligible;
  return m;
}

using Groups = std::vector<std::vector<int>>;

// a self-contained world over a linear corridor for apply_commands tests
struct Fixture {
  RoadNetwork net;
  SensorGraph graph;
  ClusterPartition partition;
  std::map<int, MicroState> micro;
  std::map<int, MacroClusterState> macro;
  ModelParams params;
  std::map<int, Rng> rngs;
  std::vector<std::string> diags;
  double residual = 0.0;
  long next_id = 1;

  explicit Fixture(const Groups& groups,
                   double road_len = 6000.0, int lanes = 2,
                   std::vector<double> cuts = {0, 2000, 4000, 6000}) {
    net = linear_network(road_len, lanes, cuts);
    graph = derive_sensor_graph(net);
    partition = build_clusters(graph, groups);
    partition.net = &net;
    partition.graph = &graph;
    params.segment_target_m = 500.0;
    params.warmup = {30.0, 0.5};
    for (auto& c : partition.clusters) {
      if (c.repr == Representation::outside) continue;
      micro[c.id] = make_micro_state(net, partition, c.id, 0.0);
    }
  }

  void make_macro(int id, double rho) {
    auto chain = partition.linear_chain(id);
    REQUIRE(chain.has_value());
    MacroClusterState m;
    m.segments = tile_segments(net, *chain, params.segment_target_m);
    for (auto& seg : m.segments) {
      seg.density = rho;
      seg.speed_kmh = equilibrium_speed(rho, params.metanet);
    }
    micro.erase(id);
    macro[id] = std::move(m);
    partition.find(id)->repr = Representation::macro;
  }

  void fill_micro(int id, double rho_per_lane) {
    auto chain = partition.linear_chain(id);
    REQUIRE(chain.has_value());
    MacroClusterState fill;
    fill.segments = tile_segments(net, *chain, params.segment_target_m);
    for (auto& seg : fill.segments) {
      seg.density = rho_per_lane;
      seg.speed_kmh = equilibrium_speed(rho_per_lane, params.metanet);
    }
    Rng rng(42);
    auto out = disaggregate_macro_to_micro(fill, params.idm, {0.0, 0.5}, rng);
    auto& ms = micro.at(id);
    for (auto& v : out.vehicles) {
      v.id = next_id++;
      v.route_nodes = {0, 1};
      v.route_next = 1;
      ms.vehicles.push_back(v);
    }
  }

  WorldView world() {
    WorldView w;
    w.net = &net;
    w.graph = &graph;
    w.partition = &partition;
    w.micro = &micro;
    w.macro = &macro;
    w.params = &params;
    w.now_s = 0.0;
    w.cluster_rng = [this](int id) -> Rng& {
      auto it = rngs.find(id);
      if (it == rngs.end()) it = rngs.emplace(id, Rng(1000 + id)).first;
      return it->second;
    };
    w.prepare_vehicle = [this](Vehicle& v, int) {
      v.id = next_id++;
      if (v.route_nodes.empty()) {
        v.route_nodes = {0, 1};
        v.route_next = 1;
      }
    };
    w.diagnostic = [this](const std::string& m) { diags.push_back(m); };
    w.conversion_residual = &residual;
    return w;
  }

  double total_vehicles() const {
    double t = 0;
    for (const auto& [id, ms] : micro) t += double(ms.vehicles.size());
    for (const auto& [id, m] : macro) t += m.total_vehicles();
    return t;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// hysteresis

TEST_CASE("congestion state: all clear is not congested") {
  CongestionTracker t;
  auto p = policy(PolicyMode::jam_probe);
  CHECK(!t.update(1, {0, 0, 0}, p));
}

TEST_CASE("congestion state: the entry threshold is inclusive") {
  CongestionTracker t;
  auto p = policy(PolicyMode::jam_probe);
  CHECK(t.update(1, {10, p.congestion_on, 5}, p));
}

TEST_CASE("congestion state: holds between off and on (hysteresis)") {
  CongestionTracker t;
  auto p = policy(PolicyMode::jam_probe);
  CHECK(t.update(1, {45}, p));         // enter
  CHECK(t.update(1, {35}, p));         // inside the band: stays congested
  CHECK(t.update(1, {38}, p));         // oscillation inside the band
  CHECK(t.update(1, {32}, p));
  CHECK(!t.update(1, {28}, p));        // below off: released
  CHECK(!t.update(1, {35}, p));        // band does not re-trigger from below
  CHECK(t.update(1, {41}, p));         // only crossing on does
}

// ---------------------------------------------------------------------------
// evaluate_policy

TEST_CASE("static mode never issues commands") {
  auto net = linear_network(4000, 2, {0, 2000, 4000});
  auto g = derive_sensor_graph(net);
  auto part = minimal_cut(g);
  CongestionTracker t;
  ControlSnapshot snap;
  snap.clusters.push_back(metrics(1, Representation::micro, 500, {50, 60}));
  CHECK(evaluate_policy(snap, policy(PolicyMode::fixed), t, part).empty());
}

TEST_CASE("cpu_reduce demotes the fullest uncongested micro cluster") {
  auto net = linear_network(4000, 2, {0, 2000, 4000});
  auto g = derive_sensor_graph(net);
  auto part = minimal_cut(g);
  CongestionTracker t;
  auto p = policy(PolicyMode::cpu_reduce);

  ControlSnapshot snap;
  snap.clusters.push_back(metrics(1, Representation::micro, 70, {45, 20}));
  snap.clusters.push_back(metrics(2, Representation::micro, 60, {18, 15}));
  for (const auto& m : snap.clusters) t.update(m.cluster_id, m.segment_densities, p);

  auto cmds = evaluate_policy(snap, p, t, part);
  REQUIRE(cmds.size() == 1);
  CHECK(cmds[0].kind == CommandKind::to_macro);
  // cluster 1 has more vehicles but is congested: the accuracy need wins
  CHECK(cmds[0].cluster_a == 2);
}

TEST_CASE("cpu_reduce stays quiet under budget") {
  auto net = linear_network(4000, 2, {0, 2000, 4000});
  auto g = derive_sensor_graph(net);
  auto part = minimal_cut(g);
  CongestionTracker t;
  ControlSnapshot snap;
  snap.clusters.push_back(metrics(1, Representation::micro, 50, {10}));
  CHECK(evaluate_policy(snap, policy(PolicyMode::cpu_reduce), t, part).empty());
}

TEST_CASE("balance promotes a congested macro cluster within budget") {
  auto net = linear_network(6000, 2, {0, 2000, 4000, 6000});
  auto g = derive_sensor_graph(net);
  auto part = minimal_cut(g);
  CongestionTracker t;
  auto p = policy(PolicyMode::balance);

  ControlSnapshot snap;
  snap.clusters.push_back(metrics(1, Representation::macro, 80, {55, 30}));
  snap.clusters.push_back(metrics(2, Representation::micro, 60, {12}));
  snap.clusters.push_back(metrics(3, Representation::micro, 20, {8}));
  for (const auto& m : snap.clusters) t.update(m.cluster_id, m.segment_densities, p);

  auto cmds = evaluate_policy(snap, p, t, part);
  REQUIRE(cmds.size() == 2);
  CHECK(cmds[0].kind == CommandKind::to_macro);
  CHECK(cmds[0].cluster_a == 2);  // demote the fullest to make room
  CHECK(cmds[1].kind == CommandKind::to_micro);
  CHECK(cmds[1].cluster_a == 1);
}

TEST_CASE("jam_probe promotes on congestion and demotes when it clears") {
  auto net = linear_network(6000, 2, {0, 2000, 4000, 6000});
  auto g = derive_sensor_graph(net);
  auto part = minimal_cut(g);
  CongestionTracker t;
  auto p = policy(PolicyMode::jam_probe);

  ControlSnapshot snap;
  snap.clusters.push_back(metrics(1, Representation::macro, 50, {48}));
  snap.clusters.push_back(metrics(2, Representation::micro, 10, {9}));
  for (const auto& m : snap.clusters) t.update(m.cluster_id, m.segment_densities, p);

  auto cmds = evaluate_policy(snap, p, t, part);
  REQUIRE(cmds.size() == 2);
  CHECK(cmds[0].kind == CommandKind::to_micro);
  CHECK(cmds[0].cluster_a == 1);
  CHECK(cmds[1].kind == CommandKind::to_macro);
  CHECK(cmds[1].cluster_a == 2);
  // no two commands touch the same cluster
  CHECK(cmds[0].cluster_a != cmds[1].cluster_a);
}

TEST_CASE("commands never touch the same cluster twice in a period") {
  auto net = linear_network(6000, 2, {0, 2000, 4000, 6000});
  auto g = derive_sensor_graph(net);
  auto part = minimal_cut(g);
  CongestionTracker t;
  for (auto mode : {PolicyMode::cpu_reduce, PolicyMode::balance, PolicyMode::jam_probe}) {
    auto p = policy(mode);
    ControlSnapshot snap;
    snap.clusters.push_back(metrics(1, Representation::macro, 90, {45}));
    snap.clusters.push_back(metrics(2, Representation::micro, 80, {20}));
    snap.clusters.push_back(metrics(3, Representation::micro, 40, {44}));
    for (const auto& m : snap.clusters) t.update(m.cluster_id, m.segment_densities, p);
    auto cmds = evaluate_policy(snap, p, t, part);
    std::set<int> touched;
    for (const auto& c : cmds) CHECK(touched.insert(c.cluster_a).second);
  }
}

// ---------------------------------------------------------------------------
// track_front

namespace {

std::vector<CorridorSample> corridor(const std::vector<double>& densities,
                                     const std::vector<int>& cluster_of,
                                     const std::vector<int>& unit_of,
                                     double spacing = 500.0) {
  std::vector<CorridorSample> out;
  for (std::size_t i = 0; i < densities.size(); ++i)
    out.push_back({(i + 0.5) * spacing, densities[i], cluster_of[i], unit_of[i]});
  return out;
}

}  // namespace

TEST_CASE("track_front: stationary front mid-window needs no commands") {
  auto net = linear_network(10000, 1, {0, 2000, 4000, 6000, 8000, 10000});
  auto g = derive_sensor_graph(net);
  auto part = build_clusters(g, {{0}, {1, 2, 3}, {4}});
  part.find(part.clusters[1].id)->repr = Representation::macro;
  part.find(part.clusters[3].id)->repr = Representation::macro;
  int window = part.clusters[2].id;
  REQUIRE(part.find(window)->repr == Representation::micro);

  auto p = policy(PolicyMode::shockwave);
  // density rise inside unit 2 (the middle of the window)
  auto samples = corridor({10, 10, 12, 50, 52, 55, 55, 55, 55, 55},
                          {1, 1, window, window, window, window, window, window, 3, 3},
                          {0, 0, 1, 2, 2, 3, 3, 3, 4, 4}, 1000.0);
  auto res = track_front(samples, {}, p, part);
  CHECK(res.track.active);
  CHECK(res.commands.empty());
}

TEST_CASE("track_front: front near the upstream edge emits one upstream shift") {
  auto net = linear_network(10000, 1, {0, 2000, 4000, 6000, 8000, 10000});
  auto g = derive_sensor_graph(net);
  auto part = build_clusters(g, {{0, 1}, {2, 3}, {4}});
  part.find(part.clusters[1].id)->repr = Representation::macro;
  part.find(part.clusters[3].id)->repr = Representation::macro;
  int up = part.clusters[1].id;
  int window = part.clusters[2].id;

  auto p = policy(PolicyMode::shockwave);
  // the jump sits inside the window's first unit: no upstream margin left
  auto samples = corridor({8, 9, 10, 48, 52, 55, 55, 55, 55, 55},
                          {up, up, up, up, window, window, window, window, 3, 3},
                          {0, 0, 1, 1, 2, 2, 3, 3, 4, 4}, 1000.0);
  auto res = track_front(samples, {}, p, part);
  REQUIRE(res.commands.size() == 1);
  CHECK(res.commands[0].kind == CommandKind::shift);
  CHECK(res.commands[0].cluster_a == up);
  CHECK(res.commands[0].cluster_b == window);
  CHECK(res.commands[0].dir == ShiftDirection::from_a_to_b);
}

TEST_CASE("track_front disengages once the congestion dissolves") {
  auto net = linear_network(10000, 1, {0, 2000, 4000, 6000, 8000, 10000});
  auto g = derive_sensor_graph(net);
  auto part = build_clusters(g, {{0, 1}, {2, 3}, {4}});
  auto p = policy(PolicyMode::shockwave);
  auto samples = corridor({8, 9, 10, 12, 11, 10, 9, 9, 8, 8},
                          {1, 1, 1, 1, 2, 2, 2, 2, 3, 3},
                          {0, 0, 1, 1, 2, 2, 3, 3, 4, 4}, 1000.0);
  FrontTrack prev{true, 4000.0};
  auto res = track_front(samples, prev, p, part);
  CHECK(!res.track.active);
  CHECK(res.commands.empty());
}

// ---------------------------------------------------------------------------
// apply_commands

TEST_CASE("to_macro on an empty micro cluster gives all-zero densities") {
  Fixture fx(Groups{{0}, {1}, {2}});
  auto w = fx.world();
  auto res = apply_commands(w, {{CommandKind::to_macro, fx.partition.clusters[1].id}});
  REQUIRE(res.size() == 1);
  CHECK(res[0].ok);
  const auto& m = fx.macro.at(fx.partition.clusters[1].id);
  for (const auto& seg : m.segments) CHECK(seg.density == 0.0);
  CHECK(fx.partition.clusters[1].repr == Representation::macro);
}

TEST_CASE("to_micro then to_macro preserves densities and nearly the speeds") {
  Fixture fx(Groups{{0}, {1}, {2}});
  int id = fx.partition.clusters[2].id;
  fx.make_macro(id, 17.0);
  fx.fill_micro(fx.partition.clusters[1].id, 9.0);
  auto bystander = fx.micro.at(fx.partition.clusters[1].id).vehicles;
  auto before = fx.macro.at(id);
  auto w = fx.world();

  auto res = apply_commands(w, {{CommandKind::to_micro, id}});
  REQUIRE(res[0].ok);
  REQUIRE(fx.micro.count(id) == 1);
  double placed = double(fx.micro.at(id).vehicles.size());
  CHECK(placed + fx.residual == doctest::Approx(before.total_vehicles()).epsilon(1e-9));

  // the warm-up sandbox never leaks into other clusters
  const auto& other = fx.micro.at(fx.partition.clusters[1].id).vehicles;
  REQUIRE(other.size() == bystander.size());
  for (std::size_t i = 0; i < other.size(); ++i) {
    CHECK(other[i].pos_m == bystander[i].pos_m);
    CHECK(other[i].speed_mps == bystander[i].speed_mps);
  }

  auto res2 = apply_commands(w, {{CommandKind::to_macro, id}});
  REQUIRE(res2[0].ok);
  const auto& after = fx.macro.at(id);
  for (std::size_t i = 0; i < after.segments.size(); ++i) {
    // density equals the apportioned integer count over L*lambda exactly
    double cells = after.segments[i].density * after.segments[i].length_km *
                   after.segments[i].lanes;
    CHECK(cells == doctest::Approx(std::round(cells)).epsilon(1e-9));
    CHECK(std::abs(after.segments[i].speed_kmh - before.segments[i].speed_kmh) /
              before.segments[i].speed_kmh <
          0.05);
  }
}

TEST_CASE("to_micro on a micro cluster is dropped with a note") {
  Fixture fx(Groups{{0}, {1}, {2}});
  auto w = fx.world();
  auto res = apply_commands(w, {{CommandKind::to_micro, fx.partition.clusters[1].id}});
  CHECK(!res[0].ok);
  CHECK(!fx.diags.empty());
}

TEST_CASE("merge of two macro clusters concatenates segments and conserves mass") {
  Fixture fx(Groups{{0}, {1}, {2}});
  int a = fx.partition.clusters[1].id;
  int b = fx.partition.clusters[2].id;
  fx.make_macro(a, 12.0);
  fx.make_macro(b, 20.0);
  double mass = fx.total_vehicles();
  std::size_t segs = fx.macro.at(a).segments.size() + fx.macro.at(b).segments.size();

  auto w = fx.world();
  auto res = apply_commands(w, {{CommandKind::merge, a, b}});
  REQUIRE(res[0].ok);
  REQUIRE(fx.macro.size() == 1);  // only the merged cluster is macro
  int merged = -1;
  for (const auto& c : fx.partition.clusters)
    if (c.units.size() == 2) merged = c.id;
  REQUIRE(merged >= 0);
  CHECK(fx.macro.at(merged).segments.size() == segs);
  CHECK(fx.total_vehicles() == doctest::Approx(mass).epsilon(1e-12));
  // upstream's lighter segments come first
  CHECK(fx.macro.at(merged).segments.front().density == doctest::Approx(12.0));
  CHECK(fx.macro.at(merged).segments.back().density == doctest::Approx(20.0));
}

TEST_CASE("split of a micro cluster routes vehicles to their side") {
  Fixture fx(Groups{{0, 1}, {2}});
  int id = fx.partition.clusters[1].id;
  fx.fill_micro(id, 10.0);
  double before = fx.total_vehicles();
  int cut = fx.partition.find(id)->interior_sensors.front();

  auto w = fx.world();
  SwitchCommand cmd;
  cmd.kind = CommandKind::split;
  cmd.cluster_a = id;
  cmd.sensor = cut;
  auto res = apply_commands(w, {cmd});
  REQUIRE(res[0].ok);
  CHECK(fx.total_vehicles() == doctest::Approx(before));
  // both sides hold only vehicles within their own geometry
  for (const auto& c : fx.partition.clusters) {
    if (c.repr != Representation::micro) continue;
    const auto& ms = fx.micro.at(c.id);
    for (const auto& v : ms.vehicles) CHECK(ms.contains(v.road, v.pos_m));
  }
}

TEST_CASE("shift between mixed representations converts the moved unit") {
  Fixture fx(Groups{{0, 1}, {2}});
  int donor = fx.partition.clusters[1].id;  // micro with two units
  int recv = fx.partition.clusters[2].id;
  fx.fill_micro(donor, 12.0);
  fx.make_macro(recv, 15.0);
  double before = fx.total_vehicles();

  auto w = fx.world();
  SwitchCommand cmd;
  cmd.kind = CommandKind::shift;
  cmd.cluster_a = donor;
  cmd.cluster_b = recv;
  cmd.dir = ShiftDirection::from_a_to_b;
  auto res = apply_commands(w, {cmd});
  REQUIRE(res[0].ok);
  CHECK(fx.partition.find(donor)->units.size() == 1);
  CHECK(fx.partition.find(recv)->units.size() == 2);
  // micro vehicles became macro mass exactly
  CHECK(fx.total_vehicles() == doctest::Approx(before).epsilon(1e-9));
  // the receiver gained upstream segments at its head
  const auto& m = fx.macro.at(recv);
  CHECK(m.segments.front().begin_m < 4000.0);
}

TEST_CASE("a failed command rolls back alone and the rest still applies") {
  Fixture fx(Groups{{0}, {1}, {2}});
  int a = fx.partition.clusters[1].id;
  int c = fx.partition.clusters[3].id;
  auto w = fx.world();
  std::vector<SwitchCommand> cmds{
      {CommandKind::merge, a, c},  // not adjacent: fails
      {CommandKind::to_macro, a},  // still applies
  };
  auto res = apply_commands(w, cmds);
  CHECK(!res[0].ok);
  CHECK(res[1].ok);
  CHECK(fx.partition.find(a)->repr == Representation::macro);
}

TEST_CASE("budget convergence: repeated cpu_reduce reaches the budget") {
  // pure policy-level property: metrics shrink as clusters get demoted
  auto net = linear_network(8000, 1, {0, 2000, 4000, 6000, 8000});
  auto g = derive_sensor_graph(net);
  auto part = minimal_cut(g);
  CongestionTracker t;
  auto p = policy(PolicyMode::cpu_reduce);
  p.micro_vehicle_budget = 50;

  std::map<int, double> counts{{1, 40}, {2, 35}, {3, 25}, {4, 10}};
  std::map<int, Representation> reprs;
  for (auto& [id, c] : counts) reprs[id] = Representation::micro;

  int periods = 0;
  for (; periods < 10; ++periods) {
    ControlSnapshot snap;
    double total = 0;
    for (auto& [id, c] : counts)
      if (reprs[id] == Representation::micro) {
        snap.clusters.push_back(metrics(id, reprs[id], c, {c / 4.0}));
        total += c;
      }
    for (const auto& m : snap.clusters) t.update(m.cluster_id, m.segment_densities, p);
    if (total <= p.micro_vehicle_budget) break;
    auto cmds = evaluate_policy(snap, p, t, part);
    REQUIRE(!cmds.empty());
    for (const auto& c : cmds)
      if (c.kind == CommandKind::to_macro) reprs[c.cluster_a] = Representation::macro;
  }
  CHECK(periods <= int(counts.size()));
}
