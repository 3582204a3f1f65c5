#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "hybridflow/network.hpp"

using namespace hf;
using namespace hf::test;

namespace {

// independent oracle: walk the road graph from a sensor and collect the first
// sensors reachable without passing another one
std::set<std::pair<int, int>> walk_arcs(const RoadNetwork& net) {
  std::set<std::pair<int, int>> arcs;
  struct Spot {
    int road;
    double pos;
  };
  for (std::size_t s = 0; s < net.sensors.size(); ++s) {
    std::vector<Spot> frontier{{net.road_index(net.sensors[s].road),
                                net.sensors[s].position_m}};
    std::set<std::pair<int, long>> visited;
    while (!frontier.empty()) {
      Spot spot = frontier.back();
      frontier.pop_back();
      if (!visited.insert({spot.road, std::lround(spot.pos * 1e3)}).second) continue;
      // nearest sensor strictly ahead on this road
      int hit = -1;
      double hit_pos = net.roads[spot.road].length_m + 1;
      for (std::size_t t = 0; t < net.sensors.size(); ++t) {
        if (net.road_index(net.sensors[t].road) != spot.road) continue;
        double p = net.sensors[t].position_m;
        if (p > spot.pos + 1e-9 && p < hit_pos) {
          hit_pos = p;
          hit = int(t);
        }
      }
      if (hit >= 0) {
        if (hit != int(s)) arcs.insert({int(s), hit});
        continue;
      }
      for (int nr : net.successor_roads(spot.road)) {
        // a sensor exactly at the next road's start also terminates the walk
        int start_hit = -1;
        for (std::size_t t = 0; t < net.sensors.size(); ++t)
          if (net.road_index(net.sensors[t].road) == nr &&
              net.sensors[t].position_m < 1e-9)
            start_hit = int(t);
        if (start_hit >= 0) {
          if (start_hit != int(s)) arcs.insert({int(s), start_hit});
        } else {
          frontier.push_back({nr, 0.0});
        }
      }
    }
  }
  return arcs;
}

std::set<std::pair<int, int>> graph_arcs(const SensorGraph& g) {
  std::set<std::pair<int, int>> arcs;
  for (const auto& a : g.arcs) arcs.insert({a.from_sensor, a.to_sensor});
  return arcs;
}

}  // namespace

TEST_CASE("build_network accepts a minimal well-formed input") {
  auto net = linear_network(1000, 2, {});
  CHECK(net.roads.size() == 1);
  CHECK(net.nodes.size() == 2);
}

TEST_CASE("build_network accepts the highway layout") {
  auto net = highway_network();
  double mainline = 0;
  for (const auto& r : net.roads)
    if (r.id[0] == 'm') mainline += r.length_m;
  CHECK(mainline == doctest::Approx(4780.0));
}

TEST_CASE("build_network rejects out-of-range sensors and bad lanes") {
  std::vector<Node> nodes{{"a", NodeKind::network_entry},
                          {"b", NodeKind::network_exit}};
  std::vector<Road> roads{{"r", "a", "b", 4780, 2, {}}};
  std::vector<Sensor> sensors{{"s", "r", 5000, 60}};
  CHECK_THROWS_AS(build_network(nodes, roads, sensors, {}), ValidationError);

  roads[0].lane_count = 6;
  CHECK_THROWS_AS(build_network(nodes, roads, {}, {}), ValidationError);

  roads[0].lane_count = 2;
  roads[0].to_node = "nowhere";
  try {
    build_network(nodes, roads, {}, {});
    CHECK(false);
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("dangling") != std::string::npos);
  }
}

TEST_CASE("build_network lists every failure at once") {
  std::vector<Node> nodes{{"a", NodeKind::network_entry},
                          {"b", NodeKind::network_exit}};
  std::vector<Road> roads{{"r", "a", "missing", -5, 7, {}}};
  try {
    build_network(nodes, roads, {{"s", "r", 50, 60}}, {});
    CHECK(false);
  } catch (const ValidationError& e) {
    CHECK(e.errors().size() >= 3);
  }
}

TEST_CASE("derive_sensor_graph on a linear road") {
  auto net = linear_network(4000, 2, {0, 2000, 4000});
  auto g = derive_sensor_graph(net);
  CHECK(g.units.size() == 2);
  auto expect = walk_arcs(net);
  CHECK(graph_arcs(g) == expect);
  CHECK(expect == std::set<std::pair<int, int>>{{0, 1}, {1, 2}});
  // no arc path contains an interior sensor: every arc is sensor-free by the
  // oracle construction, so matching the oracle covers it
}

TEST_CASE("derive_sensor_graph: single sensor ring has one vertex, no arcs") {
  auto net = ring_network(5000, 1, {0});
  auto g = derive_sensor_graph(net);
  CHECK(g.units.size() == 1);
  CHECK(g.arcs.empty());
  CHECK(g.up_unit[0] == 0);
  CHECK(g.down_unit[0] == 0);
}

TEST_CASE("derive_sensor_graph: Y merge produces two arcs into the joint sensor") {
  auto net = y_merge_network();
  auto g = derive_sensor_graph(net);
  auto arcs = graph_arcs(g);
  CHECK(arcs == walk_arcs(net));
  int sa = net.sensor_index("sa"), sb = net.sensor_index("sb"),
      sc = net.sensor_index("sc");
  CHECK(arcs.count({sa, sc}) == 1);
  CHECK(arcs.count({sb, sc}) == 1);
  // the sensor-free region between them is a single unit
  CHECK(g.up_unit[sc] == g.down_unit[sa]);
  CHECK(g.up_unit[sc] == g.down_unit[sb]);
}

TEST_CASE("derive_sensor_graph requires sensors at entries and exits") {
  auto bad = linear_network(4000, 2, {0, 2000});  // exit uncovered
  CHECK_THROWS_AS(derive_sensor_graph(bad), ValidationError);
  auto bad2 = linear_network(4000, 2, {2000, 4000});  // entry uncovered
  CHECK_THROWS_AS(derive_sensor_graph(bad2), ValidationError);
}

TEST_CASE("minimal_cut yields one cluster per arc region plus outside") {
  auto net = linear_network(4000, 2, {0, 2000, 4000});
  auto g = derive_sensor_graph(net);
  auto p = minimal_cut(g);
  // oracle: regions = distinct unit count derived from the arc walk
  CHECK(p.clusters.size() == 2 + 1);  // 2 units + outside
  CHECK(p.outside().repr == Representation::outside);
  Diagnostics diag;
  p.check_invariants(diag);
  CHECK(diag.ok());
  for (const auto& c : p.clusters)
    if (c.repr != Representation::outside) CHECK(c.interior_sensors.empty());
}

TEST_CASE("minimal_cut: sensors only at entry and exit give one cluster") {
  auto net = linear_network(4000, 2, {0, 4000});
  auto g = derive_sensor_graph(net);
  auto p = minimal_cut(g);
  CHECK(p.clusters.size() == 2);  // one unit + outside
}

TEST_CASE("minimal_cut: highway layout decomposes into 11 units") {
  auto net = highway_network();
  auto g = derive_sensor_graph(net);
  CHECK(g.units.size() == 11);
  auto p = minimal_cut(g);
  CHECK(p.clusters.size() == 12);
  Diagnostics diag;
  p.check_invariants(diag);
  CHECK(diag.ok());
  // ramps are part of the unit that contains their junction
  int ramp_on = net.road_index("ramp_on");
  int found = -1;
  for (std::size_t u = 0; u < g.units.size(); ++u)
    for (const auto& iv : g.units[u].intervals)
      if (iv.road == ramp_on) found = int(u);
  REQUIRE(found >= 0);
  bool has_mainline = false;
  for (const auto& iv : g.units[found].intervals)
    if (net.roads[iv.road].id == "m2") has_mainline = true;
  CHECK(has_mainline);
}

TEST_CASE("merge joins adjacent clusters and interiorizes the boundary") {
  auto net = linear_network(4000, 2, {0, 2000, 4000});
  auto g = derive_sensor_graph(net);
  auto p = minimal_cut(g);
  int a = p.clusters[1].id, b = p.clusters[2].id;
  auto merged = merge_clusters(p, a, b);
  const Cluster* m = nullptr;
  for (const auto& c : merged.clusters)
    if (c.units.size() == 2) m = &c;
  REQUIRE(m != nullptr);
  CHECK(m->interior_sensors.size() == 1);
  CHECK(m->interior_sensors[0] == net.sensor_index("s1"));

  CHECK_THROWS_AS(merge_clusters(p, a, a), std::invalid_argument);
  CHECK_THROWS_AS(merge_clusters(p, a, p.outside().id), std::invalid_argument);
}

TEST_CASE("merge rejects non-adjacent clusters") {
  auto net = linear_network(6000, 2, {0, 2000, 4000, 6000});
  auto g = derive_sensor_graph(net);
  auto p = minimal_cut(g);
  CHECK_THROWS_AS(merge_clusters(p, p.clusters[1].id, p.clusters[3].id),
                  std::invalid_argument);
}

TEST_CASE("split inverts merge at the same sensor") {
  auto net = linear_network(4000, 2, {0, 2000, 4000});
  auto g = derive_sensor_graph(net);
  auto p = minimal_cut(g);
  int a = p.clusters[1].id, b = p.clusters[2].id;
  auto merged = merge_clusters(p, a, b);
  int merged_id = -1;
  for (const auto& c : merged.clusters)
    if (c.units.size() == 2) merged_id = c.id;
  auto back = split_cluster(merged, merged_id, net.sensor_index("s1"));
  CHECK(same_partition(back, p));

  // a minimal cluster has no interior sensor to split at
  CHECK_THROWS_AS(split_cluster(p, a, net.sensor_index("s1")),
                  std::invalid_argument);
}

TEST_CASE("split an 11-unit aggregate at its 5th interior sensor") {
  auto net = highway_network();
  auto g = derive_sensor_graph(net);
  auto p = minimal_cut(g);
  // merge everything into one cluster
  while (p.clusters.size() > 2) {
    bool merged_any = false;
    for (std::size_t i = 1; i < p.clusters.size() && !merged_any; ++i)
      for (std::size_t j = i + 1; j < p.clusters.size() && !merged_any; ++j)
        if (p.adjacent(p.clusters[i].id, p.clusters[j].id)) {
          p = merge_clusters(p, p.clusters[i].id, p.clusters[j].id);
          merged_any = true;
        }
    REQUIRE(merged_any);
  }
  const Cluster& all = p.clusters[1];
  CHECK(all.units.size() == 11);
  // 5th sensor along the mainline
  int s5 = net.sensor_index("s5");
  auto split = split_cluster(p, all.id, s5);
  std::vector<std::size_t> sizes;
  for (const auto& c : split.clusters)
    if (c.repr != Representation::outside) sizes.push_back(c.units.size());
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<std::size_t>{5, 6});
}

TEST_CASE("shift moves exactly one unit and equals split-then-merge") {
  auto net = linear_network(8000, 2, {0, 2000, 4000, 6000, 8000});
  auto g = derive_sensor_graph(net);
  // two 2-unit clusters
  auto p = build_clusters(g, {{0, 1}, {2, 3}});
  int a = p.clusters[1].id, b = p.clusters[2].id;

  auto shifted = shift_boundary(p, a, b, ShiftDirection::from_a_to_b);
  std::vector<std::size_t> sizes;
  for (const auto& c : shifted.clusters)
    if (c.repr != Representation::outside) sizes.push_back(c.units.size());
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<std::size_t>{1, 3});

  // oracle: the same geometry via split at the donor's off-boundary sensor
  // followed by a merge with the receiver
  const Cluster* ca = p.find(a);
  const Cluster* cb = p.find(b);
  REQUIRE(ca);
  REQUIRE(cb);
  int shared = p.shared_sensors(a, b).front();
  int donor_unit =
      std::binary_search(ca->units.begin(), ca->units.end(), g.up_unit[shared])
          ? g.up_unit[shared]
          : g.down_unit[shared];
  int cut = -1;
  for (int s : ca->interior_sensors)
    if (g.up_unit[s] == donor_unit || g.down_unit[s] == donor_unit) cut = s;
  REQUIRE(cut >= 0);
  auto two = split_cluster(p, a, cut);
  int piece = -1;
  for (const auto& c : two.clusters)
    if (c.units == std::vector<int>{donor_unit}) piece = c.id;
  REQUIRE(piece >= 0);
  auto recombined = merge_clusters(two, piece, b);
  CHECK(same_partition(shifted, recombined));
}

TEST_CASE("shift refuses to empty a cluster") {
  auto net = linear_network(4000, 2, {0, 2000, 4000});
  auto g = derive_sensor_graph(net);
  auto p = minimal_cut(g);
  CHECK_THROWS_AS(
      shift_boundary(p, p.clusters[1].id, p.clusters[2].id,
                     ShiftDirection::from_a_to_b),
      std::invalid_argument);
}

TEST_CASE("repeated shifts track a moving front across a corridor") {
  auto net =
      linear_network(14000, 1, {0, 2000, 4000, 6000, 8000, 10000, 12000, 14000});
  auto g = derive_sensor_graph(net);
  // upstream block, tracking window, downstream block
  auto p = build_clusters(g, {{0}, {1, 2}, {3, 4, 5, 6}});
  int up = p.clusters[1].id, window = p.clusters[2].id, down = p.clusters[3].id;

  // the window walks downstream one unit per scripted control period: grow at
  // the leading edge, then release the trailing unit upstream
  for (int step = 0; step < 2; ++step) {
    auto before_front = p.find(window)->units.front();
    p = shift_boundary(p, down, window, ShiftDirection::from_a_to_b);
    p = shift_boundary(p, window, up, ShiftDirection::from_a_to_b);
    CHECK(p.find(window)->units.size() == 2);
    CHECK(p.find(window)->units.front() == before_front + 1);
  }
  CHECK(p.find(up)->units.size() == 3);
  CHECK(p.find(down)->units.size() == 2);
}

TEST_CASE("partition invariants hold under random operation sequences") {
  auto net = linear_network(12000, 2, {0, 2000, 4000, 6000, 8000, 10000, 12000});
  auto g = derive_sensor_graph(net);
  auto p = minimal_cut(g);
  std::uint64_t state = 12345;
  auto rnd = [&](int n) {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    return int((state >> 33) % n);
  };
  for (int iter = 0; iter < 200; ++iter) {
    int op = rnd(3);
    std::vector<int> ids;
    for (const auto& c : p.clusters)
      if (c.repr != Representation::outside) ids.push_back(c.id);
    try {
      if (op == 0 && ids.size() >= 2) {
        p = merge_clusters(p, ids[rnd(int(ids.size()))], ids[rnd(int(ids.size()))]);
      } else if (op == 1) {
        int id = ids[rnd(int(ids.size()))];
        const auto& ints = p.find(id)->interior_sensors;
        if (!ints.empty()) p = split_cluster(p, id, ints[rnd(int(ints.size()))]);
      } else if (ids.size() >= 2) {
        p = shift_boundary(p, ids[rnd(int(ids.size()))], ids[rnd(int(ids.size()))],
                           rnd(2) ? ShiftDirection::from_a_to_b
                                  : ShiftDirection::from_b_to_a);
      }
    } catch (const std::invalid_argument&) {
      // rejected preconditions are fine; the partition must stay intact
    }
    Diagnostics diag;
    p.check_invariants(diag);
    REQUIRE(diag.ok());
    // every boundary between two clusters is a sensor by construction of the
    // unit graph; verify the sensor sets are consistent
    for (const auto& c : p.clusters) {
      for (int s : c.interior_sensors) {
        CHECK(p.clusters[p.cluster_on_up_side(s)].id == c.id);
        CHECK(p.clusters[p.cluster_on_down_side(s)].id == c.id);
      }
    }
  }
}

TEST_CASE("merging everything and splitting everywhere restores the minimal cut") {
  auto net = linear_network(8000, 1, {0, 2000, 4000, 6000, 8000});
  auto g = derive_sensor_graph(net);
  auto base = minimal_cut(g);
  auto p = base;
  // merge all adjacent pairs
  for (;;) {
    bool merged_any = false;
    for (std::size_t i = 1; i < p.clusters.size() && !merged_any; ++i)
      for (std::size_t j = i + 1; j < p.clusters.size() && !merged_any; ++j)
        if (p.adjacent(p.clusters[i].id, p.clusters[j].id)) {
          p = merge_clusters(p, p.clusters[i].id, p.clusters[j].id);
          merged_any = true;
        }
    if (!merged_any) break;
  }
  // split at every interior sensor
  for (;;) {
    bool split_any = false;
    for (std::size_t i = 1; i < p.clusters.size() && !split_any; ++i)
      if (!p.clusters[i].interior_sensors.empty()) {
        p = split_cluster(p, p.clusters[i].id, p.clusters[i].interior_sensors[0]);
        split_any = true;
      }
    if (!split_any) break;
  }
  CHECK(same_partition(p, base));
}

TEST_CASE("linear_chain orders intervals along travel and detects rings") {
  auto net = highway_network();
  auto g = derive_sensor_graph(net);
  auto p = minimal_cut(g);
  // a junction unit is not a linear chain
  int ramp_unit = -1;
  for (std::size_t u = 0; u < g.units.size(); ++u)
    for (const auto& iv : g.units[u].intervals)
      if (net.roads[iv.road].id == "ramp_on") ramp_unit = int(u);
  int junction_cluster = -1;
  for (const auto& c : p.clusters)
    if (!c.units.empty() && c.units[0] == ramp_unit) junction_cluster = c.id;
  REQUIRE(junction_cluster >= 0);
  CHECK(!p.linear_chain(junction_cluster).has_value());

  auto ring = ring_network(5000, 1, {0});
  auto rg = derive_sensor_graph(ring);
  auto rp = minimal_cut(rg);
  CHECK(rp.linear_chain(rp.clusters[1].id).has_value());
  CHECK(rp.is_ring(rp.clusters[1].id));
}
