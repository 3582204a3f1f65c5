#include "hybridflow/network.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <set>

namespace hf {

namespace {
constexpr double kPosTol = 1e-6;
}

const char* to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::crossroads: return "crossroads";
    case NodeKind::roundabout: return "roundabout";
    case NodeKind::highway_insertion: return "insertion";
    case NodeKind::highway_extraction: return "extraction";
    case NodeKind::network_entry: return "entry";
    case NodeKind::network_exit: return "exit";
  }
  return "?";
}

std::optional<NodeKind> node_kind_from(const std::string& name) {
  if (name == "crossroads") return NodeKind::crossroads;
  if (name == "roundabout") return NodeKind::roundabout;
  if (name == "insertion") return NodeKind::highway_insertion;
  if (name == "extraction") return NodeKind::highway_extraction;
  if (name == "entry") return NodeKind::network_entry;
  if (name == "exit") return NodeKind::network_exit;
  return {};
}

const char* to_string(Representation r) {
  switch (r) {
    case Representation::micro: return "micro";
    case Representation::macro: return "macro";
    case Representation::replay: return "replay";
    case Representation::outside: return "outside";
  }
  return "?";
}

std::optional<Representation> representation_from(const std::string& name) {
  if (name == "micro") return Representation::micro;
  if (name == "macro") return Representation::macro;
  if (name == "replay") return Representation::replay;
  if (name == "outside") return Representation::outside;
  return {};
}

int RoadNetwork::node_index(const std::string& id) const {
  auto it = node_by_id_.find(id);
  return it == node_by_id_.end() ? -1 : it->second;
}

int RoadNetwork::road_index(const std::string& id) const {
  auto it = road_by_id_.find(id);
  return it == road_by_id_.end() ? -1 : it->second;
}

int RoadNetwork::sensor_index(const std::string& id) const {
  auto it = sensor_by_id_.find(id);
  return it == sensor_by_id_.end() ? -1 : it->second;
}

void RoadNetwork::build_indexes() {
  node_by_id_.clear();
  road_by_id_.clear();
  sensor_by_id_.clear();
  for (std::size_t i = 0; i < nodes.size(); ++i) node_by_id_[nodes[i].id] = int(i);
  for (std::size_t i = 0; i < roads.size(); ++i) road_by_id_[roads[i].id] = int(i);
  for (std::size_t i = 0; i < sensors.size(); ++i) sensor_by_id_[sensors[i].id] = int(i);

  out_of_.assign(nodes.size(), {});
  into_.assign(nodes.size(), {});
  for (std::size_t i = 0; i < roads.size(); ++i) {
    int from = node_index(roads[i].from_node);
    int to = node_index(roads[i].to_node);
    if (from >= 0) out_of_[from].push_back(int(i));
    if (to >= 0) into_[to].push_back(int(i));
  }

  succ_.assign(roads.size(), {});
  pred_.assign(roads.size(), {});
  for (std::size_t i = 0; i < roads.size(); ++i) {
    int to = node_index(roads[i].to_node);
    if (to < 0) continue;
    for (int j : out_of_[to]) {
      succ_[i].push_back(j);
      pred_[j].push_back(int(i));
    }
  }
}

std::vector<LaneLink> RoadNetwork::lane_links(int from_road, int to_road) const {
  for (const auto& c : connections) {
    if (road_index(c.from_road) == from_road && road_index(c.to_road) == to_road) {
      if (!c.lanes.empty()) return c.lanes;
      break;
    }
  }
  // implicit identity mapping over the common lane count
  const auto& sc = succ_[from_road];
  if (std::find(sc.begin(), sc.end(), to_road) == sc.end()) return {};
  int n = std::min(roads[from_road].lane_count, roads[to_road].lane_count);
  std::vector<LaneLink> links;
  links.reserve(n);
  for (int l = 0; l < n; ++l) links.push_back({l, l});
  return links;
}

std::vector<int> RoadNetwork::entry_nodes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].kind == NodeKind::network_entry) out.push_back(int(i));
  return out;
}

std::vector<int> RoadNetwork::exit_nodes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].kind == NodeKind::network_exit) out.push_back(int(i));
  return out;
}

std::vector<int> RoadNetwork::sensors_on_road(int road) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < sensors.size(); ++i)
    if (road_index(sensors[i].road) == road) out.push_back(int(i));
  std::sort(out.begin(), out.end(), [&](int a, int b) {
    return sensors[a].position_m < sensors[b].position_m;
  });
  return out;
}

RoadNetwork build_network(std::vector<Node> nodes, std::vector<Road> roads,
                          std::vector<Sensor> sensors,
                          std::vector<Connection> connections) {
  RoadNetwork net;
  net.nodes = std::move(nodes);
  net.roads = std::move(roads);
  net.sensors = std::move(sensors);
  net.connections = std::move(connections);
  net.build_indexes();

  Diagnostics diag;
  std::set<std::string> seen;
  for (const auto& n : net.nodes)
    if (!seen.insert("n" + n.id).second) diag.error("duplicate node id '" + n.id + "'");
  for (const auto& r : net.roads)
    if (!seen.insert("r" + r.id).second) diag.error("duplicate road id '" + r.id + "'");
  for (const auto& s : net.sensors)
    if (!seen.insert("s" + s.id).second) diag.error("duplicate sensor id '" + s.id + "'");

  for (const auto& r : net.roads) {
    if (net.node_index(r.from_node) < 0)
      diag.error("road '" + r.id + "': dangling node reference '" + r.from_node + "'");
    if (net.node_index(r.to_node) < 0)
      diag.error("road '" + r.id + "': dangling node reference '" + r.to_node + "'");
    if (!(r.length_m > 0)) diag.error("road '" + r.id + "': length must be > 0");
    if (r.lane_count < 1 || r.lane_count > 5)
      diag.error("road '" + r.id + "': lane count " + std::to_string(r.lane_count) +
                 " outside [1,5]");
    for (const auto& sg : r.signs) {
      if (sg.position_m < 0 || sg.position_m > r.length_m)
        diag.error("road '" + r.id + "': sign position out of range");
      if (sg.lane >= r.lane_count)
        diag.error("road '" + r.id + "': sign lane out of range");
      if (sg.kind == SignKind::speed_limit && !(sg.limit_mps > 0))
        diag.error("road '" + r.id + "': speed limit must be > 0");
    }
  }

  std::set<std::pair<int, long long>> sensor_spots;
  for (const auto& s : net.sensors) {
    int r = net.road_index(s.road);
    if (r < 0) {
      diag.error("sensor '" + s.id + "': unknown road '" + s.road + "'");
      continue;
    }
    if (s.position_m < 0 || s.position_m > net.roads[r].length_m)
      diag.error("sensor '" + s.id + "': position " + std::to_string(s.position_m) +
                 " outside [0," + std::to_string(net.roads[r].length_m) + "]");
    if (!(s.interval_s > 0)) diag.error("sensor '" + s.id + "': interval must be > 0");
    auto spot = std::make_pair(r, llround(s.position_m / kPosTol));
    if (!sensor_spots.insert(spot).second)
      diag.error("sensor '" + s.id + "': coincides with another sensor");
  }

  for (const auto& c : net.connections) {
    int a = net.road_index(c.from_road);
    int b = net.road_index(c.to_road);
    if (a < 0 || b < 0) {
      diag.error("connection " + c.from_road + "->" + c.to_road + ": unknown road");
      continue;
    }
    if (net.roads[a].to_node != net.roads[b].from_node)
      diag.error("connection " + c.from_road + "->" + c.to_road +
                 ": roads do not meet at a node");
    for (const auto& l : c.lanes) {
      if (l.from_lane < 0 || l.from_lane >= net.roads[a].lane_count ||
          l.to_lane < 0 || l.to_lane >= net.roads[b].lane_count)
        diag.error("connection " + c.from_road + "->" + c.to_road +
                   ": lane link out of range");
    }
  }

  for (int n : net.entry_nodes()) {
    if (!net.roads_into(n).empty())
      diag.error("entry node '" + net.nodes[n].id + "' has incoming roads");
    if (net.roads_out_of(n).empty())
      diag.error("entry node '" + net.nodes[n].id + "' has no outgoing road");
  }
  for (int n : net.exit_nodes()) {
    if (!net.roads_out_of(n).empty())
      diag.error("exit node '" + net.nodes[n].id + "' has outgoing roads");
    if (net.roads_into(n).empty())
      diag.error("exit node '" + net.nodes[n].id + "' has no incoming road");
  }

  // entry/exit connectivity: every entry reaches an exit, every exit is reached
  if (diag.ok() && !net.entry_nodes().empty()) {
    std::vector<char> reach(net.nodes.size(), 0);
    std::deque<int> q;
    for (int n : net.entry_nodes()) {
      reach[n] = 1;
      q.push_back(n);
    }
    while (!q.empty()) {
      int n = q.front();
      q.pop_front();
      for (int r : net.roads_out_of(n)) {
        int to = net.node_index(net.roads[r].to_node);
        if (to >= 0 && !reach[to]) {
          reach[to] = 1;
          q.push_back(to);
        }
      }
    }
    for (int n : net.exit_nodes())
      if (!reach[n])
        diag.error("exit node '" + net.nodes[n].id + "' unreachable from any entry");
  }

  diag.throw_if_failed("invalid network definition");
  return net;
}

// ---------------------------------------------------------------------------
// sensor graph derivation

namespace {

struct Ival {
  RoadInterval iv;
  int up_sensor = -1;    // sensor at begin, if any
  int down_sensor = -1;  // sensor at end, if any
};

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

bool near(double a, double b) { return std::abs(a - b) < kPosTol; }

}  // namespace

SensorGraph derive_sensor_graph(const RoadNetwork& net) {
  Diagnostics diag;

  // cut every road at its sensors
  std::vector<Ival> ivals;
  std::vector<int> first_of(net.roads.size(), -1), last_of(net.roads.size(), -1);
  for (std::size_t r = 0; r < net.roads.size(); ++r) {
    const double len = net.roads[r].length_m;
    auto road_sensors = net.sensors_on_road(int(r));
    double cursor = 0.0;
    int up = -1;
    for (int s : road_sensors) {
      double p = net.sensors[s].position_m;
      if (near(p, 0.0)) {
        up = s;
        continue;
      }
      ivals.push_back({{int(r), cursor, p}, up, s});
      if (first_of[r] < 0) first_of[r] = int(ivals.size()) - 1;
      cursor = p;
      up = s;
    }
    if (!near(cursor, len)) {
      ivals.push_back({{int(r), cursor, len}, up, -1});
      if (first_of[r] < 0) first_of[r] = int(ivals.size()) - 1;
    }
    last_of[r] = int(ivals.size()) - 1;
    // a road fully consumed by a sensor at 0 == length cannot happen (length > 0)
  }

  // entry/exit coverage
  for (int n : net.entry_nodes())
    for (int r : net.roads_out_of(n)) {
      int fi = first_of[r];
      if (fi < 0 || ivals[fi].up_sensor < 0 || !near(ivals[fi].iv.begin_m, 0.0))
        diag.error("entry node '" + net.nodes[n].id + "': road '" + net.roads[r].id +
                   "' has no sensor at its entry point");
    }
  for (int n : net.exit_nodes())
    for (int r : net.roads_into(n)) {
      // covered when the last cut of the road is a sensor at the road end
      bool covered = false;
      for (int s : net.sensors_on_road(r))
        if (near(net.sensors[s].position_m, net.roads[r].length_m)) covered = true;
      if (!covered)
        diag.error("exit node '" + net.nodes[n].id + "': road '" + net.roads[r].id +
                   "' has no sensor at its exit point");
    }

  // join sensor-free regions across nodes
  UnionFind uf(int(ivals.size()));
  for (std::size_t a = 0; a < net.roads.size(); ++a) {
    bool a_end_open = ivals[last_of[a]].down_sensor < 0 &&
                      near(ivals[last_of[a]].iv.end_m, net.roads[a].length_m);
    for (int b : net.successor_roads(int(a))) {
      bool b_begin_open =
          ivals[first_of[b]].up_sensor < 0 && near(ivals[first_of[b]].iv.begin_m, 0.0);
      bool a_end_sensor = !a_end_open;
      bool b_begin_sensor = !b_begin_open;
      if (a_end_sensor && b_begin_sensor)
        diag.error("roads '" + net.roads[a].id + "' and '" + net.roads[b].id +
                   "': back-to-back boundary sensors leave an empty region");
      if (a_end_open && b_begin_open) uf.unite(last_of[a], first_of[b]);
    }
  }

  diag.throw_if_failed("sensor graph derivation failed");

  // canonical unit numbering: by smallest (road, begin) of member intervals
  std::vector<int> roots;
  for (std::size_t i = 0; i < ivals.size(); ++i)
    if (uf.find(int(i)) == int(i)) roots.push_back(int(i));
  auto region_key = [&](int root) {
    std::pair<int, double> best{INT32_MAX, 0.0};
    for (std::size_t i = 0; i < ivals.size(); ++i)
      if (uf.find(int(i)) == root)
        best = std::min(best, {ivals[i].iv.road, ivals[i].iv.begin_m});
    return best;
  };
  std::sort(roots.begin(), roots.end(),
            [&](int a, int b) { return region_key(a) < region_key(b); });
  std::vector<int> unit_of_root(ivals.size(), -1);
  for (std::size_t u = 0; u < roots.size(); ++u) unit_of_root[roots[u]] = int(u);
  auto unit_of = [&](int ival) { return unit_of_root[uf.find(ival)]; };

  SensorGraph g;
  g.net = &net;
  g.units.resize(roots.size());
  for (std::size_t i = 0; i < ivals.size(); ++i) {
    auto& unit = g.units[unit_of(int(i))];
    unit.intervals.push_back(ivals[i].iv);
    unit.length_m += ivals[i].iv.length_m();
  }
  for (auto& u : g.units)
    std::sort(u.intervals.begin(), u.intervals.end(), [](const auto& x, const auto& y) {
      return std::tie(x.road, x.begin_m) < std::tie(y.road, y.begin_m);
    });

  // per-sensor adjacency; must be unique on each side
  g.up_unit.assign(net.sensors.size(), -1);
  g.down_unit.assign(net.sensors.size(), -1);
  for (std::size_t s = 0; s < net.sensors.size(); ++s) {
    int r = net.road_index(net.sensors[s].road);
    double p = net.sensors[s].position_m;
    std::set<int> up, down;
    for (std::size_t i = 0; i < ivals.size(); ++i) {
      if (ivals[i].down_sensor == int(s)) up.insert(unit_of(int(i)));
      if (ivals[i].up_sensor == int(s)) down.insert(unit_of(int(i)));
    }
    if (near(p, 0.0)) {
      // upstream side lives on the predecessor roads
      for (int a : net.predecessor_roads(r))
        if (near(ivals[last_of[a]].iv.end_m, net.roads[a].length_m) &&
            ivals[last_of[a]].down_sensor < 0)
          up.insert(unit_of(last_of[a]));
    }
    if (near(p, net.roads[r].length_m)) {
      for (int b : net.successor_roads(r))
        if (near(ivals[first_of[b]].iv.begin_m, 0.0) && ivals[first_of[b]].up_sensor < 0)
          down.insert(unit_of(first_of[b]));
    }
    if (up.size() > 1)
      diag.error("sensor '" + net.sensors[s].id + "': ambiguous upstream region");
    if (down.size() > 1)
      diag.error("sensor '" + net.sensors[s].id + "': ambiguous downstream region");
    if (up.size() == 1) g.up_unit[s] = *up.begin();
    if (down.size() == 1) g.down_unit[s] = *down.begin();
  }
  diag.throw_if_failed("sensor graph derivation failed");

  for (std::size_t s = 0; s < net.sensors.size(); ++s) {
    if (g.down_unit[s] >= 0) g.units[g.down_unit[s]].input_sensors.push_back(int(s));
    if (g.up_unit[s] >= 0) g.units[g.up_unit[s]].output_sensors.push_back(int(s));
  }

  // arcs: walk sensor-free interval chains from each sensor
  // successor intervals within the refined graph
  auto ival_successors = [&](int i) {
    std::vector<int> out;
    if (ivals[i].down_sensor >= 0) return out;  // blocked by a sensor
    int r = ivals[i].iv.road;
    if (!near(ivals[i].iv.end_m, net.roads[r].length_m)) return out;  // impossible
    for (int b : net.successor_roads(r))
      if (near(ivals[first_of[b]].iv.begin_m, 0.0) && ivals[first_of[b]].up_sensor < 0)
        out.push_back(first_of[b]);
    return out;
  };
  auto start_intervals = [&](int s) {
    std::vector<int> out;
    int r = net.road_index(net.sensors[s].road);
    double p = net.sensors[s].position_m;
    if (near(p, net.roads[r].length_m)) {
      for (int b : net.successor_roads(r))
        if (near(ivals[first_of[b]].iv.begin_m, 0.0) && ivals[first_of[b]].up_sensor < 0)
          out.push_back(first_of[b]);
    } else {
      for (std::size_t i = 0; i < ivals.size(); ++i)
        if (ivals[i].up_sensor == int(s)) out.push_back(int(i));
    }
    return out;
  };

  for (std::size_t s = 0; s < net.sensors.size(); ++s) {
    // depth-first over simple interval paths; one arc per distinct path
    std::vector<int> path;
    std::vector<char> on_path(ivals.size(), 0);
    auto emit = [&](int to_sensor) {
      if (to_sensor == int(s)) return;  // a ring back to itself is not an arc
      SensorArc arc;
      arc.from_sensor = int(s);
      arc.to_sensor = to_sensor;
      for (int i : path) arc.path.push_back(ivals[i].iv);
      g.arcs.push_back(std::move(arc));
    };
    auto dfs = [&](auto&& self, int i) -> void {
      if (on_path[i]) return;
      on_path[i] = 1;
      path.push_back(i);
      if (ivals[i].down_sensor >= 0) {
        emit(ivals[i].down_sensor);
      } else {
        int r = ivals[i].iv.road;
        bool at_end = near(ivals[i].iv.end_m, net.roads[r].length_m);
        if (at_end) {
          for (int b : net.successor_roads(r)) {
            if (near(ivals[first_of[b]].iv.begin_m, 0.0) &&
                ivals[first_of[b]].up_sensor >= 0) {
              emit(ivals[first_of[b]].up_sensor);  // sensor at the next road's start
            }
          }
          for (int nxt : ival_successors(i)) self(self, nxt);
        }
      }
      path.pop_back();
      on_path[i] = 0;
    };
    for (int i0 : start_intervals(int(s))) dfs(dfs, i0);
  }
  std::sort(g.arcs.begin(), g.arcs.end(), [](const SensorArc& a, const SensorArc& b) {
    return std::tie(a.from_sensor, a.to_sensor) < std::tie(b.from_sensor, b.to_sensor);
  });

  return g;
}

// ---------------------------------------------------------------------------
// partition

const Cluster* ClusterPartition::find(int id) const {
  for (const auto& c : clusters)
    if (c.id == id) return &c;
  return nullptr;
}

Cluster* ClusterPartition::find(int id) {
  for (auto& c : clusters)
    if (c.id == id) return &c;
  return nullptr;
}

int ClusterPartition::cluster_of_unit(int unit) const {
  for (std::size_t i = 1; i < clusters.size(); ++i)
    if (std::binary_search(clusters[i].units.begin(), clusters[i].units.end(), unit))
      return int(i);
  return -1;
}

int ClusterPartition::cluster_on_up_side(int sensor) const {
  int u = graph->up_unit[sensor];
  if (u < 0) return 0;
  int c = cluster_of_unit(u);
  return c < 0 ? 0 : c;
}

int ClusterPartition::cluster_on_down_side(int sensor) const {
  int u = graph->down_unit[sensor];
  if (u < 0) return 0;
  int c = cluster_of_unit(u);
  return c < 0 ? 0 : c;
}

bool ClusterPartition::adjacent(int id_a, int id_b) const {
  return !shared_sensors(id_a, id_b).empty();
}

std::vector<int> ClusterPartition::shared_sensors(int id_a, int id_b) const {
  std::vector<int> out;
  const Cluster* a = find(id_a);
  const Cluster* b = find(id_b);
  if (!a || !b) return out;
  for (int s : a->output_sensors)
    if (std::find(b->input_sensors.begin(), b->input_sensors.end(), s) !=
        b->input_sensors.end())
      out.push_back(s);
  for (int s : a->input_sensors)
    if (std::find(b->output_sensors.begin(), b->output_sensors.end(), s) !=
        b->output_sensors.end())
      out.push_back(s);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void ClusterPartition::refresh_sensor_sets() {
  for (auto& c : clusters) {
    c.input_sensors.clear();
    c.output_sensors.clear();
    c.interior_sensors.clear();
    std::sort(c.units.begin(), c.units.end());
  }
  for (std::size_t s = 0; s < net->sensors.size(); ++s) {
    int uu = graph->up_unit[s];
    int du = graph->down_unit[s];
    int cu = cluster_on_up_side(int(s));
    int cd = cluster_on_down_side(int(s));
    if (cu == cd) {
      if (uu >= 0 && uu == du) {  // a ring closing on its own sensor
        clusters[cu].input_sensors.push_back(int(s));
        clusters[cu].output_sensors.push_back(int(s));
      } else if (cu != 0) {
        clusters[cu].interior_sensors.push_back(int(s));
      }
    } else {
      clusters[cu].output_sensors.push_back(int(s));
      clusters[cd].input_sensors.push_back(int(s));
    }
  }
}

void ClusterPartition::check_invariants(Diagnostics& diag) const {
  if (clusters.empty() || clusters[0].repr != Representation::outside) {
    diag.error("partition lacks the outside cluster");
    return;
  }
  for (std::size_t i = 1; i < clusters.size(); ++i)
    if (clusters[i].repr == Representation::outside)
      diag.error("more than one outside cluster");

  std::vector<int> owner(graph->units.size(), -1);
  for (std::size_t i = 1; i < clusters.size(); ++i) {
    for (int u : clusters[i].units) {
      if (u < 0 || u >= int(graph->units.size())) {
        diag.error("cluster '" + clusters[i].name + "': unknown unit");
        continue;
      }
      if (owner[u] >= 0)
        diag.error("unit " + std::to_string(u) + " owned by two clusters");
      owner[u] = int(i);
    }
    if (clusters[i].units.empty())
      diag.error("cluster '" + clusters[i].name + "' is empty");
  }
  for (std::size_t u = 0; u < owner.size(); ++u)
    if (owner[u] < 0) diag.error("unit " + std::to_string(u) + " not covered");

  // contiguity: all units of a cluster reachable through shared sensors
  for (std::size_t i = 1; i < clusters.size(); ++i) {
    const auto& units = clusters[i].units;
    if (units.empty()) continue;
    std::set<int> seen{units[0]};
    std::deque<int> q{units[0]};
    auto in_cluster = [&](int u) {
      return std::binary_search(units.begin(), units.end(), u);
    };
    while (!q.empty()) {
      int u = q.front();
      q.pop_front();
      for (std::size_t s = 0; s < net->sensors.size(); ++s) {
        int a = graph->up_unit[s], b = graph->down_unit[s];
        int other = -1;
        if (a == u) other = b;
        else if (b == u) other = a;
        if (other >= 0 && in_cluster(other) && !seen.count(other)) {
          seen.insert(other);
          q.push_back(other);
        }
      }
    }
    if (seen.size() != units.size())
      diag.error("cluster '" + clusters[i].name + "' is not contiguous");
  }
}

std::optional<std::vector<RoadInterval>> ClusterPartition::linear_chain(int id) const {
  const Cluster* c = find(id);
  if (!c || c->units.empty()) return {};
  std::vector<RoadInterval> ivs;
  for (int u : c->units)
    for (const auto& iv : graph->units[u].intervals) ivs.push_back(iv);

  auto touches = [&](const RoadInterval& a, const RoadInterval& b) {
    // b directly continues a, either on the same road or across a node
    if (a.road == b.road && std::abs(a.end_m - b.begin_m) < kPosTol) return true;
    if (std::abs(a.end_m - net->roads[a.road].length_m) > kPosTol) return false;
    if (std::abs(b.begin_m) > kPosTol) return false;
    const auto& sc = net->successor_roads(a.road);
    return std::find(sc.begin(), sc.end(), b.road) != sc.end();
  };

  const int n = int(ivs.size());
  std::vector<int> next(n, -1), prev(n, -1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j || !touches(ivs[i], ivs[j])) continue;
      if (next[i] != -1 || prev[j] != -1) return {};  // branching
      next[i] = j;
      prev[j] = i;
    }

  int start = -1;
  for (int i = 0; i < n; ++i)
    if (prev[i] < 0) {
      if (start >= 0) return {};  // disconnected
      start = i;
    }
  if (start < 0) {
    // ring: start just after a boundary sensor when there is one
    if (!c->input_sensors.empty()) {
      int s = c->input_sensors.front();
      for (int i = 0; i < n; ++i)
        if (ivs[i].road == net->road_index(net->sensors[s].road) &&
            std::abs(ivs[i].begin_m - net->sensors[s].position_m) < kPosTol)
          start = i;
    }
    if (start < 0) start = 0;
  }

  std::vector<RoadInterval> chain;
  int cur = start;
  for (int k = 0; k < n; ++k) {
    if (cur < 0) return {};  // disconnected
    chain.push_back(ivs[cur]);
    cur = next[cur];
    if (cur == start) break;  // closed ring
  }
  if (int(chain.size()) != n) return {};
  return chain;
}

std::vector<RoadInterval> ClusterPartition::cluster_intervals(int id) const {
  std::vector<RoadInterval> out;
  const Cluster* c = find(id);
  if (!c) return out;
  for (int u : c->units)
    for (const auto& iv : graph->units[u].intervals) out.push_back(iv);
  std::sort(out.begin(), out.end(), [](const RoadInterval& a, const RoadInterval& b) {
    return std::tie(a.road, a.begin_m) < std::tie(b.road, b.begin_m);
  });
  return out;
}

bool ClusterPartition::is_ring(int id) const {
  const Cluster* c = find(id);
  if (!c) return false;
  auto chain = linear_chain(id);
  if (!chain || chain->empty()) return false;
  // closed iff the last interval feeds the first across a node
  const auto& a = chain->back();
  const auto& b = chain->front();
  if (std::abs(a.end_m - net->roads[a.road].length_m) > kPosTol) return false;
  if (std::abs(b.begin_m) > kPosTol) return false;
  const auto& sc = net->successor_roads(a.road);
  return std::find(sc.begin(), sc.end(), b.road) != sc.end();
}

ClusterPartition minimal_cut(const SensorGraph& graph) {
  ClusterPartition p;
  p.net = graph.net;
  p.graph = &graph;
  Cluster outside;
  outside.id = 0;
  outside.name = "outside";
  outside.repr = Representation::outside;
  p.clusters.push_back(outside);
  for (std::size_t u = 0; u < graph.units.size(); ++u) {
    Cluster c;
    c.id = int(u) + 1;
    c.name = "c" + std::to_string(u);
    c.repr = Representation::micro;
    c.units = {int(u)};
    p.clusters.push_back(std::move(c));
  }
  p.next_id = int(graph.units.size()) + 1;
  p.refresh_sensor_sets();
  return p;
}

ClusterPartition merge_clusters(const ClusterPartition& p, int a, int b,
                                std::optional<Representation> target) {
  const Cluster* ca = p.find(a);
  const Cluster* cb = p.find(b);
  if (!ca || !cb) throw std::invalid_argument("merge: unknown cluster id");
  if (a == b) throw std::invalid_argument("merge: cannot merge a cluster with itself");
  if (ca->repr == Representation::outside || cb->repr == Representation::outside)
    throw std::invalid_argument("merge: cannot merge with the outside cluster");
  if (!p.adjacent(a, b))
    throw std::invalid_argument("merge: clusters are not contiguous");
  if (!target && ca->repr != cb->repr)
    throw std::invalid_argument("merge: representations differ and no target given");

  ClusterPartition out = p;
  Cluster merged;
  merged.id = out.next_id++;
  merged.name = "m" + std::to_string(merged.id);
  merged.repr = target.value_or(ca->repr);
  merged.units = ca->units;
  merged.units.insert(merged.units.end(), cb->units.begin(), cb->units.end());
  std::sort(merged.units.begin(), merged.units.end());
  std::erase_if(out.clusters, [&](const Cluster& c) { return c.id == a || c.id == b; });
  out.clusters.push_back(std::move(merged));
  out.refresh_sensor_sets();
  Diagnostics diag;
  out.check_invariants(diag);
  diag.throw_if_failed("merge produced an invalid partition");
  return out;
}

ClusterPartition split_cluster(const ClusterPartition& p, int id, int at_sensor) {
  const Cluster* c = p.find(id);
  if (!c) throw std::invalid_argument("split: unknown cluster id");
  if (std::find(c->interior_sensors.begin(), c->interior_sensors.end(), at_sensor) ==
      c->interior_sensors.end())
    throw std::invalid_argument("split: sensor is not interior to the cluster");

  auto side_units = [&](int seed) {
    std::set<int> seen{seed};
    std::deque<int> q{seed};
    auto in_cluster = [&](int u) {
      return std::binary_search(c->units.begin(), c->units.end(), u);
    };
    while (!q.empty()) {
      int u = q.front();
      q.pop_front();
      for (std::size_t s = 0; s < p.net->sensors.size(); ++s) {
        if (int(s) == at_sensor) continue;
        int x = p.graph->up_unit[s], y = p.graph->down_unit[s];
        int other = -1;
        if (x == u) other = y;
        else if (y == u) other = x;
        if (other >= 0 && in_cluster(other) && !seen.count(other)) {
          seen.insert(other);
          q.push_back(other);
        }
      }
    }
    return seen;
  };

  auto up = side_units(p.graph->up_unit[at_sensor]);
  auto down = side_units(p.graph->down_unit[at_sensor]);
  if (up.count(p.graph->down_unit[at_sensor]) ||
      up.size() + down.size() != c->units.size())
    throw std::invalid_argument("split: cutting at the sensor does not disconnect");

  ClusterPartition out = p;
  Cluster upc, downc;
  upc.id = out.next_id++;
  upc.name = "s" + std::to_string(upc.id);
  upc.repr = c->repr;
  upc.units.assign(up.begin(), up.end());
  downc.id = out.next_id++;
  downc.name = "s" + std::to_string(downc.id);
  downc.repr = c->repr;
  downc.units.assign(down.begin(), down.end());
  std::erase_if(out.clusters, [&](const Cluster& x) { return x.id == id; });
  out.clusters.push_back(std::move(upc));
  out.clusters.push_back(std::move(downc));
  out.refresh_sensor_sets();
  Diagnostics diag;
  out.check_invariants(diag);
  diag.throw_if_failed("split produced an invalid partition");
  return out;
}

ClusterPartition shift_boundary(const ClusterPartition& p, int a, int b,
                                ShiftDirection dir) {
  const Cluster* ca = p.find(a);
  const Cluster* cb = p.find(b);
  if (!ca || !cb) throw std::invalid_argument("shift: unknown cluster id");
  auto shared = p.shared_sensors(a, b);
  if (shared.empty()) throw std::invalid_argument("shift: clusters not adjacent");

  int donor = dir == ShiftDirection::from_a_to_b ? a : b;
  int recv = dir == ShiftDirection::from_a_to_b ? b : a;
  const Cluster* cd = p.find(donor);
  if (cd->units.size() <= 1)
    throw std::invalid_argument("shift: would empty a cluster");

  int moved = -1;
  for (int s : shared) {
    int u = p.graph->up_unit[s];
    int d = p.graph->down_unit[s];
    if (u >= 0 && std::binary_search(cd->units.begin(), cd->units.end(), u))
      moved = moved < 0 ? u : std::min(moved, u);
    if (d >= 0 && std::binary_search(cd->units.begin(), cd->units.end(), d))
      moved = moved < 0 ? d : std::min(moved, d);
  }
  if (moved < 0) throw std::invalid_argument("shift: no movable unit at the boundary");

  ClusterPartition out = p;
  Cluster* od = out.find(donor);
  Cluster* orc = out.find(recv);
  std::erase(od->units, moved);
  orc->units.push_back(moved);
  std::sort(orc->units.begin(), orc->units.end());
  out.refresh_sensor_sets();
  Diagnostics diag;
  out.check_invariants(diag);
  diag.throw_if_failed("shift produced an invalid partition");
  return out;
}

bool same_partition(const ClusterPartition& a, const ClusterPartition& b) {
  auto key = [](const ClusterPartition& p) {
    std::set<std::pair<std::vector<int>, Representation>> k;
    for (const auto& c : p.clusters)
      if (c.repr != Representation::outside) k.insert({c.units, c.repr});
    return k;
  };
  return key(a) == key(b);
}

}  // namespace hf
