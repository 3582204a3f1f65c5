#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hybridflow/validation.hpp"

namespace hf {

enum class NodeKind {
  crossroads,
  roundabout,
  highway_insertion,
  highway_extraction,
  network_entry,
  network_exit,
};

const char* to_string(NodeKind kind);
std::optional<NodeKind> node_kind_from(const std::string& name);

struct Node {
  std::string id;
  NodeKind kind = NodeKind::crossroads;
};

enum class SignKind { speed_limit, stop };

struct VerticalSign {
  SignKind kind = SignKind::speed_limit;
  double position_m = 0.0;
  int lane = -1;            // -1: every lane
  double limit_mps = 0.0;   // speed_limit only
};

struct Road {
  std::string id;
  std::string from_node;
  std::string to_node;
  double length_m = 0.0;
  int lane_count = 1;
  std::vector<VerticalSign> signs;
};

struct LaneLink {
  int from_lane = 0;
  int to_lane = 0;
};

// Which lanes of `from_road` continue onto `to_road`. Roads meeting at a node
// without an explicit connection get an identity mapping over the common lane
// count. Lane 0 is the leftmost lane.
struct Connection {
  std::string from_road;
  std::string to_road;
  std::vector<LaneLink> lanes;
};

struct Sensor {
  std::string id;
  std::string road;
  double position_m = 0.0;
  double interval_s = 60.0;
};

class RoadNetwork {
 public:
  std::vector<Node> nodes;
  std::vector<Road> roads;
  std::vector<Sensor> sensors;
  std::vector<Connection> connections;

  int node_index(const std::string& id) const;
  int road_index(const std::string& id) const;
  int sensor_index(const std::string& id) const;

  const std::vector<int>& roads_out_of(int node) const { return out_of_[node]; }
  const std::vector<int>& roads_into(int node) const { return into_[node]; }
  const std::vector<int>& successor_roads(int road) const { return succ_[road]; }
  const std::vector<int>& predecessor_roads(int road) const { return pred_[road]; }

  // lanes of `from_road` that lead into `to_road`; empty when not connected
  std::vector<LaneLink> lane_links(int from_road, int to_road) const;

  std::vector<int> entry_nodes() const;
  std::vector<int> exit_nodes() const;
  // sensor indices on `road`, sorted by position
  std::vector<int> sensors_on_road(int road) const;

  void build_indexes();  // called by build_network; idempotent

 private:
  std::unordered_map<std::string, int> node_by_id_, road_by_id_, sensor_by_id_;
  std::vector<std::vector<int>> out_of_, into_, succ_, pred_;
};

RoadNetwork build_network(std::vector<Node> nodes, std::vector<Road> roads,
                          std::vector<Sensor> sensors,
                          std::vector<Connection> connections);

// ---------------------------------------------------------------------------
// Sensor graph and cluster partition

struct RoadInterval {
  int road = -1;
  double begin_m = 0.0;
  double end_m = 0.0;
  double length_m() const { return end_m - begin_m; }
};

struct SensorArc {
  int from_sensor = -1;
  int to_sensor = -1;
  std::vector<RoadInterval> path;  // one sensor-free path between the two
};

// A minimal cluster: a maximal sensor-free region of the network.
struct MinimalUnit {
  std::vector<RoadInterval> intervals;
  std::vector<int> input_sensors;   // region is downstream of these
  std::vector<int> output_sensors;  // region is upstream of these
  double length_m = 0.0;
};

struct SensorGraph {
  const RoadNetwork* net = nullptr;
  std::vector<SensorArc> arcs;
  std::vector<MinimalUnit> units;
  // unit adjacent to each sensor (-1: outside). up = sensor is its output.
  std::vector<int> up_unit;
  std::vector<int> down_unit;
};

SensorGraph derive_sensor_graph(const RoadNetwork& net);

enum class Representation { micro, macro, replay, outside };
const char* to_string(Representation r);
std::optional<Representation> representation_from(const std::string& name);

struct Cluster {
  int id = -1;
  std::string name;
  Representation repr = Representation::micro;
  std::vector<int> units;  // sorted minimal-unit indices; empty for outside
  // derived, refreshed after any geometry change
  std::vector<int> input_sensors;
  std::vector<int> output_sensors;
  std::vector<int> interior_sensors;
};

class ClusterPartition {
 public:
  const RoadNetwork* net = nullptr;
  const SensorGraph* graph = nullptr;
  std::vector<Cluster> clusters;  // clusters[0] is the outside cluster
  int next_id = 1;

  const Cluster& outside() const { return clusters[0]; }
  const Cluster* find(int id) const;
  Cluster* find(int id);
  // index into clusters[] owning the unit; 0 never owns units
  int cluster_of_unit(int unit) const;
  // clusters[] index of the cluster a sensor side belongs to (0: outside)
  int cluster_on_up_side(int sensor) const;
  int cluster_on_down_side(int sensor) const;

  bool adjacent(int id_a, int id_b) const;
  std::vector<int> shared_sensors(int id_a, int id_b) const;

  void refresh_sensor_sets();
  void check_invariants(Diagnostics& diag) const;

  // true when the cluster's units form one linear chain (returned in travel
  // order). Rings qualify; branching geometry does not.
  std::optional<std::vector<RoadInterval>> linear_chain(int id) const;
  bool is_ring(int id) const;

  // member intervals of a cluster, sorted by (road, begin)
  std::vector<RoadInterval> cluster_intervals(int id) const;
};

ClusterPartition minimal_cut(const SensorGraph& graph);

ClusterPartition merge_clusters(const ClusterPartition& p, int a, int b,
                                std::optional<Representation> target = {});
ClusterPartition split_cluster(const ClusterPartition& p, int c, int at_sensor);

enum class ShiftDirection { from_a_to_b, from_b_to_a };
ClusterPartition shift_boundary(const ClusterPartition& p, int a, int b,
                                ShiftDirection dir);

// geometry + representation equality, ignoring cluster ids and names
bool same_partition(const ClusterPartition& a, const ClusterPartition& b);

}  // namespace hf
