#pragma once

#include <string>
#include <vector>

#include "hybridflow/network.hpp"

namespace hf::test {

// single road between an entry and an exit, cut by sensors
inline RoadNetwork linear_network(double length_m, int lanes,
                                  const std::vector<double>& sensor_pos) {
  std::vector<Node> nodes{{"a", NodeKind::network_entry},
                          {"b", NodeKind::network_exit}};
  std::vector<Road> roads{{"r", "a", "b", length_m, lanes, {}}};
  std::vector<Sensor> sensors;
  for (std::size_t i = 0; i < sensor_pos.size(); ++i)
    sensors.push_back({"s" + std::to_string(i), "r", sensor_pos[i], 60.0});
  return build_network(nodes, roads, sensors, {});
}

// closed loop road (from == to), optional sensors
inline RoadNetwork ring_network(double length_m, int lanes,
                                const std::vector<double>& sensor_pos) {
  std::vector<Node> nodes{{"o", NodeKind::crossroads}};
  std::vector<Road> roads{{"loop", "o", "o", length_m, lanes, {}}};
  std::vector<Sensor> sensors;
  for (std::size_t i = 0; i < sensor_pos.size(); ++i)
    sensors.push_back({"s" + std::to_string(i), "loop", sensor_pos[i], 60.0});
  return build_network(nodes, roads, sensors, {});
}

// two entry branches merging into one exit road
inline RoadNetwork y_merge_network() {
  std::vector<Node> nodes{{"a", NodeKind::network_entry},
                          {"b", NodeKind::network_entry},
                          {"m", NodeKind::highway_insertion},
                          {"c", NodeKind::network_exit}};
  std::vector<Road> roads{{"ra", "a", "m", 1000, 1, {}},
                          {"rb", "b", "m", 800, 1, {}},
                          {"rc", "m", "c", 1500, 2, {}}};
  std::vector<Connection> conns{{"ra", "rc", {{0, 0}}}, {"rb", "rc", {{0, 1}}}};
  std::vector<Sensor> sensors{{"sa0", "ra", 0, 60},  {"sb0", "rb", 0, 60},
                              {"sa", "ra", 500, 60}, {"sb", "rb", 400, 60},
                              {"sc", "rc", 1000, 60}, {"sx", "rc", 1500, 60}};
  return build_network(nodes, roads, sensors, conns);
}

// mainline with an on-ramp and an off-ramp; 11 sensor-delimited units
inline RoadNetwork highway_network() {
  std::vector<Node> nodes{
      {"n_in", NodeKind::network_entry},   {"j_ins", NodeKind::highway_insertion},
      {"j_ext", NodeKind::highway_extraction}, {"n_out", NodeKind::network_exit},
      {"r_in", NodeKind::network_entry},   {"r_out", NodeKind::network_exit}};
  std::vector<Road> roads{{"m1", "n_in", "j_ins", 1200, 2, {}},
                          {"m2", "j_ins", "j_ext", 2400, 2, {}},
                          {"m3", "j_ext", "n_out", 1180, 2, {}},
                          {"ramp_on", "r_in", "j_ins", 250, 1, {}},
                          {"ramp_off", "j_ext", "r_out", 250, 1, {}}};
  std::vector<Connection> conns{{"m1", "m2", {{0, 0}, {1, 1}}},
                                {"m2", "m3", {{0, 0}, {1, 1}}},
                                {"ramp_on", "m2", {{0, 1}}},
                                {"m2", "ramp_off", {{1, 0}}}};
  std::vector<Sensor> sensors;
  auto add = [&](const std::string& id, const std::string& road, double pos) {
    sensors.push_back({id, road, pos, 60.0});
  };
  add("s0", "m1", 0);
  add("s1", "m1", 600);
  add("s2", "m1", 1100);
  add("s3", "m2", 500);
  add("s4", "m2", 900);
  add("s5", "m2", 1300);
  add("s6", "m2", 1700);
  add("s7", "m2", 2100);
  add("s8", "m3", 100);
  add("s9", "m3", 480);
  add("s10", "m3", 860);
  add("s11", "m3", 1180);
  add("sr_on", "ramp_on", 0);
  add("sr_off", "ramp_off", 250);
  return build_network(nodes, roads, sensors, conns);
}

// partition with explicitly grouped units (all micro unless changed after)
inline ClusterPartition build_clusters(const SensorGraph& g,
                                       const std::vector<std::vector<int>>& groups) {
  ClusterPartition p;
  p.net = g.net;
  p.graph = &g;
  Cluster outside;
  outside.id = 0;
  outside.name = "outside";
  outside.repr = Representation::outside;
  p.clusters.push_back(outside);
  int id = 1;
  for (const auto& grp : groups) {
    Cluster c;
    c.id = id++;
    c.name = "k" + std::to_string(c.id);
    c.repr = Representation::micro;
    c.units = grp;
    p.clusters.push_back(std::move(c));
  }
  p.next_id = id;
  p.refresh_sensor_sets();
  return p;
}

}  // namespace hf::test
