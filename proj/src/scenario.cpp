#include "hybridflow/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "hybridflow/units.hpp"

namespace hf {

double InputAgentDef::flow_at(double t_s) const {
  if (profile.empty()) return flow_vph;
  double flow = profile.front().second;
  for (const auto& [t, q] : profile) {
    if (t_s + 1e-9 < t) break;
    flow = q;
  }
  return flow;
}

namespace {

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

struct Entry {
  int line = 0;
  std::vector<std::string> tokens;  // positional tokens (no '=')
  std::map<std::string, std::string> kv;
};

struct ParsedFile {
  // section name -> entries in order
  std::vector<std::pair<std::string, std::vector<Entry>>> sections;
};

ParsedFile parse_sections(const std::string& text, Diagnostics& diag) {
  ParsedFile out;
  std::istringstream is(text);
  std::string raw;
  int line_no = 0;
  std::string current;
  std::vector<Entry>* bucket = nullptr;
  while (std::getline(is, raw)) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    auto tokens = tokenize(raw);
    if (tokens.empty()) continue;
    if (tokens.size() == 2 && tokens[1] == "{") {
      if (!current.empty())
        diag.error("line " + std::to_string(line_no) + ": nested section '" +
                   tokens[0] + "'");
      current = tokens[0];
      out.sections.push_back({current, {}});
      bucket = &out.sections.back().second;
      continue;
    }
    if (tokens.size() == 1 && tokens[0] == "}") {
      if (current.empty())
        diag.error("line " + std::to_string(line_no) + ": stray '}'");
      current.clear();
      bucket = nullptr;
      continue;
    }
    if (!bucket) {
      diag.error("line " + std::to_string(line_no) + ": content outside a section");
      continue;
    }
    Entry e;
    e.line = line_no;
    for (const auto& t : tokens) {
      auto eq = t.find('=');
      if (eq == std::string::npos)
        e.tokens.push_back(t);
      else
        e.kv[t.substr(0, eq)] = t.substr(eq + 1);
    }
    bucket->push_back(std::move(e));
  }
  if (!current.empty()) diag.error("unterminated section '" + current + "'");
  return out;
}

class EntryReader {
 public:
  EntryReader(const Entry& e, Diagnostics& diag, const std::string& what)
      : e_(e), diag_(&diag), what_(what) {}

  std::string where() const { return "line " + std::to_string(e_.line) + " (" + what_ + ")"; }

  bool has(const std::string& key) const { return e_.kv.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback = "") {
    auto it = e_.kv.find(key);
    if (it == e_.kv.end()) {
      if (fallback.empty())
        diag_->error(where() + ": missing '" + key + "'");
      return fallback;
    }
    return it->second;
  }

  double num(const std::string& key, double fallback, bool required = false) {
    auto it = e_.kv.find(key);
    if (it == e_.kv.end()) {
      if (required) diag_->error(where() + ": missing '" + key + "'");
      return fallback;
    }
    return to_num(it->second, fallback);
  }

  int lane(const std::string& key, int fallback) {
    auto it = e_.kv.find(key);
    if (it == e_.kv.end()) return fallback;
    if (it->second == "*") return -1;
    return int(to_num(it->second, fallback));
  }

  double to_num(const std::string& s, double fallback) {
    try {
      std::size_t used = 0;
      double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (...) {
      diag_->error(where() + ": '" + s + "' is not a number");
      return fallback;
    }
  }

  // "(a,b),(c,d)" -> rows of numbers
  std::vector<std::vector<double>> tuples(const std::string& key) {
    std::vector<std::vector<double>> rows;
    auto it = e_.kv.find(key);
    if (it == e_.kv.end()) return rows;
    const std::string& s = it->second;
    std::size_t i = 0;
    while (i < s.size()) {
      if (s[i] != '(') {
        diag_->error(where() + ": malformed tuple list '" + s + "'");
        return rows;
      }
      auto close = s.find(')', i);
      if (close == std::string::npos) {
        diag_->error(where() + ": malformed tuple list '" + s + "'");
        return rows;
      }
      std::vector<double> row;
      std::string inner = s.substr(i + 1, close - i - 1);
      std::istringstream rs(inner);
      std::string field;
      while (std::getline(rs, field, ',')) row.push_back(to_num(field, 0.0));
      rows.push_back(std::move(row));
      i = close + 1;
      if (i < s.size() && s[i] == ',') ++i;
    }
    return rows;
  }

  std::vector<double> num_list(const std::string& key) {
    std::vector<double> out;
    auto it = e_.kv.find(key);
    if (it == e_.kv.end()) return out;
    std::istringstream rs(it->second);
    std::string field;
    while (std::getline(rs, field, ',')) out.push_back(to_num(field, 0.0));
    return out;
  }

  std::vector<int> int_list(const std::string& key) {
    std::vector<int> out;
    for (double v : num_list(key)) out.push_back(int(v));
    return out;
  }

  const Entry& entry() const { return e_; }

 private:
  const Entry& e_;
  Diagnostics* diag_;
  std::string what_;
};

void read_scalar_section(const std::vector<Entry>& entries, Diagnostics& diag,
                         const std::string& section,
                         const std::map<std::string, double*>& fields) {
  for (const auto& e : entries) {
    if (e.tokens.size() != 2) {
      diag.error("line " + std::to_string(e.line) + " (" + section +
                 "): expected 'key value'");
      continue;
    }
    auto it = fields.find(e.tokens[0]);
    if (it == fields.end()) {
      diag.error("line " + std::to_string(e.line) + " (" + section +
                 "): unknown key '" + e.tokens[0] + "'");
      continue;
    }
    try {
      *it->second = std::stod(e.tokens[1]);
    } catch (...) {
      diag.error("line " + std::to_string(e.line) + " (" + section + "): '" +
                 e.tokens[1] + "' is not a number");
    }
  }
}

// walk the unique corridor between two sensors, collecting units
std::vector<int> span_units(const SensorGraph& g, int from_sensor, int to_sensor,
                            Diagnostics& diag, const std::string& where) {
  std::vector<int> units;
  int u = g.down_unit[from_sensor];
  for (int guard = 0; guard < int(g.units.size()) + 1; ++guard) {
    if (u < 0) {
      diag.error(where + ": span leaves the network before reaching its end sensor");
      return {};
    }
    units.push_back(u);
    if (g.up_unit[to_sensor] == u) return units;
    const auto& outs = g.units[u].output_sensors;
    if (outs.size() != 1) {
      diag.error(where + ": span requires a linear corridor");
      return {};
    }
    u = g.down_unit[outs[0]];
  }
  diag.error(where + ": span does not terminate");
  return {};
}

}  // namespace

Scenario parse_scenario(const std::string& text, const std::string& name,
                        const std::filesystem::path& base_dir) {
  Diagnostics diag;
  Scenario s;
  s.name = name;
  s.base_dir = base_dir;

  ParsedFile file = parse_sections(text, diag);
  diag.throw_if_failed("scenario '" + name + "' failed to parse");

  for (auto& [section, entries] : file.sections) {
    if (section == "simulation") {
      double substeps = s.micro_substeps, seed = double(s.seed);
      read_scalar_section(entries, diag, section,
                          {{"duration", &s.duration_s},
                           {"base_step", &s.base_step_s},
                           {"micro_substeps", &substeps},
                           {"seed", &seed},
                           {"sensor_interval", &s.sensor_interval_s}});
      s.micro_substeps = int(substeps);
      s.seed = std::uint64_t(seed);
    } else if (section == "idm") {
      read_scalar_section(entries, diag, section,
                          {{"desired_speed", &s.idm.desired_speed_mps},
                           {"time_headway", &s.idm.time_headway_s},
                           {"min_gap", &s.idm.min_gap_m},
                           {"max_accel", &s.idm.max_accel},
                           {"comfort_decel", &s.idm.comfort_decel},
                           {"exponent", &s.idm.exponent},
                           {"vehicle_length", &s.idm.vehicle_length_m}});
    } else if (section == "mobil") {
      read_scalar_section(entries, diag, section,
                          {{"politeness", &s.mobil.politeness},
                           {"threshold", &s.mobil.threshold},
                           {"safe_braking", &s.mobil.safe_braking}});
    } else if (section == "metanet") {
      double relaxation_s = s.metanet.relaxation_h * kSecondsPerHour;
      read_scalar_section(entries, diag, section,
                          {{"free_speed", &s.metanet.free_speed_kmh},
                           {"critical_density", &s.metanet.critical_density},
                           {"exponent", &s.metanet.fd_exponent},
                           {"jam_density", &s.metanet.jam_density},
                           {"relaxation", &relaxation_s},
                           {"convection", &s.metanet.convection},
                           {"anticipation", &s.metanet.anticipation_km2_h},
                           {"regularization", &s.metanet.regularization},
                           {"segment_length", &s.segment_target_m}});
      s.metanet.relaxation_h = s_to_h(relaxation_s);
    } else if (section == "warmup") {
      read_scalar_section(entries, diag, section, {{"duration", &s.warmup.duration_s}});
    } else if (section == "network") {
      for (const auto& e : entries) {
        if (e.tokens.empty()) continue;
        EntryReader r(e, diag, "network/" + e.tokens[0]);
        const std::string& kind = e.tokens[0];
        if (kind == "node") {
          if (e.tokens.size() != 3) {
            diag.error(r.where() + ": expected 'node <id> <kind>'");
            continue;
          }
          auto nk = node_kind_from(e.tokens[2]);
          if (!nk) {
            diag.error(r.where() + ": unknown node kind '" + e.tokens[2] + "'");
            continue;
          }
          s.nodes.push_back({e.tokens[1], *nk});
        } else if (kind == "road") {
          if (e.tokens.size() != 2) {
            diag.error(r.where() + ": expected 'road <id> ...'");
            continue;
          }
          Road rd;
          rd.id = e.tokens[1];
          rd.from_node = r.str("from");
          rd.to_node = r.str("to");
          rd.length_m = r.num("length", 0.0, true);
          rd.lane_count = int(r.num("lanes", 1.0));
          s.roads.push_back(std::move(rd));
        } else if (kind == "sensor") {
          if (e.tokens.size() != 2) {
            diag.error(r.where() + ": expected 'sensor <id> ...'");
            continue;
          }
          Sensor sn;
          sn.id = e.tokens[1];
          sn.road = r.str("road");
          sn.position_m = r.num("pos", 0.0, true);
          sn.interval_s = r.num("interval", s.sensor_interval_s);
          s.sensors.push_back(std::move(sn));
        } else if (kind == "connection") {
          Connection c;
          c.from_road = r.str("from");
          c.to_road = r.str("to");
          if (r.has("map")) {
            for (const std::string& part : [&] {
                   std::vector<std::string> parts;
                   std::istringstream ms(r.str("map"));
                   std::string p;
                   while (std::getline(ms, p, ',')) parts.push_back(p);
                   return parts;
                 }()) {
              auto colon = part.find(':');
              if (colon == std::string::npos) {
                diag.error(r.where() + ": lane map entries look like 'from:to'");
                continue;
              }
              LaneLink l;
              l.from_lane = int(r.to_num(part.substr(0, colon), 0));
              l.to_lane = int(r.to_num(part.substr(colon + 1), 0));
              c.lanes.push_back(l);
            }
          }
          s.connections.push_back(std::move(c));
        } else if (kind == "sign") {
          VerticalSign sg;
          std::string sk = r.str("kind");
          if (sk == "speed_limit") {
            sg.kind = SignKind::speed_limit;
            sg.limit_mps = r.num("limit", 0.0, true);
          } else if (sk == "stop") {
            sg.kind = SignKind::stop;
          } else {
            diag.error(r.where() + ": unsupported sign kind '" + sk + "'");
            continue;
          }
          sg.position_m = r.num("pos", 0.0, true);
          sg.lane = r.lane("lane", -1);
          std::string road_id = r.str("road");
          bool found = false;
          for (auto& rd : s.roads)
            if (rd.id == road_id) {
              rd.signs.push_back(sg);
              found = true;
            }
          if (!found) diag.error(r.where() + ": unknown road '" + road_id + "'");
        } else {
          diag.error(r.where() + ": unknown network element '" + kind + "'");
        }
      }
    } else if (section == "turn_ratios") {
      for (const auto& e : entries) {
        EntryReader r(e, diag, "turn_ratios");
        TurnRatio tr;
        tr.node = r.str("node");
        tr.from_road = r.str("from");
        tr.to_road = r.str("to");
        tr.p = r.num("p", 1.0, true);
        s.turn_ratios.push_back(std::move(tr));
      }
    } else if (section == "partition") {
      for (const auto& e : entries) {
        if (e.tokens.empty()) continue;
        EntryReader r(e, diag, "partition");
        if (e.tokens[0] == "default") {
          if (e.tokens.size() == 2) {
            if (auto rep = representation_from(e.tokens[1]);
                rep && *rep != Representation::outside)
              s.default_repr = *rep;
            else
              diag.error(r.where() + ": bad default representation");
          }
        } else if (e.tokens[0] == "cluster") {
          if (e.tokens.size() != 2) {
            diag.error(r.where() + ": expected 'cluster <name> ...'");
            continue;
          }
          PartitionDef d;
          d.name = e.tokens[1];
          d.units = r.int_list("units");
          if (r.has("span")) {
            std::string span = r.str("span");
            auto colon = span.find(':');
            if (colon == std::string::npos) {
              diag.error(r.where() + ": span looks like 'sensorA:sensorB'");
            } else {
              d.span_from = span.substr(0, colon);
              d.span_to = span.substr(colon + 1);
            }
          }
          auto rep = representation_from(r.str("repr"));
          if (!rep || *rep == Representation::outside) {
            diag.error(r.where() + ": bad representation");
            continue;
          }
          d.repr = *rep;
          s.partition_defs.push_back(std::move(d));
        } else {
          diag.error(r.where() + ": unknown partition element");
        }
      }
    } else if (section == "init") {
      for (const auto& e : entries) {
        if (e.tokens.empty()) continue;
        EntryReader r(e, diag, "init");
        InitDef d;
        if (e.tokens[0] == "macro")
          d.macro = true;
        else if (e.tokens[0] == "micro")
          d.macro = false;
        else {
          diag.error(r.where() + ": expected 'macro' or 'micro'");
          continue;
        }
        d.cluster = r.str("cluster");
        d.densities = r.num_list("rho");
        if (d.densities.empty()) diag.error(r.where() + ": missing 'rho'");
        if (r.has("v")) {
          std::string v = r.str("v");
          d.speed = v == "eq" ? -1.0 : r.to_num(v, -1.0);
        }
        s.init_defs.push_back(std::move(d));
      }
    } else if (section == "inputs") {
      for (const auto& e : entries) {
        if (e.tokens.empty()) continue;
        EntryReader r(e, diag, "inputs/" + e.tokens[0]);
        InputAgentDef d;
        if (e.tokens[0] == "flow_mass") {
          d.kind = InputAgentDef::Kind::flow_mass;
          d.road = r.str("road");
          d.position_m = r.num("pos", 0.0);
          d.lane = r.lane("lane", -1);
          d.flow_vph = r.num("flow", 0.0);
          d.speed_mps = r.num("speed", 25.0);
          for (const auto& row : r.tuples("profile")) {
            if (row.size() != 2) {
              diag.error(r.where() + ": profile entries are (t,flow)");
              continue;
            }
            d.profile.emplace_back(row[0], row[1]);
          }
        } else if (e.tokens[0] == "scripted") {
          d.kind = InputAgentDef::Kind::scripted;
          d.road = r.str("road");
          d.position_m = r.num("pos", 0.0);
          d.lane = r.lane("lane", -1);
          for (const auto& row : r.tuples("events")) {
            if (row.size() != 3) {
              diag.error(r.where() + ": events are (t,lane,speed)");
              continue;
            }
            d.events.push_back({row[0], int(row[1]), row[2]});
          }
        } else if (e.tokens[0] == "replay") {
          d.kind = InputAgentDef::Kind::replay;
          d.series_file = r.str("file");
        } else {
          diag.error(r.where() + ": unknown input kind '" + e.tokens[0] + "'");
          continue;
        }
        s.inputs.push_back(std::move(d));
      }
    } else if (section == "policy") {
      for (const auto& e : entries) {
        if (e.tokens.size() != 2) {
          diag.error("line " + std::to_string(e.line) + " (policy): expected 'key value'");
          continue;
        }
        EntryReader r(e, diag, "policy");
        const std::string& key = e.tokens[0];
        const std::string& val = e.tokens[1];
        if (key == "mode") {
          if (auto m = policy_mode_from(val))
            s.policy.mode = *m;
          else
            diag.error(r.where() + ": unknown mode '" + val + "'");
        } else if (key == "budget")
          s.policy.micro_vehicle_budget = r.to_num(val, 0);
        else if (key == "rho_on")
          s.policy.congestion_on = r.to_num(val, 0);
        else if (key == "rho_off")
          s.policy.congestion_off = r.to_num(val, 0);
        else if (key == "period")
          s.policy.control_period = int(r.to_num(val, 1));
        else if (key == "shockwave")
          s.policy.shockwave_tracking = val == "on";
        else
          diag.error(r.where() + ": unknown key '" + key + "'");
      }
    } else {
      diag.error("unknown section '" + section + "'");
    }
  }
  diag.throw_if_failed("scenario '" + name + "' failed to parse");

  // ---- build and validate -------------------------------------------------

  if (s.micro_substeps < 1) diag.error("simulation: micro_substeps must be >= 1");
  if (!(s.base_step_s > 0)) diag.error("simulation: base_step must be > 0");
  if (s.base_step_s > 0) {
    double steps = s.duration_s / s.base_step_s;
    if (std::abs(steps - std::round(steps)) > 1e-9)
      diag.error("simulation: duration must be a multiple of base_step");
  }
  if (!(s.sensor_interval_s > 0))
    diag.error("simulation: sensor_interval must be > 0");
  else if (s.base_step_s > 0) {
    double m = s.sensor_interval_s / s.base_step_s;
    if (std::abs(m - std::round(m)) > 1e-9)
      diag.error("simulation: sensor_interval must be a multiple of base_step");
  }
  s.idm.validate(diag);
  s.mobil.validate(diag);
  s.policy.validate(diag);
  if (!(s.warmup.duration_s >= 0)) diag.error("warmup: duration must be >= 0");
  diag.throw_if_failed("scenario '" + name + "' is invalid");
  s.warmup.dt_s = s.micro_dt_s();
  s.metanet.step_h = s_to_h(s.base_step_s);

  s.network = build_network(s.nodes, s.roads, s.sensors, s.connections);
  s.graph = derive_sensor_graph(s.network);

  for (const auto& sn : s.network.sensors) {
    double m = sn.interval_s / s.base_step_s;
    if (std::abs(m - std::round(m)) > 1e-9)
      diag.error("sensor '" + sn.id + "': interval must be a multiple of base_step");
  }

  // partition: named clusters first, then one cluster per leftover unit
  ClusterPartition p = minimal_cut(s.graph);
  ClusterPartition built;
  built.net = &s.network;
  built.graph = &s.graph;
  built.clusters.push_back(p.outside());
  std::vector<int> owner(s.graph.units.size(), -1);
  int next_id = 1;
  for (const auto& d : s.partition_defs) {
    Cluster c;
    c.id = next_id++;
    c.name = d.name;
    c.repr = d.repr;
    c.units = d.units;
    if (!d.span_from.empty()) {
      int fs = s.network.sensor_index(d.span_from);
      int ts = s.network.sensor_index(d.span_to);
      if (fs < 0 || ts < 0) {
        diag.error("partition '" + d.name + "': unknown span sensor");
        continue;
      }
      auto su = span_units(s.graph, fs, ts, diag, "partition '" + d.name + "'");
      c.units.insert(c.units.end(), su.begin(), su.end());
    }
    std::sort(c.units.begin(), c.units.end());
    c.units.erase(std::unique(c.units.begin(), c.units.end()), c.units.end());
    if (c.units.empty()) {
      diag.error("partition '" + d.name + "': no units");
      continue;
    }
    for (int u : c.units) {
      if (u < 0 || u >= int(owner.size())) {
        diag.error("partition '" + d.name + "': unit " + std::to_string(u) +
                   " does not exist");
      } else if (owner[u] >= 0) {
        diag.error("partition '" + d.name + "': unit " + std::to_string(u) +
                   " already assigned");
      } else {
        owner[u] = c.id;
      }
    }
    built.clusters.push_back(std::move(c));
  }
  for (std::size_t u = 0; u < owner.size(); ++u) {
    if (owner[u] >= 0) continue;
    Cluster c;
    c.id = next_id++;
    c.name = "c" + std::to_string(u);
    c.repr = s.default_repr;
    c.units = {int(u)};
    built.clusters.push_back(std::move(c));
  }
  built.next_id = next_id;
  built.refresh_sensor_sets();
  built.check_invariants(diag);
  std::set<std::string> cluster_names;
  for (const auto& c : built.clusters)
    if (!cluster_names.insert(c.name).second)
      diag.error("partition: duplicate cluster name '" + c.name + "'");
  diag.throw_if_failed("scenario '" + name + "' has an invalid partition");
  s.initial_partition = std::move(built);

  // macro clusters must be linear corridors with CFL-safe segments
  double min_seg_km = -1.0;
  for (const auto& c : s.initial_partition.clusters) {
    if (c.repr != Representation::macro) continue;
    auto chain = s.initial_partition.linear_chain(c.id);
    if (!chain) {
      diag.error("cluster '" + c.name + "': macro representation needs a linear corridor");
      continue;
    }
    for (const auto& seg : tile_segments(s.network, *chain, s.segment_target_m)) {
      if (min_seg_km < 0 || seg.length_km < min_seg_km) min_seg_km = seg.length_km;
    }
  }
  s.metanet.validate(diag, min_seg_km);

  // init blocks reference the right clusters
  auto find_cluster = [&](const std::string& cname) -> const Cluster* {
    for (const auto& c : s.initial_partition.clusters)
      if (c.name == cname) return &c;
    return nullptr;
  };
  for (const auto& d : s.init_defs) {
    const Cluster* c = find_cluster(d.cluster);
    if (!c) {
      diag.error("init: unknown cluster '" + d.cluster + "'");
      continue;
    }
    bool is_macro = c->repr == Representation::macro;
    if (d.macro != is_macro)
      diag.error("init: cluster '" + d.cluster + "' representation mismatch");
    for (double rho : d.densities)
      if (rho < 0) diag.error("init: cluster '" + d.cluster + "': negative density");
  }

  for (const auto& in : s.inputs) {
    if (in.kind == InputAgentDef::Kind::replay) {
      if (in.series_file.empty()) diag.error("inputs: replay without a file");
      continue;
    }
    int r = s.network.road_index(in.road);
    if (r < 0) {
      diag.error("inputs: unknown road '" + in.road + "'");
      continue;
    }
    if (in.position_m < 0 || in.position_m > s.network.roads[r].length_m)
      diag.error("inputs: position outside road '" + in.road + "'");
    if (in.lane >= s.network.roads[r].lane_count)
      diag.error("inputs: lane does not exist on road '" + in.road + "'");
    if (in.kind == InputAgentDef::Kind::flow_mass) {
      if (in.flow_vph < 0) diag.error("inputs: negative flow");
      for (std::size_t i = 1; i < in.profile.size(); ++i)
        if (in.profile[i].first <= in.profile[i - 1].first)
          diag.error("inputs: profile times must increase");
    } else {
      for (std::size_t i = 1; i < in.events.size(); ++i)
        if (in.events[i].t_s < in.events[i - 1].t_s)
          diag.error("inputs: scripted events must be time-ordered");
      for (const auto& ev : in.events)
        if (ev.lane < 0 || ev.lane >= s.network.roads[r].lane_count)
          diag.error("inputs: scripted event on a nonexistent lane");
    }
  }

  bool has_replay_cluster = false;
  for (const auto& c : s.initial_partition.clusters)
    if (c.repr == Representation::replay) has_replay_cluster = true;
  bool has_replay_input = false;
  for (const auto& in : s.inputs)
    if (in.kind == InputAgentDef::Kind::replay) has_replay_input = true;
  if (has_replay_cluster && !has_replay_input)
    diag.error("partition: replay cluster without a replay input series");

  // turn ratios must describe real branches and sum to one
  std::map<std::pair<std::string, std::string>, double> ratio_sum;
  for (const auto& tr : s.turn_ratios) {
    int from = s.network.road_index(tr.from_road);
    int to = s.network.road_index(tr.to_road);
    if (from < 0 || to < 0 || s.network.node_index(tr.node) < 0) {
      diag.error("turn_ratios: unknown node or road");
      continue;
    }
    const auto& sc = s.network.successor_roads(from);
    if (std::find(sc.begin(), sc.end(), to) == sc.end())
      diag.error("turn_ratios: road '" + tr.to_road + "' does not follow '" +
                 tr.from_road + "'");
    if (tr.p < 0 || tr.p > 1) diag.error("turn_ratios: p outside [0,1]");
    ratio_sum[{tr.node, tr.from_road}] += tr.p;
  }
  for (const auto& [key, sum] : ratio_sum)
    if (std::abs(sum - 1.0) > 1e-6)
      diag.error("turn_ratios: ratios from '" + key.second + "' sum to " +
                 std::to_string(sum) + ", expected 1");

  diag.throw_if_failed("scenario '" + name + "' is invalid");
  return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open scenario", {path.string()});
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scenario(buf.str(), path.stem().string(),
                        path.has_parent_path() ? path.parent_path() : ".");
}

// ---------------------------------------------------------------------------
// canonical emission

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void write_scenario(const Scenario& s, std::ostream& os) {
  os << "simulation {\n";
  os << "  duration " << fmt(s.duration_s) << "\n";
  os << "  base_step " << fmt(s.base_step_s) << "\n";
  os << "  micro_substeps " << s.micro_substeps << "\n";
  os << "  seed " << s.seed << "\n";
  os << "  sensor_interval " << fmt(s.sensor_interval_s) << "\n";
  os << "}\n";

  os << "idm {\n";
  os << "  desired_speed " << fmt(s.idm.desired_speed_mps) << "\n";
  os << "  time_headway " << fmt(s.idm.time_headway_s) << "\n";
  os << "  min_gap " << fmt(s.idm.min_gap_m) << "\n";
  os << "  max_accel " << fmt(s.idm.max_accel) << "\n";
  os << "  comfort_decel " << fmt(s.idm.comfort_decel) << "\n";
  os << "  exponent " << fmt(s.idm.exponent) << "\n";
  os << "  vehicle_length " << fmt(s.idm.vehicle_length_m) << "\n";
  os << "}\n";

  os << "mobil {\n";
  os << "  politeness " << fmt(s.mobil.politeness) << "\n";
  os << "  threshold " << fmt(s.mobil.threshold) << "\n";
  os << "  safe_braking " << fmt(s.mobil.safe_braking) << "\n";
  os << "}\n";

  os << "metanet {\n";
  os << "  free_speed " << fmt(s.metanet.free_speed_kmh) << "\n";
  os << "  critical_density " << fmt(s.metanet.critical_density) << "\n";
  os << "  exponent " << fmt(s.metanet.fd_exponent) << "\n";
  os << "  jam_density " << fmt(s.metanet.jam_density) << "\n";
  os << "  relaxation " << fmt(h_to_s(s.metanet.relaxation_h)) << "\n";
  os << "  convection " << fmt(s.metanet.convection) << "\n";
  os << "  anticipation " << fmt(s.metanet.anticipation_km2_h) << "\n";
  os << "  regularization " << fmt(s.metanet.regularization) << "\n";
  os << "  segment_length " << fmt(s.segment_target_m) << "\n";
  os << "}\n";

  os << "warmup {\n  duration " << fmt(s.warmup.duration_s) << "\n}\n";

  os << "network {\n";
  for (const auto& n : s.nodes)
    os << "  node " << n.id << " " << to_string(n.kind) << "\n";
  for (const auto& r : s.roads) {
    os << "  road " << r.id << " from=" << r.from_node << " to=" << r.to_node
       << " length=" << fmt(r.length_m) << " lanes=" << r.lane_count << "\n";
    for (const auto& sg : r.signs) {
      os << "  sign road=" << r.id
         << " kind=" << (sg.kind == SignKind::speed_limit ? "speed_limit" : "stop")
         << " pos=" << fmt(sg.position_m);
      if (sg.kind == SignKind::speed_limit) os << " limit=" << fmt(sg.limit_mps);
      if (sg.lane >= 0) os << " lane=" << sg.lane;
      os << "\n";
    }
  }
  for (const auto& sn : s.sensors)
    os << "  sensor " << sn.id << " road=" << sn.road << " pos=" << fmt(sn.position_m)
       << " interval=" << fmt(sn.interval_s) << "\n";
  for (const auto& c : s.connections) {
    os << "  connection from=" << c.from_road << " to=" << c.to_road;
    if (!c.lanes.empty()) {
      os << " map=";
      for (std::size_t i = 0; i < c.lanes.size(); ++i) {
        if (i) os << ",";
        os << c.lanes[i].from_lane << ":" << c.lanes[i].to_lane;
      }
    }
    os << "\n";
  }
  os << "}\n";

  if (!s.turn_ratios.empty()) {
    os << "turn_ratios {\n";
    for (const auto& tr : s.turn_ratios)
      os << "  ratio node=" << tr.node << " from=" << tr.from_road
         << " to=" << tr.to_road << " p=" << fmt(tr.p) << "\n";
    os << "}\n";
  }

  os << "partition {\n";
  os << "  default " << to_string(s.default_repr) << "\n";
  for (const auto& d : s.partition_defs) {
    os << "  cluster " << d.name;
    if (!d.span_from.empty())
      os << " span=" << d.span_from << ":" << d.span_to;
    if (!d.units.empty()) {
      os << " units=";
      for (std::size_t i = 0; i < d.units.size(); ++i) {
        if (i) os << ",";
        os << d.units[i];
      }
    }
    os << " repr=" << to_string(d.repr) << "\n";
  }
  os << "}\n";

  if (!s.init_defs.empty()) {
    os << "init {\n";
    for (const auto& d : s.init_defs) {
      os << "  " << (d.macro ? "macro" : "micro") << " cluster=" << d.cluster
         << " rho=";
      for (std::size_t i = 0; i < d.densities.size(); ++i) {
        if (i) os << ",";
        os << fmt(d.densities[i]);
      }
      if (d.speed < 0)
        os << " v=eq";
      else
        os << " v=" << fmt(d.speed);
      os << "\n";
    }
    os << "}\n";
  }

  if (!s.inputs.empty()) {
    os << "inputs {\n";
    for (const auto& in : s.inputs) {
      switch (in.kind) {
        case InputAgentDef::Kind::flow_mass: {
          os << "  flow_mass road=" << in.road << " pos=" << fmt(in.position_m);
          if (in.lane >= 0) os << " lane=" << in.lane;
          os << " flow=" << fmt(in.flow_vph) << " speed=" << fmt(in.speed_mps);
          if (!in.profile.empty()) {
            os << " profile=";
            for (std::size_t i = 0; i < in.profile.size(); ++i) {
              if (i) os << ",";
              os << "(" << fmt(in.profile[i].first) << "," << fmt(in.profile[i].second)
                 << ")";
            }
          }
          os << "\n";
          break;
        }
        case InputAgentDef::Kind::scripted: {
          os << "  scripted road=" << in.road << " pos=" << fmt(in.position_m);
          if (in.lane >= 0) os << " lane=" << in.lane;
          os << " events=";
          for (std::size_t i = 0; i < in.events.size(); ++i) {
            if (i) os << ",";
            os << "(" << fmt(in.events[i].t_s) << "," << in.events[i].lane << ","
               << fmt(in.events[i].speed_mps) << ")";
          }
          os << "\n";
          break;
        }
        case InputAgentDef::Kind::replay:
          os << "  replay file=" << in.series_file << "\n";
          break;
      }
    }
    os << "}\n";
  }

  os << "policy {\n";
  os << "  mode " << to_string(s.policy.mode) << "\n";
  os << "  budget " << fmt(s.policy.micro_vehicle_budget) << "\n";
  os << "  rho_on " << fmt(s.policy.congestion_on) << "\n";
  os << "  rho_off " << fmt(s.policy.congestion_off) << "\n";
  os << "  period " << s.policy.control_period << "\n";
  os << "  shockwave " << (s.policy.shockwave_tracking ? "on" : "off") << "\n";
  os << "}\n";
}

std::string scenario_to_string(const Scenario& s) {
  std::ostringstream os;
  write_scenario(s, os);
  return os.str();
}

}  // namespace hf
