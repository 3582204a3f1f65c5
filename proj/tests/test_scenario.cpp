#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hybridflow/io.hpp"
#include "hybridflow/scenario.hpp"

using namespace hf;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scenario_dir() { return fs::path(HF_SCENARIO_DIR); }

fs::path temp_file(const std::string& name, const std::string& content) {
  auto p = fs::temp_directory_path() / name;
  std::ofstream out(p);
  out << content;
  return p;
}

}  // namespace

TEST_CASE("a minimal single-road scenario loads and validates") {
  auto s = load_scenario(scenario_dir() / "minimal.scn");
  CHECK(s.duration_s == 600.0);
  CHECK(s.network.roads.size() == 1);
  CHECK(s.initial_partition.clusters.size() == 2);  // one unit + outside
  CHECK(s.micro_dt_s() == doctest::Approx(0.5));
}

TEST_CASE("micro_substeps of zero is a validation error") {
  std::string text = slurp(scenario_dir() / "minimal.scn");
  auto pos = text.find("micro_substeps 20");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 17, "micro_substeps 0 ");
  CHECK_THROWS_AS(parse_scenario(text, "broken"), ValidationError);
}

TEST_CASE("validation reports every failure, not only the first") {
  std::string text = R"(
simulation {
  duration 605
  base_step 10
  micro_substeps 0
  seed 1
  sensor_interval 61
}
network {
  node a entry
  node b exit
  road main from=a to=b length=2000 lanes=2
  sensor s_in road=main pos=0
  sensor s_out road=main pos=2000
}
partition {
  default micro
}
policy {
  mode static
}
)";
  try {
    parse_scenario(text, "multi");
    CHECK(false);
  } catch (const ValidationError& e) {
    CHECK(e.errors().size() >= 3);  // duration, substeps, sensor interval
  }
}

TEST_CASE("the eleven-cluster highway scenario matches the layout contract") {
  auto s = load_scenario(scenario_dir() / "highway11.scn");
  int micro = 0, macro = 0;
  bool r3_micro = false, r8_micro = false;
  for (const auto& c : s.initial_partition.clusters) {
    if (c.repr == Representation::micro) {
      ++micro;
      if (c.name == "R3") r3_micro = true;
      if (c.name == "R8") r8_micro = true;
    }
    if (c.repr == Representation::macro) ++macro;
  }
  CHECK(micro + macro == 11);
  CHECK(micro == 2);
  CHECK(r3_micro);
  CHECK(r8_micro);
  // the micro clusters are exactly the ones holding the ramp junctions
  for (const auto& c : s.initial_partition.clusters) {
    bool has_ramp = false;
    for (int u : c.units)
      for (const auto& iv : s.graph.units[u].intervals)
        if (s.network.roads[iv.road].id.rfind("ramp", 0) == 0) has_ramp = true;
    if (c.repr == Representation::micro) CHECK(has_ramp);
    if (c.repr == Representation::macro) CHECK(!has_ramp);
  }
}

TEST_CASE("scenario round-trips through its canonical form") {
  for (const char* name : {"minimal.scn", "hybrid_corridor.scn", "highway11.scn",
                           "jam_probe.scn", "cpu_reduce.scn", "ring_macro.scn"}) {
    auto s1 = load_scenario(scenario_dir() / name);
    std::string once = scenario_to_string(s1);
    auto s2 = parse_scenario(once, "roundtrip");
    std::string twice = scenario_to_string(s2);
    CHECK(once == twice);
  }
}

TEST_CASE("macro clusters reject branching geometry") {
  std::string text = slurp(scenario_dir() / "highway11.scn");
  auto pos = text.find("cluster R3 units=2 repr=micro");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 29, "cluster R3 units=2 repr=macro");
  CHECK_THROWS_AS(parse_scenario(text, "branchy"), ValidationError);
}

TEST_CASE("span clusters must trace a linear corridor") {
  auto s = load_scenario(scenario_dir() / "hybrid_corridor.scn");
  const Cluster* mid = nullptr;
  for (const auto& c : s.initial_partition.clusters)
    if (c.name == "mid") mid = &c;
  REQUIRE(mid);
  CHECK(mid->repr == Representation::macro);
  CHECK(mid->units.size() == 1);
  CHECK(s.initial_partition.linear_chain(mid->id).has_value());
}

TEST_CASE("a partition assigning one unit twice is rejected") {
  std::string text = slurp(scenario_dir() / "hybrid_corridor.scn");
  auto pos = text.find("cluster down span=e2:e3 repr=micro");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 34, "cluster down span=e1:e2 repr=micro");
  CHECK_THROWS_AS(parse_scenario(text, "overlap"), ValidationError);
}

TEST_CASE("turn ratios must sum to one per branch") {
  std::string text = slurp(scenario_dir() / "highway11.scn");
  auto pos = text.find("p=0.85");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 6, "p=0.80");
  CHECK_THROWS_AS(parse_scenario(text, "ratios"), ValidationError);
}

TEST_CASE("scripted events must be time-ordered and on real lanes") {
  std::string base = slurp(scenario_dir() / "minimal.scn");
  auto pos = base.find("flow_mass road=main pos=0 flow=600 speed=25");
  REQUIRE(pos != std::string::npos);
  std::string good = base;
  good.replace(pos, 43, "scripted road=main pos=0 events=(1,0,25),(2,1,25)");
  auto s = parse_scenario(good, "scripted");
  CHECK(s.inputs[0].events.size() == 2);

  std::string unordered = base;
  unordered.replace(pos, 43, "scripted road=main pos=0 events=(2,0,25),(1,1,25)");
  CHECK_THROWS_AS(parse_scenario(unordered, "unordered"), ValidationError);

  std::string bad_lane = base;
  bad_lane.replace(pos, 43, "scripted road=main pos=0 events=(1,5,25)");
  CHECK_THROWS_AS(parse_scenario(bad_lane, "bad_lane"), ValidationError);
}

TEST_CASE("parse errors carry line numbers") {
  std::string text = "simulation {\n  duration banana\n}\n";
  try {
    parse_scenario(text, "lines");
    CHECK(false);
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// sensor series ingest

TEST_CASE("ingest: an empty file with a header yields empty series") {
  auto p = temp_file("hf_empty.csv",
                     "sensor_id,t_seconds,flow_veh_per_h,mean_speed_m_per_s\n");
  auto series = ingest_sensor_series(p);
  CHECK(series.empty());
}

TEST_CASE("ingest: two sensors with ten rows each") {
  std::string content = "sensor_id,t_seconds,flow_veh_per_h,mean_speed_m_per_s\n";
  for (int i = 0; i < 10; ++i) {
    content += "sA," + std::to_string(60 * i) + ",1200,25\n";
    content += "sB," + std::to_string(60 * i) + ",800,22\n";
  }
  auto p = temp_file("hf_two.csv", content);
  auto series = ingest_sensor_series(p);
  REQUIRE(series.size() == 2);
  CHECK(series["sA"].size() == 10);
  CHECK(series["sB"].size() == 10);
  CHECK(series["sA"][3].flow_vph == doctest::Approx(1200));
}

TEST_CASE("ingest: a missing interval is gap-flagged and carried forward") {
  std::string content =
      "sensor_id,t_seconds,flow_veh_per_h,mean_speed_m_per_s\n"
      "sA,0,1200,25\n"
      "sA,60,1100,24\n"
      "sA,240,900,20\n";  // 120 and 180 are missing
  auto p = temp_file("hf_gap.csv", content);
  auto series = ingest_sensor_series(p);
  REQUIRE(series["sA"].size() == 5);
  CHECK(series["sA"][2].gap);
  CHECK(series["sA"][3].gap);
  CHECK(series["sA"][2].flow_vph == doctest::Approx(1100));  // carried forward
  CHECK(series["sA"][2].t_s == doctest::Approx(120));
  CHECK(!series["sA"][4].gap);
  // replay lookups use carry-forward semantics too
  CHECK(series_at(series["sA"], 130.0).flow_vph == doctest::Approx(1100));
}

TEST_CASE("ingest rejects non-monotonic timestamps and negative values") {
  auto bad1 = temp_file("hf_bad1.csv",
                        "sensor_id,t_seconds,flow_veh_per_h,mean_speed_m_per_s\n"
                        "sA,60,1200,25\nsA,0,1200,25\n");
  CHECK_THROWS_AS(ingest_sensor_series(bad1), ValidationError);
  auto bad2 = temp_file("hf_bad2.csv",
                        "sensor_id,t_seconds,flow_veh_per_h,mean_speed_m_per_s\n"
                        "sA,0,-5,25\n");
  CHECK_THROWS_AS(ingest_sensor_series(bad2), ValidationError);
  auto bad3 = temp_file("hf_bad3.csv", "not,a,valid,header\n");
  CHECK_THROWS_AS(ingest_sensor_series(bad3), ValidationError);
}
