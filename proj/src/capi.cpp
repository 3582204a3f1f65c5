#include "hybridflow/capi.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <string>

#include "hybridflow/engine.hpp"
#include "hybridflow/scenario.hpp"

namespace {

thread_local std::string g_last_error;

hf_status fail(hf_status code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

hf::Scenario* unwrap(hf_scenario* s) { return reinterpret_cast<hf::Scenario*>(s); }
const hf::Scenario* unwrap(const hf_scenario* s) {
  return reinterpret_cast<const hf::Scenario*>(s);
}

}  // namespace

extern "C" {

const char* hf_version(void) { return "0.1.0"; }

const char* hf_last_error(void) { return g_last_error.c_str(); }

hf_status hf_scenario_load(const char* path, hf_scenario** out) {
  if (!path || !out) return fail(HF_ERR_ARGUMENT, "null argument");
  *out = nullptr;
  try {
    auto* s = new hf::Scenario(hf::load_scenario(path));
    *out = reinterpret_cast<hf_scenario*>(s);
    g_last_error.clear();
    return HF_OK;
  } catch (const hf::ValidationError& e) {
    return fail(HF_ERR_VALIDATION, e.what());
  } catch (const std::exception& e) {
    return fail(HF_ERR_RUNTIME, e.what());
  }
}

void hf_scenario_free(hf_scenario* s) { delete unwrap(s); }

hf_status hf_scenario_set_seed(hf_scenario* s, uint64_t seed) {
  if (!s) return fail(HF_ERR_ARGUMENT, "null scenario");
  unwrap(s)->seed = seed;
  return HF_OK;
}

hf_status hf_scenario_set_duration(hf_scenario* s, double seconds) {
  if (!s) return fail(HF_ERR_ARGUMENT, "null scenario");
  hf::Scenario* sc = unwrap(s);
  double steps = seconds / sc->base_step_s;
  if (!(seconds > 0) || std::abs(steps - std::round(steps)) > 1e-9)
    return fail(HF_ERR_VALIDATION,
                "duration must be a positive multiple of the base step");
  sc->duration_s = seconds;
  return HF_OK;
}

hf_status hf_run(const hf_scenario* s, const char* out_dir, int worker_threads,
                 hf_run_summary* summary) {
  if (!s || !out_dir) return fail(HF_ERR_ARGUMENT, "null argument");
  try {
    hf::RunOptions opts;
    opts.worker_threads = worker_threads;
    hf::TimeSeriesOutput out = hf::run(*unwrap(s), opts);
    hf::emit_outputs(out, out_dir);
    if (summary) {
      summary->steps = out.steps;
      summary->injected = out.injected_total;
      summary->departed = out.departed_total;
      summary->commands_applied = out.commands_applied;
      double worst = 0.0;
      for (const auto& row : out.ledger)
        worst = std::max(worst, std::abs(row.balance));
      summary->max_ledger_error = worst;
    }
    g_last_error.clear();
    return HF_OK;
  } catch (const hf::ValidationError& e) {
    return fail(HF_ERR_VALIDATION, e.what());
  } catch (const std::exception& e) {
    return fail(HF_ERR_RUNTIME, e.what());
  }
}

hf_status hf_partition_describe(const hf_scenario* s, char** out_text) {
  if (!s || !out_text) return fail(HF_ERR_ARGUMENT, "null argument");
  try {
    const hf::Scenario& sc = *unwrap(s);
    std::ostringstream os;
    const auto& g = sc.graph;
    const auto& net = sc.network;
    os << "minimal units: " << g.units.size() << "\n";
    for (std::size_t u = 0; u < g.units.size(); ++u) {
      const auto& unit = g.units[u];
      os << "  unit " << u << ": length " << unit.length_m << " m;";
      os << " in:";
      for (int sidx : unit.input_sensors) os << " " << net.sensors[sidx].id;
      os << " out:";
      for (int sidx : unit.output_sensors) os << " " << net.sensors[sidx].id;
      os << "; intervals:";
      for (const auto& iv : unit.intervals)
        os << " " << net.roads[iv.road].id << "[" << iv.begin_m << "," << iv.end_m
           << ")";
      os << "\n";
    }
    os << "sensor arcs: " << g.arcs.size() << "\n";
    for (const auto& arc : g.arcs)
      os << "  " << net.sensors[arc.from_sensor].id << " -> "
         << net.sensors[arc.to_sensor].id << "\n";
    os << "clusters:\n";
    for (const auto& c : sc.initial_partition.clusters) {
      os << "  " << c.name << " (" << to_string(c.repr) << "): units";
      if (c.units.empty()) os << " -";
      for (int u : c.units) os << " " << u;
      os << "\n";
    }
    const std::string text = os.str();
    *out_text = new char[text.size() + 1];
    std::memcpy(*out_text, text.c_str(), text.size() + 1);
    g_last_error.clear();
    return HF_OK;
  } catch (const std::exception& e) {
    return fail(HF_ERR_RUNTIME, e.what());
  }
}

void hf_string_free(char* p) { delete[] p; }

}  // extern "C"
