#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hybridflow/control.hpp"
#include "hybridflow/coupling.hpp"
#include "hybridflow/io.hpp"
#include "hybridflow/scenario.hpp"

namespace hf {

struct RunOptions {
  int worker_threads = 0;  // 0: hardware concurrency, 1: single-threaded
};

struct TimeSeriesOutput {
  std::map<std::string, std::vector<SensorReading>> readings;  // by sensor id

  struct SegmentRow {
    double t_s = 0.0;
    int segment = 0;
    double density = 0.0;  // veh/km/lane
    double speed_kmh = 0.0;
    double flow_vph = 0.0;
  };
  std::map<std::string, std::vector<SegmentRow>> segments;  // by cluster name

  std::vector<std::string> command_log;

  struct LedgerRow {
    double t_s = 0.0;
    double injected = 0.0;
    double micro = 0.0;
    double macro_mass = 0.0;
    double input_queue = 0.0;
    double boundary_pending = 0.0;
    double departed = 0.0;
    double replay_absorbed = 0.0;
    double replay_emitted = 0.0;
    double residual = 0.0;
    double balance = 0.0;
  };
  std::vector<LedgerRow> ledger;

  std::vector<std::string> diagnostics;

  long steps = 0;
  long commands_applied = 0;
  double injected_total = 0.0;
  double departed_total = 0.0;
};

TimeSeriesOutput run(const Scenario& scenario, const RunOptions& opts = {});

// one delimited file per series plus the command log and the ledger
void emit_outputs(const TimeSeriesOutput& out, const std::filesystem::path& dir);

}  // namespace hf
