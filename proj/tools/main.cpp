// hybridflow command line: run, validate and inspect simulation scenarios.
// Talks to the core exclusively through the C API.

#include <cstdint>
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "hybridflow/capi.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

int from_status(hf_status st) {
  switch (st) {
    case HF_OK: return kExitOk;
    case HF_ERR_VALIDATION: return kExitValidation;
    default: return kExitRuntime;
  }
}

struct ScenarioHandle {
  hf_scenario* ptr = nullptr;
  ~ScenarioHandle() { hf_scenario_free(ptr); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybridflow - dynamic hybrid micro/macro traffic simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(hf_version()));

  std::string scenario_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  double duration = 0.0;
  bool duration_set = false;
  int threads = 0;

  auto* run_cmd = app.add_subcommand("run", "run a scenario and write its outputs");
  run_cmd->add_option("scenario", scenario_path, "scenario file")->required();
  run_cmd->add_option("-o,--out", out_dir, "output directory");
  run_cmd->add_option("--seed", seed, "override the scenario seed")
      ->each([&](const std::string&) { seed_set = true; });
  run_cmd->add_option("--duration", duration, "override the duration (s)")
      ->each([&](const std::string&) { duration_set = true; });
  run_cmd->add_option("--threads", threads,
                      "worker threads (0 = hardware default, 1 = single-threaded)");

  auto* validate_cmd = app.add_subcommand("validate", "check a scenario file");
  validate_cmd->add_option("scenario", scenario_path, "scenario file")->required();

  auto* cut_cmd =
      app.add_subcommand("cut", "print the minimal-cut partition of the network");
  cut_cmd->add_option("scenario", scenario_path, "scenario file")->required();

  CLI11_PARSE(app, argc, argv);

  ScenarioHandle sc;
  hf_status st = hf_scenario_load(scenario_path.c_str(), &sc.ptr);
  if (st != HF_OK) {
    std::fprintf(stderr, "%s\n", hf_last_error());
    return from_status(st);
  }

  if (validate_cmd->parsed()) {
    std::printf("%s: ok\n", scenario_path.c_str());
    return kExitOk;
  }

  if (cut_cmd->parsed()) {
    char* text = nullptr;
    st = hf_partition_describe(sc.ptr, &text);
    if (st != HF_OK) {
      std::fprintf(stderr, "%s\n", hf_last_error());
      return from_status(st);
    }
    std::printf("%s", text);
    hf_string_free(text);
    return kExitOk;
  }

  if (seed_set) hf_scenario_set_seed(sc.ptr, seed);
  if (duration_set) {
    st = hf_scenario_set_duration(sc.ptr, duration);
    if (st != HF_OK) {
      std::fprintf(stderr, "%s\n", hf_last_error());
      return from_status(st);
    }
  }

  hf_run_summary summary{};
  st = hf_run(sc.ptr, out_dir.c_str(), threads, &summary);
  if (st != HF_OK) {
    std::fprintf(stderr, "%s\n", hf_last_error());
    return from_status(st);
  }
  std::printf("steps %ld, injected %.1f, departed %.1f, commands %ld, "
              "ledger error %.3g\n",
              summary.steps, summary.injected, summary.departed,
              summary.commands_applied, summary.max_ledger_error);
  std::printf("outputs written to %s\n", out_dir.c_str());
  return kExitOk;
}
