#ifndef HYBRIDFLOW_CAPI_H
#define HYBRIDFLOW_CAPI_H

/* C interface to the hybridflow simulation core. Handles are opaque; every
 * call reports hf_status and leaves a human-readable message retrievable via
 * hf_last_error() on failure. */

#include <stdint.h>

#if defined(_WIN32)
#define HF_API __declspec(dllexport)
#else
#define HF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum hf_status {
  HF_OK = 0,
  HF_ERR_VALIDATION = 1,
  HF_ERR_RUNTIME = 2,
  HF_ERR_ARGUMENT = 3
} hf_status;

typedef struct hf_scenario hf_scenario;

HF_API const char* hf_version(void);

/* thread-local; valid until the next hybridflow call on the same thread */
HF_API const char* hf_last_error(void);

HF_API hf_status hf_scenario_load(const char* path, hf_scenario** out);
HF_API void hf_scenario_free(hf_scenario* s);

HF_API hf_status hf_scenario_set_seed(hf_scenario* s, uint64_t seed);
HF_API hf_status hf_scenario_set_duration(hf_scenario* s, double seconds);

typedef struct hf_run_summary {
  long steps;
  double injected;
  double departed;
  long commands_applied;
  double max_ledger_error;
} hf_run_summary;

/* Runs the scenario and writes the output files into out_dir.
 * worker_threads: 0 picks the hardware default, 1 forces single-threaded. */
HF_API hf_status hf_run(const hf_scenario* s, const char* out_dir,
                        int worker_threads, hf_run_summary* summary);

/* Minimal-cut description of the scenario's network (units, sensors and the
 * configured clusters). Free the returned text with hf_string_free. */
HF_API hf_status hf_partition_describe(const hf_scenario* s, char** out_text);
HF_API void hf_string_free(char* p);

#ifdef __cplusplus
}
#endif

#endif /* HYBRIDFLOW_CAPI_H */
