/* C interface to the proftune library. Strings returned through `char**`
 * out-parameters are heap-allocated and must be released with
 * pt_free_string. On failure a function returns a non-zero pt_status and
 * pt_last_error() describes it (thread-local, valid until the next call). */
#ifndef PROFTUNE_H
#define PROFTUNE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define PT_API __attribute__((visibility("default")))
#else
#define PT_API
#endif

typedef enum pt_status {
  PT_OK = 0,
  PT_INVALID_ARGUMENT = 1,
  PT_DOMAIN = 2,
  PT_IO = 3,
  PT_PARSE = 4,
  PT_CONFIG = 5,
  PT_PRECONDITION = 6,
  PT_PROTOCOL = 7,
  PT_FIXTURE = 8,
  PT_TRANSIENT = 9,
  PT_EXTRACTION = 10,
  PT_SAMPLING = 11,
  PT_STATISTICS = 12,
  PT_INFRASTRUCTURE = 13,
  PT_DELTA = 14,
  PT_PERSISTENCE = 15,
  PT_EMPTY_CORPUS = 16,
  PT_DEGENERATE = 17,
  PT_BUILD_RUN = 18,
  PT_INTERNAL = 99
} pt_status;

typedef struct pt_corpus pt_corpus;
typedef struct pt_session pt_session;

PT_API const char* pt_version(void);
PT_API const char* pt_last_error(void);
PT_API const char* pt_status_name(pt_status status);
PT_API void pt_free_string(char* s);

PT_API pt_status pt_compute_speedup(double baseline_us, double candidate_us, double* out);
PT_API pt_status pt_classify_success(double speedup, double threshold, int* out);
PT_API pt_status pt_count_loc(const char* source, int64_t* out);

/* format: "auto", "text" or "csv". Writes the report as JSON. */
PT_API pt_status pt_parse_report(const char* text, const char* format, char** out_json);
/* Both inputs are report JSON; writes [{"metric", "before", "after", "direction"}, ...]. */
PT_API pt_status pt_diff_reports(const char* prev_json, const char* next_json, char** out_json);
/* target_json: JSON array of argv strings. Writes the full argv as a JSON array. */
PT_API pt_status pt_build_ncu_command(const char* range_label, const char* target_json,
                                      const char* export_path, char** out_json);

PT_API pt_status pt_corpus_open(const char* root, pt_corpus** out);
PT_API void pt_corpus_close(pt_corpus* corpus);
PT_API pt_status pt_corpus_size(const pt_corpus* corpus, size_t* out);
/* JSON lines, one per skipped directory. */
PT_API pt_status pt_corpus_skip_report(const pt_corpus* corpus, char** out);
PT_API pt_status pt_corpus_stratification(const pt_corpus* corpus, char** out_json);
PT_API pt_status pt_corpus_sample_subset(const pt_corpus* corpus, uint64_t seed, char** out_json);

/* options_json (nullable): {"exclude": [...], "bin_width": 0.25, "cap": 10}.
 * Writes the report files into out_dir and the summary table as JSON. */
PT_API pt_status pt_analyze_ledger(const char* ledger_path, const char* out_dir,
                                   const char* options_json, char** out_json);

/* config_json keys: backend {kind: "scripted", transcript} or
 * {kind: "http", base_url, model, api_key_env, usd_per_call, max_retries},
 * profiler ("simulated" | "real"), runner_command, work_dir, thresholds,
 * range_label, trace_root, ledger, templates_dir, generate_tests, ncu_flags. */
PT_API pt_status pt_session_create(const char* config_json, pt_session** out);
PT_API void pt_session_destroy(pt_session* session);
/* category may be NULL to derive it from the corpus stratification. Writes
 * the result record as JSON, plus "trace_path" when traces are persisted. */
PT_API pt_status pt_session_optimize_case(pt_session* session, const pt_corpus* corpus,
                                          const char* case_id, const char* category,
                                          char** out_json);

#ifdef __cplusplus
}
#endif

#endif
