#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "proftune/analysis.hpp"
#include "proftune/core.hpp"
#include "proftune/executor.hpp"
#include "proftune/llm.hpp"
#include "proftune/profiling.hpp"

namespace proftune {

enum class ProfilerMode { kReal, kSimulated };

std::string_view to_string(ProfilerMode m);
ProfilerMode profiler_mode_from_string(std::string_view s);

struct LoopConfig {
  ArbiterThresholds thresholds;
  std::string range_label = std::string(kDefaultRangeLabel);
  std::string backend_id = "scripted";
  ProfilerMode profiler_mode = ProfilerMode::kSimulated;
  NeutralBands bands;
  std::vector<HintRule> hint_rules = default_hint_rules();
  std::size_t log_tail = kDefaultLogTail;
  TemplateSet templates = TemplateSet::defaults();

  void validate() const;
};

struct BuildRunResult {
  RunStatus status = RunStatus::kOk;
  std::string logs;
  std::optional<std::string> outputs_digest;

  bool ok() const { return status == RunStatus::kOk; }
  bool operator==(const BuildRunResult&) const = default;
};

struct TestSuite {
  std::vector<std::string> correctness;
  std::vector<std::string> perf;
};

// Build job, then one correctness job per test. Stops at the first failure.
// Transport failures propagate as kInfrastructure.
BuildRunResult build_and_run(const KernelVariant& kernel, const TestSuite& tests,
                             Executor& executor,
                             std::string_view range_label = kDefaultRangeLabel);

struct RemediationOutcome {
  KernelVariant kernel;
  BuildRunResult result;
  std::vector<RemediationAttempt> attempts;
};

// Up to `cap` rounds of prompt, completion, extraction and BuildRun. Returns at
// the first passing variant or with the last failing one. An extraction
// failure uses up an attempt; a backend failure ends remediation.
RemediationOutcome remediate(const KernelVariant& kernel, const BuildRunResult& result,
                             CompletionBackend& backend, Executor& executor,
                             const TestSuite& tests, int cap,
                             std::size_t log_tail = kDefaultLogTail,
                             const TemplateSet& templates = TemplateSet::defaults());

// Per-round gains (best-so-far before the round / round latency - 1) of a
// trace, with failed rounds as -infinity.
std::vector<double> round_gains(const OptimizationTrace& trace);

// Decision for a round that produced report `next`. `trace_so_far` holds the
// previous rounds only.
Decision arbiter(const ProfileReport& next, const ProfileReport& best,
                 const OptimizationTrace& trace_so_far, const ArbiterThresholds& thresholds);

// Decision for a round that produced no report.
Decision arbiter_failed_round(const OptimizationTrace& trace_so_far,
                              const ArbiterThresholds& thresholds);

struct LoopDeps {
  CompletionBackend& backend;
  Executor& executor;
  Profiler& profiler;
  TestSuite tests;
  std::function<void(const RoundRecord&)> on_round;
};

struct OptimizeResult {
  KernelVariant best_kernel;
  ProfileReport best_report;
  OptimizationTrace trace;
};

// Runs rounds until the arbiter finishes. A round whose proposal cannot be
// obtained, extracted, built or profiled is recorded as failed.
OptimizeResult optimize_kernel(const HardwareProfile& hw, const KernelVariant& kernel,
                               const ProfileReport& baseline, const LoopConfig& cfg,
                               LoopDeps deps);

// Asks the test generator for a perf test wrapping the workload in the range
// label and writes it under out_dir. Returns the written path.
std::filesystem::path generate_perf_test(const KernelVariant& kernel,
                                         std::string_view existing_tests,
                                         std::string_view range_label,
                                         CompletionBackend& backend,
                                         const std::filesystem::path& out_dir,
                                         const TemplateSet& templates = TemplateSet::defaults());

RunResultRecord make_run_record(const OptimizationTrace& trace, Category category,
                                const ArbiterThresholds& thresholds, int llm_calls = 0,
                                double api_cost_usd = 0);

}  // namespace proftune
