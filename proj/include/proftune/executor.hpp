#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "proftune/core.hpp"
#include "proftune/process.hpp"
#include "proftune/profiling.hpp"

namespace proftune {

// ---------------------------------------------------------------------------
// Runner wire protocol: one JSON object per line in each direction.

enum class JobMode { kBuild, kCorrectness, kPerf };

std::string_view to_string(JobMode m);
JobMode job_mode_from_string(std::string_view s);

struct RunnerJob {
  std::string job_id;
  JobMode mode = JobMode::kBuild;
  std::string kernel_path;
  std::string test_path;
  std::string range_label = std::string(kDefaultRangeLabel);
  int warmups = kWarmupIterations;
  int iterations = kTimedIterations;

  bool operator==(const RunnerJob&) const = default;
};

struct RunnerReply {
  std::string job_id;
  RunStatus status = RunStatus::kOk;
  std::optional<std::vector<double>> latencies_ms;
  std::string logs;
  std::optional<std::string> outputs_digest;

  bool operator==(const RunnerReply&) const = default;
};

void to_json(json& j, const RunnerJob& job);
void from_json(const json& j, RunnerJob& job);
void to_json(json& j, const RunnerReply& reply);
void from_json(const json& j, RunnerReply& reply);

// Single-line encodings used on the wire.
std::string encode_job(const RunnerJob& job);
RunnerReply decode_reply(std::string_view line);

// ---------------------------------------------------------------------------
// Executors run build / correctness / perf jobs for a kernel variant. The
// caller fills every job field except kernel_path and job_id.

class Executor {
 public:
  virtual ~Executor() = default;
  virtual RunnerReply execute(const KernelVariant& kernel, RunnerJob job) = 0;
};

// Client for the runner child process.
class RunnerProcess final : public Executor {
 public:
  struct Options {
    std::vector<std::string> command;  // e.g. {"python3", "runner.py", "--cpu-stub"}
    std::filesystem::path work_dir;    // candidate kernels are written here
    std::string kernel_extension = ".py";
  };

  explicit RunnerProcess(Options options);
  RunnerReply execute(const KernelVariant& kernel, RunnerJob job) override;

  // Sends a prepared job verbatim. Transport failures and mismatched replies
  // throw kInfrastructure.
  RunnerReply submit(const RunnerJob& job);
  // Ends the session; returns the child's exit status.
  int shutdown();

  std::filesystem::path materialize(const KernelVariant& kernel) const;

 private:
  Options options_;
  std::unique_ptr<ChildProcess> child_;
  std::uint64_t next_job_ = 1;
};

// GPU-free executor over the simulator. Kernel sources steer the outcome:
//   SIM_COMPILE_ERROR  -> compile_fail on build
//   SIM_RUNTIME_ERROR  -> runtime_fail on correctness/perf
//   SIM_WRONG_OUTPUT   -> correctness_fail on correctness
// A missing `# sim-model:` marker is a compile failure and an out-of-domain
// parameter a runtime failure. Perf latencies are the modeled duration.
class SimulatedExecutor final : public Executor {
 public:
  RunnerReply execute(const KernelVariant& kernel, RunnerJob job) override;

  int jobs_executed() const { return jobs_executed_; }

 private:
  int jobs_executed_ = 0;
};

// Thrown when a timing run or profile cannot be collected because the kernel
// itself failed. Carries the executor's status and logs.
class BuildRunError : public Error {
 public:
  BuildRunError(RunStatus status, std::string logs);
  RunStatus status() const { return status_; }
  const std::string& logs() const { return logs_; }

 private:
  RunStatus status_;
  std::string logs_;
};

// Three unreported warmups, five timed iterations with device synchronization
// per iteration (performed by the executor). Converts milliseconds to
// microseconds and aggregates.
LatencyMeasurement run_timing_protocol(Executor& executor, const KernelVariant& kernel,
                                       const std::string& perf_test,
                                       std::string_view range_label = kDefaultRangeLabel,
                                       Aggregator aggregator = Aggregator::kMedian);

// ---------------------------------------------------------------------------
// Profile(K'): a complete report for a variant that already builds and runs.

class Profiler {
 public:
  virtual ~Profiler() = default;
  virtual ProfileReport profile(const KernelVariant& kernel) = 0;
};

class SimulatedProfiler final : public Profiler {
 public:
  ProfileReport profile(const KernelVariant& kernel) override;
};

// Real hardware: timing protocol through a runner session, then the runner
// re-launched under `ncu` for one perf job, then the export converted to CSV
// with `ncu --import ... --csv --page details` and parsed.
class NcuProfiler final : public Profiler {
 public:
  struct Options {
    std::vector<std::string> runner_command;
    std::filesystem::path work_dir;
    std::string perf_test;
    std::string range_label = std::string(kDefaultRangeLabel);
    std::vector<std::string> extra_flags;
    std::string kernel_extension = ".py";
    Aggregator aggregator = Aggregator::kMedian;
    MetricMapping mapping = MetricMapping::defaults();
  };

  NcuProfiler(Options options, Executor& timing_executor, ProfilerGate& gate);
  ProfileReport profile(const KernelVariant& kernel) override;

 private:
  Options options_;
  Executor& timing_executor_;
  ProfilerGate& gate_;
  int runs_ = 0;
};

}  // namespace proftune
