#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include "proftune/core.hpp"

namespace proftune {

// ---------------------------------------------------------------------------
// Profiler command line.

inline constexpr std::string_view kDefaultRangeLabel = "BIG_OP";

// Non-empty, no whitespace.
bool is_valid_range_label(std::string_view label);

struct ProfilerInvocation {
  std::string range_label = std::string(kDefaultRangeLabel);
  std::vector<std::string> target_command;
  std::vector<std::string> extra_flags;

  void validate() const;
};

// ncu -f --nvtx --nvtx-include <label> <extra...> --export <out> <target...>
std::vector<std::string> build_ncu_command(const ProfilerInvocation& inv,
                                           const std::string& output_path);

// ---------------------------------------------------------------------------
// Report parsing.

// Profiler-native metric name -> canonical name. Profiler versions rename
// metrics, so this is data rather than code.
class MetricMapping {
 public:
  // Covers the human-readable section names and the raw metric ids.
  static MetricMapping defaults();
  // {"<native name>": "<canonical name>", ...}; unknown canonical names are rejected.
  static MetricMapping from_json(const json& j);

  void add(std::string native, std::string canonical);
  const std::string* lookup(std::string_view native) const;

 private:
  std::map<std::string, std::string, std::less<>> native_to_canonical_;
};

enum class ReportFormat { kAuto, kText, kCsv };

// Parses a single profiled region. Durations are normalized to microseconds by
// shifting the decimal point of the printed value, so "4.18" ms becomes
// exactly 4180. The latency measurement is left empty; callers attach the
// timing-protocol result.
ProfileReport parse_ncu_report(std::string_view text, ReportFormat format = ReportFormat::kAuto,
                               const MetricMapping& mapping = MetricMapping::defaults());

// Renders a report in the human-readable layout parse_ncu_report accepts.
std::string render_ncu_text(const ProfileReport& report, std::string_view kernel_name = "kernel");

// ---------------------------------------------------------------------------
// Report deltas.

enum class Direction { kUp, kDown, kNeutral };

std::string_view to_string(Direction d);

struct NeutralBands {
  double percentage_points = 0.5;  // throughput and occupancy metrics
  double duration_relative = 0.01;  // fraction of the previous duration
};

struct DeltaEntry {
  std::string metric;
  double before = 0;
  double after = 0;
  Direction direction = Direction::kNeutral;

  // Up is better for percentages, down is better for duration.
  bool improved() const;
  bool regressed() const;
};

struct ProfileDelta {
  std::vector<DeltaEntry> entries;  // canonical metric order

  const DeltaEntry& at(std::string_view metric) const;
};

ProfileDelta diff_reports(const ProfileReport& prev, const ProfileReport& next,
                          const NeutralBands& bands = {});

// ---------------------------------------------------------------------------
// Simulated GPU.

struct SimParameter {
  std::string name;
  std::vector<std::int64_t> domain;
  std::int64_t default_value = 0;
};

struct SimModel {
  std::string id;
  std::string description;
  std::vector<SimParameter> parameters;
};

// Known models: "elementwise".
const SimModel& sim_model(std::string_view perf_model_id);
std::vector<std::string> sim_model_ids();

struct SimKernelSpec {
  std::string perf_model_id;
  std::map<std::string, std::int64_t> param_vector;

  void validate() const;
  bool operator==(const SimKernelSpec&) const = default;
};

// Reads a `# sim-model: <id>` marker and `NAME = <int>` assignments for the
// model's parameters. Missing parameters take the model default. Throws
// kConfig when there is no marker.
SimKernelSpec sim_spec_from_source(std::string_view source);

// Pure, closed-form. The five latency samples all equal the modeled duration.
ProfileReport simulate_profile(const SimKernelSpec& spec);

// ---------------------------------------------------------------------------
// Exclusive access to the GPU for real profiler runs: a process-local mutex
// plus an advisory lock file, so profiler invocations are serialized across
// processes on one machine.

class ProfilerGate {
 public:
  class Guard {
   public:
    Guard(Guard&& other) noexcept;
    Guard& operator=(Guard&&) = delete;
    Guard(const Guard&) = delete;
    ~Guard();

   private:
    friend class ProfilerGate;
    Guard(std::unique_lock<std::mutex> lock, int fd);
    std::unique_lock<std::mutex> lock_;
    int fd_ = -1;
  };

  explicit ProfilerGate(std::filesystem::path lock_file);
  Guard acquire();

  // Gate shared by every real-profiler run in this process.
  static ProfilerGate& machine();

 private:
  std::filesystem::path lock_file_;
  std::mutex mutex_;
};

}  // namespace proftune
