#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "proftune/error.hpp"

namespace proftune {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Hardware context attached to every kernel case.

struct HardwareProfile {
  std::string gpu_name;
  std::int64_t sm_count = 0;
  double clock_mhz = 0;
  double memory_gib = 0;
  std::int64_t l2_cache_kib = 0;
  std::int64_t shared_mem_per_sm_kib = 0;
  double dram_bandwidth_gbps = 0;

  void validate() const;
  bool operator==(const HardwareProfile&) const = default;

  // 132-SM, 96 GiB data-center part used by the simulator and the CLI default.
  static HardwareProfile h100();
};

void to_json(json& j, const HardwareProfile& hw);
void from_json(const json& j, HardwareProfile& hw);

// ---------------------------------------------------------------------------
// Kernel sources.

enum class Provenance { kOriginal, kProposal, kRemediation };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

// Number of lines that are neither blank nor comment-only. A comment-only
// line starts (after whitespace) with `comment_prefix`.
std::int64_t count_loc(std::string_view source, std::string_view comment_prefix = "#");

// Immutable, versioned kernel source. `loc` is computed at construction.
class KernelVariant {
 public:
  KernelVariant() = default;
  KernelVariant(std::string case_id, int round, Provenance provenance, std::string source);

  static KernelVariant original(std::string case_id, std::string source) {
    return KernelVariant(std::move(case_id), 0, Provenance::kOriginal, std::move(source));
  }

  const std::string& case_id() const { return case_id_; }
  int round() const { return round_; }
  Provenance provenance() const { return provenance_; }
  const std::string& source() const { return source_; }
  std::int64_t loc() const { return loc_; }

  bool operator==(const KernelVariant&) const = default;

 private:
  std::string case_id_;
  int round_ = 0;
  Provenance provenance_ = Provenance::kOriginal;
  std::string source_;
  std::int64_t loc_ = 0;
};

void to_json(json& j, const KernelVariant& k);
void from_json(const json& j, KernelVariant& k);

// ---------------------------------------------------------------------------
// Timing.

enum class Aggregator { kMedian, kMean, kMin };

std::string_view to_string(Aggregator a);
Aggregator aggregator_from_string(std::string_view s);

inline constexpr int kWarmupIterations = 3;
inline constexpr int kTimedIterations = 5;

struct LatencyMeasurement {
  int warmup_count = kWarmupIterations;
  std::vector<double> samples_us;
  double aggregate_us = 0;
  Aggregator aggregator = Aggregator::kMedian;

  // Validates the sample count and computes the aggregate.
  static LatencyMeasurement from_samples(std::vector<double> samples_us,
                                         Aggregator aggregator = Aggregator::kMedian);
  // (max - min) / aggregate; 0 for a zero aggregate.
  double spread_fraction() const;

  bool operator==(const LatencyMeasurement&) const = default;
};

double aggregate(const std::vector<double>& samples, Aggregator aggregator);

void to_json(json& j, const LatencyMeasurement& m);
void from_json(const json& j, LatencyMeasurement& m);

// ---------------------------------------------------------------------------
// Profiler reports.

namespace metric {
inline constexpr std::string_view kDuration = "duration_us";
inline constexpr std::string_view kMemoryThroughput = "memory_throughput_pct";
inline constexpr std::string_view kSmThroughput = "sm_throughput_pct";
inline constexpr std::string_view kL2Throughput = "l2_throughput_pct";
inline constexpr std::string_view kAchievedOccupancy = "achieved_occupancy_pct";
}  // namespace metric

// The five canonical metric names, in report order.
const std::vector<std::string>& canonical_metrics();
bool is_canonical_metric(std::string_view name);
bool is_percentage_metric(std::string_view name);

struct ProfileReport {
  double duration_us = 0;
  double memory_throughput_pct = 0;
  double compute_throughput_pct = 0;
  double l2_throughput_pct = 0;
  double achieved_occupancy_pct = 0;
  LatencyMeasurement latency;
  std::map<std::string, double> raw_metrics;

  // Builds a report whose raw_metrics contain every canonical field.
  static ProfileReport make(double duration_us, double memory_pct, double compute_pct,
                            double l2_pct, double occupancy_pct, LatencyMeasurement latency,
                            std::map<std::string, double> extra = {});

  double canonical(std::string_view name) const;
  void validate() const;
  bool operator==(const ProfileReport&) const = default;
};

void to_json(json& j, const ProfileReport& r);
void from_json(const json& j, ProfileReport& r);

// ---------------------------------------------------------------------------
// Arbiter parameters and decisions.

struct ArbiterThresholds {
  double success_threshold = 1.05;
  double accept_margin = 1.01;
  double diminish_epsilon = 0.01;
  int patience_rounds = 2;
  int round_cap = 8;
  int remediation_cap = 3;
  // A latency measurement whose (max - min) / aggregate exceeds this is flagged as noisy.
  double robustness_spread = 0.10;

  void validate() const;
  bool operator==(const ArbiterThresholds&) const = default;
};

void to_json(json& j, const ArbiterThresholds& t);
void from_json(const json& j, ArbiterThresholds& t);

enum class DecisionKind { kAccept, kContinue, kFinish };

std::string_view to_string(DecisionKind k);
DecisionKind decision_kind_from_string(std::string_view s);

struct Decision {
  DecisionKind kind = DecisionKind::kContinue;
  std::string reason;
  // Set when the candidate beat the best-so-far. A finish decision can carry an accept.
  bool accepted = false;

  bool operator==(const Decision&) const = default;
};

void to_json(json& j, const Decision& d);
void from_json(const json& j, Decision& d);

// ---------------------------------------------------------------------------
// Build/run status shared by the executor and the loop.

enum class RunStatus { kOk, kCompileFail, kRuntimeFail, kCorrectnessFail };

std::string_view to_string(RunStatus s);
RunStatus run_status_from_string(std::string_view s);

// ---------------------------------------------------------------------------
// Optimization trace.

struct RemediationAttempt {
  std::string prompt;
  std::string response;
  std::optional<KernelVariant> kernel;  // absent when no code could be extracted
  RunStatus status = RunStatus::kCompileFail;
  std::string logs;

  bool operator==(const RemediationAttempt&) const = default;
};

struct RoundRecord {
  int round = 0;
  std::string proposal_prompt;
  std::string proposal_response;
  std::string prompt_digest;
  std::string response_digest;
  std::optional<KernelVariant> kernel;  // final candidate of the round
  RunStatus status = RunStatus::kCompileFail;
  std::string build_log;
  std::vector<RemediationAttempt> remediations;
  std::optional<ProfileReport> report;
  std::string hint;  // refinement hint produced at the end of the round
  Decision decision;

  bool operator==(const RoundRecord&) const = default;
};

struct OptimizationTrace {
  std::string case_id;
  KernelVariant baseline_variant;
  ProfileReport baseline_report;
  std::vector<RoundRecord> rounds;
  KernelVariant best_variant;
  ProfileReport best_report;

  bool operator==(const OptimizationTrace&) const = default;
};

// ---------------------------------------------------------------------------
// Arithmetic.

// baseline / candidate; throws kDomain on non-positive input.
double compute_speedup(double baseline_us, double candidate_us);

// Inclusive: speedup >= thresholds.success_threshold.
bool classify_success(double speedup, const ArbiterThresholds& thresholds);

// 64-bit FNV-1a as 16 lowercase hex digits.
std::string digest_hex(std::string_view data);

// Reads a whole file; throws kIo with the path.
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view contents);

}  // namespace proftune
