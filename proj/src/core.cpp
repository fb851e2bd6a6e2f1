#include "proftune/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace proftune {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDomain: return "domain_error";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kConfig: return "config_error";
    case ErrorCode::kPrecondition: return "precondition_violation";
    case ErrorCode::kProtocol: return "protocol_violation";
    case ErrorCode::kFixture: return "fixture_error";
    case ErrorCode::kTransient: return "transient_error";
    case ErrorCode::kExtraction: return "extraction_error";
    case ErrorCode::kSampling: return "sampling_error";
    case ErrorCode::kStatistics: return "statistics_error";
    case ErrorCode::kInfrastructure: return "infrastructure_error";
    case ErrorCode::kDelta: return "delta_error";
    case ErrorCode::kPersistence: return "persistence_error";
    case ErrorCode::kEmptyCorpus: return "empty_corpus";
    case ErrorCode::kDegenerate: return "degenerate_error";
    case ErrorCode::kBuildRun: return "build_run_error";
  }
  return "unknown";
}

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::array<std::pair<std::string_view, Enum>, N>& table,
                std::string_view what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  fail(ErrorCode::kParse, fmt::format("unknown {} '{}'", what, s));
}

template <typename Enum, std::size_t N>
std::string_view enum_name(Enum e, const std::array<std::pair<std::string_view, Enum>, N>& table) {
  for (const auto& [name, value] : table) {
    if (value == e) return name;
  }
  return "unknown";
}

constexpr std::array<std::pair<std::string_view, Provenance>, 3> kProvenanceNames{{
    {"original", Provenance::kOriginal},
    {"proposal", Provenance::kProposal},
    {"remediation", Provenance::kRemediation},
}};

constexpr std::array<std::pair<std::string_view, Aggregator>, 3> kAggregatorNames{{
    {"median", Aggregator::kMedian},
    {"mean", Aggregator::kMean},
    {"min", Aggregator::kMin},
}};

constexpr std::array<std::pair<std::string_view, DecisionKind>, 3> kDecisionNames{{
    {"accept", DecisionKind::kAccept},
    {"continue", DecisionKind::kContinue},
    {"finish", DecisionKind::kFinish},
}};

constexpr std::array<std::pair<std::string_view, RunStatus>, 4> kStatusNames{{
    {"ok", RunStatus::kOk},
    {"compile_fail", RunStatus::kCompileFail},
    {"runtime_fail", RunStatus::kRuntimeFail},
    {"correctness_fail", RunStatus::kCorrectnessFail},
}};

bool is_blank(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::string_view to_string(Provenance p) { return enum_name(p, kProvenanceNames); }
Provenance provenance_from_string(std::string_view s) {
  return parse_enum(s, kProvenanceNames, "provenance");
}
std::string_view to_string(Aggregator a) { return enum_name(a, kAggregatorNames); }
Aggregator aggregator_from_string(std::string_view s) {
  return parse_enum(s, kAggregatorNames, "aggregator");
}
std::string_view to_string(DecisionKind k) { return enum_name(k, kDecisionNames); }
DecisionKind decision_kind_from_string(std::string_view s) {
  return parse_enum(s, kDecisionNames, "decision kind");
}
std::string_view to_string(RunStatus s) { return enum_name(s, kStatusNames); }
RunStatus run_status_from_string(std::string_view s) {
  return parse_enum(s, kStatusNames, "run status");
}

// ---------------------------------------------------------------------------

HardwareProfile HardwareProfile::h100() {
  return HardwareProfile{"NVIDIA H100", 132, 1755.0, 96.0, 51200, 228, 3350.0};
}

void HardwareProfile::validate() const {
  if (gpu_name.empty()) fail(ErrorCode::kInvalidArgument, "hardware profile: empty gpu_name");
  auto positive = [](double v, const char* name) {
    if (!(v > 0)) {
      fail(ErrorCode::kInvalidArgument,
           fmt::format("hardware profile: {} must be positive, got {}", name, v));
    }
  };
  positive(static_cast<double>(sm_count), "sm_count");
  positive(clock_mhz, "clock_mhz");
  positive(memory_gib, "memory_gib");
  positive(static_cast<double>(l2_cache_kib), "l2_cache_kib");
  positive(static_cast<double>(shared_mem_per_sm_kib), "shared_mem_per_sm_kib");
  positive(dram_bandwidth_gbps, "dram_bandwidth_gbps");
}

void to_json(json& j, const HardwareProfile& hw) {
  j = json{{"gpu_name", hw.gpu_name},
           {"sm_count", hw.sm_count},
           {"clock_mhz", hw.clock_mhz},
           {"memory_gib", hw.memory_gib},
           {"l2_cache_kib", hw.l2_cache_kib},
           {"shared_mem_per_sm_kib", hw.shared_mem_per_sm_kib},
           {"dram_bandwidth_gbps", hw.dram_bandwidth_gbps}};
}

void from_json(const json& j, HardwareProfile& hw) {
  j.at("gpu_name").get_to(hw.gpu_name);
  j.at("sm_count").get_to(hw.sm_count);
  j.at("clock_mhz").get_to(hw.clock_mhz);
  j.at("memory_gib").get_to(hw.memory_gib);
  j.at("l2_cache_kib").get_to(hw.l2_cache_kib);
  j.at("shared_mem_per_sm_kib").get_to(hw.shared_mem_per_sm_kib);
  j.at("dram_bandwidth_gbps").get_to(hw.dram_bandwidth_gbps);
}

// ---------------------------------------------------------------------------

std::int64_t count_loc(std::string_view source, std::string_view comment_prefix) {
  std::int64_t count = 0;
  std::size_t pos = 0;
  while (pos < source.size()) {
    std::size_t end = source.find('\n', pos);
    if (end == std::string_view::npos) end = source.size();
    std::string_view line = source.substr(pos, end - pos);
    std::size_t first = 0;
    while (first < line.size() && is_blank(line[first])) ++first;
    line.remove_prefix(first);
    if (!line.empty() && !(!comment_prefix.empty() && line.starts_with(comment_prefix))) {
      ++count;
    }
    pos = end + 1;
  }
  return count;
}

KernelVariant::KernelVariant(std::string case_id, int round, Provenance provenance,
                             std::string source)
    : case_id_(std::move(case_id)),
      round_(round),
      provenance_(provenance),
      source_(std::move(source)),
      loc_(count_loc(source_)) {
  if (round_ < 0) fail(ErrorCode::kInvalidArgument, "kernel variant: negative round");
  if ((round_ == 0) != (provenance_ == Provenance::kOriginal)) {
    fail(ErrorCode::kInvalidArgument,
         fmt::format("kernel variant: round {} is inconsistent with provenance {}", round_,
                     to_string(provenance_)));
  }
}

void to_json(json& j, const KernelVariant& k) {
  j = json{{"case_id", k.case_id()},
           {"round", k.round()},
           {"provenance", to_string(k.provenance())},
           {"source", k.source()},
           {"loc", k.loc()}};
}

void from_json(const json& j, KernelVariant& k) {
  k = KernelVariant(j.at("case_id").get<std::string>(), j.at("round").get<int>(),
                    provenance_from_string(j.at("provenance").get<std::string>()),
                    j.at("source").get<std::string>());
}

// ---------------------------------------------------------------------------

double aggregate(const std::vector<double>& samples, Aggregator aggregator) {
  if (samples.empty()) fail(ErrorCode::kInvalidArgument, "aggregate of empty sample set");
  switch (aggregator) {
    case Aggregator::kMedian: {
      std::vector<double> sorted = samples;
      std::sort(sorted.begin(), sorted.end());
      const std::size_t n = sorted.size();
      return n % 2 == 1 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
    }
    case Aggregator::kMean: {
      double sum = 0;
      for (double s : samples) sum += s;
      return sum / static_cast<double>(samples.size());
    }
    case Aggregator::kMin:
      return *std::min_element(samples.begin(), samples.end());
  }
  return 0;
}

LatencyMeasurement LatencyMeasurement::from_samples(std::vector<double> samples_us,
                                                    Aggregator aggregator) {
  if (samples_us.size() != static_cast<std::size_t>(kTimedIterations)) {
    fail(ErrorCode::kProtocol, fmt::format("timing protocol requires {} samples, got {}",
                                           kTimedIterations, samples_us.size()));
  }
  for (double s : samples_us) {
    if (!(s >= 0) || !std::isfinite(s)) {
      fail(ErrorCode::kProtocol, fmt::format("invalid latency sample {}", s));
    }
  }
  LatencyMeasurement m;
  m.aggregator = aggregator;
  m.aggregate_us = aggregate(samples_us, aggregator);
  m.samples_us = std::move(samples_us);
  return m;
}

double LatencyMeasurement::spread_fraction() const {
  if (samples_us.empty() || aggregate_us <= 0) return 0;
  auto [lo, hi] = std::minmax_element(samples_us.begin(), samples_us.end());
  return (*hi - *lo) / aggregate_us;
}

void to_json(json& j, const LatencyMeasurement& m) {
  j = json{{"warmup_count", m.warmup_count},
           {"samples_us", m.samples_us},
           {"aggregate_us", m.aggregate_us},
           {"aggregator", to_string(m.aggregator)}};
}

void from_json(const json& j, LatencyMeasurement& m) {
  j.at("warmup_count").get_to(m.warmup_count);
  j.at("samples_us").get_to(m.samples_us);
  j.at("aggregate_us").get_to(m.aggregate_us);
  m.aggregator = aggregator_from_string(j.at("aggregator").get<std::string>());
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& canonical_metrics() {
  static const std::vector<std::string> names{
      std::string(metric::kDuration), std::string(metric::kMemoryThroughput),
      std::string(metric::kSmThroughput), std::string(metric::kL2Throughput),
      std::string(metric::kAchievedOccupancy)};
  return names;
}

bool is_canonical_metric(std::string_view name) {
  const auto& names = canonical_metrics();
  return std::find(names.begin(), names.end(), name) != names.end();
}

bool is_percentage_metric(std::string_view name) {
  return is_canonical_metric(name) && name != metric::kDuration;
}

ProfileReport ProfileReport::make(double duration_us, double memory_pct, double compute_pct,
                                  double l2_pct, double occupancy_pct, LatencyMeasurement latency,
                                  std::map<std::string, double> extra) {
  ProfileReport r;
  r.duration_us = duration_us;
  r.memory_throughput_pct = memory_pct;
  r.compute_throughput_pct = compute_pct;
  r.l2_throughput_pct = l2_pct;
  r.achieved_occupancy_pct = occupancy_pct;
  r.latency = std::move(latency);
  r.raw_metrics = std::move(extra);
  r.raw_metrics[std::string(metric::kDuration)] = duration_us;
  r.raw_metrics[std::string(metric::kMemoryThroughput)] = memory_pct;
  r.raw_metrics[std::string(metric::kSmThroughput)] = compute_pct;
  r.raw_metrics[std::string(metric::kL2Throughput)] = l2_pct;
  r.raw_metrics[std::string(metric::kAchievedOccupancy)] = occupancy_pct;
  return r;
}

double ProfileReport::canonical(std::string_view name) const {
  if (name == metric::kDuration) return duration_us;
  if (name == metric::kMemoryThroughput) return memory_throughput_pct;
  if (name == metric::kSmThroughput) return compute_throughput_pct;
  if (name == metric::kL2Throughput) return l2_throughput_pct;
  if (name == metric::kAchievedOccupancy) return achieved_occupancy_pct;
  fail(ErrorCode::kInvalidArgument, fmt::format("'{}' is not a canonical metric", name));
}

void ProfileReport::validate() const {
  if (!(duration_us >= 0)) {
    fail(ErrorCode::kInvalidArgument, fmt::format("report: negative duration {}", duration_us));
  }
  for (const auto& name : canonical_metrics()) {
    const double v = canonical(name);
    if (is_percentage_metric(name) && !(v >= 0 && v <= 100)) {
      fail(ErrorCode::kInvalidArgument,
           fmt::format("report: {} = {} is outside [0, 100]", name, v));
    }
    auto it = raw_metrics.find(name);
    if (it == raw_metrics.end() || it->second != v) {
      fail(ErrorCode::kInvalidArgument,
           fmt::format("report: raw metrics do not carry canonical field {}", name));
    }
  }
  if (latency.samples_us.size() != static_cast<std::size_t>(kTimedIterations)) {
    fail(ErrorCode::kInvalidArgument, "report: latency measurement is incomplete");
  }
}

void to_json(json& j, const ProfileReport& r) {
  j = json{{"duration_us", r.duration_us},
           {"memory_throughput_pct", r.memory_throughput_pct},
           {"compute_throughput_pct", r.compute_throughput_pct},
           {"l2_throughput_pct", r.l2_throughput_pct},
           {"achieved_occupancy_pct", r.achieved_occupancy_pct},
           {"latency", r.latency},
           {"raw_metrics", r.raw_metrics}};
}

void from_json(const json& j, ProfileReport& r) {
  j.at("duration_us").get_to(r.duration_us);
  j.at("memory_throughput_pct").get_to(r.memory_throughput_pct);
  j.at("compute_throughput_pct").get_to(r.compute_throughput_pct);
  j.at("l2_throughput_pct").get_to(r.l2_throughput_pct);
  j.at("achieved_occupancy_pct").get_to(r.achieved_occupancy_pct);
  j.at("latency").get_to(r.latency);
  j.at("raw_metrics").get_to(r.raw_metrics);
}

// ---------------------------------------------------------------------------

void ArbiterThresholds::validate() const {
  if (!(success_threshold > 1.0)) {
    fail(ErrorCode::kConfig, fmt::format("success_threshold must exceed 1.0, got {}",
                                         success_threshold));
  }
  if (!(accept_margin >= 1.0)) {
    fail(ErrorCode::kConfig, fmt::format("accept_margin must be >= 1.0, got {}", accept_margin));
  }
  if (!(diminish_epsilon > 0 && diminish_epsilon < 1)) {
    fail(ErrorCode::kConfig,
         fmt::format("diminish_epsilon must lie in (0, 1), got {}", diminish_epsilon));
  }
  if (patience_rounds < 1) fail(ErrorCode::kConfig, "patience_rounds must be >= 1");
  if (round_cap < 1) fail(ErrorCode::kConfig, "round_cap must be >= 1");
  if (remediation_cap < 1) fail(ErrorCode::kConfig, "remediation_cap must be >= 1");
  if (!(robustness_spread > 0)) fail(ErrorCode::kConfig, "robustness_spread must be positive");
}

void to_json(json& j, const ArbiterThresholds& t) {
  j = json{{"success_threshold", t.success_threshold},
           {"accept_margin", t.accept_margin},
           {"diminish_epsilon", t.diminish_epsilon},
           {"patience_rounds", t.patience_rounds},
           {"round_cap", t.round_cap},
           {"remediation_cap", t.remediation_cap},
           {"robustness_spread", t.robustness_spread}};
}

// Missing keys keep their defaults so partial configs are accepted.
void from_json(const json& j, ArbiterThresholds& t) {
  t.success_threshold = j.value("success_threshold", t.success_threshold);
  t.accept_margin = j.value("accept_margin", t.accept_margin);
  t.diminish_epsilon = j.value("diminish_epsilon", t.diminish_epsilon);
  t.patience_rounds = j.value("patience_rounds", t.patience_rounds);
  t.round_cap = j.value("round_cap", t.round_cap);
  t.remediation_cap = j.value("remediation_cap", t.remediation_cap);
  t.robustness_spread = j.value("robustness_spread", t.robustness_spread);
}

void to_json(json& j, const Decision& d) {
  j = json{{"kind", to_string(d.kind)}, {"reason", d.reason}, {"accepted", d.accepted}};
}

void from_json(const json& j, Decision& d) {
  d.kind = decision_kind_from_string(j.at("kind").get<std::string>());
  j.at("reason").get_to(d.reason);
  j.at("accepted").get_to(d.accepted);
}

// ---------------------------------------------------------------------------

double compute_speedup(double baseline_us, double candidate_us) {
  if (!(baseline_us > 0) || !(candidate_us > 0)) {
    fail(ErrorCode::kDomain, fmt::format("speedup requires positive latencies, got {} and {}",
                                         baseline_us, candidate_us));
  }
  return baseline_us / candidate_us;
}

bool classify_success(double speedup, const ArbiterThresholds& thresholds) {
  return speedup >= thresholds.success_threshold;
}

std::string digest_hex(std::string_view data) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, fmt::format("cannot read '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) fail(ErrorCode::kIo, fmt::format("error while reading '{}'", path));
  return ss.str();
}

void write_text_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, fmt::format("cannot write '{}'", path));
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) fail(ErrorCode::kIo, fmt::format("error while writing '{}'", path));
}

}  // namespace proftune
