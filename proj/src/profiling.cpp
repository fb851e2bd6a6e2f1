#include "proftune/profiling.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <optional>

#include <fmt/format.h>

namespace proftune {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    pos = end + 1;
  }
  return lines;
}

// Parses a printed decimal after removing thousands separators, then shifts the
// decimal point by `shift` places. Returns nullopt when the text is not a number.
std::optional<double> parse_scaled(std::string_view printed, int shift) {
  std::string digits;
  digits.reserve(printed.size());
  for (char c : trim(printed)) {
    if (c != ',') digits.push_back(c);
  }
  if (digits.empty()) return std::nullopt;
  const bool scientific = digits.find_first_of("eE") != std::string::npos;
  if (shift != 0 && !scientific) {
    std::string sign;
    if (digits.front() == '-' || digits.front() == '+') {
      sign = digits.substr(0, 1);
      digits.erase(0, 1);
    }
    std::size_t dot = digits.find('.');
    std::string whole = dot == std::string::npos ? digits : digits.substr(0, dot);
    std::string frac = dot == std::string::npos ? std::string() : digits.substr(dot + 1);
    if (shift > 0) {
      while (static_cast<int>(frac.size()) < shift) frac.push_back('0');
      whole += frac.substr(0, shift);
      frac.erase(0, shift);
    } else {
      while (static_cast<int>(whole.size()) < -shift) whole.insert(0, 1, '0');
      frac.insert(0, whole.substr(whole.size() + shift));
      whole.erase(whole.size() + shift);
      if (whole.empty()) whole = "0";
    }
    digits = sign + whole + (frac.empty() ? "" : "." + frac);
    if (digits.front() == '+') digits.erase(0, 1);
  } else if (digits.front() == '+') {
    digits.erase(0, 1);
  }
  double value = 0;
  const char* first = digits.data();
  const char* last = digits.data() + digits.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  if (scientific && shift != 0) value *= std::pow(10.0, shift);
  return value;
}

// Decimal shift that converts a duration unit to microseconds.
std::optional<int> duration_shift(std::string_view unit) {
  if (unit == "ns" || unit == "nsecond" || unit == "nsec") return -3;
  if (unit == "us" || unit == "usecond" || unit == "usec" || unit == "\xCE\xBCs") return 0;
  if (unit == "ms" || unit == "msecond" || unit == "msec") return 3;
  if (unit == "s" || unit == "second" || unit == "sec") return 6;
  return std::nullopt;
}

struct MetricRow {
  std::string name;
  std::string unit;
  std::string value;
  std::size_t line_number = 0;
};

// Human-readable layout: columns separated by runs of two or more spaces,
// "<name>  [<unit>]  <value>".
std::vector<MetricRow> rows_from_text(std::string_view text) {
  std::vector<MetricRow> rows;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = trim(lines[i]);
    if (line.empty() || line.starts_with("==") || line.starts_with("---")) continue;
    std::vector<std::string_view> cols;
    std::size_t pos = 0;
    while (pos < line.size()) {
      std::size_t gap = line.find("  ", pos);
      if (gap == std::string_view::npos) {
        cols.push_back(line.substr(pos));
        break;
      }
      cols.push_back(line.substr(pos, gap - pos));
      pos = line.find_first_not_of(' ', gap);
      if (pos == std::string_view::npos) break;
    }
    if (cols.size() == 2) {
      rows.push_back({std::string(cols[0]), "", std::string(cols[1]), i + 1});
    } else if (cols.size() == 3) {
      rows.push_back({std::string(cols[0]), std::string(cols[1]), std::string(cols[2]), i + 1});
    }
  }
  return rows;
}

std::vector<std::string> split_csv_record(std::string_view line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(std::move(field));
  return fields;
}

// Either the long "details" layout (one metric per row with Metric Name /
// Metric Unit / Metric Value columns) or the wide "raw" layout (header row of
// metric ids, a units row, then one row per kernel; the first kernel is used).
std::vector<MetricRow> rows_from_csv(std::string_view text) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> records;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = trim(lines[i]);
    if (line.empty() || line.starts_with("==")) continue;
    records.emplace_back(i + 1, split_csv_record(line));
  }
  if (records.empty()) return {};
  const auto& header = records.front().second;
  auto column = [&](std::string_view name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<MetricRow> rows;
  const auto name_col = column("Metric Name");
  const auto value_col = column("Metric Value");
  if (name_col && value_col) {
    const auto unit_col = column("Metric Unit");
    for (std::size_t r = 1; r < records.size(); ++r) {
      const auto& [line_no, rec] = records[r];
      if (rec.size() <= std::max(*name_col, *value_col)) continue;
      MetricRow row{rec[*name_col], "", rec[*value_col], line_no};
      if (unit_col && *unit_col < rec.size()) row.unit = rec[*unit_col];
      rows.push_back(std::move(row));
    }
    return rows;
  }
  if (records.size() < 3) {
    fail(ErrorCode::kParse, "CSV report needs a header row, a units row and a value row");
  }
  const auto& units = records[1].second;
  const auto& [line_no, values] = records[2];
  for (std::size_t c = 0; c < header.size() && c < values.size(); ++c) {
    rows.push_back({header[c], c < units.size() ? units[c] : "", values[c], line_no});
  }
  return rows;
}

bool looks_like_csv(std::string_view text) {
  for (std::string_view line : split_lines(text)) {
    line = trim(line);
    if (line.empty() || line.starts_with("==")) continue;
    return line.front() == '"';
  }
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------

bool is_valid_range_label(std::string_view label) {
  if (label.empty()) return false;
  return std::none_of(label.begin(), label.end(),
                      [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

void ProfilerInvocation::validate() const {
  if (!is_valid_range_label(range_label)) {
    fail(ErrorCode::kInvalidArgument,
         fmt::format("invalid range label '{}': must be non-empty without whitespace",
                     range_label));
  }
  if (target_command.empty()) {
    fail(ErrorCode::kInvalidArgument, "profiler invocation has an empty target command");
  }
}

std::vector<std::string> build_ncu_command(const ProfilerInvocation& inv,
                                           const std::string& output_path) {
  inv.validate();
  std::vector<std::string> argv{"ncu", "-f", "--nvtx", "--nvtx-include", inv.range_label};
  argv.insert(argv.end(), inv.extra_flags.begin(), inv.extra_flags.end());
  argv.push_back("--export");
  argv.push_back(output_path);
  argv.insert(argv.end(), inv.target_command.begin(), inv.target_command.end());
  return argv;
}

// ---------------------------------------------------------------------------

MetricMapping MetricMapping::defaults() {
  MetricMapping m;
  const std::string duration(metric::kDuration);
  const std::string memory(metric::kMemoryThroughput);
  const std::string sm(metric::kSmThroughput);
  const std::string l2(metric::kL2Throughput);
  const std::string occupancy(metric::kAchievedOccupancy);
  m.add("Duration", duration);
  m.add("gpu__time_duration.sum", duration);
  m.add("Memory Throughput", memory);
  m.add("Memory Thru.", memory);
  m.add("gpu__compute_memory_throughput.avg.pct_of_peak_sustained_elapsed", memory);
  m.add("Compute (SM) Throughput", sm);
  m.add("Compute Throughput", sm);
  m.add("SM Throughput", sm);
  m.add("SM Thru.", sm);
  m.add("sm__throughput.avg.pct_of_peak_sustained_elapsed", sm);
  m.add("L2 Cache Throughput", l2);
  m.add("lts__throughput.avg.pct_of_peak_sustained_elapsed", l2);
  m.add("Achieved Occupancy", occupancy);
  m.add("Occupancy", occupancy);
  m.add("sm__warps_active.avg.pct_of_peak_sustained_active", occupancy);
  for (const auto& name : canonical_metrics()) m.add(name, name);
  return m;
}

MetricMapping MetricMapping::from_json(const json& j) {
  if (!j.is_object()) fail(ErrorCode::kConfig, "metric mapping must be a JSON object");
  MetricMapping m;
  for (const auto& [native, canonical] : j.items()) {
    m.add(native, canonical.get<std::string>());
  }
  return m;
}

void MetricMapping::add(std::string native, std::string canonical) {
  if (!is_canonical_metric(canonical)) {
    fail(ErrorCode::kConfig, fmt::format("'{}' is not a canonical metric name", canonical));
  }
  native_to_canonical_[std::move(native)] = std::move(canonical);
}

const std::string* MetricMapping::lookup(std::string_view native) const {
  auto it = native_to_canonical_.find(native);
  return it == native_to_canonical_.end() ? nullptr : &it->second;
}

ProfileReport parse_ncu_report(std::string_view text, ReportFormat format,
                               const MetricMapping& mapping) {
  if (trim(text).empty()) fail(ErrorCode::kParse, "empty profiler report");
  if (format == ReportFormat::kAuto) {
    format = looks_like_csv(text) ? ReportFormat::kCsv : ReportFormat::kText;
  }
  const std::vector<MetricRow> rows =
      format == ReportFormat::kCsv ? rows_from_csv(text) : rows_from_text(text);

  std::map<std::string, double> canonical;
  std::map<std::string, double> raw;
  for (const MetricRow& row : rows) {
    const std::string* target = mapping.lookup(row.name);
    // Same display name with a non-percentage unit (e.g. a bandwidth) is not the canonical metric.
    if (target && is_percentage_metric(*target) && !row.unit.empty() && row.unit != "%") {
      target = nullptr;
    }
    if (target) {
      if (canonical.count(*target)) continue;
      int shift = 0;
      if (*target == metric::kDuration) {
        auto s = duration_shift(row.unit);
        if (!s) {
          fail(ErrorCode::kParse, fmt::format("line {}: unknown duration unit '{}' for '{}'",
                                              row.line_number, row.unit, row.name));
        }
        shift = *s;
      }
      auto value = parse_scaled(row.value, shift);
      if (!value) {
        fail(ErrorCode::kParse, fmt::format("line {}: malformed number '{}' for metric '{}'",
                                            row.line_number, row.value, row.name));
      }
      canonical[*target] = *value;
    } else if (auto value = parse_scaled(row.value, 0)) {
      raw.emplace(row.name, *value);
    }
  }
  for (const auto& name : canonical_metrics()) {
    if (!canonical.count(name)) {
      fail(ErrorCode::kParse, fmt::format("required metric '{}' not found in report", name));
    }
  }
  ProfileReport report = ProfileReport::make(
      canonical.at(std::string(metric::kDuration)),
      canonical.at(std::string(metric::kMemoryThroughput)),
      canonical.at(std::string(metric::kSmThroughput)),
      canonical.at(std::string(metric::kL2Throughput)),
      canonical.at(std::string(metric::kAchievedOccupancy)), LatencyMeasurement{},
      std::move(raw));
  for (const auto& name : canonical_metrics()) {
    const double v = report.canonical(name);
    if (is_percentage_metric(name) && !(v >= 0 && v <= 100)) {
      fail(ErrorCode::kParse, fmt::format("metric '{}' = {} is outside [0, 100]", name, v));
    }
  }
  return report;
}

std::string render_ncu_text(const ProfileReport& report, std::string_view kernel_name) {
  auto row = [](std::string_view name, std::string_view unit, double value) {
    return fmt::format("    {:<70} {:>11} {:>12}\n", name, unit, fmt::format("{}", value));
  };
  std::string out = fmt::format("  {} (1, 1, 1)x(128, 1, 1), Context 1, Stream 7, Device 0\n",
                                kernel_name);
  out += "    Section: GPU Speed Of Light Throughput\n";
  out += row("Memory Throughput", "%", report.memory_throughput_pct);
  out += row("Duration", "usecond", report.duration_us);
  out += row("L2 Cache Throughput", "%", report.l2_throughput_pct);
  out += row("Compute (SM) Throughput", "%", report.compute_throughput_pct);
  out += "    Section: Occupancy\n";
  out += row("Achieved Occupancy", "%", report.achieved_occupancy_pct);
  for (const auto& [name, value] : report.raw_metrics) {
    if (!is_canonical_metric(name)) out += row(name, "", value);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::kUp: return "up";
    case Direction::kDown: return "down";
    case Direction::kNeutral: return "neutral";
  }
  return "neutral";
}

bool DeltaEntry::improved() const {
  if (metric == metric::kDuration) return direction == Direction::kDown;
  return direction == Direction::kUp;
}

bool DeltaEntry::regressed() const {
  if (metric == metric::kDuration) return direction == Direction::kUp;
  return direction == Direction::kDown;
}

const DeltaEntry& ProfileDelta::at(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.metric == name) return e;
  }
  fail(ErrorCode::kDelta, fmt::format("delta has no entry for metric '{}'", name));
}

ProfileDelta diff_reports(const ProfileReport& prev, const ProfileReport& next,
                          const NeutralBands& bands) {
  ProfileDelta delta;
  for (const auto& name : canonical_metrics()) {
    auto a = prev.raw_metrics.find(name);
    auto b = next.raw_metrics.find(name);
    if (a == prev.raw_metrics.end() || b == next.raw_metrics.end()) {
      fail(ErrorCode::kDelta,
           fmt::format("metric '{}' is present in only {} report", name,
                       a == prev.raw_metrics.end() && b == next.raw_metrics.end() ? "neither"
                                                                                  : "one"));
    }
    const double before = a->second;
    const double after = b->second;
    const double band = name == metric::kDuration ? bands.duration_relative * std::abs(before)
                                                  : bands.percentage_points;
    const double diff = after - before;
    Direction dir = Direction::kNeutral;
    if (diff != 0 && std::abs(diff) >= band) dir = diff > 0 ? Direction::kUp : Direction::kDown;
    delta.entries.push_back({name, before, after, dir});
  }
  return delta;
}

// ---------------------------------------------------------------------------
// Elementwise model: 2^24 fp32 elements, one load and one store each, on a
// 132-SM part with 3350 GB/s DRAM, 64 resident warps and 64K registers per SM.
//
//   threads      = 32 * num_warps
//   lane_util    = min(1, BLOCK_SIZE / threads)
//   per_thread   = max(1, BLOCK_SIZE / threads)
//   regs         = 16 + 2 * per_thread
//   blocks/SM    = min(32, 64 / num_warps, 65536 / (regs * threads))
//   active_warps = blocks/SM * num_warps           (occupancy = active_warps / 64)
//   bw_fraction  = min(1, active_warps * lane_util / 32)
//   waves        = ceil(ceil(N / BLOCK_SIZE) / (132 * blocks/SM))
//   duration_us  = 3 + bytes / (bandwidth * bw_fraction) + 0.4 * waves
//                    + 0.02 * waves * per_thread
//
// Reported values are rounded to 0.01.

namespace {

constexpr double kSimElements = 16777216.0;
constexpr double kSimBytes = kSimElements * 8.0;
constexpr double kSimSms = 132.0;
constexpr double kSimBytesPerUs = 3350.0e3;
constexpr double kSimFlopsPerElement = 20.0;
constexpr double kSimPeakFlopsPerUs = 6.7e7;

double round2(double v) { return std::round(v * 100.0) / 100.0; }

std::vector<std::int64_t> powers_of_two(std::int64_t lo, std::int64_t hi) {
  std::vector<std::int64_t> out;
  for (std::int64_t v = lo; v <= hi; v *= 2) out.push_back(v);
  return out;
}

const std::vector<SimModel>& sim_models() {
  static const std::vector<SimModel> models{
      SimModel{"elementwise",
               "memory-bound elementwise map over 2^24 fp32 values",
               {SimParameter{"BLOCK_SIZE", powers_of_two(4, 8192), 1024},
                SimParameter{"num_warps", powers_of_two(1, 16), 4}}},
  };
  return models;
}

ProfileReport simulate_elementwise(const SimKernelSpec& spec) {
  const double block = static_cast<double>(spec.param_vector.at("BLOCK_SIZE"));
  const double warps = static_cast<double>(spec.param_vector.at("num_warps"));
  const double threads = 32.0 * warps;
  const double lane_util = std::min(1.0, block / threads);
  const double per_thread = std::max(1.0, block / threads);
  const double regs = 16.0 + 2.0 * per_thread;
  const double blocks_per_sm =
      std::min({32.0, std::floor(64.0 / warps), std::floor(65536.0 / (regs * threads))});
  const double active_warps = blocks_per_sm * warps;
  const double bw_fraction = std::min(1.0, active_warps * lane_util / 32.0);
  const double grid = std::ceil(kSimElements / block);
  const double waves = std::ceil(grid / (kSimSms * blocks_per_sm));
  const double duration = 3.0 + kSimBytes / (kSimBytesPerUs * bw_fraction) + 0.4 * waves +
                          0.02 * waves * per_thread;

  const double memory_pct = 100.0 * (kSimBytes / duration) / kSimBytesPerUs;
  const double sm_pct =
      std::min(100.0, 100.0 * kSimElements * kSimFlopsPerElement / duration / kSimPeakFlopsPerUs);
  const double l2_pct = std::min(100.0, memory_pct * 0.95 + 2.0);
  const double occupancy_pct = 100.0 * active_warps / 64.0;
  const double d = round2(duration);
  return ProfileReport::make(
      d, round2(memory_pct), round2(sm_pct), round2(l2_pct), round2(occupancy_pct),
      LatencyMeasurement::from_samples({d, d, d, d, d}),
      {{"launch__waves_per_multiprocessor", waves}, {"launch__grid_size", grid}});
}

}  // namespace

const SimModel& sim_model(std::string_view perf_model_id) {
  for (const auto& m : sim_models()) {
    if (m.id == perf_model_id) return m;
  }
  fail(ErrorCode::kConfig, fmt::format("unknown perf model '{}'", perf_model_id));
}

std::vector<std::string> sim_model_ids() {
  std::vector<std::string> ids;
  for (const auto& m : sim_models()) ids.push_back(m.id);
  return ids;
}

void SimKernelSpec::validate() const {
  const SimModel& model = sim_model(perf_model_id);
  for (const auto& [name, value] : param_vector) {
    auto it = std::find_if(model.parameters.begin(), model.parameters.end(),
                           [&](const SimParameter& p) { return p.name == name; });
    if (it == model.parameters.end()) {
      fail(ErrorCode::kConfig,
           fmt::format("perf model '{}' has no parameter '{}'", perf_model_id, name));
    }
    if (std::find(it->domain.begin(), it->domain.end(), value) == it->domain.end()) {
      fail(ErrorCode::kConfig, fmt::format("parameter {}={} is outside the domain of model '{}'",
                                           name, value, perf_model_id));
    }
  }
  for (const auto& p : model.parameters) {
    if (!param_vector.count(p.name)) {
      fail(ErrorCode::kConfig, fmt::format("missing parameter '{}'", p.name));
    }
  }
}

SimKernelSpec sim_spec_from_source(std::string_view source) {
  SimKernelSpec spec;
  for (std::string_view line : split_lines(source)) {
    line = trim(line);
    constexpr std::string_view marker = "# sim-model:";
    if (line.starts_with(marker)) {
      spec.perf_model_id = std::string(trim(line.substr(marker.size())));
      break;
    }
  }
  if (spec.perf_model_id.empty()) {
    fail(ErrorCode::kConfig, "kernel source carries no '# sim-model:' marker");
  }
  const SimModel& model = sim_model(spec.perf_model_id);
  for (const auto& p : model.parameters) spec.param_vector[p.name] = p.default_value;
  for (std::string_view line : split_lines(source)) {
    line = trim(line);
    if (line.starts_with("#")) continue;
    for (const auto& p : model.parameters) {
      if (!line.starts_with(p.name)) continue;
      std::string_view rest = trim(line.substr(p.name.size()));
      if (rest.empty() || rest.front() != '=') continue;
      rest = trim(rest.substr(1));
      std::int64_t value = 0;
      auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), value);
      if (ec == std::errc() && ptr != rest.data()) spec.param_vector[p.name] = value;
    }
  }
  return spec;
}

ProfileReport simulate_profile(const SimKernelSpec& spec) {
  spec.validate();
  if (spec.perf_model_id == "elementwise") return simulate_elementwise(spec);
  fail(ErrorCode::kConfig, fmt::format("unknown perf model '{}'", spec.perf_model_id));
}

// ---------------------------------------------------------------------------

ProfilerGate::Guard::Guard(std::unique_lock<std::mutex> lock, int fd)
    : lock_(std::move(lock)), fd_(fd) {}

ProfilerGate::Guard::Guard(Guard&& other) noexcept
    : lock_(std::move(other.lock_)), fd_(other.fd_) {
  other.fd_ = -1;
}

ProfilerGate::Guard::~Guard() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

ProfilerGate::ProfilerGate(std::filesystem::path lock_file) : lock_file_(std::move(lock_file)) {}

ProfilerGate::Guard ProfilerGate::acquire() {
  std::unique_lock<std::mutex> lock(mutex_);
  const int fd = ::open(lock_file_.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0666);
  if (fd < 0) {
    fail(ErrorCode::kIo, fmt::format("cannot open profiler lock '{}'", lock_file_.string()));
  }
  if (::flock(fd, LOCK_EX) != 0) {
    ::close(fd);
    fail(ErrorCode::kIo, fmt::format("cannot lock '{}'", lock_file_.string()));
  }
  return Guard(std::move(lock), fd);
}

ProfilerGate& ProfilerGate::machine() {
  static ProfilerGate gate(std::filesystem::temp_directory_path() / "proftune-profiler.lock");
  return gate;
}

}  // namespace proftune
