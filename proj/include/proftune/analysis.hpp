#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "proftune/core.hpp"

namespace proftune {

// LOC stratum of a case. Order matches the summary table layout.
enum class Category { kQ1, kQ2, kQ3, kQ4, kTailHigh, kTailLow };

std::string_view to_string(Category c);
// Accepts "Q1".."Q4", "tail_high", "tail_low".
Category category_from_string(std::string_view s);
// "Q1".."Q4", "Tail High", "Tail Low".
std::string_view display_name(Category c);
bool is_central(Category c);

struct RunResultRecord {
  std::string case_id;
  Category category = Category::kQ1;
  double baseline_us = 0;
  double best_us = 0;
  int rounds_used = 1;
  bool success = false;
  std::int64_t loc_original = 1;
  std::int64_t loc_optimized = 1;
  int llm_calls = 0;
  double api_cost_usd = 0;

  double speedup() const { return compute_speedup(baseline_us, best_us); }
  double length_ratio() const {
    return static_cast<double>(loc_optimized) / static_cast<double>(loc_original);
  }
  void validate() const;
  bool operator==(const RunResultRecord&) const = default;
};

void to_json(json& j, const RunResultRecord& r);
void from_json(const json& j, RunResultRecord& r);

// Results ledger: JSON Lines, one record per case, append-only.
void append_ledger(const std::filesystem::path& path, const RunResultRecord& record);
std::vector<RunResultRecord> read_ledger(const std::filesystem::path& path);

// Drops records whose case_id is listed.
std::vector<RunResultRecord> exclude_cases(std::vector<RunResultRecord> records,
                                           const std::set<std::string>& excluded);

// ---------------------------------------------------------------------------

struct SummaryRow {
  std::string label;
  int n_kernels = 0;
  int n_success = 0;
  double success_rate = 0;
  // Over successful records only; absent when there are none.
  std::optional<double> avg_speedup_on_success;
  std::optional<double> geomean_speedup_on_success;
  // Every record at its achieved ratio, failures included.
  double avg_speedup_overall = 0;
};

struct SummaryTable {
  std::vector<SummaryRow> categories;  // non-empty categories in Category order
  SummaryRow central;                  // Q1..Q4 combined
  SummaryRow overall;                  // everything, unweighted
};

SummaryTable aggregate(const std::vector<RunResultRecord>& records);

struct HistogramBin {
  double lo = 0;
  double hi = 0;  // [lo, hi)
  int count = 0;
};

struct Histogram {
  std::vector<HistogramBin> bins;  // contiguous, from the lowest to the highest occupied bin
  int excluded = 0;                // successful speedups above the cap
  double cap = 0;
};

// Over successful records. Bins are left-closed [lo, hi) starting at `origin`;
// speedups strictly greater than `cap` are excluded and counted.
Histogram speedup_histogram(const std::vector<RunResultRecord>& records, double bin_width,
                            double cap, double origin = 1.0);

struct CdfPoint {
  double threshold = 0;
  double fraction_at_most = 0;   // P(s <= threshold)
  double fraction_at_least = 0;  // P(s >= threshold)
};

// One point per distinct successful speedup, ascending.
std::vector<CdfPoint> speedup_cdf(const std::vector<RunResultRecord>& records);
// Fraction of successful speedups >= threshold.
double fraction_at_least(const std::vector<RunResultRecord>& records, double threshold);

struct RoundsRow {
  int rounds = 0;
  int n_attempted = 0;
  int n_success = 0;
  double rate = 0;
};

std::vector<RoundsRow> success_by_rounds(const std::vector<RunResultRecord>& records);

struct LengthRatioStats {
  std::vector<double> ratios;  // record order
  double median = 0;
  double expansion_fraction = 0;  // share with ratio > 1
};

LengthRatioStats length_ratio_stats(const std::vector<RunResultRecord>& records);

// ---------------------------------------------------------------------------

enum class PValueMethod { kExactPermutation, kTApproximation };

struct SpearmanResult {
  double rho = 0;
  double p_value = 1;
  PValueMethod method = PValueMethod::kExactPermutation;
};

inline constexpr std::size_t kExactPermutationLimit = 10;

// Average ranks for ties. Two-sided p-value: exact enumeration of all n!
// permutations for n <= 10, Student-t approximation with n - 2 degrees of
// freedom above.
SpearmanResult spearman(const std::vector<double>& xs, const std::vector<double>& ys);

// 1-based ranks, ties averaged.
std::vector<double> average_ranks(const std::vector<double>& values);

// ---------------------------------------------------------------------------

struct ReportOptions {
  double bin_width = 0.25;
  double cap = 10.0;
  double origin = 1.0;
};

// Writes summary.csv, hist.csv, cdf.csv, rounds.csv, length.csv, corr.csv and
// report.txt into out_dir. Throws before writing anything when records is empty.
std::vector<std::filesystem::path> emit_report(const std::vector<RunResultRecord>& records,
                                               const std::filesystem::path& out_dir,
                                               const ReportOptions& options = {});

}  // namespace proftune
