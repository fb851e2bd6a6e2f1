#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "proftune/analysis.hpp"
#include "proftune/core.hpp"

namespace proftune {

// Corpus layout, one directory per case:
//   <root>/<case_id>/kernel.src
//   <root>/<case_id>/tests/correctness/*
//   <root>/<case_id>/tests/perf/*
//   <root>/<case_id>/hardware.json      (optional, overrides the default profile)
struct KernelCase {
  std::string case_id;
  KernelVariant kernel;
  std::vector<std::string> correctness_tests;  // sorted paths
  std::vector<std::string> perf_tests;         // sorted paths
  HardwareProfile hardware;
};

struct SkippedCase {
  std::string case_id;
  std::string reason;
};

struct IngestResult {
  std::vector<KernelCase> cases;  // sorted by case_id
  std::vector<SkippedCase> skipped;
};

IngestResult ingest_corpus(const std::filesystem::path& root,
                           const HardwareProfile& default_hw = HardwareProfile::h100());

// One JSON object per skipped case: {"case_id": ..., "reason": ...}.
std::string skip_report(const IngestResult& result);

// ---------------------------------------------------------------------------

struct CaseLoc {
  std::string case_id;
  std::int64_t loc = 0;

  bool operator==(const CaseLoc&) const = default;
};

struct LocBin {
  double lo = 0;
  double hi = 0;
  bool lo_closed = false;  // Q1 is [p5, q1]; the others are (lo, hi]
  std::vector<CaseLoc> members;  // ordered by (loc, case_id)
};

struct Stratification {
  double p5 = 0;
  double p95 = 0;
  std::array<LocBin, 4> central_bins;
  std::vector<CaseLoc> tail_low;   // loc < p5
  std::vector<CaseLoc> tail_high;  // loc > p95

  std::size_t size() const;
  std::optional<Category> category_of(std::string_view case_id) const;
};

inline constexpr std::size_t kMinStratifyCases = 8;

// numpy-style "linear" percentile of sorted values, p in [0, 100].
double linear_percentile(const std::vector<double>& sorted, double p);

// P5/P95 by linear interpolation over all LOCs; quartile cutpoints over the
// central cases only.
Stratification stratify(std::vector<CaseLoc> cases);
Stratification stratify(const std::vector<KernelCase>& cases);

inline constexpr int kCentralPicks = 30;
inline constexpr int kTailPicks = 3;

struct SubsetSelection {
  std::uint64_t seed = 0;
  std::array<int, 4> allocation{};
  std::array<std::vector<std::string>, 4> central_picks;  // in draw order
  std::vector<std::string> tail_low_picks;                // ascending LOC
  std::vector<std::string> tail_high_picks;               // descending LOC

  std::vector<std::string> all_ids() const;
  bool operator==(const SubsetSelection&) const = default;
};

void to_json(json& j, const SubsetSelection& s);

// Largest-remainder split of `total` seats; equal remainders favour the
// lower bin index.
std::array<int, 4> largest_remainder_allocation(const std::array<std::size_t, 4>& populations,
                                                int total = kCentralPicks);

// Per bin Q1..Q4: members ordered by (loc, case_id), then a partial
// Fisher-Yates shuffle driven by std::mt19937_64(seed) where draw j swaps
// position j with j + (next() mod (n - j)). Tails are the extremes.
SubsetSelection sample_subset(const Stratification& s, std::uint64_t seed);

// Attaches the stratification category and the success flag.
RunResultRecord classify_case(RunResultRecord record, const Stratification& s,
                              const ArbiterThresholds& thresholds);

}  // namespace proftune
