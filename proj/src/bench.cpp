#include "proftune/bench.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <system_error>

#include <fmt/format.h>

namespace proftune {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> list_files(const fs::path& dir) {
  std::vector<std::string> out;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) return out;
  for (fs::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) {
    if (it->is_regular_file(ec)) out.push_back(it->path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool loc_less(const CaseLoc& a, const CaseLoc& b) {
  return a.loc != b.loc ? a.loc < b.loc : a.case_id < b.case_id;
}

}  // namespace

IngestResult ingest_corpus(const fs::path& root, const HardwareProfile& default_hw) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) {
    fail(ErrorCode::kIo, fmt::format("corpus root '{}' is not a readable directory", root.string()));
  }
  std::vector<fs::path> dirs;
  fs::directory_iterator it(root, ec);
  if (ec) fail(ErrorCode::kIo, fmt::format("cannot read '{}': {}", root.string(), ec.message()));
  for (fs::directory_iterator end; it != end; it.increment(ec)) {
    if (ec) fail(ErrorCode::kIo, fmt::format("cannot read '{}': {}", root.string(), ec.message()));
    if (it->is_directory()) dirs.push_back(it->path());
  }
  std::sort(dirs.begin(), dirs.end());

  IngestResult result;
  for (const fs::path& dir : dirs) {
    const std::string case_id = dir.filename().string();
    auto skip = [&](std::string reason) { result.skipped.push_back({case_id, std::move(reason)}); };

    const fs::path src = dir / "kernel.src";
    if (!fs::is_regular_file(src, ec)) {
      skip("missing kernel.src");
      continue;
    }
    std::string source;
    try {
      source = read_text_file(src.string());
    } catch (const Error& e) {
      skip(e.what());
      continue;
    }
    if (count_loc(source) < 1) {
      skip("kernel.src has no code lines");
      continue;
    }
    KernelCase c;
    c.case_id = case_id;
    c.kernel = KernelVariant::original(case_id, std::move(source));
    c.correctness_tests = list_files(dir / "tests" / "correctness");
    c.perf_tests = list_files(dir / "tests" / "perf");
    if (c.correctness_tests.empty() && c.perf_tests.empty()) {
      skip("no test files under tests/correctness or tests/perf");
      continue;
    }
    c.hardware = default_hw;
    const fs::path hw = dir / "hardware.json";
    if (fs::exists(hw, ec)) {
      try {
        c.hardware = json::parse(read_text_file(hw.string())).get<HardwareProfile>();
        c.hardware.validate();
      } catch (const std::exception& e) {
        skip(fmt::format("invalid hardware.json: {}", e.what()));
        continue;
      }
    }
    result.cases.push_back(std::move(c));
  }
  if (result.cases.empty()) {
    fail(ErrorCode::kEmptyCorpus,
         fmt::format("no conforming cases under '{}' ({} skipped)", root.string(),
                     result.skipped.size()));
  }
  return result;
}

std::string skip_report(const IngestResult& result) {
  std::string out;
  for (const auto& s : result.skipped) {
    out += json{{"case_id", s.case_id}, {"reason", s.reason}}.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

std::size_t Stratification::size() const {
  std::size_t n = tail_low.size() + tail_high.size();
  for (const auto& b : central_bins) n += b.members.size();
  return n;
}

std::optional<Category> Stratification::category_of(std::string_view case_id) const {
  auto has = [&](const std::vector<CaseLoc>& v) {
    return std::any_of(v.begin(), v.end(), [&](const CaseLoc& c) { return c.case_id == case_id; });
  };
  constexpr Category central[] = {Category::kQ1, Category::kQ2, Category::kQ3, Category::kQ4};
  for (std::size_t i = 0; i < 4; ++i) {
    if (has(central_bins[i].members)) return central[i];
  }
  if (has(tail_low)) return Category::kTailLow;
  if (has(tail_high)) return Category::kTailHigh;
  return std::nullopt;
}

double linear_percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) fail(ErrorCode::kInvalidArgument, "percentile of an empty list");
  if (p < 0 || p > 100) fail(ErrorCode::kInvalidArgument, "percentile outside [0, 100]");
  const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (rank - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

Stratification stratify(std::vector<CaseLoc> cases) {
  if (cases.size() < kMinStratifyCases) {
    fail(ErrorCode::kPrecondition,
         fmt::format("stratification needs at least {} cases, got {}", kMinStratifyCases,
                     cases.size()));
  }
  std::sort(cases.begin(), cases.end(), loc_less);
  for (std::size_t i = 1; i < cases.size(); ++i) {
    if (cases[i].case_id == cases[i - 1].case_id) {
      fail(ErrorCode::kInvalidArgument, fmt::format("duplicate case_id '{}'", cases[i].case_id));
    }
  }
  std::vector<double> locs;
  for (const auto& c : cases) locs.push_back(static_cast<double>(c.loc));

  Stratification s;
  s.p5 = linear_percentile(locs, 5);
  s.p95 = linear_percentile(locs, 95);
  if (locs.front() == locs.back() || s.p5 == s.p95) {
    fail(ErrorCode::kDegenerate,
         fmt::format("LOC distribution is degenerate (P5 = P95 = {}): all central cases would "
                     "fall into a single bin",
                     s.p5));
  }
  std::vector<CaseLoc> central;
  for (const auto& c : cases) {
    const auto loc = static_cast<double>(c.loc);
    if (loc < s.p5) {
      s.tail_low.push_back(c);
    } else if (loc > s.p95) {
      s.tail_high.push_back(c);
    } else {
      central.push_back(c);
    }
  }
  std::vector<double> central_locs;
  for (const auto& c : central) central_locs.push_back(static_cast<double>(c.loc));
  const double cuts[5] = {s.p5, linear_percentile(central_locs, 25),
                          linear_percentile(central_locs, 50), linear_percentile(central_locs, 75),
                          s.p95};
  for (std::size_t i = 0; i < 4; ++i) {
    s.central_bins[i].lo = cuts[i];
    s.central_bins[i].hi = cuts[i + 1];
    s.central_bins[i].lo_closed = i == 0;
  }
  for (const auto& c : central) {
    const auto loc = static_cast<double>(c.loc);
    std::size_t bin = 0;
    while (bin < 3 && loc > cuts[bin + 1]) ++bin;
    s.central_bins[bin].members.push_back(c);
  }
  return s;
}

Stratification stratify(const std::vector<KernelCase>& cases) {
  std::vector<CaseLoc> locs;
  for (const auto& c : cases) locs.push_back({c.case_id, c.kernel.loc()});
  return stratify(std::move(locs));
}

// ---------------------------------------------------------------------------

std::vector<std::string> SubsetSelection::all_ids() const {
  std::vector<std::string> out;
  for (const auto& bin : central_picks) out.insert(out.end(), bin.begin(), bin.end());
  out.insert(out.end(), tail_low_picks.begin(), tail_low_picks.end());
  out.insert(out.end(), tail_high_picks.begin(), tail_high_picks.end());
  return out;
}

void to_json(json& j, const SubsetSelection& s) {
  json central = json::object();
  constexpr const char* names[] = {"Q1", "Q2", "Q3", "Q4"};
  for (std::size_t i = 0; i < 4; ++i) {
    central[names[i]] = json{{"allocation", s.allocation[i]}, {"case_ids", s.central_picks[i]}};
  }
  j = json{{"seed", s.seed},
           {"central", central},
           {"tail_low", s.tail_low_picks},
           {"tail_high", s.tail_high_picks}};
}

std::array<int, 4> largest_remainder_allocation(const std::array<std::size_t, 4>& populations,
                                                int total) {
  std::uint64_t n = 0;
  for (auto p : populations) n += p;
  if (n == 0) fail(ErrorCode::kSampling, "all central bins are empty");
  std::array<int, 4> alloc{};
  std::array<std::uint64_t, 4> remainder{};
  int assigned = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::uint64_t seats = static_cast<std::uint64_t>(total) * populations[i];
    alloc[i] = static_cast<int>(seats / n);
    remainder[i] = seats % n;
    assigned += alloc[i];
  }
  std::array<std::size_t, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++alloc[order[k]];
  return alloc;
}

SubsetSelection sample_subset(const Stratification& s, std::uint64_t seed) {
  constexpr const char* names[] = {"Q1", "Q2", "Q3", "Q4"};
  std::array<std::size_t, 4> populations{};
  for (std::size_t i = 0; i < 4; ++i) {
    populations[i] = s.central_bins[i].members.size();
    if (populations[i] == 0) {
      fail(ErrorCode::kSampling, fmt::format("central bin {} is empty", names[i]));
    }
  }
  if (s.tail_low.size() < kTailPicks) {
    fail(ErrorCode::kSampling, fmt::format("tail_low has {} cases, need {}", s.tail_low.size(),
                                           kTailPicks));
  }
  if (s.tail_high.size() < kTailPicks) {
    fail(ErrorCode::kSampling, fmt::format("tail_high has {} cases, need {}", s.tail_high.size(),
                                           kTailPicks));
  }

  SubsetSelection out;
  out.seed = seed;
  out.allocation = largest_remainder_allocation(populations);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto want = static_cast<std::size_t>(out.allocation[i]);
    if (populations[i] < want) {
      fail(ErrorCode::kSampling, fmt::format("central bin {} has {} cases, allocation is {}",
                                             names[i], populations[i], want));
    }
    std::vector<CaseLoc> pool = s.central_bins[i].members;
    std::sort(pool.begin(), pool.end(), loc_less);
    for (std::size_t j = 0; j < want; ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng() % (pool.size() - j));
      std::swap(pool[j], pool[pick]);
      out.central_picks[i].push_back(pool[j].case_id);
    }
  }

  std::vector<CaseLoc> low = s.tail_low;
  std::sort(low.begin(), low.end(), loc_less);
  for (std::size_t j = 0; j < kTailPicks; ++j) out.tail_low_picks.push_back(low[j].case_id);
  std::vector<CaseLoc> high = s.tail_high;
  std::sort(high.begin(), high.end(), [](const CaseLoc& a, const CaseLoc& b) {
    return a.loc != b.loc ? a.loc > b.loc : a.case_id < b.case_id;
  });
  for (std::size_t j = 0; j < kTailPicks; ++j) out.tail_high_picks.push_back(high[j].case_id);
  return out;
}

RunResultRecord classify_case(RunResultRecord record, const Stratification& s,
                              const ArbiterThresholds& thresholds) {
  const auto category = s.category_of(record.case_id);
  if (!category) {
    fail(ErrorCode::kInvalidArgument,
         fmt::format("case '{}' is not part of the stratification", record.case_id));
  }
  record.category = *category;
  record.success = classify_success(record.speedup(), thresholds);
  return record;
}

}  // namespace proftune
