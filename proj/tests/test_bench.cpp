#include "doctest.h"

#include <set>

#include "proftune/bench.hpp"
#include "support.hpp"

using namespace proftune;
using namespace testsupport;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kInvalidArgument;
}

std::vector<CaseLoc> one_to(int n) {
  std::vector<CaseLoc> v;
  for (int i = 1; i <= n; ++i) v.push_back({fmt::format("case_{:03}", i), i});
  return v;
}

void write_case(const fs::path& root, const std::string& id, int loc, bool correctness = true,
                bool perf = true) {
  write_file(root / id / "kernel.src", source_with_loc(loc));
  if (correctness) write_file(root / id / "tests/correctness/test_ref.py", "def test(): pass\n");
  if (perf) write_file(root / id / "tests/perf/test_perf.py", "def bench(): pass\n");
}

// Independent partition check: every case lands in exactly one group, and
// each group's LOCs respect its interval.
void check_partition(const Stratification& s, const std::vector<CaseLoc>& input) {
  std::multiset<std::string> seen;
  for (const auto& c : s.tail_low) {
    seen.insert(c.case_id);
    CHECK(static_cast<double>(c.loc) < s.p5);
  }
  for (const auto& c : s.tail_high) {
    seen.insert(c.case_id);
    CHECK(static_cast<double>(c.loc) > s.p95);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& bin = s.central_bins[i];
    for (const auto& c : bin.members) {
      seen.insert(c.case_id);
      const double loc = static_cast<double>(c.loc);
      CHECK(loc <= bin.hi);
      CHECK((bin.lo_closed ? loc >= bin.lo : loc > bin.lo));
    }
    if (i > 0) CHECK(bin.lo == s.central_bins[i - 1].hi);
  }
  CHECK(s.central_bins[0].lo == s.p5);
  CHECK(s.central_bins[3].hi == s.p95);
  CHECK(seen.size() == input.size());
  for (const auto& c : input) CHECK(seen.count(c.case_id) == 1);
  CHECK(s.size() == input.size());
}

}  // namespace

TEST_CASE("ingest a small well-formed corpus") {
  TempDir dir;
  for (int i = 1; i <= 5; ++i) write_case(dir.path(), fmt::format("op{}", i), 10 * i);
  const auto r = ingest_corpus(dir.path());
  REQUIRE(r.cases.size() == 5);
  CHECK(r.skipped.empty());
  CHECK(skip_report(r).empty());
  CHECK(r.cases[2].case_id == "op3");
  CHECK(r.cases[2].kernel.loc() == 30);
  CHECK(r.cases[2].kernel.provenance() == Provenance::kOriginal);
  CHECK(r.cases[2].correctness_tests.size() == 1);
  CHECK(r.cases[2].perf_tests.size() == 1);
  CHECK(r.cases[2].hardware == HardwareProfile::h100());
}

TEST_CASE("ingest reports non-conforming cases") {
  TempDir dir;
  write_case(dir.path(), "a_good", 12);
  write_case(dir.path(), "b_no_tests", 12, false, false);
  write_case(dir.path(), "c_perf_only", 12, false, true);
  write_file(dir / "d_no_kernel/tests/perf/t.py", "x\n");
  write_file(dir / "e_comments/kernel.src", "# only\n   # comments\n\n");
  write_file(dir / "e_comments/tests/perf/t.py", "x\n");
  write_case(dir.path(), "f_bad_hw", 12);
  write_file(dir / "f_bad_hw/hardware.json", "{\"gpu_name\": 3}");
  write_case(dir.path(), "g_custom_hw", 12);
  auto hw = HardwareProfile::h100();
  hw.gpu_name = "Custom GPU";
  hw.sm_count = 100;
  write_file(dir / "g_custom_hw/hardware.json", json(hw).dump());
  write_file(dir / "stray_file.txt", "not a case");

  const auto r = ingest_corpus(dir.path());
  std::vector<std::string> ids;
  for (const auto& c : r.cases) ids.push_back(c.case_id);
  CHECK(ids == std::vector<std::string>{"a_good", "c_perf_only", "g_custom_hw"});
  CHECK(r.cases[2].hardware.gpu_name == "Custom GPU");
  CHECK(r.cases[2].hardware.sm_count == 100);

  REQUIRE(r.skipped.size() == 4);
  CHECK(r.skipped[0].case_id == "b_no_tests");
  CHECK(r.skipped[0].reason.find("no test files") != std::string::npos);
  CHECK(r.skipped[1].case_id == "d_no_kernel");
  CHECK(r.skipped[1].reason == "missing kernel.src");
  CHECK(r.skipped[2].case_id == "e_comments");
  CHECK(r.skipped[3].case_id == "f_bad_hw");
  CHECK(r.skipped[3].reason.starts_with("invalid hardware.json"));

  const auto report = skip_report(r);
  std::size_t lines = 0;
  for (std::size_t pos = 0; (pos = report.find('\n', pos)) != std::string::npos; ++pos) ++lines;
  CHECK(lines == 4);
  CHECK(json::parse(report.substr(0, report.find('\n'))).at("case_id") == "b_no_tests");
}

TEST_CASE("ingest errors") {
  TempDir dir;
  CHECK(code_of([&] { ingest_corpus(dir / "missing"); }) == ErrorCode::kIo);
  CHECK(code_of([&] { ingest_corpus(dir.path()); }) == ErrorCode::kEmptyCorpus);
  write_case(dir.path(), "x", 3, false, false);
  CHECK(code_of([&] { ingest_corpus(dir.path()); }) == ErrorCode::kEmptyCorpus);
}

TEST_CASE("synthetic 184-case corpus with 53 malformed") {
  TempDir dir;
  const auto written = write_synthetic_corpus(dir.path());
  REQUIRE(written.bad.size() == 53);
  const auto r = ingest_corpus(dir.path());
  CHECK(r.cases.size() == 131);
  CHECK(r.skipped.size() == 53);
  std::vector<std::string> ids;
  for (const auto& c : r.cases) ids.push_back(c.case_id);
  CHECK(ids == written.good);
  CHECK(std::is_sorted(ids.begin(), ids.end()));

  const auto again = ingest_corpus(dir.path());
  REQUIRE(again.cases.size() == r.cases.size());
  for (std::size_t i = 0; i < r.cases.size(); ++i) {
    CHECK(again.cases[i].case_id == r.cases[i].case_id);
    CHECK(again.cases[i].kernel == r.cases[i].kernel);
    CHECK(again.cases[i].correctness_tests == r.cases[i].correctness_tests);
  }
}

// ---------------------------------------------------------------------------

TEST_CASE("linear percentile agrees with the oracle") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + rng() % 40);
    for (auto& x : v) x = static_cast<double>(rng() % 50);
    std::sort(v.begin(), v.end());
    for (double p : {0.0, 5.0, 25.0, 50.0, 75.0, 95.0, 100.0, 37.5}) {
      CHECK(linear_percentile(v, p) == doctest::Approx(oracle_percentile(v, p)).epsilon(1e-12));
    }
  }
  CHECK(code_of([] { linear_percentile({}, 5); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([] { linear_percentile({1.0}, 101); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("stratify LOCs 1..100") {
  const auto input = one_to(100);
  const auto s = stratify(input);

  std::vector<double> all;
  for (int i = 1; i <= 100; ++i) all.push_back(i);
  const double p5 = oracle_percentile(all, 5);
  const double p95 = oracle_percentile(all, 95);
  CHECK(s.p5 == doctest::Approx(p5));
  CHECK(s.p95 == doctest::Approx(p95));
  CHECK(p5 == doctest::Approx(5.95));
  CHECK(p95 == doctest::Approx(95.05));

  // Brute force: tails, then quartiles over the central values.
  std::vector<double> central;
  std::vector<std::string> low, high;
  for (double x : all) {
    if (x < p5) low.push_back(fmt::format("case_{:03}", int(x)));
    else if (x > p95) high.push_back(fmt::format("case_{:03}", int(x)));
    else central.push_back(x);
  }
  const double q[3] = {oracle_percentile(central, 25), oracle_percentile(central, 50),
                       oracle_percentile(central, 75)};
  std::array<std::size_t, 4> expected{};
  for (double x : central) {
    if (x <= q[0]) ++expected[0];
    else if (x <= q[1]) ++expected[1];
    else if (x <= q[2]) ++expected[2];
    else ++expected[3];
  }
  auto ids = [](const std::vector<CaseLoc>& v) {
    std::vector<std::string> out;
    for (const auto& c : v) out.push_back(c.case_id);
    return out;
  };
  CHECK(ids(s.tail_low) == low);
  CHECK(ids(s.tail_high) == high);
  CHECK(low.size() == 5);
  CHECK(high.size() == 5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(s.central_bins[i].members.size() == expected[i]);
  CHECK(expected == std::array<std::size_t, 4>{23, 22, 22, 23});
  check_partition(s, input);

  CHECK(s.category_of("case_001") == Category::kTailLow);
  CHECK(s.category_of("case_006") == Category::kQ1);
  CHECK(s.category_of("case_050") == Category::kQ2);
  CHECK(s.category_of("case_100") == Category::kTailHigh);
  CHECK_FALSE(s.category_of("nope"));
}

TEST_CASE("stratify errors") {
  std::vector<CaseLoc> same;
  for (int i = 0; i < 8; ++i) same.push_back({fmt::format("c{}", i), 42});
  try {
    stratify(same);
    FAIL("expected degenerate error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerate);
    CHECK(std::string(e.what()).find("single bin") != std::string::npos);
  }
  CHECK(code_of([] { stratify(one_to(7)); }) == ErrorCode::kPrecondition);
  auto dup = one_to(10);
  dup[3].case_id = dup[4].case_id;
  CHECK(code_of([&] { stratify(dup); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("stratify property: partition with duplicate LOCs, order independent") {
  std::mt19937_64 rng(77);
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<CaseLoc> input;
    const int n = 8 + static_cast<int>(rng() % 60);
    const int spread = 2 + static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) {
      input.push_back({fmt::format("k{:03}", i), 1 + static_cast<std::int64_t>(rng() % spread)});
    }
    Stratification s;
    try {
      s = stratify(input);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kDegenerate);
      continue;
    }
    ++checked;
    check_partition(s, input);
    auto shuffled = input;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto t = stratify(shuffled);
    for (std::size_t i = 0; i < 4; ++i) CHECK(t.central_bins[i].members == s.central_bins[i].members);
    CHECK(t.tail_low == s.tail_low);
    CHECK(t.tail_high == s.tail_high);
  }
  CHECK(checked > 200);
}

// ---------------------------------------------------------------------------

namespace {

// Hamilton's method with exact integer remainders; ties to the lower index.
std::array<int, 4> oracle_allocation(const std::array<std::size_t, 4>& pop, int total) {
  std::size_t n = 0;
  for (auto p : pop) n += p;
  std::array<int, 4> out{};
  std::vector<std::pair<std::size_t, std::size_t>> rem;  // (remainder, index)
  int given = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = static_cast<int>(total * pop[i] / n);
    given += out[i];
    rem.push_back({total * pop[i] % n, i});
  }
  std::sort(rem.begin(), rem.end(), [](auto a, auto b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (std::size_t k = 0; given < total; ++k, ++given) ++out[rem[k].second];
  return out;
}

Stratification hand_strat(const std::array<std::size_t, 4>& sizes) {
  Stratification s;
  s.p5 = 5;
  s.p95 = 1000;
  int id = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    s.central_bins[i].lo = 5 + 100.0 * i;
    s.central_bins[i].hi = 5 + 100.0 * (i + 1);
    s.central_bins[i].lo_closed = i == 0;
    for (std::size_t k = 0; k < sizes[i]; ++k) {
      s.central_bins[i].members.push_back({fmt::format("b{}_{:03}", i, id++), static_cast<std::int64_t>(6 + 100 * i + k % 90)});
    }
  }
  for (int k = 0; k < 4; ++k) s.tail_low.push_back({fmt::format("lo{}", k), k + 1});
  for (int k = 0; k < 4; ++k) s.tail_high.push_back({fmt::format("hi{}", k), 2000 + k});
  return s;
}

}  // namespace

TEST_CASE("largest remainder allocation") {
  CHECK(largest_remainder_allocation({25, 25, 25, 25}) == std::array<int, 4>{8, 8, 7, 7});
  CHECK(largest_remainder_allocation({23, 22, 22, 23}) == oracle_allocation({23, 22, 22, 23}, 30));
  CHECK(largest_remainder_allocation({100, 1, 1, 1}) == std::array<int, 4>{29, 1, 0, 0});
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    std::array<std::size_t, 4> pop{};
    for (auto& p : pop) p = rng() % 60;
    if (pop[0] + pop[1] + pop[2] + pop[3] == 0) continue;
    const auto a = largest_remainder_allocation(pop);
    CHECK(a == oracle_allocation(pop, 30));
    CHECK(a[0] + a[1] + a[2] + a[3] == 30);
    const std::size_t n = pop[0] + pop[1] + pop[2] + pop[3];
    for (std::size_t i = 0; i < 4; ++i) {
      const double quota = 30.0 * pop[i] / n;
      CHECK(a[i] >= std::floor(quota));
      CHECK(a[i] <= std::ceil(quota));
    }
  }
  CHECK(code_of([] { largest_remainder_allocation({0, 0, 0, 0}); }) == ErrorCode::kSampling);
}

TEST_CASE("sample_subset contract") {
  const auto s = stratify(one_to(100));
  const auto a = sample_subset(s, 42);
  CHECK(a == sample_subset(s, 42));
  CHECK(a.seed == 42);
  const auto ids = a.all_ids();
  CHECK(ids.size() == 36);
  CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == 36);
  CHECK(a.allocation == largest_remainder_allocation({23, 22, 22, 23}));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.central_picks[i].size() == static_cast<std::size_t>(a.allocation[i]));
    for (const auto& id : a.central_picks[i]) {
      CHECK(s.category_of(id) == std::array{Category::kQ1, Category::kQ2, Category::kQ3, Category::kQ4}[i]);
    }
  }
  CHECK(a.tail_low_picks == std::vector<std::string>{"case_001", "case_002", "case_003"});
  CHECK(a.tail_high_picks == std::vector<std::string>{"case_100", "case_099", "case_098"});
  CHECK(sample_subset(s, 43).all_ids() != ids);

  const json j = a;
  CHECK(j.at("seed") == 42);
  CHECK(j.at("central").at("Q1").at("case_ids").size() == static_cast<std::size_t>(a.allocation[0]));
  CHECK(j.at("tail_high").at(0) == "case_100");
}

TEST_CASE("sample_subset follows the documented draw rule") {
  const auto s = stratify(one_to(100));
  for (std::uint64_t seed : {0ull, 1ull, 42ull, 0xfeedbeefull}) {
    const auto sel = sample_subset(s, seed);
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<std::string> pool;
      for (const auto& c : s.central_bins[i].members) pool.push_back(c.case_id);  // LOC order = id order here
      std::vector<std::string> drawn;
      for (std::size_t j = 0; j < static_cast<std::size_t>(sel.allocation[i]); ++j) {
        std::swap(pool[j], pool[j + rng() % (pool.size() - j)]);
        drawn.push_back(pool[j]);
      }
      CHECK(sel.central_picks[i] == drawn);
    }
  }
}

TEST_CASE("sample_subset draws are roughly uniform within a bin") {
  const auto s = stratify(one_to(100));
  std::map<std::string, int> hits;
  const int trials = 3000;
  for (int seed = 0; seed < trials; ++seed) {
    const auto sel = sample_subset(s, static_cast<std::uint64_t>(seed));
    for (const auto& id : sel.central_picks[1]) ++hits[id];
  }
  const double expected = trials * 7.0 / 22.0;  // Q2 holds 22 cases and receives 7 picks
  for (const auto& c : s.central_bins[1].members) {
    CHECK(hits[c.case_id] > 0.85 * expected);
    CHECK(hits[c.case_id] < 1.15 * expected);
  }
}

TEST_CASE("sample_subset errors") {
  try {
    sample_subset(hand_strat({30, 30, 30, 0}), 1);
    FAIL("expected a sampling error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kSampling);
    CHECK(std::string(e.what()).find("Q4") != std::string::npos);
  }
  CHECK(code_of([] { sample_subset(hand_strat({2, 2, 2, 2}), 1); }) == ErrorCode::kSampling);
  CHECK_NOTHROW(sample_subset(hand_strat({10, 10, 10, 10}), 1));
  auto few = hand_strat({10, 10, 10, 10});
  few.tail_high.resize(2);
  try {
    sample_subset(few, 1);
    FAIL("expected a sampling error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("tail_high") != std::string::npos);
  }
}

TEST_CASE("sample_subset on the synthetic corpus") {
  TempDir dir;
  write_synthetic_corpus(dir.path());
  const auto r = ingest_corpus(dir.path());
  const auto s = stratify(r.cases);
  CHECK(s.size() == 131);
  const auto sel = sample_subset(s, 2025);
  CHECK(sel.all_ids().size() == 36);
  CHECK(sel == sample_subset(stratify(ingest_corpus(dir.path()).cases), 2025));
}

TEST_CASE("classify_case") {
  const auto s = stratify(one_to(100));
  const ArbiterThresholds t;
  RunResultRecord q1;
  q1.case_id = "case_010";
  q1.baseline_us = 225;
  q1.best_us = 100;
  const auto a = classify_case(q1, s, t);
  CHECK(a.category == Category::kQ1);
  CHECK(a.success);
  CHECK(a.speedup() == doctest::Approx(2.25));

  RunResultRecord flat = q1;
  flat.best_us = 225;
  CHECK_FALSE(classify_case(flat, s, t).success);

  RunResultRecord tail;
  tail.case_id = "case_002";
  tail.baseline_us = 179;
  tail.best_us = 100;
  const auto b = classify_case(tail, s, t);
  CHECK(b.category == Category::kTailLow);
  CHECK(b.success);

  RunResultRecord stranger = q1;
  stranger.case_id = "elsewhere";
  CHECK(code_of([&] { classify_case(stranger, s, t); }) == ErrorCode::kInvalidArgument);
}
