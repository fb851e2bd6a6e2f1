#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "proftune/analysis.hpp"
#include "proftune/core.hpp"
#include "proftune/executor.hpp"
#include "proftune/llm.hpp"
#include "proftune/profiling.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using namespace proftune;

inline fs::path fixture(const std::string& rel) { return fs::path(PROFTUNE_FIXTURE_DIR) / rel; }

inline std::string read_fixture(const std::string& rel) { return read_text_file(fixture(rel).string()); }

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / fmt::format("proftune-test-{:016x}", std::uint64_t(rd()) << 32 | rd());
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& p, const std::string& contents) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << contents;
}

// Elementwise kernel source understood by the simulator.
inline std::string sim_kernel(std::int64_t block, std::int64_t warps, const std::string& extra = "") {
  return fmt::format(
      "# sim-model: elementwise\n"
      "import triton\n"
      "import triton.language as tl\n"
      "BLOCK_SIZE = {}\n"
      "num_warps = {}\n"
      "\n"
      "@triton.jit\n"
      "def scale_kernel(x_ptr, y_ptr, n, BLOCK: tl.constexpr):\n"
      "    pid = tl.program_id(0)\n"
      "    offs = pid * BLOCK + tl.arange(0, BLOCK)\n"
      "    mask = offs < n\n"
      "    tl.store(y_ptr + offs, tl.load(x_ptr + offs, mask=mask) * 2.0, mask=mask)\n"
      "{}",
      block, warps, extra);
}

inline std::string fenced(const std::string& code) {
  return "Here is the revised kernel.\n\n```python\n" + code + "```\n";
}

inline ProfileReport report_with_latency(double latency_us, double duration_us = 100,
                                         double mem = 50, double sm = 50, double l2 = 50,
                                         double occ = 50, double spread = 0) {
  std::vector<double> samples(kTimedIterations, latency_us);
  samples.front() = latency_us * (1 - spread / 2);
  samples.back() = latency_us * (1 + spread / 2);
  return ProfileReport::make(duration_us, mem, sm, l2, occ,
                             LatencyMeasurement::from_samples(samples));
}

// ---------------------------------------------------------------------------
// Oracles written independently of the library code.

// Ranks by counting: rank = 1 + #smaller + (#equal - 1) / 2.
inline std::vector<double> oracle_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double w : v) {
      if (w < v[i]) ++less;
      if (w == v[i]) ++equal;
    }
    r[i] = 1 + less + (equal - 1) / 2;
  }
  return r;
}

inline double oracle_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  long double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    da += (a[i] - ma) * (a[i] - ma);
    db += (b[i] - mb) * (b[i] - mb);
  }
  return static_cast<double>(num / std::sqrt(da * db));
}

struct OracleSpearman {
  double rho;
  double p;
};

// Recursive enumeration of every assignment of y-ranks to x positions.
inline OracleSpearman oracle_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = oracle_ranks(x);
  const auto ry = oracle_ranks(y);
  const double rho = oracle_pearson(rx, ry);
  const std::size_t n = x.size();
  std::vector<bool> used(n, false);
  std::vector<double> perm;
  std::uint64_t hits = 0, total = 0;
  auto rec = [&](auto&& self) -> void {
    if (perm.size() == n) {
      ++total;
      if (std::abs(oracle_pearson(rx, perm)) >= std::abs(rho) - 1e-12) ++hits;
      return;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      used[i] = true;
      perm.push_back(ry[i]);
      self(self);
      perm.pop_back();
      used[i] = false;
    }
  };
  rec(rec);
  return {rho, double(hits) / double(total)};
}

// numpy "linear" percentile written from its definition.
inline double oracle_percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (v.size() - 1) * p / 100.0;
  const double lo = std::floor(h);
  const double frac = h - lo;
  const auto i = static_cast<std::size_t>(lo);
  if (i + 1 >= v.size()) return v.back();
  return v[i] * (1 - frac) + v[i + 1] * frac;
}

// ---------------------------------------------------------------------------
// Synthetic corpus: case_NNN has LOC NNN. `malformed` of them, spread evenly
// over the LOC range, are broken in one of three ways.
struct SyntheticCorpus {
  std::vector<std::string> good;
  std::vector<std::string> bad;
};

inline std::string source_with_loc(int loc) {
  std::string s = "# synthetic kernel\n";
  for (int i = 0; i < loc; ++i) s += fmt::format("x{} = {}\n", i, i);
  return s;
}

inline SyntheticCorpus write_synthetic_corpus(const fs::path& root, int n = 184, int malformed = 53) {
  SyntheticCorpus out;
  std::vector<int> bad_ids;
  for (int k = 0; k < malformed; ++k) bad_ids.push_back(1 + (k * n) / malformed + 1);
  for (int i = 1; i <= n; ++i) {
    const std::string id = fmt::format("case_{:03}", i);
    const fs::path dir = root / id;
    const bool bad = std::find(bad_ids.begin(), bad_ids.end(), i) != bad_ids.end();
    fs::create_directories(dir);
    if (bad) {
      switch (i % 3) {
        case 0:  // no kernel source
          write_file(dir / "tests/correctness/test_ref.py", "def test(): pass\n");
          break;
        case 1:  // no tests at all
          write_file(dir / "kernel.src", source_with_loc(i));
          break;
        default:  // comment-only source
          write_file(dir / "kernel.src", "# TODO\n\n# nothing here\n");
          write_file(dir / "tests/perf/test_perf.py", "def bench(): pass\n");
          break;
      }
      out.bad.push_back(id);
      continue;
    }
    write_file(dir / "kernel.src", source_with_loc(i));
    write_file(dir / "tests/correctness/test_ref.py", "def test(): pass\n");
    write_file(dir / "tests/perf/test_perf.py", "def bench(): pass\n");
    out.good.push_back(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// 131-record ledger: 56/131 successes with a mean success speedup of 1.76
// (98.63 / 56 = 1.7613). Per-category means are the printed ones; tail_low
// carries 4 successes instead of 6 so that the overall count stays at 56.
struct LedgerSpec {
  Category category;
  int n;
  int successes;
  double success_mean;
};

inline std::vector<LedgerSpec> headline_spec() {
  return {{Category::kQ1, 26, 11, 2.25},       {Category::kQ2, 35, 14, 1.40},
          {Category::kQ3, 35, 15, 1.62},       {Category::kQ4, 22, 10, 2.05},
          {Category::kTailHigh, 4, 2, 1.16},   {Category::kTailLow, 9, 4, 1.79}};
}

inline std::vector<RunResultRecord> headline_ledger() {
  std::vector<RunResultRecord> out;
  int idx = 0;
  for (const auto& spec : headline_spec()) {
    // Successes: symmetric offsets around the mean so the mean is exact.
    for (int k = 0; k < spec.n; ++k) {
      RunResultRecord r;
      r.case_id = fmt::format("k{:03}", idx++);
      r.category = spec.category;
      r.baseline_us = 1000.0;
      r.rounds_used = 1 + (k % 8);
      r.loc_original = 20 + 3 * idx;
      r.loc_optimized = r.loc_original + (k % 5) - 1;
      if (k < spec.successes) {
        const double offset = (spec.successes % 2 == 1 && k == spec.successes - 1)
                                  ? 0.0
                                  : ((k % 2 == 0) ? 0.04 : -0.04) * (1 + k / 2);
        const double s = spec.success_mean + offset;
        r.best_us = 1000.0 / s;
        r.success = true;
      } else {
        r.best_us = 1000.0 / (0.90 + 0.01 * (k % 10));
        r.success = false;
      }
      out.push_back(r);
    }
  }
  return out;
}


// ---------------------------------------------------------------------------
// Loop scenarios.

// Executor that passes every job with a fixed digest.
class PassingExecutor final : public Executor {
 public:
  RunnerReply execute(const KernelVariant&, RunnerJob job) override {
    RunnerReply r;
    r.job_id = job.job_id;
    r.status = RunStatus::kOk;
    r.outputs_digest = "0000000000000000";
    if (job.mode == JobMode::kPerf) r.latencies_ms = std::vector<double>(job.iterations, 1.0);
    return r;
  }
};

// Profiler that looks reports up by exact kernel source.
class TableProfiler final : public Profiler {
 public:
  void add(const std::string& source, ProfileReport report) { table_[source] = std::move(report); }
  ProfileReport profile(const KernelVariant& kernel) override {
    auto it = table_.find(kernel.source());
    if (it == table_.end()) throw BuildRunError(RunStatus::kRuntimeFail, "no report for source");
    return it->second;
  }

 private:
  std::map<std::string, ProfileReport> table_;
};

// Elementwise kernel walked from a badly configured baseline to the grid
// optimum: (8192,1) -> (512,1) -> (1024,2), then the same proposal twice so
// the gains flatten out.
struct ElementwiseScenario {
  KernelVariant baseline;
  std::vector<TranscriptEntry> transcript;
  std::vector<std::pair<std::int64_t, std::int64_t>> proposals;
};

inline ElementwiseScenario elementwise_scenario() {
  ElementwiseScenario s;
  s.baseline = KernelVariant::original("scale", sim_kernel(8192, 1));
  s.proposals = {{512, 1}, {1024, 2}, {1024, 2}, {1024, 2}};
  for (auto [b, w] : s.proposals) {
    s.transcript.push_back({PromptRole::kProposal, fenced(sim_kernel(b, w))});
  }
  return s;
}

// Five profiled states of a batched-matmul backward kernel. Latency is the
// total time per round in microseconds.
inline constexpr double kBmmTotalUs[] = {9690, 10090, 10620, 11230, 9660};

inline ProfileReport bmm_round_report(int round) {
  auto r = parse_ncu_report(read_fixture(fmt::format("reports/bmm_bwd_round{}.txt", round)));
  r.latency = LatencyMeasurement::from_samples(std::vector<double>(kTimedIterations, kBmmTotalUs[round - 1]));
  return r;
}

inline std::string bmm_round_source(int round) {
  return fmt::format("@triton.jit\ndef bmm_bwd_kernel():\n    version = {}", round);
}

}  // namespace testsupport
