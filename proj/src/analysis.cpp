#include "proftune/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <system_error>

#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

namespace proftune {

namespace fs = std::filesystem;

namespace {

constexpr Category kCategories[] = {Category::kQ1, Category::kQ2, Category::kQ3,
                                    Category::kQ4, Category::kTailHigh, Category::kTailLow};

}  // namespace

std::string_view to_string(Category c) {
  switch (c) {
    case Category::kQ1: return "Q1";
    case Category::kQ2: return "Q2";
    case Category::kQ3: return "Q3";
    case Category::kQ4: return "Q4";
    case Category::kTailHigh: return "tail_high";
    case Category::kTailLow: return "tail_low";
  }
  return "Q1";
}

Category category_from_string(std::string_view s) {
  for (Category c : kCategories) {
    if (to_string(c) == s || display_name(c) == s) return c;
  }
  fail(ErrorCode::kParse, fmt::format("unknown category '{}'", s));
}

std::string_view display_name(Category c) {
  switch (c) {
    case Category::kTailHigh: return "Tail High";
    case Category::kTailLow: return "Tail Low";
    default: return to_string(c);
  }
}

bool is_central(Category c) { return c != Category::kTailHigh && c != Category::kTailLow; }

void RunResultRecord::validate() const {
  if (case_id.empty()) fail(ErrorCode::kInvalidArgument, "record has an empty case_id");
  if (!(baseline_us > 0) || !(best_us > 0)) {
    fail(ErrorCode::kInvalidArgument,
         fmt::format("record {}: latencies must be positive", case_id));
  }
  if (rounds_used < 1) {
    fail(ErrorCode::kInvalidArgument, fmt::format("record {}: rounds_used < 1", case_id));
  }
  if (loc_original < 1 || loc_optimized < 1) {
    fail(ErrorCode::kInvalidArgument, fmt::format("record {}: LOC must be >= 1", case_id));
  }
  if (llm_calls < 0 || api_cost_usd < 0) {
    fail(ErrorCode::kInvalidArgument, fmt::format("record {}: negative cost fields", case_id));
  }
}

void to_json(json& j, const RunResultRecord& r) {
  j = json{{"case_id", r.case_id},
           {"category", to_string(r.category)},
           {"baseline_us", r.baseline_us},
           {"best_us", r.best_us},
           {"rounds_used", r.rounds_used},
           {"success", r.success},
           {"loc_original", r.loc_original},
           {"loc_optimized", r.loc_optimized},
           {"llm_calls", r.llm_calls},
           {"api_cost_usd", r.api_cost_usd}};
}

void from_json(const json& j, RunResultRecord& r) {
  j.at("case_id").get_to(r.case_id);
  r.category = category_from_string(j.at("category").get<std::string>());
  j.at("baseline_us").get_to(r.baseline_us);
  j.at("best_us").get_to(r.best_us);
  j.at("rounds_used").get_to(r.rounds_used);
  j.at("success").get_to(r.success);
  j.at("loc_original").get_to(r.loc_original);
  j.at("loc_optimized").get_to(r.loc_optimized);
  r.llm_calls = j.value("llm_calls", 0);
  r.api_cost_usd = j.value("api_cost_usd", 0.0);
}

void append_ledger(const fs::path& path, const RunResultRecord& record) {
  record.validate();
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) fail(ErrorCode::kIo, fmt::format("cannot open ledger '{}'", path.string()));
  out << json(record).dump() << '\n';
  if (!out) fail(ErrorCode::kIo, fmt::format("cannot append to ledger '{}'", path.string()));
}

std::vector<RunResultRecord> read_ledger(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, fmt::format("cannot read ledger '{}'", path.string()));
  std::vector<RunResultRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      RunResultRecord r = json::parse(line).get<RunResultRecord>();
      r.validate();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      fail(ErrorCode::kParse,
           fmt::format("{}:{}: malformed ledger record: {}", path.string(), line_no, e.what()));
    } catch (const Error& e) {
      fail(ErrorCode::kParse, fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
  }
  return records;
}

std::vector<RunResultRecord> exclude_cases(std::vector<RunResultRecord> records,
                                           const std::set<std::string>& excluded) {
  std::erase_if(records, [&](const RunResultRecord& r) { return excluded.count(r.case_id) > 0; });
  return records;
}

// ---------------------------------------------------------------------------

namespace {

SummaryRow summarize(std::string label, const std::vector<const RunResultRecord*>& rows) {
  SummaryRow out;
  out.label = std::move(label);
  out.n_kernels = static_cast<int>(rows.size());
  double sum_success = 0;
  double sum_log_success = 0;
  double sum_all = 0;
  for (const RunResultRecord* r : rows) {
    const double s = r->speedup();
    sum_all += s;
    if (r->success) {
      ++out.n_success;
      sum_success += s;
      sum_log_success += std::log(s);
    }
  }
  if (out.n_kernels > 0) {
    out.success_rate = static_cast<double>(out.n_success) / out.n_kernels;
    out.avg_speedup_overall = sum_all / out.n_kernels;
  }
  if (out.n_success > 0) {
    out.avg_speedup_on_success = sum_success / out.n_success;
    out.geomean_speedup_on_success = std::exp(sum_log_success / out.n_success);
  }
  return out;
}

std::vector<double> successful_speedups(const std::vector<RunResultRecord>& records) {
  std::vector<double> out;
  for (const auto& r : records) {
    if (r.success) out.push_back(r.speedup());
  }
  return out;
}

}  // namespace

SummaryTable aggregate(const std::vector<RunResultRecord>& records) {
  if (records.empty()) fail(ErrorCode::kInvalidArgument, "aggregate requires at least one record");
  SummaryTable table;
  std::vector<const RunResultRecord*> all;
  std::vector<const RunResultRecord*> central;
  for (const auto& r : records) {
    all.push_back(&r);
    if (is_central(r.category)) central.push_back(&r);
  }
  for (Category c : kCategories) {
    std::vector<const RunResultRecord*> rows;
    for (const auto& r : records) {
      if (r.category == c) rows.push_back(&r);
    }
    if (!rows.empty()) table.categories.push_back(summarize(std::string(display_name(c)), rows));
  }
  table.central = summarize("Central", central);
  table.overall = summarize("Overall", all);
  return table;
}

Histogram speedup_histogram(const std::vector<RunResultRecord>& records, double bin_width,
                            double cap, double origin) {
  if (!(bin_width > 0)) fail(ErrorCode::kInvalidArgument, "bin width must be positive");
  Histogram h;
  h.cap = cap;
  std::map<long long, int> counts;
  for (double s : successful_speedups(records)) {
    if (s > cap) {
      ++h.excluded;
      continue;
    }
    auto idx = static_cast<long long>(std::floor((s - origin) / bin_width));
    // Correct for rounding in the division so edges land in the upper bin.
    while (s < origin + static_cast<double>(idx) * bin_width) --idx;
    while (s >= origin + static_cast<double>(idx + 1) * bin_width) ++idx;
    ++counts[idx];
  }
  if (counts.empty()) return h;
  for (long long i = counts.begin()->first; i <= counts.rbegin()->first; ++i) {
    auto it = counts.find(i);
    h.bins.push_back({origin + static_cast<double>(i) * bin_width,
                      origin + static_cast<double>(i + 1) * bin_width,
                      it == counts.end() ? 0 : it->second});
  }
  return h;
}

std::vector<CdfPoint> speedup_cdf(const std::vector<RunResultRecord>& records) {
  std::vector<double> s = successful_speedups(records);
  std::sort(s.begin(), s.end());
  std::vector<CdfPoint> points;
  const double n = static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    while (j < s.size() && s[j] == s[i]) ++j;
    points.push_back({s[i], static_cast<double>(j) / n, static_cast<double>(s.size() - i) / n});
    i = j;
  }
  return points;
}

double fraction_at_least(const std::vector<RunResultRecord>& records, double threshold) {
  const std::vector<double> s = successful_speedups(records);
  if (s.empty()) fail(ErrorCode::kInvalidArgument, "no successful records");
  const auto n = std::count_if(s.begin(), s.end(), [&](double v) { return v >= threshold; });
  return static_cast<double>(n) / static_cast<double>(s.size());
}

std::vector<RoundsRow> success_by_rounds(const std::vector<RunResultRecord>& records) {
  std::map<int, RoundsRow> rows;
  for (const auto& r : records) {
    RoundsRow& row = rows[r.rounds_used];
    row.rounds = r.rounds_used;
    ++row.n_attempted;
    if (r.success) ++row.n_success;
  }
  std::vector<RoundsRow> out;
  for (auto& [rounds, row] : rows) {
    row.rate = static_cast<double>(row.n_success) / row.n_attempted;
    out.push_back(row);
  }
  return out;
}

LengthRatioStats length_ratio_stats(const std::vector<RunResultRecord>& records) {
  LengthRatioStats stats;
  if (records.empty()) return stats;
  for (const auto& r : records) {
    if (r.loc_original < 1 || r.loc_optimized < 1) {
      fail(ErrorCode::kInvalidArgument, fmt::format("record {}: LOC must be >= 1", r.case_id));
    }
    stats.ratios.push_back(r.length_ratio());
  }
  stats.median = aggregate(stats.ratios, Aggregator::kMedian);
  const auto expanded =
      std::count_if(stats.ratios.begin(), stats.ratios.end(), [](double v) { return v > 1.0; });
  stats.expansion_fraction = static_cast<double>(expanded) / static_cast<double>(stats.ratios.size());
  return stats;
}

// ---------------------------------------------------------------------------

std::vector<double> average_ranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

SpearmanResult spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) {
    fail(ErrorCode::kStatistics,
         fmt::format("series lengths differ ({} vs {})", xs.size(), ys.size()));
  }
  if (xs.size() < 3) fail(ErrorCode::kStatistics, "spearman requires at least 3 pairs");
  auto constant = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(xs) || constant(ys)) {
    fail(ErrorCode::kStatistics, "spearman is undefined for a constant series");
  }
  const std::vector<double> rx = average_ranks(xs);
  const std::vector<double> ry = average_ranks(ys);
  SpearmanResult result;
  result.rho = std::clamp(pearson(rx, ry), -1.0, 1.0);
  const std::size_t n = xs.size();

  if (n <= kExactPermutationLimit) {
    result.method = PValueMethod::kExactPermutation;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<double> permuted(n);
    const double observed = std::abs(result.rho) - 1e-12;
    std::uint64_t extreme = 0;
    std::uint64_t total = 0;
    do {
      for (std::size_t i = 0; i < n; ++i) permuted[i] = ry[perm[i]];
      if (std::abs(pearson(rx, permuted)) >= observed) ++extreme;
      ++total;
    } while (std::next_permutation(perm.begin(), perm.end()));
    result.p_value = static_cast<double>(extreme) / static_cast<double>(total);
    return result;
  }

  result.method = PValueMethod::kTApproximation;
  const double df = static_cast<double>(n - 2);
  const double denom = 1.0 - result.rho * result.rho;
  if (denom <= 0) {
    result.p_value = 0;
    return result;
  }
  const double t = result.rho * std::sqrt(df / denom);
  boost::math::students_t dist(df);
  result.p_value = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))),
                              0.0, 1.0);
  return result;
}

// ---------------------------------------------------------------------------

namespace {

std::string opt(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : ""; }

std::string summary_csv(const SummaryTable& t) {
  std::string out =
      "category,n_kernels,n_success,success_rate,avg_speedup_on_success,"
      "geomean_speedup_on_success,avg_speedup_overall\n";
  auto row = [&](const SummaryRow& r) {
    out += fmt::format("{},{},{},{},{},{},{}\n", r.label, r.n_kernels, r.n_success,
                       r.success_rate, opt(r.avg_speedup_on_success),
                       opt(r.geomean_speedup_on_success), r.avg_speedup_overall);
  };
  for (const auto& r : t.categories) row(r);
  row(t.central);
  row(t.overall);
  return out;
}

std::string percent(double fraction) { return fmt::format("{:.1f}%", fraction * 100.0); }
std::string times(const std::optional<double>& v) {
  return v ? fmt::format("{:.2f}x", *v) : std::string("-");
}

struct Correlation {
  std::string name;
  std::string x;
  std::string y;
  std::optional<SpearmanResult> result;
  std::string note;
};

std::vector<Correlation> correlations(const std::vector<RunResultRecord>& records) {
  std::vector<double> rounds, ratio, speedup, loc;
  for (const auto& r : records) {
    rounds.push_back(r.rounds_used);
    ratio.push_back(r.length_ratio());
    speedup.push_back(r.speedup());
    loc.push_back(static_cast<double>(r.loc_original));
  }
  std::vector<Correlation> out{
      {"rounds_vs_length_ratio", "rounds_used", "length_ratio", std::nullopt, ""},
      {"length_ratio_vs_speedup", "length_ratio", "speedup", std::nullopt, ""},
      {"loc_vs_speedup", "loc_original", "speedup", std::nullopt, ""},
  };
  const std::vector<double>* series[][2] = {{&rounds, &ratio}, {&ratio, &speedup}, {&loc, &speedup}};
  for (std::size_t i = 0; i < out.size(); ++i) {
    try {
      out[i].result = spearman(*series[i][0], *series[i][1]);
    } catch (const Error& e) {
      out[i].note = e.what();
    }
  }
  return out;
}

}  // namespace

std::vector<fs::path> emit_report(const std::vector<RunResultRecord>& records,
                                  const fs::path& out_dir, const ReportOptions& options) {
  if (records.empty()) fail(ErrorCode::kInvalidArgument, "no records to report");
  const SummaryTable summary = aggregate(records);
  const Histogram hist = speedup_histogram(records, options.bin_width, options.cap, options.origin);
  const std::vector<CdfPoint> cdf = speedup_cdf(records);
  const std::vector<RoundsRow> rounds = success_by_rounds(records);
  const LengthRatioStats lengths = length_ratio_stats(records);
  const std::vector<Correlation> corr = correlations(records);

  std::vector<std::pair<std::string, std::string>> files;
  files.emplace_back("summary.csv", summary_csv(summary));

  std::string text = "bin_lo,bin_hi,count\n";
  for (const auto& b : hist.bins) text += fmt::format("{},{},{}\n", b.lo, b.hi, b.count);
  text += fmt::format("# excluded_above_cap,{},{}\n", hist.cap, hist.excluded);
  files.emplace_back("hist.csv", text);

  text = "threshold,fraction_at_most,fraction_at_least\n";
  for (const auto& p : cdf) {
    text += fmt::format("{},{},{}\n", p.threshold, p.fraction_at_most, p.fraction_at_least);
  }
  files.emplace_back("cdf.csv", text);

  text = "rounds,n_attempted,n_success,rate\n";
  for (const auto& r : rounds) {
    text += fmt::format("{},{},{},{}\n", r.rounds, r.n_attempted, r.n_success, r.rate);
  }
  files.emplace_back("rounds.csv", text);

  text = "case_id,loc_original,loc_optimized,length_ratio,speedup\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    text += fmt::format("{},{},{},{},{}\n", r.case_id, r.loc_original, r.loc_optimized,
                        lengths.ratios[i], r.speedup());
  }
  files.emplace_back("length.csv", text);

  text = "name,x,y,n,rho,p_value,method,note\n";
  for (const auto& c : corr) {
    if (c.result) {
      text += fmt::format("{},{},{},{},{},{},{},\n", c.name, c.x, c.y, records.size(),
                          c.result->rho, c.result->p_value,
                          c.result->method == PValueMethod::kExactPermutation ? "exact_permutation"
                                                                              : "t_approximation");
    } else {
      text += fmt::format("{},{},{},{},,,,\"{}\"\n", c.name, c.x, c.y, records.size(), c.note);
    }
  }
  files.emplace_back("corr.csv", text);

  text = "Performance by kernel length category\n";
  text += fmt::format("{:<10} {:>9} {:>13} {:>12} {:>12}\n", "Cat.", "# Kernels", "Success Rate",
                      "Avg. Speedup", "Geo. Mean");
  auto table_row = [&](const SummaryRow& r) {
    text += fmt::format("{:<10} {:>9} {:>13} {:>12} {:>12}\n", r.label, r.n_kernels,
                        percent(r.success_rate), times(r.avg_speedup_on_success),
                        times(r.geomean_speedup_on_success));
  };
  for (const auto& r : summary.categories) table_row(r);
  table_row(summary.central);
  table_row(summary.overall);
  text += "(avg. speedup over successful kernels; central and overall rows are unweighted)\n\n";
  text += fmt::format("Average speedup over all kernels (failures at achieved ratio): {:.2f}x\n",
                      summary.overall.avg_speedup_overall);
  if (!cdf.empty()) {
    text += fmt::format("Successful kernels reaching >= 1.2x: {}\n",
                        percent(fraction_at_least(records, 1.2)));
    text += fmt::format("Successful kernels reaching >= 1.5x: {}\n",
                        percent(fraction_at_least(records, 1.5)));
  }
  text += fmt::format("Speedups above {}x excluded from histogram: {}\n", hist.cap, hist.excluded);
  text += fmt::format("Median length ratio: {:.2f}x; expanded kernels: {}\n", lengths.median,
                      percent(lengths.expansion_fraction));
  for (const auto& c : corr) {
    if (c.result) {
      text += fmt::format("Spearman {} vs {}: rho = {:.2f}, p = {:.2f}\n", c.x, c.y,
                          c.result->rho, c.result->p_value);
    } else {
      text += fmt::format("Spearman {} vs {}: n/a ({})\n", c.x, c.y, c.note);
    }
  }
  double cost = 0;
  int calls = 0;
  for (const auto& r : records) {
    cost += r.api_cost_usd;
    calls += r.llm_calls;
  }
  text += fmt::format("LLM calls: {}; average API cost per kernel: ${:.2f}\n", calls,
                      cost / static_cast<double>(records.size()));
  files.emplace_back("report.txt", text);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) {
    fail(ErrorCode::kIo, fmt::format("cannot create '{}': {}", out_dir.string(), ec.message()));
  }
  std::vector<fs::path> written;
  for (const auto& [name, contents] : files) {
    const fs::path p = out_dir / name;
    write_text_file(p.string(), contents);
    written.push_back(p);
  }
  return written;
}

}  // namespace proftune
