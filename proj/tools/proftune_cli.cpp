// Command-line front end. Talks to the library only through proftune.h.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "proftune/proftune.h"

using json = nlohmann::json;

namespace {

int report_failure(pt_status st) {
  std::cerr << "error (" << pt_status_name(st) << "): " << pt_last_error() << "\n";
  return static_cast<int>(st);
}

std::string take(char* s) {
  std::string out = s ? s : "";
  pt_free_string(s);
  return out;
}

bool slurp(const std::string& path, std::string& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::ostringstream ss;
  ss << in.rdbuf();
  out = ss.str();
  return true;
}

struct CorpusHandle {
  pt_corpus* c = nullptr;
  ~CorpusHandle() { pt_corpus_close(c); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Profiling-guided kernel optimization toolkit"};
  app.require_subcommand(1);
  int rc = 0;

  // sample-subset
  std::string corpus;
  std::uint64_t seed = 0;
  bool as_json = false;
  auto* sample = app.add_subcommand("sample-subset", "Select the 36-case evaluation subset");
  sample->add_option("--corpus", corpus, "Corpus root")->required();
  sample->add_option("--seed", seed, "Sampling seed")->required();
  sample->add_flag("--json", as_json, "Print the selection as JSON");
  sample->callback([&] {
    CorpusHandle h;
    pt_status st = pt_corpus_open(corpus.c_str(), &h.c);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    char* out = nullptr;
    st = pt_corpus_sample_subset(h.c, seed, &out);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    const json sel = json::parse(take(out));
    if (as_json) {
      std::cout << sel.dump(2) << "\n";
      return;
    }
    std::cout << "seed " << sel.at("seed").get<std::uint64_t>() << "\n";
    for (const char* bin : {"Q1", "Q2", "Q3", "Q4"}) {
      for (const auto& id : sel.at("central").at(bin).at("case_ids")) {
        std::cout << bin << "\t" << id.get<std::string>() << "\n";
      }
    }
    for (const auto& id : sel.at("tail_low")) std::cout << "tail_low\t" << id.get<std::string>() << "\n";
    for (const auto& id : sel.at("tail_high")) std::cout << "tail_high\t" << id.get<std::string>() << "\n";
  });

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Scan a corpus and print the skip report");
  ingest->add_option("--corpus", corpus, "Corpus root")->required();
  ingest->callback([&] {
    CorpusHandle h;
    pt_status st = pt_corpus_open(corpus.c_str(), &h.c);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    size_t n = 0;
    pt_corpus_size(h.c, &n);
    char* skipped = nullptr;
    pt_corpus_skip_report(h.c, &skipped);
    std::cout << "ingested " << n << "\n" << take(skipped);
  });

  // stratify
  auto* strat = app.add_subcommand("stratify", "Print the LOC stratification as JSON");
  strat->add_option("--corpus", corpus, "Corpus root")->required();
  strat->callback([&] {
    CorpusHandle h;
    pt_status st = pt_corpus_open(corpus.c_str(), &h.c);
    char* out = nullptr;
    if (st == PT_OK) st = pt_corpus_stratification(h.c, &out);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    std::cout << json::parse(take(out)).dump(2) << "\n";
  });

  // parse-report
  std::string report_path;
  std::string format = "auto";
  auto* parse = app.add_subcommand("parse-report", "Parse a profiler report into JSON");
  parse->add_option("report", report_path, "Report file (text or CSV)")->required();
  parse->add_option("--format", format, "auto, text or csv")
      ->check(CLI::IsMember({"auto", "text", "csv"}));
  parse->callback([&] {
    std::string text;
    if (!slurp(report_path, text)) {
      std::cerr << "error: cannot read " << report_path << "\n";
      rc = 3;
      return;
    }
    char* out = nullptr;
    const pt_status st = pt_parse_report(text.c_str(), format.c_str(), &out);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    std::cout << json::parse(take(out)).dump(2) << "\n";
  });

  // ncu-command
  std::string label = "BIG_OP";
  std::string export_path;
  std::vector<std::string> target;
  auto* ncu = app.add_subcommand("ncu-command", "Print the profiler argv for a runner command");
  ncu->add_option("--label", label, "NVTX range label");
  ncu->add_option("--export", export_path, "Export path")->required();
  ncu->add_option("target", target, "Runner command")->required();
  ncu->callback([&] {
    char* out = nullptr;
    const pt_status st =
        pt_build_ncu_command(label.c_str(), json(target).dump().c_str(), export_path.c_str(), &out);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    std::string line;
    for (const auto& a : json::parse(take(out))) line += (line.empty() ? "" : " ") + a.get<std::string>();
    std::cout << line << "\n";
  });

  // analyze
  std::string ledger;
  std::string out_dir;
  std::vector<std::string> exclude;
  double cap = 10.0;
  double bin_width = 0.25;
  auto* analyze = app.add_subcommand("analyze", "Summaries, histogram, CDF and correlations");
  analyze->add_option("--ledger", ledger, "Results ledger (JSON lines)")->required();
  analyze->add_option("--out", out_dir, "Output directory")->required();
  analyze->add_option("--exclude", exclude, "Case ids to leave out");
  analyze->add_option("--cap", cap, "Histogram outlier cap");
  analyze->add_option("--bin-width", bin_width, "Histogram bin width");
  analyze->callback([&] {
    const json options{{"exclude", exclude}, {"cap", cap}, {"bin_width", bin_width}};
    char* out = nullptr;
    const pt_status st =
        pt_analyze_ledger(ledger.c_str(), out_dir.c_str(), options.dump().c_str(), &out);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    pt_free_string(out);
    std::string text;
    slurp(out_dir + "/report.txt", text);
    std::cout << text;
  });

  // optimize
  std::string case_id;
  std::string category;
  std::string config_path;
  std::string transcript;
  std::string profiler = "simulated";
  std::string trace_root;
  std::string work_dir;
  std::vector<std::string> runner_cmd;
  auto* optimize = app.add_subcommand("optimize", "Run the optimization loop on one case");
  optimize->add_option("--corpus", corpus, "Corpus root")->required();
  optimize->add_option("--case", case_id, "Case id")->required();
  optimize->add_option("--category", category, "Override the stratification category");
  optimize->add_option("--config", config_path, "Session config JSON");
  optimize->add_option("--transcript", transcript, "Scripted backend transcript");
  optimize->add_option("--profiler", profiler, "simulated or real")
      ->check(CLI::IsMember({"simulated", "real"}));
  optimize->add_option("--runner", runner_cmd, "Runner command (real profiler)");
  optimize->add_option("--work-dir", work_dir, "Scratch directory");
  optimize->add_option("--trace-root", trace_root, "Persist traces here");
  optimize->add_option("--ledger", ledger, "Append the result record here");
  optimize->callback([&] {
    json config = json::object();
    if (!config_path.empty()) {
      std::string text;
      if (!slurp(config_path, text)) {
        std::cerr << "error: cannot read " << config_path << "\n";
        rc = 3;
        return;
      }
      config = json::parse(text, nullptr, false);
      if (config.is_discarded()) {
        std::cerr << "error: " << config_path << " is not valid JSON\n";
        rc = 4;
        return;
      }
    }
    if (!transcript.empty()) config["backend"] = {{"kind", "scripted"}, {"transcript", transcript}};
    if (optimize->count("--profiler") || !config.contains("profiler")) config["profiler"] = profiler;
    if (!runner_cmd.empty()) config["runner_command"] = runner_cmd;
    if (!work_dir.empty()) config["work_dir"] = work_dir;
    if (!trace_root.empty()) config["trace_root"] = trace_root;
    if (!ledger.empty()) config["ledger"] = ledger;

    CorpusHandle h;
    pt_status st = pt_corpus_open(corpus.c_str(), &h.c);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    pt_session* session = nullptr;
    st = pt_session_create(config.dump().c_str(), &session);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    char* out = nullptr;
    st = pt_session_optimize_case(session, h.c, case_id.c_str(),
                                  category.empty() ? nullptr : category.c_str(), &out);
    pt_session_destroy(session);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    std::cout << json::parse(take(out)).dump(2) << "\n";
  });

  // speedup
  double baseline = 0;
  double candidate = 0;
  double threshold = 1.05;
  auto* speed = app.add_subcommand("speedup", "Speedup and success classification");
  speed->add_option("baseline_us", baseline)->required();
  speed->add_option("candidate_us", candidate)->required();
  speed->add_option("--threshold", threshold, "Success threshold");
  speed->callback([&] {
    double s = 0;
    int ok = 0;
    pt_status st = pt_compute_speedup(baseline, candidate, &s);
    if (st == PT_OK) st = pt_classify_success(s, threshold, &ok);
    if (st != PT_OK) {
      rc = report_failure(st);
      return;
    }
    std::printf("%.4f %s\n", s, ok ? "success" : "no-improvement");
  });

  CLI11_PARSE(app, argc, argv);
  return rc;
}
