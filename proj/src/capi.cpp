#include "proftune/proftune.h"

#include <cstring>
#include <memory>
#include <set>
#include <string>

#include <fmt/format.h>

#include "proftune/analysis.hpp"
#include "proftune/bench.hpp"
#include "proftune/core.hpp"
#include "proftune/executor.hpp"
#include "proftune/llm.hpp"
#include "proftune/loop.hpp"
#include "proftune/profiling.hpp"
#include "proftune/trace_store.hpp"

using namespace proftune;
namespace fs = std::filesystem;

struct pt_corpus {
  IngestResult ingest;
};

struct pt_session {
  json config;
  LoopConfig loop;
  std::unique_ptr<CompletionBackend> backend;
  std::unique_ptr<Executor> executor;
  ProfilerMode mode = ProfilerMode::kSimulated;
  std::vector<std::string> runner_command;
  fs::path work_dir;
  fs::path trace_root;
  fs::path ledger;
  bool generate_tests = false;
  std::vector<std::string> ncu_flags;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
pt_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return PT_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return static_cast<pt_status>(static_cast<int>(e.code()));
  } catch (const json::exception& e) {
    g_last_error = e.what();
    return PT_PARSE;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PT_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return PT_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(const void* p, const char* name) {
  if (!p) fail(ErrorCode::kInvalidArgument, fmt::format("{} must not be NULL", name));
}

}  // namespace

extern "C" {

const char* pt_version(void) { return "0.1.0"; }

const char* pt_last_error(void) { return g_last_error.c_str(); }

const char* pt_status_name(pt_status status) {
  if (status == PT_OK) return "ok";
  if (status == PT_INTERNAL) return "internal";
  if (status >= PT_INVALID_ARGUMENT && status <= PT_BUILD_RUN) {
    return error_code_name(static_cast<ErrorCode>(status));
  }
  return "unknown";
}

void pt_free_string(char* s) { std::free(s); }

pt_status pt_compute_speedup(double baseline_us, double candidate_us, double* out) {
  return guarded([&] {
    require(out, "out");
    *out = compute_speedup(baseline_us, candidate_us);
  });
}

pt_status pt_classify_success(double speedup, double threshold, int* out) {
  return guarded([&] {
    require(out, "out");
    ArbiterThresholds t;
    t.success_threshold = threshold;
    t.validate();
    *out = classify_success(speedup, t) ? 1 : 0;
  });
}

pt_status pt_count_loc(const char* source, int64_t* out) {
  return guarded([&] {
    require(source, "source");
    require(out, "out");
    *out = count_loc(source);
  });
}

pt_status pt_parse_report(const char* text, const char* format, char** out_json) {
  return guarded([&] {
    require(text, "text");
    require(out_json, "out_json");
    const std::string f = format ? format : "auto";
    ReportFormat rf = ReportFormat::kAuto;
    if (f == "text") {
      rf = ReportFormat::kText;
    } else if (f == "csv") {
      rf = ReportFormat::kCsv;
    } else if (f != "auto") {
      fail(ErrorCode::kInvalidArgument, fmt::format("unknown report format '{}'", f));
    }
    *out_json = dup_string(json(parse_ncu_report(text, rf)).dump());
  });
}

pt_status pt_diff_reports(const char* prev_json, const char* next_json, char** out_json) {
  return guarded([&] {
    require(prev_json, "prev_json");
    require(next_json, "next_json");
    require(out_json, "out_json");
    const auto prev = json::parse(prev_json).get<ProfileReport>();
    const auto next = json::parse(next_json).get<ProfileReport>();
    json out = json::array();
    for (const auto& e : diff_reports(prev, next).entries) {
      out.push_back({{"metric", e.metric},
                     {"before", e.before},
                     {"after", e.after},
                     {"direction", to_string(e.direction)}});
    }
    *out_json = dup_string(out.dump());
  });
}

pt_status pt_build_ncu_command(const char* range_label, const char* target_json,
                               const char* export_path, char** out_json) {
  return guarded([&] {
    require(target_json, "target_json");
    require(export_path, "export_path");
    require(out_json, "out_json");
    ProfilerInvocation inv;
    if (range_label) inv.range_label = range_label;
    inv.target_command = json::parse(target_json).get<std::vector<std::string>>();
    *out_json = dup_string(json(build_ncu_command(inv, export_path)).dump());
  });
}

pt_status pt_corpus_open(const char* root, pt_corpus** out) {
  return guarded([&] {
    require(root, "root");
    require(out, "out");
    auto c = std::make_unique<pt_corpus>();
    c->ingest = ingest_corpus(root);
    *out = c.release();
  });
}

void pt_corpus_close(pt_corpus* corpus) { delete corpus; }

pt_status pt_corpus_size(const pt_corpus* corpus, size_t* out) {
  return guarded([&] {
    require(corpus, "corpus");
    require(out, "out");
    *out = corpus->ingest.cases.size();
  });
}

pt_status pt_corpus_skip_report(const pt_corpus* corpus, char** out) {
  return guarded([&] {
    require(corpus, "corpus");
    require(out, "out");
    *out = dup_string(skip_report(corpus->ingest));
  });
}

pt_status pt_corpus_stratification(const pt_corpus* corpus, char** out_json) {
  return guarded([&] {
    require(corpus, "corpus");
    require(out_json, "out_json");
    const Stratification s = stratify(corpus->ingest.cases);
    auto ids = [](const std::vector<CaseLoc>& v) {
      json a = json::array();
      for (const auto& c : v) a.push_back({{"case_id", c.case_id}, {"loc", c.loc}});
      return a;
    };
    json bins = json::array();
    for (const auto& b : s.central_bins) {
      bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"lo_closed", b.lo_closed},
                      {"members", ids(b.members)}});
    }
    *out_json = dup_string(json{{"p5", s.p5},
                                {"p95", s.p95},
                                {"central_bins", bins},
                                {"tail_low", ids(s.tail_low)},
                                {"tail_high", ids(s.tail_high)}}
                               .dump());
  });
}

pt_status pt_corpus_sample_subset(const pt_corpus* corpus, uint64_t seed, char** out_json) {
  return guarded([&] {
    require(corpus, "corpus");
    require(out_json, "out_json");
    *out_json = dup_string(json(sample_subset(stratify(corpus->ingest.cases), seed)).dump());
  });
}

pt_status pt_analyze_ledger(const char* ledger_path, const char* out_dir,
                            const char* options_json, char** out_json) {
  return guarded([&] {
    require(ledger_path, "ledger_path");
    require(out_dir, "out_dir");
    ReportOptions options;
    std::set<std::string> excluded;
    if (options_json && *options_json) {
      const json o = json::parse(options_json);
      options.bin_width = o.value("bin_width", options.bin_width);
      options.cap = o.value("cap", options.cap);
      options.origin = o.value("origin", options.origin);
      if (o.contains("exclude")) excluded = o.at("exclude").get<std::set<std::string>>();
    }
    const auto records = exclude_cases(read_ledger(ledger_path), excluded);
    emit_report(records, out_dir, options);
    if (out_json) {
      const SummaryTable t = aggregate(records);
      auto row = [](const SummaryRow& r) {
        json j{{"label", r.label},
               {"n_kernels", r.n_kernels},
               {"n_success", r.n_success},
               {"success_rate", r.success_rate},
               {"avg_speedup_overall", r.avg_speedup_overall}};
        j["avg_speedup_on_success"] =
            r.avg_speedup_on_success ? json(*r.avg_speedup_on_success) : json(nullptr);
        j["geomean_speedup_on_success"] =
            r.geomean_speedup_on_success ? json(*r.geomean_speedup_on_success) : json(nullptr);
        return j;
      };
      json cats = json::array();
      for (const auto& r : t.categories) cats.push_back(row(r));
      *out_json =
          dup_string(json{{"categories", cats}, {"central", row(t.central)},
                          {"overall", row(t.overall)}}
                         .dump());
    }
  });
}

pt_status pt_session_create(const char* config_json, pt_session** out) {
  return guarded([&] {
    require(config_json, "config_json");
    require(out, "out");
    auto s = std::make_unique<pt_session>();
    s->config = json::parse(config_json);
    const json& c = s->config;

    if (c.contains("thresholds")) s->loop.thresholds = c.at("thresholds").get<ArbiterThresholds>();
    s->loop.range_label = c.value("range_label", std::string(kDefaultRangeLabel));
    if (c.contains("templates_dir")) {
      s->loop.templates = TemplateSet::from_directory(c.at("templates_dir").get<std::string>());
    }
    if (c.contains("hint_rules")) {
      s->loop.hint_rules = hint_rules_from_json(
          json::parse(read_text_file(c.at("hint_rules").get<std::string>())));
    }
    s->mode = profiler_mode_from_string(c.value("profiler", std::string("simulated")));
    s->loop.profiler_mode = s->mode;
    s->work_dir = c.value("work_dir", (fs::temp_directory_path() / "proftune-work").string());
    s->trace_root = c.value("trace_root", std::string());
    s->ledger = c.value("ledger", std::string());
    s->generate_tests = c.value("generate_tests", false);
    s->runner_command = c.value("runner_command", std::vector<std::string>{});
    s->ncu_flags = c.value("ncu_flags", std::vector<std::string>{});

    const json backend = c.value("backend", json::object());
    const std::string kind = backend.value("kind", std::string("scripted"));
    if (kind == "scripted") {
      if (!backend.contains("transcript")) {
        fail(ErrorCode::kConfig, "scripted backend needs a transcript path");
      }
      s->backend = std::make_unique<ScriptedBackend>(
          load_transcript(backend.at("transcript").get<std::string>()));
    } else if (kind == "http") {
      HttpBackend::Options o;
      o.base_url = backend.at("base_url").get<std::string>();
      o.model = backend.at("model").get<std::string>();
      o.path = backend.value("path", o.path);
      o.api_key_env = backend.value("api_key_env", o.api_key_env);
      o.usd_per_call = backend.value("usd_per_call", o.usd_per_call);
      o.max_retries = backend.value("max_retries", o.max_retries);
      o.timeout_s = backend.value("timeout_s", o.timeout_s);
      s->backend = std::make_unique<HttpBackend>(o);
    } else {
      fail(ErrorCode::kConfig, fmt::format("unknown backend kind '{}'", kind));
    }
    s->loop.backend_id = s->backend->id();

    if (s->mode == ProfilerMode::kSimulated) {
      s->executor = std::make_unique<SimulatedExecutor>();
    } else {
      if (s->runner_command.empty()) {
        fail(ErrorCode::kConfig, "real profiler mode needs runner_command");
      }
      s->executor = std::make_unique<RunnerProcess>(
          RunnerProcess::Options{s->runner_command, s->work_dir, ".py"});
    }
    s->loop.validate();
    *out = s.release();
  });
}

void pt_session_destroy(pt_session* session) {
  if (!session) return;
  if (auto* runner = dynamic_cast<RunnerProcess*>(session->executor.get())) {
    try {
      runner->shutdown();
    } catch (...) {
    }
  }
  delete session;
}

pt_status pt_session_optimize_case(pt_session* session, const pt_corpus* corpus,
                                   const char* case_id, const char* category, char** out_json) {
  return guarded([&] {
    require(session, "session");
    require(corpus, "corpus");
    require(case_id, "case_id");
    require(out_json, "out_json");
    const std::string id = case_id;
    const KernelCase* kc = nullptr;
    for (const auto& c : corpus->ingest.cases) {
      if (c.case_id == id) kc = &c;
    }
    if (!kc) fail(ErrorCode::kInvalidArgument, fmt::format("unknown case '{}'", id));

    Category cat = Category::kQ1;
    if (category && *category) {
      cat = category_from_string(category);
    } else {
      const auto found = stratify(corpus->ingest.cases).category_of(id);
      if (!found) fail(ErrorCode::kInvalidArgument, fmt::format("case '{}' has no category", id));
      cat = *found;
    }

    CompletionBackend& backend = *session->backend;
    const int calls_before = backend.calls();
    const double cost_before = backend.cost_usd();

    TestSuite tests{kc->correctness_tests, kc->perf_tests};
    if (session->generate_tests) {
      std::string existing;
      for (const auto& p : kc->perf_tests) existing += read_text_file(p) + "\n";
      for (const auto& p : kc->correctness_tests) existing += read_text_file(p) + "\n";
      tests.perf.push_back(generate_perf_test(kc->kernel, existing, session->loop.range_label,
                                              backend, session->work_dir / "tests")
                               .string());
    }

    std::unique_ptr<Profiler> profiler;
    if (session->mode == ProfilerMode::kSimulated) {
      profiler = std::make_unique<SimulatedProfiler>();
    } else {
      if (tests.perf.empty()) {
        fail(ErrorCode::kPrecondition, fmt::format("case '{}' has no perf test", id));
      }
      NcuProfiler::Options o;
      o.runner_command = session->runner_command;
      o.work_dir = session->work_dir;
      o.perf_test = tests.perf.back();
      o.range_label = session->loop.range_label;
      o.extra_flags = session->ncu_flags;
      profiler = std::make_unique<NcuProfiler>(o, *session->executor, ProfilerGate::machine());
    }

    const BuildRunResult base = build_and_run(kc->kernel, tests, *session->executor,
                                              session->loop.range_label);
    if (!base.ok()) {
      fail(ErrorCode::kPrecondition,
           fmt::format("original kernel of '{}' fails ({}): {}", id, to_string(base.status),
                       base.logs));
    }
    const ProfileReport baseline = profiler->profile(kc->kernel);
    OptimizeResult result = optimize_kernel(kc->hardware, kc->kernel, baseline, session->loop,
                                            {backend, *session->executor, *profiler, tests, {}});

    const RunResultRecord record =
        make_run_record(result.trace, cat, session->loop.thresholds,
                        backend.calls() - calls_before, backend.cost_usd() - cost_before);
    json out = record;
    if (!session->trace_root.empty()) {
      out["trace_path"] = persist_trace(result.trace, session->trace_root).string();
    }
    if (!session->ledger.empty()) append_ledger(session->ledger, record);
    *out_json = dup_string(out.dump());
  });
}

}  // extern "C"
