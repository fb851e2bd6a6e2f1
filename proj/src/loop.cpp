#include "proftune/loop.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <system_error>

#include <fmt/format.h>

namespace proftune {

namespace fs = std::filesystem;

std::string_view to_string(ProfilerMode m) {
  return m == ProfilerMode::kReal ? "real" : "simulated";
}

ProfilerMode profiler_mode_from_string(std::string_view s) {
  if (s == "real") return ProfilerMode::kReal;
  if (s == "simulated") return ProfilerMode::kSimulated;
  fail(ErrorCode::kConfig, fmt::format("unknown profiler mode '{}'", s));
}

void LoopConfig::validate() const {
  thresholds.validate();
  if (!is_valid_range_label(range_label)) {
    fail(ErrorCode::kConfig, fmt::format("invalid range label '{}'", range_label));
  }
  if (backend_id.empty()) fail(ErrorCode::kConfig, "backend_id is empty");
  for (const auto& rule : hint_rules) rule.validate();
}

// ---------------------------------------------------------------------------

namespace {

BuildRunResult from_reply(const RunnerReply& reply, std::string_view what) {
  BuildRunResult r;
  r.status = reply.status;
  r.logs = reply.logs;
  if (!r.ok() && r.logs.empty()) {
    r.logs = fmt::format("{} reported {} without logs", what, to_string(reply.status));
  }
  return r;
}

}  // namespace

BuildRunResult build_and_run(const KernelVariant& kernel, const TestSuite& tests,
                             Executor& executor, std::string_view range_label) {
  RunnerJob job;
  job.mode = JobMode::kBuild;
  job.range_label = std::string(range_label);
  RunnerReply reply = executor.execute(kernel, job);
  if (reply.status != RunStatus::kOk) return from_reply(reply, "build");

  std::string digests;
  std::string logs = reply.logs;
  for (const std::string& test : tests.correctness) {
    job.mode = JobMode::kCorrectness;
    job.test_path = test;
    reply = executor.execute(kernel, job);
    if (reply.status != RunStatus::kOk) return from_reply(reply, test);
    if (!reply.outputs_digest) {
      fail(ErrorCode::kInfrastructure,
           fmt::format("correctness job for '{}' passed without an outputs digest", test));
    }
    digests += *reply.outputs_digest + '\n';
    if (!reply.logs.empty()) logs += (logs.empty() ? "" : "\n") + reply.logs;
  }
  BuildRunResult r;
  r.status = RunStatus::kOk;
  r.logs = std::move(logs);
  r.outputs_digest = digest_hex(digests);
  return r;
}

RemediationOutcome remediate(const KernelVariant& kernel, const BuildRunResult& result,
                             CompletionBackend& backend, Executor& executor,
                             const TestSuite& tests, int cap, std::size_t log_tail,
                             const TemplateSet& templates) {
  if (result.ok()) fail(ErrorCode::kPrecondition, "remediation requires a failing result");
  if (cap < 0) fail(ErrorCode::kInvalidArgument, "remediation cap must be >= 0");
  RemediationOutcome out{kernel, result, {}};
  for (int attempt = 0; attempt < cap; ++attempt) {
    RemediationAttempt a;
    a.prompt = render_remediation_prompt(out.kernel, out.result.logs, log_tail, templates)
                   .rendered_text;
    try {
      a.response = backend.complete({PromptRole::kRemediation, a.prompt, digest_hex(a.prompt)}).text;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kTransient && e.code() != ErrorCode::kFixture) throw;
      a.status = out.result.status;
      a.logs = fmt::format("backend failure: {}", e.what());
      out.attempts.push_back(std::move(a));
      break;
    }
    std::string code;
    try {
      code = extract_code_block(a.response);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kExtraction) throw;
      a.status = out.result.status;
      a.logs = fmt::format("extraction failure: {}", e.what());
      out.attempts.push_back(std::move(a));
      continue;
    }
    KernelVariant candidate(kernel.case_id(), kernel.round(), Provenance::kRemediation,
                            std::move(code));
    BuildRunResult r = build_and_run(candidate, tests, executor);
    a.kernel = candidate;
    a.status = r.status;
    a.logs = r.logs;
    out.attempts.push_back(std::move(a));
    out.kernel = std::move(candidate);
    out.result = std::move(r);
    if (out.result.ok()) break;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> round_gains(const OptimizationTrace& trace) {
  std::vector<double> gains;
  double best = trace.baseline_report.latency.aggregate_us;
  for (const RoundRecord& r : trace.rounds) {
    if (!r.report) {
      gains.push_back(-std::numeric_limits<double>::infinity());
      continue;
    }
    const double latency = r.report->latency.aggregate_us;
    gains.push_back(best / latency - 1.0);
    if (r.decision.accepted) best = latency;
  }
  return gains;
}

namespace {

struct FinishCheck {
  std::vector<std::string> reasons;
};

void check_cap_and_diminishing(FinishCheck& check, const std::vector<double>& previous_gains,
                               double current_gain, const ArbiterThresholds& t) {
  const int round = static_cast<int>(previous_gains.size()) + 1;
  if (round >= t.round_cap) {
    check.reasons.push_back(fmt::format("round cap reached (round {} of {})", round, t.round_cap));
  }
  if (round >= t.patience_rounds) {
    double best_gain = current_gain;
    for (int k = 1; k < t.patience_rounds; ++k) {
      best_gain = std::max(best_gain, previous_gains[previous_gains.size() - k]);
    }
    if (best_gain < t.diminish_epsilon) {
      check.reasons.push_back(fmt::format(
          "diminishing returns (best gain {} over the last {} rounds below {:.4f})",
          std::isfinite(best_gain) ? fmt::format("{:.4f}", best_gain) : std::string("none"),
          t.patience_rounds, t.diminish_epsilon));
    }
  }
}

Decision finish_or_continue(FinishCheck check, Decision d) {
  if (check.reasons.empty()) return d;
  d.kind = DecisionKind::kFinish;
  std::string joined;
  for (const auto& r : check.reasons) joined += (joined.empty() ? "" : "; ") + r;
  d.reason = d.reason.empty() ? "finish: " + joined : d.reason + "; finish: " + joined;
  return d;
}

}  // namespace

Decision arbiter(const ProfileReport& next, const ProfileReport& best,
                 const OptimizationTrace& trace_so_far, const ArbiterThresholds& t) {
  const double speedup = compute_speedup(best.latency.aggregate_us, next.latency.aggregate_us);
  Decision d;
  if (speedup >= t.accept_margin) {
    d.kind = DecisionKind::kAccept;
    d.accepted = true;
    d.reason = fmt::format("accept: {:.4f}x over best-so-far (margin {:.4f})", speedup,
                           t.accept_margin);
  } else {
    d.kind = DecisionKind::kContinue;
    d.reason = fmt::format("continue: {:.4f}x over best-so-far is below margin {:.4f}", speedup,
                           t.accept_margin);
  }

  FinishCheck check;
  check_cap_and_diminishing(check, round_gains(trace_so_far), speedup - 1.0, t);

  const auto noisy = [&](const ProfileReport& r) {
    return r.latency.spread_fraction() > t.robustness_spread;
  };
  if (noisy(next)) {
    int streak = 1;
    for (auto it = trace_so_far.rounds.rbegin();
         it != trace_so_far.rounds.rend() && streak < t.patience_rounds; ++it) {
      if (!it->report || !noisy(*it->report)) break;
      ++streak;
    }
    if (streak >= t.patience_rounds) {
      check.reasons.push_back(fmt::format(
          "latency spread above {:.2f} of the aggregate for {} consecutive rounds",
          t.robustness_spread, streak));
    }
  }
  return finish_or_continue(std::move(check), std::move(d));
}

Decision arbiter_failed_round(const OptimizationTrace& trace_so_far, const ArbiterThresholds& t) {
  FinishCheck check;
  check_cap_and_diminishing(check, round_gains(trace_so_far),
                            -std::numeric_limits<double>::infinity(), t);
  Decision d;
  d.kind = DecisionKind::kContinue;
  d.reason = "continue: round produced no runnable candidate";
  return finish_or_continue(std::move(check), std::move(d));
}

// ---------------------------------------------------------------------------

namespace {

bool is_backend_failure(const Error& e) {
  return e.code() == ErrorCode::kTransient || e.code() == ErrorCode::kFixture;
}

}  // namespace

OptimizeResult optimize_kernel(const HardwareProfile& hw, const KernelVariant& kernel,
                               const ProfileReport& baseline, const LoopConfig& cfg,
                               LoopDeps deps) {
  cfg.validate();
  hw.validate();
  try {
    baseline.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kConfig, fmt::format("baseline profile is invalid: {}", e.what()));
  }
  if (!(baseline.latency.aggregate_us > 0)) {
    fail(ErrorCode::kConfig, "baseline profile carries no latency measurement");
  }
  const ArbiterThresholds& t = cfg.thresholds;

  OptimizationTrace trace;
  trace.case_id = kernel.case_id();
  trace.baseline_variant = kernel;
  trace.baseline_report = baseline;
  trace.best_variant = kernel;
  trace.best_report = baseline;

  ProfileReport current = baseline;
  std::string refine_block;

  for (int round = 1;; ++round) {
    RoundRecord rec;
    rec.round = round;
    const Prompt prompt =
        render_proposal_prompt(hw, kernel, current, refine_block, cfg.templates);
    rec.proposal_prompt = prompt.rendered_text;
    rec.prompt_digest = digest_hex(prompt.rendered_text);

    std::optional<ProfileReport> next;
    try {
      rec.proposal_response = deps.backend.complete(prompt).text;
      rec.response_digest = digest_hex(rec.proposal_response);
      KernelVariant candidate(kernel.case_id(), round, Provenance::kProposal,
                              extract_code_block(rec.proposal_response));
      BuildRunResult res = build_and_run(candidate, deps.tests, deps.executor, cfg.range_label);
      if (!res.ok()) {
        RemediationOutcome fixed = remediate(candidate, res, deps.backend, deps.executor,
                                             deps.tests, t.remediation_cap, cfg.log_tail,
                                             cfg.templates);
        rec.remediations = std::move(fixed.attempts);
        candidate = std::move(fixed.kernel);
        res = std::move(fixed.result);
      }
      rec.kernel = candidate;
      rec.status = res.status;
      rec.build_log = res.logs;
      if (res.ok()) next = deps.profiler.profile(candidate);
    } catch (const BuildRunError& e) {
      rec.status = e.status();
      rec.build_log = fmt::format("profiling run failed: {}", e.logs());
    } catch (const Error& e) {
      if (!is_backend_failure(e) && e.code() != ErrorCode::kExtraction) throw;
      rec.status = RunStatus::kCompileFail;
      rec.build_log = fmt::format("{}: {}",
                                  e.code() == ErrorCode::kExtraction ? "extraction failure"
                                                                     : "backend failure",
                                  e.what());
    }

    if (next) {
      rec.report = next;
      rec.decision = arbiter(*next, trace.best_report, trace, t);
      if (rec.decision.accepted) {
        trace.best_variant = *rec.kernel;
        trace.best_report = *next;
      }
      rec.hint = derive_refine_hint(current, *next, cfg.hint_rules, cfg.bands);
      refine_block =
          render_refine_hint_prompt(current, *next, rec.hint, cfg.bands, cfg.templates)
              .rendered_text;
      current = *next;
    } else {
      rec.decision = arbiter_failed_round(trace, t);
    }

    const bool finished = rec.decision.kind == DecisionKind::kFinish;
    trace.rounds.push_back(std::move(rec));
    if (deps.on_round) deps.on_round(trace.rounds.back());
    if (finished) break;
  }
  return {trace.best_variant, trace.best_report, trace};
}

fs::path generate_perf_test(const KernelVariant& kernel, std::string_view existing_tests,
                            std::string_view range_label, CompletionBackend& backend,
                            const fs::path& out_dir, const TemplateSet& templates) {
  const Prompt prompt = render_testgen_prompt(kernel, existing_tests, range_label, templates);
  const std::string code = extract_code_block(backend.complete(prompt));
  if (code.find(range_label) == std::string::npos) {
    fail(ErrorCode::kExtraction,
         fmt::format("generated test does not open the '{}' range", range_label));
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) {
    fail(ErrorCode::kIo, fmt::format("cannot create '{}': {}", out_dir.string(), ec.message()));
  }
  const fs::path path = out_dir / fmt::format("{}_perf_generated.py", kernel.case_id());
  write_text_file(path.string(), code);
  return path;
}

RunResultRecord make_run_record(const OptimizationTrace& trace, Category category,
                                const ArbiterThresholds& thresholds, int llm_calls,
                                double api_cost_usd) {
  RunResultRecord r;
  r.case_id = trace.case_id;
  r.category = category;
  r.baseline_us = trace.baseline_report.latency.aggregate_us;
  r.best_us = trace.best_report.latency.aggregate_us;
  r.rounds_used = std::max<int>(1, static_cast<int>(trace.rounds.size()));
  r.success = classify_success(r.speedup(), thresholds);
  r.loc_original = trace.baseline_variant.loc();
  r.loc_optimized = trace.best_variant.loc();
  r.llm_calls = llm_calls;
  r.api_cost_usd = api_cost_usd;
  return r;
}

}  // namespace proftune
