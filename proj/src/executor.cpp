#include "proftune/executor.hpp"

#include <system_error>

#include <fmt/format.h>

namespace proftune {

namespace fs = std::filesystem;

std::string_view to_string(JobMode m) {
  switch (m) {
    case JobMode::kBuild: return "build";
    case JobMode::kCorrectness: return "correctness";
    case JobMode::kPerf: return "perf";
  }
  return "build";
}

JobMode job_mode_from_string(std::string_view s) {
  if (s == "build") return JobMode::kBuild;
  if (s == "correctness") return JobMode::kCorrectness;
  if (s == "perf") return JobMode::kPerf;
  fail(ErrorCode::kParse, fmt::format("unknown job mode '{}'", s));
}

void to_json(json& j, const RunnerJob& job) {
  j = json{{"job_id", job.job_id},
           {"mode", to_string(job.mode)},
           {"kernel_path", job.kernel_path},
           {"test_path", job.test_path},
           {"range_label", job.range_label},
           {"warmups", job.warmups},
           {"iterations", job.iterations}};
}

void from_json(const json& j, RunnerJob& job) {
  j.at("job_id").get_to(job.job_id);
  job.mode = job_mode_from_string(j.at("mode").get<std::string>());
  j.at("kernel_path").get_to(job.kernel_path);
  j.at("test_path").get_to(job.test_path);
  job.range_label = j.value("range_label", std::string(kDefaultRangeLabel));
  job.warmups = j.value("warmups", kWarmupIterations);
  job.iterations = j.value("iterations", kTimedIterations);
}

void to_json(json& j, const RunnerReply& reply) {
  j = json{{"job_id", reply.job_id},
           {"status", to_string(reply.status)},
           {"latencies_ms", reply.latencies_ms ? json(*reply.latencies_ms) : json(nullptr)},
           {"logs", reply.logs},
           {"outputs_digest", reply.outputs_digest ? json(*reply.outputs_digest) : json(nullptr)}};
}

void from_json(const json& j, RunnerReply& reply) {
  j.at("job_id").get_to(reply.job_id);
  reply.status = run_status_from_string(j.at("status").get<std::string>());
  reply.latencies_ms.reset();
  if (j.contains("latencies_ms") && !j.at("latencies_ms").is_null()) {
    reply.latencies_ms = j.at("latencies_ms").get<std::vector<double>>();
  }
  reply.logs = j.value("logs", std::string());
  reply.outputs_digest.reset();
  if (j.contains("outputs_digest") && !j.at("outputs_digest").is_null()) {
    reply.outputs_digest = j.at("outputs_digest").get<std::string>();
  }
}

std::string encode_job(const RunnerJob& job) { return json(job).dump(); }

RunnerReply decode_reply(std::string_view line) {
  try {
    return json::parse(line).get<RunnerReply>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kProtocol, fmt::format("malformed runner reply: {}", e.what()));
  } catch (const Error& e) {
    fail(ErrorCode::kProtocol, fmt::format("malformed runner reply: {}", e.what()));
  }
}

// ---------------------------------------------------------------------------

RunnerProcess::RunnerProcess(Options options) : options_(std::move(options)) {
  if (options_.command.empty()) fail(ErrorCode::kConfig, "runner command is empty");
  std::error_code ec;
  fs::create_directories(options_.work_dir, ec);
  if (ec) {
    fail(ErrorCode::kIo, fmt::format("cannot create work dir '{}': {}",
                                     options_.work_dir.string(), ec.message()));
  }
}

fs::path RunnerProcess::materialize(const KernelVariant& kernel) const {
  const fs::path path =
      options_.work_dir / fmt::format("{}_r{}_{}_{}{}", kernel.case_id(), kernel.round(),
                                      to_string(kernel.provenance()),
                                      digest_hex(kernel.source()), options_.kernel_extension);
  if (!fs::exists(path)) write_text_file(path.string(), kernel.source());
  return path;
}

RunnerReply RunnerProcess::execute(const KernelVariant& kernel, RunnerJob job) {
  job.kernel_path = materialize(kernel).string();
  job.job_id.clear();
  return submit(job);
}

RunnerReply RunnerProcess::submit(const RunnerJob& prepared) {
  RunnerJob job = prepared;
  if (job.job_id.empty()) job.job_id = fmt::format("job-{}", next_job_++);
  if (!child_) child_ = std::make_unique<ChildProcess>(options_.command);
  child_->write_line(encode_job(job));
  auto line = child_->read_line();
  if (!line) {
    const int status = child_->wait();
    child_.reset();
    fail(ErrorCode::kInfrastructure,
         fmt::format("runner exited (status {}) before replying to {}", status, job.job_id));
  }
  RunnerReply reply;
  try {
    reply = decode_reply(*line);
  } catch (const Error& e) {
    fail(ErrorCode::kInfrastructure, e.what());
  }
  if (reply.job_id != job.job_id) {
    fail(ErrorCode::kInfrastructure, fmt::format("runner replied to '{}' while '{}' was pending",
                                                 reply.job_id, job.job_id));
  }
  return reply;
}

int RunnerProcess::shutdown() {
  if (!child_) return 0;
  const int status = child_->wait();
  child_.reset();
  return status;
}

// ---------------------------------------------------------------------------

RunnerReply SimulatedExecutor::execute(const KernelVariant& kernel, RunnerJob job) {
  ++jobs_executed_;
  RunnerReply reply;
  reply.job_id = job.job_id.empty() ? fmt::format("sim-{}", jobs_executed_) : job.job_id;
  const std::string& src = kernel.source();
  auto failed = [&](RunStatus status, std::string logs) {
    reply.status = status;
    reply.logs = std::move(logs);
    return reply;
  };

  if (src.find("SIM_COMPILE_ERROR") != std::string::npos) {
    return failed(RunStatus::kCompileFail,
                  "Traceback (most recent call last):\n  File \"kernel.py\", line 7\n"
                  "SyntaxError: invalid syntax (SIM_COMPILE_ERROR marker)");
  }
  SimKernelSpec spec;
  try {
    spec = sim_spec_from_source(src);
  } catch (const Error& e) {
    return failed(RunStatus::kCompileFail, fmt::format("CompilationError: {}", e.what()));
  }
  if (job.mode == JobMode::kBuild) {
    reply.status = RunStatus::kOk;
    reply.outputs_digest = digest_hex("build:" + src);
    return reply;
  }
  if (src.find("SIM_RUNTIME_ERROR") != std::string::npos) {
    return failed(RunStatus::kRuntimeFail,
                  "RuntimeError: CUDA error: an illegal memory access was encountered");
  }
  ProfileReport report;
  try {
    report = simulate_profile(spec);
  } catch (const Error& e) {
    return failed(RunStatus::kRuntimeFail,
                  fmt::format("RuntimeError: invalid launch configuration: {}", e.what()));
  }
  if (job.mode == JobMode::kCorrectness) {
    if (src.find("SIM_WRONG_OUTPUT") != std::string::npos) {
      return failed(RunStatus::kCorrectnessFail,
                    fmt::format("output mismatch against reference ({}): first divergence at "
                                "index 17: expected 0.841471, got 0.000000; 4096 of 16777216 "
                                "elements differ (atol=1e-3, rtol=1e-3)",
                                job.test_path));
    }
    reply.status = RunStatus::kOk;
    reply.outputs_digest = digest_hex("reference-outputs:" + job.test_path);
    return reply;
  }
  reply.status = RunStatus::kOk;
  reply.latencies_ms = std::vector<double>();
  for (int i = 0; i < job.iterations; ++i) {
    reply.latencies_ms->push_back(report.duration_us / 1000.0);
  }
  reply.outputs_digest = digest_hex("reference-outputs:" + job.test_path);
  return reply;
}

// ---------------------------------------------------------------------------

BuildRunError::BuildRunError(RunStatus status, std::string logs)
    : Error(ErrorCode::kBuildRun,
            fmt::format("kernel run failed ({}): {}", to_string(status),
                        logs.substr(0, std::min<std::size_t>(logs.size(), 200)))),
      status_(status),
      logs_(std::move(logs)) {}

LatencyMeasurement run_timing_protocol(Executor& executor, const KernelVariant& kernel,
                                       const std::string& perf_test, std::string_view range_label,
                                       Aggregator aggregator) {
  RunnerJob job;
  job.mode = JobMode::kPerf;
  job.test_path = perf_test;
  job.range_label = std::string(range_label);
  job.warmups = kWarmupIterations;
  job.iterations = kTimedIterations;
  RunnerReply reply = executor.execute(kernel, job);
  if (reply.status != RunStatus::kOk) throw BuildRunError(reply.status, reply.logs);
  if (!reply.latencies_ms) fail(ErrorCode::kProtocol, "perf reply carries no latencies");
  std::vector<double> samples_us;
  samples_us.reserve(reply.latencies_ms->size());
  for (double ms : *reply.latencies_ms) samples_us.push_back(ms * 1000.0);
  return LatencyMeasurement::from_samples(std::move(samples_us), aggregator);
}

// ---------------------------------------------------------------------------

ProfileReport SimulatedProfiler::profile(const KernelVariant& kernel) {
  SimulatedExecutor executor;
  LatencyMeasurement latency = run_timing_protocol(executor, kernel, "simulated_perf");
  ProfileReport report = simulate_profile(sim_spec_from_source(kernel.source()));
  report.latency = std::move(latency);
  return report;
}

NcuProfiler::NcuProfiler(Options options, Executor& timing_executor, ProfilerGate& gate)
    : options_(std::move(options)), timing_executor_(timing_executor), gate_(gate) {
  if (options_.runner_command.empty()) fail(ErrorCode::kConfig, "runner command is empty");
  if (!is_valid_range_label(options_.range_label)) {
    fail(ErrorCode::kConfig, fmt::format("invalid range label '{}'", options_.range_label));
  }
}

ProfileReport NcuProfiler::profile(const KernelVariant& kernel) {
  auto guard = gate_.acquire();
  LatencyMeasurement latency = run_timing_protocol(timing_executor_, kernel, options_.perf_test,
                                                   options_.range_label, options_.aggregator);

  const fs::path export_base =
      options_.work_dir / fmt::format("{}_r{}_{}", kernel.case_id(), kernel.round(), ++runs_);
  ProfilerInvocation inv;
  inv.range_label = options_.range_label;
  inv.target_command = options_.runner_command;
  inv.extra_flags = options_.extra_flags;
  RunnerProcess profiled({build_ncu_command(inv, export_base.string()), options_.work_dir,
                          options_.kernel_extension});
  RunnerJob job;
  job.mode = JobMode::kPerf;
  job.test_path = options_.perf_test;
  job.range_label = options_.range_label;
  RunnerReply reply = profiled.execute(kernel, job);
  const int status = profiled.shutdown();
  if (reply.status != RunStatus::kOk) throw BuildRunError(reply.status, reply.logs);
  if (status != 0) {
    fail(ErrorCode::kInfrastructure, fmt::format("profiler exited with status {}", status));
  }

  CommandResult csv = run_command({"ncu", "--import", export_base.string() + ".ncu-rep", "--csv",
                                   "--page", "details"});
  if (csv.exit_status != 0) {
    fail(ErrorCode::kInfrastructure,
         fmt::format("report import exited with status {}", csv.exit_status));
  }
  ProfileReport report = parse_ncu_report(csv.stdout_text, ReportFormat::kCsv, options_.mapping);
  report.latency = std::move(latency);
  return report;
}

}  // namespace proftune
