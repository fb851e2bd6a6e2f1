#include "proftune/llm.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>

#include "embedded_templates.hpp"

namespace proftune {

namespace fs = std::filesystem;

std::string_view to_string(PromptRole r) {
  switch (r) {
    case PromptRole::kTestGenerator: return "test_generator";
    case PromptRole::kProposal: return "proposal";
    case PromptRole::kRemediation: return "remediation";
    case PromptRole::kRefineHint: return "refine_hint";
  }
  return "proposal";
}

PromptRole prompt_role_from_string(std::string_view s) {
  if (s == "test_generator") return PromptRole::kTestGenerator;
  if (s == "proposal") return PromptRole::kProposal;
  if (s == "remediation") return PromptRole::kRemediation;
  if (s == "refine_hint") return PromptRole::kRefineHint;
  fail(ErrorCode::kParse, fmt::format("unknown prompt role '{}'", s));
}

// ---------------------------------------------------------------------------

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  out.reserve(tmpl.size() * 2);
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const std::size_t open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    out.append(tmpl.substr(pos, open - pos));
    const std::size_t close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) {
      fail(ErrorCode::kConfig, fmt::format("unterminated placeholder at offset {}", open));
    }
    std::string_view tag = tmpl.substr(open + 2, close - open - 2);
    pos = close + 2;
    if (tag.starts_with("?")) {
      const std::string name(tag.substr(1));
      const std::string end_tag = "{{/" + name + "}}";
      const std::size_t end = tmpl.find(end_tag, pos);
      if (end == std::string_view::npos) {
        fail(ErrorCode::kConfig, fmt::format("block '{}' is not closed", name));
      }
      auto it = vars.find(name);
      if (it == vars.end()) fail(ErrorCode::kConfig, fmt::format("unknown placeholder '{}'", name));
      std::string_view body = tmpl.substr(pos, end - pos);
      if (body.starts_with("\n")) body.remove_prefix(1);
      if (!it->second.empty()) out += render_template(body, vars);
      pos = end + end_tag.size();
      if (pos < tmpl.size() && tmpl[pos] == '\n') ++pos;
      continue;
    }
    auto it = vars.find(std::string(tag));
    if (it == vars.end()) fail(ErrorCode::kConfig, fmt::format("unknown placeholder '{}'", tag));
    out += it->second;
  }
  return out;
}

namespace {

constexpr PromptRole kAllRoles[] = {PromptRole::kTestGenerator, PromptRole::kProposal,
                                    PromptRole::kRemediation, PromptRole::kRefineHint};

std::string template_file_name(PromptRole role) { return fmt::format("{}.tmpl", to_string(role)); }

std::string context_digest(PromptRole role, std::initializer_list<std::string_view> inputs) {
  std::string joined(to_string(role));
  for (std::string_view in : inputs) {
    joined.push_back('\x1f');
    joined.append(in);
  }
  return digest_hex(joined);
}

Prompt finish_prompt(PromptRole role, std::string text, std::string digest) {
  for (const auto& header : required_sections(role)) {
    if (text.find(header) == std::string::npos) {
      fail(ErrorCode::kConfig, fmt::format("{} template lacks required section '{}'",
                                           to_string(role), header));
    }
  }
  return Prompt{role, std::move(text), std::move(digest)};
}

std::string number(double v) { return fmt::format("{}", v); }

}  // namespace

TemplateSet TemplateSet::defaults() {
  TemplateSet set;
  set.templates_[PromptRole::kProposal] = std::string(embedded::kProposalTemplate);
  set.templates_[PromptRole::kRemediation] = std::string(embedded::kRemediationTemplate);
  set.templates_[PromptRole::kTestGenerator] = std::string(embedded::kTestGeneratorTemplate);
  set.templates_[PromptRole::kRefineHint] = std::string(embedded::kRefineHintTemplate);
  return set;
}

TemplateSet TemplateSet::from_directory(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    fail(ErrorCode::kConfig, fmt::format("template directory '{}' does not exist", dir.string()));
  }
  TemplateSet set = defaults();
  for (PromptRole role : kAllRoles) {
    const fs::path file = dir / template_file_name(role);
    if (fs::exists(file)) set.set(role, read_text_file(file.string()));
  }
  return set;
}

const std::string& TemplateSet::get(PromptRole role) const { return templates_.at(role); }

void TemplateSet::set(PromptRole role, std::string text) { templates_[role] = std::move(text); }

const std::vector<std::string>& required_sections(PromptRole role) {
  static const std::map<PromptRole, std::vector<std::string>> sections{
      {PromptRole::kProposal, {"## Hardware", "## Kernel Source", "## Profiler Report"}},
      {PromptRole::kRemediation, {"## Kernel Source", "## Diagnostic Logs"}},
      {PromptRole::kTestGenerator, {"## Kernel Source", "## Existing Tests", "## Profiling Range"}},
      {PromptRole::kRefineHint, {"## Profiler Delta", "## Refinement Hints"}},
  };
  return sections.at(role);
}

std::string truncate_logs(std::string_view logs, std::size_t tail) {
  if (logs.size() <= tail) return std::string(logs);
  return fmt::format("[... truncated {} leading characters ...]\n{}", logs.size() - tail,
                     logs.substr(logs.size() - tail));
}

Prompt render_proposal_prompt(const HardwareProfile& hw, const KernelVariant& kernel,
                              const ProfileReport& report, std::string_view refine_block,
                              const TemplateSet& templates) {
  if (kernel.source().empty() || kernel.loc() < 1) {
    fail(ErrorCode::kPrecondition, "proposal prompt requires a non-empty kernel source");
  }
  hw.validate();
  const std::map<std::string, std::string> vars{
      {"gpu_name", hw.gpu_name},
      {"sm_count", std::to_string(hw.sm_count)},
      {"clock_mhz", number(hw.clock_mhz)},
      {"memory_gib", number(hw.memory_gib)},
      {"l2_cache_kib", std::to_string(hw.l2_cache_kib)},
      {"shared_mem_per_sm_kib", std::to_string(hw.shared_mem_per_sm_kib)},
      {"dram_bandwidth_gbps", number(hw.dram_bandwidth_gbps)},
      {"case_id", kernel.case_id()},
      {"round", std::to_string(kernel.round())},
      {"loc", std::to_string(kernel.loc())},
      {"source", kernel.source()},
      {"duration_us", number(report.duration_us)},
      {"memory_throughput_pct", number(report.memory_throughput_pct)},
      {"sm_throughput_pct", number(report.compute_throughput_pct)},
      {"l2_throughput_pct", number(report.l2_throughput_pct)},
      {"achieved_occupancy_pct", number(report.achieved_occupancy_pct)},
      {"timed_iterations", std::to_string(report.latency.samples_us.size())},
      {"latency_us", number(report.latency.aggregate_us)},
      {"refine_block", std::string(refine_block)},
  };
  std::string text = render_template(templates.get(PromptRole::kProposal), vars);
  std::string digest = context_digest(
      PromptRole::kProposal,
      {json(hw).dump(), json(kernel).dump(), json(report).dump(), refine_block});
  return finish_prompt(PromptRole::kProposal, std::move(text), std::move(digest));
}

Prompt render_remediation_prompt(const KernelVariant& kernel, std::string_view logs,
                                 std::size_t log_tail, const TemplateSet& templates) {
  if (logs.empty()) fail(ErrorCode::kPrecondition, "remediation prompt requires diagnostic logs");
  const std::map<std::string, std::string> vars{
      {"case_id", kernel.case_id()},
      {"round", std::to_string(kernel.round())},
      {"provenance", std::string(to_string(kernel.provenance()))},
      {"source", kernel.source()},
      {"logs", truncate_logs(logs, log_tail)},
  };
  std::string text = render_template(templates.get(PromptRole::kRemediation), vars);
  std::string digest = context_digest(PromptRole::kRemediation, {json(kernel).dump(), logs});
  return finish_prompt(PromptRole::kRemediation, std::move(text), std::move(digest));
}

Prompt render_testgen_prompt(const KernelVariant& kernel, std::string_view existing_tests,
                             std::string_view range_label, const TemplateSet& templates) {
  if (!is_valid_range_label(range_label)) {
    fail(ErrorCode::kInvalidArgument,
         fmt::format("invalid range label '{}': must be non-empty without whitespace",
                     range_label));
  }
  const bool none = existing_tests.find_first_not_of(" \t\r\n") == std::string_view::npos;
  const std::map<std::string, std::string> vars{
      {"case_id", kernel.case_id()},
      {"source", kernel.source()},
      {"existing_tests", none ? std::string() : std::string(existing_tests)},
      {"no_existing_tests", none ? "(no existing tests)" : ""},
      {"range_label", std::string(range_label)},
  };
  std::string text = render_template(templates.get(PromptRole::kTestGenerator), vars);
  std::string digest =
      context_digest(PromptRole::kTestGenerator, {json(kernel).dump(), existing_tests, range_label});
  return finish_prompt(PromptRole::kTestGenerator, std::move(text), std::move(digest));
}

// ---------------------------------------------------------------------------

namespace {

Comparator comparator_from_string(std::string_view s) {
  if (s == "<") return Comparator::kLess;
  if (s == "<=") return Comparator::kLessEqual;
  if (s == ">") return Comparator::kGreater;
  if (s == ">=") return Comparator::kGreaterEqual;
  fail(ErrorCode::kConfig, fmt::format("unknown comparator '{}'", s));
}

bool compare(double v, Comparator op, double threshold) {
  switch (op) {
    case Comparator::kLess: return v < threshold;
    case Comparator::kLessEqual: return v <= threshold;
    case Comparator::kGreater: return v > threshold;
    case Comparator::kGreaterEqual: return v >= threshold;
  }
  return false;
}

HintClause absolute(std::string_view metric, Comparator op, double threshold) {
  return HintClause{std::string(metric), ClauseSource::kAbsolute, op, threshold,
                    Direction::kNeutral};
}

HintClause moved(std::string_view metric, Direction d) {
  return HintClause{std::string(metric), ClauseSource::kDirection, Comparator::kLess, 0, d};
}

}  // namespace

void HintRule::validate() const {
  if (hint_text.empty()) fail(ErrorCode::kConfig, fmt::format("hint rule '{}' has no text", name));
  for (const auto& c : clauses) {
    if (!is_canonical_metric(c.metric)) {
      fail(ErrorCode::kConfig, fmt::format("hint rule '{}' references non-canonical metric '{}'",
                                           name, c.metric));
    }
  }
}

std::vector<HintRule> default_hint_rules() {
  using metric::kAchievedOccupancy;
  using metric::kDuration;
  using metric::kMemoryThroughput;
  using metric::kSmThroughput;
  return {
      HintRule{"duration_regression",
               {moved(kDuration, Direction::kUp)},
               "The last change lengthened kernel duration; do not build on it and try a "
               "different strategy."},
      HintRule{"memory_bound",
               {absolute(kMemoryThroughput, Comparator::kLess, 60),
                absolute(kSmThroughput, Comparator::kLess, 10)},
               "memory-bound: remove intermediate expansion, improve coalescing"},
      HintRule{"low_occupancy",
               {absolute(kAchievedOccupancy, Comparator::kLess, 20)},
               "reduce register/shared-memory pressure to raise resident CTAs"},
      HintRule{"tail_effect",
               {absolute(kMemoryThroughput, Comparator::kLess, 40),
                absolute(kSmThroughput, Comparator::kLess, 40)},
               "Both memory and SM units are mostly idle: size the grid to full waves of "
               "resident CTAs to avoid partial-wave tail effects, and give each program more "
               "work."},
      HintRule{"memory_drop",
               {moved(kMemoryThroughput, Direction::kDown)},
               "Memory throughput dropped after the last change; restore coalesced, contiguous "
               "access."},
      HintRule{"bandwidth_roof",
               {absolute(kMemoryThroughput, Comparator::kGreaterEqual, 80)},
               "Close to the DRAM bandwidth roof: improve tiling or staging through shared "
               "memory to raise data reuse."},
  };
}

std::vector<HintRule> hint_rules_from_json(const json& j) {
  std::vector<HintRule> rules;
  try {
    for (const json& r : j) {
      HintRule rule;
      rule.name = r.value("name", std::string());
      r.at("hint").get_to(rule.hint_text);
      for (const json& c : r.at("when")) {
        HintClause clause;
        c.at("metric").get_to(clause.metric);
        const std::string source = c.value("source", std::string("absolute"));
        if (source == "absolute" || source == "delta") {
          clause.source = source == "absolute" ? ClauseSource::kAbsolute : ClauseSource::kDelta;
          clause.op = comparator_from_string(c.at("op").get<std::string>());
          c.at("value").get_to(clause.threshold);
        } else if (source == "direction") {
          clause.source = ClauseSource::kDirection;
          const std::string d = c.at("value").get<std::string>();
          if (d == "up") clause.direction = Direction::kUp;
          else if (d == "down") clause.direction = Direction::kDown;
          else if (d == "neutral") clause.direction = Direction::kNeutral;
          else fail(ErrorCode::kConfig, fmt::format("unknown direction '{}'", d));
        } else {
          fail(ErrorCode::kConfig, fmt::format("unknown clause source '{}'", source));
        }
        rule.clauses.push_back(std::move(clause));
      }
      rule.validate();
      rules.push_back(std::move(rule));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, fmt::format("malformed hint rules: {}", e.what()));
  }
  return rules;
}

std::string derive_refine_hint(const ProfileReport& prev, const ProfileReport& next,
                               const std::vector<HintRule>& rules, const NeutralBands& bands) {
  const ProfileDelta delta = diff_reports(prev, next, bands);
  std::string out;
  for (const HintRule& rule : rules) {
    const bool fires = std::all_of(rule.clauses.begin(), rule.clauses.end(),
                                   [&](const HintClause& c) {
                                     const DeltaEntry& e = delta.at(c.metric);
                                     switch (c.source) {
                                       case ClauseSource::kAbsolute:
                                         return compare(e.after, c.op, c.threshold);
                                       case ClauseSource::kDelta:
                                         return compare(e.after - e.before, c.op, c.threshold);
                                       case ClauseSource::kDirection:
                                         return e.direction == c.direction;
                                     }
                                     return false;
                                   });
    if (fires && !rule.clauses.empty()) {
      if (!out.empty()) out += '\n';
      out += "- " + rule.hint_text;
    }
  }
  return out.empty() ? "- " + std::string(kGenericHint) : out;
}

Prompt render_refine_hint_prompt(const ProfileReport& prev, const ProfileReport& next,
                                 std::string_view hint, const NeutralBands& bands,
                                 const TemplateSet& templates) {
  const ProfileDelta delta = diff_reports(prev, next, bands);
  std::string rows;
  for (const auto& e : delta.entries) {
    rows += fmt::format("| {} | {} | {} | {} |\n", e.metric, e.before, e.after,
                        to_string(e.direction));
  }
  if (!rows.empty()) rows.pop_back();
  const std::map<std::string, std::string> vars{
      {"delta_rows", rows},
      {"latency_before_us", number(prev.latency.aggregate_us)},
      {"latency_after_us", number(next.latency.aggregate_us)},
      {"hints", std::string(hint)},
  };
  std::string text = render_template(templates.get(PromptRole::kRefineHint), vars);
  std::string digest = context_digest(PromptRole::kRefineHint,
                                      {json(prev).dump(), json(next).dump(), hint});
  return finish_prompt(PromptRole::kRefineHint, std::move(text), std::move(digest));
}

// ---------------------------------------------------------------------------

std::vector<TranscriptEntry> transcript_from_json(const json& j) {
  const json& entries = j.is_object() ? j.at("entries") : j;
  if (!entries.is_array()) fail(ErrorCode::kFixture, "transcript entries must be an array");
  std::vector<TranscriptEntry> out;
  try {
    for (const json& e : entries) {
      out.push_back(TranscriptEntry{prompt_role_from_string(e.at("role").get<std::string>()),
                                    e.at("response_text").get<std::string>()});
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kFixture, fmt::format("malformed transcript: {}", e.what()));
  } catch (const Error& e) {
    fail(ErrorCode::kFixture, fmt::format("malformed transcript: {}", e.what()));
  }
  return out;
}

std::vector<TranscriptEntry> load_transcript(const fs::path& path) {
  try {
    return transcript_from_json(json::parse(read_text_file(path.string())));
  } catch (const json::exception& e) {
    fail(ErrorCode::kFixture, fmt::format("cannot parse transcript '{}': {}", path.string(),
                                          e.what()));
  }
}

json transcript_to_json(const std::vector<TranscriptEntry>& entries) {
  json arr = json::array();
  for (const auto& e : entries) {
    arr.push_back({{"role", to_string(e.role)}, {"response_text", e.response_text}});
  }
  return json{{"entries", arr}};
}

ScriptedBackend::ScriptedBackend(std::vector<TranscriptEntry> transcript) {
  for (auto& e : transcript) queues_[e.role].push_back(std::move(e.response_text));
}

LlmResponse ScriptedBackend::complete(const Prompt& prompt) {
  std::lock_guard lock(mutex_);
  ++calls_;
  const int seq = ++sequence_[prompt.role];
  auto& queue = queues_[prompt.role];
  if (queue.empty()) {
    fail(ErrorCode::kFixture, fmt::format("transcript exhausted: no {} response #{}",
                                          to_string(prompt.role), seq));
  }
  LlmResponse r{std::move(queue.front()), id(), 0.0};
  queue.pop_front();
  return r;
}

int ScriptedBackend::calls() const {
  std::lock_guard lock(mutex_);
  return calls_;
}

int ScriptedBackend::calls(PromptRole role) const {
  std::lock_guard lock(mutex_);
  auto it = sequence_.find(role);
  return it == sequence_.end() ? 0 : it->second;
}

// ---------------------------------------------------------------------------

HttpBackend::HttpBackend(Options options)
    : options_(std::move(options)), in_flight_(std::max(1, options_.max_in_flight)) {
  if (options_.base_url.empty()) fail(ErrorCode::kConfig, "HTTP backend requires base_url");
  if (options_.model.empty()) fail(ErrorCode::kConfig, "HTTP backend requires a model name");
  if (options_.max_in_flight < 1 || options_.max_in_flight > 1024) {
    fail(ErrorCode::kConfig, "max_in_flight must lie in [1, 1024]");
  }
}

LlmResponse HttpBackend::complete(const Prompt& prompt) {
  in_flight_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{in_flight_};

  const char* key = options_.api_key_env.empty() ? nullptr : std::getenv(options_.api_key_env.c_str());
  httplib::Headers headers;
  if (key && *key) headers.emplace("Authorization", fmt::format("Bearer {}", key));

  const json body{{"model", options_.model},
                  {"messages", json::array({{{"role", "user"}, {"content", prompt.rendered_text}}})}};
  const std::string payload = body.dump();
  const auto started = std::chrono::steady_clock::now();

  httplib::Client client(options_.base_url);
  const auto timeout = std::chrono::duration<double>(options_.timeout_s);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));

  std::string last_error;
  for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(options_.retry_backoff_ms * attempt));
    }
    {
      std::lock_guard lock(mutex_);
      ++attempts_;
    }
    auto res = client.Post(options_.path, headers, payload, "application/json");
    if (!res) {
      last_error = fmt::format("transport error: {}", httplib::to_string(res.error()));
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = fmt::format("HTTP {}", res->status);
      continue;
    }
    if (res->status != 200) {
      fail(ErrorCode::kInfrastructure,
           fmt::format("completion endpoint returned HTTP {}: {}", res->status,
                       res->body.substr(0, 500)));
    }
    std::string text;
    try {
      text = json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      fail(ErrorCode::kInfrastructure, fmt::format("malformed completion response: {}", e.what()));
    }
    {
      std::lock_guard lock(mutex_);
      ++calls_;
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return LlmResponse{std::move(text), id(), elapsed};
  }
  fail(ErrorCode::kTransient, fmt::format("completion failed after {} attempts: {}",
                                          options_.max_retries + 1, last_error));
}

int HttpBackend::calls() const {
  std::lock_guard lock(mutex_);
  return calls_;
}

int HttpBackend::attempts() const {
  std::lock_guard lock(mutex_);
  return attempts_;
}

double HttpBackend::cost_usd() const {
  std::lock_guard lock(mutex_);
  return calls_ * options_.usd_per_call;
}

// ---------------------------------------------------------------------------

namespace {

bool is_fence(std::string_view line) {
  std::size_t i = 0;
  while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
  return line.substr(i).starts_with("```");
}

constexpr std::string_view kCodeMarkers[] = {"@triton.jit", "@triton.autotune", "__global__",
                                             "import triton", "def ", "# sim-model:"};

}  // namespace

std::string extract_code_block(std::string_view text) {
  if (text.empty()) fail(ErrorCode::kExtraction, "empty response");
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    lines.push_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
  std::optional<std::string> last;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (!is_fence(lines[i])) continue;
    std::size_t j = i + 1;
    while (j < lines.size() && !is_fence(lines[j])) ++j;
    if (j == lines.size()) break;  // unterminated fence
    std::string block;
    for (std::size_t k = i + 1; k < j; ++k) {
      block.append(lines[k]);
      if (k + 1 < j) block.push_back('\n');
    }
    last = std::move(block);
    i = j;
  }
  if (last) return *last;
  for (std::string_view marker : kCodeMarkers) {
    if (text.find(marker) != std::string_view::npos) return std::string(text);
  }
  fail(ErrorCode::kExtraction, "response contains no fenced code block and no kernel code");
}

std::string extract_code_block(const LlmResponse& response) {
  return extract_code_block(response.text);
}

}  // namespace proftune
