#pragma once

#include <chrono>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "proftune/core.hpp"
#include "proftune/profiling.hpp"

namespace proftune {

// ---------------------------------------------------------------------------
// Prompts.

enum class PromptRole { kTestGenerator, kProposal, kRemediation, kRefineHint };

std::string_view to_string(PromptRole r);
PromptRole prompt_role_from_string(std::string_view s);

struct Prompt {
  PromptRole role = PromptRole::kProposal;
  std::string rendered_text;
  std::string context_digest;
};

// Expands {{name}} placeholders and {{?name}}...{{/name}} blocks (kept only
// when `name` is non-empty). Unknown placeholders throw kConfig.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars);

// One template per role. Defaults are compiled in from templates/*.tmpl; a
// directory override replaces the files it contains.
class TemplateSet {
 public:
  static TemplateSet defaults();
  static TemplateSet from_directory(const std::filesystem::path& dir);

  const std::string& get(PromptRole role) const;
  void set(PromptRole role, std::string text);

 private:
  std::map<PromptRole, std::string> templates_;
};

// Section headers every rendered prompt of a role must contain.
const std::vector<std::string>& required_sections(PromptRole role);

inline constexpr std::size_t kDefaultLogTail = 8000;

// Keeps the last `tail` characters behind a leading truncation marker.
std::string truncate_logs(std::string_view logs, std::size_t tail = kDefaultLogTail);

Prompt render_proposal_prompt(const HardwareProfile& hw, const KernelVariant& kernel,
                              const ProfileReport& report, std::string_view refine_block = {},
                              const TemplateSet& templates = TemplateSet::defaults());

Prompt render_remediation_prompt(const KernelVariant& kernel, std::string_view logs,
                                 std::size_t log_tail = kDefaultLogTail,
                                 const TemplateSet& templates = TemplateSet::defaults());

Prompt render_testgen_prompt(const KernelVariant& kernel, std::string_view existing_tests,
                             std::string_view range_label,
                             const TemplateSet& templates = TemplateSet::defaults());

// ---------------------------------------------------------------------------
// Refinement hints: a deterministic rule engine over report deltas.

enum class ClauseSource { kAbsolute, kDelta, kDirection };
enum class Comparator { kLess, kLessEqual, kGreater, kGreaterEqual };

struct HintClause {
  std::string metric;  // canonical name
  ClauseSource source = ClauseSource::kAbsolute;
  Comparator op = Comparator::kLess;
  double threshold = 0;                        // absolute / delta
  Direction direction = Direction::kNeutral;   // direction clauses
};

// Fires when every clause holds.
struct HintRule {
  std::string name;
  std::vector<HintClause> clauses;
  std::string hint_text;

  void validate() const;
};

std::vector<HintRule> default_hint_rules();
std::vector<HintRule> hint_rules_from_json(const json& j);

inline constexpr std::string_view kGenericHint =
    "No dominant bottleneck shift: keep the current structure and try a different "
    "tuning dimension (block shape, num_warps, num_stages, vectorization width).";

// Hint texts of the firing rules in rule order, one per line; kGenericHint when none fire.
std::string derive_refine_hint(const ProfileReport& prev, const ProfileReport& next,
                               const std::vector<HintRule>& rules,
                               const NeutralBands& bands = {});

// Block appended to the next proposal prompt.
Prompt render_refine_hint_prompt(const ProfileReport& prev, const ProfileReport& next,
                                 std::string_view hint, const NeutralBands& bands = {},
                                 const TemplateSet& templates = TemplateSet::defaults());

// ---------------------------------------------------------------------------
// Completion backends.

struct LlmResponse {
  std::string text;
  std::string backend_id;
  double latency_s = 0;
};

class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual LlmResponse complete(const Prompt& prompt) = 0;
  virtual std::string id() const = 0;
  virtual int calls() const = 0;
  virtual double cost_usd() const { return 0; }
};

inline LlmResponse complete(CompletionBackend& backend, const Prompt& prompt) {
  return backend.complete(prompt);
}

struct TranscriptEntry {
  PromptRole role = PromptRole::kProposal;
  std::string response_text;
};

// {"entries": [{"role": "proposal", "response_text": "..."}, ...]} or a bare array.
std::vector<TranscriptEntry> transcript_from_json(const json& j);
std::vector<TranscriptEntry> load_transcript(const std::filesystem::path& path);
json transcript_to_json(const std::vector<TranscriptEntry>& entries);

// Replays responses per role in order. Exhaustion throws kFixture.
class ScriptedBackend final : public CompletionBackend {
 public:
  explicit ScriptedBackend(std::vector<TranscriptEntry> transcript);

  LlmResponse complete(const Prompt& prompt) override;
  std::string id() const override { return "scripted"; }
  int calls() const override;
  int calls(PromptRole role) const;

 private:
  mutable std::mutex mutex_;
  std::map<PromptRole, std::deque<std::string>> queues_;
  std::map<PromptRole, int> sequence_;
  int calls_ = 0;
};

// OpenAI-style chat-completion endpoint. 429, 5xx and transport errors are
// transient and retried up to max_retries with linear backoff.
class HttpBackend final : public CompletionBackend {
 public:
  struct Options {
    std::string base_url;  // scheme://host[:port]
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string api_key_env = "PROFTUNE_API_KEY";
    double timeout_s = 600;
    int max_retries = 3;
    int retry_backoff_ms = 1000;
    int max_in_flight = 4;
    double usd_per_call = 0;
  };

  explicit HttpBackend(Options options);
  LlmResponse complete(const Prompt& prompt) override;
  std::string id() const override { return "http:" + options_.model; }
  int calls() const override;
  double cost_usd() const override;
  int attempts() const;

 private:
  Options options_;
  std::counting_semaphore<1024> in_flight_;
  mutable std::mutex mutex_;
  int calls_ = 0;
  int attempts_ = 0;
};

// ---------------------------------------------------------------------------

// Contents of the last fenced block; otherwise the whole text when it looks
// like kernel code. Throws kExtraction.
std::string extract_code_block(const LlmResponse& response);
std::string extract_code_block(std::string_view text);

}  // namespace proftune
