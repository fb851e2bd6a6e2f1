#include "doctest.h"

#include <atomic>
#include <thread>

#include "httplib.h"
#include "proftune/llm.hpp"
#include "support.hpp"

using namespace proftune;
using testsupport::read_fixture;

namespace {

ProfileReport matmul_before() { return parse_ncu_report(read_fixture("reports/matmul_before.txt")); }

KernelVariant sample_kernel() {
  return KernelVariant::original("matmul", testsupport::sim_kernel(1024, 4));
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kInvalidArgument;
}

}  // namespace

TEST_CASE("render_template placeholders and conditional blocks") {
  CHECK(render_template("a {{x}} b", {{"x", "1"}}) == "a 1 b");
  CHECK(render_template("{{?x}}\nshown {{x}}\n{{/x}}\nend", {{"x", "y"}}) == "shown y\nend");
  CHECK(render_template("{{?x}}\nshown {{x}}\n{{/x}}\nend", {{"x", ""}}) == "end");
  CHECK(code_of([] { render_template("{{missing}}", {}); }) == ErrorCode::kConfig);
}

TEST_CASE("default templates carry their required sections and stay compact") {
  const auto set = TemplateSet::defaults();
  std::size_t lines = 0;
  for (auto role : {PromptRole::kProposal, PromptRole::kRemediation, PromptRole::kTestGenerator,
                    PromptRole::kRefineHint}) {
    const auto& text = set.get(role);
    for (const auto& s : required_sections(role)) CHECK(text.find(s) != std::string::npos);
    lines += std::count(text.begin(), text.end(), '\n');
  }
  CHECK(lines > 240);
  CHECK(lines < 360);
}

TEST_CASE("template directory overrides only the files present") {
  testsupport::TempDir dir;
  testsupport::write_file(dir / "remediation.tmpl",
                          "## Kernel Source\n{{source}}\n## Diagnostic Logs\n{{logs}}\n");
  const auto set = TemplateSet::from_directory(dir.path());
  const auto p = render_remediation_prompt(sample_kernel(), "boom", kDefaultLogTail, set);
  CHECK(p.rendered_text.starts_with("## Kernel Source\n# sim-model"));
  CHECK(set.get(PromptRole::kProposal) == TemplateSet::defaults().get(PromptRole::kProposal));

  // An override missing a required header is rejected at render time.
  testsupport::write_file(dir / "remediation.tmpl", "{{source}}\n{{logs}}\n");
  const auto broken = TemplateSet::from_directory(dir.path());
  CHECK(code_of([&] { render_remediation_prompt(sample_kernel(), "boom", kDefaultLogTail, broken); }) ==
        ErrorCode::kConfig);
  CHECK(code_of([&] { TemplateSet::from_directory(dir / "nope"); }) == ErrorCode::kConfig);
}

TEST_CASE("proposal prompt embeds hardware, source and report") {
  const auto hw = HardwareProfile::h100();
  const auto k = sample_kernel();
  const auto p = render_proposal_prompt(hw, k, matmul_before());
  CHECK(p.role == PromptRole::kProposal);
  CHECK(p.rendered_text.find("52.24") != std::string::npos);
  CHECK(p.rendered_text.find("849.5") != std::string::npos);
  CHECK(p.rendered_text.find("5.92") != std::string::npos);
  CHECK(p.rendered_text.find("50.04") != std::string::npos);
  CHECK(p.rendered_text.find("37.5") != std::string::npos);
  CHECK(p.rendered_text.find(k.source()) != std::string::npos);
  CHECK(p.rendered_text.find(hw.gpu_name) != std::string::npos);
  for (const char* direction : {"Tiling", "num_warps", "Vectorization", "Memory layout",
                                "Prefetching", "fusion", "splitting"}) {
    CHECK(p.rendered_text.find(direction) != std::string::npos);
  }
  CHECK(p.rendered_text.find("Feedback From The Previous Round") == std::string::npos);

  const auto again = render_proposal_prompt(hw, k, matmul_before());
  CHECK(again.rendered_text == p.rendered_text);
  CHECK(again.context_digest == p.context_digest);

  const auto refined = render_proposal_prompt(hw, k, matmul_before(), "- go faster");
  CHECK(refined.rendered_text.find("## Feedback From The Previous Round\n- go faster") !=
        std::string::npos);
  CHECK(refined.context_digest != p.context_digest);

  CHECK(code_of([&] { render_proposal_prompt(hw, KernelVariant::original("e", ""), matmul_before()); }) ==
        ErrorCode::kPrecondition);
}

TEST_CASE("remediation prompt embeds logs and truncates long ones") {
  const auto k = sample_kernel();
  const auto p = render_remediation_prompt(k, "SyntaxError: line 7");
  CHECK(p.rendered_text.find("SyntaxError: line 7") != std::string::npos);
  CHECK(p.rendered_text.find(k.source()) != std::string::npos);
  CHECK(render_remediation_prompt(k, "SyntaxError: line 7").rendered_text == p.rendered_text);
  CHECK(code_of([&] { render_remediation_prompt(k, ""); }) == ErrorCode::kPrecondition);

  std::string big(1 << 20, 'a');
  for (std::size_t i = 0; i < big.size(); i += 97) big[i] = '\n';
  big += "FINAL LINE: IndexError";
  const auto q = render_remediation_prompt(k, big);
  const std::string tail = big.substr(big.size() - kDefaultLogTail);
  CHECK(q.rendered_text.find(tail) != std::string::npos);
  CHECK(q.rendered_text.find(fmt::format("[... truncated {} leading characters ...]",
                                         big.size() - kDefaultLogTail)) != std::string::npos);
  CHECK(q.rendered_text.size() < 20000);
}

TEST_CASE("truncate_logs") {
  CHECK(truncate_logs("short", 10) == "short");
  CHECK(truncate_logs("0123456789", 10) == "0123456789");
  CHECK(truncate_logs("0123456789AB", 10) == "[... truncated 2 leading characters ...]\n23456789AB");
  for (std::size_t n = 0; n < 50; ++n) {
    const std::string s(n, 'x');
    const auto t = truncate_logs(s, 20);
    CHECK(t.ends_with(s.substr(s.size() > 20 ? s.size() - 20 : 0)));
  }
}

TEST_CASE("test generator prompt") {
  const auto k = sample_kernel();
  const auto p = render_testgen_prompt(k, "def test_small(): ...\n", "BIG_OP");
  CHECK(p.rendered_text.find("`BIG_OP`") != std::string::npos);
  CHECK(p.rendered_text.find("range_push(\"BIG_OP\")") != std::string::npos);
  CHECK(p.rendered_text.find("def test_small") != std::string::npos);
  CHECK(p.rendered_text.find("(no existing tests)") == std::string::npos);
  CHECK(render_testgen_prompt(k, "def test_small(): ...\n", "BIG_OP").rendered_text == p.rendered_text);

  const auto none = render_testgen_prompt(k, "  \n", "BIG_OP");
  CHECK(none.rendered_text.find("(no existing tests)") != std::string::npos);

  CHECK(code_of([&] { render_testgen_prompt(k, "", "BIG OP"); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { render_testgen_prompt(k, "", ""); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("refinement hints") {
  const auto rules = default_hint_rules();
  const auto r1 = parse_ncu_report(read_fixture("reports/bmm_bwd_round1.txt"));
  const auto hint = derive_refine_hint(r1, r1, rules);
  CHECK(hint.find("reduce register/shared-memory pressure to raise resident CTAs") !=
        std::string::npos);

  const auto before = matmul_before();
  const auto mb = derive_refine_hint(before, before, rules);
  CHECK(mb.find("memory-bound: remove intermediate expansion, improve coalescing") !=
        std::string::npos);

  // Delta-only rules on an unchanged report: nothing fires.
  std::vector<HintRule> delta_only;
  for (const auto& r : rules) {
    if (std::all_of(r.clauses.begin(), r.clauses.end(),
                    [](const HintClause& c) { return c.source == ClauseSource::kDirection; })) {
      delta_only.push_back(r);
    }
  }
  REQUIRE(delta_only.size() == 2);
  CHECK(derive_refine_hint(before, before, delta_only) == "- " + std::string(kGenericHint));

  // Duration regression fires first and memory_drop fires on the same pair.
  const auto r2 = parse_ncu_report(read_fixture("reports/bmm_bwd_round2.txt"));
  const auto regress = derive_refine_hint(r1, r2, rules);
  CHECK(regress.starts_with("- The last change lengthened kernel duration"));
  CHECK(regress.find("Memory throughput dropped") != std::string::npos);
}

TEST_CASE("empty rule list always yields the generic hint") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 100);
  for (int i = 0; i < 100; ++i) {
    const auto a = testsupport::report_with_latency(10, 1 + u(rng), u(rng), u(rng), u(rng), u(rng));
    const auto b = testsupport::report_with_latency(10, 1 + u(rng), u(rng), u(rng), u(rng), u(rng));
    CHECK(derive_refine_hint(a, b, {}) == "- " + std::string(kGenericHint));
  }
}

TEST_CASE("hint rules from JSON") {
  const json j = json::parse(R"([
    {"name": "occ", "when": [{"metric": "achieved_occupancy_pct", "op": "<", "value": 20}],
     "hint": "raise occupancy"},
    {"name": "slower", "when": [{"metric": "duration_us", "source": "direction", "value": "up"}],
     "hint": "slower"},
    {"name": "mem_gain", "when": [{"metric": "memory_throughput_pct", "source": "delta", "op": ">=", "value": 10}],
     "hint": "memory rose"}
  ])");
  const auto rules = hint_rules_from_json(j);
  REQUIRE(rules.size() == 3);
  const auto a = testsupport::report_with_latency(10, 100, 40, 50, 50, 10);
  const auto b = testsupport::report_with_latency(10, 120, 55, 50, 50, 30);
  CHECK(derive_refine_hint(a, b, rules) == "- slower\n- memory rose");
  CHECK(derive_refine_hint(b, a, rules) == "- raise occupancy");

  CHECK(code_of([] {
          hint_rules_from_json(json::parse(
              R"([{"when": [{"metric": "dram_bytes", "op": "<", "value": 1}], "hint": "x"}])"));
        }) == ErrorCode::kConfig);
  CHECK(code_of([] {
          hint_rules_from_json(json::parse(
              R"([{"when": [{"metric": "duration_us", "op": "!=", "value": 1}], "hint": "x"}])"));
        }) == ErrorCode::kConfig);
  CHECK(code_of([] { hint_rules_from_json(json::parse(R"([{"when": []}])")); }) ==
        ErrorCode::kConfig);
}

TEST_CASE("refine-hint block") {
  const auto r1 = parse_ncu_report(read_fixture("reports/bmm_bwd_round1.txt"));
  const auto r2 = parse_ncu_report(read_fixture("reports/bmm_bwd_round2.txt"));
  const auto p = render_refine_hint_prompt(r1, r2, "- do this");
  CHECK(p.rendered_text.find("| memory_throughput_pct | 71.6 | 56.5 | down |") != std::string::npos);
  CHECK(p.rendered_text.find("| achieved_occupancy_pct | 12.5 | 12.5 | neutral |") != std::string::npos);
  CHECK(p.rendered_text.find("## Refinement Hints\n- do this") != std::string::npos);
}

TEST_CASE("scripted backend replays per role") {
  ScriptedBackend b({{PromptRole::kProposal, "r1"},
                     {PromptRole::kRemediation, "fix1"},
                     {PromptRole::kProposal, "r2"}});
  const Prompt proposal{PromptRole::kProposal, "p", "d"};
  const Prompt remediation{PromptRole::kRemediation, "p", "d"};
  CHECK(complete(b, proposal).text == "r1");
  CHECK(complete(b, remediation).text == "fix1");
  CHECK(complete(b, proposal).text == "r2");
  CHECK(b.calls() == 3);
  CHECK(b.calls(PromptRole::kProposal) == 2);
  try {
    complete(b, proposal);
    FAIL("expected exhaustion");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kFixture);
    CHECK(std::string(e.what()).find("proposal response #3") != std::string::npos);
  }
}

TEST_CASE("transcript JSON round trip") {
  const std::vector<TranscriptEntry> entries{{PromptRole::kTestGenerator, "t"},
                                             {PromptRole::kRefineHint, "h"}};
  const auto j = transcript_to_json(entries);
  const auto back = transcript_from_json(j);
  REQUIRE(back.size() == 2);
  CHECK(back[0].role == PromptRole::kTestGenerator);
  CHECK(back[1].response_text == "h");
  CHECK(transcript_from_json(j.at("entries")).size() == 2);

  testsupport::TempDir dir;
  testsupport::write_file(dir / "t.json", j.dump());
  CHECK(load_transcript(dir / "t.json").size() == 2);
  testsupport::write_file(dir / "bad.json", "{not json");
  CHECK(code_of([&] { load_transcript(dir / "bad.json"); }) == ErrorCode::kFixture);
  CHECK(code_of([] { transcript_from_json(json::parse(R"([{"role": "oracle", "response_text": ""}])")); }) ==
        ErrorCode::kFixture);
}

TEST_CASE("extract_code_block") {
  CHECK(extract_code_block("here you go:\n```\nX\n```") == "X");
  CHECK(extract_code_block("a\n```python\nfirst\n```\nthen\n```python\nsecond\nline\n```\nbye") ==
        "second\nline");
  CHECK(code_of([] { extract_code_block("I could not find a way to speed this up."); }) ==
        ErrorCode::kExtraction);
  CHECK(code_of([] { extract_code_block(""); }) == ErrorCode::kExtraction);
  CHECK(extract_code_block("import triton\n@triton.jit\ndef k(): pass") ==
        "import triton\n@triton.jit\ndef k(): pass");
  // Unterminated fence falls back to the marker heuristic.
  CHECK(extract_code_block("```python\ndef k(): pass") == "```python\ndef k(): pass");
  CHECK(extract_code_block(LlmResponse{"```\nY\n```", "x", 0}) == "Y");
}

TEST_CASE("extract_code_block is idempotent on fenced output") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 100; ++i) {
    std::string code;
    for (std::uint64_t l = 0, n = 1 + rng() % 6; l < n; ++l) code += fmt::format("v{} = {}\n", l, rng() % 100);
    code.pop_back();
    const auto once = extract_code_block("prose\n```python\n" + code + "\n```\n");
    CHECK(once == code);
    CHECK(extract_code_block("```\n" + once + "\n```") == once);
  }
}

// ---------------------------------------------------------------------------

namespace {

struct LocalServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;

  LocalServer() = default;
  void start() {
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LocalServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
  HttpBackend::Options options() const {
    HttpBackend::Options o;
    o.base_url = fmt::format("http://127.0.0.1:{}", port);
    o.model = "test-model";
    o.api_key_env = "PROFTUNE_TEST_KEY";
    o.retry_backoff_ms = 1;
    o.timeout_s = 10;
    o.usd_per_call = 0.25;
    return o;
  }
};

std::string reply(const std::string& text) {
  return json{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", text}}}}})}}
      .dump();
}

}  // namespace

TEST_CASE("HTTP backend retries 429 then succeeds") {
  LocalServer s;
  std::atomic<int> hits{0};
  std::string seen_auth, seen_model, seen_content;
  s.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (++hits == 1) {
      res.status = 429;
      return;
    }
    seen_auth = req.get_header_value("Authorization");
    const auto body = json::parse(req.body);
    seen_model = body.at("model");
    seen_content = body.at("messages").at(0).at("content");
    res.set_content(reply("```\nok\n```"), "application/json");
  });
  s.start();
  ::setenv("PROFTUNE_TEST_KEY", "sekrit", 1);
  HttpBackend b(s.options());
  const auto r = b.complete(Prompt{PromptRole::kProposal, "hello", "d"});
  CHECK(r.text == "```\nok\n```");
  CHECK(r.backend_id == "http:test-model");
  CHECK(r.latency_s >= 0);
  CHECK(hits == 2);
  CHECK(b.attempts() == 2);
  CHECK(b.calls() == 1);
  CHECK(b.cost_usd() == doctest::Approx(0.25));
  CHECK(seen_auth == "Bearer sekrit");
  CHECK(seen_model == "test-model");
  CHECK(seen_content == "hello");
  ::unsetenv("PROFTUNE_TEST_KEY");
}

TEST_CASE("HTTP backend gives up after max retries") {
  LocalServer s;
  std::atomic<int> hits{0};
  s.server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 503;
  });
  s.start();
  auto o = s.options();
  o.max_retries = 2;
  HttpBackend b(o);
  CHECK(code_of([&] { b.complete(Prompt{PromptRole::kProposal, "x", "d"}); }) == ErrorCode::kTransient);
  CHECK(hits == 3);
  CHECK(b.calls() == 0);
}

TEST_CASE("HTTP backend: client errors and malformed bodies are not retried") {
  LocalServer s;
  std::atomic<int> hits{0};
  s.server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 401;
  });
  s.server.Post("/bad", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"choices\": []}", "application/json");
  });
  s.start();
  HttpBackend b(s.options());
  CHECK(code_of([&] { b.complete(Prompt{PromptRole::kProposal, "x", "d"}); }) ==
        ErrorCode::kInfrastructure);
  CHECK(hits == 1);
  auto o = s.options();
  o.path = "/bad";
  HttpBackend bad(o);
  CHECK(code_of([&] { bad.complete(Prompt{PromptRole::kProposal, "x", "d"}); }) ==
        ErrorCode::kInfrastructure);
}

TEST_CASE("HTTP backend: unreachable endpoint is transient") {
  int port;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  HttpBackend::Options o;
  o.base_url = fmt::format("http://127.0.0.1:{}", port);
  o.model = "m";
  o.max_retries = 1;
  o.retry_backoff_ms = 1;
  o.timeout_s = 2;
  HttpBackend b(o);
  CHECK(code_of([&] { b.complete(Prompt{PromptRole::kProposal, "x", "d"}); }) == ErrorCode::kTransient);
  CHECK(b.attempts() == 2);
}

TEST_CASE("HTTP backend bounds in-flight requests") {
  LocalServer s;
  std::atomic<int> inside{0}, peak{0};
  s.server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    const int now = ++inside;
    int seen = peak.load();
    while (now > seen && !peak.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
    --inside;
    res.set_content(reply("x"), "application/json");
  });
  s.start();
  auto o = s.options();
  o.max_in_flight = 2;
  HttpBackend b(o);
  std::vector<std::thread> threads;
  for (int i = 0; i < 6; ++i) {
    threads.emplace_back([&] { b.complete(Prompt{PromptRole::kProposal, "x", "d"}); });
  }
  for (auto& t : threads) t.join();
  CHECK(b.calls() == 6);
  CHECK(peak.load() <= 2);
  CHECK(peak.load() >= 1);
}

TEST_CASE("HTTP backend configuration errors") {
  HttpBackend::Options o;
  CHECK(code_of([&] { HttpBackend b(o); }) == ErrorCode::kConfig);
  o.base_url = "http://127.0.0.1:1";
  CHECK(code_of([&] { HttpBackend b(o); }) == ErrorCode::kConfig);
  o.model = "m";
  o.max_in_flight = 0;
  CHECK(code_of([&] { HttpBackend b(o); }) == ErrorCode::kConfig);
}
