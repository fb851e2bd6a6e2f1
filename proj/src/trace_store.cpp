#include "proftune/trace_store.hpp"

#include <system_error>

#include <fmt/format.h>

namespace proftune {

namespace fs = std::filesystem;

namespace {

void check_case_id(const std::string& case_id) {
  if (case_id.empty() || case_id == "." || case_id == ".." ||
      case_id.find_first_of("/\\") != std::string::npos) {
    fail(ErrorCode::kPersistence, fmt::format("case id '{}' is not a valid directory name", case_id));
  }
}

void write_file(const fs::path& path, std::string_view contents) {
  try {
    write_text_file(path.string(), contents);
  } catch (const Error& e) {
    fail(ErrorCode::kPersistence, e.what());
  }
}

std::string read_file(const fs::path& path) {
  try {
    return read_text_file(path.string());
  } catch (const Error& e) {
    fail(ErrorCode::kPersistence, e.what());
  }
}

json kernel_meta(const KernelVariant& k) {
  return json{{"case_id", k.case_id()},
              {"round", k.round()},
              {"provenance", to_string(k.provenance())},
              {"loc", k.loc()}};
}

KernelVariant kernel_from_meta(const json& meta, std::string source) {
  return KernelVariant(meta.at("case_id").get<std::string>(), meta.at("round").get<int>(),
                       provenance_from_string(meta.at("provenance").get<std::string>()),
                       std::move(source));
}

std::string round_dir_name(int round) { return fmt::format("round_{}", round); }

}  // namespace

fs::path persist_trace(const OptimizationTrace& trace, const fs::path& root) {
  check_case_id(trace.case_id);
  const fs::path case_dir = root / trace.case_id;
  std::error_code ec;
  fs::remove_all(case_dir, ec);
  fs::create_directories(case_dir, ec);
  if (ec) {
    fail(ErrorCode::kPersistence,
         fmt::format("cannot create '{}': {}", case_dir.string(), ec.message()));
  }

  json rounds = json::array();
  for (const RoundRecord& r : trace.rounds) {
    const fs::path dir = case_dir / round_dir_name(r.round);
    fs::create_directories(dir, ec);
    if (ec) {
      fail(ErrorCode::kPersistence,
           fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
    }
    write_file(dir / "proposal_prompt.txt", r.proposal_prompt);
    write_file(dir / "proposal_response.txt", r.proposal_response);
    write_file(dir / "build.log", r.build_log);
    json entry{{"round", r.round},
               {"dir", round_dir_name(r.round)},
               {"prompt_digest", r.prompt_digest},
               {"response_digest", r.response_digest},
               {"status", to_string(r.status)},
               {"hint", r.hint},
               {"decision", r.decision}};
    if (r.kernel) {
      write_file(dir / "kernel.src", r.kernel->source());
      entry["kernel"] = kernel_meta(*r.kernel);
    }
    if (r.report) {
      write_file(dir / "profile.json", json(*r.report).dump(2));
    }
    json remediations = json::array();
    for (std::size_t i = 0; i < r.remediations.size(); ++i) {
      const RemediationAttempt& a = r.remediations[i];
      const std::string stem = fmt::format("remediation_{}", i + 1);
      write_file(dir / (stem + "_prompt.txt"), a.prompt);
      write_file(dir / (stem + "_response.txt"), a.response);
      write_file(dir / (stem + ".log"), a.logs);
      json ra{{"status", to_string(a.status)}};
      if (a.kernel) {
        write_file(dir / (stem + "_kernel.src"), a.kernel->source());
        ra["kernel"] = kernel_meta(*a.kernel);
      }
      remediations.push_back(std::move(ra));
    }
    entry["remediations"] = std::move(remediations);
    rounds.push_back(std::move(entry));
  }

  json index{{"case_id", trace.case_id},
             {"baseline_variant", trace.baseline_variant},
             {"baseline_report", trace.baseline_report},
             {"best_variant", trace.best_variant},
             {"best_report", trace.best_report},
             {"rounds", std::move(rounds)}};
  const fs::path index_path = case_dir / "trace.json";
  write_file(index_path, index.dump(2));
  return index_path;
}

OptimizationTrace load_trace(const fs::path& path) {
  const fs::path index_path = fs::is_directory(path) ? path / "trace.json" : path;
  const fs::path case_dir = index_path.parent_path();
  json index;
  try {
    index = json::parse(read_file(index_path));
    OptimizationTrace trace;
    index.at("case_id").get_to(trace.case_id);
    index.at("baseline_variant").get_to(trace.baseline_variant);
    index.at("baseline_report").get_to(trace.baseline_report);
    index.at("best_variant").get_to(trace.best_variant);
    index.at("best_report").get_to(trace.best_report);
    for (const json& entry : index.at("rounds")) {
      RoundRecord r;
      const fs::path dir = case_dir / entry.at("dir").get<std::string>();
      entry.at("round").get_to(r.round);
      entry.at("prompt_digest").get_to(r.prompt_digest);
      entry.at("response_digest").get_to(r.response_digest);
      r.status = run_status_from_string(entry.at("status").get<std::string>());
      entry.at("hint").get_to(r.hint);
      entry.at("decision").get_to(r.decision);
      r.proposal_prompt = read_file(dir / "proposal_prompt.txt");
      r.proposal_response = read_file(dir / "proposal_response.txt");
      r.build_log = read_file(dir / "build.log");
      if (entry.contains("kernel")) {
        r.kernel = kernel_from_meta(entry.at("kernel"), read_file(dir / "kernel.src"));
      }
      if (fs::exists(dir / "profile.json")) {
        r.report = json::parse(read_file(dir / "profile.json")).get<ProfileReport>();
      }
      const json& remediations = entry.at("remediations");
      for (std::size_t i = 0; i < remediations.size(); ++i) {
        const std::string stem = fmt::format("remediation_{}", i + 1);
        RemediationAttempt a;
        a.status = run_status_from_string(remediations[i].at("status").get<std::string>());
        a.prompt = read_file(dir / (stem + "_prompt.txt"));
        a.response = read_file(dir / (stem + "_response.txt"));
        a.logs = read_file(dir / (stem + ".log"));
        if (remediations[i].contains("kernel")) {
          a.kernel = kernel_from_meta(remediations[i].at("kernel"),
                                      read_file(dir / (stem + "_kernel.src")));
        }
        r.remediations.push_back(std::move(a));
      }
      trace.rounds.push_back(std::move(r));
    }
    return trace;
  } catch (const json::exception& e) {
    fail(ErrorCode::kPersistence,
         fmt::format("malformed trace index '{}': {}", index_path.string(), e.what()));
  }
}

}  // namespace proftune
