#pragma once

#include <filesystem>

#include "proftune/core.hpp"

namespace proftune {

// Writes <root>/<case_id>/round_<n>/{kernel.src, proposal_prompt.txt,
// proposal_response.txt, build.log, profile.json} plus <root>/<case_id>/trace.json.
// Rewriting an existing case directory replaces its contents. Returns the
// trace.json path.
std::filesystem::path persist_trace(const OptimizationTrace& trace,
                                    const std::filesystem::path& root);

// Accepts either a case directory or the trace.json path inside it.
OptimizationTrace load_trace(const std::filesystem::path& path);

}  // namespace proftune
