#pragma once

#include <stdexcept>
#include <string>

namespace proftune {

// Mirrors pt_status in proftune.h; keep the numeric values in sync.
enum class ErrorCode {
  kInvalidArgument = 1,
  kDomain = 2,
  kIo = 3,
  kParse = 4,
  kConfig = 5,
  kPrecondition = 6,
  kProtocol = 7,
  kFixture = 8,
  kTransient = 9,
  kExtraction = 10,
  kSampling = 11,
  kStatistics = 12,
  kInfrastructure = 13,
  kDelta = 14,
  kPersistence = 15,
  kEmptyCorpus = 16,
  kDegenerate = 17,
  kBuildRun = 18,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace proftune
