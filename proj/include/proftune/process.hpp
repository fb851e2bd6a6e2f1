#pragma once

#include <sys/types.h>

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

namespace proftune {

// Child process with its stdin/stdout connected to pipes. stderr is inherited.
// Resolves argv[0] through PATH.
class ChildProcess {
 public:
  explicit ChildProcess(const std::vector<std::string>& argv);
  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;
  ~ChildProcess();

  void write_line(const std::string& line);
  // nullopt on end of stream.
  std::optional<std::string> read_line();
  void close_stdin();
  // Closes stdin and reaps the child; returns the exit status (128 + signal when killed).
  int wait();

  pid_t pid() const { return pid_; }

 private:
  pid_t pid_ = -1;
  std::FILE* to_child_ = nullptr;
  std::FILE* from_child_ = nullptr;
  std::optional<int> exit_status_;
};

struct CommandResult {
  int exit_status = 0;
  std::string stdout_text;
};

// Runs to completion with empty stdin and captures stdout.
CommandResult run_command(const std::vector<std::string>& argv);

}  // namespace proftune
