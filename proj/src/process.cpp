#include "proftune/process.hpp"

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include <fmt/format.h>

#include "proftune/error.hpp"

extern char** environ;

namespace proftune {

namespace {

int decode_status(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return -1;
}

pid_t spawn(const std::vector<std::string>& argv, int stdin_fd, int stdout_fd,
            const std::vector<int>& close_in_child) {
  if (argv.empty()) fail(ErrorCode::kInvalidArgument, "cannot spawn an empty command");
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, stdin_fd, STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, stdout_fd, STDOUT_FILENO);
  for (int fd : close_in_child) posix_spawn_file_actions_addclose(&actions, fd);

  std::vector<char*> cargv;
  cargv.reserve(argv.size() + 1);
  for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
  cargv.push_back(nullptr);

  pid_t pid = -1;
  const int rc = posix_spawnp(&pid, cargv[0], &actions, nullptr, cargv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) {
    fail(ErrorCode::kInfrastructure,
         fmt::format("cannot start '{}': {}", argv.front(), std::strerror(rc)));
  }
  return pid;
}

void ignore_sigpipe() {
  static const bool once = [] {
    ::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)once;
}

}  // namespace

ChildProcess::ChildProcess(const std::vector<std::string>& argv) {
  ignore_sigpipe();
  int in_pipe[2];
  int out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) {
    fail(ErrorCode::kInfrastructure, "pipe creation failed");
  }
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    fail(ErrorCode::kInfrastructure, "pipe creation failed");
  }
  try {
    pid_ = spawn(argv, in_pipe[0], out_pipe[1], {});
  } catch (...) {
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) ::close(fd);
    throw;
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  to_child_ = ::fdopen(in_pipe[1], "w");
  from_child_ = ::fdopen(out_pipe[0], "r");
}

ChildProcess::~ChildProcess() {
  if (!exit_status_ && pid_ > 0) {
    close_stdin();
    if (from_child_) {
      std::fclose(from_child_);
      from_child_ = nullptr;
    }
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
  if (from_child_) std::fclose(from_child_);
}

void ChildProcess::write_line(const std::string& line) {
  if (!to_child_) fail(ErrorCode::kInfrastructure, "child stdin is closed");
  if (std::fwrite(line.data(), 1, line.size(), to_child_) != line.size() ||
      std::fputc('\n', to_child_) == EOF || std::fflush(to_child_) != 0) {
    fail(ErrorCode::kInfrastructure,
         fmt::format("write to child {} failed: {}", pid_, std::strerror(errno)));
  }
}

std::optional<std::string> ChildProcess::read_line() {
  if (!from_child_) return std::nullopt;
  std::string line;
  int c = 0;
  while ((c = std::fgetc(from_child_)) != EOF) {
    if (c == '\n') return line;
    line.push_back(static_cast<char>(c));
  }
  if (line.empty()) return std::nullopt;
  return line;
}

void ChildProcess::close_stdin() {
  if (to_child_) {
    std::fclose(to_child_);
    to_child_ = nullptr;
  }
}

int ChildProcess::wait() {
  if (exit_status_) return *exit_status_;
  close_stdin();
  int status = 0;
  while (::waitpid(pid_, &status, 0) < 0) {
    if (errno != EINTR) fail(ErrorCode::kInfrastructure, "waitpid failed");
  }
  exit_status_ = decode_status(status);
  return *exit_status_;
}

CommandResult run_command(const std::vector<std::string>& argv) {
  ChildProcess child(argv);
  child.close_stdin();
  CommandResult result;
  while (auto line = child.read_line()) {
    result.stdout_text += *line;
    result.stdout_text += '\n';
  }
  result.exit_status = child.wait();
  return result;
}

}  // namespace proftune
