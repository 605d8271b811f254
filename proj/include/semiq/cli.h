#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace semiq::cli {

enum ExitCode : int {
  kOk = 0,
  kUserError = 2,
  kNumericalFailure = 3,
  kVerificationFailure = 4,
};

// Subcommands: run, verify, fit, sweep, gen-mdp.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

// Git blob id (SHA-1 of "blob <size>\0" + bytes) of a file's contents.
std::string git_blob_id(const std::string& bytes);

}  // namespace semiq::cli
