#pragma once

// Command-line driver: gen-ref, simulate, estimate, render, gradcheck, serve,
// bench. Exit codes: 0 success, 2 validation error, 3 numerical failure,
// 4 I/O error.

#include <ostream>
#include <string>
#include <vector>

namespace splatmpm::cli {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace splatmpm::cli
