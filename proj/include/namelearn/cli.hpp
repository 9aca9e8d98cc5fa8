// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace namelearn {

/// Command-line entry point: subcommands train, eval, interpret, gradcheck,
/// synth and report. Returns the process exit status; errors go to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace namelearn
