#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace apc::cli {

// Runs one subcommand. Usage errors print the help text and return nonzero.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Worker thread cap from APC_THREADS (unset: 1). Throws DomainError on junk.
std::size_t thread_cap();

}  // namespace apc::cli
