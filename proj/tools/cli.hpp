#ifndef JKV_TOOLS_CLI_HPP
#define JKV_TOOLS_CLI_HPP

#include <iosfwd>

namespace jkv::cli {

/// Parses argv and dispatches to a subcommand. Returns 0 on success, 1 on a
/// runtime failure and 2 on bad flags.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace jkv::cli

#endif  // JKV_TOOLS_CLI_HPP
