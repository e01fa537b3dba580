#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace promptmi::cli {

/// Exit codes. The verdict of a test is never conflated with a failure.
inline constexpr int kExitInsufficientEvidence = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDistinct = 3;

inline constexpr int kReportSchemaVersion = 1;

/// Runs the `promptmi` command line. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Flat "key = value" document; '#' starts a comment, values may be quoted.
std::map<std::string, std::string> parse_key_value_config(const std::string& text);

std::string tool_version();

}  // namespace promptmi::cli
