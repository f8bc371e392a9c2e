#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace trm {

// Shared command-line surface: a config file, dotted-key overrides from
// repeated --set flags, and the force / dry-run switches.
struct CommandOptions {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;  // section.key -> value
  bool force = false;    // allow writing into an existing output directory
  bool dry_run = false;  // validate + echo the resolved plan, then stop
};

// Each command validates its full config (unknown keys rejected), echoes the
// resolved plan, and only then creates the output directory and artifacts.
// Errors print one `error: ...` line to `err` and yield a nonzero exit code.
int cmd_pretrain(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_posttrain(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_evaluate(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_plan(const CommandOptions& options, std::ostream& out, std::ostream& err);

}  // namespace trm
