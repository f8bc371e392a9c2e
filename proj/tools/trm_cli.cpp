// Command-line front end: pretrain / posttrain / evaluate / plan.
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trm/commands.hpp"

namespace {

// Splits a repeatable `--set section.key=value` flag into the override pair.
void collect_overrides(const std::vector<std::string>& raw, trm::CommandOptions& options) {
  for (const std::string& entry : raw) {
    const size_t eq = entry.find('=');
    if (eq == std::string::npos) {
      throw CLI::ValidationError("--set expects section.key=value, got: " + entry);
    }
    options.overrides.emplace_back(entry.substr(0, eq), entry.substr(eq + 1));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recursive grid-reasoning model: training, adaptation, and evaluation"};
  app.require_subcommand(1);

  struct SubSpec {
    std::string name;
    std::string description;
    bool config_required;
    int (*run)(const trm::CommandOptions&, std::ostream&, std::ostream&);
  };
  const std::vector<SubSpec> specs = {
      {"pretrain", "Pre-train on a data mix and write checkpoint + registry + metrics", true,
       trm::cmd_pretrain},
      {"posttrain", "Adapt a checkpoint to test tasks and write a submission", true,
       trm::cmd_posttrain},
      {"evaluate", "Score a checkpoint (or stub) with augmented voting", true, trm::cmd_evaluate},
      {"plan", "Echo the compute-budget arithmetic", false, trm::cmd_plan},
  };

  struct SubState {
    trm::CommandOptions options;
    std::vector<std::string> sets;
    int (*run)(const trm::CommandOptions&, std::ostream&, std::ostream&) = nullptr;
    CLI::App* app = nullptr;
  };
  std::vector<SubState> states(specs.size());

  for (size_t i = 0; i < specs.size(); ++i) {
    CLI::App* sub = app.add_subcommand(specs[i].name, specs[i].description);
    SubState& state = states[i];
    state.run = specs[i].run;
    state.app = sub;
    auto* config = sub->add_option("config", state.options.config_path, "Run config file");
    if (specs[i].config_required) config->required()->check(CLI::ExistingFile);
    sub->add_option("--set", state.sets, "Override a config key (section.key=value)");
    sub->add_flag("--force", state.options.force, "Allow writing into an existing out_dir");
    sub->add_flag("--dry-run", state.options.dry_run, "Validate and echo the plan, then stop");
  }

  CLI11_PARSE(app, argc, argv);

  for (SubState& state : states) {
    if (state.app->parsed()) {
      try {
        collect_overrides(state.sets, state.options);
      } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
      }
      return state.run(state.options, std::cout, std::cerr);
    }
  }
  return 1;
}
