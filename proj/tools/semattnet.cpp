// semattnet <train|eval|infer|visualize|synth-data> [--config FILE] [--<key> VALUE ...]
//
// Every RunConfig key is accepted as a flag; flags override the config file.
// SEMATTNET_DATA_ROOT overrides data_root. Exit codes: 0 success, 2 config,
// 3 data/format, 4 version, 5 numerical, 6 shape, 7 validation, 1 other.

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "semattnet/commands.hpp"

namespace {

using namespace semattnet;

int run(const std::string& command, const RunConfig& cfg) {
  if (command == "train") cmd_train(cfg);
  else if (command == "eval") cmd_eval(cfg);
  else if (command == "infer") cmd_infer(cfg);
  else if (command == "visualize") cmd_visualize(cfg);
  else if (command == "synth-data") cmd_synth_data(cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SemAttNet depth completion (desk scale)"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  std::string config_file;
  std::map<std::string, std::string> flags;
  const std::map<std::string, std::string> about{
      {"train", "Train the backbone, then the refinement stage"},
      {"eval", "Report KITTI metrics on a split"},
      {"infer", "Write 16-bit depth predictions for a split"},
      {"visualize", "Render depth, confidence and error maps for one sample"},
      {"synth-data", "Write a synthetic dataset in the on-disk layout"}};
  for (const auto& [name, text] : about) {
    auto* sub = app.add_subcommand(name, text);
    sub->add_option("--config", config_file, "Flat key = value config file");
    for (const auto& key : RunConfig::keys()) sub->add_option("--" + key, flags[key]);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ConfigError("").exit_code();
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    ConfigEntries overrides;
    for (const auto& key : RunConfig::keys())
      if (app.get_subcommands().front()->count("--" + key) > 0) overrides.emplace_back(key, flags[key]);
    const RunConfig cfg =
        resolve_config(config_file.empty() ? ConfigEntries{} : read_config_file(config_file), overrides);
    return run(command, cfg);
  } catch (const semattnet::Error& e) {
    std::cerr << "semattnet " << command << ": " << e.category() << " error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "semattnet " << command << ": " << e.what() << "\n";
    return 1;
  }
}
