#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "compkg/common.hpp"
#include "compkg/oracle.hpp"
#include "compkg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace compkg;

int main(int argc, char** argv) {
  CLI::App app{"Complementary knowledge-graph recommendation pipeline"};
  app.require_subcommand(1, 1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  app.add_option("--config", config_path, "pipeline config file (key = value lines)");
  app.add_option("--seed", seed, "master seed; overrides the config");
  app.add_option("--out-dir", out_dir, "artifact directory; overrides the config");

  std::string update_verdicts, update_explanations, update_dict, update_date;
  for (const auto& name : pipeline::stage_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " stage");
    if (name == "update") {
      sub->add_option("--verdicts", update_verdicts, "daily verdict rows");
      sub->add_option("--explanations", update_explanations, "explanations for the daily verdicts");
      sub->add_option("--dict", update_dict, "entity dictionary observed on this day");
      sub->add_option("--date", update_date, "day of the delta, YYYY-MM-DD");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    pipeline::PipelineConfig cfg;
    if (!config_path.empty()) {
      cfg = pipeline::load_config(config_path);
    } else {
      cfg.out_dir = fs::current_path();
      pipeline::apply_environment(cfg);
    }
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = fs::absolute(out_dir);
    const auto cwd = fs::current_path();
    auto abs = [&](const std::string& p) { return fs::absolute(cwd / p); };
    if (!update_verdicts.empty()) cfg.update_verdicts = abs(update_verdicts);
    if (!update_explanations.empty()) cfg.update_explanations = abs(update_explanations);
    if (!update_dict.empty()) cfg.update_dict = abs(update_dict);
    if (!update_date.empty()) {
      try {
        cfg.update_date = parse_day(update_date);
      } catch (const DataError& e) {
        throw UsageError(std::string("--date: ") + e.what());
      }
    }
    const auto report = pipeline::run_stage(app.get_subcommands().front()->get_name(), cfg);
    std::cout << report.format();
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
}
