#include "groundcap/cli.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "groundcap/checkpoint.hpp"
#include "groundcap/config.hpp"
#include "groundcap/datagen.hpp"
#include "groundcap/pipeline.hpp"

namespace groundcap {

namespace fs = std::filesystem;

namespace {

fs::path locate_run(const std::string& run) {
  if (fs::is_directory(run)) return run;
  const fs::path dir = run_dir(run);
  if (!fs::is_directory(dir)) throw DependencyError("run '" + run + "' does not exist under " + run_root().string());
  return dir;
}

std::vector<double> parse_lambdas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("cannot parse lambda value '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("lambda list is empty");
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Grounded image captioning lab"};
  app.require_subcommand(1);

  std::string config, out_dir, run, split = "val", model, lambdas, stage;
  std::vector<std::string> overrides;
  int beam = 1;
  bool no_grounding = false;

  auto* gen = app.add_subcommand("generate-data", "Generate and save a synthetic dataset");
  gen->add_option("--config", config, "Synthetic world config (JSON)")->required();
  gen->add_option("--out", out_dir, "Output dataset directory")->required();

  auto* train = app.add_subcommand("train", "Train one stage");
  train->add_option("stage", stage, "matcher | captioner-xe | captioner-scst")
      ->required()
      ->check(CLI::IsMember({"matcher", "captioner-xe", "captioner-scst"}));
  train->add_option("--config", config, "Experiment config (JSON)")->required();
  train->add_option("--set", overrides, "Override a config value, dotted.key=value");

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a captioner run");
  evaluate->add_option("--run", run, "Run name or directory")->required();
  evaluate->add_option("--split", split, "Dataset split");
  evaluate->add_option("--beam", beam, "Beam size")->check(CLI::PositiveNumber);
  evaluate->add_flag("--no-grounding", no_grounding, "Skip attention accuracy and F1");

  auto* sweep = app.add_subcommand("sweep-lambda1", "Stage-1 sweep over lambda1");
  sweep->add_option("--config", config, "Base experiment config (JSON)")->required();
  sweep->add_option("--lambdas", lambdas, "Comma-separated lambda1 values")->required();
  sweep->add_option("--split", split, "Evaluation split");
  sweep->add_option("--set", overrides, "Override a config value, dotted.key=value");

  auto* exp = app.add_subcommand("export-attention", "Dump attention matrices as JSON");
  exp->add_option("--run", run, "Run name or directory")->required();
  exp->add_option("--split", split, "Dataset split");
  exp->add_option("--model", model, "matcher | captioner")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) {
      generate_data(config, out_dir);
      out << "dataset written to " << out_dir << "\n";
    } else if (*train) {
      const ExperimentConfig cfg = load_experiment_config(config, overrides);
      fs::path dir;
      if (stage == "matcher") {
        dir = train_matcher_run(cfg);
      } else if (stage == "captioner-xe") {
        dir = train_captioner_xe_run(cfg);
      } else {
        dir = train_captioner_scst_run(cfg);
      }
      out << "run written to " << dir.string() << "\n";
    } else if (*evaluate) {
      const MetricsReport r = evaluate_run(locate_run(run), {split, beam, !no_grounding});
      out << r.to_json().dump() << "\n";
    } else if (*sweep) {
      const ExperimentConfig cfg = load_experiment_config(config, overrides);
      out << "sweep written to " << sweep_lambda1(cfg, parse_lambdas(lambdas), split).string()
          << "\n";
    } else if (*exp) {
      out << "attention written to " << export_attention(locate_run(run), split, model).string()
          << "\n";
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DependencyError& e) {
    err << "dependency error: " << e.what() << "\n";
    return kExitDependency;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace groundcap
