#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace reet::cli;

namespace {

void add_data_options(CLI::App* cmd, DataArgs& d, const char* default_subset) {
  d.subset = default_subset;
  cmd->add_option("--data", d.dir, "Dataset directory")->required();
  cmd->add_option("--train-frac", d.train_frac, "Train fraction of the stratified split")->capture_default_str();
  cmd->add_option("--subset", d.subset, "all, train or test")->check(CLI::IsMember({"all", "train", "test"}))
      ->capture_default_str();
}

void add_train_options(CLI::App* cmd, TrainArgs& t) {
  add_data_options(cmd, t.data, "train");
  cmd->add_option("--out", t.out, "Weights file to write")->required();
  cmd->add_option("--seed", t.seed, "Seed for initialization and batch order")->capture_default_str();
  cmd->add_option("--passes", t.passes, "Total forward/backward passes")->capture_default_str();
  cmd->add_option("--batch-size", t.batch_size)->capture_default_str();
  cmd->add_option("--lr", t.lr, "SGD step size")->capture_default_str();
  cmd->add_option("--classes", t.classes)->capture_default_str();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool given(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

/// Replaces "--config FILE" with the file's key=value lines as flags. Keys
/// already present on the command line are skipped; repeated keys repeat.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<long>(i));
      break;
    }
  }
  if (path.empty()) return args;
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read config file " + path);
  const std::vector<std::string> cli = args;
  std::string line;
  for (int lineno = 1; std::getline(f, line); ++lineno) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string flag = "--" + trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (given(cli, flag)) continue;
    if (value == "true") {
      args.push_back(flag);
    } else if (value != "false") {
      args.push_back(flag);
      args.push_back(value);
    }
  }
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robustness evaluation and adversarial training for stained-patch classifiers"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate-data", "Write a synthetic two-class patch dataset");
  generate->add_option("--out", gen.out, "Output directory")->required();
  generate->add_option("--n", gen.n, "Number of patches")->capture_default_str();
  generate->add_option("--seed", gen.seed)->capture_default_str();
  generate->add_option("--balance", gen.balance, "Fraction of class 1")->capture_default_str();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Standard SGD training of the built-in CNN");
  add_train_options(train, train_args);

  TrainArgs atf_args;
  auto* train_atf = app.add_subcommand("train-atf", "Adversarial training for free over transform parameters");
  add_train_options(train_atf, atf_args);
  atf_args.transforms = {"stain"};
  train_atf->add_option("--transforms", atf_args.transforms, "Differentiable transforms, applied in order")
      ->delimiter(',')
      ->capture_default_str();
  train_atf->add_option("--box", atf_args.boxes, "Box override name=lo:hi[:neutral], repeatable");
  train_atf->add_option("--m", atf_args.m, "Replays per minibatch")->capture_default_str();
  train_atf->add_option("--ascent-frac", atf_args.ascent_frac, "Parameter step as a fraction of box width")
      ->capture_default_str();

  EvaluateArgs eval;
  auto* evaluate = app.add_subcommand("evaluate", "Attack a model under each selected transform");
  add_data_options(evaluate, eval.data, "test");
  auto* model_opt = evaluate->add_option("--model", eval.model, "Weights file of the built-in CNN");
  auto* bb_opt = evaluate->add_option("--blackbox-cmd", eval.blackbox_cmd, "Shell command speaking the wire protocol");
  model_opt->excludes(bb_opt);
  evaluate->add_option("--timeout", eval.timeout_s, "Black-box response timeout in seconds")->capture_default_str();
  evaluate->add_option("--out", eval.out, "Output directory for report.json")->required();
  evaluate->add_option("--seed", eval.seed)->capture_default_str();
  eval.transforms = {"all"};
  evaluate->add_option("--transforms", eval.transforms, "Transform names, \"all\", or pipelines like affine+blur")
      ->delimiter(',')
      ->capture_default_str();
  evaluate->add_option("--box", eval.boxes, "Box override name=lo:hi[:neutral], repeatable");
  evaluate->add_option("--optimizer", eval.optimizer)->check(CLI::IsMember({"pgd", "stochastic"}))
      ->capture_default_str();
  evaluate->add_option("--steps", eval.attack.steps)->capture_default_str();
  evaluate->add_option("--step-frac", eval.attack.step_frac)->capture_default_str();
  evaluate->add_option("--loss", eval.loss)->check(CLI::IsMember({"cross_entropy", "margin"}))->capture_default_str();
  evaluate->add_flag("--early-stop", eval.attack.early_stop_on_flip, "Stop a sample's attack at its first flip");
  evaluate->add_option("--population", eval.attack.population)->capture_default_str();
  evaluate->add_option("--mutation-frac", eval.attack.mutation_frac)->capture_default_str();
  evaluate->add_option("--restarts", eval.attack.restarts)->capture_default_str();
  evaluate->add_option("--jobs", eval.jobs, "Worker threads")->capture_default_str();
  evaluate->add_flag("--save-pairs", eval.save_pairs, "Write clean/adversarial PNGs of fooled samples");

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "Summarize one or more report.json files as a table");
  report->add_option("inputs", rep.inputs, "report.json files")->required();
  report->add_option("--out", rep.out, "Also write the table to this file");

  std::string serve_model;
  auto* serve = app.add_subcommand("serve-model", "Answer wire-protocol requests on stdin/stdout");
  serve->add_option("--model", serve_model, "Weights file of the built-in CNN")->required();

  std::string config_path;
  for (CLI::App* cmd : {generate, train, train_atf, evaluate, report}) {
    cmd->add_option("--config", config_path, "Flat key=value file; flags given on the command line win");
  }

  try {
    std::vector<std::string> args = expand_config(std::vector<std::string>(argv + 1, argv + argc));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*generate) return cmd_generate(gen);
    if (*train) return cmd_train(train_args);
    if (*train_atf) return cmd_train_atf(atf_args);
    if (*evaluate) return cmd_evaluate(eval);
    if (*report) return cmd_report(rep);
    if (*serve) return cmd_serve(serve_model);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
