#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "reet/attack.hpp"
#include "reet/data.hpp"
#include "reet/transforms.hpp"

namespace reet::cli {

/// Bad flags or configuration; maps to exit code 2.
class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenerateArgs {
  std::string out;
  int n = 1000;
  std::uint64_t seed = 0;
  double balance = 0.5;
};

/// Which part of a dataset directory a command works on.
struct DataArgs {
  std::string dir;
  double train_frac = 0.8;
  std::string subset = "all";  // all | train | test
};

struct TrainArgs {
  DataArgs data;
  std::string out;
  std::uint64_t seed = 0;
  long passes = 2000;
  int batch_size = 32;
  double lr = 0.02;
  int classes = 2;
  // train-atf only
  std::vector<std::string> transforms;
  std::vector<std::string> boxes;
  int m = 4;
  double ascent_frac = 0.05;
};

struct EvaluateArgs {
  DataArgs data;
  std::string model;
  std::string blackbox_cmd;
  double timeout_s = 30.0;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<std::string> transforms;
  std::vector<std::string> boxes;
  std::string optimizer = "pgd";
  AttackConfig attack;
  std::string loss = "cross_entropy";
  int jobs = 1;
  bool save_pairs = false;
};

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

/// "stain.alpha=0.85:1.15[:neutral]" entries keyed by parameter name.
std::map<std::string, BoxOverride> parse_boxes(const std::vector<std::string>& entries);
/// Names may be "all", single kinds, or "+"-joined pipelines such as "affine+blur".
std::vector<TransformDescriptor> parse_transforms(const std::vector<std::string>& names,
                                                  const TransformOptions& options);
Dataset load_subset(const DataArgs& args);

int cmd_generate(const GenerateArgs& args);
int cmd_train(const TrainArgs& args);
int cmd_train_atf(const TrainArgs& args);
int cmd_evaluate(const EvaluateArgs& args);
int cmd_report(const ReportArgs& args);
int cmd_serve(const std::string& model_path);

}  // namespace reet::cli
