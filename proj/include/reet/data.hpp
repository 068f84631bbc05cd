#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <utility>
#include <vector>

#include "reet/tensor.hpp"

namespace reet {

/// One labelled image. `index` is the item's stable identity within its
/// dataset; per-sample random streams are keyed on it, not on position.
struct Sample {
  Tensor image;  // [3,H,W] in [0,1]
  int label = 0;
  int index = 0;
};

struct Dataset {
  std::vector<Sample> items;
  std::uint64_t seed = 0;
  double balance = 0.5;
  int generator_version = 0;

  std::size_t count(int label) const;
};

inline constexpr int kGeneratorVersion = 1;
inline constexpr int kPatchSize = 32;

class DatasetError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class MissingManifestError : public DatasetError {
  using DatasetError::DatasetError;
};
class CountMismatchError : public DatasetError {
  using DatasetError::DatasetError;
};
class PngDecodeError : public DatasetError {
  using DatasetError::DatasetError;
};

/// Two-class synthetic H&E-like patches. Class 1 carries 6-12 dark
/// hematoxylin nuclei on eosin stroma; class 0 carries at most 2. Colours are
/// synthesized as stain concentrations and mapped through the stain basis.
/// Exactly round(n * balance) items get label 1.
Dataset generate_synthetic(int n, std::uint64_t seed, double balance = 0.5);

/// <dir>/class_<k>/<index>.png plus <dir>/manifest.json.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Stratified seeded split; each class is shuffled and cut at
/// round(count * train_frac).
std::pair<Dataset, Dataset> split(const Dataset& ds, double train_frac, std::uint64_t seed);

/// 8-bit RGB PNG, values quantized with round(p * 255).
void write_png(const std::filesystem::path& path, const Tensor& image);
Tensor read_png(const std::filesystem::path& path);

}  // namespace reet
