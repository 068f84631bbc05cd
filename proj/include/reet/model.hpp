#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "reet/autograd.hpp"
#include "reet/transforms.hpp"

namespace reet {

/// Output-only access to a classifier.
class BlackBoxClassifier {
public:
  virtual ~BlackBoxClassifier() = default;
  /// images [N,C,H,W] -> logits [N,classes]. Safe to call concurrently.
  virtual Tensor predict(const Tensor& images) const = 0;
};

/// Classifier whose forward pass can be recorded for gradients.
class WhiteBoxClassifier : public BlackBoxClassifier {
public:
  virtual int num_classes() const = 0;
  virtual std::vector<Tensor>& parameters() = 0;
  virtual const std::vector<Tensor>& parameters() const = 0;
  /// Records logits [N,classes] for `images` using `params` bound in `g`.
  virtual Var forward(Graph& g, Var images, std::span<const Var> params) const = 0;

  std::vector<Var> bind(Graph& g, bool requires_grad) const;
  Tensor predict(const Tensor& images) const override;
};

/// Built-in two-block CNN for 3x32x32 inputs:
/// conv3x3(3->8) relu pool2, conv3x3(8->16) relu pool2, affine(1024->C).
class BuiltinCnn final : public WhiteBoxClassifier {
public:
  static constexpr int kInputSize = 32;

  /// He-uniform weights, zero biases.
  static BuiltinCnn init(int classes, std::uint64_t seed);
  /// Adopts weight tensors; throws std::invalid_argument if shapes do not fit.
  explicit BuiltinCnn(std::vector<Tensor> weights);

  int num_classes() const override { return classes_; }
  std::vector<Tensor>& parameters() override { return weights_; }
  const std::vector<Tensor>& parameters() const override { return weights_; }
  Var forward(Graph& g, Var images, std::span<const Var> params) const override;

private:
  std::vector<Tensor> weights_;
  int classes_ = 0;
};

/// logits = W * flatten(x) + b. Used for closed-form checks and toy tasks.
class LinearClassifier final : public WhiteBoxClassifier {
public:
  LinearClassifier(Tensor weight, Tensor bias);

  int num_classes() const override { return weights_[0].dim(0); }
  std::vector<Tensor>& parameters() override { return weights_; }
  const std::vector<Tensor>& parameters() const override { return weights_; }
  Var forward(Graph& g, Var images, std::span<const Var> params) const override;

private:
  std::vector<Tensor> weights_;
};

enum class GradTarget { weights, transform_params, both };
enum class LossKind { cross_entropy, margin };

struct LossAndGrads {
  float loss = 0.0f;
  Tensor logits;
  std::vector<Tensor> weight_grads;  // empty unless requested
  ParamVector param_grads;           // empty unless requested
};

/// Mean batch loss and the requested gradients. When `transform` is given the
/// images pass through transform->apply(images, *theta) first. With
/// LossKind::margin the loss is max_{j!=y} z_j - z_y.
LossAndGrads loss_and_grads(const WhiteBoxClassifier& model, const Tensor& images, std::span<const int> labels,
                            GradTarget wrt, const TransformDescriptor* transform = nullptr,
                            const ParamVector* theta = nullptr, LossKind loss = LossKind::cross_entropy);

// ---------------------------------------------------------------------------
// Weight files: "REET" | u32 version | u32 tensor count | per tensor (u32 rank,
// u32 dims...) | float32 payload | u64 FNV-1a of the payload. Little-endian.

struct ModelWeights {
  std::vector<Tensor> tensors;
  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

class WeightsError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class WeightsFormatError : public WeightsError {
  using WeightsError::WeightsError;
};
class WeightsTruncatedError : public WeightsError {
  using WeightsError::WeightsError;
};
class WeightsDigestError : public WeightsError {
  using WeightsError::WeightsError;
};

inline constexpr std::uint32_t kWeightsVersion = 1;

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);
std::uint64_t weights_digest(const ModelWeights& w);
std::string hex64(std::uint64_t v);

std::vector<std::uint8_t> serialize_weights(const ModelWeights& w);
ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes);
void save_weights(const ModelWeights& w, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

}  // namespace reet
