#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reet/autograd.hpp"
#include "reet/tensor.hpp"

namespace reet {

enum class TransformKind { stain, additive, blur, jpeg, resolution, brightness_contrast, affine };

inline constexpr std::array<TransformKind, 7> kAllTransformKinds = {
    TransformKind::stain,      TransformKind::additive,           TransformKind::blur,  TransformKind::jpeg,
    TransformKind::resolution, TransformKind::brightness_contrast, TransformKind::affine};

std::string_view kind_name(TransformKind kind);
std::optional<TransformKind> parse_kind(std::string_view name);

/// How a stage's output responds to its parameters in the backward pass.
enum class GradientKind {
  exact,      // true derivative of the forward map
  surrogate,  // straight-through estimate through a piecewise-constant step
  none,       // search-only
};

// Pinned constants.
inline constexpr float kStainFloor = 1.0f / 255.0f;
inline constexpr float kBlurSigmaFloor = 1e-3f;
inline constexpr float kDefaultAdditiveBudget = 8.0f / 255.0f;

/// Ruifrok-Johnston H&E + residual optical-density basis, rows L2-normalized.
/// Row s holds the RGB optical density of one unit of stain s.
const std::array<std::array<double, 3>, 3>& stain_matrix();
const std::array<std::array<double, 3>, 3>& stain_matrix_inverse();

struct ParamSpec {
  std::string name;
  Tensor lo;
  Tensor hi;
  Tensor neutral;

  const Shape& shape() const { return neutral.shape(); }
};

using ParamVector = std::vector<Tensor>;

struct BoxOverride {
  float lo;
  float hi;
  std::optional<float> neutral;
};

struct TransformOptions {
  /// Per-image shape [C,H,W], used to size the additive perturbation.
  Shape image_shape{3, 32, 32};
  /// Keyed by qualified parameter name, e.g. "stain.alpha".
  std::map<std::string, BoxOverride> boxes;
};

struct TransformStage {
  TransformKind kind;
  std::size_t first_param;
  std::size_t param_count;
  int blur_radius = 0;
  GradientKind gradient = GradientKind::exact;
};

class TransformDescriptor {
public:
  const std::string& name() const { return name_; }
  std::span<const ParamSpec> specs() const { return specs_; }
  std::span<const TransformStage> stages() const { return stages_; }
  /// True when every stage exposes a gradient (exact or straight-through).
  bool differentiable() const;
  /// True when every stage's gradient is the exact derivative.
  bool exact_gradient() const;
  float identity_tolerance() const { return identity_tolerance_; }

  ParamVector neutral() const;
  /// Throws std::invalid_argument on count or shape mismatch.
  void check(const ParamVector& theta) const;
  ParamVector project(const ParamVector& theta) const;
  bool in_box(const ParamVector& theta) const;
  /// hi - lo per entry.
  ParamVector widths() const;

  /// Traced application to a [N,C,H,W] batch; params broadcast over N.
  Var apply(Graph& g, Var images, std::span<const Var> params) const;
  /// Untraced application to a [C,H,W] image or [N,C,H,W] batch.
  Tensor apply(const Tensor& images, const ParamVector& theta) const;

private:
  friend TransformDescriptor make_transform(TransformKind, const TransformOptions&);
  friend TransformDescriptor compose(std::span<const TransformDescriptor>);

  std::string name_;
  std::vector<ParamSpec> specs_;
  std::vector<TransformStage> stages_;
  float identity_tolerance_ = 0.0f;
};

TransformDescriptor make_transform(TransformKind kind, const TransformOptions& options = {});
/// Sequential pipeline; parameters are concatenated in order.
TransformDescriptor compose(std::span<const TransformDescriptor> parts);

// Differentiable building blocks on [N,3,H,W] batches.

/// Clamp to [0,1] whose backward pass is the identity.
Var clamp01_ste(Graph& g, Var x);
/// Optical-density stain gain/offset; alpha and beta are [3].
Var stain(Graph& g, Var x, Var alpha, Var beta);
/// delta has the per-image shape and is shared across the batch.
Var additive(Graph& g, Var x, Var delta);
Var blur(Graph& g, Var x, Var sigma, int radius);
/// JPEG-style quantization at (continuous) quality q in [1, 100].
Var jpeg(Graph& g, Var x, Var quality);
/// Down/up bilinear resampling; the scale is a plain value, not traced.
Var resolution(Graph& g, Var x, float scale);
Var brightness_contrast(Graph& g, Var x, Var contrast, Var brightness);
/// Source-coordinate grid for a rotation/translation/zoom about the center.
Var affine_grid(Graph& g, Var rotation, Var tx, Var ty, Var zoom, int n, int h, int w);
Var affine(Graph& g, Var x, Var rotation, Var tx, Var ty, Var zoom);

/// Standard JPEG luminance/chrominance tables scaled to quality q.
std::array<float, 64> scaled_quant_table(bool chroma, float quality);
const std::array<int, 64>& base_quant_table(bool chroma);

}  // namespace reet
