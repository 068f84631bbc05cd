#pragma once

#include <span>

#include "reet/autograd.hpp"

namespace reet {

enum class Padding { zero, reflect };

/// Mirror index into [0, n) without repeating the edge sample (-1 -> 1).
int reflect_index(int i, int n);

// Elementwise and reductions.
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, float s);
Var sum(Graph& g, Var a);
Var mean(Graph& g, Var a);
Var relu(Graph& g, Var a);
Var reshape(Graph& g, Var a, Shape shape);

/// Cross-correlation of x [N,C,H,W] with kernel [O,C,K,K], K odd.
/// `bias` ([O]) is optional; pass nullptr to skip it.
Var conv2d(Graph& g, Var x, Var kernel, const Var* bias, int padding, Padding mode = Padding::zero);

/// Applies one [K,K] kernel to every channel of x [N,C,H,W] with reflect
/// padding of (K-1)/2. Differentiable in both x and the kernel.
/// With `normalize` the output is divided by the kernel sum, accumulated in
/// double, so constant planes are reproduced exactly.
Var depthwise_conv2d(Graph& g, Var x, Var kernel, bool normalize = false);

/// 2x2 max pooling with stride 2; H and W must be even.
Var maxpool2(Graph& g, Var x);

/// y = x W^T + b for x [N,F], W [C,F], b [C].
Var linear(Graph& g, Var x, Var weight, Var bias);

/// Mean softmax cross-entropy over the batch; logits [N,C].
Var cross_entropy(Graph& g, Var logits, std::span<const int> labels);

/// Mean of (max_{j != y} z_j - z_y); larger means closer to misclassified.
Var negative_margin(Graph& g, Var logits, std::span<const int> labels);

/// Bilinear interpolation of x [N,C,H,W] at grid [N,Ho,Wo,2] of (x,y) source
/// positions in pixel units, pixel i covering [i, i+1). Coordinates outside
/// the image reflect about its borders. Differentiable in x and grid.
Var bilinear_sample(Graph& g, Var x, Var grid);

/// Normalized isotropic Gaussian, [2r+1, 2r+1], differentiable in sigma ([1]).
Var gaussian_kernel(Graph& g, Var sigma, int radius);
Tensor gaussian_kernel(float sigma, int radius);

/// Orthonormal 2-D DCT-II on an 8x8 block and its inverse.
Tensor dct8(const Tensor& block);
Tensor idct8(const Tensor& coeffs);
/// In-place variants on raw 64-float blocks (row-major).
void dct8_inplace(float* block);
void idct8_inplace(float* coeffs);

}  // namespace reet
