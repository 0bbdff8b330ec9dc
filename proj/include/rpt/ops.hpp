#pragma once

#include <span>
#include <vector>

#include "rpt/graph.hpp"

// Differentiable operations on 2-D (rows x cols) values. Vectors are 1 x n.
// Every op throws DimensionError naming both shapes when operands do not conform.
namespace rpt {

inline constexpr float kLayerNormEps = 1e-5f;

Var matmul(Var a, Var b);     // a (m x k) * b (k x n)
Var matmul_nt(Var a, Var b);  // a (m x k) * b^T, b (n x k)
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, float s);
/// Adds a 1 x n row to every row of an m x n matrix.
Var add_row(Var a, Var row);

/// Softmax over the last axis.
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Row-wise layer normalization with affine gamma/beta rows (1 x n).
Var layer_norm(Var x, Var gamma, Var beta);
/// Row-wise normalization without the affine part.
Var normalize_rows(Var x);
/// tanh-approximated GELU.
Var gelu(Var a);
Var tanh(Var a);

Var sum(Var a);
Var sum_squares(Var a);
/// Frobenius / L2 norm over all elements; the gradient at zero is taken as zero.
Var l2_norm(Var a);
/// Sum over rows r of -log softmax(logits[r])[targets[r]].
Var cross_entropy(Var logits, std::span<const int> targets);

/// Rows of `table` at `ids` (embedding lookup).
Var gather_rows(Var table, std::span<const int> ids);
Var slice_rows(Var a, int begin, int end);
Var slice_cols(Var a, int begin, int end);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// Elements at flat indices, as a 1 x n row.
Var select(Var a, std::span<const int> flat_indices);
Var reshape(Var a, Shape shape);

}  // namespace rpt
