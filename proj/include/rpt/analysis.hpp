#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rpt/model.hpp"

namespace rpt {

/// Sum over steps k < o of the probability of the realized next token, plus the
/// largest label-set probability at o.
double decision_function(const MicroLM& model, const PrefixParameters& prefix, const SampleFrame& frame,
                         std::span<const Token> labels, const RobustPrefix* robust = nullptr);

/// Head-averaged gradient x attention importance over non-prefix tokens.
/// `raw` is I' before the row transform; `normalized` has each row min-subtracted
/// and scaled to sum 1 over its visible entries. Both are lower-triangular.
struct ImportanceMatrix {
  Tensor raw;
  Tensor normalized;
};

/// With `drop_cls` the leading [CLS] row and column are removed, so column 0 is
/// the first context token.
ImportanceMatrix importance_matrix(const MicroLM& model, const PrefixParameters& prefix, const SampleFrame& frame,
                                   std::span<const Token> labels, const RobustPrefix* robust = nullptr,
                                   bool drop_cls = true);

/// Row transform: subtract the row minimum over j <= i, then normalize. Zero-sum rows become uniform.
Tensor normalize_importance(const Tensor& raw);

/// K[i][j] for j <= i: 1-indexed rank of column j in increasing importance order
/// (ties keep column order). The most important token at step i has rank i + 1.
using RankingMatrix = std::vector<std::vector<int>>;
RankingMatrix ranking_matrix(const Tensor& importance);

/// Mean over steps i = trigger_len .. n-1 of max(K[i][0..trigger_len-1]) / (i + 1) * 100.
/// nullopt when no such step exists.
std::optional<double> degree_of_distraction(const RankingMatrix& k, int trigger_len = 3);

/// Fraction of clean steps whose most important token is still most important
/// after the trigger shift (argmax ties resolve to the lowest index).
double recognition_of_essential(const Tensor& clean, const Tensor& attacked, int trigger_len = 3);

/// Two-sided bootstrap p-value for a difference in means, resampling both
/// groups around the pooled mean.
double bootstrap_test(std::span<const double> a, std::span<const double> b, int resamples = 10000,
                      std::uint64_t seed = 0);

double mean(std::span<const double> values);

/// Comma-separated grid, one row per line, fixed 6-digit precision.
std::string matrix_csv(const Tensor& m);

/// Terminal heat rendering; one character per cell, scaled per row.
std::string heat_text(const Tensor& m, std::span<const std::string> labels = {});

}  // namespace rpt
