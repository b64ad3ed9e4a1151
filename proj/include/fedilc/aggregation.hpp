#pragma once

// Cross-environment gradient aggregation and the gradient-variance (Fishr)
// regularizer restricted to the final linear layer.

#include <cstddef>
#include <span>
#include <vector>

#include "fedilc/matrix.hpp"
#include "fedilc/nn.hpp"

namespace fedilc {

/// One gradient per environment (client, chunk or sample), all the same
/// length. Aggregations visit environments in the given order; callers that
/// need order independence sort by environment id first.
using GradientSet = std::span<const std::span<const double>>;

/// Coordinatewise arithmetic mean.
std::vector<double> arith_mean(GradientSet grads);

/// Sign-partitioned weighted geometric mean. Per coordinate, environments
/// with G >= 0 form the positive group P and the rest the negative group N:
///
///   (|P|/|E|) * (prod_P |G|)^(1/|P|)  -  (|N|/|E|) * (prod_N |G|)^(1/|N|)
///
/// An empty group contributes 0. Zeros join P, so a single zero cancels the
/// positive term. Products are evaluated as exp(mean(log|G|)).
std::vector<double> weighted_geo_mean(GradientSet grads);

/// Geometric mean of absolute values, sign discarded. Comparison baseline.
std::vector<double> abs_geo_mean(GradientSet grads);

struct VarianceDiag {
    std::vector<double> values;
    std::size_t sample_count = 1;

    friend bool operator==(const VarianceDiag&, const VarianceDiag&) = default;
};

/// Population variance (divide by n) of each column; rows are per-sample gradients.
VarianceDiag grad_variance_diag(const Matrix& per_sample);

/// Coordinatewise mean of the variance vectors.
std::vector<double> mean_variance(std::span<const VarianceDiag> diags);

/// (1/|E|) sum_e || v_e - mean(v) ||^2
double fishr_loss(std::span<const VarianceDiag> diags);

/// || v(batch) - target ||^2 where v is the head-gradient variance of the batch.
double fishr_penalty(const ModelSpec& spec, const ForwardResult& fwd, std::span<const int> labels,
                     std::span<const double> target);

/// Gradient of fishr_penalty with respect to the final-layer parameters
/// (weights row-major, then bias). Penultimate activations are constants:
/// they do not depend on the final layer.
std::vector<double> fishr_penalty_grad(const ModelSpec& spec, const ForwardResult& fwd, std::span<const int> labels,
                                       std::span<const double> target);
std::vector<double> fishr_penalty_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                                       std::span<const double> target);

}  // namespace fedilc
