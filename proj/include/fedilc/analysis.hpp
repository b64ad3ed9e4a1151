#pragma once

// Inconsistency Score for pairs of environments with quadratic basins, and a
// small gradient-descent experiment comparing arithmetic and weighted
// geometric aggregation of the two environments' gradients.

#include <cstdint>
#include <span>
#include <vector>

#include "fedilc/matrix.hpp"

namespace fedilc {

/// Quadratic loss offset + 1/2 (theta - theta_star)^T H (theta - theta_star).
struct QuadEnv {
    Matrix hessian;  // symmetric positive definite, k x k
    std::vector<double> theta_star;
    double offset = 0.0;

    void validate() const;
    double loss(std::span<const double> theta) const;
    std::vector<double> gradient(std::span<const double> theta) const;
};

/// Ascending eigenvalues of a small symmetric matrix (cyclic Jacobi).
/// Throws when asymmetry exceeds 1e-9 or the matrix is larger than 16x16.
std::vector<double> sym_eigenvalues(const Matrix& h);

/// eps * max_i max(lambda_i^B / lambda_i^A, lambda_i^A / lambda_i^B), with
/// eigenvalues paired in ascending order.
double inconsistency_score(const QuadEnv& a, const QuadEnv& b, double eps);

/// Environment made of several quadratic basins combined by a soft minimum
/// with temperature tau: L = -tau log sum_b exp(-q_b / tau). A single-basin
/// environment is exactly its quadratic.
struct BasinEnv {
    std::vector<QuadEnv> basins;
    double tau = 0.5;

    BasinEnv() = default;
    BasinEnv(QuadEnv single) : basins{std::move(single)} {}  // NOLINT(google-explicit-constructor)
    BasinEnv(std::vector<QuadEnv> b, double temperature) : basins(std::move(b)), tau(temperature) {}

    std::size_t dim() const { return basins.front().theta_star.size(); }
    double loss(std::span<const double> theta) const;
    std::vector<double> gradient(std::span<const double> theta) const;
    /// Basin with the lowest quadratic value at theta.
    const QuadEnv& dominant(std::span<const double> theta) const;
};

struct ConsistencyComparison {
    double score_arith;
    double score_geo;
    std::vector<double> end_arith;
    std::vector<double> end_geo;
};

/// Runs `steps` of gradient descent from `start` on the pair (a, b) twice,
/// combining the two gradients by arithmetic mean and by weighted geometric
/// mean, then scores each end point with the Hessians of the basins dominant
/// there. Throws std::runtime_error if an iterate's norm exceeds 1e6.
ConsistencyComparison compare_minimizer_consistency(const BasinEnv& a, const BasinEnv& b,
                                                    std::span<const double> start, std::size_t steps, double lr,
                                                    double eps);

/// Two-dimensional toy with one shared flat basin and one basin that is sharp
/// only in the first environment. `seed` jitters the start point.
struct CurvatureToy {
    BasinEnv a;
    BasinEnv b;
    std::vector<double> start;
};
CurvatureToy mismatched_curvature_toy(std::uint64_t seed);

}  // namespace fedilc
