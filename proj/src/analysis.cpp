#include "fedilc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "fedilc/aggregation.hpp"
#include "fedilc/random.hpp"

namespace fedilc {

void QuadEnv::validate() const {
    const std::size_t k = theta_star.size();
    if (k == 0 || hessian.rows() != k || hessian.cols() != k) throw std::invalid_argument("QuadEnv: shape mismatch");
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            if (std::abs(hessian(i, j) - hessian(j, i)) > 1e-12) throw std::invalid_argument("QuadEnv: Hessian not symmetric");
        }
    }
}

double QuadEnv::loss(std::span<const double> theta) const {
    const std::size_t k = theta_star.size();
    double q = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) q += (theta[i] - theta_star[i]) * hessian(i, j) * (theta[j] - theta_star[j]);
    }
    return offset + 0.5 * q;
}

std::vector<double> QuadEnv::gradient(std::span<const double> theta) const {
    const std::size_t k = theta_star.size();
    std::vector<double> g(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) g[i] += hessian(i, j) * (theta[j] - theta_star[j]);
    }
    return g;
}

std::vector<double> sym_eigenvalues(const Matrix& h) {
    const std::size_t k = h.rows();
    if (k == 0 || h.cols() != k) throw std::invalid_argument("sym_eigenvalues: matrix must be square");
    if (k > 16) throw std::invalid_argument("sym_eigenvalues: at most 16x16");
    Matrix a = h;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            if (std::abs(a(i, j) - a(j, i)) > 1e-9) throw std::invalid_argument("sym_eigenvalues: matrix not symmetric");
            const double avg = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = avg;
            a(j, i) = avg;
        }
    }

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        double total = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                total += a(i, j) * a(i, j);
                if (i != j) off += a(i, j) * a(i, j);
            }
        }
        if (off <= 1e-30 * total || off == 0.0) break;
        for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t q = p + 1; q < k; ++q) {
                if (a(p, q) == 0.0) continue;
                // Rotation zeroing a(p,q) (Golub & Van Loan, symmetric Schur).
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t r = 0; r < k; ++r) {
                    const double arp = a(r, p);
                    const double arq = a(r, q);
                    a(r, p) = c * arp - s * arq;
                    a(r, q) = s * arp + c * arq;
                }
                for (std::size_t r = 0; r < k; ++r) {
                    const double apr = a(p, r);
                    const double aqr = a(q, r);
                    a(p, r) = c * apr - s * aqr;
                    a(q, r) = s * apr + c * aqr;
                }
            }
        }
    }
    std::vector<double> eig(k);
    for (std::size_t i = 0; i < k; ++i) eig[i] = a(i, i);
    std::sort(eig.begin(), eig.end());
    return eig;
}

double inconsistency_score(const QuadEnv& a, const QuadEnv& b, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("inconsistency_score: eps must be > 0");
    a.validate();
    b.validate();
    if (a.theta_star.size() != b.theta_star.size()) throw std::invalid_argument("inconsistency_score: dimension mismatch");
    const auto la = sym_eigenvalues(a.hessian);
    const auto lb = sym_eigenvalues(b.hessian);
    if (la.front() <= 0.0 || lb.front() <= 0.0) throw std::invalid_argument("inconsistency_score: Hessian not positive definite");
    double worst = 1.0;
    for (std::size_t i = 0; i < la.size(); ++i) worst = std::max({worst, lb[i] / la[i], la[i] / lb[i]});
    return eps * worst;
}

double BasinEnv::loss(std::span<const double> theta) const {
    if (basins.size() == 1) return basins.front().loss(theta);
    double qmin = std::numeric_limits<double>::infinity();
    std::vector<double> q;
    for (const auto& b : basins) {
        q.push_back(b.loss(theta));
        qmin = std::min(qmin, q.back());
    }
    double sum = 0.0;
    for (double v : q) sum += std::exp(-(v - qmin) / tau);
    return qmin - tau * std::log(sum);
}

std::vector<double> BasinEnv::gradient(std::span<const double> theta) const {
    if (basins.size() == 1) return basins.front().gradient(theta);
    std::vector<double> q;
    double qmin = std::numeric_limits<double>::infinity();
    for (const auto& b : basins) {
        q.push_back(b.loss(theta));
        qmin = std::min(qmin, q.back());
    }
    std::vector<double> w(q.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        w[i] = std::exp(-(q[i] - qmin) / tau);
        sum += w[i];
    }
    std::vector<double> g(dim(), 0.0);
    for (std::size_t i = 0; i < basins.size(); ++i) {
        const auto gi = basins[i].gradient(theta);
        for (std::size_t c = 0; c < g.size(); ++c) g[c] += (w[i] / sum) * gi[c];
    }
    return g;
}

const QuadEnv& BasinEnv::dominant(std::span<const double> theta) const {
    std::size_t best = 0;
    double best_q = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < basins.size(); ++i) {
        const double q = basins[i].loss(theta);
        if (q < best_q) {
            best_q = q;
            best = i;
        }
    }
    return basins[best];
}

namespace {

std::vector<double> descend(const BasinEnv& a, const BasinEnv& b, std::span<const double> start, std::size_t steps,
                            double lr, bool geometric) {
    std::vector<double> theta(start.begin(), start.end());
    for (std::size_t s = 0; s < steps; ++s) {
        const auto ga = a.gradient(theta);
        const auto gb = b.gradient(theta);
        const std::span<const double> set[] = {ga, gb};
        const auto g = geometric ? weighted_geo_mean(set) : arith_mean(set);
        double norm = 0.0;
        for (std::size_t c = 0; c < theta.size(); ++c) {
            theta[c] -= lr * g[c];
            norm += theta[c] * theta[c];
        }
        if (!(std::sqrt(norm) <= 1e6)) throw std::runtime_error("compare_minimizer_consistency: iterate diverged");
    }
    return theta;
}

}  // namespace

ConsistencyComparison compare_minimizer_consistency(const BasinEnv& a, const BasinEnv& b,
                                                    std::span<const double> start, std::size_t steps, double lr,
                                                    double eps) {
    if (a.basins.empty() || b.basins.empty()) throw std::invalid_argument("compare_minimizer_consistency: empty environment");
    for (const auto& env : {&a, &b}) {
        for (const auto& basin : env->basins) {
            basin.validate();
            if (basin.theta_star.size() != start.size()) throw std::invalid_argument("compare_minimizer_consistency: dimension mismatch");
        }
    }
    ConsistencyComparison out;
    out.end_arith = descend(a, b, start, steps, lr, false);
    out.end_geo = descend(a, b, start, steps, lr, true);
    out.score_arith = inconsistency_score(a.dominant(out.end_arith), b.dominant(out.end_arith), eps);
    out.score_geo = inconsistency_score(a.dominant(out.end_geo), b.dominant(out.end_geo), eps);
    return out;
}

// Both environments share a wide approach basin around (-4,-4) whose x
// curvatures are 1.0 and 0.01 (geometric mean 0.1, equal to the y curvature),
// so the geometric rule descends the diagonal while the arithmetic rule runs
// along x first. Environment A alone has a sharp well on that path. A flat
// shared basin sits at the bottom of the approach basin.
CurvatureToy mismatched_curvature_toy(std::uint64_t seed) {
    auto diag = [](double x, double y) {
        Matrix h(2, 2);
        h(0, 0) = x;
        h(1, 1) = y;
        return h;
    };
    const std::vector<double> centre{-4.0, -4.0};
    const QuadEnv shared{diag(1.0, 1.0), centre, -1.0};
    const QuadEnv approach_a{diag(1.0, 0.1), centre, 0.0};
    const QuadEnv approach_b{diag(0.01, 0.1), centre, 0.0};
    const QuadEnv sharp_well{diag(5.0, 5.0), {-3.6, -1.4}, -0.5};

    CurvatureToy toy;
    toy.a = BasinEnv({approach_a, shared, sharp_well}, 0.1);
    toy.b = BasinEnv({approach_b, shared}, 0.1);
    Rng rng(seed);
    toy.start = {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    return toy;
}

}  // namespace fedilc
