#include <doctest.h>

#include <cmath>
#include <vector>

#include "fedilc/nn.hpp"
#include "fedilc/random.hpp"

using namespace fedilc;

namespace {

Batch random_batch(const ModelSpec& spec, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Batch b;
    b.inputs = Matrix(n, spec.input_size());
    for (double& x : b.inputs.values()) x = rng.normal();
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(rng.below(spec.output_size() == 1 ? 2 : spec.output_size())));
    return b;
}

double fd_max_rel_error(const ModelSpec& spec, ParamVector params, const Batch& batch) {
    const ParamVector g = backward_full(spec, params, batch);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params.values()[i];
        params.values()[i] = saved + h;
        const double up = compute_loss(forward(spec, params, batch.inputs).logits, batch.labels, spec.head);
        params.values()[i] = saved - h;
        const double down = compute_loss(forward(spec, params, batch.inputs).logits, batch.labels, spec.head);
        params.values()[i] = saved;
        const double fd = (up - down) / (2 * h);
        const double err = std::abs(fd - g.values()[i]) / std::max(1e-6, std::abs(fd) + std::abs(g.values()[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace

TEST_CASE("layout of a [4,8,1] network") {
    const ModelSpec spec{{4, 8, 1}};
    const auto layout = make_layout(spec);
    REQUIRE(layout.size() == 2);
    CHECK(layout[0].offset == 0);
    CHECK(layout[0].bias_offset() == 32);
    CHECK(layout[1].offset == 40);
    CHECK(layout[1].bias_offset() == 48);
    CHECK(layout[1].end() == 49);
    CHECK(spec.head_size() == 9);
    ParamVector p(spec);
    CHECK(p.size() == 49);
    CHECK(p.head_offset() == 40);
    CHECK(p.head_block().size() == 9);
}

TEST_CASE("invalid specs are rejected") {
    CHECK_THROWS_AS(ModelSpec{{4}}.validate(), std::invalid_argument);
    CHECK_THROWS_AS((ModelSpec{{4, 0, 1}}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((ModelSpec{{4, 8, 1}, Activation::relu, Head::softmax_ce}.validate()), std::invalid_argument);
}

TEST_CASE("init is deterministic and Glorot bounded") {
    const ModelSpec spec{{20, 30, 1}};
    const ParamVector a = init_params(spec, 7);
    CHECK(a == init_params(spec, 7));
    CHECK_FALSE(a == init_params(spec, 8));
    const double limit0 = std::sqrt(6.0 / (20 + 30));
    for (double w : a.weights(0)) CHECK(std::abs(w) <= limit0);
    for (double b : a.bias(0)) CHECK(b == 0.0);
    for (double b : a.bias(1)) CHECK(b == 0.0);
}

TEST_CASE("BCE matches the naive formula and stays finite at extreme logits") {
    const Matrix z(3, 1, std::vector<double>{0.3, -1.2, 2.0});
    const std::vector<int> y{1, 0, 0};
    double naive = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-z(i, 0)));
        naive -= y[i] ? std::log(s) : std::log(1.0 - s);
    }
    CHECK(compute_loss(z, y, Head::sigmoid_bce) == doctest::Approx(naive / 3).epsilon(1e-14));

    const Matrix big(2, 1, std::vector<double>{800.0, -800.0});
    CHECK(compute_loss(big, std::vector<int>{0, 1}, Head::sigmoid_bce) == doctest::Approx(800.0));
    CHECK(compute_loss(big, std::vector<int>{1, 0}, Head::sigmoid_bce) == doctest::Approx(0.0));
}

TEST_CASE("CE matches the naive formula and stays finite at extreme logits") {
    const Matrix z(1, 3, std::vector<double>{0.5, -0.25, 1.5});
    const double lse = std::log(std::exp(0.5) + std::exp(-0.25) + std::exp(1.5));
    CHECK(compute_loss(z, std::vector<int>{1}, Head::softmax_ce) == doctest::Approx(lse + 0.25).epsilon(1e-14));
    const Matrix big(1, 2, std::vector<double>{1000.0, 0.0});
    CHECK(compute_loss(big, std::vector<int>{1}, Head::softmax_ce) == doctest::Approx(1000.0));
}

TEST_CASE("loss_and_grad agrees with central differences") {
    SUBCASE("sigmoid [4,8,1]") {
        const ModelSpec spec{{4, 8, 1}};
        CHECK(fd_max_rel_error(spec, init_params(spec, 3), random_batch(spec, 16, 11)) < 1e-4);
    }
    SUBCASE("softmax [5,6,7,3]") {
        const ModelSpec spec{{5, 6, 7, 3}, Activation::relu, Head::softmax_ce};
        CHECK(fd_max_rel_error(spec, init_params(spec, 4), random_batch(spec, 12, 12)) < 1e-4);
    }
}

TEST_CASE("mean of per-sample head gradients equals the head block of the full gradient") {
    for (const ModelSpec& spec : {ModelSpec{{4, 8, 1}}, ModelSpec{{3, 5, 4}, Activation::relu, Head::softmax_ce}}) {
        const ParamVector p = init_params(spec, 5);
        const Batch b = random_batch(spec, 10, 6);
        const Matrix g = per_sample_head_grads(spec, p, b);
        const ParamVector full = backward_full(spec, p, b);
        REQUIRE(g.cols() == spec.head_size());
        for (std::size_t c = 0; c < g.cols(); ++c) {
            double m = 0.0;
            for (std::size_t i = 0; i < g.rows(); ++i) m += g(i, c);
            CHECK(m / 10.0 == doctest::Approx(full.head_block()[c]).epsilon(1e-12));
        }
    }
}

TEST_CASE("adam_step follows the closed form for one coordinate") {
    AdamState s;
    s.lr = 0.1;
    s.weight_decay = 0.5;
    s = s.fresh(1);
    std::vector<double> w{2.0};
    const std::vector<double> g{0.4};
    adam_step(s, w, g);
    // After one step m_hat = g and v_hat = g^2.
    const double expect = 2.0 * (1 - 0.1 * 0.5) - 0.1 * 0.4 / (0.4 + 1e-8);
    CHECK(w[0] == doctest::Approx(expect).epsilon(1e-15));
    CHECK(s.t == 1);

    adam_step(s, w, g);
    const double m = 0.9 * 0.04 + 0.1 * 0.4;
    const double v = 0.999 * 0.00016 + 0.001 * 0.16;
    const double m_hat = m / (1 - 0.81);
    const double v_hat = v / (1 - 0.999 * 0.999);
    CHECK(w[0] == doctest::Approx(expect * 0.95 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-14));
}

TEST_CASE("sgd_step applies decoupled decay") {
    std::vector<double> w{1.0, -2.0};
    sgd_step(0.1, 0.2, w, std::vector<double>{0.5, 1.0});
    CHECK(w[0] == doctest::Approx(0.98 - 0.05));
    CHECK(w[1] == doctest::Approx(-1.96 - 0.1));
    CHECK_THROWS_AS(sgd_step(0.1, 0.0, w, std::vector<double>{1.0}), std::invalid_argument);
}
