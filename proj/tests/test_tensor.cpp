#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "cobalt/rng.hpp"
#include "cobalt/tensor.hpp"

using namespace cobalt;

namespace {

TensorPtr random_param(Rng& rng, std::vector<int> shape, double scale = 1.0) {
    auto t = make_tensor(std::move(shape), true);
    for (auto& v : t->values) v = rng.normal(0.0, scale);
    return t;
}

// Independent central-difference probe for a single differentiable op wired
// as param -> op -> sum. Uses its own loop, not grad_check, so the harness
// itself is exercised separately.
double fd_probe(const std::function<TensorPtr(Tape&, const TensorPtr&)>& apply, TensorPtr param) {
    Tape tape;
    auto loss = ops::sum_all(&tape, apply(tape, param));
    tape.backward(loss);
    auto analytic = param->grad;
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < param->size(); ++i) {
        const double saved = param->values[i];
        param->values[i] = saved + h;
        Tape tp;
        const double fp = ops::sum_all(&tp, apply(tp, param))->values[0];
        param->values[i] = saved - h;
        Tape tm;
        const double fm = ops::sum_all(&tm, apply(tm, param))->values[0];
        param->values[i] = saved;
        const double num = (fp - fm) / (2 * h);
        worst = std::max(worst, std::abs(analytic[i] - num) /
                                    std::max({1.0, std::abs(analytic[i]), std::abs(num)}));
    }
    return worst;
}

} // namespace

TEST_CASE("softmax: symmetry, derived value, temperature identity") {
    auto u = softmax(std::vector<double>{0.0, 0.0, 0.0}, 1.0);
    CHECK(u[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(u[1] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(u[2] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    // exp(ln 2) / (exp(ln 2) + 1) = 2/3 by direct evaluation
    auto v = softmax(std::vector<double>{std::log(2.0), 0.0}, 1.0);
    CHECK(v[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(v[1] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> x(5);
        for (auto& xi : x) xi = rng.uniform(-3, 3);
        const double tau = rng.uniform(0.05, 2.0);
        std::vector<double> xs(x);
        for (auto& xi : xs) xi /= tau;
        auto a = softmax(x, tau);
        auto b = softmax(xs, 1.0);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
}

TEST_CASE("softmax: sums to one for large-magnitude input, rejects bad input") {
    Rng rng(11);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> x(8);
        for (auto& xi : x) xi = rng.uniform(-700, 700);
        auto p = softmax(x, 1.0);
        double s = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    CHECK_THROWS_AS(softmax(std::vector<double>{1.0, 2.0}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(softmax(std::vector<double>{1.0, 2.0}, -1.0), std::invalid_argument);
    CHECK_THROWS_AS(softmax(std::vector<double>{1.0, std::nan("")}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(softmax(std::vector<double>{1.0, INFINITY}, 1.0), std::invalid_argument);
}

TEST_CASE("l2_normalize: Pythagorean oracle, idempotence, zero rejection") {
    auto n = l2_normalized(std::vector<double>{3.0, 4.0}); // norm 5
    CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(std::abs(l2_norm(n) - 1.0) <= 1e-12);

    Rng rng(3);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<double> v(6);
        for (auto& x : v) x = rng.normal();
        auto u = l2_normalized(v);
        auto uu = l2_normalized(u);
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(uu[i] == doctest::Approx(u[i]).epsilon(1e-12));
    }

    CHECK_THROWS_WITH_AS(static_cast<void>(l2_normalized(std::vector<double>{0.0, 0.0}, "slot row 4")),
                         doctest::Contains("slot row 4"), std::invalid_argument);
}

TEST_CASE("cross_entropy: perfect prediction, ln 2, clamp boundary, bad index") {
    CHECK(cross_entropy(0, std::vector<double>{1.0, 0.0}) == doctest::Approx(0.0).epsilon(1e-11));
    CHECK(cross_entropy(1, std::vector<double>{0.5, 0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const double lo = cross_entropy(0, std::vector<double>{kEpsProb, 1.0 - kEpsProb});
    CHECK(lo == doctest::Approx(-std::log(kEpsProb)).epsilon(1e-12));
    // below the clamp behaves like the clamp
    CHECK(cross_entropy(0, std::vector<double>{0.0, 1.0}) == doctest::Approx(-std::log(kEpsProb)).epsilon(1e-12));
    CHECK_THROWS_AS(cross_entropy(2, std::vector<double>{0.5, 0.5}), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy(-1, std::vector<double>{0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("grad_check: quadratic oracle, constant loss, bad step, nondeterminism") {
    auto w = make_tensor({1}, {3.0}, true);
    auto quad = [&](Tape& t) { return ops::mul(&t, w, w); };
    // f(w) = w^2, f'(3) = 6 analytically
    CHECK(grad_check(quad, {w}, 1e-5) <= 1e-8);

    auto c = make_tensor({1}, {2.5}, true);
    auto constant = [&](Tape& t) { return ops::scale(&t, c, 0.0); };
    CHECK(grad_check(constant, {c}, 1e-5) == 0.0);

    CHECK_THROWS_AS(grad_check(quad, {w}, 1e-2), std::invalid_argument);
    CHECK_THROWS_AS(grad_check(quad, {w}, 1e-8), std::invalid_argument);

    int calls = 0;
    auto fickle = [&](Tape& t) {
        ++calls;
        return ops::scale(&t, w, static_cast<double>(calls));
    };
    CHECK_THROWS_AS(grad_check(fickle, {w}, 1e-5), std::invalid_argument);
}

TEST_CASE("every differentiable op agrees with central differences") {
    Rng rng(42);

    auto p1 = random_param(rng, {3, 4});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              auto b = make_tensor({4, 2}, {0.3, -1, 0.7, 2, -0.2, 0.5, 1.1, -0.4});
              return ops::matmul(&t, p, b);
          }, p1) <= 1e-6);

    auto p2 = random_param(rng, {3, 4});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              auto b = make_tensor({2, 4}, {0.3, -1, 0.7, 2, -0.2, 0.5, 1.1, -0.4});
              return ops::matmul_nt(&t, p, b);
          }, p2) <= 1e-6);

    auto p3 = random_param(rng, {2, 3});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              auto b = make_tensor({2, 3}, {1, 2, 3, 4, 5, 6});
              return ops::mul(&t, ops::add(&t, p, b), ops::sub(&t, p, b));
          }, p3) <= 1e-6);

    auto p4 = random_param(rng, {3, 2});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              auto bias = make_tensor({2}, {0.5, -0.25});
              return ops::relu(&t, ops::add_rowvec(&t, p, bias));
          }, p4) <= 1e-6);

    auto p5 = random_param(rng, {3, 4});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              return ops::row_l2_normalize(&t, p, "test row");
          }, p5) <= 1e-6);

    auto p6 = random_param(rng, {4, 3});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              return ops::softmax_cols(&t, p, 0.3);
          }, p6) <= 1e-6);

    auto p7 = random_param(rng, {3, 5});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              auto codes = make_tensor({2, 5}, std::vector<double>(10, 0.4));
              return ops::sqdist_cols(&t, codes, p);
          }, p7) <= 1e-6);

    auto p8 = random_param(rng, {2, 3});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              // keep values well above the clamp before taking logs
              auto shifted = ops::add(&t, ops::mul(&t, p, p), make_tensor({2, 3}, std::vector<double>(6, 0.5)));
              return ops::log_clamped(&t, shifted);
          }, p8) <= 1e-6);

    auto p9 = random_param(rng, {2, 4});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              return ops::mul_const(&t, p, {1, 0, 1, 1, 0, 1, 0, 1});
          }, p9) <= 1e-6);

    auto p10 = random_param(rng, {3, 3});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              auto other = make_tensor({3, 3}, {1, 0, 2, -1, 0.5, 0.25, 2, 1, -0.75});
              return ops::rows_dot(&t, p, other);
          }, p10) <= 1e-6);

    auto p11 = random_param(rng, {6});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              return ops::select(&t, p, {4, 1, 1, 5});
          }, p11) <= 1e-6);

    auto p12 = random_param(rng, {4, 2});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              return ops::slice_rows(&t, p, 1, 2);
          }, p12) <= 1e-6);

    auto p13 = random_param(rng, {5});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              return ops::logsumexp(&t, p);
          }, p13) <= 1e-6);

    auto p14 = random_param(rng, {3, 4});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              return ops::mean_all(&t, p);
          }, p14) <= 1e-6);

    auto p15 = random_param(rng, {4, 3});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              return ops::softmax_xent_rows(&t, p, {2, 0, 1, 1});
          }, p15) <= 1e-6);

    auto p16 = random_param(rng, {2, 2});
    CHECK(fd_probe([&](Tape& t, const TensorPtr& p) {
              return ops::scale(&t, p, -1.75);
          }, p16) <= 1e-6);
}

TEST_CASE("backward replay is bitwise deterministic") {
    Rng rng(99);
    auto a = random_param(rng, {3, 3});
    auto b = random_param(rng, {3, 3});
    Tape tape;
    auto h = ops::relu(&tape, ops::matmul(&tape, a, b));
    auto loss = ops::sum_all(&tape, ops::row_l2_normalize(&tape, ops::add(&tape, h, b)));
    tape.backward(loss);
    auto ga = a->grad;
    auto gb = b->grad;
    tape.backward(loss);
    CHECK(std::memcmp(ga.data(), a->grad.data(), ga.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(gb.data(), b->grad.data(), gb.size() * sizeof(double)) == 0);
}

TEST_CASE("detach cuts the gradient path") {
    auto w = make_tensor({2}, {1.5, -0.5}, true);
    Tape tape;
    auto y = ops::mul(&tape, w, w);
    auto frozen = detach(y);
    CHECK_FALSE(frozen->requires_grad);
    auto loss = ops::sum_all(&tape, ops::mul(&tape, y, frozen));
    tape.backward(loss);
    // d/dw sum(w^2 * c) with c = w^2 treated constant: 2*w*c
    CHECK(w->grad[0] == doctest::Approx(2 * 1.5 * (1.5 * 1.5)).epsilon(1e-12));
    CHECK(w->grad[1] == doctest::Approx(2 * -0.5 * (0.25)).epsilon(1e-12));
}

TEST_CASE("plain mode records nothing") {
    auto a = make_tensor({2, 2}, {1, 2, 3, 4}, true);
    auto out = ops::matmul(nullptr, a, a);
    CHECK_FALSE(out->requires_grad);
    CHECK(out->at(0, 0) == doctest::Approx(7.0));
    Tape tape;
    auto c = make_tensor({2, 2}, {1, 2, 3, 4});
    auto out2 = ops::matmul(&tape, c, c);
    CHECK_FALSE(out2->requires_grad);
    CHECK(tape.op_count() == 0);
}

TEST_CASE("sgd momentum matches hand-computed trajectory") {
    auto w = make_tensor({1}, {1.0}, true);
    SgdMomentum opt({w}, 0.1, 0.9, 0.0);
    // constant gradient of 1: v1 = -0.1, w = 0.9; v2 = -0.19, w = 0.71
    w->grad.assign(1, 1.0);
    opt.step();
    CHECK(w->values[0] == doctest::Approx(0.9).epsilon(1e-12));
    w->grad.assign(1, 1.0);
    opt.step();
    CHECK(w->values[0] == doctest::Approx(0.71).epsilon(1e-12));
}
