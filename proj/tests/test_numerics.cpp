#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "grad_suite.hpp"
#include "povt/optim.hpp"

#include <cmath>

using namespace povt;
using namespace povt::testing;

namespace {

// Independent oracle: plain triple loop.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, int m,
                                 int n, int p) {
    std::vector<double> c(static_cast<size_t>(m) * p, 0.0);
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < n; ++k)
            for (int j = 0; j < p; ++j) c[i * p + j] += a[i * n + k] * b[k * p + j];
    return c;
}

// Independent oracle: direct log-sum-exp per row.
double naive_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                           const std::vector<uint8_t>& ignore) {
    const int m = logits.rows(), v = logits.cols();
    double total = 0.0;
    int used = 0;
    for (int i = 0; i < m; ++i) {
        if (!ignore.empty() && ignore[i]) continue;
        double mx = logits.data()[i * v];
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits.data()[i * v + j]);
        double s = 0.0;
        for (int j = 0; j < v; ++j) s += std::exp(logits.data()[i * v + j] - mx);
        total += mx + std::log(s) - logits.data()[i * v + targets[i]];
        ++used;
    }
    return total / used;
}

// Independent oracle: six nested loops over the cross-correlation.
std::vector<double> naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                                 int pad, int& Ho, int& Wo) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    Ho = (H + 2 * pad - kh) / stride + 1;
    Wo = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> y(static_cast<size_t>(B) * O * Ho * Wo, 0.0);
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o)
            for (int oi = 0; oi < Ho; ++oi)
                for (int oj = 0; oj < Wo; ++oj) {
                    double acc = bias.defined() ? bias.data()[o] : 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                const int ii = oi * stride - pad + ki;
                                const int ij = oj * stride - pad + kj;
                                if (ii < 0 || ii >= H || ij < 0 || ij >= W) continue;
                                acc += x.data()[((b * C + c) * H + ii) * W + ij] *
                                       w.data()[((o * C + c) * kh + ki) * kw + kj];
                            }
                    y[((b * O + o) * Ho + oi) * Wo + oj] = acc;
                }
    return y;
}

} // namespace

TEST_CASE("matmul identity and scalar cases") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor y = matmul(eye, a);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == a.data()[i]);

    Tensor s1 = Tensor::scalar(2.0), s2 = Tensor::scalar(3.0);
    s1 = reshape(s1, {1, 1});
    s2 = reshape(s2, {1, 1});
    CHECK(matmul(s1, s2).item() == doctest::Approx(6.0));

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("matmul matches naive triple-loop oracle") {
    Rng rng(11);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0);
    Tensor y = matmul(a, b);
    auto ref = naive_matmul(a.values(), b.values(), 3, 4, 2);
    for (int i = 0; i < 6; ++i) CHECK(std::fabs(y.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("cross entropy: uniform, stable, and oracle cases") {
    {
        Tensor logits({1, 2}, {0.0, 0.0});
        Tensor l = softmax_cross_entropy(logits, {0}, {});
        CHECK(l.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    {
        Tensor logits({1, 2}, {1000.0, 0.0});
        Tensor l = softmax_cross_entropy(logits, {0}, {});
        CHECK(std::isfinite(l.item()));
        CHECK(l.item() == doctest::Approx(0.0).epsilon(1e-9));
    }
    {
        Rng rng(7);
        Tensor logits = Tensor::randn({4, 7}, rng, 2.0);
        std::vector<int> tg{1, 6, 0, 3};
        std::vector<uint8_t> ign{0, 1, 0, 0};
        Tensor l = softmax_cross_entropy(logits, tg, ign);
        CHECK(std::fabs(l.item() - naive_cross_entropy(logits, tg, ign)) < 1e-10);
    }
    {
        Tensor logits({2, 3});
        CHECK_THROWS(softmax_cross_entropy(logits, {0, 1}, {1, 1}));
    }
}

TEST_CASE("conv2d: identity kernel, ones kernel, shape error") {
    Rng rng(3);
    Tensor x = Tensor::randn({1, 1, 4, 4}, rng, 1.0);
    Tensor w1({1, 1, 1, 1}, std::vector<double>{1.0});
    Tensor y = conv2d(x, w1, Tensor(), 1, 0);
    for (int i = 0; i < 16; ++i) CHECK(y.data()[i] == x.data()[i]);

    Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor xin = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor y2 = conv2d(xin, ones, Tensor(), 2, 0);
    CHECK(y2.size() == 1);
    CHECK(y2.item() == doctest::Approx(4.0));

    // (5 - 2) not divisible by stride 2
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 5, 5}), Tensor::zeros({1, 1, 2, 2}), Tensor(), 2, 0),
                    std::invalid_argument);
}

TEST_CASE("conv2d matches naive six-loop oracle") {
    Rng rng(23);
    Tensor x = Tensor::randn({2, 3, 6, 5}, rng, 1.0);
    Tensor w = Tensor::randn({4, 3, 3, 3}, rng, 1.0);
    Tensor b = Tensor::randn({4}, rng, 1.0);
    Tensor y = conv2d(x, w, b, 1, 1);
    int Ho = 0, Wo = 0;
    auto ref = naive_conv2d(x, w, b, 1, 1, Ho, Wo);
    REQUIRE(y.size() == static_cast<int64_t>(ref.size()));
    for (size_t i = 0; i < ref.size(); ++i) CHECK(std::fabs(y.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    // <conv(x), y> == <x, convT(y)> for matching geometry: a structural
    // identity that pins the scatter indexing independent of gradients.
    Rng rng(29);
    const int stride = 2, pad = 1, k = 4;
    Tensor x = Tensor::randn({1, 2, 8, 8}, rng, 1.0);
    Tensor w = Tensor::randn({3, 2, k, k}, rng, 1.0);
    Tensor y = Tensor::randn({1, 3, 4, 4}, rng, 1.0); // conv output shape
    Tensor cx = conv2d(x, w, Tensor(), stride, pad);
    // weight for transpose path laid out [in=3, out=2, k, k]
    Tensor wt({3, 2, k, k}, w.values());
    Tensor ty = conv_transpose2d(y, wt, Tensor(), stride, pad);
    double lhs = 0.0, rhs = 0.0;
    for (int64_t i = 0; i < cx.size(); ++i) lhs += cx.data()[i] * y.data()[i];
    for (int64_t i = 0; i < x.size(); ++i) rhs += x.data()[i] * ty.data()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("backward: x*x at 3 gives 6; sum(matmul) gives ones * B^T") {
    {
        Tensor x({1}, std::vector<double>{3.0}, true);
        Tape tape;
        Tensor y = mul(x, x);
        tape.backward(y);
        CHECK(x.grad()[0] == doctest::Approx(6.0));
    }
    {
        Rng rng(5);
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 2}, rng, 1.0);
        Tape tape;
        Tensor l = sum_all(matmul(a, b));
        tape.backward(l);
        // dA = ones(3,2) * B^T: row-independent, dA[i][k] = sum_j B[k][j]
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 4; ++k) {
                double expect = 0.0;
                for (int j = 0; j < 2; ++j) expect += b.data()[k * 2 + j];
                CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
            }
    }
    {
        Tensor x({2}, {1.0, 2.0}, true);
        Tape tape;
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), std::invalid_argument); // non-scalar loss
    }
}

TEST_CASE("softmax rows sum to one within 1e-12, masked rows exact-zero") {
    Rng rng(17);
    Tensor x = Tensor::randn({6, 9}, rng, 3.0);
    std::vector<uint8_t> allow(6 * 9, 0);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 9; ++j) allow[i * 9 + j] = (j <= i + 2) ? 1 : 0;
    Tensor y = softmax_rows(x, &allow);
    for (int i = 0; i < 6; ++i) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) {
            s += y.data()[i * 9 + j];
            if (!allow[i * 9 + j]) CHECK(y.data()[i * 9 + j] == 0.0);
        }
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }
    std::vector<uint8_t> empty_row(2 * 2, 0);
    CHECK_THROWS(softmax_rows(Tensor::zeros({2, 2}), &empty_row));
}

TEST_CASE("forward and gradients are bit-identical across repeated runs") {
    auto run_once = [](uint64_t seed) {
        Rng rng(seed);
        Tensor a = Tensor::randn({4, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 4}, rng, 1.0, true);
        Tape tape;
        Tensor y = sum_all(gelu(matmul(a, b)));
        tape.backward(y);
        std::vector<double> out{y.item()};
        out.insert(out.end(), a.grad().begin(), a.grad().end());
        out.insert(out.end(), b.grad().begin(), b.grad().end());
        return out;
    };
    auto r1 = run_once(99), r2 = run_once(99);
    REQUIRE(r1.size() == r2.size());
    for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]); // exact
}

TEST_CASE("gradient suite: every op passes central differences on random shapes") {
    auto reports = run_gradient_suite(1234, 10);
    for (const auto& rep : reports) {
        INFO(rep.op, " max rel err ", rep.max_err);
        CHECK(rep.ok);
    }
}

TEST_CASE("adam reduces a convex objective and zeroes grads") {
    Rng rng(41);
    Tensor x = Tensor::randn({8}, rng, 1.0, true);
    Adam opt({x}, 0.1);
    double first = 0.0, last = 0.0;
    for (int it = 0; it < 60; ++it) {
        Tape tape;
        Tensor l = sum_all(mul(x, x));
        if (it == 0) first = l.item();
        last = l.item();
        tape.backward(l);
        opt.clip_global_norm(100.0);
        opt.step();
    }
    CHECK(last < first * 0.01);
    CHECK(!x.has_grad());
}
