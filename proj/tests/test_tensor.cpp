#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "wecolora/gradcheck.hpp"
#include "wecolora/rng.hpp"
#include "wecolora/tensor.hpp"

using namespace wecolora;

namespace {

// Independent triple-loop reference for matmul.
Tensor matmul_ref(const Tensor& a, const Tensor& b) {
    const int m = a.rows(), p = a.cols(), n = b.cols();
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int k = 0; k < p; ++k)
                acc += static_cast<double>(a.at(i, k)) * b.at(k, j);
            out.at(i, j) = static_cast<float>(acc);
        }
    return out;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double magnitude = 2.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
        t.data()[i] = static_cast<float>(rng.uniform(-magnitude, magnitude));
    return t;
}

bool grad_close(const Tensor& analytic, const Tensor& fd) {
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic.data()[i], f = fd.data()[i];
        const double tol = std::max(1e-2 * std::max(std::fabs(a), std::fabs(f)), 1e-4);
        if (std::fabs(a - f) > tol) {
            MESSAGE("element ", i, ": analytic ", a, " vs finite-diff ", f);
            return false;
        }
    }
    return true;
}

// Checks backward() against the central-difference oracle for the scalar
// loss sum(op_output * weights), with fixed random weights so per-element
// gradient errors cannot cancel. The oracle accumulates the weighted sum in
// double to stay above the float32 noise floor.
void check_gradients(const std::function<Tensor(const std::vector<Tensor>&)>& op,
                     std::vector<Tensor> inputs, Rng& rng) {
    Tensor probe;
    {
        NoTapeScope no_tape;
        probe = op(inputs);
    }
    Tensor weights = random_tensor(probe.shape(), rng, 1.0);

    auto loss_value = [&](const std::vector<Tensor>& ins) {
        NoTapeScope no_tape;
        Tensor out = op(ins);
        double acc = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i)
            acc += static_cast<double>(out.data()[i]) * weights.data()[i];
        return acc;
    };

    for (Tensor& in : inputs) in.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = sum(mul(op(inputs), weights));
        backward(loss);
    }
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        Tensor fd = finite_diff_grad(
            [&](const Tensor& x) {
                std::vector<Tensor> ins = inputs;
                ins[which] = x;
                return loss_value(ins);
            },
            inputs[which], 5e-3);
        REQUIRE(inputs[which].has_grad());
        Tensor analytic(inputs[which].shape());
        std::copy(inputs[which].grad().begin(), inputs[which].grad().end(), analytic.data());
        CHECK(grad_close(analytic, fd));
    }
}

}  // namespace

TEST_CASE("matmul matches the reference oracle") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 19.0f);
    CHECK(c.at(0, 1) == 22.0f);
    CHECK(c.at(1, 0) == 43.0f);
    CHECK(c.at(1, 1) == 50.0f);
    Tensor ref = matmul_ref(a, b);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.data()[i] == ref.data()[i]);
}

TEST_CASE("matmul identity and random agreement with oracle") {
    Rng rng(11);
    Tensor a = random_tensor({4, 4}, rng);
    Tensor prod = matmul(a, Tensor::identity(4));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(prod.data()[i] == a.data()[i]);

    Tensor x = random_tensor({3, 5}, rng);
    Tensor y = random_tensor({5, 2}, rng);
    Tensor got = matmul(x, y);
    Tensor ref = matmul_ref(x, y);
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(got.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-5));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a({2, 3});
    Tensor b({4, 2});
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("gradient of sum(A*B) wrt A equals ones * B^T") {
    Rng rng(12);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    a.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(sum(matmul(a, b)));
    }
    // d/dA sum(A*B) = ones(3x2) * B^T
    Tensor expect = matmul_ref(Tensor::ones({3, 2}), transpose(b));
    REQUIRE(a.has_grad());
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a.grad()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-5));

    Tensor fd = finite_diff_grad(
        [&](const Tensor& x) {
            NoTapeScope no_tape;
            return static_cast<double>(sum(matmul(x, b)).item());
        },
        a, 1e-3);
    Tensor analytic(a.shape());
    std::copy(a.grad().begin(), a.grad().end(), analytic.data());
    CHECK(grad_close(analytic, fd));
}

TEST_CASE("softmax basics") {
    Tensor s = softmax_lastdim(Tensor({2}, {0, 0}));
    CHECK(s.at(0) == doctest::Approx(0.5));
    CHECK(s.at(1) == doctest::Approx(0.5));

    Tensor big = softmax_lastdim(Tensor({2}, {1000, 1000}));
    CHECK(big.at(0) == doctest::Approx(0.5));
    CHECK(big.at(1) == doctest::Approx(0.5));
    CHECK(std::isfinite(big.at(0)));

    // high-precision direct evaluation
    Tensor t = softmax_lastdim(Tensor({3}, {1, 2, 3}));
    const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i)
        CHECK(std::fabs(t.at(i) - std::exp(1.0 + i) / denom) < 1e-6);
}

TEST_CASE("softmax rows sum to 1 with entries in (0,1) on wild inputs") {
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        const int rows = 1 + static_cast<int>(rng.index(4));
        const int n = 2 + static_cast<int>(rng.index(7));
        Tensor x = random_tensor({rows, n}, rng, 50.0);
        Tensor y = softmax_lastdim(x);
        for (int i = 0; i < rows; ++i) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) {
                CHECK(y.at(i, j) > 0.0f);
                // the open upper bound saturates to 1.0f at float precision
                CHECK(y.at(i, j) <= 1.0f);
                s += y.at(i, j);
            }
            CHECK(std::fabs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("layer_norm output statistics") {
    Tensor x({3}, {1, 2, 3});
    Tensor out = layer_norm(x, Tensor::ones({3}), Tensor({3}));
    double m = 0.0;
    for (int i = 0; i < 3; ++i) m += out.at(i);
    m /= 3.0;
    double var = 0.0;
    for (int i = 0; i < 3; ++i) var += (out.at(i) - m) * (out.at(i) - m);
    var /= 3.0;
    CHECK(std::fabs(m) < 1e-5);
    CHECK(std::fabs(var - 1.0) < 1e-4);
}

TEST_CASE("layer_norm constant vector collapses to beta") {
    Tensor x({4}, {7, 7, 7, 7});
    Tensor beta({4}, {1, 2, 3, 4});
    Tensor out = layer_norm(x, Tensor::ones({4}), beta);
    for (int i = 0; i < 4; ++i) CHECK(out.at(i) == doctest::Approx(beta.at(i)).epsilon(1e-6));
}

TEST_CASE("gelu values") {
    CHECK(gelu(Tensor::scalar(0.0f)).item() == 0.0f);
    CHECK(std::fabs(gelu(Tensor::scalar(10.0f)).item() - 10.0f) < 1e-4);
    CHECK(std::fabs(gelu(Tensor::scalar(1.0f)).item() - 0.84119f) < 1e-4);
    // extended-precision evaluation of the tanh formula
    const double u = std::sqrt(2.0 / 3.14159265358979323846) * (1.0 + 0.044715);
    const double ref = 0.5 * (1.0 + std::tanh(u));
    CHECK(std::fabs(gelu(Tensor::scalar(1.0f)).item() - ref) < 1e-6);
}

TEST_CASE("transpose is an involution") {
    Rng rng(14);
    Tensor a = random_tensor({3, 5}, rng);
    Tensor tt = transpose(transpose(a));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(tt.data()[i] == a.data()[i]);
}

TEST_CASE("concat then slice round trips bit-exactly") {
    Rng rng(15);
    Tensor a = random_tensor({3, 2}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Tensor cat = concat_cols({a, b});
    Tensor a2 = slice_cols(cat, 0, 2);
    Tensor b2 = slice_cols(cat, 2, 4);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a2.data()[i] == a.data()[i]);
    for (std::size_t i = 0; i < b.size(); ++i) CHECK(b2.data()[i] == b.data()[i]);

    Tensor r = random_tensor({2, 3}, rng);
    Tensor s = random_tensor({4, 3}, rng);
    Tensor rcat = concat_rows({r, s});
    Tensor r2 = slice_rows(rcat, 0, 2);
    Tensor s2 = slice_rows(rcat, 2, 4);
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(r2.data()[i] == r.data()[i]);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(s2.data()[i] == s.data()[i]);
}

TEST_CASE("mean and sum") {
    CHECK(mean(Tensor({4}, {1, 2, 3, 4})).item() == 2.5f);
    CHECK(sum(Tensor({4}, {1, 2, 3, 4})).item() == 10.0f);
}

TEST_CASE("l1_mean_loss values and subgradient") {
    Tensor a({1, 2}, {1, 2});
    Tensor b({1, 2}, {0, 4});
    CHECK(l1_mean_loss(a, a.clone()).item() == 0.0f);
    CHECK(l1_mean_loss(a, b).item() == doctest::Approx(1.5));

    a.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(l1_mean_loss(a, b));
    }
    CHECK(a.grad()[0] == doctest::Approx(0.5));
    CHECK(a.grad()[1] == doctest::Approx(-0.5));

    // sign(0) = 0
    Tensor c({2}, {1, 1});
    Tensor d({2}, {1, 2});
    c.set_requires_grad(true);
    Tape tape2;
    {
        TapeScope scope(tape2);
        backward(l1_mean_loss(c, d));
    }
    CHECK(c.grad()[0] == 0.0f);
    CHECK(c.grad()[1] == doctest::Approx(-0.5));
}

TEST_CASE("backward populates reachable grads only") {
    Tensor x({3}, {1, 2, 3});
    Tensor y({3}, {4, 5, 6});
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(sum(x));
    }
    REQUIRE(x.has_grad());
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0f);
    CHECK_FALSE(y.has_grad());
}

TEST_CASE("tape accumulates grads of shared inputs: d(x+x)/dx = 2") {
    Tensor x({3}, {1, 2, 3});
    x.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(sum(add(x, x)));
    }
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0f);
}

TEST_CASE("replay visits every recorded node exactly once, in reverse") {
    Tape tape;
    std::vector<int> order;
    for (int i = 0; i < 5; ++i)
        tape.record([&order, i] { order.push_back(i); });
    CHECK(tape.size() == 5);
    tape.replay_backward();
    CHECK(order == std::vector<int>{4, 3, 2, 1, 0});
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x({2, 2});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = add(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("finite_diff_grad basics") {
    Tensor x({3}, {1, -2, 3});
    Tensor g = finite_diff_grad(
        [](const Tensor& v) {
            double acc = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i) acc += v.data()[i];
            return acc;
        },
        x, 1e-3);
    for (int i = 0; i < 3; ++i) CHECK(g.at(i) == doctest::Approx(1.0).epsilon(1e-3));

    Tensor x2 = Tensor::scalar(3.0f);
    Tensor g2 = finite_diff_grad(
        [](const Tensor& v) { return static_cast<double>(v.data()[0]) * v.data()[0]; }, x2, 1e-3);
    CHECK(std::fabs(g2.item() - 6.0) < 1e-3);
}

TEST_CASE("backward agrees with finite differences on a matmul-softmax composite") {
    Rng rng(16);
    Tensor a = random_tensor({3, 4}, rng, 1.0);
    Tensor b = random_tensor({4, 3}, rng, 1.0);
    Tensor w = random_tensor({3, 3}, rng, 1.0);
    a.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(sum(mul(softmax_lastdim(matmul(a, b)), w)));
    }
    Tensor fd = finite_diff_grad(
        [&](const Tensor& x) {
            NoTapeScope no_tape;
            return static_cast<double>(sum(mul(softmax_lastdim(matmul(x, b)), w)).item());
        },
        a, 1e-3);
    Tensor analytic(a.shape());
    std::copy(a.grad().begin(), a.grad().end(), analytic.data());
    CHECK(grad_close(analytic, fd));
}

TEST_CASE("every differentiable op passes seeded gradient checks") {
    Rng rng(1234);
    for (int trial = 0; trial < 100; ++trial) {
        const int m = 2 + static_cast<int>(rng.index(3));
        const int p = 2 + static_cast<int>(rng.index(3));
        const int n = 2 + static_cast<int>(rng.index(3));

        check_gradients([](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                        {random_tensor({m, p}, rng), random_tensor({p, n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return softmax_lastdim(in[0]); },
                        {random_tensor({m, n}, rng)}, rng);
        // regenerate near-constant rows: layer_norm is ill-conditioned there
        // and central differences lose validity
        Tensor ln_x = random_tensor({m, p}, rng);
        for (int i = 0; i < m; ++i) {
            for (;;) {
                double mu = 0.0, var = 0.0;
                for (int j = 0; j < p; ++j) mu += ln_x.at(i, j);
                mu /= p;
                for (int j = 0; j < p; ++j)
                    var += (ln_x.at(i, j) - mu) * (ln_x.at(i, j) - mu);
                var /= p;
                if (var >= 0.3) break;
                for (int j = 0; j < p; ++j) ln_x.at(i, j) = static_cast<float>(rng.uniform(-2.0, 2.0));
            }
        }
        check_gradients(
            [](const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); },
            {ln_x, random_tensor({p}, rng), random_tensor({p}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return gelu(in[0]); },
                        {random_tensor({m, n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return add(in[0], in[1]); },
                        {random_tensor({m, n}, rng), random_tensor({m, n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return sub(in[0], in[1]); },
                        {random_tensor({m, n}, rng), random_tensor({m, n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return mul(in[0], in[1]); },
                        {random_tensor({m, n}, rng), random_tensor({m, n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return scale(in[0], 1.7f); },
                        {random_tensor({m, n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return transpose(in[0]); },
                        {random_tensor({m, n}, rng)}, rng);
        check_gradients([n, m](const std::vector<Tensor>& in) { return reshape(in[0], {n, m}); },
                        {random_tensor({m, n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return add_rowvec(in[0], in[1]); },
                        {random_tensor({m, n}, rng), random_tensor({n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return slice_cols(in[0], 1, 1); },
                        {random_tensor({m, n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return slice_rows(in[0], 1, 1); },
                        {random_tensor({m, n}, rng)}, rng);
        check_gradients(
            [](const std::vector<Tensor>& in) { return concat_cols({in[0], in[1]}); },
            {random_tensor({m, n}, rng), random_tensor({m, p}, rng)}, rng);
        check_gradients(
            [](const std::vector<Tensor>& in) { return concat_rows({in[0], in[1]}); },
            {random_tensor({m, n}, rng), random_tensor({p, n}, rng)}, rng);
        check_gradients([](const std::vector<Tensor>& in) { return mean(in[0]); },
                        {random_tensor({m, n}, rng)}, rng);

        // keep |a - b| away from the L1 kink so finite differences are valid
        Tensor la = random_tensor({m, n}, rng);
        Tensor lb(la.shape());
        for (std::size_t i = 0; i < la.size(); ++i) {
            const double offset = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 1.0);
            lb.data()[i] = static_cast<float>(la.data()[i] + offset);
        }
        check_gradients([](const std::vector<Tensor>& in) { return l1_mean_loss(in[0], in[1]); },
                        {la, lb}, rng);

        const int label = static_cast<int>(rng.index(static_cast<std::size_t>(n)));
        check_gradients(
            [label](const std::vector<Tensor>& in) {
                return cross_entropy_with_logits(in[0], label);
            },
            {random_tensor({1, n}, rng)}, rng);
    }
}

TEST_CASE("public ops keep finite inputs finite") {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor a = random_tensor({4, 6}, rng, 50.0);
        Tensor b = random_tensor({6, 4}, rng, 50.0);
        for (const Tensor& out :
             {matmul(a, b), softmax_lastdim(a), gelu(a),
              layer_norm(a, Tensor::ones({6}), Tensor({6})),
              add(a, a), sub(a, a), scale(a, 3.0f), transpose(a),
              l1_mean_loss(a, scale(a, -1.0f)), mean(a)}) {
            for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::isfinite(out.data()[i]));
        }
        Tensor constant_rows = Tensor::full({3, 5}, 42.0f);
        Tensor ln = layer_norm(constant_rows, Tensor::ones({5}), Tensor({5}));
        for (std::size_t i = 0; i < ln.size(); ++i) CHECK(std::isfinite(ln.data()[i]));
    }
}
