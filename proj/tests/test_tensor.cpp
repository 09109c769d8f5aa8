#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "fedmer/ops.hpp"
#include "fedmer/param_set.hpp"
#include "fedmer/rng.hpp"
#include "support/conv_oracle.hpp"
#include "support/gradcheck.hpp"

using namespace fedmer;
using fedmer::test::GradCheckOptions;
using fedmer::test::gradcheck;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = scale * rng.normal();
    return Tensor::from(std::move(shape), std::move(v));
}

// keeps ReLU-family inputs away from their kinks so the strict tolerance holds
Tensor random_tensor_off_kink(Shape shape, Rng& rng) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (double& x : t.value()) {
        if (std::abs(x) < 0.05) x += x >= 0.0 ? 0.1 : -0.1;
    }
    return t;
}

}  // namespace

TEST_CASE("matmul identity returns the operand") {
    Rng rng(1);
    Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor x = random_tensor({3, 3}, rng);
    Tensor y = matmul(eye, x);
    for (std::size_t i = 0; i < 9; ++i) CHECK(y.value()[i] == doctest::Approx(x.value()[i]));
}

TEST_CASE("softmax of a constant row is uniform") {
    Tensor x = Tensor::from({1, 3}, {0.0, 0.0, 0.0});
    Tensor y = softmax_rows(x);
    for (double v : y.value()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and stay positive") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = random_tensor({4, 9}, rng, 5.0);
        Tensor y = softmax_rows(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 9; ++c) {
                const double v = y.value()[r * 9 + c];
                CHECK(v > 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("conv2d matches the nested-loop oracle") {
    Rng rng(3);
    Tensor x = random_tensor({1, 3, 5, 5}, rng);
    Tensor w = random_tensor({2, 3, 3, 3}, rng);
    Tensor b = random_tensor({2}, rng);
    Tensor out = conv2d(x, w, b, 1);
    const auto ref = fedmer::test::conv2d_reference(x.value(), 1, 3, 5, 5, w.value(), 2, 3, 3,
                                                    b.value(), 1);
    REQUIRE(out.numel() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
        CHECK(std::abs(out.value()[i] - ref[i]) < 1e-12);
    }

    // a second geometry: 5x5 kernel, pad 2, wider input
    Tensor x2 = random_tensor({2, 4, 8, 8}, rng);
    Tensor w2 = random_tensor({3, 4, 5, 5}, rng);
    Tensor b2 = random_tensor({3}, rng);
    Tensor out2 = conv2d(x2, w2, b2, 2);
    const auto ref2 = fedmer::test::conv2d_reference(x2.value(), 2, 4, 8, 8, w2.value(), 3, 5, 5,
                                                     b2.value(), 2);
    for (std::size_t i = 0; i < ref2.size(); ++i) {
        CHECK(std::abs(out2.value()[i] - ref2[i]) < 1e-12);
    }
}

TEST_CASE("backward of sum gives all-ones gradient") {
    Rng rng(5);
    Tensor w = random_tensor({3, 4}, rng);
    w.set_requires_grad(true);
    backward(sum_all(w));
    for (double g : w.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward of half squared norm gives the weights") {
    Rng rng(6);
    Tensor w = random_tensor({7}, rng);
    w.set_requires_grad(true);
    backward(mul_scalar(sum_squares(w), 0.5));
    for (std::size_t i = 0; i < w.numel(); ++i) {
        CHECK(w.grad()[i] == doctest::Approx(w.value()[i]).epsilon(1e-12));
    }
}

TEST_CASE("repeated backward accumulates") {
    Tensor w = Tensor::from({2}, {1.0, 2.0});
    w.set_requires_grad(true);
    Tensor loss = sum_all(w);
    backward(loss);
    backward(loss);
    CHECK(w.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor w = Tensor::from({2}, {1.0, 2.0});
    w.set_requires_grad(true);
    CHECK_THROWS_AS(backward(add(w, w)), ContractError);
}

TEST_CASE("shape mismatches name the op and shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 3});
    try {
        add(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("(2x3)") != std::string::npos);
        CHECK(msg.find("(3x3)") != std::string::npos);
    }
}

TEST_CASE("non-finite outputs raise NumericError") {
    Tensor x = Tensor::from({1}, {800.0});
    CHECK_THROWS_AS(mul(sum_squares(Tensor::from({1}, {1e200})), Tensor::from({1}, {1e200})),
                    NumericError);
    CHECK_NOTHROW(sigmoid(x));
}

TEST_CASE("bce rejects labels outside zero-one") {
    Tensor logits = Tensor::zeros({3});
    Tensor labels = Tensor::from({3}, {0.0, 0.5, 1.0});
    CHECK_THROWS_AS(bce_logits_mean(logits, labels), ContractError);
}

TEST_CASE("sgd single step and zero-grad behavior") {
    ParamSet ps;
    Tensor w = ps.add("w", Tensor::from({1}, {1.0}));
    w.grad_mutable() = {2.0};
    Sgd opt(0.1, 0.0);
    opt.step(ps);
    CHECK(w.value()[0] == doctest::Approx(0.8).epsilon(1e-15));

    // zero gradient leaves parameters unchanged
    w.grad_mutable() = {0.0};
    opt.step(ps);
    CHECK(w.value()[0] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("sgd momentum follows the hand-unrolled recurrence") {
    // two steps, constant gradient g: W0 - lr*g - lr*(1.9*g)
    const double g = 0.7, lr = 0.05, w0 = 1.3;
    ParamSet ps;
    Tensor w = ps.add("w", Tensor::from({1}, {w0}));
    Sgd opt(lr, 0.9);
    w.grad_mutable() = {g};
    opt.step(ps);
    w.grad_mutable() = {g};
    opt.step(ps);
    CHECK(w.value()[0] == doctest::Approx(w0 - lr * g - lr * 1.9 * g).epsilon(1e-14));
}

TEST_CASE("sgd requires gradients") {
    ParamSet ps;
    ps.add("w", Tensor::from({1}, {1.0}));
    Sgd opt(0.1, 0.0);
    CHECK_THROWS_AS(opt.step(ps), ContractError);
}

TEST_CASE("determinism: identical seed and op sequence give identical bits") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor x = random_tensor({4, 6}, rng);
        Tensor w = random_tensor({6, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        Tensor y = softmax_rows(linear(sigmoid(x), w, b));
        return y.value();
    };
    const auto a = run(123), b = run(123);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(std::memcmp(&a[i], &b[i], sizeof(double)) == 0);
    }
}

// gradient-check property: every op kind, randomized inputs, 20 seeds
namespace {

struct OpCase {
    const char* name;
    bool kinky;
    std::function<test::GradCheckReport(Rng&)> check;
};

test::GradCheckReport check_unary(Rng& rng, bool off_kink,
                                  const std::function<Tensor(const Tensor&)>& op) {
    Tensor x = off_kink ? random_tensor_off_kink({3, 4}, rng) : random_tensor({3, 4}, rng);
    x.set_requires_grad(true);
    Tensor r = random_tensor({3, 4}, rng);
    GradCheckOptions opt;
    opt.allow_kinks = off_kink;
    return gradcheck({x}, [&]() { return sum_all(mul(op(x), r)); }, rng, opt);
}

}  // namespace

TEST_CASE("finite-difference gradient property holds for every op kind") {
    std::vector<OpCase> cases;

    cases.push_back({"add", false, [](Rng& rng) {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor r = random_tensor({3, 4}, rng);
        return gradcheck({a, b}, [&]() { return sum_all(mul(add(a, b), r)); }, rng);
    }});
    cases.push_back({"sub", false, [](Rng& rng) {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor r = random_tensor({3, 4}, rng);
        return gradcheck({a, b}, [&]() { return sum_all(mul(sub(a, b), r)); }, rng);
    }});
    cases.push_back({"mul", false, [](Rng& rng) {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor r = random_tensor({3, 4}, rng);
        return gradcheck({a, b}, [&]() { return sum_all(mul(mul(a, b), r)); }, rng);
    }});
    cases.push_back({"add_scalar", false, [](Rng& rng) {
        return check_unary(rng, false, [](const Tensor& x) { return add_scalar(x, 1.7); });
    }});
    cases.push_back({"mul_scalar", false, [](Rng& rng) {
        return check_unary(rng, false, [](const Tensor& x) { return mul_scalar(x, -2.3); });
    }});
    cases.push_back({"relu", true, [](Rng& rng) {
        return check_unary(rng, true, [](const Tensor& x) { return relu(x); });
    }});
    cases.push_back({"leaky_relu", true, [](Rng& rng) {
        return check_unary(rng, true, [](const Tensor& x) { return leaky_relu(x, 0.2); });
    }});
    cases.push_back({"elu", true, [](Rng& rng) {
        return check_unary(rng, true, [](const Tensor& x) { return elu(x); });
    }});
    cases.push_back({"sigmoid", false, [](Rng& rng) {
        return check_unary(rng, false, [](const Tensor& x) { return sigmoid(x); });
    }});
    cases.push_back({"matmul", false, [](Rng& rng) {
        Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 2}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor r = random_tensor({3, 2}, rng);
        return gradcheck({a, b}, [&]() { return sum_all(mul(matmul(a, b), r)); }, rng);
    }});
    cases.push_back({"transpose", false, [](Rng& rng) {
        Tensor a = random_tensor({3, 5}, rng);
        a.set_requires_grad(true);
        Tensor r = random_tensor({5, 3}, rng);
        return gradcheck({a}, [&]() { return sum_all(mul(transpose(a), r)); }, rng);
    }});
    cases.push_back({"linear", false, [](Rng& rng) {
        Tensor x = random_tensor({4, 5}, rng), w = random_tensor({5, 3}, rng),
               b = random_tensor({3}, rng);
        x.set_requires_grad(true);
        w.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor r = random_tensor({4, 3}, rng);
        return gradcheck({x, w, b}, [&]() { return sum_all(mul(linear(x, w, b), r)); }, rng);
    }});
    cases.push_back({"conv2d", false, [](Rng& rng) {
        Tensor x = random_tensor({2, 3, 5, 5}, rng), w = random_tensor({4, 3, 3, 3}, rng),
               b = random_tensor({4}, rng);
        x.set_requires_grad(true);
        w.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor r = random_tensor({2, 4, 5, 5}, rng);
        return gradcheck({x, w, b}, [&]() { return sum_all(mul(conv2d(x, w, b, 1), r)); }, rng);
    }});
    cases.push_back({"max_pool2d", true, [](Rng& rng) {
        Tensor x = random_tensor({2, 3, 6, 6}, rng);
        x.set_requires_grad(true);
        Tensor r = random_tensor({2, 3, 3, 3}, rng);
        GradCheckOptions opt;
        opt.allow_kinks = true;
        return gradcheck({x}, [&]() { return sum_all(mul(max_pool2d(x, 2, 2, 0), r)); }, rng, opt);
    }});
    cases.push_back({"mean_pool_spatial", false, [](Rng& rng) {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        x.set_requires_grad(true);
        Tensor r = random_tensor({2, 3}, rng);
        return gradcheck({x}, [&]() { return sum_all(mul(mean_pool_spatial(x), r)); }, rng);
    }});
    cases.push_back({"reshape", false, [](Rng& rng) {
        Tensor x = random_tensor({3, 4}, rng);
        x.set_requires_grad(true);
        Tensor r = random_tensor({12}, rng);
        return gradcheck({x}, [&]() { return sum_all(mul(reshape(x, {12}), r)); }, rng);
    }});
    cases.push_back({"flatten", false, [](Rng& rng) {
        Tensor x = random_tensor({2, 3, 2}, rng);
        x.set_requires_grad(true);
        Tensor r = random_tensor({12}, rng);
        return gradcheck({x}, [&]() { return sum_all(mul(flatten(x), r)); }, rng);
    }});
    cases.push_back({"concat", false, [](Rng& rng) {
        Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 2}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor r = random_tensor({2, 5}, rng);
        return gradcheck({a, b}, [&]() { return sum_all(mul(concat({a, b}, 1), r)); }, rng);
    }});
    cases.push_back({"slice", false, [](Rng& rng) {
        Tensor x = random_tensor({4, 5}, rng);
        x.set_requires_grad(true);
        Tensor r = random_tensor({4, 2}, rng);
        return gradcheck({x}, [&]() { return sum_all(mul(slice(x, 1, 1, 2), r)); }, rng);
    }});
    cases.push_back({"gather_rows", false, [](Rng& rng) {
        Tensor x = random_tensor({5, 3}, rng);
        x.set_requires_grad(true);
        Tensor r = random_tensor({4, 3}, rng);
        const std::vector<std::size_t> idx = {0, 2, 2, 4};  // repeats allowed
        return gradcheck({x}, [&]() { return sum_all(mul(gather_rows(x, idx), r)); }, rng);
    }});
    cases.push_back({"sum_all", false, [](Rng& rng) {
        Tensor x = random_tensor({3, 4}, rng);
        x.set_requires_grad(true);
        return gradcheck({x}, [&]() { return sum_all(x); }, rng);
    }});
    cases.push_back({"mean_all", false, [](Rng& rng) {
        Tensor x = random_tensor({3, 4}, rng);
        x.set_requires_grad(true);
        return gradcheck({x}, [&]() { return mean_all(x); }, rng);
    }});
    cases.push_back({"sum_squares", false, [](Rng& rng) {
        Tensor x = random_tensor({7}, rng);
        x.set_requires_grad(true);
        return gradcheck({x}, [&]() { return sum_squares(x); }, rng);
    }});
    cases.push_back({"outer_sum", false, [](Rng& rng) {
        Tensor u = random_tensor({4}, rng), v = random_tensor({3}, rng);
        u.set_requires_grad(true);
        v.set_requires_grad(true);
        Tensor r = random_tensor({4, 3}, rng);
        return gradcheck({u, v}, [&]() { return sum_all(mul(outer_sum(u, v), r)); }, rng);
    }});
    cases.push_back({"scale_channels", false, [](Rng& rng) {
        Tensor x = random_tensor({2, 3, 4, 4}, rng), s = random_tensor({2, 3}, rng);
        x.set_requires_grad(true);
        s.set_requires_grad(true);
        Tensor r = random_tensor({2, 3, 4, 4}, rng);
        return gradcheck({x, s}, [&]() { return sum_all(mul(scale_channels(x, s), r)); }, rng);
    }});
    cases.push_back({"softmax", false, [](Rng& rng) {
        Tensor x = random_tensor({3, 5}, rng);
        x.set_requires_grad(true);
        Tensor r = random_tensor({3, 5}, rng);
        return gradcheck({x}, [&]() { return sum_all(mul(softmax_rows(x), r)); }, rng);
    }});
    cases.push_back({"masked_softmax", false, [](Rng& rng) {
        Tensor x = random_tensor({4, 4}, rng);
        x.set_requires_grad(true);
        Tensor mask = Tensor::from({4, 4}, {0, 1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 1, 0, 0, 0, 0});
        Tensor r = random_tensor({4, 4}, rng);
        return gradcheck({x}, [&]() { return sum_all(mul(masked_softmax_rows(x, mask), r)); },
                         rng);
    }});
    cases.push_back({"layer_norm", false, [](Rng& rng) {
        Tensor x = random_tensor({3, 6}, rng);
        Tensor g = random_tensor({6}, rng), b = random_tensor({6}, rng);
        x.set_requires_grad(true);
        g.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor r = random_tensor({3, 6}, rng);
        return gradcheck({x, g, b}, [&]() { return sum_all(mul(layer_norm(x, g, b), r)); }, rng);
    }});
    cases.push_back({"batch_norm2d", false, [](Rng& rng) {
        Tensor x = random_tensor({3, 2, 4, 4}, rng);
        Tensor g = random_tensor({2}, rng), b = random_tensor({2}, rng);
        Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
        x.set_requires_grad(true);
        g.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor r = random_tensor({3, 2, 4, 4}, rng);
        return gradcheck(
            {x, g, b},
            [&]() {
                return sum_all(mul(batch_norm2d(x, g, b, rm, rv, true, false), r));
            },
            rng);
    }});
    cases.push_back({"cross_entropy", false, [](Rng& rng) {
        Tensor x = random_tensor({5}, rng);
        x.set_requires_grad(true);
        return gradcheck({x}, [&]() { return cross_entropy_logits(x, 2); }, rng);
    }});
    cases.push_back({"bce", false, [](Rng& rng) {
        Tensor x = random_tensor({6}, rng);
        x.set_requires_grad(true);
        Tensor y = Tensor::from({6}, {1, 0, 0, 1, 1, 0});
        return gradcheck({x}, [&]() { return bce_logits_mean(x, y); }, rng);
    }});

    for (const OpCase& c : cases) {
        CAPTURE(c.name);
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(hash_seed(seed, c.name));
            const auto report = c.check(rng);
            CAPTURE(seed);
            CAPTURE(report.max_rel_err);
            CHECK(report.pass);
        }
    }
}

TEST_CASE("composite network gradients match finite differences") {
    Rng rng(99);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor w1 = random_tensor({6, 8}, rng);
    Tensor b1 = random_tensor({8}, rng);
    Tensor w2 = random_tensor({8, 3}, rng);
    Tensor b2 = random_tensor({3}, rng);
    for (Tensor* t : {&w1, &b1, &w2, &b2}) t->set_requires_grad(true);
    auto make_loss = [&]() {
        Tensor h = sigmoid(linear(x, w1, b1));
        Tensor logits = linear(h, w2, b2);
        Tensor l = Tensor::scalar(0.0);
        for (std::size_t i = 0; i < 4; ++i) {
            l = add(l, cross_entropy_logits(flatten(slice(logits, 0, i, 1)), i % 3));
        }
        return l;
    };
    const auto report = gradcheck({w1, b1, w2, b2}, make_loss, rng);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("masked softmax zeroes masked entries exactly and handles empty rows") {
    Rng rng(11);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor mask = Tensor::from({3, 4}, {1, 0, 1, 0, 0, 0, 0, 0, 1, 1, 1, 1});
    Tensor y = masked_softmax_rows(x, mask);
    CHECK(y.value()[1] == 0.0);
    CHECK(y.value()[3] == 0.0);
    for (std::size_t c = 0; c < 4; ++c) CHECK(y.value()[4 + c] == 0.0);  // isolated row
    double row0 = y.value()[0] + y.value()[2];
    CHECK(std::abs(row0 - 1.0) < 1e-9);
}
