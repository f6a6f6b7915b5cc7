#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "resq/errors.hpp"
#include "resq/rng.hpp"
#include "resq/tape.hpp"

using namespace resq;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = rng.normal() * scale;
    return t;
}

// Literal row-by-column definition, kept deliberately naive.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const std::size_t rows = a.shape()[0], inner = a.shape()[1], cols = b.shape()[1];
    Tensor out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < inner; ++k) acc += a[i * inner + k] * b[k * cols + j];
            out[i * cols + j] = acc;
        }
    return out;
}

// Direct six-loop valid convolution for a single [C,H,W] image.
Tensor conv_oracle(const Tensor& x, const Tensor& k, std::size_t stride) {
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const std::size_t f = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
    const std::size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
    Tensor out({f, oh, ow});
    for (std::size_t fo = 0; fo < f; ++fo)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t u = 0; u < kh; ++u)
                        for (std::size_t v = 0; v < kw; ++v)
                            acc += x[(ch * h + i * stride + u) * w + j * stride + v] *
                                   k[((fo * c + ch) * kh + u) * kw + v];
                out[(fo * oh + i) * ow + j] = acc;
            }
    return out;
}

// Direct cross-entropy in extended precision, no stabilization tricks.
double ce_oracle(const Tensor& logits, const Tensor& targets) {
    const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
    long double total = 0.0L;
    for (std::size_t i = 0; i < rows; ++i) {
        long double z = 0.0L;
        for (std::size_t j = 0; j < cols; ++j) z += std::exp(static_cast<long double>(logits[i * cols + j]));
        for (std::size_t j = 0; j < cols; ++j) {
            const long double p = std::exp(static_cast<long double>(logits[i * cols + j])) / z;
            total -= static_cast<long double>(targets[i * cols + j]) * std::log(p);
        }
    }
    return static_cast<double>(total / rows);
}

Tensor one_hot(std::size_t rows, std::size_t cols, const std::vector<std::size_t>& labels) {
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < rows; ++i) t[i * cols + labels[i]] = 1.0;
    return t;
}

// Central finite differences against the analytic gradient of `loss_of`,
// which must rebuild the computation from scratch on every call.
void check_gradients(std::vector<Tensor*> params, const std::function<double()>& loss_of,
                     const std::function<void()>& backward_into_params, double tol = 1e-4) {
    for (Tensor* p : params) p->clear_grad();
    backward_into_params();
    const double h = 1e-5;
    for (Tensor* p : params) {
        REQUIRE(p->has_grad());
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double keep = (*p)[i];
            (*p)[i] = keep + h;
            const double up = loss_of();
            (*p)[i] = keep - h;
            const double down = loss_of();
            (*p)[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = p->grad()[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-3});
            CHECK(std::abs(numeric - analytic) / denom < tol);
        }
    }
    for (Tensor* p : params) p->clear_grad();
}

}  // namespace

TEST_CASE("matmul identity and scalar cases") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor v({2, 1}, {3, 4});
    Tensor r = kernels::matmul(eye, v);
    CHECK(r.shape() == std::vector<std::size_t>{2, 1});
    CHECK(r[0] == 3.0);
    CHECK(r[1] == 4.0);
    CHECK(kernels::matmul(Tensor({1, 1}, {2}), Tensor({1, 1}, {3})).item() == 6.0);
}

TEST_CASE("matmul equals the triple-loop oracle exactly") {
    Rng rng(101);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        Tensor got = kernels::matmul(a, b);
        Tensor want = matmul_oracle(a, b);
        REQUIRE(got.same_shape(want));
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);
    }
}

TEST_CASE("matmul rejects bad shapes") {
    CHECK_THROWS_AS(kernels::matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
    CHECK_THROWS_AS(kernels::matmul(Tensor({6}), Tensor({6, 1})), DimensionError);
}

TEST_CASE("conv2d trivial kernels") {
    Tensor ones = Tensor::full({1, 3, 3}, 1.0);
    Tensor ident({1, 1, 1, 1}, {1.0});
    Tensor r = kernels::conv2d(ones, ident, 1);
    CHECK(r.shape() == std::vector<std::size_t>{1, 3, 3});
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(r[i] == 1.0);

    Tensor zeros({2, 4, 4});
    Tensor k({3, 2, 2, 2}, std::vector<double>(24, 0.5));
    Tensor z = kernels::conv2d(zeros, k, 1);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0);
}

TEST_CASE("conv2d equals the six-loop oracle exactly") {
    Rng rng(103);
    for (int stride : {1, 2}) {
        for (int trial = 0; trial < 10; ++trial) {
            Tensor x = random_tensor({2, 5, 5}, rng);
            Tensor k = random_tensor({3, 2, 3, 3}, rng);
            Tensor got = kernels::conv2d(x, k, stride);
            Tensor want = conv_oracle(x, k, static_cast<std::size_t>(stride));
            REQUIRE(got.same_shape(want));
            for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);
        }
    }
}

TEST_CASE("conv2d batched matches per-image results") {
    Rng rng(107);
    Tensor batch = random_tensor({3, 2, 6, 6}, rng);
    Tensor k = random_tensor({4, 2, 3, 3}, rng);
    Tensor got = kernels::conv2d(batch, k, 1);
    REQUIRE(got.shape() == std::vector<std::size_t>{3, 4, 4, 4});
    for (std::size_t n = 0; n < 3; ++n) {
        Tensor img({2, 6, 6});
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = batch[n * img.size() + i];
        Tensor single = kernels::conv2d(img, k, 1);
        for (std::size_t i = 0; i < single.size(); ++i) CHECK(got[n * single.size() + i] == single[i]);
    }
}

TEST_CASE("conv2d shape contract") {
    auto hw = kernels::conv2d_output_hw(5, 5, 3, 3, 2);
    CHECK(hw[0] == 2);
    CHECK(hw[1] == 2);
    CHECK_THROWS_AS(kernels::conv2d_output_hw(2, 2, 3, 3, 1), DimensionError);
    CHECK_THROWS_AS(kernels::conv2d_output_hw(5, 5, 3, 3, 0), ContractError);
    CHECK_THROWS_AS(kernels::conv2d(Tensor({2, 2}), Tensor({1, 1, 1, 1}, {1.0}), 1), DimensionError);
    CHECK_THROWS_AS(kernels::conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 2, 2}), 1), DimensionError);
}

TEST_CASE("elementwise kernels") {
    Tensor x({4}, {-1, 0, 2, -3});
    Tensor r = kernels::relu(x);
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);
    CHECK(r[3] == 0.0);

    Tensor a({2}, {1, 2}), b({2}, {10, 20});
    Tensor s = kernels::add(a, b);
    CHECK(s[0] == 11.0);
    CHECK(s[1] == 22.0);
    CHECK_THROWS_AS(kernels::add(a, Tensor({3})), DimensionError);

    Tensor sc = kernels::scale(a, -2.0);
    CHECK(sc[0] == -2.0);
    CHECK(sc[1] == -4.0);
}

TEST_CASE("add_bias broadcasts per column and per channel") {
    Tensor x({2, 3}, {0, 0, 0, 1, 1, 1});
    Tensor bias({3}, {10, 20, 30});
    Tensor r = kernels::add_bias(x, bias);
    CHECK(r[0] == 10.0);
    CHECK(r[4] == 21.0);
    CHECK(r[5] == 31.0);

    Tensor img({1, 2, 2, 2}, {0, 0, 0, 0, 1, 1, 1, 1});
    Tensor cb({2}, {5, 7});
    Tensor ri = kernels::add_bias(img, cb);
    for (int i = 0; i < 4; ++i) CHECK(ri[i] == 5.0);
    for (int i = 4; i < 8; ++i) CHECK(ri[i] == 8.0);

    CHECK_THROWS_AS(kernels::add_bias(x, Tensor({2})), DimensionError);
    CHECK_THROWS_AS(kernels::add_bias(Tensor({4}), bias), DimensionError);
}

TEST_CASE("flatten keeps the leading dimension") {
    Tensor x({2, 3, 2});
    Tensor f = kernels::flatten(x);
    CHECK(f.shape() == std::vector<std::size_t>{2, 6});
    CHECK_THROWS_AS(kernels::flatten(Tensor({5})), DimensionError);
}

TEST_CASE("avg_pool2 uses ceil mode at the edges") {
    Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor p = kernels::avg_pool2(x);
    REQUIRE(p.shape() == std::vector<std::size_t>{1, 1, 2, 2});
    CHECK(p[0] == 3.0);
    CHECK(p[1] == 4.5);
    CHECK(p[2] == 7.5);
    CHECK(p[3] == 9.0);

    Tensor even({1, 1, 4, 4}, std::vector<double>(16, 2.0));
    Tensor pe = kernels::avg_pool2(even);
    REQUIRE(pe.shape() == std::vector<std::size_t>{1, 1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) CHECK(pe[i] == 2.0);
}

TEST_CASE("softmax rows are distributions and shift-invariant") {
    Rng rng(109);
    Tensor x = random_tensor({3, 5}, rng, 3.0);
    Tensor s = kernels::softmax(x);
    for (std::size_t i = 0; i < 3; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            CHECK(s[i * 5 + j] > 0.0);
            sum += s[i * 5 + j];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    Tensor shifted = x;
    for (auto& v : shifted.vec()) v += 1000.0;
    Tensor s2 = kernels::softmax(shifted);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(s2[i] == doctest::Approx(s[i]).epsilon(1e-12));
}

TEST_CASE("cross_entropy of uniform logits is ln(classes)") {
    Tensor logits = Tensor::full({2, 4}, 0.7);
    Tensor targets = one_hot(2, 4, {1, 3});
    CHECK(kernels::cross_entropy(logits, targets, nullptr) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross_entropy decreases as the true logit grows") {
    Tensor targets = one_hot(1, 3, {0});
    double prev = 1e30;
    for (double v : {0.0, 0.5, 1.0, 2.0, 5.0, 10.0}) {
        Tensor logits({1, 3}, {v, 0.0, 0.0});
        const double loss = kernels::cross_entropy(logits, targets, nullptr);
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("cross_entropy matches the direct formula oracle") {
    Rng rng(113);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor logits = random_tensor({4, 3}, rng, 2.0);
        // random soft labels, normalized
        Tensor targets({4, 3});
        for (std::size_t i = 0; i < 4; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 3; ++j) {
                targets[i * 3 + j] = rng.uniform() + 0.01;
                sum += targets[i * 3 + j];
            }
            for (std::size_t j = 0; j < 3; ++j) targets[i * 3 + j] /= sum;
        }
        const double got = kernels::cross_entropy(logits, targets, nullptr);
        CHECK(std::abs(got - ce_oracle(logits, targets)) < 1e-12);
    }
}

TEST_CASE("cross_entropy validates target rows") {
    Tensor logits({1, 3}, {1, 2, 3});
    CHECK_THROWS_AS(kernels::cross_entropy(logits, Tensor({1, 3}, {0.5, 0.2, 0.2}), nullptr),
                    ContractError);
    CHECK_THROWS_AS(kernels::cross_entropy(logits, Tensor({1, 3}, {1.2, -0.2, 0.0}), nullptr),
                    ContractError);
    CHECK_THROWS_AS(kernels::cross_entropy(logits, Tensor({2, 3}), nullptr), DimensionError);
}

TEST_CASE("backward: loss = sum(w) gives all-ones gradient") {
    Tensor w({2, 3}, {1, 2, 3, 4, 5, 6});
    Tape tape;
    Var loss = tape.sum(tape.leaf(w));
    tape.backward(loss);
    REQUIRE(w.has_grad());
    for (double g : w.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward: loss = sum(w^2)/2 gives gradient w") {
    Tensor w({4}, {1.5, -2.0, 0.0, 3.25});
    Tape tape;
    Var loss = tape.scale(tape.l2_norm_sq(tape.leaf(w)), 0.5);
    tape.backward(loss);
    REQUIRE(w.has_grad());
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(w.grad()[i] == w[i]);
}

TEST_CASE("backward requires a scalar loss and consumes the tape") {
    Tensor w({3}, {1, 2, 3});
    {
        Tape tape;
        Var v = tape.relu(tape.leaf(w));
        CHECK_THROWS_AS(tape.backward(v), ContractError);
    }
    {
        Tape tape;
        Var loss = tape.sum(tape.leaf(w));
        w.clear_grad();
        tape.backward(loss);
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.backward(loss), ContractError);
    }
}

TEST_CASE("constants do not collect gradients") {
    Tensor x({2, 2}, {1, 2, 3, 4});
    Tensor w({2, 2}, {1, 0, 0, 1});
    Tape tape;
    Var loss = tape.sum(tape.matmul(tape.constant(x), tape.leaf(w)));
    tape.backward(loss);
    CHECK_FALSE(x.has_grad());
    CHECK(w.has_grad());

    // a graph made only of constants still backs up without complaint
    Tape t2;
    Var c = t2.sum(t2.constant(x));
    t2.backward(c);
    CHECK(t2.consumed());
}

TEST_CASE("gradients accumulate across tapes until cleared") {
    Tensor w({2}, {3, 4});
    for (int i = 0; i < 2; ++i) {
        Tape tape;
        tape.backward(tape.sum(tape.leaf(w)));
    }
    REQUIRE(w.has_grad());
    for (double g : w.grad()) CHECK(g == 2.0);
}

TEST_CASE("finite differences: dense path") {
    Rng rng(211);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor w1 = random_tensor({6, 5}, rng, 0.5);
    Tensor b1 = random_tensor({5}, rng, 0.1);
    Tensor w2 = random_tensor({5, 3}, rng, 0.5);
    Tensor targets = one_hot(4, 3, {0, 2, 1, 1});

    auto build = [&](Tape& tape) {
        Var h = tape.relu(tape.add_bias(tape.matmul(tape.constant(x), tape.leaf(w1)), tape.leaf(b1)));
        Var logits = tape.matmul(h, tape.leaf(w2));
        Var ce = tape.cross_entropy(logits, targets);
        Var reg = tape.scale(tape.l2_norm_sq(tape.leaf(w1)), 0.01);
        return tape.add(ce, reg);
    };
    auto loss_of = [&]() {
        Tape tape;
        return tape.value(build(tape)).item();
    };
    auto backward = [&]() {
        Tape tape;
        tape.backward(build(tape));
    };
    check_gradients({&w1, &b1, &w2}, loss_of, backward);
}

TEST_CASE("finite differences: convolutional path") {
    Rng rng(223);
    Tensor x = random_tensor({2, 2, 5, 5}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng, 0.5);
    Tensor cb = random_tensor({3}, rng, 0.1);
    Tensor w = random_tensor({12, 3}, rng, 0.5);
    Tensor targets = one_hot(2, 3, {2, 0});

    auto build = [&](Tape& tape) {
        Var conv = tape.add_bias(tape.conv2d(tape.constant(x), tape.leaf(k), 1), tape.leaf(cb));
        Var feat = tape.flatten(tape.avg_pool2(tape.relu(conv)));
        return tape.cross_entropy(tape.matmul(feat, tape.leaf(w)), targets);
    };
    auto loss_of = [&]() {
        Tape tape;
        return tape.value(build(tape)).item();
    };
    auto backward = [&]() {
        Tape tape;
        tape.backward(build(tape));
    };
    check_gradients({&k, &cb, &w}, loss_of, backward);
}

TEST_CASE("finite differences: softmax, add and scale") {
    Rng rng(227);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor y = random_tensor({3, 4}, rng);

    auto build = [&](Tape& tape) {
        Var mix = tape.add(tape.scale(tape.leaf(x), 0.7), tape.scale(tape.leaf(y), 0.3));
        return tape.l2_norm_sq(tape.softmax(mix));
    };
    auto loss_of = [&]() {
        Tape tape;
        return tape.value(build(tape)).item();
    };
    auto backward = [&]() {
        Tape tape;
        tape.backward(build(tape));
    };
    check_gradients({&x, &y}, loss_of, backward);
}

TEST_CASE("finite differences: gradient flows into the input leaf") {
    // the attack suite differentiates the loss with respect to the input
    Rng rng(229);
    Tensor x = random_tensor({2, 6}, rng);
    Tensor w = random_tensor({6, 3}, rng, 0.5);
    Tensor targets = one_hot(2, 3, {1, 2});

    auto build = [&](Tape& tape) {
        return tape.cross_entropy(tape.matmul(tape.leaf(x), tape.constant(w)), targets);
    };
    auto loss_of = [&]() {
        Tape tape;
        return tape.value(build(tape)).item();
    };
    auto backward = [&]() {
        Tape tape;
        tape.backward(build(tape));
    };
    check_gradients({&x}, loss_of, backward);
    CHECK_FALSE(w.has_grad());
}

TEST_CASE("sgd_step basics") {
    Parameter p{"w", Tensor({1}, {1.0}), true};
    p.value.grad() = {1.0};
    sgd_step({&p}, 0.1);
    CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-15));
    CHECK_FALSE(p.value.has_grad());

    Parameter q{"v", Tensor({2}, {5.0, -5.0}), true};
    q.value.grad() = {0.0, 0.0};
    sgd_step({&q}, 0.5);
    CHECK(q.value[0] == 5.0);
    CHECK(q.value[1] == -5.0);

    Parameter r{"u", Tensor({1}, {1.0}), true};
    CHECK_THROWS_AS(sgd_step({&r}, 0.1), ContractError);
}

TEST_CASE("sgd_step skips frozen parameters but clears their grads") {
    Parameter frozen{"f", Tensor({1}, {2.0}), false};
    frozen.value.grad() = {100.0};
    Parameter live{"l", Tensor({1}, {2.0}), true};
    live.value.grad() = {1.0};
    sgd_step({&frozen, &live}, 0.1);
    CHECK(frozen.value[0] == 2.0);
    CHECK(live.value[0] == doctest::Approx(1.9).epsilon(1e-15));
    CHECK_FALSE(frozen.value.has_grad());
    CHECK_FALSE(live.value.has_grad());
}

TEST_CASE("two sgd steps on a linear loss equal one step at doubled rate") {
    Tensor w0({3}, {1.0, -2.0, 0.5});

    auto run = [&](int steps, double lr) {
        Tensor w = w0;
        for (int i = 0; i < steps; ++i) {
            Tape tape;
            tape.backward(tape.sum(tape.leaf(w)));
            Parameter p{"w", std::move(w), true};
            std::vector<Parameter*> ps{&p};
            sgd_step(ps, lr);
            w = std::move(p.value);
        }
        return w;
    };
    // dyadic rate so both paths round identically
    Tensor twice = run(2, 0.125);
    Tensor once = run(1, 0.25);
    for (std::size_t i = 0; i < 3; ++i) CHECK(twice[i] == once[i]);
}

TEST_CASE("training trajectories are bit-identical across replays") {
    auto train = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor x = random_tensor({8, 4}, rng);
        std::vector<std::size_t> labels;
        for (int i = 0; i < 8; ++i) labels.push_back(rng.index(3));
        Tensor targets = one_hot(8, 3, labels);
        Parameter w{"w", random_tensor({4, 3}, rng, 0.5), true};
        Parameter b{"b", Tensor({3}), true};
        std::vector<Parameter*> params{&w, &b};
        for (int step = 0; step < 5; ++step) {
            Tape tape;
            Var logits = tape.add_bias(tape.matmul(tape.constant(x), tape.leaf(w.value)),
                                       tape.leaf(b.value));
            tape.backward(tape.cross_entropy(logits, targets));
            sgd_step(params, 0.1);
        }
        std::vector<double> out = w.value.vec();
        out.insert(out.end(), b.value.vec().begin(), b.value.vec().end());
        return out;
    };
    auto a = train(99), b = train(99), c = train(100);
    CHECK(a == b);
    CHECK(a != c);
}
