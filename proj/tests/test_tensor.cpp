#include <cmath>

#include "autofed/rng.hpp"
#include "autofed/tensor.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace autofed;
using autofed::testing::grad_check;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.raw()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("conv2d identity kernel passes input through") {
    Tensor x = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k = Tensor::from({1, 1, 1, 1}, {1.0});
    Tensor y = conv2d(x, k, 1, 0);
    CHECK(y.shape() == std::vector<int>{1, 3, 3});
    for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("conv2d 2x2 ones kernel stride 2 sums blocks") {
    Tensor x = Tensor::full({1, 4, 4}, 1.0);
    Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor y = conv2d(x, k, 2, 0);
    CHECK(y.shape() == std::vector<int>{1, 2, 2});
    for (double v : y.data()) CHECK(v == doctest::Approx(4.0));
}

TEST_CASE("conv2d rejects mismatched channels") {
    Tensor x = Tensor::zeros({2, 4, 4});
    Tensor k = Tensor::zeros({1, 3, 2, 2});
    CHECK_THROWS_AS(conv2d(x, k, 1, 0), ConfigError);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor({2, 5, 5}, rng);
        Tensor k = random_tensor({3, 2, 3, 3}, rng);
        auto res = grad_check({x, k}, [&] { return sum(conv2d(x, k, 1, 1)); });
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("conv2d strided gradients match finite differences") {
    Rng rng(42);
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor k = random_tensor({2, 2, 3, 3}, rng);
    auto res = grad_check({x, k}, [&] { return sum(conv2d(x, k, 2, 1)); });
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("conv_transpose2d broadcasts a single input cell") {
    Tensor x = Tensor::from({1, 1, 1}, {2.5});
    Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor y = conv_transpose2d(x, k, 1, 0);
    CHECK(y.shape() == std::vector<int>{1, 2, 2});
    for (double v : y.data()) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("conv_transpose2d inverts conv2d spatial dims") {
    Rng rng(43);
    Tensor x = random_tensor({1, 8, 8}, rng);
    Tensor k = random_tensor({2, 1, 2, 2}, rng);    // conv weight [O,C,kh,kw]
    Tensor kt = random_tensor({2, 1, 2, 2}, rng);   // transpose weight [C,O,kh,kw]
    Tensor mid = conv2d(x, k, 2, 0);
    CHECK(mid.shape() == std::vector<int>{2, 4, 4});
    Tensor back = conv_transpose2d(mid, kt, 2, 0);
    CHECK(back.shape() == std::vector<int>{1, 8, 8});
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
    Rng rng(44);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor({2, 3, 3}, rng);
        Tensor k = random_tensor({2, 3, 2, 2}, rng);
        auto res = grad_check({x, k}, [&] { return sum(conv_transpose2d(x, k, 2, 0)); });
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("linear identity weight and zero bias is the identity") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor w = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor b = Tensor::zeros({3});
    Tensor y = linear(x, w, b);
    for (std::size_t i = 0; i < 6; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("linear zero weight returns bias") {
    Tensor x = Tensor::from({2, 2}, {7, 8, 9, 10});
    Tensor w = Tensor::zeros({3, 2});
    Tensor b = Tensor::from({3}, {0.5, -1.0, 2.0});
    Tensor y = linear(x, w, b);
    for (int r = 0; r < 2; ++r)
        for (int o = 0; o < 3; ++o) CHECK(y.at({r, o}) == doctest::Approx(b.data()[o]));
}

TEST_CASE("linear gradients match finite differences") {
    Rng rng(45);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor({3, 4}, rng);
        Tensor w = random_tensor({2, 4}, rng);
        Tensor b = random_tensor({2}, rng);
        auto res = grad_check({x, w, b}, [&] { return mean(linear(x, w, b)); });
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("softmax uniform input yields 1/n") {
    Tensor x = Tensor::full({5}, 3.0);
    Tensor y = softmax(x, 0);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("softmax closed form on [0, ln 3]") {
    Tensor x = Tensor::from({2}, {0.0, std::log(3.0)});
    Tensor y = softmax(x, 0);
    CHECK(y.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one within 1e-12 for large inputs") {
    Rng rng(46);
    Tensor x = random_tensor({6, 7}, rng, -50.0, 50.0);
    Tensor y = softmax(x, 1);
    for (int r = 0; r < 6; ++r) {
        double total = 0.0;
        for (int c = 0; c < 7; ++c) total += y.at({r, c});
        CHECK(std::abs(total - 1.0) < 1e-12);
    }
}

TEST_CASE("softmax gradients match finite differences") {
    Rng rng(47);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor({4}, rng, -2.0, 2.0);
        Tensor coef = random_tensor({4}, rng);
        auto res = grad_check({x}, [&] { return sum(mul(softmax(x, 0), coef)); });
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("bce closed form at p=0.5 t=1") {
    Tensor p = Tensor::scalar(0.5);
    Tensor t = Tensor::scalar(1.0);
    CHECK(bce_loss(p, t).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("bce is near zero when p matches target") {
    Tensor p = Tensor::from({2}, {1e-7, 1.0 - 1e-7});
    Tensor t = Tensor::from({2}, {0.0, 1.0});
    CHECK(bce_loss(p, t).item() < 1e-6);
}

TEST_CASE("bce rejects non-binary targets") {
    Tensor p = Tensor::scalar(0.5);
    Tensor t = Tensor::scalar(0.25);
    CHECK_THROWS_AS(bce_loss(p, t), InputError);
}

TEST_CASE("bce gradients match finite differences") {
    Rng rng(48);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor p = random_tensor({6}, rng, 0.05, 0.95);
        Tensor t = Tensor::zeros({6});
        for (auto& v : t.raw()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        auto res = grad_check({p}, [&] { return bce_loss(p, t); });
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("l1 loss basics") {
    Tensor a = Tensor::from({3}, {1, 2, 3});
    CHECK(l1_loss(a, a).item() == 0.0);
    Tensor b = Tensor::from({3}, {2, 1, 4});
    CHECK(l1_loss(a, b).item() == doctest::Approx(1.0));
}

TEST_CASE("l1 gradients away from ties") {
    Rng rng(49);
    Tensor a = random_tensor({5}, rng, 1.0, 2.0);
    Tensor b = random_tensor({5}, rng, -2.0, -1.0);
    auto res = grad_check({a, b}, [&] { return l1_loss(a, b); });
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("mce masks confident background and keeps the rest") {
    Tensor t0 = Tensor::scalar(0.0);
    CHECK(mce_loss(Tensor::scalar(0.2), t0, 0.1).item() == 0.0);
    CHECK(mce_loss(Tensor::scalar(0.05), t0, 0.1).item() ==
          doctest::Approx(-std::log(0.95)));
    Tensor t1 = Tensor::scalar(1.0);
    CHECK(mce_loss(Tensor::scalar(0.2), t1, 0.1).item() == doctest::Approx(-std::log(0.2)));
    CHECK(mce_loss(Tensor::scalar(0.2), t1, 0.9).item() == doctest::Approx(-std::log(0.2)));
}

TEST_CASE("mce rejects thresholds outside (0,1)") {
    Tensor p = Tensor::scalar(0.5);
    Tensor t = Tensor::scalar(0.0);
    CHECK_THROWS_AS(mce_loss(p, t, 0.0), ConfigError);
    CHECK_THROWS_AS(mce_loss(p, t, 1.0), ConfigError);
}

TEST_CASE("mce equals bce when nothing is masked, and masked terms carry no gradient") {
    Rng rng(50);
    Tensor p = random_tensor({8}, rng, 0.02, 0.08);  // all below threshold
    Tensor t = Tensor::zeros({8});
    const double p_th = 0.1;
    CHECK(mce_loss(p, t, p_th).item() == doctest::Approx(bce_loss(p, t).item()));

    // Active-branch gradient matches finite differences.
    auto res = grad_check({p}, [&] { return mce_loss(p, t, p_th); });
    CHECK(res.max_rel_err < 1e-5);

    // Masked elements contribute nothing.
    Tensor pm = Tensor::from({2}, {0.5, 0.05});
    Tensor tm = Tensor::zeros({2});
    pm.set_requires_grad(true);
    Tensor loss = mce_loss(pm, tm, 0.1);
    backward(loss);
    CHECK(pm.grad()[0] == 0.0);
    CHECK(pm.grad()[1] != 0.0);
}

TEST_CASE("backward of sum gives unit gradients and constants give zero") {
    Tensor x = Tensor::zeros({4});
    x.set_requires_grad(true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    Tensor y = Tensor::zeros({3});
    y.set_requires_grad(true);
    y.zero_grad();
    Tensor c = Tensor::scalar(5.0);
    c.set_requires_grad(true);
    backward(sum(c));
    for (double g : y.grad()) CHECK(g == 0.0);  // unreachable parameter stays zero
}

TEST_CASE("backward rejects non-scalar losses") {
    Tensor x = Tensor::zeros({3});
    x.set_requires_grad(true);
    CHECK_THROWS_AS(backward(add(x, x)), InputError);
}

TEST_CASE("composite conv+linear+bce graph matches finite differences") {
    Rng rng(51);
    Tensor x = random_tensor({1, 4, 4}, rng);
    Tensor k = random_tensor({2, 1, 3, 3}, rng);
    Tensor w = random_tensor({1, 8}, rng);
    Tensor b = random_tensor({1}, rng);
    Tensor t = Tensor::from({1}, {1.0});
    auto forward = [&] {
        Tensor h = leaky_relu(conv2d(x, k, 1, 0), 0.1);
        Tensor flat = reshape(h, {1, 8});
        Tensor logit = reshape(linear(flat, w, b), {1});
        return bce_loss(sigmoid(logit), t);
    };
    auto res = grad_check({x, k, w, b}, forward);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("matmul, transpose, gather, concat and roi pool gradients") {
    Rng rng(52);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    auto res = grad_check({a, b}, [&] { return sum(matmul(a, b)); });
    CHECK(res.max_rel_err < 1e-5);

    Tensor c = random_tensor({3, 5}, rng);
    res = grad_check({c}, [&] { return mean(transpose2d(c)); });
    CHECK(res.max_rel_err < 1e-5);

    Tensor d = random_tensor({6}, rng);
    res = grad_check({d}, [&] { return sum(gather(d, {0, 2, 2, 5})); });
    CHECK(res.max_rel_err < 1e-5);

    Tensor e = random_tensor({2, 3, 3}, rng);
    Tensor f = random_tensor({1, 3, 3}, rng);
    res = grad_check({e, f}, [&] { return sum(concat_channels(e, f)); });
    CHECK(res.max_rel_err < 1e-5);

    Tensor g = random_tensor({2, 6, 6}, rng);
    res = grad_check({g}, [&] { return sum(roi_max_pool(g, 0.7, 1.2, 5.1, 5.9, 2)); });
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("roi pool covers whole map at one bin and flags degenerate windows") {
    Tensor x = Tensor::from({1, 2, 2}, {1, 7, 3, 5});
    Tensor y = roi_max_pool(x, 0, 0, 2, 2, 1);
    CHECK(y.data()[0] == 7.0);

    bool degenerate = false;
    Tensor z = roi_max_pool(x, 5, 5, 5, 5, 2, &degenerate);
    CHECK(degenerate);
    for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("forward ops reject non-finite results") {
    Tensor x = Tensor::from({1}, {1e308});
    CHECK_THROWS_AS(add(x, x), InvariantError);
}

TEST_CASE("sgd step and inverse-time decay schedule") {
    ParamStore store;
    Tensor w = store.add_param("w", Tensor::scalar(1.0));
    SgdConfig cfg{0.01, 0.01};

    // Params without gradients stay put.
    sgd_step(store, cfg, 0);
    CHECK(w.data()[0] == 1.0);

    w.zero_grad();
    w.grad_mut()[0] = 1.0;
    sgd_step(store, cfg, 0);
    CHECK(w.data()[0] == doctest::Approx(0.99));

    CHECK(sgd_learning_rate(cfg, 0) == doctest::Approx(0.01));
    CHECK(sgd_learning_rate(cfg, 1) == doctest::Approx(0.01 / 1.01));
    CHECK(sgd_learning_rate(cfg, 2) == doctest::Approx(0.01 / 1.02));
}

TEST_CASE("param store flatten round-trips bitwise and keeps registration order") {
    Rng rng(53);
    ParamStore a;
    a.add_param("c1", random_tensor({2, 1, 3, 3}, rng));
    a.add_param("c2", random_tensor({4}, rng));
    CHECK_THROWS_AS(a.add_param("c1", Tensor::zeros({1})), ConfigError);

    auto flat = a.flatten();
    CHECK(flat.size() == static_cast<std::size_t>(a.total_size()));

    ParamStore b;
    b.add_param("c1", Tensor::zeros({2, 1, 3, 3}));
    b.add_param("c2", Tensor::zeros({4}));
    b.load_flat(flat);
    CHECK(b.flatten() == flat);

    std::vector<double> wrong(flat.size() + 1, 0.0);
    CHECK_THROWS_AS(b.load_flat(wrong), ConfigError);
}

TEST_CASE("forward passes are deterministic") {
    Rng rng(54);
    Tensor x = random_tensor({2, 5, 5}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    Tensor y1 = conv2d(x, k, 1, 1);
    Tensor y2 = conv2d(x, k, 1, 1);
    CHECK(y1.data() == y2.data());
}

TEST_CASE("no-grad guard suppresses tape construction") {
    Tensor x = Tensor::zeros({3});
    x.set_requires_grad(true);
    NoGradGuard guard;
    Tensor y = add(x, x);
    CHECK_FALSE(y.requires_grad());
}
