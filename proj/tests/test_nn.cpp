#include <cmath>

#include "ammnet/nn.hpp"
#include "ammnet/rng.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace ammnet;

TEST_CASE("linear identity and hand value") {
    Linear<float> l(2, 2);
    l.weight.data() = {1, 0, 0, 1};
    auto x = Tensor<float>::from({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK(l.forward(x).data() == x.data());

    Linear<float> s(2, 1);
    s.weight.data() = {1, 1};
    auto v = Tensor<float>::from({1, 2}, {3, 4});
    CHECK(s.forward(v).item() == 7.0f);

    CHECK_THROWS_AS(s.forward(Tensor<float>::zeros({1, 3})), DimensionError);
}

TEST_CASE("linear gradient of mean(output) w.r.t. W") {
    Linear<double> l(3, 4);
    auto wr = gradcheck::random_tensor({4, 3}, 1);
    l.weight.data() = wr.data();
    auto x = gradcheck::random_tensor({5, 3}, 2, false);
    CHECK(gradcheck::max_rel_err_multi({&l.weight, &l.bias},
                                       [&] { return mean_all(l.forward(x)); }) < 1e-6);
}

TEST_CASE("batchnorm training normalizes per channel") {
    BatchNorm<double> bn(3);
    std::fill(bn.gamma.data().begin(), bn.gamma.data().end(), 1.0);
    auto x = gradcheck::random_tensor({16, 3}, 11, false);
    for (auto& v : x.data()) v = v * 3.0 + 1.5;
    auto y = bn.forward(x, true);
    for (int c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (int i = 0; i < 16; ++i) mean += y.data()[i * 3 + c];
        mean /= 16;
        for (int i = 0; i < 16; ++i) {
            double d = y.data()[i * 3 + c] - mean;
            var += d * d;
        }
        var /= 16;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("batchnorm eval with identity statistics is identity") {
    BatchNorm<double> bn(2);
    std::fill(bn.gamma.data().begin(), bn.gamma.data().end(), 1.0);
    auto x = gradcheck::random_tensor({4, 2}, 12, false);
    auto y = bn.forward(x, false);
    for (size_t i = 0; i < x.data().size(); ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-4));
}

TEST_CASE("batchnorm batch of 1 in training mode errors") {
    BatchNorm<double> bn(2);
    CHECK_THROWS_AS(bn.forward(Tensor<double>::zeros({1, 2}), true), InvariantError);
    // spatial elements count toward the reduction
    CHECK_NOTHROW(bn.forward(Tensor<double>::zeros({1, 2, 2, 2}), true));
}

TEST_CASE("batchnorm gradient 4x3 input") {
    BatchNorm<double> bn(3);
    auto g0 = gradcheck::random_tensor({3}, 13);
    for (auto& v : g0.data()) v = 0.5 + std::abs(v);
    bn.gamma.data() = g0.data();
    auto x = gradcheck::random_tensor({4, 3}, 14);
    auto w = gradcheck::random_tensor({4, 3}, 15, false);
    CHECK(gradcheck::max_rel_err_multi({&x, &bn.gamma, &bn.beta}, [&] {
              return sum_all(mul(bn.forward(x, true), w));
          }) < 1e-4);
    CHECK(gradcheck::max_rel_err(x, [&] { return sum_all(mul(bn.forward(x, false), w)); }) < 1e-4);
}

TEST_CASE("batchnorm 4d gradient") {
    BatchNorm<double> bn(2);
    std::fill(bn.gamma.data().begin(), bn.gamma.data().end(), 1.0);
    auto x = gradcheck::random_tensor({2, 2, 3, 3}, 16);
    auto w = gradcheck::random_tensor({2, 2, 3, 3}, 17, false);
    CHECK(gradcheck::max_rel_err(x, [&] { return sum_all(mul(bn.forward(x, true), w)); }) < 1e-4);
}

TEST_CASE("batchnorm running stats stay nonnegative and update by momentum") {
    BatchNorm<double> bn(1);
    std::fill(bn.gamma.data().begin(), bn.gamma.data().end(), 1.0);
    auto x = Tensor<double>::from({4, 1}, {0.0, 1.0, 2.0, 3.0});
    bn.forward(x, true);
    CHECK(bn.running_mean[0] == doctest::Approx(0.1 * 1.5).epsilon(1e-12));
    CHECK(bn.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25).epsilon(1e-12));
    CHECK(bn.running_var[0] >= 0.0);
}

TEST_CASE("adamw zero gradient with zero decay is a fixed point") {
    ParamStore<double> store;
    auto p = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
    store.add("p", p, 3, ParamKind::Weight);
    auto before = p.data();
    AdamW<double> opt(0.1, 0.0);
    p.zero_grad();
    opt.step(store);
    CHECK(p.data() == before);
}

TEST_CASE("adamw first step moves by about lr") {
    ParamStore<double> store;
    auto p = Tensor<double>::from({1}, {1.0}, true);
    store.add("p", p, 1, ParamKind::Weight);
    p.zero_grad();
    p.node()->grad[0] = 1.0;
    AdamW<double> opt(0.1, 0.0);
    opt.step(store);
    CHECK(p.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adamw missing grad names the parameter") {
    ParamStore<double> store;
    auto p = Tensor<double>::from({1}, {1.0}, true);
    store.add("enc.w", p, 1, ParamKind::Weight);
    AdamW<double> opt(0.1, 0.0);
    CHECK_THROWS_WITH_AS(opt.step(store), doctest::Contains("enc.w"), InvariantError);
}

TEST_CASE("adamw skips frozen parameters") {
    ParamStore<double> store;
    auto p = Tensor<double>::from({1}, {1.0}, true);
    store.add("frozen.w", p, 1, ParamKind::Weight, true);
    AdamW<double> opt(0.1, 0.0);
    CHECK_NOTHROW(opt.step(store));
    CHECK(p.data()[0] == 1.0);
}

TEST_CASE("adamw update is per-parameter (registration order invariant)") {
    auto run = [](bool swap) {
        ParamStore<double> store;
        auto a = Tensor<double>::from({1}, {1.0}, true);
        auto b = Tensor<double>::from({1}, {2.0}, true);
        if (swap) {
            store.add("b", b, 1, ParamKind::Weight);
            store.add("a", a, 1, ParamKind::Weight);
        } else {
            store.add("a", a, 1, ParamKind::Weight);
            store.add("b", b, 1, ParamKind::Weight);
        }
        a.zero_grad();
        b.zero_grad();
        a.node()->grad[0] = 0.3;
        b.node()->grad[0] = -0.7;
        AdamW<double> opt(0.05, 0.0);
        opt.step(store);
        return std::pair{a.data()[0], b.data()[0]};
    };
    CHECK(run(false) == run(true));
}

TEST_CASE("cosine schedule hits 0.5 at half horizon") {
    CHECK(cosine_factor(15, 30) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(cosine_factor(0, 30) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine_factor(30, 30) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("init determinism and fan-in scaling") {
    auto build = [](uint64_t seed) {
        ParamStore<float> store;
        Linear<float> l(1000, 1000);
        l.register_params(store, "lin");
        init_params(store, seed);
        return l.weight.data();
    };
    auto w1 = build(7);
    auto w2 = build(7);
    CHECK(w1 == w2);
    auto w3 = build(8);
    CHECK(w1 != w3);

    double var = 0, mean = 0;
    for (float v : w1) mean += v;
    mean /= static_cast<double>(w1.size());
    for (float v : w1) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w1.size());
    const double target = 2.0 / 1000.0;
    CHECK(var > target * 0.9);
    CHECK(var < target * 1.1);
}

TEST_CASE("init: biases zero, gamma one, beta zero") {
    ParamStore<float> store;
    Linear<float> l(4, 4);
    BatchNorm<float> bn(4);
    l.register_params(store, "lin");
    bn.register_params(store, "bn");
    init_params(store, 3);
    for (float v : l.bias.data()) CHECK(v == 0.0f);
    for (float v : bn.gamma.data()) CHECK(v == 1.0f);
    for (float v : bn.beta.data()) CHECK(v == 0.0f);
}

TEST_CASE("init is invariant to registration order (per-name streams)") {
    ParamStore<float> s1, s2;
    Linear<float> a1(8, 8), b1(8, 8), a2(8, 8), b2(8, 8);
    a1.register_params(s1, "a");
    b1.register_params(s1, "b");
    b2.register_params(s2, "b");
    a2.register_params(s2, "a");
    init_params(s1, 42);
    init_params(s2, 42);
    CHECK(a1.weight.data() == a2.weight.data());
    CHECK(b1.weight.data() == b2.weight.data());
}

TEST_CASE("param store rejects duplicates and reports totals") {
    ParamStore<float> store;
    store.add("x", Tensor<float>::zeros({2, 3}, true), 3, ParamKind::Weight);
    CHECK_THROWS_AS(store.add("x", Tensor<float>::zeros({1}, true), 1, ParamKind::Bias),
                    InvariantError);
    store.add("y", Tensor<float>::zeros({4}, true), 4, ParamKind::Bias);
    CHECK(store.total_numel() == 10);
}
