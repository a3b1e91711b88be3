#include <cmath>

#include "ammnet/rng.hpp"
#include "ammnet/tensor.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace ammnet;

TEST_CASE("matmul identity and hand values") {
    auto i2 = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
    auto m = Tensor<float>::from({2, 2}, {3, 4, 5, 6});
    auto r = matmul(i2, m);
    CHECK(r.data() == std::vector<float>{3, 4, 5, 6});

    auto a = Tensor<float>::from({1, 2}, {1, 2});
    auto b = Tensor<float>::from({2, 1}, {3, 4});
    CHECK(matmul(a, b).item() == doctest::Approx(11.0).epsilon(1e-7));
}

TEST_CASE("matmul shape errors name both shapes") {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({4, 5});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
    CHECK_THROWS_AS(matmul(a, Tensor<float>::zeros({3})), DimensionError);
}

TEST_CASE("matmul gradient vs finite differences") {
    auto a = gradcheck::random_tensor({4, 3}, 11);
    auto b = gradcheck::random_tensor({3, 5}, 12);
    double err = gradcheck::max_rel_err_multi({&a, &b}, [&] { return sum_all(matmul(a, b)); });
    CHECK(err < 1e-6);

    auto c = gradcheck::random_tensor({4, 3}, 13);
    auto d = gradcheck::random_tensor({5, 3}, 14);
    err = gradcheck::max_rel_err_multi({&c, &d}, [&] { return sum_all(matmul_nt(c, d)); });
    CHECK(err < 1e-6);
}

TEST_CASE("softmax_rows values") {
    auto x = Tensor<double>::from({1, 2}, {0.0, 0.0});
    auto y = softmax_rows(x);
    CHECK(y.data()[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(y.data()[1] == doctest::Approx(0.5).epsilon(1e-9));

    auto big = Tensor<double>::from({1, 3}, {1000.0, 1000.0, 1000.0});
    auto by = softmax_rows(big);
    for (double v : by.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-9));

    auto ln = Tensor<double>::from({1, 2}, {std::log(2.0), std::log(1.0)});
    auto ly = softmax_rows(ln);
    CHECK(ly.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
    CHECK(ly.data()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("softmax_rows properties: rows sum to 1, entries in [0,1], NaN rejected") {
    auto x = gradcheck::random_tensor({17, 9}, 21, false);
    for (auto& v : x.data()) v *= 8.0;
    auto y = softmax_rows(x);
    for (int64_t i = 0; i < 17; ++i) {
        double s = 0;
        for (int64_t j = 0; j < 9; ++j) {
            double v = y.data()[i * 9 + j];
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    auto bad = Tensor<double>::from({1, 2}, {std::nan(""), 0.0});
    CHECK_THROWS_AS(softmax_rows(bad), NumericError);
}

TEST_CASE("softmax_rows gradient") {
    auto x = gradcheck::random_tensor({3, 4}, 22);
    auto w = gradcheck::random_tensor({3, 4}, 23, false);
    double err = gradcheck::max_rel_err(x, [&] { return sum_all(mul(softmax_rows(x), w)); });
    CHECK(err < 1e-4);
}

TEST_CASE("elementwise suite values") {
    auto x = Tensor<float>::from({3}, {-1, 0, 2});
    CHECK(relu(x).data() == std::vector<float>{0, 0, 2});

    auto p = Tensor<double>::from({3}, {0.5, 1.5, 3.0});
    auto back = exp(log(p));
    for (int i = 0; i < 3; ++i)
        CHECK(back.data()[i] == doctest::Approx(p.data()[i]).epsilon(1e-6));
}

TEST_CASE("gradient of sum(a*b) w.r.t. a equals b exactly") {
    auto a = gradcheck::random_tensor({3, 3}, 31);
    auto b = gradcheck::random_tensor({3, 3}, 32, false);
    auto loss = sum_all(mul(a, b));
    loss.backward();
    CHECK(a.grad() == b.data());
}

TEST_CASE("relu gradient: zero at exactly 0") {
    auto x = Tensor<double>::from({3}, {-1.0, 0.0, 2.0}, true);
    sum_all(relu(x)).backward();
    CHECK(x.grad() == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("broadcast: suffix over leading axes") {
    auto a = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor<float>::from({3}, {10, 20, 30});
    auto r = add(a, b);
    CHECK(r.data() == std::vector<float>{11, 22, 33, 14, 25, 36});

    auto bad = Tensor<float>::zeros({2});
    CHECK_THROWS_AS(add(a, bad), DimensionError);
}

TEST_CASE("broadcast gradient sums over leading axes") {
    auto a = gradcheck::random_tensor({4, 3}, 41);
    auto b = gradcheck::random_tensor({3}, 42);
    double err = gradcheck::max_rel_err_multi({&a, &b}, [&] { return sum_all(mul(a, b)); });
    CHECK(err < 1e-6);
}

TEST_CASE("elementwise gradients vs finite differences") {
    auto x = gradcheck::random_tensor({5, 2}, 51);
    for (auto& v : x.data()) v = 0.5 + std::abs(v);  // keep log/div well-behaved
    auto y = gradcheck::random_tensor({5, 2}, 52);
    for (auto& v : y.data()) v = 0.5 + std::abs(v);

    CHECK(gradcheck::max_rel_err_multi({&x, &y}, [&] { return sum_all(div(x, y)); }) < 1e-4);
    CHECK(gradcheck::max_rel_err(x, [&] { return sum_all(exp(x)); }) < 1e-4);
    CHECK(gradcheck::max_rel_err(x, [&] { return sum_all(log(x)); }) < 1e-4);
    CHECK(gradcheck::max_rel_err(x, [&] { return mean_all(mul(x, x)); }) < 1e-4);
}

TEST_CASE("conv2d identity 1x1") {
    auto x = gradcheck::random_tensor({1, 2, 3, 3}, 61, false);
    auto w = Tensor<double>::from({2, 2, 1, 1}, {1, 0, 0, 1});
    auto y = conv2d(x, w, 1, 0);
    CHECK(y.data() == x.data());
}

TEST_CASE("conv2d all-ones 3x3 center is 9") {
    auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto y = conv2d(x, w, 1, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.data()[4] == 9.0f);  // center
    CHECK(y.data()[0] == 4.0f);  // corner only sees 2x2
}

TEST_CASE("conv2d dimension errors") {
    auto x = Tensor<float>::zeros({1, 2, 5, 5});
    auto w5 = Tensor<float>::zeros({3, 2, 5, 5});
    CHECK_THROWS_AS(conv2d(x, w5, 1, 2), DimensionError);  // kernel not in {1,3}
    auto wbadc = Tensor<float>::zeros({3, 4, 3, 3});
    CHECK_THROWS_AS(conv2d(x, wbadc, 1, 1), DimensionError);
}

TEST_CASE("conv2d non-integral output extent") {
    auto x = Tensor<float>::zeros({1, 1, 6, 6});
    auto w = Tensor<float>::zeros({1, 1, 3, 3});
    CHECK_THROWS_WITH_AS(conv2d(x, w, 2, 0), doctest::Contains("non-integral"),
                         DimensionError);
}

TEST_CASE("conv2d gradient vs finite differences") {
    auto x = gradcheck::random_tensor({1, 2, 4, 4}, 71);
    auto w = gradcheck::random_tensor({3, 2, 3, 3}, 72);
    auto b = gradcheck::random_tensor({3}, 73);
    double err = gradcheck::max_rel_err_multi(
        {&x, &w, &b}, [&] { return sum_all(conv2d(x, w, std::optional<Tensor<double>>(b), 1, 1)); });
    CHECK(err < 1e-4);

    // strided, no pad
    auto x2 = gradcheck::random_tensor({2, 2, 5, 5}, 74);
    auto w2 = gradcheck::random_tensor({4, 2, 3, 3}, 75);
    err = gradcheck::max_rel_err_multi(
        {&x2, &w2}, [&] { return sum_all(conv2d(x2, w2, 2, 0)); });
    CHECK(err < 1e-4);
}

TEST_CASE("shape ops roundtrip and gradients") {
    auto x = gradcheck::random_tensor({2, 3, 2, 2}, 81);
    auto t = tokens_from_nchw(x);
    CHECK(t.shape() == Shape{8, 3});
    auto back = tokens_to_nchw(t, 2, 3, 2, 2);
    CHECK(back.data() == x.data());

    CHECK(gradcheck::max_rel_err(x, [&] {
              auto tok = tokens_from_nchw(x);
              auto r2 = rows(tok, 1, 5);
              return sum_all(mul(r2, r2));
          }) < 1e-6);

    auto a = gradcheck::random_tensor({2, 3}, 82);
    auto b = gradcheck::random_tensor({1, 3}, 83);
    auto cat = concat_rows<double>({a, b});
    CHECK(cat.shape() == Shape{3, 3});
    CHECK(gradcheck::max_rel_err_multi({&a, &b}, [&] {
              return sum_all(mul(concat_rows<double>({a, b}), concat_rows<double>({a, b})));
          }) < 1e-6);
}

TEST_CASE("upsample and pooling gradients") {
    auto x = gradcheck::random_tensor({2, 3, 3, 3}, 91);
    CHECK(gradcheck::max_rel_err(x, [&] {
              auto u = upsample_nearest2x(x);
              return sum_all(mul(u, u));
          }) < 1e-6);
    CHECK(gradcheck::max_rel_err(x, [&] {
              auto g = global_avg_pool(x);
              return sum_all(mul(g, g));
          }) < 1e-6);
}

TEST_CASE("determinism: same seed, same inputs, bit-identical outputs") {
    auto make = [] {
        auto a = gradcheck::random_tensor({8, 8}, 123, false);
        auto b = gradcheck::random_tensor({8, 8}, 321, false);
        return matmul(softmax_rows(a), relu(b));
    };
    auto r1 = make();
    auto r2 = make();
    CHECK(r1.data() == r2.data());
}

TEST_CASE("gradient accumulation: sum of two heads equals summed gradients") {
    auto x = gradcheck::random_tensor({3, 3}, 131);
    auto w = gradcheck::random_tensor({3, 3}, 132, false);

    auto head1 = [&] { return sum_all(mul(x, x)); };
    auto head2 = [&] { return sum_all(matmul(x, w)); };

    x.clear_grad();
    add(head1(), head2()).backward();
    auto combined = x.grad();

    x.clear_grad();
    head1().backward();
    auto g1 = x.grad();
    x.clear_grad();
    head2().backward();
    auto g2 = x.grad();

    for (size_t i = 0; i < combined.size(); ++i)
        CHECK(combined[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
}

TEST_CASE("second backward on the same graph is an error") {
    auto x = gradcheck::random_tensor({2, 2}, 141);
    auto loss = sum_all(mul(x, x));
    loss.backward();
    CHECK_THROWS_AS(loss.backward(), InvariantError);
}

TEST_CASE("backward requires scalar root") {
    auto x = gradcheck::random_tensor({2, 2}, 151);
    auto y = mul(x, x);
    CHECK_THROWS_AS(y.backward(), InvariantError);
}

TEST_CASE("cross entropy values") {
    // uniform logits -> ln K
    auto logits = Tensor<double>::zeros({1, 4, 2, 2});
    std::vector<int32_t> labels{0, 1, 2, 3};
    CHECK(cross_entropy_nchw(logits, labels).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // K=2, single pixel, logits [ln3, ln1], label 0 -> -ln(0.75)
    auto l2 = Tensor<double>::from({1, 2, 1, 1}, {std::log(3.0), 0.0});
    CHECK(cross_entropy_nchw(l2, {0}).item() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));

    // ignored pixels drop out
    auto l3 = Tensor<double>::from({1, 2, 1, 2}, {std::log(3.0), 5.0, 0.0, -2.0});
    CHECK(cross_entropy_nchw(l3, {0, 255}).item() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));

    CHECK_THROWS_WITH_AS(cross_entropy_nchw(l2, {7}), doctest::Contains("pixel"), DataError);
    CHECK_THROWS_AS(cross_entropy_nchw(l2, {255}), DataError);
}

TEST_CASE("cross entropy gradient") {
    auto logits = gradcheck::random_tensor({2, 3, 2, 2}, 161);
    std::vector<int32_t> labels{0, 1, 2, 255, 1, 1, 0, 2};
    CHECK(gradcheck::max_rel_err(logits, [&] { return cross_entropy_nchw(logits, labels); }) < 1e-4);
}

TEST_CASE("no-grad mode builds no graph") {
    auto x = gradcheck::random_tensor({2, 2}, 171);
    NoGradGuard guard;
    auto y = sum_all(mul(x, x));
    CHECK_FALSE(y.requires_grad());
}
