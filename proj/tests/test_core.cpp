#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "unigen/core/gradcheck.hpp"
#include "unigen/core/ops.hpp"
#include "unigen/core/ops_nn.hpp"

using namespace unigen::core;

namespace {

using D = double;
using TapeD = Tape<D>;
using VarD = Var<D>;
using TenD = Tensor<D>;

TenD rand_tensor(Shape s, Rng& rng, double scale = 1.0) {
    TenD t(std::move(s));
    for (auto& x : t.v) x = (rng.next_double() * 2.0 - 1.0) * scale;
    return t;
}

// Runs gradcheck on 10 random points and returns the worst error.
double gradcheck_many(const std::function<VarD(TapeD&, std::vector<VarD>&)>& f,
                      const std::vector<Shape>& shapes, uint64_t seed, double tol) {
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(trial)));
        std::vector<TenD> points;
        for (const auto& s : shapes) points.push_back(rand_tensor(s, rng));
        auto rep = gradcheck<D>(f, points, tol);
        INFO(rep.detail);
        CHECK(rep.pass);
        worst = std::max(worst, rep.max_rel_err);
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul identity returns operand") {
    TapeD t;
    TenD eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.v[static_cast<size_t>(i * 3 + i)] = 1.0;
    Rng rng(7);
    TenD a = rand_tensor({3, 3}, rng);
    auto va = t.leaf(a, false);
    auto ve = t.constant(eye);
    auto y = matmul(ve, va);
    CHECK(max_abs_diff(y.val(), a) == 0.0);
}

TEST_CASE("softmax of zeros is uniform") {
    TapeD t;
    auto x = t.leaf(TenD::zeros({1, 4}), false);
    auto bounds = std::make_shared<const std::vector<int32_t>>(std::vector<int32_t>{4});
    auto y = masked_softmax(x, bounds);
    for (int i = 0; i < 4; ++i) CHECK(y.val().v[static_cast<size_t>(i)] == Catch::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("sigmoid at zero") {
    TapeD t;
    auto x = t.leaf(TenD::scalar(0.0), false);
    CHECK(sigmoid(x).scalar() == 0.5);
}

TEST_CASE("gradcheck quadratic analytic case") {
    // f(x) = x^2 at x = 3: analytic gradient 6, exact under central differences.
    auto f = [](TapeD& t, std::vector<VarD>& v) { return mul(v[0], v[0]); };
    auto rep = gradcheck<D>(f, {TenD::scalar(3.0)}, 1e-9);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-9);
}

TEST_CASE("gradcheck constant function has zero gradient") {
    // f(x) = sum(softmax(x)) == 1.
    auto f = [](TapeD& t, std::vector<VarD>& v) {
        auto bounds = std::make_shared<const std::vector<int32_t>>(std::vector<int32_t>{6});
        return sum_all(masked_softmax(reshape(v[0], {1, 6}), bounds));
    };
    Rng rng(3);
    auto rep = gradcheck<D>(f, {rand_tensor({6}, rng)}, 1e-6);
    CHECK(rep.pass);
    Tape<D> t;
    auto v = t.leaf(rand_tensor({6}, rng), true);
    auto bounds = std::make_shared<const std::vector<int32_t>>(std::vector<int32_t>{6});
    auto out = sum_all(masked_softmax(reshape(v, {1, 6}), bounds));
    t.backward(out);
    for (double g : t.grad(v.id).v) CHECK(std::fabs(g) < 1e-12);
}

TEST_CASE("gradcheck elementwise and reduction primitives") {
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(add(v[0], v[1])); },
                   {{3, 4}, {3, 4}}, 11, 1e-6);
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(sub(v[0], v[1])); },
                   {{3, 4}, {3, 4}}, 12, 1e-6);
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(mul(v[0], v[1])); },
                   {{5}, {5}}, 13, 1e-6);
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return mean_all(scale(v[0], 2.5)); }, {{7}},
                   14, 1e-6);
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(exp(v[0])); }, {{6}}, 15,
                   1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) { return sum_all(log(add_scalar(exp(v[0]), 1.5))); },
        {{6}}, 16, 1e-6);
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(sigmoid(v[0])); }, {{6}}, 17,
                   1e-6);
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(softplus(v[0])); }, {{6}}, 18,
                   1e-6);
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(silu(v[0])); }, {{6}}, 19,
                   1e-6);
}

TEST_CASE("gradcheck matmul variants") {
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(matmul(v[0], v[1])); },
                   {{3, 4}, {4, 5}}, 21, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) { return sum_all(matmul(v[0], v[1], false, true)); },
        {{3, 4}, {5, 4}}, 22, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) { return sum_all(matmul(v[0], v[1], true, false)); },
        {{4, 3}, {4, 5}}, 23, 1e-6);
    // Batched with broadcast right operand.
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(matmul(v[0], v[1])); },
                   {{2, 3, 4}, {4, 5}}, 24, 1e-6);
    // Fully batched.
    gradcheck_many([](TapeD&, std::vector<VarD>& v) { return sum_all(matmul(v[0], v[1])); },
                   {{2, 3, 4}, {2, 4, 5}}, 25, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) { return sum_all(mul(matmul(v[0], v[1], false, true), matmul(v[0], v[1], false, true))); },
        {{2, 3, 4}, {2, 5, 4}}, 26, 1e-6);
}

TEST_CASE("matmul rejects shape mismatch with both shapes reported") {
    TapeD t;
    auto a = t.leaf(TenD::zeros({2, 3}), false);
    auto b = t.leaf(TenD::zeros({4, 5}), false);
    try {
        matmul(a, b);
        FAIL("expected shape mismatch");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
}

TEST_CASE("gradcheck shape ops") {
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            return sum_all(mul(reshape(v[0], {4, 3}), reshape(v[0], {4, 3})));
        },
        {{3, 4}}, 31, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto p = permute(v[0], {1, 0, 2});
            return sum_all(mul(p, p));
        },
        {{2, 3, 4}}, 32, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto s = slice_rows(v[0], 1, 2);
            return sum_all(mul(s, s));
        },
        {{2, 4, 3}}, 33, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto c = concat_rows<D>({v[0], v[1]});
            return sum_all(mul(c, c));
        },
        {{2, 2, 3}, {2, 4, 3}}, 34, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto g = gather_rows(v[0], {2, 0, 2, 1});
            return sum_all(mul(g, g));
        },
        {{3, 5}}, 35, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto s = select_cols(v[0], {1, 0, 2});
            return sum_all(mul(s, s));
        },
        {{3, 4}}, 36, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) { return sum_all(mul(add_slice_rows(v[0], v[1], 1), add_slice_rows(v[0], v[1], 1))); },
        {{2, 4, 3}, {2, 2, 3}}, 37, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) { return sum_all(mul(add_broadcast_rows(v[0], v[1]), add_broadcast_rows(v[0], v[1]))); },
        {{2, 3, 4}, {3, 4}}, 38, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) { return sum_all(mul(add_bias(v[0], v[1]), add_bias(v[0], v[1]))); },
        {{3, 4}, {4}}, 39, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto m = row_mask_scale(v[0], {1.0, 0.0, 0.5});
            return sum_all(mul(m, m));
        },
        {{2, 3, 4}}, 40, 1e-6);
}

TEST_CASE("gradcheck nn primitives") {
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto bounds = std::make_shared<const std::vector<int32_t>>(std::vector<int32_t>{1, 3, 4, 4});
            auto p = masked_softmax(v[0], bounds);
            return sum_all(mul(p, p));
        },
        {{2, 4, 4}}, 41, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto l = log_softmax(v[0]);
            return sum_all(mul(l, l));
        },
        {{3, 5}}, 42, 1e-6);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto y = layer_norm(v[0], v[1], v[2]);
            return sum_all(mul(y, y));
        },
        {{4, 6}, {6}, {6}}, 43, 1e-6);
}

TEST_CASE("gradcheck conv and resample compositions") {
    // Spec allows 1e-4 for compositions through conv/resample.
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto y = conv2d(v[0], v[1], v[2], 1, 1);
            return sum_all(mul(y, y));
        },
        {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, 51, 1e-4);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto y = conv2d(v[0], v[1], v[2], 2, 1);
            return sum_all(mul(y, y));
        },
        {{1, 2, 6, 6}, {4, 2, 3, 3}, {4}}, 52, 1e-4);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto y = resize_bilinear(v[0], 5, 7);
            return sum_all(mul(y, y));
        },
        {{1, 2, 3, 4}}, 53, 1e-4);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto y = resize_bilinear(v[0], 2, 2);
            return sum_all(mul(y, y));
        },
        {{1, 2, 4, 4}}, 54, 1e-4);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto y = resize_nearest(v[0], 6, 6);
            return sum_all(mul(y, y));
        },
        {{1, 2, 3, 3}}, 55, 1e-4);
    gradcheck_many(
        [](TapeD&, std::vector<VarD>& v) {
            auto y = avg_pool_to(v[0], 2, 2);
            return sum_all(mul(y, y));
        },
        {{2, 3, 4, 4}}, 56, 1e-4);
}

TEST_CASE("backward of a sum of losses equals sum of backwards") {
    // Each loss consumes the shared leaf exactly once, so the accumulated
    // gradient is a two-term addition and linearity holds bit-exactly.
    Rng rng(99);
    TenD x0 = rand_tensor({4, 4}, rng);
    TenD w1 = rand_tensor({4, 4}, rng);
    TenD w2 = rand_tensor({4, 4}, rng);
    auto grad_of = [&](int which) {
        TapeD t;
        auto x = t.leaf(x0, true);
        auto h1 = mul(x, t.constant(w1));
        auto h2 = mul(x, t.constant(w2));
        auto l1 = sum_all(silu(h1));
        auto l2 = mean_all(sigmoid(h2));
        VarD loss = which == 0 ? l1 : which == 1 ? l2 : add(l1, l2);
        t.backward(loss);
        return t.grad(x.id);
    };
    TenD g1 = grad_of(0), g2 = grad_of(1), gsum = grad_of(2);
    for (int64_t i = 0; i < gsum.size(); ++i) {
        CHECK(gsum.v[static_cast<size_t>(i)] == g1.v[static_cast<size_t>(i)] + g2.v[static_cast<size_t>(i)]);
    }
}

TEST_CASE("tape determinism and float/double agreement") {
    Rng rng(123);
    TenD xd = rand_tensor({8, 8}, rng);
    auto run = [&](auto tag) {
        using F = decltype(tag);
        Tape<F> t;
        Tensor<F> xf = xd.template cast<F>();
        auto x = t.leaf(xf, false);
        auto y = matmul(x, x);
        auto z = sum_all(silu(y));
        return static_cast<double>(z.scalar());
    };
    const double a1 = run(0.0), a2 = run(0.0);
    CHECK(a1 == a2);  // bit-identical across runs
    const double f1 = run(0.0f);
    CHECK(f1 == Catch::Approx(a1).epsilon(1e-4));
}

TEST_CASE("gemm parallel result matches serial bit-for-bit") {
    Rng rng(5);
    const int64_t M = 157, N = 67, K = 43;
    std::vector<float> A(static_cast<size_t>(M * K)), B(static_cast<size_t>(K * N));
    for (auto& x : A) x = static_cast<float>(rng.next_double() - 0.5);
    for (auto& x : B) x = static_cast<float>(rng.next_double() - 0.5);
    std::vector<float> C1(static_cast<size_t>(M * N)), C2(static_cast<size_t>(M * N));
    gemm<float>(A.data(), B.data(), C1.data(), M, N, K, false, false, false);
    gemm_serial<float>(A.data(), B.data(), C2.data(), M, N, K, false, false, false);
    CHECK(C1 == C2);
}
