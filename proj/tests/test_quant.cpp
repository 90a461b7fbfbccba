#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "unigen/quant/bsq.hpp"

using namespace unigen;
using core::Rng;
using core::Tensor;

namespace {

Tensor<double> rand_map(const quant::ScaleSchedule& s, Rng& rng) {
    Tensor<double> f({s.latent_dim, s.base_h, s.base_w});
    for (auto& x : f.v) x = rng.next_gaussian();
    return f;
}

double l2(const Tensor<double>& a, const Tensor<double>& b) {
    double acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = a.v[static_cast<size_t>(i)] - b.v[static_cast<size_t>(i)];
        acc += d * d;
    }
    return std::sqrt(acc);
}

}  // namespace

TEST_CASE("quantize_unit hand cases") {
    auto [b0, q0] = quant::quantize_unit<double>({0, 0, 0, 0});
    CHECK(b0 == std::vector<uint8_t>{1, 1, 1, 1});
    for (double q : q0) CHECK(q == 0.5);  // sign(0) = +1, 1/sqrt(4)

    auto [b1, q1] = quant::quantize_unit<double>({0.5, -0.2, 0.1, -0.9});
    CHECK(b1 == std::vector<uint8_t>{1, 0, 1, 0});
    CHECK(q1 == std::vector<double>{0.5, -0.5, 0.5, -0.5});
}

TEST_CASE("quantize_unit odd symmetry and unit norm") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 1 + static_cast<int>(rng.next_below(12));
        std::vector<double> v(static_cast<size_t>(d));
        for (auto& x : v) x = rng.next_gaussian() + 1e-6;  // keep away from ties
        std::vector<double> nv(v);
        for (auto& x : nv) x = -x;
        auto [b, q] = quant::quantize_unit(v);
        auto [nb, nq] = quant::quantize_unit(nv);
        double norm = 0;
        for (int i = 0; i < d; ++i) {
            CHECK(nb[static_cast<size_t>(i)] == 1 - b[static_cast<size_t>(i)]);
            CHECK(nq[static_cast<size_t>(i)] == -q[static_cast<size_t>(i)]);
            norm += q[static_cast<size_t>(i)] * q[static_cast<size_t>(i)];
        }
        CHECK(std::fabs(std::sqrt(norm) - 1.0) < 1e-12);
    }
}

TEST_CASE("quantize_unit rejects non-finite input") {
    CHECK_THROWS_AS(quant::quantize_unit<double>({1.0, std::nan(""), 0.0, 0.0}),
                    std::invalid_argument);
}

TEST_CASE("quantize_scales zero map gives all-ones bits and zero gains") {
    auto sched = quant::ScaleSchedule::desk_lo();
    Tensor<double> f({8, 8, 8});
    auto res = quant::quantize_scales(f, sched);
    for (int k = 0; k < sched.num_scales(); ++k) {
        CHECK(res.tokens.gains[static_cast<size_t>(k)] == 0.0);
        for (uint8_t b : res.tokens.bits[static_cast<size_t>(k)]) CHECK(b == 1);
    }
    for (double x : res.acc.v) CHECK(x == 0.0);
}

TEST_CASE("quantize_scales single-scale inner-product gain") {
    quant::ScaleSchedule s;
    s.scales = {{1, 1}};
    s.latent_dim = 4;
    s.base_h = s.base_w = 1;
    Tensor<double> f({4, 1, 1}, {0.5, -0.2, 0.1, -0.9});
    auto res = quant::quantize_scales(f, s);
    CHECK(res.tokens.bits[0] == std::vector<uint8_t>{1, 0, 1, 0});
    // gamma = <f, q> / <q, q> = 0.25 + 0.10 + 0.05 + 0.45 = 0.85
    CHECK(res.tokens.gains[0] == Catch::Approx(0.85).margin(1e-15));
    for (int c = 0; c < 4; ++c) {
        const double expect = 0.85 * (res.tokens.bits[0][static_cast<size_t>(c)] ? 0.5 : -0.5);
        CHECK(res.acc.v[static_cast<size_t>(c)] == Catch::Approx(expect).margin(1e-15));
    }
}

TEST_CASE("residual error does not increase at the identity-resample scale") {
    quant::ScaleSchedule s;
    s.scales = {{1, 1}, {2, 2}, {4, 4}};
    s.latent_dim = 8;
    s.base_h = s.base_w = 4;
    int ok = 0;
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(static_cast<uint64_t>(seed));
        auto f = rand_map(s, rng);
        auto res = quant::quantize_scales(f, s, /*keep_partials=*/true);
        const double before = l2(f, res.partial_accs[1]);
        const double after = l2(f, res.partial_accs[2]);
        if (after <= before) ++ok;
    }
    CHECK(ok == 100);
}

TEST_CASE("reconstruct round-trips bit-exactly and zero gains give zero map") {
    auto sched = quant::ScaleSchedule::desk_lo();
    Rng rng(7);
    auto f = rand_map(sched, rng);
    auto res = quant::quantize_scales(f, sched);
    auto rec = quant::reconstruct<double>(res.tokens, sched);
    for (int64_t i = 0; i < rec.size(); ++i)
        CHECK(rec.v[static_cast<size_t>(i)] == res.acc.v[static_cast<size_t>(i)]);

    quant::ScaleTokens zero = res.tokens;
    for (auto& g : zero.gains) g = 0.0;
    auto zrec = quant::reconstruct<double>(zero, sched);
    for (double x : zrec.v) CHECK(x == 0.0);
}

TEST_CASE("reconstruct matches an independent summation oracle on a K=2 case") {
    quant::ScaleSchedule s;
    s.scales = {{1, 1}, {2, 2}};
    s.latent_dim = 2;
    s.base_h = s.base_w = 2;
    Rng rng(11);
    auto f = rand_map(s, rng);
    auto res = quant::quantize_scales(f, s);

    // Oracle: independent accumulation of upsample(gain * sign/sqrt(d)).
    const double unit = 1.0 / std::sqrt(2.0);
    Tensor<double> expect({2, 2, 2});
    // Scale 1: 1x1 map upsampled to 2x2 is constant per channel.
    for (int c = 0; c < 2; ++c) {
        const double q = (res.tokens.bits[0][static_cast<size_t>(c)] ? unit : -unit) * res.tokens.gains[0];
        for (int p = 0; p < 4; ++p) expect.v[static_cast<size_t>(c * 4 + p)] += q;
    }
    // Scale 2 equals base size: identity resample.
    for (int p = 0; p < 4; ++p)
        for (int c = 0; c < 2; ++c) {
            const double q = (res.tokens.bits[1][static_cast<size_t>(p * 2 + c)] ? unit : -unit) *
                             res.tokens.gains[1];
            expect.v[static_cast<size_t>(c * 4 + p)] += q;
        }
    auto rec = quant::reconstruct<double>(res.tokens, s);
    for (int64_t i = 0; i < rec.size(); ++i)
        CHECK(rec.v[static_cast<size_t>(i)] == Catch::Approx(expect.v[static_cast<size_t>(i)]).margin(1e-12));
}

TEST_CASE("quantize_scales determinism and per-position unit norms") {
    auto sched = quant::ScaleSchedule::desk_lo();
    Rng rng(19);
    auto f = rand_map(sched, rng);
    auto r1 = quant::quantize_scales(f, sched);
    auto r2 = quant::quantize_scales(f, sched);
    CHECK(r1.tokens.bits == r2.tokens.bits);
    CHECK(r1.tokens.gains == r2.tokens.gains);
    CHECK(r1.acc.v == r2.acc.v);

    const int d = sched.latent_dim;
    for (int k = 0; k < sched.num_scales(); ++k) {
        const auto& bits = r1.tokens.bits[static_cast<size_t>(k)];
        const double unit = 1.0 / std::sqrt(static_cast<double>(d));
        for (size_t pos = 0; pos < bits.size() / static_cast<size_t>(d); ++pos) {
            double norm = 0;
            for (int c = 0; c < d; ++c) {
                const double q = bits[pos * static_cast<size_t>(d) + static_cast<size_t>(c)] ? unit : -unit;
                norm += q * q;
            }
            CHECK(std::fabs(std::sqrt(norm) - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("quantize_scales rejects mismatched feature shape") {
    auto sched = quant::ScaleSchedule::desk_lo();
    Tensor<double> bad({8, 4, 4});
    CHECK_THROWS_AS(quant::quantize_scales(bad, sched), std::invalid_argument);
}

TEST_CASE("reconstruct rejects missing scale") {
    auto sched = quant::ScaleSchedule::desk_lo();
    Rng rng(3);
    auto f = rand_map(sched, rng);
    auto res = quant::quantize_scales(f, sched);
    res.tokens.bits.pop_back();
    res.tokens.gains.pop_back();
    CHECK_THROWS_AS(quant::reconstruct<double>(res.tokens, sched), std::invalid_argument);
}

TEST_CASE("schedule validation") {
    quant::ScaleSchedule s;
    s.scales = {{2, 2}, {1, 1}};
    s.latent_dim = 4;
    s.base_h = s.base_w = 1;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);  // areas must increase

    auto lo = quant::ScaleSchedule::desk_lo();
    CHECK_NOTHROW(lo.validate());
    CHECK(lo.total_positions() == 85);
    CHECK(lo.is_prefix_of(quant::ScaleSchedule::desk_hi()));
    CHECK(!quant::ScaleSchedule::desk_hi().is_prefix_of(lo));
}
