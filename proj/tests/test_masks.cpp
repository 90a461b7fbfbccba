#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "unigen/attn/masks.hpp"
#include "unigen/core/ops_nn.hpp"

using namespace unigen;
using core::Rng;
using core::Tensor;

TEST_CASE("causal mask basics") {
    auto m1 = attn::build_causal_mask(1);
    CHECK(m1.n == 1);
    CHECK(m1.at(0, 0));

    auto m3 = attn::build_causal_mask(3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(m3.at(i, j) == (j <= i));

    // Row sums are 1..n.
    auto m8 = attn::build_causal_mask(8);
    for (int64_t i = 0; i < 8; ++i) {
        int64_t s = 0;
        for (int64_t j = 0; j < 8; ++j) s += m8.at(i, j);
        CHECK(s == i + 1);
    }
    CHECK_THROWS_AS(attn::build_causal_mask(0), std::invalid_argument);
}

TEST_CASE("block causal mask basics") {
    auto m = attn::build_block_causal_mask({1});
    CHECK(m.n == 1);
    CHECK(m.at(0, 0));

    auto m2 = attn::build_block_causal_mask({1, 4});
    CHECK(m2.n == 5);
    for (int j = 0; j < 5; ++j) CHECK(m2.at(0, j) == (j == 0));
    for (int i = 1; i < 5; ++i)
        for (int j = 0; j < 5; ++j) CHECK(m2.at(i, j));

    CHECK_THROWS_AS(attn::build_block_causal_mask({}), std::invalid_argument);
    CHECK_THROWS_AS(attn::build_block_causal_mask({2, 0}), std::invalid_argument);
}

TEST_CASE("allowed-pair count for [1,4,16] by brute-force enumeration") {
    const std::vector<int64_t> blocks = {1, 4, 16};
    auto m = attn::build_block_causal_mask(blocks);
    // Independent oracle: direct enumeration over token pairs.
    std::vector<int> block_of;
    for (size_t b = 0; b < blocks.size(); ++b)
        for (int64_t k = 0; k < blocks[b]; ++k) block_of.push_back(static_cast<int>(b));
    int64_t count = 0;
    for (size_t i = 0; i < block_of.size(); ++i)
        for (size_t j = 0; j < block_of.size(); ++j)
            if (block_of[j] <= block_of[i]) ++count;
    CHECK(count == 357);
    CHECK(m.allowed_pairs() == 357);
}

TEST_CASE("segment_blocks maps schedules onto block sizes") {
    quant::ScaleSchedule s1;
    s1.scales = {{1, 1}};
    s1.latent_dim = 4;
    s1.base_h = s1.base_w = 1;
    CHECK(attn::segment_blocks(s1) == std::vector<int64_t>{1});

    auto lo = quant::ScaleSchedule::desk_lo();
    CHECK(attn::segment_blocks(lo) == std::vector<int64_t>{1, 4, 16, 64});
    int64_t total = 0;
    for (int64_t b : attn::segment_blocks(lo)) total += b;
    CHECK(total == lo.total_positions());
}

TEST_CASE("causal equals block-causal with unit blocks up to n = 64") {
    for (int64_t n = 1; n <= 64; ++n) {
        std::vector<int64_t> ones(static_cast<size_t>(n), 1);
        CHECK(attn::build_causal_mask(n) == attn::build_block_causal_mask(ones));
    }
}

TEST_CASE("block-causal masks are reflexive and block order is a total preorder") {
    // All strictly-increasing grid-area ladders with total tokens <= 85.
    std::vector<int64_t> areas;
    for (int h = 1; h <= 9; ++h)
        for (int w = 1; w <= 9; ++w) areas.push_back(static_cast<int64_t>(h) * w);
    std::sort(areas.begin(), areas.end());
    areas.erase(std::unique(areas.begin(), areas.end()), areas.end());

    int64_t checked = 0, violations = 0;
    std::vector<int64_t> blocks;
    auto verify = [&](const std::vector<int64_t>& bs) {
        auto m = attn::build_block_causal_mask(bs);
        m.validate();  // reflexive
        std::vector<int> block_of;
        for (size_t b = 0; b < bs.size(); ++b)
            for (int64_t k = 0; k < bs[b]; ++k) block_of.push_back(static_cast<int>(b));
        // Totality over distinct blocks, and exact agreement with the
        // block-order definition (which makes the relation a total preorder).
        for (int64_t i = 0; i < m.n; ++i)
            for (int64_t j = 0; j < m.n; ++j) {
                if (block_of[static_cast<size_t>(i)] != block_of[static_cast<size_t>(j)] &&
                    !(m.at(i, j) || m.at(j, i)))
                    ++violations;
                if (m.at(i, j) != (block_of[static_cast<size_t>(j)] <= block_of[static_cast<size_t>(i)]))
                    ++violations;
            }
        ++checked;
    };
    std::function<void(size_t, int64_t)> dfs = [&](size_t next, int64_t total) {
        if (!blocks.empty()) verify(blocks);
        for (size_t a = next; a < areas.size(); ++a) {
            if (total + areas[a] > 85) break;
            blocks.push_back(areas[a]);
            dfs(a + 1, total + areas[a]);
            blocks.pop_back();
        }
    };
    dfs(0, 0);
    CHECK(violations == 0);
    CHECK(checked > 100);  // enumeration actually covered many ladders
}

TEST_CASE("attention output is invariant to keys the mask disallows") {
    const int64_t n = 12, d = 6;
    auto mask = attn::build_block_causal_mask({1, 3, 8});
    auto bounds = mask.row_bounds();
    Rng rng(31);
    Tensor<double> q({1, n, d}), k({1, n, d}), v({1, n, d});
    for (auto& x : q.v) x = rng.next_gaussian();
    for (auto& x : k.v) x = rng.next_gaussian();
    for (auto& x : v.v) x = rng.next_gaussian();

    auto run = [&](const Tensor<double>& kk, const Tensor<double>& vv) {
        core::Tape<double> t(false);
        auto vq = t.constant(q);
        auto vk = t.constant(kk);
        auto vv2 = t.constant(vv);
        auto scores = core::scale(core::matmul(vq, vk, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
        auto p = core::masked_softmax(scores, bounds);
        return core::matmul(p, vv2).val();
    };
    auto base = run(k, v);

    // Perturb rows of K/V that a given query must not see; its output row
    // must not move at all.
    for (int64_t i = 0; i < n; ++i) {
        Tensor<double> k2 = k, v2 = v;
        bool changed = false;
        for (int64_t j = 0; j < n; ++j) {
            if (mask.at(i, j)) continue;
            changed = true;
            for (int64_t c = 0; c < d; ++c) {
                k2.v[static_cast<size_t>(j * d + c)] = rng.next_gaussian() * 100.0;
                v2.v[static_cast<size_t>(j * d + c)] = rng.next_gaussian() * 100.0;
            }
        }
        if (!changed) continue;
        auto out = run(k2, v2);
        for (int64_t c = 0; c < d; ++c) {
            const double diff = std::fabs(out.v[static_cast<size_t>(i * d + c)] - base.v[static_cast<size_t>(i * d + c)]);
            CHECK(diff <= 1e-12);
        }
    }
}
