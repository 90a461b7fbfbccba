#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "unigen/core/common.hpp"
#include "unigen/quant/schedule.hpp"

namespace unigen::attn {

// Boolean attention mask; allow[i][j] means query i may attend key j.
struct AttentionMask {
    int64_t n = 0;
    std::vector<uint8_t> allow;  // n*n, row-major

    bool at(int64_t i, int64_t j) const { return allow[static_cast<size_t>(i * n + j)] != 0; }

    int64_t allowed_pairs() const {
        int64_t c = 0;
        for (uint8_t a : allow) c += a;
        return c;
    }

    void validate() const {
        for (int64_t i = 0; i < n; ++i) {
            core::require(at(i, i), "mask: query " + std::to_string(i) + " cannot attend itself");
        }
    }

    bool operator==(const AttentionMask& o) const = default;

    // Each row of our masks allows exactly the key prefix [0, bound_i); this
    // extracts those bounds for the fast attention path.
    std::shared_ptr<const std::vector<int32_t>> row_bounds() const {
        auto bounds = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            int64_t b = 0;
            while (b < n && at(i, b)) ++b;
            for (int64_t j = b; j < n; ++j)
                core::require(!at(i, j), "mask: row " + std::to_string(i) + " is not a prefix");
            core::require(b >= 1, "mask: empty row " + std::to_string(i));
            (*bounds)[static_cast<size_t>(i)] = static_cast<int32_t>(b);
        }
        return bounds;
    }
};

// Plain causal mask: allow[i][j] = (j <= i).
inline AttentionMask build_causal_mask(int64_t n) {
    core::require(n >= 1, "build_causal_mask: n must be >= 1");
    AttentionMask m;
    m.n = n;
    m.allow.assign(static_cast<size_t>(n * n), 0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j <= i; ++j) m.allow[static_cast<size_t>(i * n + j)] = 1;
    return m;
}

// Full attention within a block, causal across blocks:
// allow[i][j] = (block(j) <= block(i)).
inline AttentionMask build_block_causal_mask(const std::vector<int64_t>& block_sizes) {
    core::require(!block_sizes.empty(), "build_block_causal_mask: empty block list");
    int64_t n = 0;
    for (int64_t b : block_sizes) {
        core::require(b >= 1, "build_block_causal_mask: block size must be >= 1");
        n += b;
    }
    std::vector<int32_t> block_of(static_cast<size_t>(n));
    {
        int64_t pos = 0;
        for (size_t b = 0; b < block_sizes.size(); ++b)
            for (int64_t k = 0; k < block_sizes[b]; ++k) block_of[static_cast<size_t>(pos++)] = static_cast<int32_t>(b);
    }
    AttentionMask m;
    m.n = n;
    m.allow.assign(static_cast<size_t>(n * n), 0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (block_of[static_cast<size_t>(j)] <= block_of[static_cast<size_t>(i)])
                m.allow[static_cast<size_t>(i * n + j)] = 1;
    return m;
}

// Token count of each scale; the block layout of the visual decoder.
inline std::vector<int64_t> segment_blocks(const quant::ScaleSchedule& schedule) {
    schedule.validate();
    std::vector<int64_t> blocks;
    blocks.reserve(static_cast<size_t>(schedule.num_scales()));
    for (int k = 0; k < schedule.num_scales(); ++k) blocks.push_back(schedule.positions(k));
    return blocks;
}

}  // namespace unigen::attn
