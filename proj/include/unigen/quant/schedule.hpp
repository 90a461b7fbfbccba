#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "unigen/core/common.hpp"

namespace unigen::quant {

// Ordered ladder of latent grid sizes. The last entry must equal the base
// latent size; areas must be strictly increasing.
struct ScaleSchedule {
    std::vector<std::pair<int, int>> scales;  // (h_k, w_k)
    int latent_dim = 0;                       // bits per token
    int base_h = 0, base_w = 0;

    int num_scales() const { return static_cast<int>(scales.size()); }

    int64_t positions(int k) const {
        return static_cast<int64_t>(scales[static_cast<size_t>(k)].first) *
               scales[static_cast<size_t>(k)].second;
    }

    int64_t total_positions() const {
        int64_t n = 0;
        for (int k = 0; k < num_scales(); ++k) n += positions(k);
        return n;
    }

    void validate() const {
        core::require(!scales.empty(), "schedule: no scales");
        core::require(latent_dim >= 1, "schedule: latent_dim must be >= 1");
        core::require(base_h >= 1 && base_w >= 1, "schedule: base size must be >= 1");
        int64_t prev_area = 0;
        for (const auto& [h, w] : scales) {
            core::require(h >= 1 && w >= 1, "schedule: scale sizes must be >= 1");
            const int64_t area = static_cast<int64_t>(h) * w;
            core::require(area > prev_area, "schedule: scale areas must strictly increase");
            prev_area = area;
        }
        core::require(scales.back().first == base_h && scales.back().second == base_w,
                      "schedule: final scale must equal the base latent size");
    }

    bool operator==(const ScaleSchedule& o) const = default;

    // True when `o` extends this schedule by appending finer scales while
    // keeping every existing entry.
    bool is_prefix_of(const ScaleSchedule& o) const {
        if (latent_dim != o.latent_dim) return false;
        if (scales.size() > o.scales.size()) return false;
        for (size_t i = 0; i < scales.size(); ++i)
            if (scales[i] != o.scales[i]) return false;
        return true;
    }

    static ScaleSchedule desk_lo() {
        ScaleSchedule s;
        s.scales = {{1, 1}, {2, 2}, {4, 4}, {8, 8}};
        s.latent_dim = 8;
        s.base_h = s.base_w = 8;
        return s;
    }

    static ScaleSchedule desk_hi() {
        ScaleSchedule s;
        s.scales = {{1, 1}, {2, 2}, {4, 4}, {8, 8}, {16, 16}};
        s.latent_dim = 8;
        s.base_h = s.base_w = 16;
        return s;
    }
};

}  // namespace unigen::quant
