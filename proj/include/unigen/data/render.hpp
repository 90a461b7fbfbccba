#pragma once

#include <cmath>
#include <cstdint>

#include "unigen/core/tensor.hpp"
#include "unigen/data/scene.hpp"

namespace unigen::data {

using Image = core::Tensor<float>;  // [3,H,W], values in [0,1]

namespace detail {

inline bool point_in_shape(ShapeKind kind, double x, double y, double cx, double cy, double h) {
    const double dx = x - cx, dy = y - cy;
    switch (kind) {
        case ShapeKind::circle:
            return dx * dx + dy * dy <= h * h;
        case ShapeKind::square:
            return std::fabs(dx) <= h && std::fabs(dy) <= h;
        default: {
            // Upward triangle with apex (cx, cy-h) and base y = cy+h.
            if (dy < -h || dy > h) return false;
            const double halfwidth = (dy + h) * 0.5;
            return std::fabs(dx) <= halfwidth;
        }
    }
}

// Fraction of a pixel covered by the shape, 4x4 supersampling.
inline double pixel_coverage(ShapeKind kind, int64_t px, int64_t py, double cx, double cy,
                             double h) {
    int hits = 0;
    for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
            const double x = static_cast<double>(px) + (static_cast<double>(sx) + 0.5) / 4.0;
            const double y = static_cast<double>(py) + (static_cast<double>(sy) + 0.5) / 4.0;
            if (point_in_shape(kind, x, y, cx, cy, h)) ++hits;
        }
    return static_cast<double>(hits) / 16.0;
}

}  // namespace detail

// Deterministic raster of a scene: background fill plus one anti-aliased
// shape at its cell center, spanning 60% of the cell. The seed parameter is
// part of the record identity; the raster itself is a pure function of the
// spec (augmentations are applied by callers that want them).
inline Image render(const SceneSpec& spec, uint64_t /*seed*/ = 0) {
    spec.validate();
    const int64_t res = spec.resolution;
    const double cell = static_cast<double>(res) / 3.0;
    const double cx = (static_cast<double>(spec.col()) + 0.5) * cell;
    const double cy = (static_cast<double>(spec.row()) + 0.5) * cell;
    const double h = 0.3 * cell;  // 60% of the cell across

    const auto bg = background_rgb(spec.background);
    const auto fg = color_rgb(spec.color);
    Image img({3, res, res});
    for (int64_t y = 0; y < res; ++y)
        for (int64_t x = 0; x < res; ++x) {
            const double cov = detail::pixel_coverage(spec.shape, x, y, cx, cy, h);
            for (int c = 0; c < 3; ++c)
                img.v[static_cast<size_t>((c * res + y) * res + x)] =
                    static_cast<float>(bg[static_cast<size_t>(c)] +
                                       cov * (fg[static_cast<size_t>(c)] - bg[static_cast<size_t>(c)]));
        }
    return img;
}

// Binary coverage mask of a shape centered at (cx, cy); used by the oracle's
// template matching. Same geometry rules as render().
inline std::vector<float> shape_mask(ShapeKind kind, int64_t res, double cx, double cy, double h) {
    std::vector<float> mask(static_cast<size_t>(res * res));
    for (int64_t y = 0; y < res; ++y)
        for (int64_t x = 0; x < res; ++x)
            mask[static_cast<size_t>(y * res + x)] =
                static_cast<float>(detail::pixel_coverage(kind, x, y, cx, cy, h));
    return mask;
}

inline Image add_gaussian_noise(const Image& img, double sigma, core::Rng& rng) {
    Image out = img;
    for (auto& v : out.v) {
        double x = static_cast<double>(v) + sigma * rng.next_gaussian();
        v = static_cast<float>(x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x));
    }
    return out;
}

inline double mean_pixel(const Image& img) {
    double acc = 0;
    for (float v : img.v) acc += v;
    return acc / static_cast<double>(img.size());
}

}  // namespace unigen::data
