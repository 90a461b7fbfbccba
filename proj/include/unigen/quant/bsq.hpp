#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "unigen/core/ops_nn.hpp"
#include "unigen/core/tensor.hpp"
#include "unigen/quant/schedule.hpp"

namespace unigen::quant {

// Discrete image representation: one bit tensor per scale (layout pos-major,
// pos = y*w + x, then bit index) plus a nonnegative scalar gain per scale.
struct ScaleTokens {
    std::vector<std::vector<uint8_t>> bits;
    std::vector<double> gains;

    int num_scales() const { return static_cast<int>(bits.size()); }

    void validate_against(const ScaleSchedule& s) const {
        core::require(num_scales() == s.num_scales(),
                      "tokens: scale count " + std::to_string(num_scales()) +
                          " does not match schedule " + std::to_string(s.num_scales()));
        core::require(gains.size() == bits.size(), "tokens: gain count mismatch");
        for (int k = 0; k < num_scales(); ++k) {
            core::require(static_cast<int64_t>(bits[static_cast<size_t>(k)].size()) ==
                              s.positions(k) * s.latent_dim,
                          "tokens: bit tensor size mismatch at scale " + std::to_string(k));
            core::require(std::isfinite(gains[static_cast<size_t>(k)]) &&
                              gains[static_cast<size_t>(k)] >= 0.0,
                          "tokens: gain must be finite and >= 0");
            for (uint8_t b : bits[static_cast<size_t>(k)])
                core::require(b <= 1, "tokens: bits must be 0/1");
        }
    }
};

namespace detail {

// Plane-wise bilinear resize shared by the quantizer and the reconstruction
// path so both produce identical arithmetic.
template <class T>
void resize_plane(const T* src, int64_t H, int64_t W, T* dst, int64_t H2, int64_t W2) {
    const auto ty = core::detail::bilinear_taps(H, H2);
    const auto tx = core::detail::bilinear_taps(W, W2);
    for (int64_t oy = 0; oy < H2; ++oy) {
        const auto& t0 = ty[static_cast<size_t>(oy)];
        for (int64_t ox = 0; ox < W2; ++ox) {
            const auto& t1 = tx[static_cast<size_t>(ox)];
            const double v = t0.w0 * (t1.w0 * static_cast<double>(src[t0.i0 * W + t1.i0]) +
                                      t1.w1 * static_cast<double>(src[t0.i0 * W + t1.i1])) +
                             t0.w1 * (t1.w0 * static_cast<double>(src[t0.i1 * W + t1.i0]) +
                                      t1.w1 * static_cast<double>(src[t0.i1 * W + t1.i1]));
            dst[oy * W2 + ox] = static_cast<T>(v);
        }
    }
}

template <class T>
void resize_chw(const core::Tensor<T>& x, int64_t H2, int64_t W2, core::Tensor<T>& out) {
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    out = core::Tensor<T>({C, H2, W2});
    for (int64_t c = 0; c < C; ++c)
        resize_plane(x.data() + c * H * W, H, W, out.data() + c * H2 * W2, H2, W2);
}

}  // namespace detail

// Sign quantization onto the scaled hypercube: bit = [residual >= 0],
// quantized = (2*bit - 1)/sqrt(d). The result always has unit l2 norm.
template <class T>
void quantize_unit(const T* residual, int d, uint8_t* bits, T* quantized) {
    core::require(d >= 1, "quantize_unit: d must be >= 1");
    const T q = T(1) / static_cast<T>(std::sqrt(static_cast<double>(d)));
    for (int i = 0; i < d; ++i) {
        core::require(std::isfinite(static_cast<double>(residual[i])),
                      "quantize_unit: non-finite input at component " + std::to_string(i));
        const bool positive = residual[i] >= T(0);  // sign(0) = +1
        bits[i] = positive ? 1 : 0;
        quantized[i] = positive ? q : -q;
    }
}

template <class T>
std::pair<std::vector<uint8_t>, std::vector<T>> quantize_unit(const std::vector<T>& residual) {
    std::vector<uint8_t> bits(residual.size());
    std::vector<T> q(residual.size());
    quantize_unit(residual.data(), static_cast<int>(residual.size()), bits.data(), q.data());
    return {std::move(bits), std::move(q)};
}

template <class T>
struct QuantizeResult {
    ScaleTokens tokens;
    core::Tensor<T> acc;                        // final accumulated reconstruction [d,H,W]
    std::vector<core::Tensor<T>> partial_accs;  // acc after scales 1..k, same shape
};

// Residual ladder: at each scale the residual to the running reconstruction is
// downsampled, sign-quantized per position, scaled by a least-squares gain and
// upsampled back onto the base grid. Deterministic; pure function of `f`.
template <class T>
QuantizeResult<T> quantize_scales(const core::Tensor<T>& f, const ScaleSchedule& schedule,
                                  bool keep_partials = false) {
    schedule.validate();
    const int d = schedule.latent_dim;
    core::require(f.rank() == 3 && f.dim(0) == d && f.dim(1) == schedule.base_h &&
                      f.dim(2) == schedule.base_w,
                  "quantize_scales: feature map " + core::shape_str(f.shape) +
                      " does not match schedule base [" + std::to_string(d) + "," +
                      std::to_string(schedule.base_h) + "," + std::to_string(schedule.base_w) + "]");
    const int64_t H = schedule.base_h, W = schedule.base_w;

    QuantizeResult<T> out;
    out.acc = core::Tensor<T>::zeros({d, H, W});
    core::Tensor<T> diff({d, H, W}), r, up;

    for (int k = 0; k < schedule.num_scales(); ++k) {
        const auto [hk, wk] = schedule.scales[static_cast<size_t>(k)];
        for (int64_t i = 0; i < f.size(); ++i) diff.v[static_cast<size_t>(i)] = f.v[static_cast<size_t>(i)] - out.acc.v[static_cast<size_t>(i)];
        detail::resize_chw(diff, hk, wk, r);

        // Per-position sign quantization over the channel axis.
        std::vector<uint8_t> bits(static_cast<size_t>(hk) * wk * d);
        core::Tensor<T> q({d, hk, wk});
        std::vector<T> vec(static_cast<size_t>(d)), qv(static_cast<size_t>(d));
        double num = 0.0, den = 0.0;
        for (int64_t y = 0; y < hk; ++y)
            for (int64_t x = 0; x < wk; ++x) {
                for (int c = 0; c < d; ++c) vec[static_cast<size_t>(c)] = r.v[static_cast<size_t>((c * hk + y) * wk + x)];
                quantize_unit(vec.data(), d, bits.data() + (y * wk + x) * d, qv.data());
                for (int c = 0; c < d; ++c) {
                    const T qc = qv[static_cast<size_t>(c)];
                    q.v[static_cast<size_t>((c * hk + y) * wk + x)] = qc;
                    num += static_cast<double>(vec[static_cast<size_t>(c)]) * static_cast<double>(qc);
                    den += static_cast<double>(qc) * static_cast<double>(qc);
                }
            }
        const double gain = std::max(0.0, num / den);

        for (auto& e : q.v) e = static_cast<T>(static_cast<double>(e) * gain);
        detail::resize_chw(q, H, W, up);
        for (int64_t i = 0; i < out.acc.size(); ++i) out.acc.v[static_cast<size_t>(i)] += up.v[static_cast<size_t>(i)];

        out.tokens.bits.push_back(std::move(bits));
        out.tokens.gains.push_back(gain);
        if (keep_partials) out.partial_accs.push_back(out.acc);
    }
    return out;
}

// Sum of upsampled gain-scaled code maps. Matches the accumulator emitted by
// quantize_scales bit-for-bit (same helper, same order of operations).
template <class T>
core::Tensor<T> reconstruct(const ScaleTokens& tokens, const ScaleSchedule& schedule,
                            const std::vector<double>* gains_override = nullptr,
                            std::vector<core::Tensor<T>>* partials = nullptr) {
    schedule.validate();
    tokens.validate_against(schedule);
    if (gains_override)
        core::require(static_cast<int>(gains_override->size()) >= tokens.num_scales(),
                      "reconstruct: gain override too short");
    const int d = schedule.latent_dim;
    const int64_t H = schedule.base_h, W = schedule.base_w;
    core::Tensor<T> acc = core::Tensor<T>::zeros({d, H, W});
    const T unit = T(1) / static_cast<T>(std::sqrt(static_cast<double>(d)));
    core::Tensor<T> up;
    for (int k = 0; k < tokens.num_scales(); ++k) {
        const auto [hk, wk] = schedule.scales[static_cast<size_t>(k)];
        const double gain = gains_override ? (*gains_override)[static_cast<size_t>(k)]
                                           : tokens.gains[static_cast<size_t>(k)];
        core::Tensor<T> q({d, hk, wk});
        const auto& bits = tokens.bits[static_cast<size_t>(k)];
        for (int64_t y = 0; y < hk; ++y)
            for (int64_t x = 0; x < wk; ++x)
                for (int c = 0; c < d; ++c) {
                    const T base = bits[static_cast<size_t>((y * wk + x) * d + c)] ? unit : -unit;
                    q.v[static_cast<size_t>((c * hk + y) * wk + x)] =
                        static_cast<T>(static_cast<double>(base) * gain);
                }
        detail::resize_chw(q, H, W, up);
        for (int64_t i = 0; i < acc.size(); ++i) acc.v[static_cast<size_t>(i)] += up.v[static_cast<size_t>(i)];
        if (partials) partials->push_back(acc);
    }
    return acc;
}

}  // namespace unigen::quant
