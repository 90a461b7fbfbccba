#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "unigen/core/ops.hpp"

namespace unigen::core {

// ---- softmax family -----------------------------------------------------------

// Row-wise softmax where row i may only see the key prefix [0, bounds[i]).
// Disallowed entries get probability exactly zero, so the output is invariant
// to their scores. bounds has length Tq and applies to every leading batch.
template <class T>
Var<T> masked_softmax(const Var<T>& a, std::shared_ptr<const std::vector<int32_t>> bounds) {
    const Tensor<T>& x = a.val();
    require(x.rank() >= 2, "masked_softmax: rank < 2");
    const int64_t Tk = x.dim(-1), Tq = x.dim(-2);
    require(static_cast<int64_t>(bounds->size()) == Tq, "masked_softmax: bounds length mismatch");
    for (int32_t b : *bounds)
        require(b >= 1 && b <= Tk, "masked_softmax: bound out of range");
    const int64_t batch = x.size() / (Tq * Tk);
    Tensor<T> y(x.shape);
    const auto* bd = bounds.get();
    parallel_for(batch, [&](int64_t l) {
        for (int64_t i = 0; i < Tq; ++i) {
            const T* row = x.data() + (l * Tq + i) * Tk;
            T* out = y.data() + (l * Tq + i) * Tk;
            const int64_t n = (*bd)[static_cast<size_t>(i)];
            T mx = row[0];
            for (int64_t j = 1; j < n; ++j) mx = row[j] > mx ? row[j] : mx;
            T denom = T(0);
            for (int64_t j = 0; j < n; ++j) {
                out[j] = std::exp(row[j] - mx);
                denom += out[j];
            }
            const T inv = T(1) / denom;
            for (int64_t j = 0; j < n; ++j) out[j] *= inv;
            for (int64_t j = n; j < Tk; ++j) out[j] = T(0);
        }
    });
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, bounds, Tq, Tk, batch](Tape<T>& t, int32_t self) {
        Tensor<T>* ga = t.grad_accum(aid);
        if (!ga) return;
        const Tensor<T>& p = t.value(self);
        const Tensor<T>& gy = t.grad(self);
        parallel_for(batch, [&](int64_t l) {
            for (int64_t i = 0; i < Tq; ++i) {
                const int64_t off = (l * Tq + i) * Tk;
                const int64_t n = (*bounds)[static_cast<size_t>(i)];
                const T* pr = p.data() + off;
                const T* gr = gy.data() + off;
                T dot = T(0);
                for (int64_t j = 0; j < n; ++j) dot += pr[j] * gr[j];
                T* out = ga->data() + off;
                for (int64_t j = 0; j < n; ++j) out[j] += pr[j] * (gr[j] - dot);
            }
        });
    });
}

// Row-wise log-softmax over the last axis.
template <class T>
Var<T> log_softmax(const Var<T>& a) {
    const Tensor<T>& x = a.val();
    require(x.rank() >= 1, "log_softmax: rank < 1");
    const int64_t V = x.dim(-1);
    const int64_t rows = x.size() / V;
    Tensor<T> y(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = x.data() + r * V;
        T* out = y.data() + r * V;
        T mx = row[0];
        for (int64_t j = 1; j < V; ++j) mx = row[j] > mx ? row[j] : mx;
        T denom = T(0);
        for (int64_t j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
        const T lse = mx + std::log(denom);
        for (int64_t j = 0; j < V; ++j) out[j] = row[j] - lse;
    }
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, V, rows](Tape<T>& t, int32_t self) {
        Tensor<T>* ga = t.grad_accum(aid);
        if (!ga) return;
        const Tensor<T>& lsm = t.value(self);
        const Tensor<T>& gy = t.grad(self);
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t off = r * V;
            T gsum = T(0);
            for (int64_t j = 0; j < V; ++j) gsum += gy.v[static_cast<size_t>(off + j)];
            for (int64_t j = 0; j < V; ++j)
                ga->v[static_cast<size_t>(off + j)] +=
                    gy.v[static_cast<size_t>(off + j)] -
                    std::exp(lsm.v[static_cast<size_t>(off + j)]) * gsum;
        }
    });
}

// ---- layer norm -----------------------------------------------------------------

template <class T>
Var<T> layer_norm(const Var<T>& a, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const Tensor<T>& x = a.val();
    const Tensor<T>&g = gamma.val(), &b = beta.val();
    const int64_t D = x.dim(-1);
    require(g.rank() == 1 && g.dim(0) == D && b.rank() == 1 && b.dim(0) == D,
            "layer_norm: parameter shape mismatch");
    const int64_t rows = x.size() / D;
    Tensor<T> y(x.shape);
    constexpr int64_t kBlock = 256;
    const int64_t n_blocks = (rows + kBlock - 1) / kBlock;
    parallel_for(n_blocks, [&](int64_t blk) {
        const int64_t r1 = std::min(rows, (blk + 1) * kBlock);
        for (int64_t r = blk * kBlock; r < r1; ++r) {
            const T* row = x.data() + r * D;
            T* out = y.data() + r * D;
            T mean = T(0);
            for (int64_t j = 0; j < D; ++j) mean += row[j];
            mean /= static_cast<T>(D);
            T var = T(0);
            for (int64_t j = 0; j < D; ++j) {
                const T c = row[j] - mean;
                var += c * c;
            }
            var /= static_cast<T>(D);
            const T rstd = T(1) / std::sqrt(var + eps);
            for (int64_t j = 0; j < D; ++j)
                out[j] = (row[j] - mean) * rstd * g.v[static_cast<size_t>(j)] + b.v[static_cast<size_t>(j)];
        }
    });
    const int32_t aid = a.id, gid = gamma.id, bid = beta.id;
    return a.tape->make(std::move(y), {aid, gid, bid}, [aid, gid, bid, D, rows, eps](Tape<T>& t, int32_t self) {
        const Tensor<T>& x = t.value(aid);
        const Tensor<T>& g = t.value(gid);
        const Tensor<T>& gy = t.grad(self);
        Tensor<T>* ga = t.grad_accum(aid);
        Tensor<T>* gg = t.grad_accum(gid);
        Tensor<T>* gb = t.grad_accum(bid);
        constexpr int64_t kBlock = 256;
        const int64_t n_blocks = (rows + kBlock - 1) / kBlock;
        // Per-block partials for the parameter grads keep the final reduction
        // order independent of thread scheduling.
        std::vector<T> part_g, part_b;
        if (gg) part_g.assign(static_cast<size_t>(n_blocks * D), T(0));
        if (gb) part_b.assign(static_cast<size_t>(n_blocks * D), T(0));
        parallel_for(n_blocks, [&](int64_t blk) {
            const int64_t r1 = std::min(rows, (blk + 1) * kBlock);
            T* pg = gg ? part_g.data() + blk * D : nullptr;
            T* pb = gb ? part_b.data() + blk * D : nullptr;
            std::vector<T> xhat(static_cast<size_t>(D));
            for (int64_t r = blk * kBlock; r < r1; ++r) {
                const T* row = x.data() + r * D;
                const T* gr = gy.data() + r * D;
                T mean = T(0);
                for (int64_t j = 0; j < D; ++j) mean += row[j];
                mean /= static_cast<T>(D);
                T var = T(0);
                for (int64_t j = 0; j < D; ++j) {
                    const T c = row[j] - mean;
                    var += c * c;
                }
                var /= static_cast<T>(D);
                const T rstd = T(1) / std::sqrt(var + eps);
                T m1 = T(0), m2 = T(0);
                for (int64_t j = 0; j < D; ++j) {
                    xhat[static_cast<size_t>(j)] = (row[j] - mean) * rstd;
                    const T dxh = gr[j] * g.v[static_cast<size_t>(j)];
                    m1 += dxh;
                    m2 += dxh * xhat[static_cast<size_t>(j)];
                }
                m1 /= static_cast<T>(D);
                m2 /= static_cast<T>(D);
                if (ga) {
                    T* out = ga->data() + r * D;
                    for (int64_t j = 0; j < D; ++j) {
                        const T dxh = gr[j] * g.v[static_cast<size_t>(j)];
                        out[j] += (dxh - m1 - xhat[static_cast<size_t>(j)] * m2) * rstd;
                    }
                }
                for (int64_t j = 0; j < D; ++j) {
                    if (pg) pg[j] += gr[j] * xhat[static_cast<size_t>(j)];
                    if (pb) pb[j] += gr[j];
                }
            }
        });
        for (int64_t blk = 0; blk < n_blocks; ++blk)
            for (int64_t j = 0; j < D; ++j) {
                if (gg) gg->v[static_cast<size_t>(j)] += part_g[static_cast<size_t>(blk * D + j)];
                if (gb) gb->v[static_cast<size_t>(j)] += part_b[static_cast<size_t>(blk * D + j)];
            }
    });
}

// ---- 2d convolution ---------------------------------------------------------------

namespace detail {

// Column matrix stored [C*kh*kw, OH*OW] so the conv becomes W * cols.
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t OH, int64_t OW, T* cols) {
    int64_t row = 0;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx, ++row) {
                T* dst = cols + row * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    const int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) {
                        for (int64_t ox = 0; ox < OW; ++ox) dst[oy * OW + ox] = T(0);
                        continue;
                    }
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        const int64_t ix = ox * stride + kx - pad;
                        dst[oy * OW + ox] = (ix >= 0 && ix < W) ? x[(c * H + iy) * W + ix] : T(0);
                    }
                }
            }
}

template <class T>
void col2im_accum(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                  int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* dx) {
    int64_t row = 0;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx, ++row) {
                const T* src = cols + row * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    const int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        const int64_t ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < W) dx[(c * H + iy) * W + ix] += src[oy * OW + ox];
                    }
                }
            }
}

}  // namespace detail

// x [B,C,H,W], w [O,C,kh,kw], bias [O] -> [B,O,OH,OW].
template <class T>
Var<T> conv2d(const Var<T>& a, const Var<T>& weight, const Var<T>& bias, int64_t stride,
              int64_t pad) {
    const Tensor<T>& x = a.val();
    const Tensor<T>& w = weight.val();
    const Tensor<T>& bi = bias.val();
    require(x.rank() == 4 && w.rank() == 4, "conv2d: expect [B,C,H,W] and [O,C,kh,kw]");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    require(w.dim(1) == C, "conv2d: channel mismatch " + shape_str(x.shape) + " vs " + shape_str(w.shape));
    require(bi.rank() == 1 && bi.dim(0) == O, "conv2d: bias shape mismatch");
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int64_t OH = (H + 2 * pad - kh) / stride + 1;
    const int64_t OW = (W + 2 * pad - kw) / stride + 1;
    require(OH >= 1 && OW >= 1, "conv2d: kernel larger than padded input");
    const int64_t CKK = C * kh * kw, P = OH * OW;

    auto cols = std::make_shared<Tensor<T>>(Shape{B, CKK, P});
    Tensor<T> y({B, O, OH, OW});
    parallel_for(B, [&](int64_t b) {
        T* cb = cols->data() + b * CKK * P;
        detail::im2col(x.data() + b * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, cb);
        T* yb = y.data() + b * O * P;
        gemm_serial<T>(w.data(), cb, yb, O, P, CKK, false, false, false);
        for (int64_t o = 0; o < O; ++o) {
            const T bv = bi.v[static_cast<size_t>(o)];
            for (int64_t p = 0; p < P; ++p) yb[o * P + p] += bv;
        }
    });
    const int32_t aid = a.id, wid = weight.id, bid = bias.id;
    return a.tape->make(
        std::move(y), {aid, wid, bid},
        [aid, wid, bid, cols, B, C, H, W, O, kh, kw, stride, pad, OH, OW, CKK, P](Tape<T>& t,
                                                                                  int32_t self) {
            const Tensor<T>& gy = t.grad(self);
            const Tensor<T>& w = t.value(wid);
            Tensor<T>* ga = t.grad_accum(aid);
            Tensor<T>* gw = t.grad_accum(wid);
            Tensor<T>* gb = t.grad_accum(bid);
            if (ga) {
                Tensor<T> dcols({B, CKK, P});
                parallel_for(B, [&](int64_t b) {
                    gemm_serial<T>(w.data(), gy.data() + b * O * P, dcols.data() + b * CKK * P,
                                   CKK, P, O, true, false, false);
                    detail::col2im_accum(dcols.data() + b * CKK * P, C, H, W, kh, kw, stride, pad,
                                         OH, OW, ga->data() + b * C * H * W);
                });
            }
            if (gw) {
                for (int64_t b = 0; b < B; ++b)
                    gemm<T>(gy.data() + b * O * P, cols->data() + b * CKK * P, gw->data(), O, CKK,
                            P, false, true, true);
            }
            if (gb) {
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t o = 0; o < O; ++o) {
                        const T* src = gy.data() + (b * O + o) * P;
                        T acc = T(0);
                        for (int64_t p = 0; p < P; ++p) acc += src[p];
                        gb->v[static_cast<size_t>(o)] += acc;
                    }
            }
        });
}

// ---- resampling -------------------------------------------------------------------

namespace detail {

struct LinTap {
    int64_t i0, i1;
    double w0, w1;
};

// Half-pixel-center source coordinates (the align_corners=false convention).
inline std::vector<LinTap> bilinear_taps(int64_t in, int64_t out) {
    std::vector<LinTap> taps(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        const double limit = static_cast<double>(in - 1);
        if (src > limit) src = limit;
        const int64_t i0 = static_cast<int64_t>(src);
        const int64_t i1 = i0 + 1 < in ? i0 + 1 : i0;
        const double f = src - static_cast<double>(i0);
        taps[static_cast<size_t>(o)] = {i0, i1, 1.0 - f, f};
    }
    return taps;
}

}  // namespace detail

// Bilinear resize of [B,C,H,W] to [B,C,H2,W2].
template <class T>
Var<T> resize_bilinear(const Var<T>& a, int64_t H2, int64_t W2) {
    const Tensor<T>& x = a.val();
    require(x.rank() == 4, "resize_bilinear: expect [B,C,H,W]");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(H2 >= 1 && W2 >= 1, "resize_bilinear: bad target size");
    const auto ty = detail::bilinear_taps(H, H2), tx = detail::bilinear_taps(W, W2);
    Tensor<T> y({B, C, H2, W2});
    const int64_t planes = B * C;
    parallel_for(planes, [&](int64_t pl) {
        const T* src = x.data() + pl * H * W;
        T* dst = y.data() + pl * H2 * W2;
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
    });
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, ty, tx, B, C, H, W, H2, W2](Tape<T>& t, int32_t self) {
        Tensor<T>* ga = t.grad_accum(aid);
        if (!ga) return;
        const Tensor<T>& gy = t.grad(self);
        const int64_t planes = B * C;
        parallel_for(planes, [&](int64_t pl) {
            const T* src = gy.data() + pl * H2 * W2;
            T* dst = ga->data() + pl * H * W;
            for (int64_t oy = 0; oy < H2; ++oy) {
                const auto& t0 = ty[static_cast<size_t>(oy)];
                for (int64_t ox = 0; ox < W2; ++ox) {
                    const auto& t1 = tx[static_cast<size_t>(ox)];
                    const T g = src[oy * W2 + ox];
                    dst[t0.i0 * W + t1.i0] += static_cast<T>(t0.w0 * t1.w0) * g;
                    dst[t0.i0 * W + t1.i1] += static_cast<T>(t0.w0 * t1.w1) * g;
                    dst[t0.i1 * W + t1.i0] += static_cast<T>(t0.w1 * t1.w0) * g;
                    dst[t0.i1 * W + t1.i1] += static_cast<T>(t0.w1 * t1.w1) * g;
                }
            }
        });
    });
}

// Nearest-neighbour resize of [B,C,H,W] to [B,C,H2,W2].
template <class T>
Var<T> resize_nearest(const Var<T>& a, int64_t H2, int64_t W2) {
    const Tensor<T>& x = a.val();
    require(x.rank() == 4, "resize_nearest: expect [B,C,H,W]");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto index_map = [](int64_t in, int64_t out) {
        std::vector<int64_t> m(static_cast<size_t>(out));
        for (int64_t o = 0; o < out; ++o) {
            int64_t i = static_cast<int64_t>((static_cast<double>(o) + 0.5) *
                                             static_cast<double>(in) / static_cast<double>(out));
            m[static_cast<size_t>(o)] = i < in ? i : in - 1;
        }
        return m;
    };
    const auto my = index_map(H, H2), mx = index_map(W, W2);
    Tensor<T> y({B, C, H2, W2});
    const int64_t planes = B * C;
    for (int64_t pl = 0; pl < planes; ++pl) {
        const T* src = x.data() + pl * H * W;
        T* dst = y.data() + pl * H2 * W2;
        for (int64_t oy = 0; oy < H2; ++oy)
            for (int64_t ox = 0; ox < W2; ++ox)
                dst[oy * W2 + ox] = src[my[static_cast<size_t>(oy)] * W + mx[static_cast<size_t>(ox)]];
    }
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, my, mx, B, C, H, W, H2, W2](Tape<T>& t, int32_t self) {
        Tensor<T>* ga = t.grad_accum(aid);
        if (!ga) return;
        const Tensor<T>& gy = t.grad(self);
        const int64_t planes = B * C;
        for (int64_t pl = 0; pl < planes; ++pl) {
            const T* src = gy.data() + pl * H2 * W2;
            T* dst = ga->data() + pl * H * W;
            for (int64_t oy = 0; oy < H2; ++oy)
                for (int64_t ox = 0; ox < W2; ++ox)
                    dst[my[static_cast<size_t>(oy)] * W + mx[static_cast<size_t>(ox)]] += src[oy * W2 + ox];
        }
    });
}

// Average pooling onto an exact (h2, w2) grid; extents must divide evenly.
template <class T>
Var<T> avg_pool_to(const Var<T>& a, int64_t h2, int64_t w2) {
    const Tensor<T>& x = a.val();
    require(x.rank() == 4, "avg_pool_to: expect [B,C,H,W]");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(h2 >= 1 && w2 >= 1 && H % h2 == 0 && W % w2 == 0,
            "avg_pool_to: target does not divide " + shape_str(x.shape));
    const int64_t sy = H / h2, sx = W / w2;
    const T inv = T(1) / static_cast<T>(sy * sx);
    Tensor<T> y({B, C, h2, w2});
    const int64_t planes = B * C;
    for (int64_t pl = 0; pl < planes; ++pl) {
        const T* src = x.data() + pl * H * W;
        T* dst = y.data() + pl * h2 * w2;
        for (int64_t oy = 0; oy < h2; ++oy)
            for (int64_t ox = 0; ox < w2; ++ox) {
                T acc = T(0);
                for (int64_t iy = oy * sy; iy < (oy + 1) * sy; ++iy)
                    for (int64_t ix = ox * sx; ix < (ox + 1) * sx; ++ix) acc += src[iy * W + ix];
                dst[oy * w2 + ox] = acc * inv;
            }
    }
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, B, C, H, W, h2, w2, sy, sx, inv](Tape<T>& t, int32_t self) {
        Tensor<T>* ga = t.grad_accum(aid);
        if (!ga) return;
        const Tensor<T>& gy = t.grad(self);
        const int64_t planes = B * C;
        for (int64_t pl = 0; pl < planes; ++pl) {
            const T* src = gy.data() + pl * h2 * w2;
            T* dst = ga->data() + pl * H * W;
            for (int64_t oy = 0; oy < h2; ++oy)
                for (int64_t ox = 0; ox < w2; ++ox) {
                    const T g = src[oy * w2 + ox] * inv;
                    for (int64_t iy = oy * sy; iy < (oy + 1) * sy; ++iy)
                        for (int64_t ix = ox * sx; ix < (ox + 1) * sx; ++ix) dst[iy * W + ix] += g;
                }
        }
    });
}

}  // namespace unigen::core
