#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "unigen/core/gemm.hpp"
#include "unigen/core/tape.hpp"

namespace unigen::core {

namespace detail {

template <class T, class Fwd, class Bwd>
Var<T> unary_op(const Var<T>& a, const char* /*name*/, Fwd fwd, Bwd dfdx) {
    const Tensor<T>& x = a.val();
    Tensor<T> y;
    y.shape = x.shape;
    y.v.resize(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) y.v[i] = fwd(x.v[i]);
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, dfdx](Tape<T>& t, int32_t self) {
        Tensor<T>* ga = t.grad_accum(aid);
        if (!ga) return;
        const Tensor<T>& x = t.value(aid);
        const Tensor<T>& y = t.value(self);
        const Tensor<T>& gy = t.grad(self);
        for (size_t i = 0; i < x.v.size(); ++i) ga->v[i] += dfdx(x.v[i], y.v[i]) * gy.v[i];
    });
}

}  // namespace detail

// ---- elementwise arithmetic ------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val().shape, b.val().shape, "add");
    const Tensor<T>&xa = a.val(), &xb = b.val();
    Tensor<T> y;
    y.shape = xa.shape;
    y.v.resize(xa.v.size());
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] = xa.v[i] + xb.v[i];
    const int32_t aid = a.id, bid = b.id;
    return a.tape->make(std::move(y), {aid, bid}, [aid, bid](Tape<T>& t, int32_t self) {
        const Tensor<T>& gy = t.grad(self);
        if (Tensor<T>* ga = t.grad_accum(aid))
            for (size_t i = 0; i < gy.v.size(); ++i) ga->v[i] += gy.v[i];
        if (Tensor<T>* gb = t.grad_accum(bid))
            for (size_t i = 0; i < gy.v.size(); ++i) gb->v[i] += gy.v[i];
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val().shape, b.val().shape, "sub");
    const Tensor<T>&xa = a.val(), &xb = b.val();
    Tensor<T> y;
    y.shape = xa.shape;
    y.v.resize(xa.v.size());
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] = xa.v[i] - xb.v[i];
    const int32_t aid = a.id, bid = b.id;
    return a.tape->make(std::move(y), {aid, bid}, [aid, bid](Tape<T>& t, int32_t self) {
        const Tensor<T>& gy = t.grad(self);
        if (Tensor<T>* ga = t.grad_accum(aid))
            for (size_t i = 0; i < gy.v.size(); ++i) ga->v[i] += gy.v[i];
        if (Tensor<T>* gb = t.grad_accum(bid))
            for (size_t i = 0; i < gy.v.size(); ++i) gb->v[i] -= gy.v[i];
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val().shape, b.val().shape, "mul");
    const Tensor<T>&xa = a.val(), &xb = b.val();
    Tensor<T> y;
    y.shape = xa.shape;
    y.v.resize(xa.v.size());
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] = xa.v[i] * xb.v[i];
    const int32_t aid = a.id, bid = b.id;
    return a.tape->make(std::move(y), {aid, bid}, [aid, bid](Tape<T>& t, int32_t self) {
        const Tensor<T>& gy = t.grad(self);
        const Tensor<T>&xa = t.value(aid), &xb = t.value(bid);
        if (Tensor<T>* ga = t.grad_accum(aid))
            for (size_t i = 0; i < gy.v.size(); ++i) ga->v[i] += gy.v[i] * xb.v[i];
        if (Tensor<T>* gb = t.grad_accum(bid))
            for (size_t i = 0; i < gy.v.size(); ++i) gb->v[i] += gy.v[i] * xa.v[i];
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
    const Tensor<T>& x = a.val();
    Tensor<T> y;
    y.shape = x.shape;
    y.v.resize(x.v.size());
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] = x.v[i] * c;
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, c](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            const Tensor<T>& gy = t.grad(self);
            for (size_t i = 0; i < gy.v.size(); ++i) ga->v[i] += gy.v[i] * c;
        }
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
    const Tensor<T>& x = a.val();
    Tensor<T> y;
    y.shape = x.shape;
    y.v.resize(x.v.size());
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] = x.v[i] + c;
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            const Tensor<T>& gy = t.grad(self);
            for (size_t i = 0; i < gy.v.size(); ++i) ga->v[i] += gy.v[i];
        }
    });
}

template <class T>
Var<T> neg(const Var<T>& a) {
    return scale(a, T(-1));
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
    return add(a, b);
}
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
    return sub(a, b);
}
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
    return mul(a, b);
}

// Copies the value onto the tape with no gradient path (detach).
template <class T>
Var<T> stopgrad(const Var<T>& a) {
    return a.tape->constant(a.val());
}

// ---- elementwise nonlinearities ---------------------------------------------

template <class T>
Var<T> exp(const Var<T>& a) {
    return detail::unary_op(
        a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
    return detail::unary_op(
        a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
inline T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

// Numerically stable log(1 + e^x).
template <class T>
inline T softplus_scalar(T x) {
    T m = x > T(0) ? x : T(0);
    return m + std::log1p(std::exp(-std::fabs(x)));
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
    return detail::unary_op(
        a, "sigmoid", [](T x) { return sigmoid_scalar(x); },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
    return detail::unary_op(
        a, "softplus", [](T x) { return softplus_scalar(x); },
        [](T x, T) { return sigmoid_scalar(x); });
}

template <class T>
Var<T> silu(const Var<T>& a) {
    return detail::unary_op(
        a, "silu", [](T x) { return x * sigmoid_scalar(x); },
        [](T x, T) {
            T s = sigmoid_scalar(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

// ---- reductions --------------------------------------------------------------

template <class T>
Var<T> sum_all(const Var<T>& a) {
    const Tensor<T>& x = a.val();
    T acc = T(0);
    for (const T& e : x.v) acc += e;
    const int32_t aid = a.id;
    return a.tape->make(Tensor<T>::scalar(acc), {aid}, [aid](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            const T g = t.grad(self).v[0];
            for (auto& e : ga->v) e += g;
        }
    });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
    const int64_t n = a.val().size();
    require(n > 0, "mean_all: empty tensor");
    return scale(sum_all(a), T(1) / static_cast<T>(n));
}

// Sums everything but the leading axis: [B,...] -> [B].
template <class T>
Var<T> sum_per_example(const Var<T>& a) {
    const Tensor<T>& x = a.val();
    require(x.rank() >= 1, "sum_per_example: rank < 1");
    const int64_t B = x.dim(0);
    const int64_t inner = B > 0 ? x.size() / B : 0;
    Tensor<T> y({B});
    for (int64_t b = 0; b < B; ++b) {
        T acc = T(0);
        const T* src = x.data() + b * inner;
        for (int64_t i = 0; i < inner; ++i) acc += src[i];
        y.v[static_cast<size_t>(b)] = acc;
    }
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, B, inner](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            const Tensor<T>& gy = t.grad(self);
            for (int64_t b = 0; b < B; ++b) {
                const T g = gy.v[static_cast<size_t>(b)];
                T* dst = ga->data() + b * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += g;
            }
        }
    });
}

// ---- shape manipulation -------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    const Tensor<T>& x = a.val();
    require(numel(shape) == x.size(),
            "reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(shape));
    Tensor<T> y;
    y.shape = std::move(shape);
    y.v = x.v;
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            const Tensor<T>& gy = t.grad(self);
            for (size_t i = 0; i < gy.v.size(); ++i) ga->v[i] += gy.v[i];
        }
    });
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

template <class T>
void permute_copy(const Tensor<T>& x, const std::vector<int>& perm, Tensor<T>& out) {
    const int r = x.rank();
    Shape oshape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) oshape[static_cast<size_t>(i)] = x.shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    out.shape = oshape;
    out.v.resize(x.v.size());
    const auto xstr = row_major_strides(x.shape);
    std::vector<int64_t> src_stride(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) src_stride[static_cast<size_t>(i)] = xstr[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    const int64_t n = x.size();
    int64_t src = 0;
    for (int64_t o = 0; o < n; ++o) {
        out.v[static_cast<size_t>(o)] = x.v[static_cast<size_t>(src)];
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            src += src_stride[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < oshape[static_cast<size_t>(d)]) break;
            src -= src_stride[static_cast<size_t>(d)] * oshape[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

}  // namespace detail

template <class T>
Var<T> permute(const Var<T>& a, std::vector<int> perm) {
    const Tensor<T>& x = a.val();
    require(static_cast<int>(perm.size()) == x.rank(), "permute: rank mismatch");
    Tensor<T> y;
    detail::permute_copy(x, perm, y);
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, inv](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            Tensor<T> gx;
            detail::permute_copy(t.grad(self), inv, gx);
            for (size_t i = 0; i < gx.v.size(); ++i) ga->v[i] += gx.v[i];
        }
    });
}

// Rows [start, start+len) along axis -2.
template <class T>
Var<T> slice_rows(const Var<T>& a, int64_t start, int64_t len) {
    const Tensor<T>& x = a.val();
    require(x.rank() >= 2, "slice_rows: rank < 2");
    const int64_t rows = x.dim(-2), cols = x.dim(-1);
    require(start >= 0 && len >= 1 && start + len <= rows, "slice_rows: range out of bounds");
    const int64_t outer = x.size() / (rows * cols);
    Shape oshape = x.shape;
    oshape[oshape.size() - 2] = len;
    Tensor<T> y(oshape);
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(x.data() + (o * rows + start) * cols, len * cols, y.data() + o * len * cols);
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid},
                        [aid, start, len, rows, cols, outer](Tape<T>& t, int32_t self) {
                            if (Tensor<T>* ga = t.grad_accum(aid)) {
                                const Tensor<T>& gy = t.grad(self);
                                for (int64_t o = 0; o < outer; ++o) {
                                    T* dst = ga->data() + (o * rows + start) * cols;
                                    const T* src = gy.data() + o * len * cols;
                                    for (int64_t i = 0; i < len * cols; ++i) dst[i] += src[i];
                                }
                            }
                        });
}

// Concatenation along axis -2; all leading and trailing extents must agree.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    Tape<T>* tape = parts[0].tape;
    const Tensor<T>& first = parts[0].val();
    require(first.rank() >= 2, "concat_rows: rank < 2");
    const int64_t cols = first.dim(-1);
    int64_t total_rows = 0;
    std::vector<int64_t> row_counts;
    for (const auto& p : parts) {
        const Tensor<T>& x = p.val();
        require(x.rank() == first.rank() && x.dim(-1) == cols, "concat_rows: incompatible shapes");
        for (int i = 0; i < first.rank() - 2; ++i)
            require(x.shape[static_cast<size_t>(i)] == first.shape[static_cast<size_t>(i)],
                    "concat_rows: incompatible shapes");
        row_counts.push_back(x.dim(-2));
        total_rows += x.dim(-2);
    }
    const int64_t outer = first.size() / (first.dim(-2) * cols);
    Shape oshape = first.shape;
    oshape[oshape.size() - 2] = total_rows;
    Tensor<T> y(oshape);
    std::vector<int32_t> ids;
    int64_t row0 = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor<T>& x = parts[pi].val();
        const int64_t rows = row_counts[pi];
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(x.data() + o * rows * cols, rows * cols,
                        y.data() + (o * total_rows + row0) * cols);
        ids.push_back(parts[pi].id);
        row0 += rows;
    }
    return tape->make(std::move(y), ids,
                      [ids, row_counts, total_rows, cols, outer](Tape<T>& t, int32_t self) {
                          const Tensor<T>& gy = t.grad(self);
                          int64_t row0 = 0;
                          for (size_t pi = 0; pi < ids.size(); ++pi) {
                              const int64_t rows = row_counts[pi];
                              if (Tensor<T>* ga = t.grad_accum(ids[pi])) {
                                  for (int64_t o = 0; o < outer; ++o) {
                                      T* dst = ga->data() + o * rows * cols;
                                      const T* src = gy.data() + (o * total_rows + row0) * cols;
                                      for (int64_t i = 0; i < rows * cols; ++i) dst[i] += src[i];
                                  }
                              }
                              row0 += rows;
                          }
                      });
}

// out[i,:] = table[ids[i],:]. Backward scatter-adds in index order.
template <class T>
Var<T> gather_rows(const Var<T>& table, std::vector<int32_t> ids) {
    const Tensor<T>& x = table.val();
    require(x.rank() == 2, "gather_rows: table must be 2-d");
    const int64_t v = x.dim(0), d = x.dim(1);
    for (int32_t id : ids)
        require(id >= 0 && id < v, "gather_rows: index " + std::to_string(id) + " out of range");
    Tensor<T> y({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(x.data() + static_cast<int64_t>(ids[i]) * d, d, y.data() + static_cast<int64_t>(i) * d);
    const int32_t tid = table.id;
    return table.tape->make(std::move(y), {tid}, [tid, ids, d](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(tid)) {
            const Tensor<T>& gy = t.grad(self);
            for (size_t i = 0; i < ids.size(); ++i) {
                T* dst = ga->data() + static_cast<int64_t>(ids[i]) * d;
                const T* src = gy.data() + static_cast<int64_t>(i) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        }
    });
}

// out[i] = x[i, ids[i]] for a 2-d x.
template <class T>
Var<T> select_cols(const Var<T>& a, std::vector<int32_t> ids) {
    const Tensor<T>& x = a.val();
    require(x.rank() == 2, "select_cols: input must be 2-d");
    const int64_t n = x.dim(0), v = x.dim(1);
    require(static_cast<int64_t>(ids.size()) == n, "select_cols: index count mismatch");
    Tensor<T> y({n});
    for (int64_t i = 0; i < n; ++i) {
        require(ids[static_cast<size_t>(i)] >= 0 && ids[static_cast<size_t>(i)] < v,
                "select_cols: index out of range");
        y.v[static_cast<size_t>(i)] = x.v[static_cast<size_t>(i * v + ids[static_cast<size_t>(i)])];
    }
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, ids, v](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            const Tensor<T>& gy = t.grad(self);
            for (size_t i = 0; i < ids.size(); ++i)
                ga->v[i * static_cast<size_t>(v) + static_cast<size_t>(ids[i])] += gy.v[i];
        }
    });
}

// out = x, with rows [start, start+L) of each batch incremented by y.
template <class T>
Var<T> add_slice_rows(const Var<T>& a, const Var<T>& b, int64_t start) {
    const Tensor<T>&x = a.val(), &yb = b.val();
    require(x.rank() == 3 && yb.rank() == 3, "add_slice_rows: expect [B,T,D] and [B,L,D]");
    const int64_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2), L = yb.dim(1);
    require(yb.dim(0) == B && yb.dim(2) == D && start >= 0 && start + L <= Tn,
            "add_slice_rows: incompatible " + shape_str(x.shape) + " vs " + shape_str(yb.shape));
    Tensor<T> y = x;
    for (int64_t bi = 0; bi < B; ++bi) {
        T* dst = y.data() + (bi * Tn + start) * D;
        const T* src = yb.data() + bi * L * D;
        for (int64_t i = 0; i < L * D; ++i) dst[i] += src[i];
    }
    const int32_t aid = a.id, bid = b.id;
    return a.tape->make(std::move(y), {aid, bid},
                        [aid, bid, B, Tn, D, L, start](Tape<T>& t, int32_t self) {
                            const Tensor<T>& gy = t.grad(self);
                            if (Tensor<T>* ga = t.grad_accum(aid))
                                for (size_t i = 0; i < gy.v.size(); ++i) ga->v[i] += gy.v[i];
                            if (Tensor<T>* gb = t.grad_accum(bid)) {
                                for (int64_t bi = 0; bi < B; ++bi) {
                                    T* dst = gb->data() + bi * L * D;
                                    const T* src = gy.data() + (bi * Tn + start) * D;
                                    for (int64_t i = 0; i < L * D; ++i) dst[i] += src[i];
                                }
                            }
                        });
}

// Tiles [L,D] into [B,L,D]; backward sums over the batch axis in order.
template <class T>
Var<T> broadcast_to_batch(const Var<T>& a, int64_t B) {
    const Tensor<T>& x = a.val();
    require(x.rank() == 2 && B >= 1, "broadcast_to_batch: expect [L,D] and B >= 1");
    const int64_t L = x.dim(0), D = x.dim(1);
    Tensor<T> y({B, L, D});
    for (int64_t b = 0; b < B; ++b) std::copy_n(x.data(), L * D, y.data() + b * L * D);
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, B, L, D](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            const Tensor<T>& gy = t.grad(self);
            for (int64_t b = 0; b < B; ++b) {
                const T* src = gy.data() + b * L * D;
                for (int64_t i = 0; i < L * D; ++i) ga->v[static_cast<size_t>(i)] += src[i];
            }
        }
    });
}

// out[b,t,:] = x[b,t,:] + y[t,:] (broadcast over the batch axis).
template <class T>
Var<T> add_broadcast_rows(const Var<T>& a, const Var<T>& b) {
    const Tensor<T>&x = a.val(), &yb = b.val();
    require(x.rank() == 3 && yb.rank() == 2, "add_broadcast_rows: expect [B,T,D] and [T,D]");
    const int64_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2);
    require(yb.dim(0) == Tn && yb.dim(1) == D,
            "add_broadcast_rows: incompatible " + shape_str(x.shape) + " vs " + shape_str(yb.shape));
    Tensor<T> y = x;
    for (int64_t bi = 0; bi < B; ++bi) {
        T* dst = y.data() + bi * Tn * D;
        for (int64_t i = 0; i < Tn * D; ++i) dst[i] += yb.v[static_cast<size_t>(i)];
    }
    const int32_t aid = a.id, bid = b.id;
    return a.tape->make(std::move(y), {aid, bid}, [aid, bid, B, Tn, D](Tape<T>& t, int32_t self) {
        const Tensor<T>& gy = t.grad(self);
        if (Tensor<T>* ga = t.grad_accum(aid))
            for (size_t i = 0; i < gy.v.size(); ++i) ga->v[i] += gy.v[i];
        if (Tensor<T>* gb = t.grad_accum(bid)) {
            for (int64_t bi = 0; bi < B; ++bi) {
                const T* src = gy.data() + bi * Tn * D;
                for (int64_t i = 0; i < Tn * D; ++i) gb->v[static_cast<size_t>(i)] += src[i];
            }
        }
    });
}

// out[..., j] = x[..., j] + bias[j].
template <class T>
Var<T> add_bias(const Var<T>& a, const Var<T>& b) {
    const Tensor<T>&x = a.val(), &bias = b.val();
    require(bias.rank() == 1 && x.dim(-1) == bias.dim(0),
            "add_bias: incompatible " + shape_str(x.shape) + " vs " + shape_str(bias.shape));
    const int64_t n = bias.dim(0), rows = x.size() / n;
    Tensor<T> y = x;
    for (int64_t r = 0; r < rows; ++r) {
        T* dst = y.data() + r * n;
        for (int64_t j = 0; j < n; ++j) dst[j] += bias.v[static_cast<size_t>(j)];
    }
    const int32_t aid = a.id, bid = b.id;
    return a.tape->make(std::move(y), {aid, bid}, [aid, bid, n, rows](Tape<T>& t, int32_t self) {
        const Tensor<T>& gy = t.grad(self);
        if (Tensor<T>* ga = t.grad_accum(aid))
            for (size_t i = 0; i < gy.v.size(); ++i) ga->v[i] += gy.v[i];
        if (Tensor<T>* gb = t.grad_accum(bid)) {
            for (int64_t r = 0; r < rows; ++r) {
                const T* src = gy.data() + r * n;
                for (int64_t j = 0; j < n; ++j) gb->v[static_cast<size_t>(j)] += src[j];
            }
        }
    });
}

// Multiply each row t by a fixed scalar mask[t]; mask is not differentiated.
template <class T>
Var<T> row_mask_scale(const Var<T>& a, std::vector<T> mask) {
    const Tensor<T>& x = a.val();
    require(x.rank() == 3, "row_mask_scale: expect [B,T,D]");
    const int64_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2);
    require(static_cast<int64_t>(mask.size()) == Tn, "row_mask_scale: mask length mismatch");
    Tensor<T> y = x;
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t tpos = 0; tpos < Tn; ++tpos) {
            T* dst = y.data() + (bi * Tn + tpos) * D;
            const T m = mask[static_cast<size_t>(tpos)];
            for (int64_t j = 0; j < D; ++j) dst[j] *= m;
        }
    const int32_t aid = a.id;
    return a.tape->make(std::move(y), {aid}, [aid, mask, B, Tn, D](Tape<T>& t, int32_t self) {
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            const Tensor<T>& gy = t.grad(self);
            for (int64_t bi = 0; bi < B; ++bi)
                for (int64_t tpos = 0; tpos < Tn; ++tpos) {
                    T* dst = ga->data() + (bi * Tn + tpos) * D;
                    const T* src = gy.data() + (bi * Tn + tpos) * D;
                    const T m = mask[static_cast<size_t>(tpos)];
                    for (int64_t j = 0; j < D; ++j) dst[j] += src[j] * m;
                }
        }
    });
}

// ---- matmul -------------------------------------------------------------------

namespace detail {

// Resolves batched matmul shapes: a is [..,M,K], b is [..,K,N] or [K,N].
struct MatmulDims {
    int64_t L, M, N, K;
    bool b_broadcast;
};

inline MatmulDims matmul_dims(const Shape& a, const Shape& b, bool transA, bool transB) {
    require(a.size() >= 2 && b.size() >= 2, "matmul: operands must have rank >= 2");
    MatmulDims d{};
    const int64_t a_rows = a[a.size() - 2], a_cols = a[a.size() - 1];
    const int64_t b_rows = b[b.size() - 2], b_cols = b[b.size() - 1];
    d.M = transA ? a_cols : a_rows;
    d.K = transA ? a_rows : a_cols;
    const int64_t Kb = transB ? b_cols : b_rows;
    d.N = transB ? b_rows : b_cols;
    require(d.K == Kb, "matmul: inner dimension mismatch " + shape_str(a) + " vs " + shape_str(b));
    int64_t la = 1;
    for (size_t i = 0; i + 2 < a.size(); ++i) la *= a[i];
    int64_t lb = 1;
    for (size_t i = 0; i + 2 < b.size(); ++i) lb *= b[i];
    d.b_broadcast = (b.size() == 2 && a.size() > 2);
    require(d.b_broadcast || la == lb,
            "matmul: batch dimension mismatch " + shape_str(a) + " vs " + shape_str(b));
    d.L = la;
    return d;
}

template <class T>
void batched_gemm(const T* A, const T* B, T* C, const MatmulDims& d, int64_t a_sz, int64_t b_sz,
                  bool transA, bool transB, bool accumulate) {
    if (d.L == 1 || (d.b_broadcast && !transA)) {
        // Contiguous batch of rows sharing one right operand: single product.
        gemm<T>(A, B, C, d.L * d.M, d.N, d.K, transA, transB, accumulate);
        return;
    }
    const int64_t c_sz = d.M * d.N;
    if (d.L * d.M >= 128 && ThreadPool::global().size() > 1) {
        parallel_for(d.L, [&](int64_t l) {
            gemm_serial<T>(A + l * a_sz, B + (d.b_broadcast ? 0 : l * b_sz), C + l * c_sz, d.M, d.N,
                           d.K, transA, transB, accumulate);
        });
    } else {
        for (int64_t l = 0; l < d.L; ++l)
            gemm_serial<T>(A + l * a_sz, B + (d.b_broadcast ? 0 : l * b_sz), C + l * c_sz, d.M, d.N,
                           d.K, transA, transB, accumulate);
    }
}

}  // namespace detail

// Batched matrix product with optional transposes (not both at once).
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transA = false, bool transB = false) {
    require(!(transA && transB), "matmul: transA && transB unsupported");
    const Tensor<T>&xa = a.val(), &xb = b.val();
    const auto d = detail::matmul_dims(xa.shape, xb.shape, transA, transB);
    Shape oshape(xa.shape.begin(), xa.shape.end() - 2);
    oshape.push_back(d.M);
    oshape.push_back(d.N);
    Tensor<T> y(oshape);
    const int64_t a_sz = xa.size() / d.L, b_sz = d.b_broadcast ? xb.size() : xb.size() / d.L;
    detail::batched_gemm<T>(xa.data(), xb.data(), y.data(), d, a_sz, b_sz, transA, transB, false);

    const int32_t aid = a.id, bid = b.id;
    return a.tape->make(std::move(y), {aid, bid},
                        [aid, bid, d, a_sz, b_sz, transA, transB](Tape<T>& t, int32_t self) {
        const Tensor<T>& gy = t.grad(self);
        const Tensor<T>&xa = t.value(aid), &xb = t.value(bid);
        const int64_t c_sz = d.M * d.N;
        if (Tensor<T>* ga = t.grad_accum(aid)) {
            // dA: (no trans)  dY * B^T   | (transA) B * dY^T  | (transB) dY * B
            for (int64_t l = 0; l < d.L; ++l) {
                const T* B = xb.data() + (d.b_broadcast ? 0 : l * b_sz);
                const T* dY = gy.data() + l * c_sz;
                T* dA = ga->data() + l * a_sz;
                if (transA)
                    gemm<T>(B, dY, dA, d.K, d.M, d.N, false, true, true);
                else if (transB)
                    gemm<T>(dY, B, dA, d.M, d.K, d.N, false, false, true);
                else
                    gemm<T>(dY, B, dA, d.M, d.K, d.N, false, true, true);
            }
        }
        if (Tensor<T>* gb = t.grad_accum(bid)) {
            if (d.b_broadcast && !transA && !transB) {
                // Flattened rows: dB = A^T * dY in one deterministic product.
                gemm<T>(xa.data(), gy.data(), gb->data(), d.K, d.N, d.L * d.M, true, false, true);
            } else {
                // Serial over batch so shared operands accumulate in fixed order.
                for (int64_t l = 0; l < d.L; ++l) {
                    const T* A = xa.data() + l * a_sz;
                    const T* dY = gy.data() + l * c_sz;
                    T* dB = gb->data() + (d.b_broadcast ? 0 : l * b_sz);
                    if (transA)
                        gemm_serial<T>(A, dY, dB, d.K, d.N, d.M, false, false, true);
                    else if (transB)
                        gemm_serial<T>(dY, A, dB, d.N, d.K, d.M, true, false, true);
                    else
                        gemm_serial<T>(A, dY, dB, d.K, d.N, d.M, true, false, true);
                }
            }
        }
    });
}

}  // namespace unigen::core
