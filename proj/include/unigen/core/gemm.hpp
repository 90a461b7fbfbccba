#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

#include "unigen/core/threadpool.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define UNIGEN_GEMM_AVX2 1
#endif

namespace unigen::core {

// C[M,N] = A[M,K] * B[K,N] (+= when accumulate). Operands may be given
// transposed; they are packed into row-major scratch first so one kernel
// covers all cases. Every output element is accumulated serially over K in a
// fixed order, so results are reproducible for any thread count.

namespace detail {

template <class T>
inline std::vector<T>& gemm_scratch_a() {
    thread_local std::vector<T> buf;
    return buf;
}
template <class T>
inline std::vector<T>& gemm_scratch_b() {
    thread_local std::vector<T> buf;
    return buf;
}

template <class T>
inline const T* pack_transposed(const T* src, int64_t rows, int64_t cols, std::vector<T>& buf) {
    // src is [cols, rows] row-major; produce [rows, cols].
    buf.resize(static_cast<size_t>(rows) * cols);
    for (int64_t c = 0; c < cols; ++c)
        for (int64_t r = 0; r < rows; ++r) buf[static_cast<size_t>(r) * cols + c] = src[c * rows + r];
    return buf.data();
}

template <class T>
inline void gemm_rows_generic(const T* A, const T* B, T* C, int64_t N, int64_t K, int64_t i0,
                              int64_t i1, bool accumulate) {
    for (int64_t i = i0; i < i1; ++i) {
        T* c = C + i * N;
        if (!accumulate)
            for (int64_t j = 0; j < N; ++j) c[j] = T(0);
        const T* a = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const T aik = a[k];
            const T* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
        }
    }
}

#ifdef UNIGEN_GEMM_AVX2
// 6x16 register-blocked FMA microkernel.
inline void gemm_rows_f32(const float* A, const float* B, float* C, int64_t N, int64_t K,
                          int64_t i0, int64_t i1, bool accumulate) {
    int64_t i = i0;
    for (; i + 6 <= i1; i += 6) {
        const float* a0 = A + (i + 0) * K;
        const float* a1 = A + (i + 1) * K;
        const float* a2 = A + (i + 2) * K;
        const float* a3 = A + (i + 3) * K;
        const float* a4 = A + (i + 4) * K;
        const float* a5 = A + (i + 5) * K;
        int64_t j = 0;
        for (; j + 16 <= N; j += 16) {
            __m256 c00, c01, c10, c11, c20, c21, c30, c31, c40, c41, c50, c51;
            if (accumulate) {
                c00 = _mm256_loadu_ps(C + (i + 0) * N + j);
                c01 = _mm256_loadu_ps(C + (i + 0) * N + j + 8);
                c10 = _mm256_loadu_ps(C + (i + 1) * N + j);
                c11 = _mm256_loadu_ps(C + (i + 1) * N + j + 8);
                c20 = _mm256_loadu_ps(C + (i + 2) * N + j);
                c21 = _mm256_loadu_ps(C + (i + 2) * N + j + 8);
                c30 = _mm256_loadu_ps(C + (i + 3) * N + j);
                c31 = _mm256_loadu_ps(C + (i + 3) * N + j + 8);
                c40 = _mm256_loadu_ps(C + (i + 4) * N + j);
                c41 = _mm256_loadu_ps(C + (i + 4) * N + j + 8);
                c50 = _mm256_loadu_ps(C + (i + 5) * N + j);
                c51 = _mm256_loadu_ps(C + (i + 5) * N + j + 8);
            } else {
                c00 = c01 = c10 = c11 = c20 = c21 = _mm256_setzero_ps();
                c30 = c31 = c40 = c41 = c50 = c51 = _mm256_setzero_ps();
            }
            for (int64_t k = 0; k < K; ++k) {
                const __m256 b0 = _mm256_loadu_ps(B + k * N + j);
                const __m256 b1 = _mm256_loadu_ps(B + k * N + j + 8);
                __m256 a;
                a = _mm256_broadcast_ss(a0 + k);
                c00 = _mm256_fmadd_ps(a, b0, c00);
                c01 = _mm256_fmadd_ps(a, b1, c01);
                a = _mm256_broadcast_ss(a1 + k);
                c10 = _mm256_fmadd_ps(a, b0, c10);
                c11 = _mm256_fmadd_ps(a, b1, c11);
                a = _mm256_broadcast_ss(a2 + k);
                c20 = _mm256_fmadd_ps(a, b0, c20);
                c21 = _mm256_fmadd_ps(a, b1, c21);
                a = _mm256_broadcast_ss(a3 + k);
                c30 = _mm256_fmadd_ps(a, b0, c30);
                c31 = _mm256_fmadd_ps(a, b1, c31);
                a = _mm256_broadcast_ss(a4 + k);
                c40 = _mm256_fmadd_ps(a, b0, c40);
                c41 = _mm256_fmadd_ps(a, b1, c41);
                a = _mm256_broadcast_ss(a5 + k);
                c50 = _mm256_fmadd_ps(a, b0, c50);
                c51 = _mm256_fmadd_ps(a, b1, c51);
            }
            _mm256_storeu_ps(C + (i + 0) * N + j, c00);
            _mm256_storeu_ps(C + (i + 0) * N + j + 8, c01);
            _mm256_storeu_ps(C + (i + 1) * N + j, c10);
            _mm256_storeu_ps(C + (i + 1) * N + j + 8, c11);
            _mm256_storeu_ps(C + (i + 2) * N + j, c20);
            _mm256_storeu_ps(C + (i + 2) * N + j + 8, c21);
            _mm256_storeu_ps(C + (i + 3) * N + j, c30);
            _mm256_storeu_ps(C + (i + 3) * N + j + 8, c31);
            _mm256_storeu_ps(C + (i + 4) * N + j, c40);
            _mm256_storeu_ps(C + (i + 4) * N + j + 8, c41);
            _mm256_storeu_ps(C + (i + 5) * N + j, c50);
            _mm256_storeu_ps(C + (i + 5) * N + j + 8, c51);
        }
        if (j < N) {
            for (int64_t r = 0; r < 6; ++r) {
                float* c = C + (i + r) * N;
                const float* a = A + (i + r) * K;
                if (!accumulate)
                    for (int64_t jj = j; jj < N; ++jj) c[jj] = 0.f;
                for (int64_t k = 0; k < K; ++k) {
                    const float aik = a[k];
                    const float* b = B + k * N;
                    for (int64_t jj = j; jj < N; ++jj) c[jj] += aik * b[jj];
                }
            }
        }
    }
    if (i < i1) gemm_rows_generic(A, B, C, N, K, i, i1, accumulate);
}
#endif

template <class T>
inline void gemm_rows(const T* A, const T* B, T* C, int64_t N, int64_t K, int64_t i0, int64_t i1,
                      bool accumulate) {
    gemm_rows_generic(A, B, C, N, K, i0, i1, accumulate);
}

#ifdef UNIGEN_GEMM_AVX2
template <>
inline void gemm_rows<float>(const float* A, const float* B, float* C, int64_t N, int64_t K,
                             int64_t i0, int64_t i1, bool accumulate) {
    gemm_rows_f32(A, B, C, N, K, i0, i1, accumulate);
}
#endif

}  // namespace detail

// Single matrix product; runs on the calling thread.
template <class T>
inline void gemm_serial(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t K, bool transA,
                        bool transB, bool accumulate) {
    if (transA) A = detail::pack_transposed(A, M, K, detail::gemm_scratch_a<T>());
    if (transB) B = detail::pack_transposed(B, K, N, detail::gemm_scratch_b<T>());
    detail::gemm_rows(A, B, C, N, K, 0, M, accumulate);
}

// Parallel over fixed-size row blocks of C.
template <class T>
inline void gemm(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t K, bool transA,
                 bool transB, bool accumulate) {
    std::vector<T> packed_a, packed_b;
    if (transA) A = detail::pack_transposed(A, M, K, packed_a);
    if (transB) B = detail::pack_transposed(B, K, N, packed_b);
    constexpr int64_t kRowBlock = 48;
    const int64_t n_blocks = (M + kRowBlock - 1) / kRowBlock;
    const int64_t work = M * N * K;
    if (n_blocks <= 1 || ThreadPool::global().size() == 1 || work < (1 << 18)) {
        detail::gemm_rows(A, B, C, N, K, 0, M, accumulate);
        return;
    }
    parallel_for(n_blocks, [&](int64_t b) {
        const int64_t i0 = b * kRowBlock;
        const int64_t i1 = i0 + kRowBlock < M ? i0 + kRowBlock : M;
        detail::gemm_rows(A, B, C, N, K, i0, i1, accumulate);
    });
}

}  // namespace unigen::core
