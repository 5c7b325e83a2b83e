// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels shared by the autograd primitives. All matrices are row-major.
// Every routine accumulates into C (C += ...); callers zero C when needed.
// Matrix products go through CBLAS pinned to one thread, which keeps results
// bit-reproducible from run to run.

#pragma once

#include <algorithm>
#include <cstddef>

#include <cblas.h>

namespace mola::kernels {

void set_single_thread();

inline void gemm(bool ta, bool tb, std::size_t M, std::size_t N, std::size_t K, const float* A, const float* B,
                 float* C) {
    set_single_thread();
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(M),
                static_cast<int>(N), static_cast<int>(K), 1.0f, A, static_cast<int>(ta ? M : K), B,
                static_cast<int>(tb ? K : N), 1.0f, C, static_cast<int>(N));
}

inline void gemm(bool ta, bool tb, std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                 double* C) {
    set_single_thread();
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(M),
                static_cast<int>(N), static_cast<int>(K), 1.0, A, static_cast<int>(ta ? M : K), B,
                static_cast<int>(tb ? K : N), 1.0, C, static_cast<int>(N));
}

/// C[M×N] += A[M×K] · B[K×N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    gemm(false, false, M, N, K, A, B, C);
}

/// C[M×N] += Aᵀ · B with A stored as [K×M], B as [K×N].
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    gemm(true, false, M, N, K, A, B, C);
}

/// C[M×N] += A · Bᵀ with A stored as [M×K], B as [N×K].
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    gemm(false, true, M, N, K, A, B, C);
}

/// Geometry of one stride-1, zero-padded, square-kernel cross-correlation.
struct ConvShape {
    std::size_t channels;  // input channels of one group
    std::size_t height, width;
    std::size_t kernel;
    std::size_t padding;
    std::size_t out_height() const { return height + 2 * padding - kernel + 1; }
    std::size_t out_width() const { return width + 2 * padding - kernel + 1; }
    std::size_t patch() const { return channels * kernel * kernel; }
    std::size_t out_pixels() const { return out_height() * out_width(); }
};

/// col[(c·k + ky)·k + kx][oy·Wo + ox] = in[c][oy + ky − p][ox + kx − p], zero outside.
template <typename T>
void im2col(const ConvShape& s, const T* in, T* col) {
    const std::size_t ho = s.out_height();
    const std::size_t wo = s.out_width();
    const auto pad = static_cast<std::ptrdiff_t>(s.padding);
    const auto H = static_cast<std::ptrdiff_t>(s.height);
    const auto W = static_cast<std::ptrdiff_t>(s.width);
    for (std::size_t c = 0; c < s.channels; ++c) {
        const T* plane = in + c * s.height * s.width;
        for (std::size_t ky = 0; ky < s.kernel; ++ky) {
            for (std::size_t kx = 0; kx < s.kernel; ++kx) {
                T* row = col + ((c * s.kernel + ky) * s.kernel + kx) * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
                    T* out = row + oy * wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(out, out + wo, T{0});
                        continue;
                    }
                    const T* src = plane + iy * W;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
                        out[ox] = (ix < 0 || ix >= W) ? T{0} : src[ix];
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: in[c][iy][ix] += col[...].
template <typename T>
void col2im_add(const ConvShape& s, const T* col, T* in) {
    const std::size_t ho = s.out_height();
    const std::size_t wo = s.out_width();
    const auto pad = static_cast<std::ptrdiff_t>(s.padding);
    const auto H = static_cast<std::ptrdiff_t>(s.height);
    const auto W = static_cast<std::ptrdiff_t>(s.width);
    for (std::size_t c = 0; c < s.channels; ++c) {
        T* plane = in + c * s.height * s.width;
        for (std::size_t ky = 0; ky < s.kernel; ++ky) {
            for (std::size_t kx = 0; kx < s.kernel; ++kx) {
                const T* row = col + ((c * s.kernel + ky) * s.kernel + kx) * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
                    if (iy < 0 || iy >= H) {
                        continue;
                    }
                    T* dst = plane + iy * W;
                    const T* src = row + oy * wo;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
                        if (ix >= 0 && ix < W) {
                            dst[ix] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major transpose of a [rows×cols] block into [cols×rows].
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

}  // namespace mola::kernels
