// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/ops.hpp"

#include <fmt/format.h>
#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "autograd_internal.hpp"
#include "kernels.hpp"

namespace mola {

void kernels::set_single_thread() {
    static const bool once = [] {
        openblas_set_num_threads(1);
        // Keep large freed blocks in the heap: every step reallocates the same
        // multi-megabyte buffers, and fresh mmap pages dominate otherwise.
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)once;
}

using detail::grad_of;
using detail::make_result;

namespace {

void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw DimensionError(fmt::format("{}: expected rank {}, got shape {}", op, rank, shape_str(s)));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(
            fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()), shape_str(b.shape())));
    }
}

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
    for (T v : values) {
        if (std::isnan(v)) {
            throw NumericError(fmt::format("{}: NaN input", op));
        }
    }
}

}  // namespace

// ---- linear algebra ------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a.shape(), 2, "matmul");
    require_rank(b.shape(), 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError(
            fmt::format("matmul: inner dimensions differ, {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
    }
    std::vector<T> out(m * n, T{0});
    kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    return make_result<T>({m, n}, std::move(out), {&a, &b}, [ai, bi, m, n, k](detail::TensorImpl<T>& self) {
        const T* g = self.grad.data();
        if (T* ga = grad_of(ai)) {
            kernels::gemm_nt(m, k, n, g, bi->data.data(), ga);  // G·Bᵀ
        }
        if (T* gb = grad_of(bi)) {
            kernels::gemm_tn(k, n, m, ai->data.data(), g, gb);  // Aᵀ·G
        }
    });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a.shape(), 3, "bmm");
    require_rank(b.shape(), 3, "bmm");
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) {
        throw DimensionError(fmt::format("bmm: incompatible shapes {} and {}", shape_str(a.shape()), shape_str(b.shape())));
    }
    std::vector<T> out(batch * m * n, T{0});
    for (std::size_t s = 0; s < batch; ++s) {
        kernels::gemm_nn(m, n, k, a.data().data() + s * m * k, b.data().data() + s * k * n, out.data() + s * m * n);
    }
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    return make_result<T>({batch, m, n}, std::move(out), {&a, &b},
                          [ai, bi, batch, m, n, k](detail::TensorImpl<T>& self) {
                              T* ga = grad_of(ai);
                              T* gb = grad_of(bi);
                              for (std::size_t s = 0; s < batch; ++s) {
                                  const T* g = self.grad.data() + s * m * n;
                                  if (ga) {
                                      kernels::gemm_nt(m, k, n, g, bi->data.data() + s * k * n, ga + s * m * k);
                                  }
                                  if (gb) {
                                      kernels::gemm_tn(k, n, m, ai->data.data() + s * m * k, g, gb + s * k * n);
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    require_rank(x.shape(), 2, "linear");
    require_rank(weight.shape(), 2, "linear");
    const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in) {
        throw DimensionError(
            fmt::format("linear: input {} does not match weight {}", shape_str(x.shape()), shape_str(weight.shape())));
    }
    if (bias.defined() && bias.numel() != out_dim) {
        throw DimensionError(fmt::format("linear: bias {} for {} outputs", shape_str(bias.shape()), out_dim));
    }
    std::vector<T> out(n * out_dim, T{0});
    kernels::gemm_nt(n, out_dim, in, x.data().data(), weight.data().data(), out.data());
    if (bias.defined()) {
        const auto bv = bias.data();
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t o = 0; o < out_dim; ++o) {
                out[r * out_dim + o] += bv[o];
            }
        }
    }
    auto xi = x.impl_ptr();
    auto wi = weight.impl_ptr();
    auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
    return make_result<T>({n, out_dim}, std::move(out), {&x, &weight, &bias},
                          [xi, wi, bi, n, in, out_dim](detail::TensorImpl<T>& self) {
                              const T* g = self.grad.data();
                              if (T* gx = grad_of(xi)) {
                                  kernels::gemm_nn(n, in, out_dim, g, wi->data.data(), gx);
                              }
                              if (T* gw = grad_of(wi)) {
                                  kernels::gemm_tn(out_dim, in, n, g, xi->data.data(), gw);
                              }
                              if (T* gb = grad_of(bi)) {
                                  for (std::size_t r = 0; r < n; ++r) {
                                      for (std::size_t o = 0; o < out_dim; ++o) {
                                          gb[o] += g[r * out_dim + o];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t groups, std::size_t padding) {
    require_rank(input.shape(), 4, "conv2d");
    require_rank(weight.shape(), 4, "conv2d");
    const std::size_t batch = input.dim(0), cin = input.dim(1), height = input.dim(2), width = input.dim(3);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    if (groups == 0 || cin % groups != 0 || cout % groups != 0) {
        throw ConfigError(fmt::format("conv2d: channels in={} out={} not divisible by groups={}", cin, cout, groups));
    }
    const std::size_t cin_g = cin / groups;
    const std::size_t cout_g = cout / groups;
    if (weight.dim(1) != cin_g || weight.dim(3) != k) {
        throw DimensionError(fmt::format("conv2d: weight {} incompatible with input {} and groups={}",
                                         shape_str(weight.shape()), shape_str(input.shape()), groups));
    }
    if (height + 2 * padding < k || width + 2 * padding < k) {
        throw DimensionError(fmt::format("conv2d: kernel {} larger than padded input {}", k, shape_str(input.shape())));
    }
    const kernels::ConvShape geo{cin_g, height, width, k, padding};
    const std::size_t ho = geo.out_height(), wo = geo.out_width();
    const std::size_t pixels = geo.out_pixels();
    const std::size_t patch = geo.patch();
    const bool direct = (k == 1 && padding == 0);  // column matrix is the input slice itself

    std::vector<T> out(batch * cout * pixels, T{0});
    std::vector<T> col(direct ? 0 : patch * pixels);
    const T* in = input.data().data();
    const T* w = weight.data().data();
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t g = 0; g < groups; ++g) {
            const T* src = in + (s * cin + g * cin_g) * height * width;
            const T* cols = src;
            if (!direct) {
                kernels::im2col(geo, src, col.data());
                cols = col.data();
            }
            kernels::gemm_nn(cout_g, pixels, patch, w + g * cout_g * patch, cols,
                             out.data() + (s * cout + g * cout_g) * pixels);
        }
    }

    auto ii = input.impl_ptr();
    auto wi = weight.impl_ptr();
    return make_result<T>(
        {batch, cout, ho, wo}, std::move(out), {&input, &weight},
        [ii, wi, geo, batch, groups, cin, cout, cin_g, cout_g, height, width, direct](detail::TensorImpl<T>& self) {
            const std::size_t pixels = geo.out_pixels();
            const std::size_t patch = geo.patch();
            T* gin = grad_of(ii);
            T* gw = grad_of(wi);
            std::vector<T> col(direct ? 0 : patch * pixels);
            std::vector<T> dcol(gin ? patch * pixels : 0);
            for (std::size_t s = 0; s < batch; ++s) {
                for (std::size_t g = 0; g < groups; ++g) {
                    const T* gout = self.grad.data() + (s * cout + g * cout_g) * pixels;
                    const std::size_t in_off = (s * cin + g * cin_g) * height * width;
                    if (gw) {
                        const T* cols = ii->data.data() + in_off;
                        if (!direct) {
                            kernels::im2col(geo, cols, col.data());
                            cols = col.data();
                        }
                        kernels::gemm_nt(cout_g, patch, pixels, gout, cols, gw + g * cout_g * patch);
                    }
                    if (gin) {
                        std::fill(dcol.begin(), dcol.end(), T{0});
                        kernels::gemm_tn(patch, pixels, cout_g, wi->data.data() + g * cout_g * patch, gout,
                                         dcol.data());
                        if (direct) {
                            T* dst = gin + in_off;
                            for (std::size_t i = 0; i < patch * pixels; ++i) {
                                dst[i] += dcol[i];
                            }
                        } else {
                            kernels::col2im_add(geo, dcol.data(), gin + in_off);
                        }
                    }
                }
            }
        });
}

// ---- elementwise ---------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](detail::TensorImpl<T>& self) {
        const std::size_t n = self.grad.size();
        if (T* ga = grad_of(ai)) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
        }
        if (T* gb = grad_of(bi)) {
            for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] - bv[i];
    }
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](detail::TensorImpl<T>& self) {
        const std::size_t n = self.grad.size();
        if (T* ga = grad_of(ai)) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
        }
        if (T* gb = grad_of(bi)) {
            for (std::size_t i = 0; i < n; ++i) gb[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * bv[i];
    }
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, [ai, bi](detail::TensorImpl<T>& self) {
        const std::size_t n = self.grad.size();
        if (T* ga = grad_of(ai)) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bi->data[i];
        }
        if (T* gb = grad_of(bi)) {
            for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * ai->data[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.numel());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] * factor;
    }
    auto xi = x.impl_ptr();
    return make_result<T>(x.shape(), std::move(out), {&x}, [xi, factor](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * factor;
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] > T{0} ? xv[i] : T{0};
    }
    auto xi = x.impl_ptr();
    return make_result<T>(x.shape(), std::move(out), {&x}, [xi](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (xi->data[i] > T{0}) gx[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& v) {
    require_rank(x.shape(), 2, "add_rowwise");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (v.numel() != cols) {
        throw DimensionError(
            fmt::format("add_rowwise: vector {} vs matrix {}", shape_str(v.shape()), shape_str(x.shape())));
    }
    std::vector<T> out(x.numel());
    const auto xv = x.data();
    const auto vv = v.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = xv[r * cols + c] + vv[c];
        }
    }
    auto xi = x.impl_ptr();
    auto vi = v.impl_ptr();
    return make_result<T>(x.shape(), std::move(out), {&x, &v}, [xi, vi, rows, cols](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            for (std::size_t i = 0; i < rows * cols; ++i) gx[i] += self.grad[i];
        }
        if (T* gv = grad_of(vi)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) gv[c] += self.grad[r * cols + c];
            }
        }
    });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    require_rank(x.shape(), 4, "add_channel_bias");
    const std::size_t batch = x.dim(0), channels = x.dim(1), pixels = x.dim(2) * x.dim(3);
    if (bias.numel() != channels) {
        throw DimensionError(
            fmt::format("add_channel_bias: bias {} for input {}", shape_str(bias.shape()), shape_str(x.shape())));
    }
    std::vector<T> out(x.numel());
    const auto xv = x.data();
    const auto bv = bias.data();
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t off = (s * channels + c) * pixels;
            for (std::size_t p = 0; p < pixels; ++p) out[off + p] = xv[off + p] + bv[c];
        }
    }
    auto xi = x.impl_ptr();
    auto bi = bias.impl_ptr();
    return make_result<T>(x.shape(), std::move(out), {&x, &bias},
                          [xi, bi, batch, channels, pixels](detail::TensorImpl<T>& self) {
                              if (T* gx = grad_of(xi)) {
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                              }
                              if (T* gb = grad_of(bi)) {
                                  for (std::size_t s = 0; s < batch; ++s) {
                                      for (std::size_t c = 0; c < channels; ++c) {
                                          const T* g = self.grad.data() + (s * channels + c) * pixels;
                                          T acc{0};
                                          for (std::size_t p = 0; p < pixels; ++p) acc += g[p];
                                          gb[c] += acc;
                                      }
                                  }
                              }
                          });
}

// ---- reductions ----------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    const auto xv = x.data();
    const T total = std::accumulate(xv.begin(), xv.end(), T{0});
    auto xi = x.impl_ptr();
    return make_result<T>({}, {total}, {&x}, [xi](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            const T g = self.grad[0];
            for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g;
        }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    const auto xv = x.data();
    const T n = static_cast<T>(xv.size());
    const T total = std::accumulate(xv.begin(), xv.end(), T{0});
    auto xi = x.impl_ptr();
    return make_result<T>({}, {total / n}, {&x}, [xi, n](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            const T g = self.grad[0] / n;
            for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g;
        }
    });
}

// ---- shape ---------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError(fmt::format("reshape: {} to {}", shape_str(x.shape()), shape_str(shape)));
    }
    auto xi = x.impl_ptr();
    return make_result<T>(shape, x.to_vector(), {&x}, [xi](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
        }
    });
}

namespace {

std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) {
        strides[i - 1] = strides[i] * shape[i];
    }
    return strides;
}

// For output index o (row-major over out_shape), source offset following `axes`.
std::vector<std::size_t> permutation_map(const Shape& in_shape, const std::vector<std::size_t>& axes) {
    const auto in_strides = row_major_strides(in_shape);
    Shape out_shape(axes.size());
    std::vector<std::size_t> src_strides(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        out_shape[i] = in_shape[axes[i]];
        src_strides[i] = in_strides[axes[i]];
    }
    const std::size_t n = shape_numel(in_shape);
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> idx(axes.size(), 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
        map[o] = src;
        for (std::size_t d = axes.size(); d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                src += src_strides[d];
                break;
            }
            src -= src_strides[d] * (out_shape[d] - 1);
            idx[d] = 0;
        }
    }
    return map;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    const auto& in_shape = x.shape();
    std::vector<std::size_t> sorted = axes;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> expected(in_shape.size());
    std::iota(expected.begin(), expected.end(), 0);
    if (sorted != expected) {
        throw DimensionError(fmt::format("permute: axes [{}] invalid for shape {}", fmt::join(axes, ","),
                                         shape_str(in_shape)));
    }
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[axes[i]];
    auto map = permutation_map(in_shape, axes);
    std::vector<T> out(map.size());
    const auto xv = x.data();
    for (std::size_t o = 0; o < map.size(); ++o) out[o] = xv[map[o]];
    auto xi = x.impl_ptr();
    return make_result<T>(out_shape, std::move(out), {&x}, [xi, map = std::move(map)](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += self.grad[o];
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    require_rank(x.shape(), 2, "transpose");
    return permute(x, {1, 0});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) {
        throw DimensionError("concat: no inputs");
    }
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) {
        throw DimensionError(fmt::format("concat: axis {} out of range for {}", axis, shape_str(first)));
    }
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) {
            ok = d == axis || s[d] == first[d];
        }
        if (!ok) {
            throw DimensionError(
                fmt::format("concat: {} incompatible with {} on axis {}", shape_str(s), shape_str(first), axis));
        }
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
    const std::size_t out_row = out_shape[axis] * inner;

    std::vector<T> out(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t width = p.dim(axis) * inner;
        const auto pv = p.data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pv.data() + o * width, width, out.data() + o * out_row + offset);
        }
        offsets.push_back(offset);
        widths.push_back(width);
        offset += width;
    }
    std::vector<const Tensor<T>*> inputs;
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
    for (const auto& p : parts) {
        inputs.push_back(&p);
        impls.push_back(p.impl_ptr());
    }
    return make_result<T>(out_shape, std::move(out), inputs,
                          [impls, offsets, widths, outer, out_row](detail::TensorImpl<T>& self) {
                              for (std::size_t i = 0; i < impls.size(); ++i) {
                                  if (T* gp = grad_of(impls[i])) {
                                      for (std::size_t o = 0; o < outer; ++o) {
                                          const T* src = self.grad.data() + o * out_row + offsets[i];
                                          T* dst = gp + o * widths[i];
                                          for (std::size_t j = 0; j < widths[i]; ++j) dst[j] += src[j];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
    if (x.rank() < 1 || rows.empty()) {
        throw DimensionError(fmt::format("gather_rows: {} rows from {}", rows.size(), shape_str(x.shape())));
    }
    const std::size_t n = x.dim(0);
    const std::size_t width = x.numel() / n;
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<T> out(idx.size() * width);
    const auto xv = x.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n) {
            throw DimensionError(fmt::format("gather_rows: row {} out of range for {}", idx[i], shape_str(x.shape())));
        }
        std::copy_n(xv.data() + idx[i] * width, width, out.data() + i * width);
    }
    Shape out_shape = x.shape();
    out_shape[0] = idx.size();
    auto xi = x.impl_ptr();
    return make_result<T>(out_shape, std::move(out), {&x}, [xi, idx, width](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const T* src = self.grad.data() + i * width;
                T* dst = gx + idx[i] * width;
                for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
            }
        }
    });
}

// ---- pooling -------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t window) {
    require_rank(x.shape(), 4, "avg_pool2d");
    const std::size_t planes = x.dim(0) * x.dim(1), height = x.dim(2), width = x.dim(3);
    if (window == 0 || height % window != 0 || width % window != 0) {
        throw DimensionError(fmt::format("avg_pool2d: window {} does not tile {}", window, shape_str(x.shape())));
    }
    const std::size_t ho = height / window, wo = width / window;
    const T inv = T{1} / static_cast<T>(window * window);
    std::vector<T> out(planes * ho * wo, T{0});
    const auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t xx = 0; xx < width; ++xx) {
                out[(p * ho + y / window) * wo + xx / window] += xv[(p * height + y) * width + xx];
            }
        }
    }
    for (auto& v : out) v *= inv;
    auto xi = x.impl_ptr();
    return make_result<T>({x.dim(0), x.dim(1), ho, wo}, std::move(out), {&x},
                          [xi, planes, height, width, window, ho, wo, inv](detail::TensorImpl<T>& self) {
                              if (T* gx = grad_of(xi)) {
                                  for (std::size_t p = 0; p < planes; ++p) {
                                      for (std::size_t y = 0; y < height; ++y) {
                                          for (std::size_t xx = 0; xx < width; ++xx) {
                                              gx[(p * height + y) * width + xx] +=
                                                  self.grad[(p * ho + y / window) * wo + xx / window] * inv;
                                          }
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require_rank(x.shape(), 4, "global_avg_pool");
    const std::size_t batch = x.dim(0), channels = x.dim(1), pixels = x.dim(2) * x.dim(3);
    const T inv = T{1} / static_cast<T>(pixels);
    std::vector<T> out(batch * channels);
    const auto xv = x.data();
    for (std::size_t i = 0; i < batch * channels; ++i) {
        T acc{0};
        for (std::size_t p = 0; p < pixels; ++p) acc += xv[i * pixels + p];
        out[i] = acc * inv;
    }
    auto xi = x.impl_ptr();
    return make_result<T>({batch, channels}, std::move(out), {&x}, [xi, pixels, inv](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const T g = self.grad[i] * inv;
                for (std::size_t p = 0; p < pixels; ++p) gx[i * pixels + p] += g;
            }
        }
    });
}

// ---- normalisation and losses --------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    if (x.rank() < 1) {
        throw DimensionError("softmax: scalar input");
    }
    check_finite(x.data(), "softmax");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    std::vector<T> out(x.numel());
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * cols;
        T* o = out.data() + r * cols;
        const T mx = *std::max_element(in, in + cols);
        T total{0};
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            total += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
    }
    auto xi = x.impl_ptr();
    return make_result<T>(x.shape(), std::move(out), {&x}, [xi, rows, cols](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = self.data.data() + r * cols;
                const T* g = self.grad.data() + r * cols;
                T dot{0};
                for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
                for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - dot);
            }
        }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    if (x.rank() < 1) {
        throw DimensionError("log_softmax: scalar input");
    }
    check_finite(x.data(), "log_softmax");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    std::vector<T> out(x.numel());
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * cols;
        const T mx = *std::max_element(in, in + cols);
        T total{0};
        for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - mx);
        const T lse = mx + std::log(total);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lse;
    }
    auto xi = x.impl_ptr();
    return make_result<T>(x.shape(), std::move(out), {&x}, [xi, rows, cols](detail::TensorImpl<T>& self) {
        if (T* gx = grad_of(xi)) {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = self.data.data() + r * cols;
                const T* g = self.grad.data() + r * cols;
                T gsum{0};
                for (std::size_t c = 0; c < cols; ++c) gsum += g[c];
                for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[c] - std::exp(y[c]) * gsum;
            }
        }
    });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    require_rank(x.shape(), 2, "l2_normalize_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    constexpr T eps = std::numeric_limits<T>::min();
    std::vector<T> out(x.numel());
    std::vector<T> norms(rows);
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T sq{0};
        for (std::size_t c = 0; c < cols; ++c) sq += xv[r * cols + c] * xv[r * cols + c];
        norms[r] = std::max(std::sqrt(sq), eps);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] / norms[r];
    }
    auto xi = x.impl_ptr();
    return make_result<T>(x.shape(), std::move(out), {&x},
                          [xi, rows, cols, norms = std::move(norms)](detail::TensorImpl<T>& self) {
                              if (T* gx = grad_of(xi)) {
                                  for (std::size_t r = 0; r < rows; ++r) {
                                      const T* y = self.data.data() + r * cols;
                                      const T* g = self.grad.data() + r * cols;
                                      T dot{0};
                                      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
                                      for (std::size_t c = 0; c < cols; ++c) {
                                          gx[r * cols + c] += (g[c] - y[c] * dot) / norms[r];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, std::span<const std::size_t> targets) {
    require_rank(logits.shape(), 2, "cross_entropy_with_logits");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (targets.size() != rows) {
        throw DimensionError(fmt::format("cross_entropy_with_logits: {} targets for logits {}", targets.size(),
                                         shape_str(logits.shape())));
    }
    check_finite(logits.data(), "cross_entropy_with_logits");
    std::vector<T> probs(logits.numel());
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    const auto xv = logits.data();
    T total{0};
    for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] >= cols) {
            throw DimensionError(fmt::format("cross_entropy_with_logits: target {} with {} classes", tgt[r], cols));
        }
        const T* in = xv.data() + r * cols;
        const T mx = *std::max_element(in, in + cols);
        T z{0};
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
        const T lse = mx + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(in[c] - lse);
        total += lse - in[tgt[r]];
    }
    const T n = static_cast<T>(rows);
    auto li = logits.impl_ptr();
    return make_result<T>({}, {total / n}, {&logits},
                          [li, rows, cols, n, probs = std::move(probs), tgt = std::move(tgt)](detail::TensorImpl<T>& self) {
                              if (T* gl = grad_of(li)) {
                                  const T g = self.grad[0] / n;
                                  for (std::size_t r = 0; r < rows; ++r) {
                                      for (std::size_t c = 0; c < cols; ++c) {
                                          const T onehot = c == tgt[r] ? T{1} : T{0};
                                          gl[r * cols + c] += g * (probs[r * cols + c] - onehot);
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target) {
    require_same_shape(prediction, target, "mse");
    const auto pv = prediction.data();
    const auto tv = target.data();
    const T n = static_cast<T>(pv.size());
    T total{0};
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const T d = pv[i] - tv[i];
        total += d * d;
    }
    auto pi = prediction.impl_ptr();
    auto ti = target.impl_ptr();
    return make_result<T>({}, {total / n}, {&prediction, &target}, [pi, ti, n](detail::TensorImpl<T>& self) {
        const T g = self.grad[0] * T{2} / n;
        T* gp = grad_of(pi);
        T* gt = grad_of(ti);
        for (std::size_t i = 0; i < pi->data.size(); ++i) {
            const T d = pi->data[i] - ti->data[i];
            if (gp) gp[i] += g * d;
            if (gt) gt[i] -= g * d;
        }
    });
}

#define MOLA_INSTANTIATE_OPS(T)                                                                   \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);      \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> scale(const Tensor<T>&, T);                                                \
    template Tensor<T> relu(const Tensor<T>&);                                                    \
    template Tensor<T> add_rowwise(const Tensor<T>&, const Tensor<T>&);                           \
    template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> sum(const Tensor<T>&);                                                     \
    template Tensor<T> mean(const Tensor<T>&);                                                    \
    template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                   \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                \
    template Tensor<T> transpose(const Tensor<T>&);                                               \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                        \
    template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);               \
    template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t);                                 \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                         \
    template Tensor<T> softmax(const Tensor<T>&);                                                 \
    template Tensor<T> log_softmax(const Tensor<T>&);                                             \
    template Tensor<T> l2_normalize_rows(const Tensor<T>&);                                       \
    template Tensor<T> cross_entropy_with_logits(const Tensor<T>&, std::span<const std::size_t>); \
    template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);

MOLA_INSTANTIATE_OPS(float)
MOLA_INSTANTIATE_OPS(double)

#undef MOLA_INSTANTIATE_OPS

}  // namespace mola
