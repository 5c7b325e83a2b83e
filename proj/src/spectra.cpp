// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/spectra.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mola/ops.hpp"

namespace mola {

SvdResult svd(std::span<const double> matrix, std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0 || matrix.size() != rows * cols) {
        throw DimensionError(fmt::format("svd: {} values for a {}×{} matrix", matrix.size(), rows, cols));
    }
    for (double x : matrix) {
        if (!std::isfinite(x)) throw NumericError("svd: matrix has non-finite entries");
    }
    // Work on the tall orientation, one column per vector.
    const bool flip = rows < cols;
    const std::size_t m = flip ? cols : rows, n = flip ? rows : cols;
    std::vector<std::vector<double>> a(n, std::vector<double>(m));
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const double x = matrix[i * cols + j];
            if (flip) a[i][j] = x;
            else a[j][i] = x;
        }
    }
    std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;

    constexpr double tol = 1e-15;
    for (int sweep = 0; sweep < 100; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                auto& ap = a[p];
                auto& aq = a[q];
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += ap[i] * ap[i];
                    beta += aq[i] * aq[i];
                    gamma += ap[i] * aq[i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = ap[i], y = aq[i];
                    ap[i] = c * x - s * y;
                    aq[i] = s * x + c * y;
                }
                auto& vp = v[p];
                auto& vq = v[q];
                for (std::size_t i = 0; i < n; ++i) {
                    const double x = vp[i], y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(std::inner_product(a[j].begin(), a[j].end(), a[j].begin(), 0.0));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SvdResult r;
    r.rows = rows;
    r.cols = cols;
    r.sigma.resize(n);
    // Left vectors of the tall problem (m×n) and right vectors (n×n).
    std::vector<double> left(m * n, 0.0), right(n * n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        r.sigma[k] = sigma[j];
        for (std::size_t i = 0; i < m; ++i) left[i * n + k] = sigma[j] > 0.0 ? a[j][i] / sigma[j] : 0.0;
        for (std::size_t i = 0; i < n; ++i) right[i * n + k] = v[j][i];
    }
    r.u = flip ? right : left;
    r.v = flip ? left : right;

    double err = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            double x = 0.0;
            for (std::size_t k = 0; k < n; ++k) x += r.u[i * n + k] * r.sigma[k] * r.v[j * n + k];
            const double w = matrix[i * cols + j];
            err += (x - w) * (x - w);
            norm += w * w;
        }
    }
    if (norm > 0.0 && std::sqrt(err / norm) >= 1e-6) {
        throw NumericError(fmt::format("svd: reconstruction error {:.3g} exceeds 1e-6", std::sqrt(err / norm)));
    }
    return r;
}

std::vector<double> svd_spectrum(std::span<const double> matrix, std::size_t rows, std::size_t cols) {
    return svd(matrix, rows, cols).sigma;
}

template <typename T>
std::vector<double> flatten_weight(const Tensor<T>& weight, std::size_t* rows, std::size_t* cols) {
    const auto w = weight.data();
    if (weight.rank() == 2) {
        *rows = weight.dim(0);
        *cols = weight.dim(1);
        return std::vector<double>(w.begin(), w.end());
    }
    if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
        throw DimensionError(fmt::format("cannot flatten weight {}", shape_str(weight.shape())));
    }
    const std::size_t co = weight.dim(0), ci = weight.dim(1), k = weight.dim(2);
    *rows = co * k;
    *cols = ci * k;
    std::vector<double> out(co * k * ci * k);
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx)
                    out[(o * k + ky) * (ci * k) + i * k + kx] = w[((o * ci + i) * k + ky) * k + kx];
    return out;
}

template <typename T>
std::vector<double> svd_spectrum(const Tensor<T>& weight) {
    std::size_t rows = 0, cols = 0;
    const auto flat = flatten_weight(weight, &rows, &cols);
    return svd_spectrum(flat, rows, cols);
}

template std::vector<double> flatten_weight(const Tensor<float>&, std::size_t*, std::size_t*);
template std::vector<double> flatten_weight(const Tensor<double>&, std::size_t*, std::size_t*);
template std::vector<double> svd_spectrum(const Tensor<float>&);
template std::vector<double> svd_spectrum(const Tensor<double>&);

PrincipalFraction principal_fraction(std::span<const double> sigmas, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0)) {
        throw ConfigError(fmt::format("principal fraction alpha must lie in (0, 1], got {}", alpha));
    }
    if (sigmas.empty()) throw InvariantError("principal_fraction needs a nonempty spectrum");
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
        if (!(sigmas[i] >= 0.0)) throw InvariantError("singular values must be nonnegative and finite");
        if (i > 0 && sigmas[i] > sigmas[i - 1]) throw InvariantError("singular values must be sorted descending");
    }
    if (sigmas.front() == 0.0) throw NumericError("principal_fraction: all singular values are zero");
    PrincipalFraction pf;
    const double cutoff = 1e-9 * sigmas.front();
    pf.R = static_cast<std::size_t>(std::count_if(sigmas.begin(), sigmas.end(), [&](double s) { return s > cutoff; }));
    const double total = std::accumulate(sigmas.begin(), sigmas.end(), 0.0);
    const double target = alpha * total * (1.0 - 1e-12);
    double acc = 0.0;
    pf.K = sigmas.size();
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
        acc += sigmas[i];
        if (acc >= target) {
            pf.K = i + 1;
            break;
        }
    }
    pf.K = std::min(pf.K, pf.R);
    pf.ratio = static_cast<double>(pf.K) / static_cast<double>(pf.R);
    return pf;
}

namespace {

double quantile(const std::vector<double>& ascending, double q) {
    const double pos = q * static_cast<double>(ascending.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, ascending.size() - 1);
    return ascending[lo] + (pos - static_cast<double>(lo)) * (ascending[hi] - ascending[lo]);
}

Tensor<float> merged(const MoLAConv<float>& conv, std::size_t i) {
    return add(conv.backbone_weight(), conv.adapter_delta(i));
}

}  // namespace

SpectralReport spectral_report(const std::string& layer, const std::string& variant, std::vector<double> sigmas,
                               double alpha) {
    SpectralReport r;
    r.layer = layer;
    r.variant = variant;
    r.fraction = principal_fraction(sigmas, alpha);
    std::vector<double> asc(sigmas.rbegin(), sigmas.rend());
    r.min_sigma = asc.front();
    r.max_sigma = asc.back();
    r.q1 = quantile(asc, 0.25);
    r.median = quantile(asc, 0.5);
    r.q3 = quantile(asc, 0.75);
    r.sigmas = std::move(sigmas);
    return r;
}

std::vector<SpectralReport> compare_variants(const std::string& layer, const MoLAConv<float>& conv, double alpha,
                                             const MoLAConv<float>* high_rank) {
    NoGradGuard guard;
    std::vector<SpectralReport> out;
    out.push_back(spectral_report(layer, "W0", svd_spectrum(conv.backbone_weight()), alpha));
    for (std::size_t i = 0; i < conv.experts(); ++i) {
        out.push_back(spectral_report(layer, fmt::format("W0+dW{}", i), svd_spectrum(merged(conv, i)), alpha));
    }
    if (high_rank) {
        for (std::size_t i = 0; i < high_rank->experts(); ++i) {
            out.push_back(spectral_report(layer, fmt::format("W0+dW{}@r{}", i, high_rank->rank()),
                                          svd_spectrum(merged(*high_rank, i)), alpha));
        }
    }
    return out;
}

std::vector<SpectralReport> analyze_model(const Model<float>& model, double alpha) {
    std::vector<SpectralReport> out;
    for (const auto& layer : model.conv_layers()) {
        for (auto& r : compare_variants(layer.name, *layer.conv, alpha)) out.push_back(std::move(r));
    }
    return out;
}

std::vector<std::pair<std::string, double>> merged_kr_by_layer(const std::vector<SpectralReport>& reports) {
    std::vector<std::pair<std::string, double>> out;
    std::vector<std::pair<double, std::size_t>> merged_sum;
    std::vector<double> base;
    for (const auto& r : reports) {
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == r.layer; });
        std::size_t idx;
        if (it == out.end()) {
            out.emplace_back(r.layer, 0.0);
            merged_sum.emplace_back(0.0, 0);
            base.push_back(0.0);
            idx = out.size() - 1;
        } else {
            idx = static_cast<std::size_t>(it - out.begin());
        }
        if (r.variant == "W0") {
            base[idx] = r.fraction.ratio;
        } else if (r.variant.rfind("W0+dW", 0) == 0 && r.variant.find('@') == std::string::npos) {
            merged_sum[idx].first += r.fraction.ratio;
            ++merged_sum[idx].second;
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].second = merged_sum[i].second ? merged_sum[i].first / static_cast<double>(merged_sum[i].second) : base[i];
    }
    return out;
}

std::string spectra_csv(const std::vector<SpectralReport>& reports) {
    std::string out = "layer,variant,index,sigma\n";
    for (const auto& r : reports) {
        for (std::size_t i = 0; i < r.sigmas.size(); ++i) {
            out += fmt::format("{},{},{},{:.17g}\n", r.layer, r.variant, i, r.sigmas[i]);
        }
    }
    return out;
}

std::string kr_csv(const std::vector<SpectralReport>& reports) {
    std::string out = "layer,variant,K,R,ratio\n";
    for (const auto& r : reports) {
        out += fmt::format("{},{},{},{},{:.17g}\n", r.layer, r.variant, r.fraction.K, r.fraction.R, r.fraction.ratio);
    }
    return out;
}

std::string boxplot_csv(const std::vector<SpectralReport>& reports) {
    std::string out = "layer,variant,min,q1,median,q3,max\n";
    for (const auto& r : reports) {
        out += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.layer, r.variant, r.min_sigma, r.q1,
                           r.median, r.q3, r.max_sigma);
    }
    return out;
}

}  // namespace mola
