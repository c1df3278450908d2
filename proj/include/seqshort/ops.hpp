#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "seqshort/autodiff.hpp"
#include "seqshort/tensor.hpp"

namespace seqshort {

/// Counts matmul FLOPs (multiply-add = 2) issued by forward passes on this
/// thread while a ScopedFlopCounter is alive.
class FlopCounter {
public:
    static std::uint64_t& count() {
        thread_local std::uint64_t value = 0;
        return value;
    }
    static bool& active() {
        thread_local bool value = false;
        return value;
    }
};

class ScopedFlopCounter {
public:
    ScopedFlopCounter() : was_active_(FlopCounter::active()), saved_(FlopCounter::count()) {
        FlopCounter::active() = true;
        FlopCounter::count() = 0;
    }
    ~ScopedFlopCounter() {
        FlopCounter::active() = was_active_;
        FlopCounter::count() = saved_;
    }
    ScopedFlopCounter(const ScopedFlopCounter&) = delete;
    ScopedFlopCounter& operator=(const ScopedFlopCounter&) = delete;

    std::uint64_t flops() const { return FlopCounter::count(); }

private:
    bool was_active_;
    std::uint64_t saved_;
};

namespace kernels {

// All reductions accumulate in double in ascending index order, which fixes
// the summation order and keeps float32 runs bit-reproducible.

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> c = Tensor<T>::matrix(m, n);
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t t = 0; t < k; ++t) {
            const double av = a(i, t);
            const auto brow = b.row(t);
            for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        for (std::size_t j = 0; j < n; ++j) c(i, j) = static_cast<T>(acc[j]);
    }
    return c;
}

// a (m x k) times b^T where b is (n x k).
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor<T> c = Tensor<T>::matrix(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        const auto arow = a.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const auto brow = b.row(j);
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += static_cast<double>(arow[t]) * static_cast<double>(brow[t]);
            c(i, j) = static_cast<T>(acc);
        }
    }
    return c;
}

// a^T times b where a is (k x m) and b is (k x n).
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    std::vector<double> acc(m * n, 0.0);
    for (std::size_t t = 0; t < k; ++t) {
        const auto arow = a.row(t);
        const auto brow = b.row(t);
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* out = acc.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) out[j] += av * static_cast<double>(brow[j]);
        }
    }
    std::vector<T> data(acc.begin(), acc.end());
    return Tensor<T>::matrix(m, n, std::move(data));
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::matrix(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::matrix(x.rows(), x.cols());
    std::vector<double> e(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto row = x.row(i);
        const double peak = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            e[j] = std::exp(static_cast<double>(row[j]) - peak);
            total += e[j];
        }
        for (std::size_t j = 0; j < row.size(); ++j) y(i, j) = static_cast<T>(e[j] / total);
    }
    return y;
}

inline constexpr double kInvSqrt2 = 1.0 / std::numbers::sqrt2;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi * kInvSqrt2;
    return cdf + x * pdf;
}

}  // namespace kernels

namespace detail {

inline void require(bool ok, const std::string& op, const Shape& a, const Shape& b) {
    if (!ok) throw DimensionError(op + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::require(av.cols() == bv.rows(), "matmul", av.shape(), bv.shape());
    if (FlopCounter::active()) FlopCounter::count() += 2ull * av.rows() * av.cols() * bv.cols();
    return detail::make_node<T>(kernels::matmul(av, bv), {a, b}, [a, b](const Tensor<T>& g) {
        if (a.requires_grad()) a.node()->accumulate(kernels::matmul_nt(g, b.value()));
        if (b.requires_grad()) b.node()->accumulate(kernels::matmul_tn(a.value(), g));
    });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
    return detail::make_node<T>(kernels::transpose(a.value()), {a},
                                [a](const Tensor<T>& g) { a.node()->accumulate(kernels::transpose(g)); });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require(a.value().shape() == b.value().shape(), "add", a.value().shape(), b.value().shape());
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return detail::make_node<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        if (a.requires_grad()) a.node()->accumulate(g);
        if (b.requires_grad()) b.node()->accumulate(g);
    });
}

/// Adds a 1 x n (or rank-1 n) row to every row of an m x n matrix.
template <class T>
Var<T> add_row(const Var<T>& x, const Var<T>& row) {
    const auto& xv = x.value();
    const auto& rv = row.value();
    detail::require(rv.rows() == 1 && rv.cols() == xv.cols(), "add_row", xv.shape(), rv.shape());
    Tensor<T> out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
    return detail::make_node<T>(std::move(out), {x, row}, [x, row](const Tensor<T>& g) {
        if (x.requires_grad()) x.node()->accumulate(g);
        if (row.requires_grad()) {
            std::vector<double> acc(g.cols(), 0.0);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) acc[j] += g(i, j);
            Tensor<T> rg(row.value().shape());
            for (std::size_t j = 0; j < acc.size(); ++j) rg[j] = static_cast<T>(acc[j]);
            row.node()->accumulate(rg);
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= factor;
    return detail::make_node<T>(std::move(out), {a}, [a, factor](const Tensor<T>& g) {
        Tensor<T> ga = g;
        for (auto& v : ga.values()) v *= factor;
        a.node()->accumulate(ga);
    });
}

/// Elementwise product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require(a.value().shape() == b.value().shape(), "mul", a.value().shape(), b.value().shape());
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return detail::make_node<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        if (a.requires_grad()) {
            Tensor<T> ga = g;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
            a.node()->accumulate(ga);
        }
        if (b.requires_grad()) {
            Tensor<T> gb = g;
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
            b.node()->accumulate(gb);
        }
    });
}

/// Sum of all elements as a 1 x 1 tensor.
template <class T>
Var<T> sum(const Var<T>& a) {
    double total = 0.0;
    for (const T v : a.value().values()) total += v;
    return detail::make_node<T>(Tensor<T>::matrix(1, 1, static_cast<T>(total)), {a}, [a](const Tensor<T>& g) {
        a.node()->accumulate(Tensor<T>(a.value().shape(), g[0]));
    });
}

template <class T>
Var<T> softmax_rows(const Var<T>& x) {
    Tensor<T> y = kernels::softmax_rows(x.value());
    return detail::make_node<T>(y, {x}, [x, y](const Tensor<T>& g) {
        Tensor<T> gx(y.shape());
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) dot += static_cast<double>(g(i, j)) * y(i, j);
            for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) = static_cast<T>(y(i, j) * (g(i, j) - dot));
        }
        x.node()->accumulate(gx);
    });
}

/// Row-wise layer normalization with population variance.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    detail::require(gamma.value().size() == n, "layer_norm", xv.shape(), gamma.value().shape());
    detail::require(beta.value().size() == n, "layer_norm", xv.shape(), beta.value().shape());
    Tensor<T> normalized = Tensor<T>::matrix(m, n);
    std::vector<double> inv_std(m);
    Tensor<T> out = Tensor<T>::matrix(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        const auto row = xv.row(i);
        double mean = 0.0;
        for (const T v : row) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (const T v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double xhat = (row[j] - mean) * inv_std[i];
            normalized(i, j) = static_cast<T>(xhat);
            out(i, j) = static_cast<T>(xhat * gamma.value()[j] + beta.value()[j]);
        }
    }
    return detail::make_node<T>(std::move(out), {x, gamma, beta},
                                [x, gamma, beta, normalized, inv_std](const Tensor<T>& g) {
        const std::size_t m = g.rows(), n = g.cols();
        if (gamma.requires_grad() || beta.requires_grad()) {
            std::vector<double> dgamma(n, 0.0), dbeta(n, 0.0);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    dgamma[j] += static_cast<double>(g(i, j)) * normalized(i, j);
                    dbeta[j] += g(i, j);
                }
            }
            if (gamma.requires_grad()) {
                Tensor<T> t(gamma.value().shape());
                for (std::size_t j = 0; j < n; ++j) t[j] = static_cast<T>(dgamma[j]);
                gamma.node()->accumulate(t);
            }
            if (beta.requires_grad()) {
                Tensor<T> t(beta.value().shape());
                for (std::size_t j = 0; j < n; ++j) t[j] = static_cast<T>(dbeta[j]);
                beta.node()->accumulate(t);
            }
        }
        if (x.requires_grad()) {
            Tensor<T> gx = Tensor<T>::matrix(m, n);
            std::vector<double> dxhat(n);
            for (std::size_t i = 0; i < m; ++i) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dxhat[j] = static_cast<double>(g(i, j)) * gamma.value()[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * normalized(i, j);
                }
                mean_d /= static_cast<double>(n);
                mean_dx /= static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    gx(i, j) = static_cast<T>(inv_std[i] * (dxhat[j] - mean_d - normalized(i, j) * mean_dx));
                }
            }
            x.node()->accumulate(gx);
        }
    });
}

/// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.values()) v = static_cast<T>(kernels::gelu(v));
    return detail::make_node<T>(std::move(out), {x}, [x](const Tensor<T>& g) {
        Tensor<T> gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= static_cast<T>(kernels::gelu_derivative(x.value()[i]));
        x.node()->accumulate(gx);
    });
}

/// Stacks `top` above `bottom`.
template <class T>
Var<T> concat_rows(const Var<T>& top, const Var<T>& bottom) {
    const auto& a = top.value();
    const auto& b = bottom.value();
    detail::require(a.cols() == b.cols(), "concat_rows", a.shape(), b.shape());
    std::vector<T> data(a.values().begin(), a.values().end());
    data.insert(data.end(), b.values().begin(), b.values().end());
    const std::size_t top_rows = a.rows();
    return detail::make_node<T>(Tensor<T>::matrix(a.rows() + b.rows(), a.cols(), std::move(data)), {top, bottom},
                                [top, bottom, top_rows](const Tensor<T>& g) {
        const std::size_t n = g.cols();
        if (top.requires_grad()) {
            std::vector<T> d(g.values().begin(), g.values().begin() + top_rows * n);
            top.node()->accumulate(Tensor<T>(top.value().shape(), std::move(d)));
        }
        if (bottom.requires_grad()) {
            std::vector<T> d(g.values().begin() + top_rows * n, g.values().end());
            bottom.node()->accumulate(Tensor<T>(bottom.value().shape(), std::move(d)));
        }
    });
}

/// Places the blocks side by side (m x sum of widths).
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts.front().value().rows();
    std::size_t width = 0;
    for (const auto& p : parts) {
        detail::require(p.value().rows() == m, "concat_cols", parts.front().value().shape(), p.value().shape());
        width += p.value().cols();
    }
    Tensor<T> out = Tensor<T>::matrix(m, width);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p.value().cols(); ++j) out(i, offset + j) = p.value()(i, j);
        offset += p.value().cols();
    }
    return detail::make_node<T>(std::move(out), parts, [parts](const Tensor<T>& g) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
            const std::size_t w = p.value().cols();
            if (p.requires_grad()) {
                Tensor<T> gp = Tensor<T>::matrix(g.rows(), w);
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < w; ++j) gp(i, j) = g(i, offset + j);
                p.node()->accumulate(gp);
            }
            offset += w;
        }
    });
}

template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t count) {
    const auto& xv = x.value();
    if (count == 0 || begin + count > xv.cols()) {
        throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") out of range for " + shape_string(xv.shape()));
    }
    Tensor<T> out = Tensor<T>::matrix(xv.rows(), count);
    for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, begin + j);
    return detail::make_node<T>(std::move(out), {x}, [x, begin, count](const Tensor<T>& g) {
        Tensor<T> gx = Tensor<T>::matrix(x.value().rows(), x.value().cols());
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < count; ++j) gx(i, begin + j) = g(i, j);
        x.node()->accumulate(gx);
    });
}

/// Row gather: out[i] = table[indices[i]]. Repeated indices accumulate.
template <class T>
Var<T> embedding_lookup(const Var<T>& table, const std::vector<std::size_t>& indices) {
    const auto& tv = table.value();
    if (indices.empty()) throw DimensionError("embedding_lookup: no indices");
    Tensor<T> out = Tensor<T>::matrix(indices.size(), tv.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= tv.rows()) {
            throw IndexError("embedding_lookup: row " + std::to_string(indices[i]) + " out of range for " +
                             shape_string(tv.shape()));
        }
        const auto src = tv.row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return detail::make_node<T>(std::move(out), {table}, [table, indices](const Tensor<T>& g) {
        Tensor<T> gt = Tensor<T>::matrix(table.value().rows(), table.value().cols());
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gt(indices[i], j) += g(i, j);
        table.node()->accumulate(gt);
    });
}

template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t count) {
    if (count == 0 || begin + count > x.value().rows()) {
        throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") out of range for " + shape_string(x.value().shape()));
    }
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
    return embedding_lookup(x, idx);
}

/// -log softmax(logits)[label] as a 1 x 1 tensor. `logits` is a single row.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::size_t label) {
    const auto& lv = logits.value();
    if (lv.rows() != 1) throw DimensionError("cross_entropy: expected a single row of logits, got " + shape_string(lv.shape()));
    if (label >= lv.cols()) {
        throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(lv.cols()) + " classes");
    }
    const Tensor<T> probs = kernels::softmax_rows(Tensor<T>::matrix(1, lv.cols(), lv.storage()));
    const double peak = *std::max_element(lv.values().begin(), lv.values().end());
    double total = 0.0;
    for (const T v : lv.values()) total += std::exp(static_cast<double>(v) - peak);
    const double loss = std::log(total) + peak - static_cast<double>(lv[label]);
    return detail::make_node<T>(Tensor<T>::matrix(1, 1, static_cast<T>(loss)), {logits},
                                [logits, probs, label](const Tensor<T>& g) {
        Tensor<T> gl(logits.value().shape());
        for (std::size_t j = 0; j < gl.size(); ++j) {
            const double target = j == label ? 1.0 : 0.0;
            gl[j] = static_cast<T>(g[0] * (probs[j] - target));
        }
        logits.node()->accumulate(gl);
    });
}

}  // namespace seqshort
