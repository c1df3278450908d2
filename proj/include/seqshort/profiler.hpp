#pragma once

// Analytic matmul FLOPs (multiply-add = 2) for the SeqShort classifier and a
// full-length transformer baseline, plus wall-clock timing of forward passes.
// Softmax, layer norm, GELU and bias additions are not counted.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <random>
#include <vector>

#include "seqshort/encoder.hpp"

namespace seqshort {

struct FlopsBreakdown {
    std::uint64_t seqshort_flops = 0;
    std::uint64_t encoder_flops = 0;
    std::uint64_t head_flops = 0;
    std::uint64_t total = 0;
    std::size_t m = 0, s = 0, h = 0, d = 0, k = 0, layers = 0;
};

/// One encoder block over n rows: QKVO projections, attention scores and
/// weighted sums, and the two FFN matmuls.
inline std::uint64_t block_flops(const EncoderConfig& enc, std::uint64_t n) {
    const std::uint64_t h = enc.hidden_dim, f = enc.ffn_dim;
    return 8 * n * h * h + 4 * n * n * h + 4 * n * h * f;
}

inline std::uint64_t head_flops(const EncoderConfig& enc) {
    const std::uint64_t h = enc.hidden_dim, c = enc.num_classes;
    return (enc.head_hidden_layer ? 2 * h * h : 0) + 2 * h * c;
}

/// M-independent part of the SeqShort cost (query and output projections).
inline std::uint64_t seqshort_fixed_flops(const SeqShortConfig& cfg) {
    const std::uint64_t s = cfg.output_len, h = cfg.hidden_dim;
    return 2 * s * h * h + 2 * s * h * h;
}

/// Per-instance SeqShort cost: K and V projections plus scores and weighted
/// sums across all heads.
inline std::uint64_t seqshort_flops_per_instance(const SeqShortConfig& cfg) {
    const std::uint64_t s = cfg.output_len, h = cfg.hidden_dim, d = cfg.input_dim;
    return 4 * d * h + 4 * s * h;
}

inline FlopsBreakdown flops_forward(const ModelConfig& cfg, std::size_t m) {
    cfg.validate();
    if (m == 0) throw EmptyBagError("flops_forward: M must be >= 1");
    FlopsBreakdown out;
    out.m = m;
    out.s = cfg.seqshort.output_len;
    out.h = cfg.seqshort.hidden_dim;
    out.d = cfg.seqshort.input_dim;
    out.k = cfg.seqshort.num_heads;
    out.layers = cfg.encoder.num_layers;
    out.seqshort_flops = seqshort_fixed_flops(cfg.seqshort) + m * seqshort_flops_per_instance(cfg.seqshort);
    out.encoder_flops = cfg.encoder.num_layers * block_flops(cfg.encoder, cfg.encoder.seq_len + 1);
    out.head_flops = head_flops(cfg.encoder);
    out.total = out.seqshort_flops + out.encoder_flops + out.head_flops;
    return out;
}

/// The same encoder fed all M instances (after a d -> h projection) plus
/// [CLS]: L blocks over n = M + 1 rows and 2*M*d*h for the projection.
inline std::uint64_t flops_full_attention_baseline(const ModelConfig& cfg, std::size_t m) {
    cfg.validate();
    if (m == 0) throw EmptyBagError("flops_full_attention_baseline: M must be >= 1");
    const std::uint64_t projection = 2ull * m * cfg.seqshort.input_dim * cfg.encoder.hidden_dim;
    return cfg.encoder.num_layers * block_flops(cfg.encoder, m + 1) + projection;
}

struct TimingStats {
    std::vector<double> samples_ms;
    double median_ms = 0.0;
    double q1_ms = 0.0;
    double q3_ms = 0.0;
    double iqr_ms = 0.0;
};

/// Linear-interpolated quantile of sorted data.
inline double quantile(std::vector<double> values, double q) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Median/IQR forward latency on a random N(0,1) bag of size M. One warmup
/// pass precedes the timed repeats.
template <class T>
TimingStats timeit_forward(const ClassifierModel<T>& model, std::size_t m, std::size_t repeats,
                           std::uint64_t seed = 0) {
    if (repeats < 3) throw ConfigError("timeit_forward: repeats must be >= 3");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor<T> bag = Tensor<T>::matrix(m, model.config().seqshort.input_dim);
    for (auto& v : bag.values()) v = static_cast<T>(dist(rng));
    (void)model.forward(bag);
    TimingStats stats;
    for (std::size_t r = 0; r < repeats; ++r) {
        const auto start = std::chrono::steady_clock::now();
        const auto result = model.forward(bag);
        const auto stop = std::chrono::steady_clock::now();
        (void)result;
        stats.samples_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
    stats.median_ms = quantile(stats.samples_ms, 0.5);
    stats.q1_ms = quantile(stats.samples_ms, 0.25);
    stats.q3_ms = quantile(stats.samples_ms, 0.75);
    stats.iqr_ms = stats.q3_ms - stats.q1_ms;
    return stats;
}

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
};

inline LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    LinearFit fit;
    const double denom = n * sxx - sx * sx;
    if (denom == 0.0) return fit;
    fit.slope = (n * sxy - sx * sy) / denom;
    fit.intercept = (sy - fit.slope * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double mean = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double pred = fit.intercept + fit.slope * x[i];
        ss_res += (y[i] - pred) * (y[i] - pred);
        ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    fit.r_squared = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
    return fit;
}

}  // namespace seqshort
