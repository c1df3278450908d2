#pragma once

// Test-only helpers: random tensors, finite-difference gradient checks and
// the brute-force oracles the acceptance suite shares with the unit tests.
// Nothing here calls into the implementation paths it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "seqshort/seqshort.hpp"

namespace seqshort::testing {

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

struct GradCheck {
    double worst_relative_error = 0.0;
    std::size_t checked = 0;
};

/// Compares analytic gradients of a scalar loss with central differences.
/// `loss` rebuilds the graph from the current leaf values each call. The
/// error per leaf is ||analytic - numeric|| / max(||analytic||, ||numeric||).
/// A leaf whose analytic and numeric gradients both have norm below
/// `zero_norm` counts as agreeing (the key bias of a softmax, for instance,
/// has an identically zero gradient).
inline GradCheck gradcheck(const std::function<Var<double>()>& loss, const std::vector<Var<double>>& leaves,
                           double step = 1e-5, double zero_norm = 1e-8) {
    for (const auto& leaf : leaves) leaf.node()->grad = Tensor<double>();
    backward(loss());
    GradCheck out;
    for (const auto& leaf : leaves) {
        auto& value = leaf.node()->value;
        const Tensor<double> analytic =
            leaf.grad().empty() ? Tensor<double>(value.shape()) : leaf.grad();
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double saved = value[i];
            value[i] = saved + step;
            const double up = loss().value()[0];
            value[i] = saved - step;
            const double down = loss().value()[0];
            value[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
            a2 += analytic[i] * analytic[i];
            n2 += numeric * numeric;
        }
        const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
        if (denom >= zero_norm) out.worst_relative_error = std::max(out.worst_relative_error, std::sqrt(diff2) / denom);
        ++out.checked;
    }
    return out;
}

/// Reduces a tensor-valued output to a scalar with fixed random weights so
/// every output element contributes to the gradient.
inline Var<double> weighted_sum(const Var<double>& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum(mul(y, Var<double>::constant(random_tensor<double>(y.value().shape(), rng))));
}

// ---------------------------------------------------------------------------
// Oracles

/// SeqShort forward written as explicit scalar loops, one head and one query
/// at a time, straight from the defining formula.
template <class T>
Tensor<double> naive_seqshort(const SeqShortLayer<T>& layer, const Tensor<T>& x) {
    const auto& cfg = layer.config();
    const auto& params = layer.parameters();
    const std::size_t s = cfg.output_len, h = cfg.hidden_dim, d = cfg.input_dim, k = cfg.num_heads;
    const std::size_t dh = h / k, m = x.rows();
    const std::size_t per_head = cfg.bias ? 6 : 3;
    const auto& q = params[0].value();
    std::vector<double> concat(s * h, 0.0);
    for (std::size_t head = 0; head < k; ++head) {
        const auto& wq = params[1 + head * per_head].value();
        const auto& wk = params[2 + head * per_head].value();
        const auto& wv = params[3 + head * per_head].value();
        for (std::size_t row = 0; row < s; ++row) {
            std::vector<double> query(dh, 0.0);
            for (std::size_t c = 0; c < dh; ++c) {
                for (std::size_t t = 0; t < h; ++t) query[c] += double(q(row, t)) * double(wq(t, c));
                if (cfg.bias) query[c] += double(params[4 + head * per_head].value()[c]);
            }
            std::vector<double> logits(m, 0.0);
            std::vector<std::vector<double>> values(m, std::vector<double>(dh, 0.0));
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t c = 0; c < dh; ++c) {
                    double key = 0.0, val = 0.0;
                    for (std::size_t t = 0; t < d; ++t) {
                        key += double(x(i, t)) * double(wk(t, c));
                        val += double(x(i, t)) * double(wv(t, c));
                    }
                    if (cfg.bias) {
                        key += double(params[5 + head * per_head].value()[c]);
                        val += double(params[6 + head * per_head].value()[c]);
                    }
                    logits[i] += query[c] * key;
                    values[i][c] = val;
                }
                logits[i] /= std::sqrt(double(dh));
            }
            double peak = logits[0];
            for (double l : logits) peak = std::max(peak, l);
            double z = 0.0;
            for (double l : logits) z += std::exp(l - peak);
            for (std::size_t i = 0; i < m; ++i) {
                const double w = std::exp(logits[i] - peak) / z;
                for (std::size_t c = 0; c < dh; ++c) concat[row * h + head * dh + c] += w * values[i][c];
            }
        }
    }
    const auto& wo = params[1 + k * per_head].value();
    Tensor<double> out = Tensor<double>::matrix(s, h);
    for (std::size_t row = 0; row < s; ++row) {
        for (std::size_t c = 0; c < h; ++c) {
            double acc = double(q(row, c));
            for (std::size_t t = 0; t < h; ++t) acc += concat[row * h + t] * double(wo(t, c));
            if (cfg.bias) acc += double(params[2 + k * per_head].value()[c]);
            out(row, c) = acc;
        }
    }
    return out;
}

/// Rollout by materializing every step with explicit triple loops.
template <class T>
std::vector<std::vector<double>> naive_rollout(const AttentionTrace<T>& trace) {
    const std::size_t k = trace.seqshort_attn.per_head.size();
    const std::size_t s = trace.seqshort_attn.per_head[0].rows();
    const std::size_t m = trace.seqshort_attn.per_head[0].cols();
    const std::size_t n = s + 1;
    std::vector<std::vector<double>> rolled(n, std::vector<double>(m, 0.0));
    std::size_t src = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (r == trace.cls_index) continue;
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t head = 0; head < k; ++head) acc += double(trace.seqshort_attn.per_head[head](src, j));
            rolled[r][j] = acc / double(k);
        }
        ++src;
    }
    for (const auto& attn : trace.block_attn) {
        std::vector<std::vector<double>> a(n, std::vector<double>(n));
        for (std::size_t i = 0; i < n; ++i) {
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                a[i][j] = 0.5 * attn(i, j) + (i == j ? 0.5 : 0.0);
                z += a[i][j];
            }
            for (std::size_t j = 0; j < n; ++j) a[i][j] /= z;
        }
        std::vector<std::vector<double>> next(n, std::vector<double>(m, 0.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t t = 0; t < n; ++t) next[i][j] += a[i][t] * rolled[t][j];
        rolled = std::move(next);
    }
    return rolled;
}

/// AUROC by counting every positive/negative pair; ties count one half.
inline double brute_force_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 0) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            pairs += 1.0;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / pairs;
}

/// Permutes the rows of a bag.
template <class T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    Tensor<T> out = Tensor<T>::matrix(x.rows(), x.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) std::copy(x.row(perm[i]).begin(), x.row(perm[i]).end(), out.row(i).begin());
    return out;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    return perm;
}

/// Smallest all-trainable toy model used for end-to-end gradient checks.
inline ModelConfig gradcheck_model_config() {
    ModelConfig cfg;
    cfg.seqshort = {3, 16, 2, 4, false};
    cfg.encoder.num_layers = 2;
    cfg.encoder.num_heads = 2;
    cfg.encoder.hidden_dim = 16;
    cfg.encoder.ffn_dim = 32;
    cfg.encoder.num_classes = 2;
    cfg.encoder.seq_len = 4;
    return cfg;
}

/// Redraws every parameter from N(0, stddev^2). At the default 0.02 init the
/// attention is close to uniform and some gradients are ~1e-8, below what
/// central differences resolve; O(1) weights make every leaf measurable.
inline void randomize_parameters(ClassifierModel<double>& model, std::uint64_t seed, double stddev = 0.5) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto* p : model.parameters())
        for (auto& v : p->value().values()) v = dist(rng);
}

/// End-to-end finite-difference check of every parameter of a float64 model.
inline GradCheck model_gradcheck(ClassifierModel<double>& model, const Tensor<double>& bag, std::size_t label) {
    std::vector<Var<double>> leaves;
    for (auto* p : model.parameters()) {
        if (p->trainable()) leaves.push_back(p->var());
    }
    return gradcheck([&] { return cross_entropy(model.forward(bag).logits, label); }, leaves);
}

}  // namespace seqshort::testing
