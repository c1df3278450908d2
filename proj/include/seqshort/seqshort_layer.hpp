#pragma once

// Learned-query multi-head attention that summarizes a bag of M instance
// vectors (M x d) into a fixed sequence of S rows (S x h):
//
//   X_S = Concat(head_1, ..., head_k) W_O + Q
//   head_i = softmax((Q W_Qi)(X W_Ki)^T / sqrt(h / k)) (X W_Vi)
//
// Q is an S x h learnable query table. Because the softmax runs over the bag
// axis, the output does not depend on instance order, and its cost is linear
// in M.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "seqshort/ops.hpp"
#include "seqshort/parameter.hpp"

namespace seqshort {

struct SeqShortConfig {
    std::size_t input_dim = 32;   // d
    std::size_t hidden_dim = 64;  // h
    std::size_t num_heads = 2;    // k
    std::size_t output_len = 8;   // S
    bool bias = false;

    std::size_t head_dim() const { return hidden_dim / num_heads; }

    void validate() const {
        if (input_dim == 0) throw ConfigError("seqshort: input_dim must be >= 1");
        if (hidden_dim == 0) throw ConfigError("seqshort: hidden_dim must be >= 1");
        if (output_len == 0) throw ConfigError("seqshort: output_len must be >= 1");
        if (num_heads == 0 || hidden_dim % num_heads != 0) {
            throw ConfigError("seqshort: hidden_dim " + std::to_string(hidden_dim) + " is not divisible by " +
                              std::to_string(num_heads) + " heads");
        }
    }

    friend bool operator==(const SeqShortConfig&, const SeqShortConfig&) = default;
};

/// Parameter layout of the layer, in construction order.
inline std::vector<ParameterSpec> seqshort_parameter_specs(const SeqShortConfig& cfg) {
    cfg.validate();
    const std::size_t h = cfg.hidden_dim, d = cfg.input_dim, dh = cfg.head_dim();
    std::vector<ParameterSpec> specs;
    specs.push_back({"seqshort.queries", {cfg.output_len, h}, ParamRole::seqshort});
    for (std::size_t i = 0; i < cfg.num_heads; ++i) {
        const std::string p = "seqshort.head" + std::to_string(i) + ".";
        specs.push_back({p + "w_q", {h, dh}, ParamRole::seqshort});
        specs.push_back({p + "w_k", {d, dh}, ParamRole::seqshort});
        specs.push_back({p + "w_v", {d, dh}, ParamRole::seqshort});
        if (cfg.bias) {
            specs.push_back({p + "b_q", {dh}, ParamRole::seqshort, Init::zeros});
            specs.push_back({p + "b_k", {dh}, ParamRole::seqshort, Init::zeros});
            specs.push_back({p + "b_v", {dh}, ParamRole::seqshort, Init::zeros});
        }
    }
    specs.push_back({"seqshort.w_o", {h, h}, ParamRole::seqshort});
    if (cfg.bias) specs.push_back({"seqshort.b_o", {h}, ParamRole::seqshort, Init::zeros});
    return specs;
}

/// S*h + h*h + 2*d*h + h*h, plus 4h bias entries when biases are enabled.
inline std::size_t seqshort_param_count(const SeqShortConfig& cfg) {
    cfg.validate();
    const std::size_t s = cfg.output_len, h = cfg.hidden_dim, d = cfg.input_dim;
    std::size_t total = s * h + h * h + 2 * d * h + h * h;
    if (cfg.bias) total += 4 * h;
    return total;
}

/// Per-head S x M softmax matrices of one forward pass.
template <class T>
struct SeqShortAttention {
    std::vector<Tensor<T>> per_head;

    std::size_t queries() const { return per_head.empty() ? 0 : per_head.front().rows(); }
    std::size_t instances() const { return per_head.empty() ? 0 : per_head.front().cols(); }

    /// Mean over heads, accumulated in double.
    Tensor<double> head_average() const {
        Tensor<double> avg = Tensor<double>::matrix(queries(), instances());
        for (const auto& a : per_head)
            for (std::size_t i = 0; i < a.size(); ++i) avg[i] += static_cast<double>(a[i]);
        const double k = static_cast<double>(per_head.size());
        for (auto& v : avg.values()) v /= k;
        return avg;
    }
};

template <class T>
class SeqShortLayer {
public:
    struct Output {
        Var<T> sequence;
        SeqShortAttention<T> attention;
    };

    SeqShortLayer(const SeqShortConfig& cfg, std::mt19937_64& rng) : config_(cfg) {
        for (auto& spec : seqshort_parameter_specs(cfg)) {
            Tensor<T> value = initialize<T>(spec, rng);
            params_.emplace_back(std::move(spec), std::move(value));
        }
    }

    const SeqShortConfig& config() const { return config_; }
    std::vector<Parameter<T>>& parameters() { return params_; }
    const std::vector<Parameter<T>>& parameters() const { return params_; }

    const Parameter<T>& queries() const { return params_.front(); }

    Output forward(const Var<T>& bag) const {
        const auto& x = bag.value();
        if (x.rows() == 0 || x.empty()) throw EmptyBagError("seqshort: bag has no instances");
        if (x.cols() != config_.input_dim) {
            throw DimensionError("seqshort: bag width " + std::to_string(x.cols()) + " does not match input_dim " +
                                 std::to_string(config_.input_dim) + " (bag shape " + shape_string(x.shape()) + ")");
        }
        const T scale_factor = static_cast<T>(1.0 / std::sqrt(static_cast<double>(config_.head_dim())));
        const Var<T>& q = queries().var();
        const std::size_t per_head = config_.bias ? 6 : 3;

        Output out;
        std::vector<Var<T>> heads;
        heads.reserve(config_.num_heads);
        for (std::size_t i = 0; i < config_.num_heads; ++i) {
            const Parameter<T>* p = &params_[1 + i * per_head];
            Var<T> qi = matmul(q, p[0].var());
            Var<T> ki = matmul(bag, p[1].var());
            Var<T> vi = matmul(bag, p[2].var());
            if (config_.bias) {
                qi = add_row(qi, p[3].var());
                ki = add_row(ki, p[4].var());
                vi = add_row(vi, p[5].var());
            }
            Var<T> weights = softmax_rows(scale(matmul(qi, transpose(ki)), scale_factor));
            out.attention.per_head.push_back(weights.value());
            heads.push_back(matmul(weights, vi));
        }
        const std::size_t wo = 1 + config_.num_heads * per_head;
        Var<T> mixed = matmul(concat_cols(heads), params_[wo].var());
        if (config_.bias) mixed = add_row(mixed, params_[wo + 1].var());
        out.sequence = add(mixed, q);
        return out;
    }

    Output forward(const Tensor<T>& bag) const { return forward(Var<T>::constant(bag)); }

private:
    SeqShortConfig config_;
    std::vector<Parameter<T>> params_;
};

}  // namespace seqshort
