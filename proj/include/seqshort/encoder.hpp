#pragma once

// Transformer classifier on top of the SeqShort layer: a [CLS] row joins the
// S summary rows, optional learned positional embeddings are added, L
// post-norm encoder blocks run over the S+1 rows, and the final [CLS] state
// feeds an MLP head.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "seqshort/ops.hpp"
#include "seqshort/parameter.hpp"
#include "seqshort/seqshort_layer.hpp"

namespace seqshort {

struct EncoderConfig {
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;
    std::size_t hidden_dim = 64;
    std::size_t ffn_dim = 256;
    std::size_t num_classes = 2;
    std::size_t seq_len = 8;  // S, the SeqShort output length
    bool use_positional_embeddings = true;
    bool head_hidden_layer = false;
    bool cls_first = true;
    FreezePolicy freeze_policy = FreezePolicy::none;
    double layer_norm_eps = 1e-5;

    std::size_t head_dim() const { return hidden_dim / num_heads; }
    std::size_t cls_index() const { return cls_first ? 0 : seq_len; }

    void validate() const {
        if (num_heads == 0 || hidden_dim == 0 || hidden_dim % num_heads != 0) {
            throw ConfigError("encoder: hidden_dim " + std::to_string(hidden_dim) + " is not divisible by " +
                              std::to_string(num_heads) + " heads");
        }
        if (ffn_dim == 0) throw ConfigError("encoder: ffn_dim must be >= 1");
        if (num_classes < 2) throw ConfigError("encoder: num_classes must be >= 2");
        if (seq_len == 0) throw ConfigError("encoder: seq_len must be >= 1");
    }

    /// 12 layers, 12 heads, 768 hidden units: the BERT-base geometry.
    static EncoderConfig base_scale(std::size_t seq_len, std::size_t num_classes) {
        EncoderConfig cfg;
        cfg.num_layers = 12;
        cfg.num_heads = 12;
        cfg.hidden_dim = 768;
        cfg.ffn_dim = 3072;
        cfg.num_classes = num_classes;
        cfg.seq_len = seq_len;
        cfg.freeze_policy = FreezePolicy::frozen_except_layernorm;
        return cfg;
    }

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ModelConfig {
    SeqShortConfig seqshort;
    EncoderConfig encoder;

    void validate() const {
        seqshort.validate();
        encoder.validate();
        if (seqshort.hidden_dim != encoder.hidden_dim) {
            throw ConfigError("model: seqshort hidden_dim " + std::to_string(seqshort.hidden_dim) +
                              " differs from encoder hidden_dim " + std::to_string(encoder.hidden_dim));
        }
        if (seqshort.output_len != encoder.seq_len) {
            throw ConfigError("model: seqshort output_len " + std::to_string(seqshort.output_len) +
                              " differs from encoder seq_len " + std::to_string(encoder.seq_len));
        }
    }

    /// Desk-scale default: d=32, h=64, k=2, S=8, L=2 with 4 heads.
    static ModelConfig toy(std::size_t input_dim = 32, std::size_t num_classes = 2) {
        ModelConfig cfg;
        cfg.seqshort = {input_dim, 64, 2, 8, false};
        cfg.encoder.num_layers = 2;
        cfg.encoder.num_heads = 4;
        cfg.encoder.hidden_dim = 64;
        cfg.encoder.ffn_dim = 256;
        cfg.encoder.num_classes = num_classes;
        cfg.encoder.seq_len = 8;
        return cfg;
    }

    /// h=768, k=4 SeqShort feeding a frozen BERT-base sized encoder.
    static ModelConfig full_pipeline(std::size_t input_dim = 1280, std::size_t seq_len = 256,
                                      std::size_t num_classes = 2) {
        ModelConfig cfg;
        cfg.seqshort = {input_dim, 768, 4, seq_len, false};
        cfg.encoder = EncoderConfig::base_scale(seq_len, num_classes);
        return cfg;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Full parameter layout of a classifier, in construction order.
inline std::vector<ParameterSpec> model_parameter_specs(const ModelConfig& cfg) {
    cfg.validate();
    const auto& enc = cfg.encoder;
    const std::size_t h = enc.hidden_dim;
    std::vector<ParameterSpec> specs = seqshort_parameter_specs(cfg.seqshort);
    specs.push_back({"cls_token", {1, h}, ParamRole::cls_token});
    if (enc.use_positional_embeddings) specs.push_back({"pos_embeddings", {enc.seq_len + 1, h}, ParamRole::positional});
    for (std::size_t l = 0; l < enc.num_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        for (const char* proj : {"q", "k", "v", "o"}) {
            specs.push_back({p + "attn.w_" + proj, {h, h}, ParamRole::attention});
            specs.push_back({p + "attn.b_" + proj, {h}, ParamRole::attention, Init::zeros});
        }
        specs.push_back({p + "ln1.gamma", {h}, ParamRole::layer_norm, Init::ones});
        specs.push_back({p + "ln1.beta", {h}, ParamRole::layer_norm, Init::zeros});
        specs.push_back({p + "ffn.w1", {h, enc.ffn_dim}, ParamRole::feed_forward});
        specs.push_back({p + "ffn.b1", {enc.ffn_dim}, ParamRole::feed_forward, Init::zeros});
        specs.push_back({p + "ffn.w2", {enc.ffn_dim, h}, ParamRole::feed_forward});
        specs.push_back({p + "ffn.b2", {h}, ParamRole::feed_forward, Init::zeros});
        specs.push_back({p + "ln2.gamma", {h}, ParamRole::layer_norm, Init::ones});
        specs.push_back({p + "ln2.beta", {h}, ParamRole::layer_norm, Init::zeros});
    }
    if (enc.head_hidden_layer) {
        specs.push_back({"head.w_hidden", {h, h}, ParamRole::head});
        specs.push_back({"head.b_hidden", {h}, ParamRole::head, Init::zeros});
    }
    specs.push_back({"head.w_out", {h, enc.num_classes}, ParamRole::head});
    specs.push_back({"head.b_out", {enc.num_classes}, ParamRole::head, Init::zeros});
    return specs;
}

/// Counts parameter entries of a layout, optionally only those a policy
/// leaves trainable. Works without allocating the model.
inline std::size_t count_parameters(const std::vector<ParameterSpec>& specs, FreezePolicy policy,
                                    bool only_trainable) {
    std::size_t total = 0;
    for (const auto& s : specs) {
        if (!only_trainable || is_trainable(s.role, policy)) total += s.size();
    }
    return total;
}

/// Counts only the encoder-block parameters (attention, FFN, block layer norms).
inline std::size_t count_block_parameters(const std::vector<ParameterSpec>& specs, FreezePolicy policy,
                                          bool only_trainable) {
    std::size_t total = 0;
    for (const auto& s : specs) {
        const bool in_block =
            s.role == ParamRole::attention || s.role == ParamRole::feed_forward || s.role == ParamRole::layer_norm;
        if (in_block && (!only_trainable || is_trainable(s.role, policy))) total += s.size();
    }
    return total;
}

/// All attention matrices of one forward pass. Block matrices are
/// head-averaged, (S+1) x (S+1), and row-stochastic.
template <class T>
struct AttentionTrace {
    SeqShortAttention<T> seqshort_attn;
    std::vector<Tensor<double>> block_attn;
    std::size_t cls_index = 0;
};

template <class T>
struct ForwardResult {
    Var<T> logits;  // 1 x C
    AttentionTrace<T> trace;
};

template <class T>
class ClassifierModel {
public:
    ClassifierModel(const ModelConfig& cfg, std::uint64_t seed) : ClassifierModel(cfg, seeded(seed)) {}

    // Parameters share graph leaves, so a copy would alias the original.
    ClassifierModel(const ClassifierModel&) = delete;
    ClassifierModel& operator=(const ClassifierModel&) = delete;
    ClassifierModel(ClassifierModel&&) noexcept = default;
    ClassifierModel& operator=(ClassifierModel&&) noexcept = default;

    const ModelConfig& config() const { return config_; }
    const SeqShortLayer<T>& seqshort() const { return seqshort_; }

    /// Every parameter: SeqShort first, then the rest in layout order.
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& p : seqshort_.parameters()) out.push_back(&p);
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    std::vector<const Parameter<T>*> parameters() const {
        std::vector<const Parameter<T>*> out;
        for (const auto& p : seqshort_.parameters()) out.push_back(&p);
        for (const auto& p : params_) out.push_back(&p);
        return out;
    }

    Parameter<T>& parameter(const std::string& name) {
        for (auto* p : parameters()) {
            if (p->name() == name) return *p;
        }
        throw IndexError("no parameter named '" + name + "'");
    }

    const Parameter<T>& parameter(const std::string& name) const {
        return const_cast<ClassifierModel*>(this)->parameter(name);
    }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

    ForwardResult<T> forward(const Tensor<T>& bag) const { return forward(Var<T>::constant(bag)); }

    ForwardResult<T> forward(const Var<T>& bag) const {
        auto summary = seqshort_.forward(bag);
        ForwardResult<T> out = forward_sequence(summary.sequence);
        out.trace.seqshort_attn = std::move(summary.attention);
        return out;
    }

    /// Runs everything downstream of SeqShort on an injected S x h sequence.
    ForwardResult<T> forward_sequence(const Var<T>& summary) const {
        const auto& enc = config_.encoder;
        if (summary.value().rows() != enc.seq_len || summary.value().cols() != enc.hidden_dim) {
            throw DimensionError("encoder: expected a " + std::to_string(enc.seq_len) + "x" +
                                 std::to_string(enc.hidden_dim) + " sequence, got " +
                                 shape_string(summary.value().shape()));
        }
        ForwardResult<T> out;
        out.trace.cls_index = enc.cls_index();
        const Var<T>& cls = param(cls_slot_).var();
        Var<T> x = enc.cls_first ? concat_rows(cls, summary) : concat_rows(summary, cls);
        if (enc.use_positional_embeddings) x = add(x, param(pos_slot_).var());
        for (std::size_t l = 0; l < enc.num_layers; ++l) {
            x = block_forward(l, x, out.trace.block_attn);
        }
        Var<T> state = slice_rows(x, enc.cls_index(), 1);
        std::size_t slot = head_slot_;
        if (enc.head_hidden_layer) {
            state = gelu(add_row(matmul(state, param(slot).var()), param(slot + 1).var()));
            slot += 2;
        }
        out.logits = add_row(matmul(state, param(slot).var()), param(slot + 1).var());
        return out;
    }

    /// Name -> value copy of every parameter.
    std::map<std::string, Tensor<T>> snapshot() const {
        std::map<std::string, Tensor<T>> out;
        for (const auto* p : parameters()) out.emplace(p->name(), p->value());
        return out;
    }

private:
    static std::mt19937_64 seeded(std::uint64_t seed) { return std::mt19937_64(seed); }

    ClassifierModel(const ModelConfig& cfg, std::mt19937_64 rng) : config_(validated(cfg)), seqshort_(cfg.seqshort, rng) {
        const auto specs = model_parameter_specs(cfg);
        const std::size_t skip = seqshort_.parameters().size();
        for (std::size_t i = skip; i < specs.size(); ++i) {
            Tensor<T> value = initialize<T>(specs[i], rng);
            params_.emplace_back(specs[i], std::move(value));
        }
        std::size_t slot = 0;
        cls_slot_ = slot++;
        if (cfg.encoder.use_positional_embeddings) pos_slot_ = slot++;
        block_slot_ = slot;
        head_slot_ = block_slot_ + kBlockParams * cfg.encoder.num_layers;
        apply_policy(cfg.encoder.freeze_policy);
    }

    static const ModelConfig& validated(const ModelConfig& cfg) {
        cfg.validate();
        return cfg;
    }

    const Parameter<T>& param(std::size_t slot) const { return params_[slot]; }

    // Post-norm block: x1 = LN(x + MHSA(x)); x2 = LN(x1 + FFN(x1)).
    Var<T> block_forward(std::size_t layer, const Var<T>& x, std::vector<Tensor<double>>& attn_out) const {
        const auto& enc = config_.encoder;
        const std::size_t base = block_slot_ + kBlockParams * layer;
        auto linear = [&](const Var<T>& in, std::size_t w) {
            return add_row(matmul(in, param(w).var()), param(w + 1).var());
        };
        const Var<T> q = linear(x, base + 0);
        const Var<T> k = linear(x, base + 2);
        const Var<T> v = linear(x, base + 4);
        const std::size_t dh = enc.head_dim();
        const T scale_factor = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        const std::size_t n = x.value().rows();
        Tensor<double> avg = Tensor<double>::matrix(n, n);
        std::vector<Var<T>> heads;
        heads.reserve(enc.num_heads);
        for (std::size_t hd = 0; hd < enc.num_heads; ++hd) {
            const Var<T> qh = slice_cols(q, hd * dh, dh);
            const Var<T> kh = slice_cols(k, hd * dh, dh);
            const Var<T> vh = slice_cols(v, hd * dh, dh);
            const Var<T> weights = softmax_rows(scale(matmul(qh, transpose(kh)), scale_factor));
            for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += static_cast<double>(weights.value()[i]);
            heads.push_back(matmul(weights, vh));
        }
        for (auto& a : avg.values()) a /= static_cast<double>(enc.num_heads);
        attn_out.push_back(std::move(avg));

        const Var<T> attended = linear(concat_cols(heads), base + 6);
        const Var<T> x1 = layer_norm(add(x, attended), param(base + 8).var(), param(base + 9).var(), enc.layer_norm_eps);
        const Var<T> hidden = gelu(linear(x1, base + 10));
        const Var<T> ffn = linear(hidden, base + 12);
        return layer_norm(add(x1, ffn), param(base + 14).var(), param(base + 15).var(), enc.layer_norm_eps);
    }

    template <class U>
    friend void apply_freeze_policy(ClassifierModel<U>& model, FreezePolicy policy);

    void apply_policy(FreezePolicy policy) {
        config_.encoder.freeze_policy = policy;
        for (auto* p : parameters()) p->set_trainable(is_trainable(p->role(), policy));
    }

    static constexpr std::size_t kBlockParams = 16;

    ModelConfig config_;
    SeqShortLayer<T> seqshort_;
    std::vector<Parameter<T>> params_;
    std::size_t cls_slot_ = 0;
    std::size_t pos_slot_ = 0;
    std::size_t block_slot_ = 0;
    std::size_t head_slot_ = 0;
};

/// Sets every parameter's trainable flag from its role. Idempotent.
template <class T>
void apply_freeze_policy(ClassifierModel<T>& model, FreezePolicy policy) {
    model.apply_policy(policy);
}

template <class T>
std::size_t count_parameters(const ClassifierModel<T>& model, bool only_trainable) {
    std::size_t total = 0;
    for (const auto* p : model.parameters()) {
        if (!only_trainable || p->trainable()) total += p->size();
    }
    return total;
}

}  // namespace seqshort
