#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "seqshort/autodiff.hpp"
#include "seqshort/errors.hpp"
#include "seqshort/tensor.hpp"

namespace seqshort {

/// What a parameter is for; the freeze policy is decided by role alone.
enum class ParamRole : std::uint8_t {
    seqshort,
    cls_token,
    positional,
    attention,
    feed_forward,
    layer_norm,
    head,
};

enum class FreezePolicy : std::uint8_t { none, frozen_except_layernorm };

inline std::string_view to_string(FreezePolicy policy) {
    return policy == FreezePolicy::none ? "none" : "frozen_except_layernorm";
}

inline FreezePolicy parse_freeze_policy(std::string_view text) {
    if (text == "none") return FreezePolicy::none;
    if (text == "frozen_except_layernorm") return FreezePolicy::frozen_except_layernorm;
    throw ConfigError("unknown freeze policy '" + std::string(text) + "'");
}

/// Only the pretrained-encoder weights (attention and feed-forward matrices of
/// the blocks) are ever frozen.
inline bool is_trainable(ParamRole role, FreezePolicy policy) {
    if (policy == FreezePolicy::none) return true;
    return role != ParamRole::attention && role != ParamRole::feed_forward;
}

enum class Init : std::uint8_t { normal, zeros, ones };

struct ParameterSpec {
    std::string name;
    Shape shape;
    ParamRole role;
    Init init = Init::normal;

    std::size_t size() const { return shape_size(shape); }
};

/// A named learnable tensor. The value and gradient live in a graph leaf that
/// every forward pass references, so gradients accumulate across passes until
/// the optimizer clears them.
template <class T>
class Parameter {
public:
    Parameter(ParameterSpec spec, Tensor<T> value)
        : spec_(std::move(spec)), leaf_(Var<T>::leaf(std::move(value), true)) {}

    const std::string& name() const { return spec_.name; }
    ParamRole role() const { return spec_.role; }
    const ParameterSpec& spec() const { return spec_; }

    bool trainable() const { return leaf_.node()->requires_grad; }
    void set_trainable(bool on) {
        leaf_.node()->requires_grad = on;
        if (!on) leaf_.node()->grad = Tensor<T>();
    }

    const Var<T>& var() const { return leaf_; }
    Tensor<T>& value() { return leaf_.node()->value; }
    const Tensor<T>& value() const { return leaf_.node()->value; }
    Tensor<T>& grad() { return leaf_.node()->grad; }
    const Tensor<T>& grad() const { return leaf_.node()->grad; }
    bool has_grad() const { return !leaf_.node()->grad.empty(); }
    void zero_grad() { leaf_.node()->grad = Tensor<T>(); }

    std::size_t size() const { return value().size(); }

private:
    ParameterSpec spec_;
    Var<T> leaf_;
};

/// Materializes a spec: N(0, std^2) draws, or constant zeros/ones.
template <class T>
Tensor<T> initialize(const ParameterSpec& spec, std::mt19937_64& rng, double stddev = 0.02) {
    Tensor<T> value(spec.shape);
    switch (spec.init) {
        case Init::zeros:
            break;
        case Init::ones:
            value.fill(T{1});
            break;
        case Init::normal: {
            std::normal_distribution<double> dist(0.0, stddev);
            for (auto& v : value.values()) v = static_cast<T>(dist(rng));
            break;
        }
    }
    return value;
}

}  // namespace seqshort
