#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "seqshort/tensor.hpp"

namespace seqshort {

// One value in the computation graph of a single forward pass. Leaves are
// either constants (inputs) or parameters; interior nodes carry a closure that
// routes their gradient to their parents.
template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Tensor<T>&)> backward;

    void accumulate(const Tensor<T>& g) {
        if (grad.empty()) {
            grad = Tensor<T>(value.shape());
        }
        auto dst = grad.values();
        const auto src = g.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
};

/// Handle to a graph node. Copies share the node.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var constant(Tensor<T> value) {
        auto node = std::make_shared<Node<T>>();
        node->value = std::move(value);
        return Var(std::move(node));
    }

    static Var leaf(Tensor<T> value, bool requires_grad) {
        auto node = std::make_shared<Node<T>>();
        node->value = std::move(value);
        node->requires_grad = requires_grad;
        return Var(std::move(node));
    }

    const Tensor<T>& value() const { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

// Builds an interior node. The backward closure is only kept when some parent
// needs a gradient, so inference graphs stay closure-free.
template <class T, class Backward>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents, Backward&& backward) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    for (const auto& p : parents) {
        if (p.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::forward<Backward>(backward);
    }
    return Var<T>(std::move(node));
}

}  // namespace detail

/// Reverse-mode sweep from `root`, seeding its gradient with ones. Leaf grads
/// accumulate across calls; interior grads belong to this graph only.
template <class T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->accumulate(Tensor<T>(root.value().shape(), T{1}));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(node->grad);
    }
}

}  // namespace seqshort
