#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "unigen/core/tensor.hpp"

namespace unigen::core {

template <class T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    int32_t id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& val() const { return tape->value(id); }
    T scalar() const {
        const Tensor<T>& t = val();
        require(t.size() == 1, "scalar() on non-scalar " + shape_str(t.shape));
        return t.v[0];
    }
};

// Reverse-mode tape. Appending order is a topological order of the graph, so
// the backward sweep is a single reverse pass that visits each node once.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int32_t)>;

    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<int32_t> parents;
        BackwardFn backward;
        bool needs_grad = false;
        bool has_grad = false;
        bool is_leaf = false;
    };

    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    Var<T> leaf(Tensor<T> value, bool needs_grad) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad && recording_;
        n.is_leaf = true;
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int32_t>(nodes_.size() - 1)};
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    // Registers an op result. The backward fn is dropped when no parent needs
    // gradients or the tape is in inference mode.
    Var<T> make(Tensor<T> value, std::vector<int32_t> parents, BackwardFn backward) {
        Node n;
        n.value = std::move(value);
        if (recording_) {
            for (int32_t p : parents)
                if (p >= 0 && nodes_[static_cast<size_t>(p)].needs_grad) {
                    n.needs_grad = true;
                    break;
                }
        }
        if (n.needs_grad) {
            n.parents = std::move(parents);
            n.backward = std::move(backward);
        }
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int32_t>(nodes_.size() - 1)};
    }

    const Tensor<T>& value(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }
    Tensor<T>& mutable_value(int32_t id) { return nodes_[static_cast<size_t>(id)].value; }

    bool needs_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    // Gradient buffer for accumulation; allocated zero on first touch.
    // Returns nullptr when the node does not require gradients.
    Tensor<T>* grad_accum(int32_t id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad) return nullptr;
        if (!n.has_grad) {
            n.grad = Tensor<T>::zeros(n.value.shape);
            n.has_grad = true;
        }
        return &n.grad;
    }

    const Tensor<T>& grad(int32_t id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        require(n.has_grad, "grad(): node has no gradient");
        return n.grad;
    }
    bool has_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].has_grad; }

    // Reverse sweep from a scalar output. Intermediate gradient buffers are
    // released as soon as they have been consumed; leaf gradients persist so
    // the optimizer can read them.
    void backward(const Var<T>& out) {
        require(out.tape == this, "backward: var belongs to another tape");
        Node& o = nodes_[static_cast<size_t>(out.id)];
        require(o.value.size() == 1, "backward: output must be scalar");
        require(o.needs_grad, "backward: output does not require gradients");
        if (!o.has_grad) {
            o.grad = Tensor<T>::full(o.value.shape, T(1));
            o.has_grad = true;
        }
        for (int32_t id = out.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.has_grad || n.is_leaf) continue;
            if (n.backward) n.backward(*this, id);
            n.grad = Tensor<T>();  // consumed; free eagerly
            n.has_grad = false;
        }
    }

    size_t node_count() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    bool recording_;
};

}  // namespace unigen::core
