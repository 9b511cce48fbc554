#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "qa/dense_array.hpp"

namespace qa {

template <typename T>
class Tape;

// Lightweight handle to a value recorded on a tape.
template <typename T>
struct Node {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const DenseArray<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return tape->value(id).shape; }
    bool requires_grad() const { return tape->requires_grad(id); }
    bool has_grad() const { return tape->maybe_grad(id) != nullptr; }
    const DenseArray<T>& grad() const { return tape->grad(id); }
};

// Recording tape: values of every node plus backward rules in forward order.
// A tape and its nodes belong to one thread; reverse traversal is sequential,
// so two backward passes over the same tape are bit-identical.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Node<T> leaf(DenseArray<T> v, bool requires_grad) {
        slots_.push_back(Slot{std::move(v), DenseArray<T>{}, requires_grad, false});
        return Node<T>{this, static_cast<int>(slots_.size()) - 1};
    }

    Node<T> constant(DenseArray<T> v) { return leaf(std::move(v), false); }
    Node<T> variable(DenseArray<T> v) { return leaf(std::move(v), true); }

    void record(std::function<void(Tape&)> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    const DenseArray<T>& value(int id) const { return slots_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(int id) const { return slots_[static_cast<std::size_t>(id)].requires_grad; }

    DenseArray<T>* maybe_grad(int id) {
        Slot& s = slots_[static_cast<std::size_t>(id)];
        return s.has_grad ? &s.grad : nullptr;
    }

    const DenseArray<T>& grad(int id) const {
        const Slot& s = slots_[static_cast<std::size_t>(id)];
        if (!s.has_grad) throw NumericError("gradient not populated; run backward() first");
        return s.grad;
    }

    // Zero-initialized gradient buffer, allocated on first use.
    DenseArray<T>& grad_buf(int id) {
        Slot& s = slots_[static_cast<std::size_t>(id)];
        if (!s.has_grad) {
            s.grad = DenseArray<T>::zeros(s.value.shape);
            s.has_grad = true;
        }
        return s.grad;
    }

    bool wants_grad(int id) const { return slots_[static_cast<std::size_t>(id)].requires_grad; }

    void accum(int id, const DenseArray<T>& g) {
        if (!wants_grad(id)) return;
        DenseArray<T>& buf = grad_buf(id);
        for (std::int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
    }

    void backward(Node<T> loss) {
        if (loss.tape != this) throw NumericError("backward: node does not belong to this tape");
        if (backward_done_) throw NumericError("backward already run on this tape; call reset_grads() first");
        if (value(loss.id).numel() != 1) {
            throw ShapeError("backward requires a scalar loss, got shape " + shape_str(value(loss.id).shape));
        }
        backward_done_ = true;
        grad_buf(loss.id)[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
    }

    void reset_grads() {
        for (Slot& s : slots_) {
            s.has_grad = false;
            s.grad = DenseArray<T>{};
        }
        backward_done_ = false;
    }

    std::size_t num_nodes() const { return slots_.size(); }
    std::size_t num_ops() const { return ops_.size(); }

private:
    struct Slot {
        DenseArray<T> value;
        DenseArray<T> grad;
        bool requires_grad = false;
        bool has_grad = false;
    };

    // deque: references to existing slots stay valid as nodes are appended
    std::deque<Slot> slots_;
    std::vector<std::function<void(Tape&)>> ops_;
    bool backward_done_ = false;
};

template <typename T>
Tape<T>& same_tape(Node<T> a, Node<T> b) {
    if (a.tape == nullptr || a.tape != b.tape) throw NumericError("operands live on different tapes");
    return *a.tape;
}

}  // namespace qa
