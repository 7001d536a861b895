#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "apiq/linalg/kernels.hpp"

namespace apiq::ad {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor<T>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    std::size_t numel() const { return value().numel(); }
    bool requires_grad() const { return tape_->requires_grad(id_); }
    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Records primitive applications in execution order; backward() replays them
// in exact reverse order. A tape is single-threaded. After backward() the
// recorded entries are released and the tape refuses further use except for
// reading leaf gradients.
template <typename T>
class Tape {
public:
    // Receives the tape, the gradient flowing into the entry's output and the
    // output node id (for rules that reuse the forward result).
    using BackwardFn = std::function<void(Tape&, const Tensor<T>&, std::size_t)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Tensor<T> value, bool requires_grad = true)
    {
        check_open();
        nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, false});
        return Var<T>(this, nodes_.size() - 1);
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    // Gradient accumulated on a node; zeros when nothing reached it.
    Tensor<T> grad(const Var<T>& v) const
    {
        const Node& n = nodes_.at(v.id());
        return n.grad.empty() && n.value.numel() != 0 ? Tensor<T>(n.value.shape()) : n.grad;
    }

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }
    std::size_t entry_count() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    // Used by primitives: appends the output node and, when any input needs a
    // gradient and recording is on, the backward rule.
    Var<T> record(const char* op, Tensor<T> out, std::initializer_list<Var<T>> inputs, BackwardFn fn)
    {
        check_open();
        bool needs = false;
        for (const auto& in : inputs) {
            if (in.valid() && &in.tape() != this) throw ArgumentError(std::string(op) + ": operands from different tapes");
            needs = needs || (in.valid() && requires_grad(in.id()));
        }
        needs = needs && recording_;
        nodes_.push_back(Node{std::move(out), Tensor<T>(), needs, needs});
        const std::size_t id = nodes_.size() - 1;
        if (needs) {
            Entry e{op, {}, id, std::move(fn)};
            for (const auto& in : inputs) e.inputs.push_back(in.id());
            entries_.push_back(std::move(e));
        }
        return Var<T>(this, id);
    }

    // Adds g into the gradient of node id when it requires one.
    void accumulate_grad(std::size_t id, const Tensor<T>& g)
    {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.empty())
            n.grad = g;
        else
            accumulate(n.grad, g);
    }

    bool wants_grad(const Var<T>& v) const { return requires_grad(v.id()); }

    void backward(const Var<T>& loss)
    {
        if (consumed_) throw StateError("backward: tape already consumed by a previous backward pass");
        if (&loss.tape() != this) throw ArgumentError("backward: loss belongs to a different tape");
        if (loss.numel() != 1)
            throw ArgumentError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
        Node& ln = nodes_.at(loss.id());
        if (!ln.produced || entries_.empty() || entries_.back().output < loss.id())
            throw StateError("backward: loss was not produced by a recorded forward pass");
        ln.grad = Tensor<T>(ln.value.shape(), T{1});
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->output > loss.id()) continue;
            const Node& out = nodes_[it->output];
            if (out.grad.empty()) continue;
            it->backward(*this, out.grad, it->output);
        }
        entries_.clear();
        consumed_ = true;
    }

    // Discards everything; the tape can record again.
    void reset()
    {
        nodes_.clear();
        entries_.clear();
        consumed_ = false;
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad;
        bool produced; // output of a recorded entry
    };
    struct Entry {
        const char* op;
        std::vector<std::size_t> inputs;
        std::size_t output;
        BackwardFn backward;
    };

    void check_open() const
    {
        if (consumed_) throw StateError("tape already consumed; call reset() before recording again");
    }

    std::deque<Node> nodes_;
    std::vector<Entry> entries_;
    bool recording_ = true;
    bool consumed_ = false;
};

// Disables recording for its lifetime.
template <typename T>
class NoGrad {
public:
    explicit NoGrad(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) { tape_.set_recording(false); }
    ~NoGrad() { tape_.set_recording(prev_); }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    Tape<T>& tape_;
    bool prev_;
};

} // namespace apiq::ad
