#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "frappe/errors.hpp"
#include "frappe/rng.hpp"

namespace frappe {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape &s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape &s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor of scalar S with optional gradient buffer.
// Copies are shallow: they share storage, so a tensor works as a handle
// that ops and tape nodes can capture by value.
template <class S>
class TensorT {
  public:
    TensorT() = default;

    static TensorT zeros(Shape shape) {
        TensorT t;
        t.st_ = std::make_shared<Storage>();
        t.st_->shape = std::move(shape);
        t.st_->data.assign(shape_numel(t.st_->shape), S(0));
        return t;
    }

    static TensorT full(Shape shape, S v) {
        TensorT t = zeros(std::move(shape));
        for (S &x : t.data()) x = v;
        return t;
    }

    static TensorT scalar(S v) { return full({1}, v); }

    static TensorT from(Shape shape, std::vector<S> values) {
        if (static_cast<int64_t>(values.size()) != shape_numel(shape))
            throw ShapeError("tensor data size " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        TensorT t;
        t.st_ = std::make_shared<Storage>();
        t.st_->shape = std::move(shape);
        t.st_->data = std::move(values);
        return t;
    }

    static TensorT randn(Shape shape, Rng &rng, S stddev = S(1)) {
        TensorT t = zeros(std::move(shape));
        for (S &x : t.data()) x = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(st_); }
    const Shape &shape() const { return st_->shape; }
    int64_t numel() const { return static_cast<int64_t>(st_->data.size()); }
    int64_t dim(size_t i) const { return st_->shape.at(i); }
    size_t rank() const { return st_->shape.size(); }

    std::vector<S> &data() { return st_->data; }
    const std::vector<S> &data() const { return st_->data; }

    S item() const {
        if (numel() != 1)
            throw ShapeError("item() requires a single-element tensor, got " +
                             shape_str(shape()));
        return st_->data[0];
    }

    bool requires_grad() const { return st_->requires_grad; }
    void set_requires_grad(bool b) { st_->requires_grad = b; }

    bool has_grad() const { return st_->grad_live; }

    // Gradient buffer, allocated lazily and zero-filled on first access.
    std::vector<S> &grad() const {
        if (!st_->grad_live) {
            st_->grad.assign(st_->data.size(), S(0));
            st_->grad_live = true;
        }
        return st_->grad;
    }

    void zero_grad() const {
        st_->grad_live = false;
        st_->grad.clear();
    }

    // Identity check (same storage), used by tests and the optimizer.
    bool same_storage(const TensorT &o) const { return st_ == o.st_; }

    TensorT clone() const {
        TensorT t;
        t.st_ = std::make_shared<Storage>();
        t.st_->shape = st_->shape;
        t.st_->data = st_->data;
        return t;
    }

  private:
    struct Storage {
        Shape shape;
        std::vector<S> data;
        bool requires_grad = false;
        // grad lives beside data; `grad_live` distinguishes "no gradient
        // accumulated yet" from "gradient of zeros".
        mutable std::vector<S> grad;
        mutable bool grad_live = false;
    };

    std::shared_ptr<Storage> st_;
};

// Wengert-list tape. Constructing one makes it the active tape for the
// current thread (tapes nest; destruction restores the previous one).
// Ops executed while a tape is active append nodes when any input requires
// gradients; backward() replays the list in exact reverse order.
template <class S>
class TapeT {
  public:
    TapeT() : prev_(current_) { current_ = this; }
    ~TapeT() { current_ = prev_; }

    TapeT(const TapeT &) = delete;
    TapeT &operator=(const TapeT &) = delete;

    static TapeT *current() { return current_; }

    struct Node {
        std::vector<TensorT<S>> inputs;
        TensorT<S> output;
        std::function<void()> backward;
    };

    void record(std::vector<TensorT<S>> inputs, TensorT<S> output,
                std::function<void()> backward) {
        nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
    }

    size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and walks the recorded nodes in reverse.
    // A node whose output never received a gradient is skipped. Running
    // backward twice on the same tape is an error by design: the recorded
    // graph has been consumed conceptually and double accumulation would be
    // silent corruption.
    void backward(const TensorT<S> &loss) {
        if (consumed_)
            throw Error("backward() called twice on the same tape; "
                        "re-record the computation to differentiate again");
        consumed_ = true;
        if (loss.numel() != 1)
            throw ShapeError("backward() requires a scalar loss, got " +
                             shape_str(loss.shape()));
        loss.grad()[0] += S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->output.has_grad()) it->backward();
        }
    }

  private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
    TapeT *prev_ = nullptr;
    static thread_local TapeT *current_;
};

template <class S>
thread_local TapeT<S> *TapeT<S>::current_ = nullptr;

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace frappe
