#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
// The op set is deliberately small: exactly what the model graph needs,
// each op with a hand-written backward rule. No broadcasting beyond
// rowwise bias expansion, so every rule stays auditable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "cmvim/common.hpp"

namespace cmvim {

namespace testing {
// Selftest negative control: when set to an op name, that op's backward rule
// is perturbed so gradient checks must fail naming the op.
inline std::string backward_fault_op;
inline bool fault(const char* op) { return backward_fault_op == op; }
}  // namespace testing

template <class S>
const char* dtype_name() {
    if constexpr (sizeof(S) == 4) return "float32";
    return "float64";
}

template <class S>
class Tape;

template <class S>
class TensorT {
  public:
    struct Storage {
        std::vector<std::int64_t> shape;
        std::vector<S> v;
        std::vector<S> g;  // same length as v once any gradient lands here
        bool needs_grad = false;
    };

    TensorT() = default;

    static TensorT zeros(std::vector<std::int64_t> shape, bool needs_grad = false) {
        TensorT t;
        t.d_ = std::make_shared<Storage>();
        t.d_->shape = std::move(shape);
        t.d_->v.assign(static_cast<std::size_t>(numel_of(t.d_->shape)), S(0));
        t.d_->needs_grad = needs_grad;
        return t;
    }

    static TensorT full(std::vector<std::int64_t> shape, S value, bool needs_grad = false) {
        TensorT t = zeros(std::move(shape), needs_grad);
        std::fill(t.d_->v.begin(), t.d_->v.end(), value);
        return t;
    }

    static TensorT scalar(S value, bool needs_grad = false) { return full({}, value, needs_grad); }

    static TensorT from(std::vector<std::int64_t> shape, std::vector<S> values, bool needs_grad = false) {
        check(numel_of(shape) == static_cast<std::int64_t>(values.size()),
              "tensor: data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
        TensorT t;
        t.d_ = std::make_shared<Storage>();
        t.d_->shape = std::move(shape);
        t.d_->v = std::move(values);
        t.d_->needs_grad = needs_grad;
        return t;
    }

    static TensorT from_double(std::vector<std::int64_t> shape, const std::vector<double>& values,
                               bool needs_grad = false) {
        std::vector<S> v(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<S>(values[i]);
        return from(std::move(shape), std::move(v), needs_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<std::int64_t>& shape() const { return d_->shape; }
    std::int64_t dim(std::size_t i) const { return d_->shape[i]; }
    std::size_t rank() const { return d_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->v.size()); }
    bool needs_grad() const { return d_->needs_grad; }
    void set_needs_grad(bool b) { d_->needs_grad = b; }

    std::vector<S>& values() { return d_->v; }
    const std::vector<S>& values() const { return d_->v; }
    S* data() { return d_->v.data(); }
    const S* data() const { return d_->v.data(); }

    S item() const {
        check(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
        return d_->v[0];
    }

    bool has_grad() const { return !d_->g.empty(); }

    std::vector<S>& grad() {
        if (d_->g.empty()) d_->g.assign(d_->v.size(), S(0));
        return d_->g;
    }

    const std::vector<S>& grad_view() const { return d_->g; }

    void zero_grad() {
        if (!d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), S(0));
    }

    void accumulate_grad(const std::vector<S>& g) {
        check(g.size() == d_->v.size(), "grad accumulate: size mismatch");
        auto& dst = grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    // Same values, detached from any graph.
    TensorT detach() const {
        TensorT t;
        t.d_ = std::make_shared<Storage>();
        t.d_->shape = d_->shape;
        t.d_->v = d_->v;
        t.d_->needs_grad = false;
        return t;
    }

    TensorT clone() const {
        TensorT t = detach();
        t.d_->needs_grad = d_->needs_grad;
        return t;
    }

    bool same_storage(const TensorT& o) const { return d_ == o.d_; }

  private:
    std::shared_ptr<Storage> d_;
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

// Ordered record of executed differentiable ops. Backward replays the record
// in reverse, which is a topological order by construction, visiting each op
// exactly once. Repeated backward without zeroing grads accumulates.
template <class S>
class Tape {
  public:
    Tape() {
        prev_ = cur_;
        cur_ = this;
    }
    ~Tape() { cur_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return cur_; }

    static bool recording() { return cur_ != nullptr; }

    void record(const char* op, TensorT<S> out, std::function<void()> fn) {
        nodes_.push_back({op, std::move(out), std::move(fn)});
    }

    std::size_t size() const { return nodes_.size(); }

    // Node-output grads are scratch space per backward pass; only leaves
    // (tensors never produced by a recorded op) accumulate across calls.
    void backward(TensorT<S>& loss) {
        check(loss.numel() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        for (auto& n : nodes_) n.out.zero_grad();
        loss.grad()[0] += S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    }

    template <class T>
    friend class NoGradGuard;

  private:
    struct Node {
        const char* op;
        TensorT<S> out;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
    Tape* prev_ = nullptr;
    static thread_local Tape* cur_;
};

template <class S>
thread_local Tape<S>* Tape<S>::cur_ = nullptr;

// Suspends recording on the current thread (target-encoder forwards, plain evaluation).
template <class S>
class NoGradGuard {
  public:
    NoGradGuard() {
        saved_ = Tape<S>::cur_;
        Tape<S>::cur_ = nullptr;
    }
    ~NoGradGuard() { Tape<S>::cur_ = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    Tape<S>* saved_;
};

template <class S>
void backward(TensorT<S>& loss) {
    check(Tape<S>::recording(), "backward: no active tape");
    Tape<S>::current()->backward(loss);
}

// ---------------------------------------------------------------------------
// op helpers

namespace detail {

template <class S>
bool want_grad(TensorT<S> a) {
    return Tape<S>::recording() && a.needs_grad();
}

template <class S>
bool want_grad(TensorT<S> a, TensorT<S> b) {
    return Tape<S>::recording() && (a.needs_grad() || b.needs_grad());
}

template <class S>
bool want_grad(TensorT<S> a, TensorT<S> b, TensorT<S> c) {
    return Tape<S>::recording() && (a.needs_grad() || b.needs_grad() || c.needs_grad());
}

template <class S>
void record(const char* op, TensorT<S>& out, std::function<void()> fn) {
    out.set_needs_grad(true);
    Tape<S>::current()->record(op, out, std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

template <class S>
TensorT<S> add(TensorT<S> a, TensorT<S> b) {
    check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = TensorT<S>::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::want_grad(a, b)) {
        detail::record("add", out, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            if (a.needs_grad()) a.accumulate_grad(g);
            if (b.needs_grad()) b.accumulate_grad(g);
        });
    }
    return out;
}

template <class S>
TensorT<S> sub(TensorT<S> a, TensorT<S> b) {
    check(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = TensorT<S>::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::want_grad(a, b)) {
        detail::record("sub", out, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            if (a.needs_grad()) a.accumulate_grad(g);
            if (b.needs_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> mul(TensorT<S> a, TensorT<S> b) {
    check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = TensorT<S>::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::want_grad(a, b)) {
        detail::record("mul", out, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            if (a.needs_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
            }
            if (b.needs_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> neg(TensorT<S> a) {
    auto out = TensorT<S>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = -a.data()[i];
    if (detail::want_grad(a)) {
        detail::record("neg", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> scale(TensorT<S> a, double c) {
    auto out = TensorT<S>::zeros(a.shape());
    const S cs = static_cast<S>(c);
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * cs;
    if (detail::want_grad(a)) {
        detail::record("scale", out, [a, out, cs]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * cs;
        });
    }
    return out;
}

template <class S>
TensorT<S> add_scalar(TensorT<S> a, double c) {
    auto out = TensorT<S>::zeros(a.shape());
    const S cs = static_cast<S>(c);
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + cs;
    if (detail::want_grad(a)) {
        detail::record("add_scalar", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            if (a.needs_grad()) a.accumulate_grad(out.grad_view());
        });
    }
    return out;
}

template <class S>
TensorT<S> exp(TensorT<S> a) {
    auto out = TensorT<S>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = std::exp(a.data()[i]);
    if (detail::want_grad(a)) {
        detail::record("exp", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * out.data()[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> log(TensorT<S> a) {
    auto out = TensorT<S>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = std::log(a.data()[i]);
    if (detail::want_grad(a)) {
        detail::record("log", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a.data()[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> sigmoid(TensorT<S> a) {
    auto out = TensorT<S>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const S x = a.data()[i];
        out.data()[i] = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
    }
    if (detail::want_grad(a)) {
        detail::record("sigmoid", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const S y = out.data()[i];
                ga[i] += g[i] * y * (S(1) - y);
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> silu(TensorT<S> a) {
    auto out = TensorT<S>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const S x = a.data()[i];
        const S s = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
        out.data()[i] = x * s;
    }
    if (detail::want_grad(a)) {
        detail::record("silu", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            const S bump = testing::fault("silu") ? S(1.03) : S(1);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const S x = a.data()[i];
                const S s = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
                ga[i] += bump * g[i] * (s + x * s * (S(1) - s));
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> softplus(TensorT<S> a) {
    auto out = TensorT<S>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const S x = a.data()[i];
        out.data()[i] = x > S(20) ? x : (x < S(-20) ? std::exp(x) : std::log1p(std::exp(x)));
    }
    if (detail::want_grad(a)) {
        detail::record("softplus", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const S x = a.data()[i];
                const S s = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
                ga[i] += g[i] * s;
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> pow_scalar(TensorT<S> a, double p) {
    auto out = TensorT<S>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = static_cast<S>(std::pow(a.data()[i], p));
    if (detail::want_grad(a)) {
        detail::record("pow_scalar", out, [a, out, p]() mutable {
            if (!out.has_grad() || p == 0.0) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * static_cast<S>(p * std::pow(a.data()[i], p - 1.0));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra

template <class S>
TensorT<S> matmul(TensorT<S> a, TensorT<S> b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                                              shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    check(k == k2, "matmul: inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    auto out = TensorT<S>::zeros({m, n});
    const S* pa = a.data();
    const S* pb = b.data();
    S* pc = out.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const S av = pa[i * k + kk];
            const S* pbr = pb + kk * n;
            S* pcr = pc + i * n;
            for (std::int64_t j = 0; j < n; ++j) pcr[j] += av * pbr[j];
        }
    }
    if (detail::want_grad(a, b)) {
        detail::record("matmul", out, [a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            if (a.needs_grad()) {
                auto& ga = a.grad();
                // da = g . b^T
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        S acc = 0;
                        const S* gr = g.data() + i * n;
                        const S* br = b.data() + kk * n;
                        for (std::int64_t j = 0; j < n; ++j) acc += gr[j] * br[j];
                        ga[i * k + kk] += acc;
                    }
                }
            }
            if (b.needs_grad()) {
                auto& gb = b.grad();
                // db = a^T . g
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    for (std::int64_t i = 0; i < m; ++i) {
                        const S av = a.data()[i * k + kk];
                        const S* gr = g.data() + i * n;
                        S* gbr = gb.data() + kk * n;
                        for (std::int64_t j = 0; j < n; ++j) gbr[j] += av * gr[j];
                    }
                }
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> transpose(TensorT<S> a) {
    check(a.rank() == 2, "transpose: expects 2-d tensor, got " + shape_str(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    auto out = TensorT<S>::zeros({n, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (detail::want_grad(a)) {
        detail::record("transpose", out, [a, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

// y[i,:] = x[i,:] + b  (the one permitted broadcast: a rowwise bias)
template <class S>
TensorT<S> add_rowwise(TensorT<S> x, TensorT<S> b) {
    check(x.rank() == 2 && b.rank() == 1 && x.dim(1) == b.dim(0),
          "add_rowwise: shapes " + shape_str(x.shape()) + " and " + shape_str(b.shape()));
    const std::int64_t m = x.dim(0), n = x.dim(1);
    auto out = TensorT<S>::zeros(x.shape());
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] + b.data()[j];
    if (detail::want_grad(x, b)) {
        detail::record("add_rowwise", out, [x, b, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            if (x.needs_grad()) x.accumulate_grad(g);
            if (b.needs_grad()) {
                auto& gb = b.grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <class S>
TensorT<S> sum(TensorT<S> a) {
    S acc = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    auto out = TensorT<S>::scalar(acc);
    if (detail::want_grad(a)) {
        detail::record("sum", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            const S g = out.grad_view()[0];
            auto& ga = a.grad();
            for (auto& v : ga) v += g;
        });
    }
    return out;
}

template <class S>
TensorT<S> mean(TensorT<S> a) {
    const std::int64_t n = a.numel();
    check(n > 0, "mean: empty tensor");
    S acc = 0;
    for (std::int64_t i = 0; i < n; ++i) acc += a.data()[i];
    auto out = TensorT<S>::scalar(acc / static_cast<S>(n));
    if (detail::want_grad(a)) {
        detail::record("mean", out, [a, out, n]() mutable {
            if (!out.has_grad()) return;
            const S g = out.grad_view()[0] / static_cast<S>(n);
            auto& ga = a.grad();
            for (auto& v : ga) v += g;
        });
    }
    return out;
}

// axis 0: column reduction of [m,n] -> [n]; axis 1: row reduction -> [m].
template <class S>
TensorT<S> sum_axis(TensorT<S> a, int axis) {
    check(a.rank() == 2 && (axis == 0 || axis == 1), "sum_axis: expects 2-d tensor and axis 0/1");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    auto out = TensorT<S>::zeros({axis == 0 ? n : m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out.data()[axis == 0 ? j : i] += a.data()[i * n + j];
    if (detail::want_grad(a)) {
        detail::record("sum_axis", out, [a, out, m, n, axis]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += g[axis == 0 ? j : i];
        });
    }
    return out;
}

template <class S>
TensorT<S> mean_axis(TensorT<S> a, int axis) {
    const double inv = 1.0 / static_cast<double>(axis == 0 ? a.dim(0) : a.dim(1));
    return scale(sum_axis(a, axis), inv);
}

// ---------------------------------------------------------------------------
// shape ops

template <class S>
TensorT<S> gather_rows(TensorT<S> a, const std::vector<std::int64_t>& idx) {
    check(a.rank() == 2, "gather_rows: expects 2-d tensor, got " + shape_str(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    for (auto i : idx)
        if (i < 0 || i >= m)
            throw std::out_of_range("gather_rows: index " + std::to_string(i) + " out of range [0," +
                                    std::to_string(m) + ")");
    auto out = TensorT<S>::zeros({static_cast<std::int64_t>(idx.size()), n});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(a.data() + idx[r] * n, n, out.data() + static_cast<std::int64_t>(r) * n);
    if (detail::want_grad(a)) {
        detail::record("gather_rows", out, [a, out, idx, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::int64_t j = 0; j < n; ++j) ga[idx[r] * n + j] += g[static_cast<std::int64_t>(r) * n + j];
        });
    }
    return out;
}

template <class S>
TensorT<S> slice_rows(TensorT<S> a, std::int64_t r0, std::int64_t r1) {
    check(a.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= a.dim(0), "slice_rows: bad range");
    const std::int64_t n = a.dim(1);
    auto out = TensorT<S>::zeros({r1 - r0, n});
    std::copy_n(a.data() + r0 * n, (r1 - r0) * n, out.data());
    if (detail::want_grad(a)) {
        detail::record("slice_rows", out, [a, out, r0, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[static_cast<std::size_t>(r0 * n) + i] += g[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> pad_rows(TensorT<S> a, std::int64_t before, std::int64_t after) {
    check(a.rank() == 2 && before >= 0 && after >= 0, "pad_rows: bad padding");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    auto out = TensorT<S>::zeros({before + m + after, n});
    std::copy_n(a.data(), m * n, out.data() + before * n);
    if (detail::want_grad(a)) {
        detail::record("pad_rows", out, [a, out, before, m, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::int64_t i = 0; i < m * n; ++i) ga[i] += g[before * n + i];
        });
    }
    return out;
}

template <class S>
TensorT<S> flip_rows(TensorT<S> a) {
    check(a.rank() == 2, "flip_rows: expects 2-d tensor");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    auto out = TensorT<S>::zeros(a.shape());
    for (std::int64_t i = 0; i < m; ++i) std::copy_n(a.data() + i * n, n, out.data() + (m - 1 - i) * n);
    if (detail::want_grad(a)) {
        detail::record("flip_rows", out, [a, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += g[(m - 1 - i) * n + j];
        });
    }
    return out;
}

template <class S>
TensorT<S> repeat_row(TensorT<S> a, std::int64_t times) {
    check(a.rank() == 1 && times >= 1, "repeat_row: expects 1-d tensor and times >= 1");
    const std::int64_t n = a.dim(0);
    auto out = TensorT<S>::zeros({times, n});
    for (std::int64_t i = 0; i < times; ++i) std::copy_n(a.data(), n, out.data() + i * n);
    if (detail::want_grad(a)) {
        detail::record("repeat_row", out, [a, out, times, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::int64_t i = 0; i < times; ++i)
                for (std::int64_t j = 0; j < n; ++j) ga[j] += g[i * n + j];
        });
    }
    return out;
}

template <class S>
TensorT<S> concat(std::vector<TensorT<S>> parts, int axis) {
    check(!parts.empty() && (axis == 0 || axis == 1), "concat: needs parts and axis 0/1");
    for (const auto& p : parts) check(p.rank() == 2, "concat: expects 2-d parts");
    const std::int64_t fixed = axis == 0 ? parts[0].dim(1) : parts[0].dim(0);
    std::int64_t total = 0;
    for (const auto& p : parts) {
        check((axis == 0 ? p.dim(1) : p.dim(0)) == fixed, "concat: mismatched extents");
        total += axis == 0 ? p.dim(0) : p.dim(1);
    }
    TensorT<S> out = axis == 0 ? TensorT<S>::zeros({total, fixed}) : TensorT<S>::zeros({fixed, total});
    if (axis == 0) {
        std::int64_t r = 0;
        for (const auto& p : parts) {
            std::copy_n(p.data(), p.numel(), out.data() + r * fixed);
            r += p.dim(0);
        }
    } else {
        std::int64_t c = 0;
        for (const auto& p : parts) {
            const std::int64_t pn = p.dim(1);
            for (std::int64_t i = 0; i < fixed; ++i) std::copy_n(p.data() + i * pn, pn, out.data() + i * total + c);
            c += pn;
        }
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.needs_grad();
    if (Tape<S>::recording() && any) {
        detail::record("concat", out, [parts, out, axis, fixed, total]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            if (axis == 0) {
                std::int64_t r = 0;
                for (auto& p : parts) {
                    if (p.needs_grad()) {
                        auto& gp = p.grad();
                        for (std::int64_t i = 0; i < p.numel(); ++i) gp[i] += g[r * fixed + i];
                    }
                    r += p.dim(0);
                }
            } else {
                std::int64_t c = 0;
                for (auto& p : parts) {
                    const std::int64_t pn = p.dim(1);
                    if (p.needs_grad()) {
                        auto& gp = p.grad();
                        for (std::int64_t i = 0; i < fixed; ++i)
                            for (std::int64_t j = 0; j < pn; ++j) gp[i * pn + j] += g[i * total + c + j];
                    }
                    c += pn;
                }
            }
        });
    }
    return out;
}

// Stacks 1-d tensors of equal length into the rows of a matrix.
template <class S>
TensorT<S> stack_rows(std::vector<TensorT<S>> rows) {
    check(!rows.empty(), "stack_rows: no rows");
    const std::int64_t n = rows[0].dim(0);
    for (const auto& r : rows) check(r.rank() == 1 && r.dim(0) == n, "stack_rows: mismatched row lengths");
    auto out = TensorT<S>::zeros({static_cast<std::int64_t>(rows.size()), n});
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(rows[i].data(), n, out.data() + static_cast<std::int64_t>(i) * n);
    bool any = false;
    for (const auto& r : rows) any = any || r.needs_grad();
    if (Tape<S>::recording() && any) {
        detail::record("stack_rows", out, [rows, out, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (!rows[i].needs_grad()) continue;
                auto& gr = rows[i].grad();
                for (std::int64_t j = 0; j < n; ++j) gr[j] += g[static_cast<std::int64_t>(i) * n + j];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> reshape(TensorT<S> a, std::vector<std::int64_t> shape) {
    check(numel_of(shape) == a.numel(), "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto out = TensorT<S>::zeros(std::move(shape));
    std::copy_n(a.data(), a.numel(), out.data());
    if (detail::want_grad(a)) {
        detail::record("reshape", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            a.accumulate_grad(out.grad_view());
        });
    }
    return out;
}

template <class S>
TensorT<S> flatten(TensorT<S> a) {
    auto out = TensorT<S>::zeros({a.numel()});
    std::copy_n(a.data(), a.numel(), out.data());
    if (detail::want_grad(a)) {
        detail::record("flatten", out, [a, out]() mutable {
            if (!out.has_grad()) return;
            a.accumulate_grad(out.grad_view());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization and attention primitives

namespace detail {

// rowwise softmax of [m,n], max-subtracted
template <class S>
void softmax_rows_forward(const S* x, S* y, std::int64_t m, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const S* xr = x + i * n;
        S* yr = y + i * n;
        S mx = xr[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        S denom = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            denom += yr[j];
        }
        const S inv = S(1) / denom;
        for (std::int64_t j = 0; j < n; ++j) yr[j] *= inv;
    }
}

}  // namespace detail

// softmax along `axis` (last axis by default). 1-d tensors reduce over axis 0.
template <class S>
TensorT<S> softmax(TensorT<S> a, int axis = -1) {
    check(a.rank() == 1 || a.rank() == 2, "softmax: expects 1-d or 2-d tensor");
    if (a.rank() == 1) {
        check(axis == 0 || axis == -1, "softmax: bad axis for 1-d tensor");
        check(a.dim(0) >= 1, "softmax: empty axis");
        auto out = TensorT<S>::zeros(a.shape());
        detail::softmax_rows_forward(a.data(), out.data(), 1, a.dim(0));
        if (detail::want_grad(a)) {
            detail::record("softmax", out, [a, out]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad_view();
                auto& ga = a.grad();
                S dot = 0;
                for (std::size_t j = 0; j < g.size(); ++j) dot += g[j] * out.data()[j];
                for (std::size_t j = 0; j < g.size(); ++j) ga[j] += out.data()[j] * (g[j] - dot);
            });
        }
        return out;
    }
    if (axis == 0) return transpose(softmax(transpose(a), 1));
    check(axis == 1 || axis == -1, "softmax: bad axis for 2-d tensor");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    check(n >= 1, "softmax: empty axis");
    auto out = TensorT<S>::zeros(a.shape());
    detail::softmax_rows_forward(a.data(), out.data(), m, n);
    if (detail::want_grad(a)) {
        detail::record("softmax", out, [a, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.grad();
            for (std::int64_t i = 0; i < m; ++i) {
                const S* gr = g.data() + i * n;
                const S* yr = out.data() + i * n;
                S dot = 0;
                for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

// Per-last-axis standardization followed by affine gain/bias.
template <class S>
TensorT<S> layer_norm(TensorT<S> x, TensorT<S> gain, TensorT<S> bias, double eps = 1e-5) {
    check(x.rank() == 1 || x.rank() == 2, "layer_norm: expects 1-d or 2-d tensor");
    const std::int64_t n = x.rank() == 1 ? x.dim(0) : x.dim(1);
    const std::int64_t m = x.rank() == 1 ? 1 : x.dim(0);
    check(gain.rank() == 1 && gain.dim(0) == n && bias.rank() == 1 && bias.dim(0) == n,
          "layer_norm: gain/bias must have shape [" + std::to_string(n) + "]");
    auto out = TensorT<S>::zeros(x.shape());
    std::vector<S> xhat(static_cast<std::size_t>(m * n));
    std::vector<S> inv_sd(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        const S* xr = x.data() + i * n;
        S mu = 0;
        for (std::int64_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<S>(n);
        S var = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            const S d = xr[j] - mu;
            var += d * d;
        }
        var /= static_cast<S>(n);
        const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
        inv_sd[static_cast<std::size_t>(i)] = inv;
        for (std::int64_t j = 0; j < n; ++j) {
            const S h = (xr[j] - mu) * inv;
            xhat[static_cast<std::size_t>(i * n + j)] = h;
            out.data()[i * n + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    if (detail::want_grad(x, gain, bias)) {
        detail::record("layer_norm", out,
                       [x, gain, bias, out, m, n, xhat = std::move(xhat), inv_sd = std::move(inv_sd)]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            if (bias.needs_grad()) {
                auto& gb = bias.grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
            if (gain.needs_grad()) {
                auto& gg = gain.grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[static_cast<std::size_t>(i * n + j)];
            }
            if (x.needs_grad()) {
                auto& gx = x.grad();
                for (std::int64_t i = 0; i < m; ++i) {
                    S s1 = 0, s2 = 0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const S q = g[i * n + j] * gain.data()[j];
                        s1 += q;
                        s2 += q * xhat[static_cast<std::size_t>(i * n + j)];
                    }
                    s1 /= static_cast<S>(n);
                    s2 /= static_cast<S>(n);
                    const S inv = inv_sd[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < n; ++j) {
                        const S q = g[i * n + j] * gain.data()[j];
                        gx[i * n + j] += (q - s1 - xhat[static_cast<std::size_t>(i * n + j)] * s2) * inv;
                    }
                }
            }
        });
    }
    return out;
}

// Rowwise projection onto the unit sphere. Rows shorter than `floor` are
// scaled as if their norm were `floor` to keep the op total.
template <class S>
TensorT<S> l2_normalize_rows(TensorT<S> x, double floor = 1e-12) {
    check(x.rank() == 2, "l2_normalize_rows: expects 2-d tensor");
    const std::int64_t m = x.dim(0), n = x.dim(1);
    auto out = TensorT<S>::zeros(x.shape());
    std::vector<S> inv_norm(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        S ss = 0;
        for (std::int64_t j = 0; j < n; ++j) ss += x.data()[i * n + j] * x.data()[i * n + j];
        const S r = std::max(std::sqrt(ss), static_cast<S>(floor));
        const S inv = S(1) / r;
        inv_norm[static_cast<std::size_t>(i)] = inv;
        for (std::int64_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] * inv;
    }
    if (detail::want_grad(x)) {
        detail::record("l2_normalize_rows", out, [x, out, m, n, inv_norm = std::move(inv_norm)]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            auto& gx = x.grad();
            for (std::int64_t i = 0; i < m; ++i) {
                S dot = 0;
                for (std::int64_t j = 0; j < n; ++j) dot += g[i * n + j] * out.data()[i * n + j];
                const S inv = inv_norm[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < n; ++j)
                    gx[i * n + j] += (g[i * n + j] - out.data()[i * n + j] * dot) * inv;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convenience operators

template <class S>
TensorT<S> operator+(TensorT<S> a, TensorT<S> b) {
    return add(a, b);
}
template <class S>
TensorT<S> operator-(TensorT<S> a, TensorT<S> b) {
    return sub(a, b);
}
template <class S>
TensorT<S> operator*(TensorT<S> a, TensorT<S> b) {
    return mul(a, b);
}

}  // namespace cmvim
