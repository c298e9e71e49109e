#pragma once

// Named parameter registry plus the small layer structs built on it.
// Layers hold indices into the registry rather than tensor handles, so a
// deep clone of the registry (EMA shadow, finite-difference workers) reuses
// the same layer objects unchanged.

#include <cstdint>
#include <string>
#include <vector>

#include "cmvim/rng.hpp"
#include "cmvim/tensor.hpp"

namespace cmvim {

template <class S>
class Params {
  public:
    struct Entry {
        std::string name;
        TensorT<S> t;
        bool in_target_path = false;  // mirrored by the EMA shadow
    };

    int add(const std::string& name, TensorT<S> t) {
        t.set_needs_grad(true);
        entries_.push_back({name, std::move(t), target_scope_});
        return static_cast<int>(entries_.size()) - 1;
    }

    TensorT<S>& operator[](int idx) { return entries_[static_cast<std::size_t>(idx)].t; }
    const TensorT<S>& operator[](int idx) const { return entries_[static_cast<std::size_t>(idx)].t; }

    std::size_t size() const { return entries_.size(); }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    Entry& entry(std::size_t i) { return entries_[i]; }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) e.t.zero_grad();
    }

    // Deep copy: fresh storage, identical names/order/flags, so indices carry over.
    Params clone() const {
        Params p;
        p.target_scope_ = target_scope_;
        p.entries_.reserve(entries_.size());
        for (const auto& e : entries_) p.entries_.push_back({e.name, e.t.clone(), e.in_target_path});
        return p;
    }

    // Entries added while the scope flag is set become part of the EMA target copy.
    void set_target_scope(bool on) { target_scope_ = on; }

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name == name) return static_cast<int>(i);
        return -1;
    }

  private:
    std::vector<Entry> entries_;
    bool target_scope_ = false;
};

// ---------------------------------------------------------------------------
// initializers

template <class S>
TensorT<S> init_normal(std::vector<std::int64_t> shape, double stddev, Rng& rng) {
    auto t = TensorT<S>::zeros(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(rng.normal(0.0, stddev));
    return t;
}

template <class S>
TensorT<S> init_uniform(std::vector<std::int64_t> shape, double lo, double hi, Rng& rng) {
    auto t = TensorT<S>::zeros(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

// ---------------------------------------------------------------------------
// layers

template <class S>
struct Linear {
    int w = -1, b = -1;
    std::int64_t in = 0, out = 0;

    Linear() = default;

    Linear(Params<S>& P, const std::string& name, std::int64_t in_dim, std::int64_t out_dim, Rng& rng,
           double w_std = 0.02, bool zero_init = false) {
        in = in_dim;
        out = out_dim;
        w = P.add(name + ".w", zero_init ? TensorT<S>::zeros({in_dim, out_dim})
                                         : init_normal<S>({in_dim, out_dim}, w_std, rng));
        b = P.add(name + ".b", TensorT<S>::zeros({out_dim}));
    }

    TensorT<S> fwd(Params<S>& P, const TensorT<S>& x) const {
        if (x.rank() == 1) return flatten(add_rowwise(matmul(reshape(x, {1, in}), P[w]), P[b]));
        return add_rowwise(matmul(x, P[w]), P[b]);
    }
};

template <class S>
struct LayerNorm {
    int gain = -1, bias = -1;
    double eps = 1e-5;

    LayerNorm() = default;

    LayerNorm(Params<S>& P, const std::string& name, std::int64_t dim) {
        gain = P.add(name + ".gain", TensorT<S>::full({dim}, S(1)));
        bias = P.add(name + ".bias", TensorT<S>::zeros({dim}));
    }

    TensorT<S> fwd(Params<S>& P, const TensorT<S>& x) const { return layer_norm(x, P[gain], P[bias], eps); }
};

// Two-layer MLP with silu in between. Fan-in-scaled init keeps the output on
// a unit scale, which matters for heads feeding L2 normalization.
template <class S>
struct Mlp {
    Linear<S> l1, l2;

    Mlp() = default;

    Mlp(Params<S>& P, const std::string& name, std::int64_t in_dim, std::int64_t hidden, std::int64_t out_dim,
        Rng& rng, bool zero_last = false)
        : l1(P, name + ".l1", in_dim, hidden, rng, 1.0 / std::sqrt(static_cast<double>(in_dim))),
          l2(P, name + ".l2", hidden, out_dim, rng, 1.0 / std::sqrt(static_cast<double>(hidden)), zero_last) {}

    TensorT<S> fwd(Params<S>& P, const TensorT<S>& x) const { return l2.fwd(P, silu(l1.fwd(P, x))); }
};

// Scaled dot-product attention core: softmax(q k^T / sqrt(d)) v.
template <class S>
TensorT<S> attention_core(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v) {
    check(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 && q.dim(1) == k.dim(1) && k.dim(0) == v.dim(0),
          "attention_core: bad shapes");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    auto logits = scale(matmul(q, transpose(k)), inv_sqrt_d);
    return matmul(softmax(logits, 1), v);
}

// Multi-head cross attention with residual on the queries. Per-head q/k/v
// maps are stored as separate tensors; the output map acts on the head concat.
template <class S>
struct CrossAttention {
    struct Head {
        int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1;
    };
    std::vector<Head> heads;
    Linear<S> out;
    std::int64_t dim = 0, head_dim = 0;

    CrossAttention() = default;

    CrossAttention(Params<S>& P, const std::string& name, std::int64_t model_dim, int n_heads, Rng& rng) {
        check(n_heads >= 1 && model_dim % n_heads == 0, "cross_attention: heads must divide width");
        dim = model_dim;
        head_dim = model_dim / n_heads;
        for (int h = 0; h < n_heads; ++h) {
            Head hd;
            const std::string base = name + ".head" + std::to_string(h);
            hd.wq = P.add(base + ".wq", init_normal<S>({model_dim, head_dim}, 0.02, rng));
            hd.bq = P.add(base + ".bq", TensorT<S>::zeros({head_dim}));
            hd.wk = P.add(base + ".wk", init_normal<S>({model_dim, head_dim}, 0.02, rng));
            hd.bk = P.add(base + ".bk", TensorT<S>::zeros({head_dim}));
            hd.wv = P.add(base + ".wv", init_normal<S>({model_dim, head_dim}, 0.02, rng));
            hd.bv = P.add(base + ".bv", TensorT<S>::zeros({head_dim}));
            heads.push_back(hd);
        }
        out = Linear<S>(P, name + ".out", model_dim, model_dim, rng);
    }

    TensorT<S> fwd(Params<S>& P, const TensorT<S>& queries, const TensorT<S>& kv) const {
        std::vector<TensorT<S>> outs;
        outs.reserve(heads.size());
        for (const auto& h : heads) {
            auto q = add_rowwise(matmul(queries, P[h.wq]), P[h.bq]);
            auto k = add_rowwise(matmul(kv, P[h.wk]), P[h.bk]);
            auto v = add_rowwise(matmul(kv, P[h.wv]), P[h.bv]);
            outs.push_back(attention_core(q, k, v));
        }
        auto merged = outs.size() == 1 ? outs[0] : concat(outs, 1);
        return add(queries, out.fwd(P, merged));
    }
};

}  // namespace cmvim
