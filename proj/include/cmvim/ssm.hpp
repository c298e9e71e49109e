#pragma once

// Selective state-space scan and the bidirectional Vim block.
//
// The scan realizes h_t = Abar_t h_{t-1} + Bbar_t u_t, y_t = C_t h_t + D u_t
// with input-dependent step sizes, discretized by zero-order hold
// (Abar = exp(dt*A), Bbar = (Abar-1)/A * B) or the Euler simplification
// (Bbar = dt*B). The forward pass is blocked: per-block affine transfers
// (state product and from-zero response) are composed across blocks, then a
// second pass materializes states and outputs. Backward is the hand-written
// reverse recurrence over the cached states.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "cmvim/nn.hpp"
#include "cmvim/tensor.hpp"

namespace cmvim {

namespace ssm {

// expm1(x)/x with the x -> 0 limit of 1.
inline double expm1_over_x(double x) {
    if (std::abs(x) < 1e-100) return 1.0;
    return std::expm1(x) / x;
}

// (x e^x - e^x + 1)/x^2; series 1/2 + x/3 + x^2/8 + x^3/30 + x^4/144 near 0.
inline double dzoh_da_factor(double x) {
    if (std::abs(x) < 1e-3) {
        return 0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0 + x / 144.0)));
    }
    const double ex = std::exp(x);
    return (x * ex - ex + 1.0) / (x * x);
}

inline double zoh_abar(double dt, double a) { return std::exp(dt * a); }

inline double zoh_bbar(double dt, double a, double b) { return dt * expm1_over_x(dt * a) * b; }

}  // namespace ssm

// Zero-order-hold (or Euler) discretization of the per-step transition.
// delta: [L, d_inner], a: [d_inner, N], b: [L, N]; outputs are [L, d_inner, N].
template <class S>
std::pair<TensorT<S>, TensorT<S>> discretize(TensorT<S> delta, TensorT<S> a, TensorT<S> b,
                                             bool zoh = true) {
    check(delta.rank() == 2 && a.rank() == 2 && b.rank() == 2, "discretize: expects 2-d inputs");
    const std::int64_t L = delta.dim(0), di = delta.dim(1), N = a.dim(1);
    check(a.dim(0) == di, "discretize: A rows must match d_inner");
    check(b.dim(0) == L && b.dim(1) == N, "discretize: B must be [L,N]");
    auto abar = TensorT<S>::zeros({L, di, N});
    auto bbar = TensorT<S>::zeros({L, di, N});
    for (std::int64_t t = 0; t < L; ++t) {
        for (std::int64_t d = 0; d < di; ++d) {
            const double dt = static_cast<double>(delta.data()[t * di + d]);
            S* ar = abar.data() + (t * di + d) * N;
            S* br = bbar.data() + (t * di + d) * N;
            for (std::int64_t n = 0; n < N; ++n) {
                const double av = static_cast<double>(a.data()[d * N + n]);
                const double bv = static_cast<double>(b.data()[t * N + n]);
                ar[n] = static_cast<S>(ssm::zoh_abar(dt, av));
                br[n] = static_cast<S>(zoh ? ssm::zoh_bbar(dt, av, bv) : dt * bv);
            }
        }
    }
    return {abar, bbar};
}

// Selective scan over one sequence. u, delta: [L, d_inner]; a: [d_inner, N]
// (negative decay rates); b, c: [L, N]; d_skip: [d_inner]. Returns [L, d_inner].
template <class S>
TensorT<S> selective_scan(TensorT<S> u, TensorT<S> delta, TensorT<S> a, TensorT<S> b,
                          TensorT<S> c, TensorT<S> d_skip, bool zoh = true) {
    check(u.rank() == 2, "selective_scan: u must be 2-d");
    const std::int64_t L = u.dim(0), di = u.dim(1);
    check(L >= 1, "selective_scan: empty sequence");
    check(delta.rank() == 2 && delta.dim(0) == L && delta.dim(1) == di, "selective_scan: delta shape mismatch");
    check(a.rank() == 2 && a.dim(0) == di, "selective_scan: A shape mismatch");
    const std::int64_t N = a.dim(1);
    check(b.rank() == 2 && b.dim(0) == L && b.dim(1) == N, "selective_scan: B shape mismatch");
    check(c.rank() == 2 && c.dim(0) == L && c.dim(1) == N, "selective_scan: C shape mismatch");
    check(d_skip.rank() == 1 && d_skip.dim(0) == di, "selective_scan: D shape mismatch");

    constexpr std::int64_t kBlock = 32;
    const std::int64_t n_blocks = (L + kBlock - 1) / kBlock;

    auto out = TensorT<S>::zeros({L, di});
    // Cached per-step transition and states for the backward pass.
    auto abar = std::make_shared<std::vector<S>>(static_cast<std::size_t>(L * di * N));
    auto bbar = std::make_shared<std::vector<S>>(static_cast<std::size_t>(L * di * N));
    auto hist = std::make_shared<std::vector<S>>(static_cast<std::size_t>(L * di * N));

    std::vector<S> prod(static_cast<std::size_t>(N));
    std::vector<S> resp(static_cast<std::size_t>(N));
    std::vector<S> entry(static_cast<std::size_t>((n_blocks + 1) * N));
    std::vector<S> state(static_cast<std::size_t>(N));

    for (std::int64_t d = 0; d < di; ++d) {
        // Pass 1: per-step transitions plus per-block transfer (prod, resp).
        std::fill(entry.begin(), entry.end(), S(0));
        for (std::int64_t blk = 0; blk < n_blocks; ++blk) {
            const std::int64_t t0 = blk * kBlock;
            const std::int64_t t1 = std::min(L, t0 + kBlock);
            std::fill(prod.begin(), prod.end(), S(1));
            std::fill(resp.begin(), resp.end(), S(0));
            for (std::int64_t t = t0; t < t1; ++t) {
                const double dt = static_cast<double>(delta.data()[t * di + d]);
                const S ut = u.data()[t * di + d];
                S* ar = abar->data() + (t * di + d) * N;
                S* br = bbar->data() + (t * di + d) * N;
                for (std::int64_t n = 0; n < N; ++n) {
                    const double av = static_cast<double>(a.data()[d * N + n]);
                    const double bv = static_cast<double>(b.data()[t * N + n]);
                    const S ab = static_cast<S>(ssm::zoh_abar(dt, av));
                    const S bb = static_cast<S>(zoh ? ssm::zoh_bbar(dt, av, bv) : dt * bv);
                    ar[n] = ab;
                    br[n] = bb;
                    prod[static_cast<std::size_t>(n)] *= ab;
                    resp[static_cast<std::size_t>(n)] = ab * resp[static_cast<std::size_t>(n)] + bb * ut;
                }
            }
            S* e_next = entry.data() + (blk + 1) * N;
            const S* e_cur = entry.data() + blk * N;
            for (std::int64_t n = 0; n < N; ++n)
                e_next[n] = prod[static_cast<std::size_t>(n)] * e_cur[n] + resp[static_cast<std::size_t>(n)];
        }
        // Pass 2: materialize states from each block's entry state and emit y.
        for (std::int64_t blk = 0; blk < n_blocks; ++blk) {
            const std::int64_t t0 = blk * kBlock;
            const std::int64_t t1 = std::min(L, t0 + kBlock);
            std::copy_n(entry.data() + blk * N, N, state.data());
            for (std::int64_t t = t0; t < t1; ++t) {
                const S* ar = abar->data() + (t * di + d) * N;
                const S* br = bbar->data() + (t * di + d) * N;
                S* hr = hist->data() + (t * di + d) * N;
                const S ut = u.data()[t * di + d];
                const S* cr = c.data() + t * N;
                S acc = 0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const S h = ar[n] * state[static_cast<std::size_t>(n)] + br[n] * ut;
                    state[static_cast<std::size_t>(n)] = h;
                    hr[n] = h;
                    acc += cr[n] * h;
                }
                out.data()[t * di + d] = acc + d_skip.data()[d] * ut;
            }
        }
    }

    if (Tape<S>::recording() &&
        (u.needs_grad() || delta.needs_grad() || a.needs_grad() || b.needs_grad() || c.needs_grad() ||
         d_skip.needs_grad())) {
        detail::record("selective_scan", out, [u, delta, a, b, c, d_skip, out, abar, bbar, hist, L, di, N,
                                               zoh]() mutable {
            if (!out.has_grad()) return;
            const auto& gy = out.grad_view();
            std::vector<S> carry(static_cast<std::size_t>(N));
            for (std::int64_t d = 0; d < di; ++d) {
                std::fill(carry.begin(), carry.end(), S(0));
                for (std::int64_t t = L - 1; t >= 0; --t) {
                    const S g = gy[t * di + d];
                    const S ut = u.data()[t * di + d];
                    const double dt = static_cast<double>(delta.data()[t * di + d]);
                    S gu_td = g * d_skip.data()[d];
                    if (d_skip.needs_grad()) d_skip.grad()[d] += g * ut;
                    S gdt = 0;
                    const S* ar = abar->data() + (t * di + d) * N;
                    const S* br = bbar->data() + (t * di + d) * N;
                    const S* hr = hist->data() + (t * di + d) * N;
                    const S* hprev = t > 0 ? hist->data() + ((t - 1) * di + d) * N : nullptr;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const S gh = g * c.data()[t * N + n] + carry[static_cast<std::size_t>(n)];
                        if (c.needs_grad()) c.grad()[t * N + n] += g * hr[n];
                        const S hp = hprev ? hprev[n] : S(0);
                        const S gab = gh * hp;
                        const S gbb = gh * ut;
                        gu_td += gh * br[n];
                        const double av = static_cast<double>(a.data()[d * N + n]);
                        const double bv = static_cast<double>(b.data()[t * N + n]);
                        const double abd = static_cast<double>(ar[n]);
                        double gdt_d = static_cast<double>(gab) * av * abd;
                        double ga_d = static_cast<double>(gab) * dt * abd;
                        if (zoh) {
                            const double x = dt * av;
                            gdt_d += static_cast<double>(gbb) * bv * abd;
                            if (b.needs_grad())
                                b.grad()[t * N + n] += static_cast<S>(static_cast<double>(gbb) * dt * ssm::expm1_over_x(x));
                            ga_d += static_cast<double>(gbb) * bv * dt * dt * ssm::dzoh_da_factor(x);
                        } else {
                            gdt_d += static_cast<double>(gbb) * bv;
                            if (b.needs_grad()) b.grad()[t * N + n] += static_cast<S>(static_cast<double>(gbb) * dt);
                        }
                        gdt += static_cast<S>(gdt_d);
                        if (a.needs_grad()) a.grad()[d * N + n] += static_cast<S>(ga_d);
                        carry[static_cast<std::size_t>(n)] = gh * ar[n];
                    }
                    if (delta.needs_grad()) delta.grad()[t * di + d] += gdt;
                    if (u.needs_grad()) u.grad()[t * di + d] += gu_td;
                }
            }
        });
    }
    return out;
}

// Depthwise causal convolution over the sequence axis. x: [L, ch], w: [ch, k],
// bias: [ch]; positions before the sequence start read as zero.
template <class S>
TensorT<S> causal_conv1d(TensorT<S> x, TensorT<S> w, TensorT<S> bias) {
    check(x.rank() == 2 && w.rank() == 2 && bias.rank() == 1, "causal_conv1d: bad ranks");
    const std::int64_t L = x.dim(0), ch = x.dim(1), k = w.dim(1);
    check(w.dim(0) == ch && bias.dim(0) == ch, "causal_conv1d: channel mismatch");
    auto out = TensorT<S>::zeros({L, ch});
    for (std::int64_t t = 0; t < L; ++t) {
        for (std::int64_t cch = 0; cch < ch; ++cch) {
            S acc = bias.data()[cch];
            for (std::int64_t j = 0; j < k; ++j) {
                const std::int64_t s = t - (k - 1) + j;
                if (s >= 0) acc += w.data()[cch * k + j] * x.data()[s * ch + cch];
            }
            out.data()[t * ch + cch] = acc;
        }
    }
    if (detail::want_grad(x, w, bias)) {
        detail::record("causal_conv1d", out, [x, w, bias, out, L, ch, k]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            for (std::int64_t t = 0; t < L; ++t) {
                for (std::int64_t cch = 0; cch < ch; ++cch) {
                    const S gt = g[t * ch + cch];
                    if (bias.needs_grad()) bias.grad()[cch] += gt;
                    for (std::int64_t j = 0; j < k; ++j) {
                        const std::int64_t s = t - (k - 1) + j;
                        if (s < 0) continue;
                        if (w.needs_grad()) w.grad()[cch * k + j] += gt * x.data()[s * ch + cch];
                        if (x.needs_grad()) x.grad()[s * ch + cch] += gt * w.data()[cch * k + j];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Vim block

struct SsmDims {
    std::int64_t d_model = 0;
    std::int64_t d_inner = 0;
    std::int64_t d_state = 16;
    std::int64_t dt_rank = 1;
    std::int64_t conv_width = 4;
    bool zoh = true;

    static SsmDims make(std::int64_t d_model, std::int64_t expand, std::int64_t d_state, std::int64_t conv_width,
                        bool zoh) {
        SsmDims s;
        s.d_model = d_model;
        s.d_inner = expand * d_model;
        s.d_state = d_state;
        s.dt_rank = std::max<std::int64_t>(1, (d_model + 15) / 16);
        s.conv_width = conv_width;
        s.zoh = zoh;
        return s;
    }
};

inline double softplus_inv(double y) { return std::log(std::expm1(y)); }

// One scan direction: conv -> silu -> data-dependent (dt, B, C) -> scan.
template <class S>
struct SsmBranch {
    int conv_w = -1, conv_b = -1;
    int w_dt = -1, w_b = -1, w_c = -1;
    int dt_w = -1, dt_b = -1;
    int a_log = -1, d_skip = -1;
    SsmDims dims;

    SsmBranch() = default;

    SsmBranch(Params<S>& P, const std::string& name, const SsmDims& d, Rng& rng) : dims(d) {
        const double conv_bound = 1.0 / std::sqrt(static_cast<double>(d.conv_width));
        conv_w = P.add(name + ".conv_w", init_uniform<S>({d.d_inner, d.conv_width}, -conv_bound, conv_bound, rng));
        conv_b = P.add(name + ".conv_b", TensorT<S>::zeros({d.d_inner}));
        w_dt = P.add(name + ".w_dt", init_normal<S>({d.d_inner, d.dt_rank}, 0.02, rng));
        w_b = P.add(name + ".w_b", init_normal<S>({d.d_inner, d.d_state}, 0.02, rng));
        w_c = P.add(name + ".w_c", init_normal<S>({d.d_inner, d.d_state}, 0.02, rng));
        const double dt_bound = 1.0 / std::sqrt(static_cast<double>(d.dt_rank));
        dt_w = P.add(name + ".dt_w", init_uniform<S>({d.dt_rank, d.d_inner}, -dt_bound, dt_bound, rng));
        // Bias chosen so softplus(bias) spans [1e-3, 1e-1] log-uniformly.
        auto dtb = TensorT<S>::zeros({d.d_inner});
        for (std::int64_t i = 0; i < d.d_inner; ++i) {
            const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            dtb.data()[i] = static_cast<S>(softplus_inv(dt));
        }
        dt_b = P.add(name + ".dt_b", std::move(dtb));
        // Real S4D-style init: decay rates 1..N per channel, stored in log space.
        auto al = TensorT<S>::zeros({d.d_inner, d.d_state});
        for (std::int64_t i = 0; i < d.d_inner; ++i)
            for (std::int64_t n = 0; n < d.d_state; ++n)
                al.data()[i * d.d_state + n] = static_cast<S>(std::log(static_cast<double>(n + 1)));
        a_log = P.add(name + ".a_log", std::move(al));
        d_skip = P.add(name + ".d_skip", TensorT<S>::full({d.d_inner}, S(1)));
    }

    TensorT<S> run(Params<S>& P, TensorT<S> xin) const {
        auto xc = silu(causal_conv1d(xin, P[conv_w], P[conv_b]));
        auto dt_low = matmul(xc, P[w_dt]);
        auto delta = softplus(add_rowwise(matmul(dt_low, P[dt_w]), P[dt_b]));
        auto b_seq = matmul(xc, P[w_b]);
        auto c_seq = matmul(xc, P[w_c]);
        auto a = neg(exp(P[a_log]));
        return selective_scan(xc, delta, a, b_seq, c_seq, P[d_skip], dims.zoh);
    }
};

// Residual bidirectional block: norm -> in/gate projections -> forward branch
// and reversed backward branch -> silu gate -> shared out projection (zero at
// init, so the block starts as the identity) -> mean of branches + residual.
template <class S>
struct VimBlock {
    LayerNorm<S> norm;
    Linear<S> in_proj, gate_proj, out_proj;
    SsmBranch<S> fwd_branch, bwd_branch;
    SsmDims dims;

    VimBlock() = default;

    VimBlock(Params<S>& P, const std::string& name, const SsmDims& d, Rng& rng, bool tie_branches = false)
        : dims(d) {
        norm = LayerNorm<S>(P, name + ".norm", d.d_model);
        in_proj = Linear<S>(P, name + ".in_proj", d.d_model, d.d_inner, rng);
        gate_proj = Linear<S>(P, name + ".gate_proj", d.d_model, d.d_inner, rng);
        out_proj = Linear<S>(P, name + ".out_proj", d.d_inner, d.d_model, rng, 0.02, /*zero_init=*/true);
        fwd_branch = SsmBranch<S>(P, name + ".fwd", d, rng);
        bwd_branch = tie_branches ? fwd_branch : SsmBranch<S>(P, name + ".bwd", d, rng);
    }

    TensorT<S> fwd(Params<S>& P, TensorT<S> tokens) const {
        check(tokens.rank() == 2 && tokens.dim(1) == dims.d_model,
              "vim_block: token width " + shape_str(tokens.shape()) + " does not match d_model " +
                  std::to_string(dims.d_model));
        check(tokens.dim(0) >= 1, "vim_block: empty sequence");
        auto x = norm.fwd(P, tokens);
        auto xi = in_proj.fwd(P, x);
        auto gate = silu(gate_proj.fwd(P, x));
        auto y_fwd = fwd_branch.run(P, xi);
        auto y_bwd = flip_rows(bwd_branch.run(P, flip_rows(xi)));
        auto merged = scale(add(mul(y_fwd, gate), mul(y_bwd, gate)), 0.5);
        return add(tokens, out_proj.fwd(P, merged));
    }
};

// Classification head over the class token: norm then a 2-layer MLP.
template <class S>
struct PredictHead {
    LayerNorm<S> norm;
    Linear<S> l1, l2;

    PredictHead() = default;

    PredictHead(Params<S>& P, const std::string& name, std::int64_t dim, std::int64_t n_classes, Rng& rng) {
        norm = LayerNorm<S>(P, name + ".norm", dim);
        l1 = Linear<S>(P, name + ".l1", dim, dim, rng);
        l2 = Linear<S>(P, name + ".l2", dim, n_classes, rng, 0.02, /*zero_init=*/true);
    }

    // tokens: [L, D] with the class token at row 0. Returns logits [n_classes].
    TensorT<S> fwd(Params<S>& P, TensorT<S> tokens) const {
        auto cls = slice_rows(tokens, 0, 1);
        return flatten(l2.fwd(P, silu(l1.fwd(P, norm.fwd(P, cls)))));
    }
};

}  // namespace cmvim
