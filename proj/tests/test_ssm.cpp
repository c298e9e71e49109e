#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cmvim/ssm.hpp"
#include "testutil.hpp"

using namespace cmvim;
using T64 = TensorT<double>;
using T32 = TensorT<float>;
using testutil::naive_scan;
using testutil::rel_err;

TEST_CASE("discretize closed-form point: A=-1, dt=ln2") {
    auto delta = T64::from({1, 1}, {std::log(2.0)});
    auto a = T64::from({1, 1}, {-1.0});
    auto b = T64::from({1, 1}, {1.0});
    auto [abar, bbar] = discretize(delta, a, b);
    CHECK(abar.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(bbar.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("discretize limit dt -> 0: state frozen") {
    auto delta = T64::from({1, 1}, {1e-12});
    auto a = T64::from({1, 1}, {-2.0});
    auto b = T64::from({1, 1}, {3.0});
    auto [abar, bbar] = discretize(delta, a, b);
    CHECK(abar.data()[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::abs(bbar.data()[0]) < 1e-10);
}

TEST_CASE("discretize near-zero A agrees with the Euler limit") {
    auto delta = T64::from({1, 1}, {0.37});
    auto a = T64::from({1, 1}, {-1e-8});
    auto b = T64::from({1, 1}, {2.0});
    auto [abar_zoh, bbar_zoh] = discretize(delta, a, b, true);
    auto [abar_eul, bbar_eul] = discretize(delta, a, b, false);
    CHECK(rel_err(bbar_zoh.data()[0], bbar_eul.data()[0]) < 1e-8);
    CHECK(abar_zoh.data()[0] == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("selective_scan matches the scalar-chain recurrence by hand") {
    // A=-1, dt=ln2 gives abar=bbar=1/2; u=[1,1] -> h: 1/2, 3/4.
    auto u = T64::from({2, 1}, {1, 1});
    auto delta = T64::full({2, 1}, std::log(2.0));
    auto a = T64::from({1, 1}, {-1.0});
    auto b = T64::full({2, 1}, 1.0);
    auto c = T64::full({2, 1}, 1.0);
    auto d_skip = T64::zeros({1});
    auto y = selective_scan(u, delta, a, b, c, d_skip);
    CHECK(y.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("selective_scan of zero input is zero") {
    Rng rng(10);
    auto u = T64::zeros({9, 4});
    auto delta = init_uniform<double>({9, 4}, 0.01, 0.4, rng);
    auto a = init_uniform<double>({4, 3}, -2.0, -0.1, rng);
    auto b = init_normal<double>({9, 3}, 1.0, rng);
    auto c = init_normal<double>({9, 3}, 1.0, rng);
    auto d_skip = init_normal<double>({4}, 1.0, rng);
    auto y = selective_scan(u, delta, a, b, c, d_skip);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("selective_scan rejects empty sequences") {
    auto u = T64::zeros({0, 2});
    auto delta = T64::zeros({0, 2});
    auto a = T64::full({2, 2}, -1.0);
    auto b = T64::zeros({0, 2});
    auto c = T64::zeros({0, 2});
    auto d_skip = T64::zeros({2});
    CHECK_THROWS_AS(selective_scan(u, delta, a, b, c, d_skip), std::invalid_argument);
}

template <class S>
double scan_vs_naive_case(Rng& rng, std::int64_t L, std::int64_t di, std::int64_t N, bool zoh) {
    auto u = init_normal<S>({L, di}, 1.0, rng);
    auto delta = TensorT<S>::zeros({L, di});
    for (std::int64_t i = 0; i < delta.numel(); ++i)
        delta.data()[i] = static_cast<S>(std::exp(rng.uniform(std::log(1e-3), std::log(0.5))));
    auto a = TensorT<S>::zeros({di, N});
    for (std::int64_t i = 0; i < a.numel(); ++i) a.data()[i] = static_cast<S>(-std::exp(rng.uniform(-4.0, 1.5)));
    auto b = init_normal<S>({L, N}, 1.0, rng);
    auto c = init_normal<S>({L, N}, 1.0, rng);
    auto d_skip = init_normal<S>({di}, 1.0, rng);
    auto y = selective_scan(u, delta, a, b, c, d_skip, zoh);
    auto ref = naive_scan<S>(u.values(), delta.values(), a.values(), b.values(), c.values(), d_skip.values(), L, di,
                             N, zoh);
    double scale_floor = 0;
    for (const auto v : ref) scale_floor = std::max(scale_floor, std::abs(static_cast<double>(v)));
    scale_floor = std::max(1e-12, 1e-3 * scale_floor);
    double worst = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        const double av = static_cast<double>(y.data()[i]);
        const double bv = static_cast<double>(ref[static_cast<std::size_t>(i)]);
        worst = std::max(worst, std::abs(av - bv) / std::max({std::abs(av), std::abs(bv), scale_floor}));
    }
    return worst;
}

TEST_CASE("blocked scan equals the naive recurrence (float64)") {
    Rng rng(11);
    for (int rep = 0; rep < 40; ++rep) {
        const std::int64_t L = 1 + static_cast<std::int64_t>(rng.below(256));
        const std::int64_t di = 1 + static_cast<std::int64_t>(rng.below(32));
        const std::int64_t N = 1 + static_cast<std::int64_t>(rng.below(16));
        CHECK(scan_vs_naive_case<double>(rng, L, di, N, rep % 2 == 0) < 1e-10);
    }
}

TEST_CASE("blocked scan equals the naive recurrence (float32)") {
    Rng rng(12);
    for (int rep = 0; rep < 40; ++rep) {
        const std::int64_t L = 1 + static_cast<std::int64_t>(rng.below(256));
        const std::int64_t di = 1 + static_cast<std::int64_t>(rng.below(32));
        const std::int64_t N = 1 + static_cast<std::int64_t>(rng.below(16));
        CHECK(scan_vs_naive_case<float>(rng, L, di, N, true) < 1e-5);
    }
}

TEST_CASE("decay stability: all transitions shrink and the tail state decays") {
    Rng rng(13);
    const std::int64_t L = 24, di = 3, N = 4;
    auto delta = init_uniform<double>({L, di}, 0.01, 0.5, rng);
    auto a_log = init_normal<double>({di, N}, 0.5, rng);
    auto a = neg(exp(a_log));
    auto b = init_normal<double>({L, N}, 1.0, rng);
    auto [abar, bbar] = discretize(delta, a, b);
    for (std::int64_t i = 0; i < abar.numel(); ++i) {
        CHECK(abar.data()[i] > 0.0);
        CHECK(abar.data()[i] < 1.0);
    }
    // Zero-input tail: state norms decay monotonically once input stops.
    auto u = T64::zeros({L, di});
    for (std::int64_t t = 0; t < 6; ++t)
        for (std::int64_t d = 0; d < di; ++d) u.data()[t * di + d] = rng.normal();
    std::vector<double> h(static_cast<std::size_t>(N));
    for (std::int64_t d = 0; d < di; ++d) {
        std::fill(h.begin(), h.end(), 0.0);
        double prev_norm = -1;
        for (std::int64_t t = 0; t < L; ++t) {
            double norm = 0;
            for (std::int64_t n = 0; n < N; ++n) {
                h[static_cast<std::size_t>(n)] = abar.data()[(t * di + d) * N + n] * h[static_cast<std::size_t>(n)] +
                                                 bbar.data()[(t * di + d) * N + n] * u.data()[t * di + d];
                norm += h[static_cast<std::size_t>(n)] * h[static_cast<std::size_t>(n)];
            }
            if (t > 6) CHECK(norm <= prev_norm + 1e-15);
            prev_norm = norm;
        }
    }
}

static ModelConfig tiny_cfg(bool tie = false) {
    ModelConfig c;
    c.vol_extent = 16;
    c.patch_extent = 8;
    c.dim = 32;
    c.depth = 1;
    c.d_state = 4;
    c.d_proj = 8;
    c.tie_scan_branches = tie;
    return c;
}

TEST_CASE("vim_block is the identity at zero out-projection") {
    Params<double> P;
    Rng rng(14);
    const auto dims = SsmDims::make(32, 2, 4, 4, true);
    VimBlock<double> blk(P, "blk", dims, rng);
    // Default init zeroes the out projection already; make it explicit.
    for (auto& v : P[blk.out_proj.w].values()) v = 0;
    for (auto& v : P[blk.out_proj.b].values()) v = 0;
    auto tokens = init_normal<double>({16, 32}, 1.0, rng);
    auto out = blk.fwd(P, tokens);
    CHECK(out.values() == tokens.values());
}

TEST_CASE("tied branches give flip equivariance") {
    Params<double> P;
    Rng rng(15);
    const auto dims = SsmDims::make(32, 2, 4, 4, true);
    VimBlock<double> blk(P, "blk", dims, rng, /*tie_branches=*/true);
    for (std::int64_t i = 0; i < P[blk.out_proj.w].numel(); ++i) P[blk.out_proj.w].data()[i] = rng.normal(0, 0.05);
    auto tokens = init_normal<double>({12, 32}, 1.0, rng);
    auto a = flip_rows(blk.fwd(P, tokens));
    auto b = blk.fwd(P, flip_rows(tokens));
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(rel_err(a.data()[i], b.data()[i], 1e-3) < 1e-5);
}

TEST_CASE("untied branches are order sensitive") {
    Params<double> P;
    Rng rng(16);
    const auto dims = SsmDims::make(32, 2, 4, 4, true);
    VimBlock<double> blk(P, "blk", dims, rng);
    for (std::int64_t i = 0; i < P[blk.out_proj.w].numel(); ++i) P[blk.out_proj.w].data()[i] = rng.normal(0, 0.05);
    auto tokens = init_normal<double>({12, 32}, 1.0, rng);
    auto a = flip_rows(blk.fwd(P, tokens));
    auto b = blk.fwd(P, flip_rows(tokens));
    double diff = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
    CHECK(diff > 1e-6);
}

TEST_CASE("vim_block rejects width mismatch") {
    Params<double> P;
    Rng rng(17);
    VimBlock<double> blk(P, "blk", SsmDims::make(32, 2, 4, 4, true), rng);
    CHECK_THROWS_AS(blk.fwd(P, T64::zeros({4, 16})), std::invalid_argument);
}

TEST_CASE("vim_block gradient check through the whole block") {
    Params<double> P;
    Rng rng(18);
    const auto dims = SsmDims::make(16, 2, 4, 4, true);
    VimBlock<double> blk(P, "blk", dims, rng);
    // Nonzero out projection so every path carries gradient.
    for (std::int64_t i = 0; i < P[blk.out_proj.w].numel(); ++i) P[blk.out_proj.w].data()[i] = rng.normal(0, 0.1);
    auto tokens = init_normal<double>({8, 16}, 1.0, rng);
    auto fwd = [&]() {
        auto y = blk.fwd(P, tokens);
        return mean(mul(y, silu(y)));
    };
    CHECK(testutil::gradcheck_leaf(tokens, fwd) < 1e-4);
    for (std::size_t i = 0; i < P.size(); ++i) {
        const double worst = testutil::gradcheck_leaf(P.entry(i).t, fwd);
        INFO("param ", P.entry(i).name);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("predict_head: zero final layer, order sensitivity, gradients") {
    Params<double> P;
    Rng rng(19);
    PredictHead<double> head(P, "head", 16, 3, rng);
    auto tokens = init_normal<double>({5, 16}, 1.0, rng);
    auto logits = head.fwd(P, tokens);
    CHECK(logits.shape() == std::vector<std::int64_t>{3});
    for (int i = 0; i < 3; ++i) CHECK(logits.data()[i] == 0.0);

    // With a trained-looking head, permuting non-class rows of a scan output
    // generally changes the prediction; assert "not required equal".
    for (std::int64_t i = 0; i < P[head.l2.w].numel(); ++i) P[head.l2.w].data()[i] = rng.normal(0, 0.5);
    VimBlock<double> blk(P, "blk", SsmDims::make(16, 2, 4, 4, true), rng);
    for (std::int64_t i = 0; i < P[blk.out_proj.w].numel(); ++i) P[blk.out_proj.w].data()[i] = rng.normal(0, 0.2);
    auto seq = init_normal<double>({5, 16}, 1.0, rng);
    auto permuted = gather_rows(seq, {0, 3, 1, 4, 2});
    auto l1 = head.fwd(P, blk.fwd(P, seq));
    auto l2v = head.fwd(P, blk.fwd(P, permuted));
    double diff = 0;
    for (int i = 0; i < 3; ++i) diff = std::max(diff, std::abs(l1.data()[i] - l2v.data()[i]));
    CHECK(diff > 1e-9);

    auto fwd = [&]() {
        auto lg = head.fwd(P, tokens);
        return sum(mul(lg, sigmoid(lg)));
    };
    CHECK(testutil::gradcheck_leaf(tokens, fwd) < 1e-4);
    CHECK(testutil::gradcheck_leaf(P[head.l1.w], fwd) < 1e-4);
}

TEST_CASE("tiny model config sanity") {
    auto c = tiny_cfg();
    CHECK(c.tokens_per_volume() == 8);
    CHECK(c.voxels_per_patch() == 512);
}
