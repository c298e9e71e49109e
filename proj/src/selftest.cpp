#include "cmvim/selftest.hpp"

#include <cstdio>
#include <filesystem>
#include <functional>

#include "cmvim/checkpoint.hpp"
#include "cmvim/data.hpp"
#include "cmvim/objectives.hpp"
#include "cmvim/ssm.hpp"
#include "cmvim/trainer.hpp"

namespace cmvim::selftest {

namespace {

using T = TensorT<double>;

struct Suite {
    bool ok = true;
    std::string detail;

    void fail(const std::string& msg) {
        if (ok) detail = msg;
        ok = false;
    }
};

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

// Central finite differences against the tape gradient for a scalar-valued
// function of one leaf tensor.
void gradcheck_leaf(Suite& s, const char* op_name, T leaf, const std::function<T()>& forward, double tol = 1e-6) {
    leaf.set_needs_grad(true);
    leaf.zero_grad();
    {
        Tape<double> tape;
        auto loss = forward();
        tape.backward(loss);
    }
    const double h = 1e-5;
    for (std::int64_t i = 0; i < leaf.numel(); ++i) {
        const double saved = leaf.data()[i];
        leaf.data()[i] = saved + h;
        const double lp = forward().item();
        leaf.data()[i] = saved - h;
        const double lm = forward().item();
        leaf.data()[i] = saved;
        const double fd = (lp - lm) / (2 * h);
        const double an = leaf.grad_view().empty() ? 0.0 : leaf.grad_view()[i];
        if (rel_err(an, fd) > tol) {
            s.fail(std::string("gradient mismatch in op '") + op_name + "': analytic " + std::to_string(an) +
                   " vs finite-difference " + std::to_string(fd));
            return;
        }
    }
}

Suite scan_suite() {
    Suite s;
    Rng rng(2024);
    for (int rep = 0; rep < 25 && s.ok; ++rep) {
        const std::int64_t L = 1 + static_cast<std::int64_t>(rng.below(120));
        const std::int64_t di = 1 + static_cast<std::int64_t>(rng.below(8));
        const std::int64_t N = 1 + static_cast<std::int64_t>(rng.below(8));
        auto u = init_normal<double>({L, di}, 1.0, rng);
        auto delta_t = TensorT<double>::zeros({L, di});
        for (std::int64_t i = 0; i < delta_t.numel(); ++i)
            delta_t.data()[i] = std::exp(rng.uniform(std::log(1e-3), std::log(0.5)));
        auto a = TensorT<double>::zeros({di, N});
        for (std::int64_t i = 0; i < a.numel(); ++i) a.data()[i] = -std::exp(rng.uniform(-3.0, 1.5));
        auto b = init_normal<double>({L, N}, 1.0, rng);
        auto c = init_normal<double>({L, N}, 1.0, rng);
        auto d_skip = init_normal<double>({di}, 1.0, rng);
        auto y = selective_scan(u, delta_t, a, b, c, d_skip, true);
        // Naive reference recurrence, written directly from the definition.
        for (std::int64_t d = 0; d < di && s.ok; ++d) {
            std::vector<double> h(static_cast<std::size_t>(N), 0.0);
            for (std::int64_t t = 0; t < L; ++t) {
                const double dt = delta_t.data()[t * di + d];
                double acc = 0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const double av = a.data()[d * N + n];
                    const double ab = std::exp(dt * av);
                    const double bb = (ab - 1.0) / av * b.data()[t * N + n];
                    h[static_cast<std::size_t>(n)] = ab * h[static_cast<std::size_t>(n)] + bb * u.data()[t * di + d];
                    acc += c.data()[t * N + n] * h[static_cast<std::size_t>(n)];
                }
                acc += d_skip.data()[d] * u.data()[t * di + d];
                if (rel_err(acc, y.data()[t * di + d]) > 1e-10) {
                    s.fail("selective_scan diverges from the naive recurrence at t=" + std::to_string(t));
                    break;
                }
            }
        }
    }
    return s;
}

Suite gradient_suite() {
    Suite s;
    Rng rng(77);
    {
        auto x = init_normal<double>({3, 4}, 1.0, rng);
        auto w = init_normal<double>({4, 2}, 1.0, rng);
        gradcheck_leaf(s, "matmul", x, [&]() { return sum(matmul(x, w)); });
        gradcheck_leaf(s, "matmul", w, [&]() { return mean(mul(matmul(x, w), matmul(x, w))); });
    }
    {
        auto x = init_normal<double>({6}, 1.0, rng);
        gradcheck_leaf(s, "softmax", x, [&]() { return sum(mul(softmax(x), softmax(x))); });
        gradcheck_leaf(s, "exp", x, [&]() { return mean(exp(x)); });
        gradcheck_leaf(s, "sigmoid", x, [&]() { return mean(sigmoid(x)); });
        gradcheck_leaf(s, "silu", x, [&]() { return mean(mul(silu(x), silu(x))); });
        gradcheck_leaf(s, "softplus", x, [&]() { return mean(softplus(x)); });
    }
    {
        auto x = init_normal<double>({2, 6}, 1.0, rng);
        auto gain = init_normal<double>({6}, 0.3, rng);
        auto bias = init_normal<double>({6}, 0.3, rng);
        gradcheck_leaf(s, "layer_norm", x, [&]() { return mean(mul(layer_norm(x, gain, bias), layer_norm(x, gain, bias))); });
    }
    {
        auto x = init_normal<double>({5, 3}, 1.0, rng);
        auto w = init_normal<double>({3, 4}, 0.6, rng);
        auto bias = init_normal<double>({3}, 0.3, rng);
        gradcheck_leaf(s, "causal_conv1d", x, [&]() { return mean(mul(causal_conv1d(x, w, bias), causal_conv1d(x, w, bias))); });
        gradcheck_leaf(s, "causal_conv1d", w, [&]() { return sum(silu(causal_conv1d(x, w, bias))); });
    }
    {
        auto u = init_normal<double>({6, 2}, 1.0, rng);
        auto delta_t = TensorT<double>::full({6, 2}, 0.2);
        auto a = TensorT<double>::full({2, 3}, -0.7);
        auto b = init_normal<double>({6, 3}, 0.8, rng);
        auto c = init_normal<double>({6, 3}, 0.8, rng);
        auto d_skip = init_normal<double>({2}, 1.0, rng);
        gradcheck_leaf(s, "selective_scan", u,
                       [&]() { return mean(mul(selective_scan(u, delta_t, a, b, c, d_skip), selective_scan(u, delta_t, a, b, c, d_skip))); });
        gradcheck_leaf(s, "selective_scan", b, [&]() { return mean(silu(selective_scan(u, delta_t, a, b, c, d_skip))); });
    }
    return s;
}

Suite loss_identity_suite() {
    Suite s;
    Rng rng(99);
    {
        auto one = init_normal<double>({1, 5}, 1.0, rng);
        auto row = l2_normalize_rows(one);
        const double v = info_nce(row, row.detach()).item();
        if (std::abs(v) > 1e-12) s.fail("InfoNCE at batch size 1 is " + std::to_string(v) + ", expected 0");
    }
    {
        auto logits = init_normal<double>({4, 3}, 1.5, rng);
        const std::vector<std::int64_t> labels = {0, 2, 1, 2};
        const double fl = focal_loss(logits, labels, 0.0).item();
        double ce = 0;
        for (int i = 0; i < 4; ++i) {
            double mx = logits.data()[i * 3];
            for (int c = 1; c < 3; ++c) mx = std::max(mx, logits.data()[i * 3 + c]);
            double denom = 0;
            for (int c = 0; c < 3; ++c) denom += std::exp(logits.data()[i * 3 + c] - mx);
            ce -= logits.data()[i * 3 + labels[static_cast<std::size_t>(i)]] - mx - std::log(denom);
        }
        ce /= 4.0;
        if (std::abs(fl - ce) > 1e-12) s.fail("focal(gamma=0) differs from cross-entropy by " + std::to_string(fl - ce));
    }
    {
        auto r1 = T::scalar(0.31), r2 = T::scalar(0.17), i1 = T::scalar(0.4), i2 = T::scalar(0.9), in = T::scalar(0.55);
        const double s2 = stage2_loss(r1, r2, i1, i2, in, 0.005, 0.0).item();
        const double s1 = stage1_loss(r1, r2, i1, i2, 0.005).item();
        if (s1 != s2) s.fail("stage2 with lambda_inter=0 differs from stage1");
    }
    {
        auto shadow = T::full({4}, 2.0);
        auto online = T::full({4}, 1.0);
        double expect = 2.0;
        for (int k = 0; k < 50; ++k) {
            ema_update(shadow, online, 0.999);
            expect = 0.999 * expect + 0.001;
        }
        if (rel_err(shadow.data()[0] - 1.0, expect - 1.0) > 1e-6) s.fail("EMA geometric decay mismatch");
    }
    return s;
}

Suite roundtrip_suite() {
    Suite s;
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "cmvim_selftest";
    fs::create_directories(dir);
    {
        Rng rng(5);
        VolumeFile v;
        v.depth = v.height = v.width = 16;
        v.modality = 1;
        v.label = 2;
        v.voxels.resize(16 * 16 * 16);
        for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
        const auto path = (dir / "probe.cmv").string();
        write_volume(path, v);
        const auto r = read_volume(path);
        if (r.voxels != v.voxels || r.label != v.label || r.modality != v.modality)
            s.fail("volume round-trip is not bit-exact");
    }
    {
        CheckpointFile ck;
        std::vector<double> payload = {1.5, -2.25, 3.125};
        ck.add_f64("param/x", {3}, payload.data());
        ck.add_text("meta/config", "seed = 1\n");
        ck.add_u64("meta/counters", {1, 2, 3});
        const auto path = (dir / "probe.ckpt").string();
        write_checkpoint(path, ck);
        const auto r = read_checkpoint(path);
        if (r.get_f64("param/x") != payload || r.get_text("meta/config") != "seed = 1\n")
            s.fail("checkpoint round-trip is not bit-exact");
        // Truncation must be rejected with a structured error.
        std::ofstream trunc((dir / "trunc.ckpt").string(), std::ios::binary | std::ios::trunc);
        std::ifstream src(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(src)), std::istreambuf_iterator<char>());
        trunc.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
        trunc.close();
        bool threw = false;
        try {
            read_checkpoint((dir / "trunc.ckpt").string());
        } catch (const IoError&) {
            threw = true;
        }
        if (!threw) s.fail("truncated checkpoint was accepted");
    }
    {
        Rng rng(11);
        std::vector<double> vol(32 * 32 * 32);
        for (auto& x : vol) x = rng.uniform();
        if (unpatchify(patchify(vol, 32, 8), 32, 8) != vol) s.fail("patchify round-trip is not bit-exact");
    }
    return s;
}

}  // namespace

bool run_all(const std::string& fault_op) {
    testing::backward_fault_op = fault_op;
    struct Item {
        const char* name;
        Suite (*fn)();
    };
    const Item items[] = {
        {"scan-vs-recurrence", scan_suite},
        {"gradient-checks", gradient_suite},
        {"loss-identities", loss_identity_suite},
        {"format-round-trips", roundtrip_suite},
    };
    bool all_ok = true;
    for (const auto& it : items) {
        const Suite s = it.fn();
        if (s.ok) {
            std::printf("PASS  %s\n", it.name);
        } else {
            std::printf("FAIL  %s: %s\n", it.name, s.detail.c_str());
            all_ok = false;
        }
    }
    testing::backward_fault_op.clear();
    return all_ok;
}

}  // namespace cmvim::selftest
