#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "cmvim/trainer.hpp"
#include "testutil.hpp"

using namespace cmvim;
using testutil::rel_err;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_cfg() {
    TrainConfig c;
    c.vol_extent = 16;
    c.dim = 16;
    c.depth = 1;
    c.d_state = 4;
    c.d_proj = 8;
    c.epochs = 3;
    c.batch_size = 2;
    c.base_lr = 1e-3;
    c.seed = 5;
    return c;
}

template <class S>
TrainSet<S> tiny_set(int n, std::uint64_t seed, std::int64_t extent = 16) {
    SyntheticSpec spec;
    spec.n_samples = n;
    spec.vol_extent = extent;
    spec.seed = seed;
    ModelConfig mc;
    mc.vol_extent = extent;
    return TrainSet<S>::from_pairs(generate(spec).samples, mc);
}

std::string tmp_path(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "cmvim_trainer_tests";
    fs::create_directories(dir);
    return (dir / name).string();
}

}  // namespace

TEST_CASE("adamw: zero grads and zero decay leave parameters unchanged") {
    std::vector<double> p = {1.0, -2.0}, g, m(2, 0.0), v(2, 0.0);
    adamw_step_tensor(p, g, m, v, 1, 0.1, 0.0, 0.9, 0.999, 1e-8, "p");
    CHECK(p == std::vector<double>{1.0, -2.0});
}

TEST_CASE("adamw: decay-only step shrinks by exactly lr*wd") {
    std::vector<double> p = {1.0, -2.0}, g, m(2, 0.0), v(2, 0.0);
    adamw_step_tensor(p, g, m, v, 1, 0.1, 0.05, 0.9, 0.999, 1e-8, "p");
    CHECK(p[0] == doctest::Approx(1.0 * (1 - 0.005)).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(-2.0 * (1 - 0.005)).epsilon(1e-15));
}

TEST_CASE("adamw: five steps match a hand-stepped reference") {
    const std::vector<double> grads = {0.5, -0.3, 0.2, 0.1, -0.4};
    const double lr = 0.01, wd = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;

    double hp = 1.0, hm = 0.0, hv = 0.0;
    for (int t = 1; t <= 5; ++t) {
        const double g = grads[static_cast<std::size_t>(t - 1)];
        hm = b1 * hm + (1 - b1) * g;
        hv = b2 * hv + (1 - b2) * g * g;
        const double mh = hm / (1 - std::pow(b1, t));
        const double vh = hv / (1 - std::pow(b2, t));
        hp -= lr * mh / (std::sqrt(vh) + eps);
        hp -= lr * wd * hp;
    }

    std::vector<double> p = {1.0}, m(1, 0.0), v(1, 0.0);
    for (int t = 1; t <= 5; ++t) {
        std::vector<double> g = {grads[static_cast<std::size_t>(t - 1)]};
        adamw_step_tensor(p, g, m, v, t, lr, wd, b1, b2, eps, "p");
    }
    CHECK(rel_err(p[0], hp) < 1e-14);
}

TEST_CASE("adamw aborts on non-finite gradients naming the parameter") {
    std::vector<double> p = {1.0}, g = {std::nan("")}, m(1, 0.0), v(1, 0.0);
    CHECK_THROWS_WITH_AS(adamw_step_tensor(p, g, m, v, 1, 0.1, 0.0, 0.9, 0.999, 1e-8, "enc.w"),
                         doctest::Contains("enc.w"), std::runtime_error);
}

TEST_CASE("cosine schedule endpoints and monotonicity") {
    CHECK(cosine_lr(0, 100, 0.005) == doctest::Approx(0.005).epsilon(1e-12));
    CHECK(cosine_lr(100, 100, 0.005) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(cosine_lr(50, 100, 0.005) == doctest::Approx(0.0025).epsilon(1e-12));
    double prev = 1e9;
    for (int s = 0; s <= 40; ++s) {
        const double lr = cosine_lr(s, 40, 0.1);
        CHECK(lr <= prev + 1e-15);
        prev = lr;
    }
    CHECK_THROWS_AS(cosine_lr(5, 4, 0.1), std::invalid_argument);
}

TEST_CASE("same seed gives bit-identical loss curves") {
    auto cfg = tiny_cfg();
    auto ts = tiny_set<float>(4, 100);
    Trainer<float> a(cfg), b(cfg);
    const auto ha = a.run_pretrain(Stage::pretrain1, ts);
    const auto hb = b.run_pretrain(Stage::pretrain1, ts);
    REQUIRE(ha.step_loss.size() == hb.step_loss.size());
    for (std::size_t i = 0; i < ha.step_loss.size(); ++i) CHECK(ha.step_loss[i] == hb.step_loss[i]);
}

TEST_CASE("ema shadow updates exactly once per optimizer step") {
    auto cfg = tiny_cfg();
    auto ts = tiny_set<float>(4, 101);
    Trainer<float> t(cfg);
    const auto h = t.run_pretrain(Stage::pretrain1, ts);
    CHECK(h.opt_steps == h.ema_updates);
    CHECK(t.total_opt_steps == t.total_ema_updates);
}

TEST_CASE("alpha zero leaves intra projection heads with exactly zero grads") {
    auto cfg = tiny_cfg();
    cfg.alpha = 0.0;
    auto ts = tiny_set<double>(4, 102);
    Trainer<double> t(cfg);
    Tape<double> tape;
    BatchMasks masks;
    const std::int64_t n_tok = t.model.cfg.tokens_per_volume();
    for (int k = 0; k < 2; ++k) {
        Rng r0 = t.mask_rng(0, k, 0, 0), r1 = t.mask_rng(0, k, 0, 1);
        Rng r2 = t.mask_rng(0, k, 1, 0), r3 = t.mask_rng(0, k, 1, 1);
        masks.v1_mri.push_back(random_mask(n_tok, 0.75, r0));
        masks.v1_pet.push_back(random_mask(n_tok, 0.75, r1));
        masks.v2_mri.push_back(random_mask(n_tok, 0.75, r2));
        masks.v2_pet.push_back(random_mask(n_tok, 0.75, r3));
    }
    auto parts = build_pretrain_loss(t.model, ts, {0, 1}, masks, cfg, /*with_inter=*/false);
    t.model.params.zero_grads();
    tape.backward(parts.total);
    for (int m = 0; m < 2; ++m) {
        for (int idx : {t.model.intra_proj[m].l1.w, t.model.intra_proj[m].l1.b, t.model.intra_proj[m].l2.w,
                        t.model.intra_proj[m].l2.b}) {
            const auto& g = t.model.params[idx].grad_view();
            for (const double gv : g) CHECK(gv == 0.0);
        }
    }
}

TEST_CASE("checkpoint round-trip resumes training bit-exactly") {
    auto cfg = tiny_cfg();
    auto ts = tiny_set<float>(4, 103);

    Trainer<float> full(cfg);
    const auto h_full = full.run_pretrain(Stage::pretrain1, ts);

    Trainer<float> part(cfg);
    const auto h_part = part.run_pretrain(Stage::pretrain1, ts, {}, /*stop_after_epoch=*/1);
    const auto ckpt = tmp_path("resume.ckpt");
    part.save_state(ckpt, Stage::pretrain1);

    Trainer<float> resumed(cfg);
    resumed.load_state(ckpt, Trainer<float>::LoadMode::full_resume);
    const auto h_rest = resumed.run_pretrain(Stage::pretrain1, ts);

    std::vector<double> stitched = h_part.step_loss;
    stitched.insert(stitched.end(), h_rest.step_loss.begin(), h_rest.step_loss.end());
    REQUIRE(stitched.size() == h_full.step_loss.size());
    for (std::size_t i = 0; i < stitched.size(); ++i) CHECK(stitched[i] == h_full.step_loss[i]);

    // save -> load -> save produces byte-identical files
    const auto ckpt2 = tmp_path("resume2.ckpt");
    resumed.save_state(ckpt2, Stage::pretrain1);
    Trainer<float> reload(cfg);
    reload.load_state(ckpt2, Trainer<float>::LoadMode::full_resume);
    const auto ckpt3 = tmp_path("resume3.ckpt");
    reload.save_state(ckpt3, Stage::pretrain1);
    std::ifstream f2(ckpt2, std::ios::binary), f3(ckpt3, std::ios::binary);
    const std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    const std::vector<char> b3((std::istreambuf_iterator<char>(f3)), std::istreambuf_iterator<char>());
    CHECK(b2 == b3);
}

TEST_CASE("checkpoint manifest lists every parameter exactly once with matching bytes") {
    auto cfg = tiny_cfg();
    Trainer<float> t(cfg);
    const auto path = tmp_path("manifest.ckpt");
    t.save_state(path, Stage::pretrain1);

    const auto ck = read_checkpoint(path);
    std::map<std::string, int> seen;
    std::uint64_t blob_bytes = 0;
    for (const auto& r : ck.records) {
        ++seen[r.name];
        blob_bytes += r.bytes.size();
    }
    for (const auto& [name, count] : seen) CHECK(count == 1);
    for (std::size_t i = 0; i < t.model.params.size(); ++i)
        CHECK(seen.count("param/" + t.model.params.entry(i).name) == 1);

    const std::string manifest = render_manifest(ck);
    const auto file_size = fs::file_size(path);
    CHECK(file_size == 8 + 4 + 8 + manifest.size() + blob_bytes);
}

TEST_CASE("truncated checkpoint is rejected with a structured error") {
    auto cfg = tiny_cfg();
    Trainer<float> t(cfg);
    const auto path = tmp_path("trunc_src.ckpt");
    t.save_state(path, Stage::pretrain1);
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto tpath = tmp_path("trunc.ckpt");
    std::ofstream out(tpath, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    Trainer<float> u(cfg);
    CHECK_THROWS_AS(u.load_state(tpath, Trainer<float>::LoadMode::weights_only), IoError);
}

TEST_CASE("stage-2 with lambda zero equals a continued stage-1 run step for step") {
    auto cfg = tiny_cfg();
    cfg.epochs = 2;
    auto ts = tiny_set<float>(4, 104);
    Trainer<float> pre(cfg);
    pre.run_pretrain(Stage::pretrain1, ts);
    const auto ckpt = tmp_path("stage1.ckpt");
    pre.save_state(ckpt, Stage::pretrain1);

    TrainConfig cont_cfg = cfg;
    cont_cfg.epochs = 2;
    cont_cfg.base_lr = 5e-4;

    Trainer<float> cont(cont_cfg);
    cont.load_state(ckpt, Trainer<float>::LoadMode::next_stage);
    const auto h_stage1 = cont.run_pretrain(Stage::pretrain1, ts);

    TrainConfig s2_cfg = cont_cfg;
    s2_cfg.lambda_inter = 0.0;
    Trainer<float> two(s2_cfg);
    two.load_state(ckpt, Trainer<float>::LoadMode::next_stage);
    const auto h_stage2 = two.run_pretrain(Stage::pretrain2, ts);

    REQUIRE(h_stage1.step_loss.size() == h_stage2.step_loss.size());
    for (std::size_t i = 0; i < h_stage1.step_loss.size(); ++i)
        CHECK(h_stage1.step_loss[i] == h_stage2.step_loss[i]);
    // The stage-2 history still carries the (unweighted) inter part per epoch.
    CHECK(h_stage2.epoch_parts[0].count("inter") == 1);
}

TEST_CASE("finetune never touches the ema shadow") {
    auto cfg = tiny_cfg();
    cfg.epochs = 2;
    auto train = tiny_set<float>(6, 105);
    auto val = tiny_set<float>(3, 106);
    auto test = tiny_set<float>(3, 107);
    Trainer<float> t(cfg);
    std::vector<std::vector<float>> shadow_before;
    for (std::size_t i = 0; i < t.model.target.size(); ++i) shadow_before.push_back(t.model.target.entry(i).t.values());
    t.run_finetune(train, val, test);
    for (std::size_t i = 0; i < t.model.target.size(); ++i)
        CHECK(t.model.target.entry(i).t.values() == shadow_before[i]);
}

TEST_CASE("finetune reports the best validation epoch") {
    auto cfg = tiny_cfg();
    cfg.epochs = 3;
    auto train = tiny_set<float>(6, 108);
    auto val = tiny_set<float>(3, 109);
    auto test = tiny_set<float>(3, 110);
    Trainer<float> t(cfg);
    const auto h = t.run_finetune(train, val, test);
    CHECK(h.best_epoch >= 0);
    CHECK(h.best_val_acc == *std::max_element(h.val_acc.begin(), h.val_acc.end()));
    CHECK(h.test_report.confusion.size() == 3);
}

TEST_CASE("single-pair overfit drives masked reconstruction error down") {
    TrainConfig cfg;
    cfg.vol_extent = 16;
    cfg.dim = 16;
    cfg.depth = 1;
    cfg.d_state = 4;
    cfg.d_proj = 8;
    cfg.batch_size = 1;
    cfg.epochs = 1200;
    cfg.base_lr = 4e-3;
    cfg.seed = 11;
    auto ts = tiny_set<float>(1, 111);
    Trainer<float> t(cfg);
    const auto h = t.run_pretrain(Stage::pretrain1, ts);
    const auto& last = h.epoch_parts.back();
    CHECK(last.at("rec_mri") + last.at("rec_pet") <= 0.02);
}

TEST_CASE("metrics log schema carries all loss parts") {
    auto cfg = tiny_cfg();
    cfg.epochs = 1;
    auto ts = tiny_set<float>(4, 112);
    Trainer<float> pre(cfg);
    pre.run_pretrain(Stage::pretrain1, ts);
    const auto ckpt = tmp_path("schema_stage1.ckpt");
    pre.save_state(ckpt, Stage::pretrain1);

    Trainer<float> two(cfg);
    two.load_state(ckpt, Trainer<float>::LoadMode::next_stage);
    RunIo io;
    io.metrics_path = tmp_path("metrics.tsv");
    fs::remove(io.metrics_path);
    two.run_pretrain(Stage::pretrain2, ts, io);

    std::ifstream f(io.metrics_path);
    std::set<std::string> keys;
    std::string line;
    while (std::getline(f, line)) {
        const auto t1 = line.find('\t');
        const auto t2 = line.find('\t', t1 + 1);
        REQUIRE(t1 != std::string::npos);
        REQUIRE(t2 != std::string::npos);
        keys.insert(line.substr(t1 + 1, t2 - t1 - 1));
    }
    for (const auto& k : {"rec_mri", "rec_pet", "intra_mri", "intra_pet", "inter", "total"}) CHECK(keys.count(k) == 1);
}

TEST_CASE("label permutation yields chance-level test accuracy") {
    TrainConfig cfg;
    cfg.vol_extent = 16;
    cfg.dim = 16;
    cfg.depth = 1;
    cfg.d_state = 4;
    cfg.d_proj = 8;
    cfg.batch_size = 8;
    cfg.epochs = 8;
    cfg.base_lr = 2e-3;
    cfg.seed = 13;
    auto train = tiny_set<float>(48, 113);
    auto val = tiny_set<float>(12, 114);
    auto test = tiny_set<float>(36, 115);
    // Deterministic label scramble.
    Rng rng(999);
    for (auto& l : train.labels) l = static_cast<std::int64_t>(rng.below(3));
    Trainer<float> t(cfg);
    const auto h = t.run_finetune(train, val, test);
    CHECK(h.test_report.accuracy <= 0.45);
}

TEST_CASE("stage-2 inter loss trends down and alignment improves") {
    TrainConfig cfg;
    cfg.vol_extent = 16;
    cfg.dim = 16;
    cfg.depth = 1;
    cfg.d_state = 4;
    cfg.d_proj = 8;
    cfg.batch_size = 8;
    cfg.epochs = 4;
    cfg.base_lr = 2e-3;
    cfg.seed = 17;
    auto ts = tiny_set<float>(24, 116);
    Trainer<float> pre(cfg);
    pre.run_pretrain(Stage::pretrain1, ts);
    const auto ckpt = tmp_path("trend_stage1.ckpt");
    pre.save_state(ckpt, Stage::pretrain1);

    TrainConfig s2 = cfg;
    s2.epochs = 10;
    s2.base_lr = 1e-3;
    Trainer<float> two(s2);
    two.load_state(ckpt, Trainer<float>::LoadMode::next_stage);

    auto alignment_gap = [&](Trainer<float>& tr) {
        // Mean cosine of true fused-projection pairs minus a shuffled pairing.
        NoGradGuard<float> ng;
        const std::int64_t n_tok = tr.model.cfg.tokens_per_volume();
        std::vector<std::vector<float>> zm, zp;
        for (std::int64_t i = 0; i < ts.size(); ++i) {
            Rng rm_rng = Rng(4242).fork(1, static_cast<std::uint64_t>(i));
            Rng rp_rng = Rng(4242).fork(2, static_cast<std::uint64_t>(i));
            auto pm = random_mask(n_tok, 0.75, rm_rng);
            auto pp = random_mask(n_tok, 0.75, rp_rng);
            auto mae = tr.model.forward_mae(tr.model.params, ts.tokens_mri[static_cast<std::size_t>(i)],
                                            ts.tokens_pet[static_cast<std::size_t>(i)], pm, pp);
            auto zmr = l2_normalize_rows(reshape(tr.model.inter_proj[0].fwd(tr.model.params, pool_tokens(mae.fused_mri)),
                                                 {1, tr.model.cfg.d_proj}));
            auto zpr = l2_normalize_rows(reshape(tr.model.inter_proj[1].fwd(tr.model.params, pool_tokens(mae.fused_pet)),
                                                 {1, tr.model.cfg.d_proj}));
            zm.push_back(zmr.values());
            zp.push_back(zpr.values());
        }
        double aligned = 0, shuffled = 0;
        const std::size_t n = zm.size();
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0, dot_s = 0;
            for (std::size_t j = 0; j < zm[i].size(); ++j) {
                dot += static_cast<double>(zm[i][j]) * static_cast<double>(zp[i][j]);
                dot_s += static_cast<double>(zm[i][j]) * static_cast<double>(zp[(i + 1) % n][j]);
            }
            aligned += dot;
            shuffled += dot_s;
        }
        return (aligned - shuffled) / static_cast<double>(n);
    };

    const double gap_before = alignment_gap(two);
    const auto h = two.run_pretrain(Stage::pretrain2, ts);
    const double gap_after = alignment_gap(two);

    int down = 0, total = 0;
    for (std::size_t e = 1; e < h.epoch_parts.size(); ++e) {
        down += h.epoch_parts[e].at("inter") < h.epoch_parts[e - 1].at("inter") ? 1 : 0;
        ++total;
    }
    CHECK(static_cast<double>(down) / total >= 0.8);
    CHECK(gap_after > gap_before);
}
