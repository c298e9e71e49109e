#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cmvim/data.hpp"
#include "testutil.hpp"

using namespace cmvim;
using testutil::rel_err;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "cmvim_data_tests";
    fs::create_directories(dir);
    return (dir / name).string();
}

// Exhaustive pair-count AUC for one class column, average ranks implied by
// counting ties at half weight.
double pair_count_auc(const std::vector<std::vector<double>>& scores, const std::vector<std::int64_t>& labels,
                      std::int64_t cls) {
    double wins = 0, ties = 0;
    std::int64_t n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != cls) continue;
        ++n_pos;
        for (std::size_t j = 0; j < labels.size(); ++j) {
            if (labels[j] == cls) continue;
            const double si = scores[i][static_cast<std::size_t>(cls)];
            const double sj = scores[j][static_cast<std::size_t>(cls)];
            if (si > sj) wins += 1;
            else if (si == sj) ties += 1;
        }
    }
    for (const auto l : labels)
        if (l != cls) ++n_neg;
    return (wins + 0.5 * ties) / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double pair_count_macro_auc(const std::vector<std::vector<double>>& scores, const std::vector<std::int64_t>& labels) {
    double acc = 0;
    for (std::int64_t c = 0; c < 3; ++c) acc += pair_count_auc(scores, labels, c);
    return acc / 3.0;
}

}  // namespace

TEST_CASE("generator: noise-free limit reproduces the class template exactly") {
    SyntheticSpec spec;
    spec.n_samples = 9;
    spec.vol_extent = 16;
    spec.noise_sigma = 0;
    spec.latent_amp = 0;
    spec.seed = 3;
    auto ds = generate(spec);
    std::vector<std::vector<float>> norm_templates;
    for (int c = 0; c < 3; ++c) {
        auto t = class_template(spec, c);
        float lo = t[0], hi = t[0];
        for (float x : t) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        for (auto& x : t) x = (x - lo) / (hi - lo);
        norm_templates.push_back(std::move(t));
    }
    for (const auto& s : ds.samples) {
        CHECK(s.mri == norm_templates[static_cast<std::size_t>(s.label)]);
        // PET is the same template at a different gain; min-max normalization
        // cancels the gain up to float rounding.
        float worst = 0;
        for (std::size_t i = 0; i < s.pet.size(); ++i)
            worst = std::max(worst, std::abs(s.pet[i] - norm_templates[static_cast<std::size_t>(s.label)][i]));
        CHECK(worst < 1e-6f);
    }
    // Same class, same volume: the noise-free limit is class-templated.
    for (const auto& a : ds.samples)
        for (const auto& b : ds.samples)
            if (a.label == b.label) CHECK(a.mri == b.mri);
}

TEST_CASE("generator is deterministic under the seed") {
    SyntheticSpec spec;
    spec.n_samples = 6;
    spec.vol_extent = 16;
    spec.seed = 77;
    auto a = generate(spec);
    auto b = generate(spec);
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].mri == b.samples[i].mri);
        CHECK(a.samples[i].pet == b.samples[i].pet);
        CHECK(a.samples[i].label == b.samples[i].label);
    }
}

TEST_CASE("generator couples the modalities through the shared latent region") {
    SyntheticSpec spec;
    spec.n_samples = 12;
    spec.vol_extent = 16;
    spec.seed = 5;
    auto ds = generate(spec);
    const std::int64_t v = spec.vol_extent;
    double corr_sum = 0;
    for (const auto& s : ds.samples) {
        // Voxelwise correlation inside the shared band z >= 3v/4.
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        std::int64_t n = 0;
        for (std::int64_t z = 3 * v / 4; z < v; ++z)
            for (std::int64_t y = 0; y < v; ++y)
                for (std::int64_t x = 0; x < v; ++x) {
                    const auto idx = static_cast<std::size_t>((z * v + y) * v + x);
                    const double a = s.mri[idx], b = s.pet[idx];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                    ++n;
                }
        const double nn = static_cast<double>(n);
        const double cov = sxy / nn - (sx / nn) * (sy / nn);
        const double va = sxx / nn - (sx / nn) * (sx / nn);
        const double vb = syy / nn - (sy / nn) * (sy / nn);
        corr_sum += cov / std::sqrt(va * vb);
    }
    CHECK(corr_sum / static_cast<double>(ds.samples.size()) >= 0.5);
}

TEST_CASE("generator voxel range and priors") {
    SyntheticSpec spec;
    spec.n_samples = 30;
    spec.vol_extent = 16;
    spec.prior_nc = 0.5;
    spec.prior_mci = 0.3;
    spec.prior_ad = 0.2;
    spec.seed = 8;
    auto ds = generate(spec);
    std::int64_t counts[3] = {0, 0, 0};
    for (const auto& s : ds.samples) {
        ++counts[s.label];
        for (float x : s.mri) {
            CHECK(x >= 0.0f);
            CHECK(x <= 1.0f);
        }
    }
    CHECK(counts[0] == 15);
    CHECK(counts[1] == 9);
    CHECK(counts[2] == 6);
}

TEST_CASE("template probe recovers the class signal") {
    SyntheticSpec spec;
    spec.n_samples = 60;
    spec.vol_extent = 16;
    spec.seed = 21;
    auto ds = generate(spec);
    CHECK(template_probe_accuracy(ds) >= 0.95);
}

TEST_CASE("split reproduces the published sizes at n=1292") {
    auto s = split(1292, {0.70, 0.10, 0.20}, 1);
    CHECK(s.train.size() == 904);
    CHECK(s.val.size() == 129);
    CHECK(s.test.size() == 259);
}

TEST_CASE("split small case and partition property") {
    auto s = split(10, {0.7, 0.1, 0.2}, 2);
    CHECK(s.train.size() == 7);
    CHECK(s.val.size() == 1);
    CHECK(s.test.size() == 2);

    Rng rng(3);
    for (int rep = 0; rep < 10; ++rep) {
        const std::int64_t n = 1 + static_cast<std::int64_t>(rng.below(200));
        auto sp = split(n, {0.7, 0.1, 0.2}, rng.next_u64());
        std::vector<bool> seen(static_cast<std::size_t>(n), false);
        for (const auto* part : {&sp.train, &sp.val, &sp.test})
            for (auto i : *part) {
                CHECK_FALSE(seen[static_cast<std::size_t>(i)]);
                seen[static_cast<std::size_t>(i)] = true;
            }
        for (bool b : seen) CHECK(b);
    }
    CHECK_THROWS_AS(split(10, {0.5, 0.2, 0.2}, 1), std::invalid_argument);
}

TEST_CASE("accuracy basics") {
    CHECK(accuracy({0, 1, 2}, {0, 1, 2}) == 1.0);
    CHECK(accuracy({1, 2, 0}, {0, 1, 2}) == 0.0);
    CHECK(accuracy({0, 1, 0}, {0, 1, 2}) == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("macro auc: perfect ordering and class-absent error") {
    std::vector<std::vector<double>> scores = {{0.9, 0.05, 0.05}, {0.1, 0.8, 0.1}, {0.0, 0.2, 0.8}};
    CHECK(macro_auc_ovr(scores, {0, 1, 2}, 3) == 1.0);
    CHECK_THROWS_WITH_AS(macro_auc_ovr(scores, {0, 0, 1}, 3), doctest::Contains("2"), std::invalid_argument);
}

TEST_CASE("macro auc matches brute-force pair counting on all small label sets") {
    Rng rng(11);
    for (int n = 3; n <= 6; ++n) {
        std::vector<std::int64_t> labels(static_cast<std::size_t>(n), 0);
        // Enumerate all 3^n labelings.
        const std::int64_t total = static_cast<std::int64_t>(std::pow(3.0, n));
        for (std::int64_t code = 0; code < total; ++code) {
            std::int64_t c = code;
            bool has[3] = {false, false, false};
            for (int i = 0; i < n; ++i) {
                labels[static_cast<std::size_t>(i)] = c % 3;
                has[c % 3] = true;
                c /= 3;
            }
            if (!has[0] || !has[1] || !has[2]) continue;
            // One continuous draw and one tie-heavy draw from a 3-value grid.
            for (int variant = 0; variant < 2; ++variant) {
                std::vector<std::vector<double>> scores(static_cast<std::size_t>(n), std::vector<double>(3));
                for (auto& row : scores)
                    for (auto& x : row)
                        x = variant == 0 ? rng.uniform() : 0.5 * static_cast<double>(rng.below(3));
                CHECK(rel_err(macro_auc_ovr(scores, labels, 3), pair_count_macro_auc(scores, labels)) < 1e-12);
            }
        }
    }
}

TEST_CASE("macro auc null: random scores sit near one half") {
    Rng rng(12);
    const int n = 2000;
    std::vector<std::int64_t> labels(n);
    std::vector<std::vector<double>> scores(n, std::vector<double>(3));
    for (int i = 0; i < n; ++i) {
        labels[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(rng.below(3));
        for (auto& x : scores[static_cast<std::size_t>(i)]) x = rng.uniform();
    }
    CHECK(macro_auc_ovr(scores, labels, 3) == doctest::Approx(0.5).epsilon(0.1));
    CHECK(std::abs(macro_auc_ovr(scores, labels, 3) - 0.5) <= 0.05);
}

TEST_CASE("macro auc is invariant under strictly monotone score transforms") {
    Rng rng(13);
    const int n = 40;
    std::vector<std::int64_t> labels(n);
    std::vector<std::vector<double>> scores(n, std::vector<double>(3));
    for (int i = 0; i < n; ++i) {
        labels[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(rng.below(3));
        for (auto& x : scores[static_cast<std::size_t>(i)]) x = rng.uniform(-2, 2);
    }
    for (int c = 0; c < 3; ++c) labels[static_cast<std::size_t>(c)] = c;
    auto transformed = scores;
    for (auto& row : transformed)
        for (auto& x : row) x = std::exp(3.0 * x) + 7.0;
    CHECK(rel_err(macro_auc_ovr(scores, labels, 3), macro_auc_ovr(transformed, labels, 3)) < 1e-12);
}

TEST_CASE("macro f1 basics and hand-computed confusion") {
    CHECK(macro_f1({0, 1, 2, 0}, {0, 1, 2, 0}, 3) == 1.0);

    // Class 2 never predicted: F1_2 = 0 enters the macro mean.
    const std::vector<std::int64_t> preds = {0, 0, 1, 1};
    const std::vector<std::int64_t> labels = {0, 2, 1, 2};
    // class0: tp=1 fp=1 fn=0 -> f1 = 2/3; class1: tp=1 fp=1 fn=0 -> 2/3; class2: 0.
    CHECK(rel_err(macro_f1(preds, labels, 3), (2.0 / 3.0 + 2.0 / 3.0 + 0.0) / 3.0) < 1e-12);
}

TEST_CASE("metrics are invariant under consistent relabeling") {
    Rng rng(14);
    const int n = 30;
    std::vector<std::int64_t> preds(n), labels(n);
    for (int i = 0; i < n; ++i) {
        preds[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(rng.below(3));
        labels[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(rng.below(3));
    }
    const std::int64_t perm[3] = {2, 0, 1};
    auto preds_p = preds;
    auto labels_p = labels;
    for (int i = 0; i < n; ++i) {
        preds_p[static_cast<std::size_t>(i)] = perm[preds[static_cast<std::size_t>(i)]];
        labels_p[static_cast<std::size_t>(i)] = perm[labels[static_cast<std::size_t>(i)]];
    }
    CHECK(accuracy(preds, labels) == accuracy(preds_p, labels_p));
    CHECK(rel_err(macro_f1(preds, labels, 3), macro_f1(preds_p, labels_p, 3)) < 1e-12);
}

TEST_CASE("volume file round-trip is bit-exact") {
    Rng rng(15);
    VolumeFile v;
    v.depth = v.height = v.width = 64;
    v.modality = 0;
    v.label = 1;
    v.voxels.resize(64 * 64 * 64);
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
    const auto path = tmp_path("vol.cmv");
    write_volume(path, v);
    const auto r = read_volume(path);
    CHECK(r.depth == 64);
    CHECK(r.voxels == v.voxels);
    CHECK(r.label == 1);

    std::ifstream a(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    CHECK(bytes.size() == 26 + 4ull * 64 * 64 * 64);
}

TEST_CASE("volume reader rejects truncation and implausible headers") {
    Rng rng(16);
    VolumeFile v;
    v.depth = v.height = v.width = 16;
    v.voxels.assign(16 * 16 * 16, 0.5f);
    const auto path = tmp_path("vol_small.cmv");
    write_volume(path, v);

    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    const auto tpath = tmp_path("vol_trunc.cmv");
    std::ofstream t(tpath, std::ios::binary | std::ios::trunc);
    t.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
    t.close();
    CHECK_THROWS_AS(read_volume(tpath), IoError);

    // Header claims giant extents over a short body: rejected by the length
    // check before any payload allocation.
    auto forged = bytes;
    forged[12] = static_cast<char>(0xff);  // depth low byte
    forged[13] = static_cast<char>(0x0f);
    const auto fpath = tmp_path("vol_forged.cmv");
    std::ofstream f(fpath, std::ios::binary | std::ios::trunc);
    f.write(forged.data(), static_cast<std::streamsize>(forged.size()));
    f.close();
    CHECK_THROWS_WITH_AS(read_volume(fpath), doctest::Contains("length mismatch"), IoError);

    auto badmagic = bytes;
    badmagic[0] = 'X';
    const auto mpath = tmp_path("vol_magic.cmv");
    std::ofstream mfile(mpath, std::ios::binary | std::ios::trunc);
    mfile.write(badmagic.data(), static_cast<std::streamsize>(badmagic.size()));
    mfile.close();
    CHECK_THROWS_WITH_AS(read_volume(mpath), doctest::Contains("magic"), IoError);
}

TEST_CASE("dataset split directory round-trip") {
    SyntheticSpec spec;
    spec.n_samples = 6;
    spec.vol_extent = 16;
    spec.seed = 31;
    auto ds = generate(spec);
    const auto dir = tmp_path("split_rt");
    fs::remove_all(dir);
    write_dataset_split(dir, ds.samples, {0, 2, 4});
    auto got = read_dataset_split(dir);
    REQUIRE(got.size() == 3);
    CHECK(got[0].mri == ds.samples[0].mri);
    CHECK(got[1].pet == ds.samples[2].pet);
    CHECK(got[2].label == ds.samples[4].label);
}
