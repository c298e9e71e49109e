#include "cmvim/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;

namespace cmvim {

namespace {

constexpr char kVolumeMagic[8] = {'C', 'M', 'V', 'I', 'M', 'V', 'O', 'L'};
constexpr std::uint32_t kMaxExtent = 4096;

struct Blob {
    double cx, cy, cz, radius, amp;
};

// Fixed blob layout for one class: evenly spread centers inside the class's
// z band. Independent of the sample, so sigma=0 and latent_amp=0 reproduce
// the template exactly.
std::vector<Blob> class_blobs(const SyntheticSpec& spec, std::int64_t cls) {
    const double v = static_cast<double>(spec.vol_extent);
    const double band_lo = static_cast<double>(cls) * v / 4.0;
    const double band = v / 4.0;
    const double amp = cls == 0 ? spec.amp_nc : (cls == 1 ? spec.amp_mci : spec.amp_ad);
    const double radius = spec.blob_radius_frac * v;
    std::vector<Blob> blobs;
    for (std::int64_t b = 0; b < spec.blobs_per_class; ++b) {
        const double frac = (static_cast<double>(b) + 0.5) / static_cast<double>(spec.blobs_per_class);
        Blob blob;
        blob.cx = v * frac;
        blob.cy = v * (0.25 + 0.5 * frac);
        blob.cz = band_lo + band * 0.5;
        blob.radius = radius;
        blob.amp = amp;
        blobs.push_back(blob);
    }
    return blobs;
}

void add_blobs(std::vector<float>& vol, std::int64_t v, const std::vector<Blob>& blobs, double gain) {
    for (const auto& b : blobs) {
        const double inv2r2 = 1.0 / (2.0 * b.radius * b.radius);
        const std::int64_t lo_x = std::max<std::int64_t>(0, static_cast<std::int64_t>(b.cx - 3 * b.radius));
        const std::int64_t hi_x = std::min<std::int64_t>(v, static_cast<std::int64_t>(b.cx + 3 * b.radius) + 1);
        const std::int64_t lo_y = std::max<std::int64_t>(0, static_cast<std::int64_t>(b.cy - 3 * b.radius));
        const std::int64_t hi_y = std::min<std::int64_t>(v, static_cast<std::int64_t>(b.cy + 3 * b.radius) + 1);
        const std::int64_t lo_z = std::max<std::int64_t>(0, static_cast<std::int64_t>(b.cz - 3 * b.radius));
        const std::int64_t hi_z = std::min<std::int64_t>(v, static_cast<std::int64_t>(b.cz + 3 * b.radius) + 1);
        for (std::int64_t z = lo_z; z < hi_z; ++z)
            for (std::int64_t y = lo_y; y < hi_y; ++y)
                for (std::int64_t x = lo_x; x < hi_x; ++x) {
                    const double dx = static_cast<double>(x) - b.cx;
                    const double dy = static_cast<double>(y) - b.cy;
                    const double dz = static_cast<double>(z) - b.cz;
                    const double d2 = dx * dx + dy * dy + dz * dz;
                    vol[static_cast<std::size_t>((z * v + y) * v + x)] +=
                        static_cast<float>(gain * b.amp * std::exp(-d2 * inv2r2));
                }
    }
}

// Smooth per-sample field: a random lattice trilinearly interpolated, applied
// only inside the shared z band (top quarter of the volume).
void add_latent(std::vector<float>& vol, std::int64_t v, const std::vector<double>& lattice, std::int64_t cells,
                double amp) {
    if (amp == 0.0) return;
    const std::int64_t z0 = 3 * v / 4;
    const double scale = static_cast<double>(cells - 1);
    auto lat = [&](std::int64_t ix, std::int64_t iy, std::int64_t iz) {
        return lattice[static_cast<std::size_t>((iz * cells + iy) * cells + ix)];
    };
    for (std::int64_t z = z0; z < v; ++z)
        for (std::int64_t y = 0; y < v; ++y)
            for (std::int64_t x = 0; x < v; ++x) {
                const double fx = static_cast<double>(x) / static_cast<double>(v - 1) * scale;
                const double fy = static_cast<double>(y) / static_cast<double>(v - 1) * scale;
                const double fz = static_cast<double>(z - z0) / std::max<double>(1.0, static_cast<double>(v - z0 - 1)) * scale;
                const std::int64_t ix = std::min<std::int64_t>(cells - 2, static_cast<std::int64_t>(fx));
                const std::int64_t iy = std::min<std::int64_t>(cells - 2, static_cast<std::int64_t>(fy));
                const std::int64_t iz = std::min<std::int64_t>(cells - 2, static_cast<std::int64_t>(fz));
                const double tx = fx - static_cast<double>(ix);
                const double ty = fy - static_cast<double>(iy);
                const double tz = fz - static_cast<double>(iz);
                double c00 = lat(ix, iy, iz) * (1 - tx) + lat(ix + 1, iy, iz) * tx;
                double c10 = lat(ix, iy + 1, iz) * (1 - tx) + lat(ix + 1, iy + 1, iz) * tx;
                double c01 = lat(ix, iy, iz + 1) * (1 - tx) + lat(ix + 1, iy, iz + 1) * tx;
                double c11 = lat(ix, iy + 1, iz + 1) * (1 - tx) + lat(ix + 1, iy + 1, iz + 1) * tx;
                const double c0 = c00 * (1 - ty) + c10 * ty;
                const double c1 = c01 * (1 - ty) + c11 * ty;
                vol[static_cast<std::size_t>((z * v + y) * v + x)] += static_cast<float>(amp * (c0 * (1 - tz) + c1 * tz));
            }
}

void minmax_normalize(std::vector<float>& vol) {
    float lo = vol[0], hi = vol[0];
    for (float x : vol) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    const float range = hi - lo;
    if (range <= 0.0f) {
        std::fill(vol.begin(), vol.end(), 0.0f);
        return;
    }
    const float inv = 1.0f / range;
    for (float& x : vol) x = (x - lo) * inv;
}

void write_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<float> class_template(const SyntheticSpec& spec, std::int64_t cls) {
    check(cls >= 0 && cls < 3, "class_template: class must lie in {0,1,2}");
    std::vector<float> vol(static_cast<std::size_t>(spec.vol_extent * spec.vol_extent * spec.vol_extent), 0.0f);
    add_blobs(vol, spec.vol_extent, class_blobs(spec, cls), 1.0);
    return vol;
}

SyntheticDataset generate(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticDataset ds;
    ds.spec = spec;
    const std::int64_t v = spec.vol_extent;
    const std::size_t voxels = static_cast<std::size_t>(v * v * v);

    // Largest-remainder label quotas, then a seeded shuffle.
    const double priors[3] = {spec.prior_nc, spec.prior_mci, spec.prior_ad};
    std::int64_t counts[3];
    double rema[3];
    std::int64_t assigned = 0;
    for (int c = 0; c < 3; ++c) {
        const double exact = priors[c] * static_cast<double>(spec.n_samples);
        counts[c] = static_cast<std::int64_t>(exact);
        rema[c] = exact - static_cast<double>(counts[c]);
        assigned += counts[c];
    }
    while (assigned < spec.n_samples) {
        int best = 0;
        for (int c = 1; c < 3; ++c)
            if (rema[c] > rema[best]) best = c;
        ++counts[best];
        rema[best] = -1;
        ++assigned;
    }
    std::vector<std::int64_t> labels;
    for (int c = 0; c < 3; ++c) labels.insert(labels.end(), static_cast<std::size_t>(counts[c]), c);
    Rng master(spec.seed);
    {
        Rng shuffler = master.fork(0x6c6162);  // label stream
        shuffler.shuffle(labels);
    }

    std::vector<std::vector<float>> templates;
    for (int c = 0; c < 3; ++c) templates.push_back(class_template(spec, c));

    ds.samples.resize(static_cast<std::size_t>(spec.n_samples));
    const std::int64_t cells = spec.latent_cells;
    for (std::int64_t i = 0; i < spec.n_samples; ++i) {
        Rng rng = master.fork(0x73616d70, static_cast<std::uint64_t>(i));  // per-sample stream
        VolumePair& s = ds.samples[static_cast<std::size_t>(i)];
        s.extent = v;
        s.label = labels[static_cast<std::size_t>(i)];
        s.mri.assign(voxels, 0.0f);
        s.pet.assign(voxels, 0.0f);

        const auto& tpl = templates[static_cast<std::size_t>(s.label)];
        for (std::size_t j = 0; j < voxels; ++j) {
            s.mri[j] = tpl[j];
            s.pet[j] = static_cast<float>(spec.pet_gain) * tpl[j];
        }

        std::vector<double> lattice(static_cast<std::size_t>(cells * cells * cells));
        for (auto& c : lattice) c = rng.normal();
        add_latent(s.mri, v, lattice, cells, spec.latent_amp);
        add_latent(s.pet, v, lattice, cells, spec.latent_amp);

        if (spec.noise_sigma > 0) {
            for (auto& x : s.mri) x += static_cast<float>(rng.normal(0.0, spec.noise_sigma));
            for (auto& x : s.pet) x += static_cast<float>(rng.normal(0.0, spec.noise_sigma));
        }
        minmax_normalize(s.mri);
        minmax_normalize(s.pet);
    }
    return ds;
}

double template_probe_accuracy(const SyntheticDataset& ds) {
    const auto& spec = ds.spec;
    const std::int64_t v = spec.vol_extent;
    // Support sets: voxels where each class template exceeds a fixed fraction
    // of its peak amplitude.
    std::vector<std::vector<std::size_t>> support(3);
    std::vector<double> amp = {spec.amp_nc, spec.amp_mci, spec.amp_ad};
    for (int c = 0; c < 3; ++c) {
        auto tpl = class_template(spec, c);
        for (std::size_t j = 0; j < tpl.size(); ++j)
            if (tpl[j] > 0.5 * amp[static_cast<std::size_t>(c)]) support[static_cast<std::size_t>(c)].push_back(j);
        check(!support[static_cast<std::size_t>(c)].empty(), "template_probe: empty support for class");
    }
    // Background voxels: outside every class support and below the shared band.
    std::vector<std::size_t> background;
    {
        std::vector<bool> in_support(static_cast<std::size_t>(v * v * v), false);
        for (int c = 0; c < 3; ++c)
            for (auto j : support[static_cast<std::size_t>(c)]) in_support[j] = true;
        for (std::int64_t z = 0; z < 3 * v / 4; ++z)
            for (std::int64_t y = 0; y < v; ++y)
                for (std::int64_t x = 0; x < v; ++x) {
                    const auto j = static_cast<std::size_t>((z * v + y) * v + x);
                    if (!in_support[j]) background.push_back(j);
                }
    }
    std::int64_t correct = 0;
    for (const auto& s : ds.samples) {
        double bg = 0;
        for (auto j : background) bg += s.mri[j];
        bg /= static_cast<double>(background.size());
        double best = -1e30;
        int best_c = 0;
        for (int c = 0; c < 3; ++c) {
            double m = 0;
            for (auto j : support[static_cast<std::size_t>(c)]) m += s.mri[j];
            m /= static_cast<double>(support[static_cast<std::size_t>(c)].size());
            const double score = (m - bg) / amp[static_cast<std::size_t>(c)];
            if (score > best) {
                best = score;
                best_c = c;
            }
        }
        if (best_c == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.samples.size());
}

SplitIndices split(std::int64_t n, std::array<double, 3> fractions, std::uint64_t seed) {
    const double fsum = fractions[0] + fractions[1] + fractions[2];
    check(std::abs(fsum - 1.0) < 1e-9, "split: fractions must sum to 1");
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = Rng(seed).fork(0x73706c69);  // split stream
    rng.shuffle(idx);
    const std::int64_t n_train = static_cast<std::int64_t>(fractions[0] * static_cast<double>(n));
    const std::int64_t n_val = static_cast<std::int64_t>(fractions[1] * static_cast<double>(n));
    SplitIndices s;
    s.train.assign(idx.begin(), idx.begin() + n_train);
    s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
    s.test.assign(idx.begin() + n_train + n_val, idx.end());
    return s;
}

// ---------------------------------------------------------------------------
// volume container

void write_volume(const std::string& path, const VolumeFile& v) {
    const std::uint64_t n = static_cast<std::uint64_t>(v.depth) * v.height * v.width;
    check(v.voxels.size() == n, "write_volume: voxel count does not match extents");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(kVolumeMagic, 8);
    write_u32(f, kVolumeFormatVersion);
    write_u32(f, v.depth);
    write_u32(f, v.height);
    write_u32(f, v.width);
    f.put(static_cast<char>(v.modality));
    f.put(static_cast<char>(v.label));
    // Little-endian float32 payload; the build targets little-endian hosts.
    f.write(reinterpret_cast<const char*>(v.voxels.data()), static_cast<std::streamsize>(n * 4));
    if (!f) throw IoError("short write: " + path);
}

VolumeFile read_volume(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open: " + path);
    const std::uint64_t file_size = static_cast<std::uint64_t>(f.tellg());
    f.seekg(0);
    unsigned char header[26];
    if (file_size < sizeof(header)) throw IoError("volume file too short: " + path);
    f.read(reinterpret_cast<char*>(header), sizeof(header));
    if (std::memcmp(header, kVolumeMagic, 8) != 0) throw IoError("bad magic in volume file: " + path);
    const std::uint32_t version = read_u32(header + 8);
    if (version != kVolumeFormatVersion)
        throw IoError("unsupported volume format version " + std::to_string(version) + ": " + path);
    VolumeFile v;
    v.depth = read_u32(header + 12);
    v.height = read_u32(header + 16);
    v.width = read_u32(header + 20);
    v.modality = header[24];
    v.label = header[25];
    if (v.depth == 0 || v.height == 0 || v.width == 0 || v.depth > kMaxExtent || v.height > kMaxExtent ||
        v.width > kMaxExtent)
        throw IoError("implausible extents in volume file: " + path);
    const std::uint64_t n = static_cast<std::uint64_t>(v.depth) * v.height * v.width;
    // Length check before the payload allocation.
    if (file_size != sizeof(header) + n * 4)
        throw IoError("volume payload length mismatch (declared " + std::to_string(sizeof(header) + n * 4) +
                      " bytes, file has " + std::to_string(file_size) + "): " + path);
    v.voxels.resize(n);
    f.read(reinterpret_cast<char*>(v.voxels.data()), static_cast<std::streamsize>(n * 4));
    if (!f) throw IoError("short read: " + path);
    return v;
}

void write_dataset_split(const std::string& dir, const std::vector<VolumePair>& samples,
                         const std::vector<std::int64_t>& indices) {
    fs::create_directories(dir);
    std::ofstream labels(fs::path(dir) / "labels.tsv", std::ios::trunc);
    if (!labels) throw IoError("cannot write labels.tsv in " + dir);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto& s = samples[static_cast<std::size_t>(indices[k])];
        std::ostringstream id;
        id << "s" << std::setw(5) << std::setfill('0') << k;
        VolumeFile vf;
        vf.depth = vf.height = vf.width = static_cast<std::uint32_t>(s.extent);
        vf.label = static_cast<std::uint8_t>(s.label);
        vf.modality = 0;
        vf.voxels = s.mri;
        write_volume((fs::path(dir) / (id.str() + "_mri.cmv")).string(), vf);
        vf.modality = 1;
        vf.voxels = s.pet;
        write_volume((fs::path(dir) / (id.str() + "_pet.cmv")).string(), vf);
        labels << id.str() << '\t' << s.label << '\n';
    }
}

std::vector<VolumePair> read_dataset_split(const std::string& dir) {
    std::ifstream labels(fs::path(dir) / "labels.tsv");
    if (!labels) throw IoError("cannot open labels.tsv in " + dir);
    std::vector<VolumePair> out;
    std::string line;
    while (std::getline(labels, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw IoError("malformed labels.tsv line: " + line);
        const std::string id = line.substr(0, tab);
        VolumePair s;
        s.label = std::stoll(line.substr(tab + 1));
        auto mri = read_volume((fs::path(dir) / (id + "_mri.cmv")).string());
        auto pet = read_volume((fs::path(dir) / (id + "_pet.cmv")).string());
        if (mri.depth != mri.height || mri.height != mri.width || pet.depth != mri.depth ||
            pet.height != mri.height || pet.width != mri.width)
            throw IoError("volume pair extents mismatch for sample " + id);
        s.extent = mri.depth;
        s.mri = std::move(mri.voxels);
        s.pet = std::move(pet.voxels);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// metrics

double accuracy(const std::vector<std::int64_t>& preds, const std::vector<std::int64_t>& labels) {
    check(preds.size() == labels.size() && !preds.empty(), "accuracy: size mismatch or empty");
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double macro_auc_ovr(const std::vector<std::vector<double>>& scores, const std::vector<std::int64_t>& labels,
                     std::int64_t n_classes) {
    check(scores.size() == labels.size() && !scores.empty(), "macro_auc_ovr: size mismatch or empty");
    const std::size_t n = labels.size();
    double total = 0;
    for (std::int64_t c = 0; c < n_classes; ++c) {
        std::int64_t n_pos = 0;
        for (auto l : labels)
            if (l == c) ++n_pos;
        if (n_pos == 0) throw std::invalid_argument("macro_auc_ovr: class " + std::to_string(c) + " absent from labels");
        if (n_pos == static_cast<std::int64_t>(n))
            throw std::invalid_argument("macro_auc_ovr: class " + std::to_string(c) + " has no negatives");
        // Average ranks of the class-c scores; ties share the mean rank.
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
            return scores[i][static_cast<std::size_t>(c)] < scores[j][static_cast<std::size_t>(c)];
        });
        std::vector<double> rank(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && scores[order[j + 1]][static_cast<std::size_t>(c)] ==
                                    scores[order[i]][static_cast<std::size_t>(c)])
                ++j;
            const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mean_rank;
            i = j + 1;
        }
        double rank_sum_pos = 0;
        for (std::size_t k = 0; k < n; ++k)
            if (labels[k] == c) rank_sum_pos += rank[k];
        const double n_neg = static_cast<double>(n) - static_cast<double>(n_pos);
        const double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
        total += u / (static_cast<double>(n_pos) * n_neg);
    }
    return total / static_cast<double>(n_classes);
}

double macro_f1(const std::vector<std::int64_t>& preds, const std::vector<std::int64_t>& labels,
                std::int64_t n_classes) {
    check(preds.size() == labels.size() && !preds.empty(), "macro_f1: size mismatch or empty");
    double total = 0;
    for (std::int64_t c = 0; c < n_classes; ++c) {
        std::int64_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            if (preds[i] == c && labels[i] == c) ++tp;
            else if (preds[i] == c) ++fp;
            else if (labels[i] == c) ++fn;
        }
        const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp) + static_cast<double>(fn);
        total += denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
    }
    return total / static_cast<double>(n_classes);
}

EvalReport evaluate(const std::vector<std::vector<double>>& scores, const std::vector<std::int64_t>& labels,
                    std::int64_t n_classes) {
    EvalReport r;
    std::vector<std::int64_t> preds(labels.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < scores[i].size(); ++c)
            if (scores[i][c] > scores[i][best]) best = c;
        preds[i] = static_cast<std::int64_t>(best);
    }
    r.accuracy = accuracy(preds, labels);
    r.macro_auc = macro_auc_ovr(scores, labels, n_classes);
    r.macro_f1 = macro_f1(preds, labels, n_classes);
    r.confusion.assign(static_cast<std::size_t>(n_classes), std::vector<std::int64_t>(static_cast<std::size_t>(n_classes), 0));
    for (std::size_t i = 0; i < preds.size(); ++i)
        ++r.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
    return r;
}

}  // namespace cmvim
