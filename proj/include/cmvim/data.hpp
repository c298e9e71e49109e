#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cmvim/config.hpp"
#include "cmvim/rng.hpp"

namespace cmvim {

// One sample: two aligned single-channel volumes plus a class label
// (0 = NC, 1 = MCI, 2 = AD). Voxel index is ((z*h)+y)*w + x.
struct VolumePair {
    std::int64_t extent = 0;
    std::vector<float> mri;
    std::vector<float> pet;
    std::int64_t label = 0;
};

struct SyntheticDataset {
    std::vector<VolumePair> samples;
    SyntheticSpec spec;
};

// Deterministic under spec.seed; labels follow the priors by largest-remainder
// quota, then a seeded shuffle.
SyntheticDataset generate(const SyntheticSpec& spec);

// The fixed per-class blob template (before latent field and noise), used by
// generation and by the recoverability probe.
std::vector<float> class_template(const SyntheticSpec& spec, std::int64_t cls);

// Nearest-template linear probe on per-class mean blob intensities.
double template_probe_accuracy(const SyntheticDataset& ds);

// ---------------------------------------------------------------------------
// splits

struct SplitIndices {
    std::vector<std::int64_t> train, val, test;
};

// Sizes are (floor(f0*n), floor(f1*n), remainder); seeded shuffle, disjoint
// and exhaustive. The split is sample-level.
SplitIndices split(std::int64_t n, std::array<double, 3> fractions, std::uint64_t seed);

// ---------------------------------------------------------------------------
// volume container file format
//
//   magic "CMVIMVOL" | version u32 LE | extents d,h,w u32 LE | modality u8 |
//   label u8 | float32 voxels LE, index ((z*h)+y)*w + x

constexpr std::uint32_t kVolumeFormatVersion = 1;

struct VolumeFile {
    std::uint32_t depth = 0, height = 0, width = 0;
    std::uint8_t modality = 0;  // 0 = mri, 1 = pet
    std::uint8_t label = 0;
    std::vector<float> voxels;
};

void write_volume(const std::string& path, const VolumeFile& v);
VolumeFile read_volume(const std::string& path);

// Dataset directory layout: <root>/<split>/<sample_id>_{mri|pet}.cmv plus
// labels.tsv (sample_id<TAB>label) per split directory.
void write_dataset_split(const std::string& dir, const std::vector<VolumePair>& samples,
                         const std::vector<std::int64_t>& indices);
std::vector<VolumePair> read_dataset_split(const std::string& dir);

// ---------------------------------------------------------------------------
// metrics

struct EvalReport {
    double accuracy = 0;
    double macro_auc = 0;
    double macro_f1 = 0;
    std::vector<std::vector<std::int64_t>> confusion;  // [true][pred]
};

double accuracy(const std::vector<std::int64_t>& preds, const std::vector<std::int64_t>& labels);

// Macro one-vs-rest AUC, rank-based with average-rank tie handling.
// Every class must appear in labels.
double macro_auc_ovr(const std::vector<std::vector<double>>& scores, const std::vector<std::int64_t>& labels,
                     std::int64_t n_classes);

double macro_f1(const std::vector<std::int64_t>& preds, const std::vector<std::int64_t>& labels,
                std::int64_t n_classes);

EvalReport evaluate(const std::vector<std::vector<double>>& scores, const std::vector<std::int64_t>& labels,
                    std::int64_t n_classes);

}  // namespace cmvim
