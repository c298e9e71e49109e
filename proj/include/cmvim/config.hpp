#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "cmvim/model.hpp"

namespace cmvim {

enum class Stage { pretrain1 = 1, pretrain2 = 2, finetune = 3 };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::pretrain1: return "pretrain1";
        case Stage::pretrain2: return "pretrain2";
        default: return "finetune";
    }
}

// All run hyperparameters. Defaults are the toy scale so the test suite runs
// in minutes; the paper-scale values ship as config presets.
struct TrainConfig {
    std::string dtype = "float32";  // float32 | float64
    std::uint64_t seed = 42;

    // model
    std::int64_t vol_extent = 32;
    std::int64_t patch_extent = 8;
    std::int64_t dim = 32;
    std::int64_t depth = 2;
    std::int64_t d_state = 16;
    std::int64_t expand = 2;
    std::int64_t conv_width = 4;
    std::int64_t heads = 1;
    std::int64_t d_proj = 32;
    std::int64_t num_classes = 3;

    // optimization
    std::int64_t epochs = 30;
    std::int64_t batch_size = 8;
    double base_lr = 2e-3;
    double weight_decay = 0.05;
    double alpha = 0.005;         // intra-modal weight
    double lambda_inter = 0.2;    // inter-modal weight
    double ema_momentum = 0.999;
    double mask_ratio = 0.75;
    double focal_gamma = 3.0;
    double temperature = 1.0;
    double grad_clip = 0.0;       // 0 disables; otherwise global-norm ceiling
    std::int64_t warmup_steps = 0;

    // variants
    bool recon_full_volume = false;  // default: loss on masked tokens only
    bool per_patch_norm = false;     // default: raw normalized voxel targets
    bool euler_discretize = false;   // default: zero-order hold
    bool tie_scan_branches = false;

    ModelConfig model() const {
        ModelConfig m;
        m.vol_extent = vol_extent;
        m.patch_extent = patch_extent;
        m.dim = dim;
        m.depth = depth;
        m.d_state = d_state;
        m.expand = expand;
        m.conv_width = conv_width;
        m.heads = static_cast<int>(heads);
        m.d_proj = d_proj;
        m.num_classes = num_classes;
        m.zoh_discretization = !euler_discretize;
        m.tie_scan_branches = tie_scan_branches;
        return m;
    }

    void validate() const;
    std::string to_text() const;  // flat key = value snapshot, parse round-trips
};

// Synthetic paired-volume generator parameters. Class templates are fixed
// blob patterns in disjoint z bands; a per-sample smooth latent field couples
// the two modalities inside the top z band; noise is per-modality independent.
struct SyntheticSpec {
    std::int64_t n_samples = 60;
    std::int64_t vol_extent = 32;
    double prior_nc = 1.0 / 3.0;
    double prior_mci = 1.0 / 3.0;
    double prior_ad = 1.0 / 3.0;
    std::int64_t blobs_per_class = 3;
    double blob_radius_frac = 0.09;  // radius as a fraction of the extent
    double amp_nc = 0.55;
    double amp_mci = 0.75;
    double amp_ad = 0.95;
    double latent_amp = 0.35;
    std::int64_t latent_cells = 4;  // lattice resolution of the smooth field
    double noise_sigma = 0.08;
    double pet_gain = 0.85;  // PET template amplitude relative to MRI
    std::uint64_t seed = 7;

    void validate() const;
    std::string to_text() const;
};

// Flat "key = value" text. '#' starts a comment; unknown keys are hard errors.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> parse_kv_file(const std::string& path);

TrainConfig train_config_from_kv(const std::map<std::string, std::string>& kv);
TrainConfig load_train_config(const std::string& path);

SyntheticSpec synthetic_spec_from_kv(const std::map<std::string, std::string>& kv);
SyntheticSpec load_synthetic_spec(const std::string& path);

}  // namespace cmvim
