#pragma once

// The multi-modal masked Vim autoencoder: 3-d patchify, modality-specific
// token embedding, random masking, a shared encoder of residual Vim blocks
// over the [MRI | PET] visible-token concatenation, per-modality cross
// attention fusion, per-modality shallow decoders, and the class-token
// classification path used for fine-tuning.

#include <cstdint>
#include <string>
#include <vector>

#include "cmvim/nn.hpp"
#include "cmvim/rng.hpp"
#include "cmvim/ssm.hpp"
#include "cmvim/tensor.hpp"

namespace cmvim {

enum class Modality { mri = 0, pet = 1 };

inline const char* modality_name(Modality m) { return m == Modality::mri ? "mri" : "pet"; }

struct ModelConfig {
    std::int64_t vol_extent = 32;   // voxels per axis
    std::int64_t patch_extent = 8;  // patch edge
    std::int64_t dim = 32;          // token width
    std::int64_t depth = 2;         // encoder Vim blocks
    std::int64_t d_state = 16;
    std::int64_t expand = 2;
    std::int64_t conv_width = 4;
    int heads = 1;
    std::int64_t d_proj = 32;  // contrastive projection width
    std::int64_t num_classes = 3;
    bool zoh_discretization = true;
    bool tie_scan_branches = false;  // test mode: backward branch shares forward params

    std::int64_t grid() const { return vol_extent / patch_extent; }
    std::int64_t tokens_per_volume() const {
        const auto g = grid();
        return g * g * g;
    }
    std::int64_t voxels_per_patch() const { return patch_extent * patch_extent * patch_extent; }

    void validate() const {
        if (vol_extent <= 0 || patch_extent <= 0 || vol_extent % patch_extent != 0)
            throw ConfigError("patch extent " + std::to_string(patch_extent) + " must divide volume extent " +
                              std::to_string(vol_extent));
        if (dim <= 0 || depth <= 0) throw ConfigError("dim and depth must be positive");
        if (heads <= 0 || dim % heads != 0) throw ConfigError("heads must divide dim");
    }
};

// ---------------------------------------------------------------------------
// patchify

// Splits a cubic volume (row-major, index ((z*h)+y)*w + x) into non-overlapping
// cubic patches. Token order is z-major over the patch grid; voxel order inside
// a patch is z-major as well. Output is [tokens, voxels_per_patch] flattened.
template <class T>
std::vector<T> patchify(const std::vector<T>& volume, std::int64_t vol_extent, std::int64_t patch_extent) {
    if (patch_extent <= 0 || vol_extent % patch_extent != 0)
        throw ConfigError("patchify: patch extent must divide volume extent");
    const std::int64_t v = vol_extent, p = patch_extent, g = v / p;
    check(static_cast<std::int64_t>(volume.size()) == v * v * v, "patchify: volume size mismatch");
    std::vector<T> tokens(static_cast<std::size_t>(volume.size()));
    const std::int64_t vox = p * p * p;
    for (std::int64_t pz = 0; pz < g; ++pz)
        for (std::int64_t py = 0; py < g; ++py)
            for (std::int64_t px = 0; px < g; ++px) {
                const std::int64_t token = (pz * g + py) * g + px;
                for (std::int64_t dz = 0; dz < p; ++dz)
                    for (std::int64_t dy = 0; dy < p; ++dy)
                        for (std::int64_t dx = 0; dx < p; ++dx) {
                            const std::int64_t z = pz * p + dz, y = py * p + dy, x = px * p + dx;
                            tokens[static_cast<std::size_t>(token * vox + (dz * p + dy) * p + dx)] =
                                volume[static_cast<std::size_t>((z * v + y) * v + x)];
                        }
            }
    return tokens;
}

template <class T>
std::vector<T> unpatchify(const std::vector<T>& tokens, std::int64_t vol_extent, std::int64_t patch_extent) {
    if (patch_extent <= 0 || vol_extent % patch_extent != 0)
        throw ConfigError("unpatchify: patch extent must divide volume extent");
    const std::int64_t v = vol_extent, p = patch_extent, g = v / p;
    check(static_cast<std::int64_t>(tokens.size()) == v * v * v, "unpatchify: token size mismatch");
    std::vector<T> volume(tokens.size());
    const std::int64_t vox = p * p * p;
    for (std::int64_t pz = 0; pz < g; ++pz)
        for (std::int64_t py = 0; py < g; ++py)
            for (std::int64_t px = 0; px < g; ++px) {
                const std::int64_t token = (pz * g + py) * g + px;
                for (std::int64_t dz = 0; dz < p; ++dz)
                    for (std::int64_t dy = 0; dy < p; ++dy)
                        for (std::int64_t dx = 0; dx < p; ++dx) {
                            const std::int64_t z = pz * p + dz, y = py * p + dy, x = px * p + dx;
                            volume[static_cast<std::size_t>((z * v + y) * v + x)] =
                                tokens[static_cast<std::size_t>(token * vox + (dz * p + dy) * p + dx)];
                        }
            }
    return volume;
}

// ---------------------------------------------------------------------------
// masking

struct MaskPartition {
    std::vector<std::int64_t> visible;  // ascending
    std::vector<std::int64_t> masked;   // ascending
};

// Uniform sample without replacement; round(ratio*n) indices are masked.
inline MaskPartition random_mask(std::int64_t n_tokens, double ratio, Rng& rng) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must lie in (0,1)");
    const std::int64_t n_masked = std::llround(ratio * static_cast<double>(n_tokens));
    check(n_masked > 0 && n_masked < n_tokens, "random_mask: degenerate partition at n=" + std::to_string(n_tokens));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n_tokens));
    for (std::int64_t i = 0; i < n_tokens; ++i) idx[static_cast<std::size_t>(i)] = i;
    rng.shuffle(idx);
    MaskPartition part;
    part.masked.assign(idx.begin(), idx.begin() + n_masked);
    part.visible.assign(idx.begin() + n_masked, idx.end());
    std::sort(part.masked.begin(), part.masked.end());
    std::sort(part.visible.begin(), part.visible.end());
    return part;
}

// ---------------------------------------------------------------------------
// model

template <class S>
struct Model {
    ModelConfig cfg;
    Params<S> params;       // online parameters
    Params<S> target;       // EMA shadow (entries flagged in_target_path are live)

    // modality-indexed modules (0 = mri, 1 = pet)
    Linear<S> patch_proj[2];
    int pos_embed[2] = {-1, -1};
    int mask_token[2] = {-1, -1};
    int cls_token = -1;
    std::vector<VimBlock<S>> encoder;
    CrossAttention<S> fusion[2];
    VimBlock<S> dec_block[2];
    LayerNorm<S> dec_norm[2];
    Linear<S> dec_out[2];
    Mlp<S> intra_proj[2];   // online intra head; its EMA shadow is the target head
    Mlp<S> inter_proj[2];
    PredictHead<S> head;

    Model(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
        cfg.validate();
        Rng rng = Rng(seed).fork(0x696e6974);  // "init" stream
        const auto dims = SsmDims::make(cfg.dim, cfg.expand, cfg.d_state, cfg.conv_width, cfg.zoh_discretization);
        const std::int64_t vox = cfg.voxels_per_patch();
        const std::int64_t n_tok = cfg.tokens_per_volume();

        params.set_target_scope(true);
        for (int m = 0; m < 2; ++m) {
            const std::string mn = m == 0 ? "mri" : "pet";
            patch_proj[m] = Linear<S>(params, "embed." + mn + ".proj", vox, cfg.dim, rng);
            pos_embed[m] = params.add("embed." + mn + ".pos", init_normal<S>({n_tok, cfg.dim}, 0.02, rng));
        }
        for (std::int64_t l = 0; l < cfg.depth; ++l)
            encoder.emplace_back(params, "encoder.block" + std::to_string(l), dims, rng, cfg.tie_scan_branches);
        for (int m = 0; m < 2; ++m) {
            const std::string mn = m == 0 ? "mri" : "pet";
            intra_proj[m] = Mlp<S>(params, "intra_proj." + mn, cfg.dim, cfg.dim, cfg.d_proj, rng);
        }
        params.set_target_scope(false);

        for (int m = 0; m < 2; ++m) {
            const std::string mn = m == 0 ? "mri" : "pet";
            mask_token[m] = params.add("embed." + mn + ".mask_token", init_normal<S>({cfg.dim}, 0.02, rng));
            fusion[m] = CrossAttention<S>(params, "fuse." + mn, cfg.dim, cfg.heads, rng);
            dec_block[m] = VimBlock<S>(params, "dec." + mn + ".block", dims, rng, cfg.tie_scan_branches);
            dec_norm[m] = LayerNorm<S>(params, "dec." + mn + ".norm", cfg.dim);
            dec_out[m] = Linear<S>(params, "dec." + mn + ".out", cfg.dim, vox, rng);
            inter_proj[m] = Mlp<S>(params, "inter_proj." + mn, cfg.dim, cfg.dim, cfg.d_proj, rng);
        }
        cls_token = params.add("cls_token", init_normal<S>({cfg.dim}, 0.02, rng));
        head = PredictHead<S>(params, "head", cfg.dim, cfg.num_classes, rng);

        target = params.clone();
    }

    // Fresh classifier path for fine-tuning from a pretrained checkpoint.
    void reinit_classifier(std::uint64_t seed) {
        Rng rng = Rng(seed).fork(0x68656164);  // "head" stream
        params[cls_token] = init_normal<S>({cfg.dim}, 0.02, rng);
        params[cls_token].set_needs_grad(true);
        params[head.norm.gain] = TensorT<S>::full({cfg.dim}, S(1));
        params[head.norm.bias] = TensorT<S>::zeros({cfg.dim});
        params[head.l1.w] = init_normal<S>({cfg.dim, cfg.dim}, 0.02, rng);
        params[head.l1.b] = TensorT<S>::zeros({cfg.dim});
        params[head.l2.w] = TensorT<S>::zeros({cfg.dim, cfg.num_classes});
        params[head.l2.b] = TensorT<S>::zeros({cfg.num_classes});
        for (int i : {head.norm.gain, head.norm.bias, head.l1.w, head.l1.b, head.l2.w, head.l2.b})
            params[i].set_needs_grad(true);
    }

    std::int64_t param_count() const { return params.total_elements(); }

    // Deep copy with fresh parameter storage (finite-difference workers).
    Model clone_deep() const {
        Model m = *this;
        m.params = params.clone();
        m.target = target.clone();
        return m;
    }

    // x * P_modality + E_pos, rowwise over all grid tokens.
    // patch_tokens: [tokens_per_volume, voxels_per_patch] as a flat vector.
    TensorT<S> embed(Params<S>& P, const std::vector<S>& patch_tokens, Modality m) const {
        const std::int64_t n_tok = cfg.tokens_per_volume();
        const std::int64_t vox = cfg.voxels_per_patch();
        check(static_cast<std::int64_t>(patch_tokens.size()) == n_tok * vox, "embed: token matrix size mismatch");
        auto x = TensorT<S>::from({n_tok, vox}, patch_tokens);
        const int mi = static_cast<int>(m);
        return add(patch_proj[mi].fwd(P, x), P[pos_embed[mi]]);
    }

    // Joint encoding of the two visible streams, MRI first. Returns the full
    // encoded sequence; split per modality with slice_rows at the call site.
    TensorT<S> encode_seq(Params<S>& P, const TensorT<S>& seq) const {
        auto t = seq;
        for (const auto& blk : encoder) t = blk.fwd(P, t);
        return t;
    }

    struct EncodedPair {
        TensorT<S> mri, pet;  // [n_visible, D] each
    };

    EncodedPair encode(Params<S>& P, const TensorT<S>& vis_mri, const TensorT<S>& vis_pet) const {
        auto seq = concat<S>({vis_mri, vis_pet}, 0);
        auto enc = encode_seq(P, seq);
        EncodedPair out;
        out.mri = slice_rows(enc, 0, vis_mri.dim(0));
        out.pet = slice_rows(enc, vis_mri.dim(0), enc.dim(0));
        return out;
    }

    // Rebuilds the full grid for one modality: visible encodings at their
    // positions, mask_token + E_pos at masked positions.
    TensorT<S> assemble_grid(Params<S>& P, const TensorT<S>& encoded_visible, const MaskPartition& part,
                             Modality m) const {
        const std::int64_t n_tok = cfg.tokens_per_volume();
        const int mi = static_cast<int>(m);
        auto mask_rows = add(repeat_row(P[mask_token[mi]], static_cast<std::int64_t>(part.masked.size())),
                             gather_rows(P[pos_embed[mi]], part.masked));
        auto stacked = concat<S>({encoded_visible, mask_rows}, 0);
        std::vector<std::int64_t> perm(static_cast<std::size_t>(n_tok));
        for (std::size_t i = 0; i < part.visible.size(); ++i) perm[static_cast<std::size_t>(part.visible[i])] = static_cast<std::int64_t>(i);
        for (std::size_t i = 0; i < part.masked.size(); ++i)
            perm[static_cast<std::size_t>(part.masked[i])] = static_cast<std::int64_t>(part.visible.size() + i);
        return gather_rows(stacked, perm);
    }

    // Cross-attention fusion: queries are one modality's full grid, keys and
    // values the concatenation of both grids.
    struct FusedPair {
        TensorT<S> mri, pet;  // [tokens_per_volume, D]
    };

    FusedPair fuse(Params<S>& P, const TensorT<S>& grid_mri, const TensorT<S>& grid_pet) const {
        auto kv = concat<S>({grid_mri, grid_pet}, 0);
        FusedPair out;
        out.mri = fusion[0].fwd(P, grid_mri, kv);
        out.pet = fusion[1].fwd(P, grid_pet, kv);
        return out;
    }

    // Shallow decoder: one Vim block, norm, then a linear map back to voxels.
    TensorT<S> decode(Params<S>& P, const TensorT<S>& fused, Modality m) const {
        const int mi = static_cast<int>(m);
        auto t = dec_block[mi].fwd(P, fused);
        return dec_out[mi].fwd(P, dec_norm[mi].fwd(P, t));
    }

    // Full masked-autoencoder pass for one sample view (both modalities).
    struct MaeOut {
        TensorT<S> enc_mri, enc_pet;         // encoded visible tokens
        TensorT<S> fused_mri, fused_pet;     // cross-attended full grids
        TensorT<S> recon_mri, recon_pet;     // [tokens, voxels]
    };

    MaeOut forward_mae(Params<S>& P, const std::vector<S>& tokens_mri, const std::vector<S>& tokens_pet,
                       const MaskPartition& part_mri, const MaskPartition& part_pet) const {
        auto emb_mri = embed(P, tokens_mri, Modality::mri);
        auto emb_pet = embed(P, tokens_pet, Modality::pet);
        auto vis_mri = gather_rows(emb_mri, part_mri.visible);
        auto vis_pet = gather_rows(emb_pet, part_pet.visible);
        auto enc = encode(P, vis_mri, vis_pet);
        auto grid_mri = assemble_grid(P, enc.mri, part_mri, Modality::mri);
        auto grid_pet = assemble_grid(P, enc.pet, part_pet, Modality::pet);
        auto fused = fuse(P, grid_mri, grid_pet);
        MaeOut out;
        out.enc_mri = enc.mri;
        out.enc_pet = enc.pet;
        out.fused_mri = fused.mri;
        out.fused_pet = fused.pet;
        out.recon_mri = decode(P, fused.mri, Modality::mri);
        out.recon_pet = decode(P, fused.pet, Modality::pet);
        return out;
    }

    // Encoder-only pass used for the target branch of intra-modal contrast.
    EncodedPair forward_encode_only(Params<S>& P, const std::vector<S>& tokens_mri, const std::vector<S>& tokens_pet,
                                    const MaskPartition& part_mri, const MaskPartition& part_pet) const {
        auto vis_mri = gather_rows(embed(P, tokens_mri, Modality::mri), part_mri.visible);
        auto vis_pet = gather_rows(embed(P, tokens_pet, Modality::pet), part_pet.visible);
        return encode(P, vis_mri, vis_pet);
    }

    // Classification pass: both modalities unmasked, class token prepended.
    TensorT<S> classify(Params<S>& P, const std::vector<S>& tokens_mri, const std::vector<S>& tokens_pet) const {
        auto emb_mri = embed(P, tokens_mri, Modality::mri);
        auto emb_pet = embed(P, tokens_pet, Modality::pet);
        auto cls = repeat_row(P[cls_token], 1);
        auto seq = encode_seq(P, concat<S>({cls, emb_mri, emb_pet}, 0));
        return head.fwd(P, seq);
    }
};

// Mean over the token axis: [L, D] -> [D].
template <class S>
TensorT<S> pool_tokens(const TensorT<S>& tokens) {
    return mean_axis(tokens, 0);
}

}  // namespace cmvim
