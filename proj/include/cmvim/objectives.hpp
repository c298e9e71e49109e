#pragma once

// Loss functions and the EMA target mechanism: masked reconstruction MSE,
// symmetric two-view InfoNCE (intra-modal against the EMA encoder, inter-modal
// across paired modalities), focal loss, and the staged composites.

#include <cstdint>
#include <vector>

#include "cmvim/nn.hpp"
#include "cmvim/tensor.hpp"

namespace cmvim {

// Mean squared error restricted to masked token rows.
// recon/target: [tokens, voxels]; masked_idx selects the rows that count.
template <class S>
TensorT<S> mse_recon(const TensorT<S>& recon, const TensorT<S>& target, const std::vector<std::int64_t>& masked_idx) {
    check(!masked_idx.empty(), "mse_recon: empty mask");
    check(recon.shape() == target.shape(), "mse_recon: shape mismatch " + shape_str(recon.shape()) + " vs " +
                                               shape_str(target.shape()));
    auto diff = sub(gather_rows(recon, masked_idx), gather_rows(target, masked_idx));
    return mean(mul(diff, diff));
}

// MSE over the full token grid (optional variant).
template <class S>
TensorT<S> mse_full(const TensorT<S>& recon, const TensorT<S>& target) {
    auto diff = sub(recon, target);
    return mean(mul(diff, diff));
}

// In-place EMA: shadow <- momentum*shadow + (1-momentum)*online. No tape.
template <class S>
void ema_update(TensorT<S>& shadow, const TensorT<S>& online, double momentum) {
    check(shadow.shape() == online.shape(), "ema_update: shape mismatch " + shape_str(shadow.shape()) + " vs " +
                                                shape_str(online.shape()));
    const S m = static_cast<S>(momentum);
    const S km = static_cast<S>(1.0 - momentum);
    for (std::int64_t i = 0; i < shadow.numel(); ++i)
        shadow.data()[i] = m * shadow.data()[i] + km * online.data()[i];
}

// Updates every target-path entry of `shadow` toward its online counterpart.
template <class S>
void ema_update(Params<S>& shadow, const Params<S>& online, double momentum) {
    check(shadow.size() == online.size(), "ema_update: parameter sets differ in size");
    for (std::size_t i = 0; i < shadow.size(); ++i) {
        if (!shadow.entry(i).in_target_path) continue;
        ema_update(shadow.entry(i).t, online.entry(i).t, momentum);
    }
}

namespace detail {

// -(1/B) sum_i log softmax_i(sim)[i,i], the one-direction InfoNCE term.
template <class S>
TensorT<S> nce_direction(const TensorT<S>& sim) {
    const std::int64_t n = sim.dim(0);
    auto eye = TensorT<S>::zeros({n, n});
    for (std::int64_t i = 0; i < n; ++i) eye.data()[i * n + i] = S(1);
    auto log_probs = log(softmax(sim, 1));
    return scale(sum(mul(log_probs, eye)), -1.0 / static_cast<double>(n));
}

}  // namespace detail

// Symmetric InfoNCE over paired rows with in-batch negatives. Rows are
// expected L2-normalized; `temperature` divides the similarity logits.
// Exactly zero at B = 1.
template <class S>
TensorT<S> info_nce(const TensorT<S>& lhs, const TensorT<S>& rhs, double temperature = 1.0) {
    check(lhs.rank() == 2 && rhs.rank() == 2, "info_nce: expects 2-d inputs");
    check(lhs.dim(0) >= 1, "info_nce: empty batch");
    check(lhs.shape() == rhs.shape(), "info_nce: shape mismatch " + shape_str(lhs.shape()) + " vs " +
                                          shape_str(rhs.shape()));
    const double inv_t = 1.0 / temperature;
    auto sim12 = scale(matmul(lhs, transpose(rhs)), inv_t);
    auto sim21 = scale(matmul(rhs, transpose(lhs)), inv_t);
    return scale(add(detail::nce_direction(sim12), detail::nce_direction(sim21)), 0.5);
}

// Intra-modal loss: online view versus detached EMA-target view.
template <class S>
TensorT<S> intra_nce(const TensorT<S>& online_rows, const TensorT<S>& target_rows, double temperature = 1.0) {
    check(!target_rows.needs_grad(), "intra_nce: target rows must be detached");
    return info_nce(online_rows, target_rows, temperature);
}

// Inter-modal loss: both branches receive gradient.
template <class S>
TensorT<S> inter_nce(const TensorT<S>& z_mri, const TensorT<S>& z_pet, double temperature = 1.0) {
    return info_nce(z_mri, z_pet, temperature);
}

// Mean over the batch of -(1 - p_true)^gamma * log p_true.
template <class S>
TensorT<S> focal_loss(const TensorT<S>& logits, const std::vector<std::int64_t>& labels, double gamma) {
    check(logits.rank() == 2, "focal_loss: logits must be [B, classes]");
    const std::int64_t bsz = logits.dim(0), n_classes = logits.dim(1);
    check(static_cast<std::int64_t>(labels.size()) == bsz, "focal_loss: label count mismatch");
    auto onehot = TensorT<S>::zeros({bsz, n_classes});
    for (std::int64_t i = 0; i < bsz; ++i) {
        const std::int64_t y = labels[static_cast<std::size_t>(i)];
        check(y >= 0 && y < n_classes, "focal_loss: label " + std::to_string(y) + " outside [0," +
                                           std::to_string(n_classes) + ")");
        onehot.data()[i * n_classes + y] = S(1);
    }
    auto probs = softmax(logits, 1);
    auto p_true = sum_axis(mul(probs, onehot), 1);                       // [B]
    auto log_p_true = sum_axis(mul(log(probs), onehot), 1);              // [B]
    auto weight = pow_scalar(add_scalar(neg(p_true), 1.0), gamma);       // (1-p)^gamma
    return neg(mean(mul(weight, log_p_true)));
}

// Stage-1 composite: L_rec_mri + L_rec_pet + alpha*(L_intra_mri + L_intra_pet).
template <class S>
TensorT<S> stage1_loss(const TensorT<S>& rec_mri, const TensorT<S>& rec_pet, const TensorT<S>& intra_mri,
                       const TensorT<S>& intra_pet, double alpha) {
    return add(add(rec_mri, rec_pet), scale(add(intra_mri, intra_pet), alpha));
}

// Stage-2 composite: stage-1 terms plus lambda_inter * L_inter.
template <class S>
TensorT<S> stage2_loss(const TensorT<S>& rec_mri, const TensorT<S>& rec_pet, const TensorT<S>& intra_mri,
                       const TensorT<S>& intra_pet, const TensorT<S>& inter, double alpha, double lambda_inter) {
    return add(stage1_loss(rec_mri, rec_pet, intra_mri, intra_pet, alpha), scale(inter, lambda_inter));
}

}  // namespace cmvim
