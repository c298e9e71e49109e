#pragma once

// Optimization loop: AdamW with decoupled weight decay and cosine decay, the
// two-stage pretraining procedure, focal-loss fine-tuning with best-epoch
// selection on validation accuracy, and checkpointing that restores training
// bit-exactly. All stochastic draws are keyed by (seed, purpose, epoch,
// sample, view, modality), so resumption needs only counters, not rng state.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cmvim/checkpoint.hpp"
#include "cmvim/config.hpp"
#include "cmvim/data.hpp"
#include "cmvim/model.hpp"
#include "cmvim/objectives.hpp"

namespace cmvim {

// lr = base * 0.5 * (1 + cos(pi * step / total)); optional linear warmup.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, std::int64_t warmup_steps = 0) {
    check(total_steps >= 1 && step >= 0 && step <= total_steps, "cosine_lr: step outside [0, total]");
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
}

// One AdamW update on a flat parameter vector. Weight decay is decoupled:
// applied as p -= lr*wd*p after the moment-driven step.
template <class S>
void adamw_step_tensor(std::vector<S>& p, const std::vector<S>& g, std::vector<S>& m, std::vector<S>& v,
                       std::int64_t t, double lr, double wd, double beta1, double beta2, double eps,
                       const std::string& name) {
    check(t >= 1, "adamw: step counter must be >= 1");
    check(p.size() == m.size() && p.size() == v.size(), "adamw: moment shape mismatch for " + name);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    const bool has_grad = !g.empty();
    if (has_grad) check(g.size() == p.size(), "adamw: grad shape mismatch for " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = has_grad ? static_cast<double>(g[i]) : 0.0;
        if (!std::isfinite(gi)) throw std::runtime_error("adamw: non-finite gradient in parameter '" + name + "'");
        const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
        const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
        double pi = static_cast<double>(p[i]) - update;
        pi -= lr * wd * pi;
        p[i] = static_cast<S>(pi);
    }
}

template <class S>
struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.05;
    std::int64_t step_count = 0;
    std::vector<std::vector<S>> m, v;

    void init(const Params<S>& params) {
        step_count = 0;
        m.assign(params.size(), {});
        v.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i].assign(static_cast<std::size_t>(params.entry(i).t.numel()), S(0));
            v[i].assign(static_cast<std::size_t>(params.entry(i).t.numel()), S(0));
        }
    }

    void step(Params<S>& params, double lr) {
        check(m.size() == params.size(), "adamw: optimizer not initialized for this parameter set");
        ++step_count;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& e = params.entry(i);
            adamw_step_tensor(e.t.values(), e.t.grad_view(), m[i], v[i], step_count, lr, weight_decay, beta1, beta2,
                              eps, e.name);
        }
    }
};

// Scales all grads so their global norm is at most `ceiling`.
template <class S>
void clip_grad_norm(Params<S>& params, double ceiling) {
    if (ceiling <= 0) return;
    double sq = 0;
    for (std::size_t i = 0; i < params.size(); ++i)
        for (const auto g : params.entry(i).t.grad_view()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm <= ceiling) return;
    const S factor = static_cast<S>(ceiling / norm);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& e = params.entry(i);
        if (!e.t.has_grad()) continue;
        for (auto& g : e.t.grad()) g *= factor;
    }
}

// ---------------------------------------------------------------------------
// tokenized dataset

template <class S>
struct TrainSet {
    std::int64_t vol_extent = 0;
    std::vector<std::vector<S>> tokens_mri, tokens_pet;  // [tokens, voxels] flat, per sample
    std::vector<std::int64_t> labels;

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }

    static TrainSet from_pairs(const std::vector<VolumePair>& pairs, const ModelConfig& mc) {
        TrainSet ts;
        check(!pairs.empty(), "train set: no samples");
        ts.vol_extent = mc.vol_extent;
        for (const auto& p : pairs) {
            check(p.extent == mc.vol_extent, "train set: volume extent " + std::to_string(p.extent) +
                                                 " does not match config " + std::to_string(mc.vol_extent));
            std::vector<S> mri(p.mri.size()), pet(p.pet.size());
            for (std::size_t i = 0; i < p.mri.size(); ++i) mri[i] = static_cast<S>(p.mri[i]);
            for (std::size_t i = 0; i < p.pet.size(); ++i) pet[i] = static_cast<S>(p.pet[i]);
            ts.tokens_mri.push_back(patchify(mri, mc.vol_extent, mc.patch_extent));
            ts.tokens_pet.push_back(patchify(pet, mc.vol_extent, mc.patch_extent));
            ts.labels.push_back(p.label);
        }
        return ts;
    }
};

// Reconstruction target rows; optionally standardized per patch.
template <class S>
TensorT<S> recon_target(const std::vector<S>& tokens, std::int64_t n_tok, std::int64_t vox, bool per_patch_norm) {
    auto t = TensorT<S>::from({n_tok, vox}, tokens);
    if (!per_patch_norm) return t;
    for (std::int64_t i = 0; i < n_tok; ++i) {
        S* row = t.data() + i * vox;
        double mu = 0;
        for (std::int64_t j = 0; j < vox; ++j) mu += row[j];
        mu /= static_cast<double>(vox);
        double var = 0;
        for (std::int64_t j = 0; j < vox; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(vox);
        const double inv = 1.0 / std::sqrt(var + 1e-6);
        for (std::int64_t j = 0; j < vox; ++j) row[j] = static_cast<S>((row[j] - mu) * inv);
    }
    return t;
}

// ---------------------------------------------------------------------------
// batch loss graphs (shared between the training loops and the test oracles)

struct BatchMasks {
    std::vector<MaskPartition> v1_mri, v1_pet, v2_mri, v2_pet;  // one per sample
};

template <class S>
struct PretrainLossParts {
    TensorT<S> rec_mri, rec_pet, intra_mri, intra_pet, inter, total;
};

// Builds the staged pretraining loss for one batch: online MAE pass on view 1
// (reconstruction, intra projections, fused inter projections), detached EMA
// target pass on view 2, then the composite.
template <class S>
PretrainLossParts<S> build_pretrain_loss(Model<S>& model, const TrainSet<S>& ds,
                                         const std::vector<std::int64_t>& sample_idx, const BatchMasks& masks,
                                         const TrainConfig& cfg, bool with_inter) {
    const std::int64_t n_tok = model.cfg.tokens_per_volume();
    const std::int64_t vox = model.cfg.voxels_per_patch();
    const std::size_t bts = sample_idx.size();
    std::vector<TensorT<S>> rec_mri_terms, rec_pet_terms, s1_mri, s1_pet, s2_mri, s2_pet, z_mri, z_pet;
    for (std::size_t k = 0; k < bts; ++k) {
        const auto gi = static_cast<std::size_t>(sample_idx[k]);
        const auto& tok_m = ds.tokens_mri[gi];
        const auto& tok_p = ds.tokens_pet[gi];
        auto mae = model.forward_mae(model.params, tok_m, tok_p, masks.v1_mri[k], masks.v1_pet[k]);
        auto tgt_m = recon_target(tok_m, n_tok, vox, cfg.per_patch_norm);
        auto tgt_p = recon_target(tok_p, n_tok, vox, cfg.per_patch_norm);
        rec_mri_terms.push_back(cfg.recon_full_volume ? mse_full(mae.recon_mri, tgt_m)
                                                      : mse_recon(mae.recon_mri, tgt_m, masks.v1_mri[k].masked));
        rec_pet_terms.push_back(cfg.recon_full_volume ? mse_full(mae.recon_pet, tgt_p)
                                                      : mse_recon(mae.recon_pet, tgt_p, masks.v1_pet[k].masked));
        s1_mri.push_back(model.intra_proj[0].fwd(model.params, pool_tokens(mae.enc_mri)));
        s1_pet.push_back(model.intra_proj[1].fwd(model.params, pool_tokens(mae.enc_pet)));
        if (with_inter) {
            z_mri.push_back(model.inter_proj[0].fwd(model.params, pool_tokens(mae.fused_mri)));
            z_pet.push_back(model.inter_proj[1].fwd(model.params, pool_tokens(mae.fused_pet)));
        }
        {
            NoGradGuard<S> ng;
            auto enc2 = model.forward_encode_only(model.target, tok_m, tok_p, masks.v2_mri[k], masks.v2_pet[k]);
            s2_mri.push_back(model.intra_proj[0].fwd(model.target, pool_tokens(enc2.mri)));
            s2_pet.push_back(model.intra_proj[1].fwd(model.target, pool_tokens(enc2.pet)));
        }
    }
    auto batch_mean = [&](std::vector<TensorT<S>>& terms) {
        auto acc = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
        return scale(acc, 1.0 / static_cast<double>(bts));
    };
    PretrainLossParts<S> parts;
    parts.rec_mri = batch_mean(rec_mri_terms);
    parts.rec_pet = batch_mean(rec_pet_terms);
    parts.intra_mri = intra_nce(l2_normalize_rows(stack_rows(s1_mri)), l2_normalize_rows(stack_rows(s2_mri)),
                                cfg.temperature);
    parts.intra_pet = intra_nce(l2_normalize_rows(stack_rows(s1_pet)), l2_normalize_rows(stack_rows(s2_pet)),
                                cfg.temperature);
    if (with_inter) {
        parts.inter = inter_nce(l2_normalize_rows(stack_rows(z_mri)), l2_normalize_rows(stack_rows(z_pet)),
                                cfg.temperature);
        parts.total = stage2_loss(parts.rec_mri, parts.rec_pet, parts.intra_mri, parts.intra_pet, parts.inter,
                                  cfg.alpha, cfg.lambda_inter);
    } else {
        parts.total = stage1_loss(parts.rec_mri, parts.rec_pet, parts.intra_mri, parts.intra_pet, cfg.alpha);
    }
    return parts;
}

template <class S>
TensorT<S> build_finetune_loss(Model<S>& model, const TrainSet<S>& ds, const std::vector<std::int64_t>& sample_idx,
                               double focal_gamma) {
    std::vector<TensorT<S>> logit_rows;
    std::vector<std::int64_t> batch_labels;
    for (const auto gi : sample_idx) {
        logit_rows.push_back(model.classify(model.params, ds.tokens_mri[static_cast<std::size_t>(gi)],
                                            ds.tokens_pet[static_cast<std::size_t>(gi)]));
        batch_labels.push_back(ds.labels[static_cast<std::size_t>(gi)]);
    }
    return focal_loss(stack_rows(logit_rows), batch_labels, focal_gamma);
}

// ---------------------------------------------------------------------------
// run products

struct PretrainHistory {
    std::vector<double> step_loss;
    std::vector<std::map<std::string, double>> epoch_parts;
    std::int64_t opt_steps = 0;
    std::int64_t ema_updates = 0;
};

struct FinetuneHistory {
    std::vector<double> train_loss;
    std::vector<double> val_acc;
    std::vector<double> test_acc;  // filled when track_test is set
    std::int64_t best_epoch = -1;
    double best_val_acc = 0;
    EvalReport test_report;
};

struct RunIo {
    std::string metrics_path;     // append-only epoch<TAB>key<TAB>value; empty disables
    std::string checkpoint_path;  // written at run end; empty disables
    bool verbose = false;
    bool track_test = false;      // finetune: evaluate the test set every epoch
};

// ---------------------------------------------------------------------------
// trainer

template <class S>
class Trainer {
  public:
    TrainConfig cfg;
    Model<S> model;
    AdamW<S> opt;

    // Epoch-key bookkeeping: every run draws masks and batch order from
    // streams keyed by (seed, epoch_key_base + epoch_in_run), so a later
    // stage or a resumed run continues the data stream deterministically.
    std::uint64_t epoch_key_base = 0;
    std::int64_t run_epochs_done = 0;
    std::int64_t total_opt_steps = 0;
    std::int64_t total_ema_updates = 0;

    explicit Trainer(const TrainConfig& c) : cfg(c), model(c.model(), c.seed) {
        cfg.validate();
        opt.weight_decay = cfg.weight_decay;
        opt.init(model.params);
    }

    // ---- stochastic stream derivations -------------------------------------

    Rng order_rng(std::uint64_t epoch_key) const { return Rng(cfg.seed).fork(0x6f726465, epoch_key); }

    Rng mask_rng(std::uint64_t epoch_key, std::int64_t sample, int view, int modality) const {
        return Rng(cfg.seed).fork(0x6d61736b, epoch_key, static_cast<std::uint64_t>(sample),
                                  static_cast<std::uint64_t>(view * 2 + modality));
    }

    // ---- pretraining --------------------------------------------------------

    PretrainHistory run_pretrain(Stage stage, const TrainSet<S>& ds, const RunIo& io = {},
                                 std::int64_t stop_after_epoch = -1) {
        check(stage == Stage::pretrain1 || stage == Stage::pretrain2, "run_pretrain: bad stage");
        const std::int64_t n = ds.size();
        const std::int64_t bsz = std::min<std::int64_t>(cfg.batch_size, n);
        const std::int64_t steps_per_epoch = (n + bsz - 1) / bsz;
        const std::int64_t total_sched = cfg.epochs * steps_per_epoch;
        const std::int64_t n_tok = model.cfg.tokens_per_volume();
        const bool with_inter = stage == Stage::pretrain2;

        PretrainHistory hist;
        std::ofstream metrics;
        if (!io.metrics_path.empty()) metrics.open(io.metrics_path, std::ios::app);

        for (std::int64_t e = run_epochs_done; e < cfg.epochs; ++e) {
            const std::uint64_t epoch_key = epoch_key_base + static_cast<std::uint64_t>(e);
            std::vector<std::int64_t> order(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
            {
                Rng r = order_rng(epoch_key);
                r.shuffle(order);
            }
            std::map<std::string, double> part_sums;
            std::int64_t part_count = 0;
            double lr = cfg.base_lr;

            for (std::int64_t b0 = 0; b0 < n; b0 += bsz) {
                const std::int64_t bts = std::min(bsz, n - b0);
                Tape<S> tape;
                std::vector<std::int64_t> batch_idx(order.begin() + b0, order.begin() + b0 + bts);
                BatchMasks masks;
                for (const auto gi : batch_idx) {
                    Rng r0 = mask_rng(epoch_key, gi, 0, 0), r1 = mask_rng(epoch_key, gi, 0, 1);
                    Rng r2 = mask_rng(epoch_key, gi, 1, 0), r3 = mask_rng(epoch_key, gi, 1, 1);
                    masks.v1_mri.push_back(random_mask(n_tok, cfg.mask_ratio, r0));
                    masks.v1_pet.push_back(random_mask(n_tok, cfg.mask_ratio, r1));
                    masks.v2_mri.push_back(random_mask(n_tok, cfg.mask_ratio, r2));
                    masks.v2_pet.push_back(random_mask(n_tok, cfg.mask_ratio, r3));
                }
                auto parts = build_pretrain_loss(model, ds, batch_idx, masks, cfg, with_inter);
                const double loss_val = static_cast<double>(parts.total.item());
                if (!std::isfinite(loss_val))
                    throw std::runtime_error("pretrain: loss is not finite at step " +
                                             std::to_string(total_opt_steps));

                model.params.zero_grads();
                tape.backward(parts.total);
                clip_grad_norm(model.params, cfg.grad_clip);
                const std::int64_t sched_step = e * steps_per_epoch + b0 / bsz;
                lr = cosine_lr(sched_step, total_sched, cfg.base_lr, cfg.warmup_steps);
                opt.step(model.params, lr);
                ema_update(model.target, model.params, cfg.ema_momentum);
                ++total_opt_steps;
                ++total_ema_updates;
                ++hist.opt_steps;
                ++hist.ema_updates;

                hist.step_loss.push_back(loss_val);
                part_sums["rec_mri"] += static_cast<double>(parts.rec_mri.item());
                part_sums["rec_pet"] += static_cast<double>(parts.rec_pet.item());
                part_sums["intra_mri"] += static_cast<double>(parts.intra_mri.item());
                part_sums["intra_pet"] += static_cast<double>(parts.intra_pet.item());
                if (with_inter) part_sums["inter"] += static_cast<double>(parts.inter.item());
                part_sums["total"] += loss_val;
                ++part_count;
            }

            std::map<std::string, double> parts;
            for (auto& [k, v] : part_sums) parts[k] = v / static_cast<double>(part_count);
            parts["lr"] = lr;
            hist.epoch_parts.push_back(parts);
            if (metrics.is_open()) {
                for (const auto& [k, v] : parts) {
                    metrics << e << '\t' << k << '\t';
                    metrics.precision(17);
                    metrics << v << '\n';
                }
                metrics.flush();
            }
            if (io.verbose) {
                std::printf("epoch %lld  total %.6f\n", static_cast<long long>(e), parts["total"]);
                std::fflush(stdout);
            }
            run_epochs_done = e + 1;
            if (stop_after_epoch >= 0 && run_epochs_done > stop_after_epoch) break;
        }

        if (run_epochs_done >= cfg.epochs) {
            // Run complete: later runs continue the data stream past this one.
            epoch_key_base += static_cast<std::uint64_t>(cfg.epochs);
            run_epochs_done = 0;
        }
        if (!io.checkpoint_path.empty()) save_state(io.checkpoint_path, stage);
        return hist;
    }

    // ---- evaluation ----------------------------------------------------------

    // Softmax class scores for every sample; no tape, no masking.
    std::vector<std::vector<double>> score_dataset(const TrainSet<S>& ds) {
        NoGradGuard<S> ng;
        std::vector<std::vector<double>> scores;
        scores.reserve(static_cast<std::size_t>(ds.size()));
        for (std::int64_t i = 0; i < ds.size(); ++i) {
            auto logits = model.classify(model.params, ds.tokens_mri[static_cast<std::size_t>(i)],
                                         ds.tokens_pet[static_cast<std::size_t>(i)]);
            auto probs = softmax(logits);
            std::vector<double> row(static_cast<std::size_t>(probs.numel()));
            for (std::int64_t c = 0; c < probs.numel(); ++c) row[static_cast<std::size_t>(c)] =
                static_cast<double>(probs.data()[c]);
            scores.push_back(std::move(row));
        }
        return scores;
    }

    double dataset_accuracy(const TrainSet<S>& ds) {
        const auto scores = score_dataset(ds);
        std::vector<std::int64_t> preds(scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < scores[i].size(); ++c)
                if (scores[i][c] > scores[i][best]) best = c;
            preds[i] = static_cast<std::int64_t>(best);
        }
        return accuracy(preds, ds.labels);
    }

    // ---- fine-tuning ---------------------------------------------------------

    FinetuneHistory run_finetune(const TrainSet<S>& train, const TrainSet<S>& val, const TrainSet<S>& test,
                                 const RunIo& io = {}, bool fresh_head = true) {
        if (fresh_head) model.reinit_classifier(cfg.seed);
        opt.init(model.params);
        const std::int64_t n = train.size();
        const std::int64_t bsz = std::min<std::int64_t>(cfg.batch_size, n);
        const std::int64_t steps_per_epoch = (n + bsz - 1) / bsz;
        const std::int64_t total_sched = cfg.epochs * steps_per_epoch;

        FinetuneHistory hist;
        Params<S> best_params;
        std::ofstream metrics;
        if (!io.metrics_path.empty()) metrics.open(io.metrics_path, std::ios::app);

        for (std::int64_t e = 0; e < cfg.epochs; ++e) {
            const std::uint64_t epoch_key = epoch_key_base + static_cast<std::uint64_t>(e);
            std::vector<std::int64_t> order(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
            {
                Rng r = order_rng(epoch_key);
                r.shuffle(order);
            }
            double loss_sum = 0;
            std::int64_t steps = 0;
            for (std::int64_t b0 = 0; b0 < n; b0 += bsz) {
                const std::int64_t bts = std::min(bsz, n - b0);
                Tape<S> tape;
                std::vector<std::int64_t> batch_idx(order.begin() + b0, order.begin() + b0 + bts);
                auto loss = build_finetune_loss(model, train, batch_idx, cfg.focal_gamma);
                const double loss_val = static_cast<double>(loss.item());
                if (!std::isfinite(loss_val))
                    throw std::runtime_error("finetune: loss is not finite at step " + std::to_string(steps));
                model.params.zero_grads();
                tape.backward(loss);
                clip_grad_norm(model.params, cfg.grad_clip);
                const std::int64_t sched_step = e * steps_per_epoch + b0 / bsz;
                opt.step(model.params, cosine_lr(sched_step, total_sched, cfg.base_lr, cfg.warmup_steps));
                ++total_opt_steps;
                loss_sum += loss_val;
                ++steps;
            }
            hist.train_loss.push_back(loss_sum / static_cast<double>(steps));
            const double va = dataset_accuracy(val);
            hist.val_acc.push_back(va);
            if (io.track_test) hist.test_acc.push_back(dataset_accuracy(test));
            if (hist.best_epoch < 0 || va > hist.best_val_acc) {
                hist.best_val_acc = va;
                hist.best_epoch = e;
                best_params = model.params.clone();
            }
            if (metrics.is_open()) {
                metrics.precision(17);
                metrics << e << "\tfocal\t" << hist.train_loss.back() << '\n';
                metrics << e << "\tval_acc\t" << va << '\n';
                if (io.track_test) metrics << e << "\ttest_acc\t" << hist.test_acc.back() << '\n';
                metrics.flush();
            }
            if (io.verbose) {
                std::printf("epoch %lld  focal %.6f  val_acc %.4f\n", static_cast<long long>(e),
                            hist.train_loss.back(), va);
                std::fflush(stdout);
            }
        }
        epoch_key_base += static_cast<std::uint64_t>(cfg.epochs);

        // Report test metrics at the best validation epoch.
        model.params = best_params;
        const auto scores = score_dataset(test);
        hist.test_report = evaluate(scores, test.labels, model.cfg.num_classes);
        if (!io.checkpoint_path.empty()) save_state(io.checkpoint_path, Stage::finetune);
        return hist;
    }

    // ---- checkpointing -------------------------------------------------------

    void save_state(const std::string& path, Stage stage) const {
        CheckpointFile ck;
        ck.add_text("meta/config", cfg.to_text());
        ck.add_text("meta/stage", stage_name(stage));
        ck.add_u64("meta/counters",
                   {epoch_key_base, static_cast<std::uint64_t>(run_epochs_done),
                    static_cast<std::uint64_t>(total_opt_steps), static_cast<std::uint64_t>(total_ema_updates),
                    static_cast<std::uint64_t>(opt.step_count)});
        add_params(ck, "param/", model.params, /*target_only=*/false);
        add_params(ck, "ema/", model.target, /*target_only=*/true);
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            add_vec(ck, "opt.m/" + model.params.entry(i).name, opt.m[i]);
            add_vec(ck, "opt.v/" + model.params.entry(i).name, opt.v[i]);
        }
        write_checkpoint(path, ck);
    }

    enum class LoadMode { full_resume, next_stage, weights_only };

    Stage load_state(const std::string& path, LoadMode mode) {
        const CheckpointFile ck = read_checkpoint(path);
        const std::string stage_tag = ck.get_text("meta/stage");
        Stage stage = stage_tag == "pretrain1" ? Stage::pretrain1
                                               : (stage_tag == "pretrain2" ? Stage::pretrain2 : Stage::finetune);
        load_params(ck, "param/", model.params, /*target_only=*/false);
        // Shadow defaults to the online values; stored target-path entries override.
        model.target = model.params.clone();
        load_params(ck, "ema/", model.target, /*target_only=*/true);
        const auto counters = ck.get_u64("meta/counters");
        check(counters.size() == 5, "checkpoint: bad counters record");
        if (mode == LoadMode::full_resume) {
            epoch_key_base = counters[0];
            run_epochs_done = static_cast<std::int64_t>(counters[1]);
            total_opt_steps = static_cast<std::int64_t>(counters[2]);
            total_ema_updates = static_cast<std::int64_t>(counters[3]);
            opt.init(model.params);
            opt.step_count = static_cast<std::int64_t>(counters[4]);
            for (std::size_t i = 0; i < model.params.size(); ++i) {
                load_vec(ck, "opt.m/" + model.params.entry(i).name, opt.m[i]);
                load_vec(ck, "opt.v/" + model.params.entry(i).name, opt.v[i]);
            }
        } else if (mode == LoadMode::next_stage) {
            // Continue the data stream; fresh optimizer for the new lr regime.
            epoch_key_base = counters[0] + counters[1];
            run_epochs_done = 0;
            total_opt_steps = static_cast<std::int64_t>(counters[2]);
            total_ema_updates = static_cast<std::int64_t>(counters[3]);
            opt.init(model.params);
        } else {
            opt.init(model.params);
        }
        return stage;
    }

    static TrainConfig peek_config(const std::string& path) {
        const CheckpointFile ck = read_checkpoint(path);
        return train_config_from_kv(parse_kv_text(ck.get_text("meta/config")));
    }

  private:
    static void add_vec(CheckpointFile& ck, const std::string& name, const std::vector<S>& v) {
        const std::vector<std::int64_t> shape = {static_cast<std::int64_t>(v.size())};
        if constexpr (sizeof(S) == 4)
            ck.add_f32(name, shape, reinterpret_cast<const float*>(v.data()));
        else
            ck.add_f64(name, shape, reinterpret_cast<const double*>(v.data()));
    }

    static void load_vec(const CheckpointFile& ck, const std::string& name, std::vector<S>& v) {
        if constexpr (sizeof(S) == 4) {
            const auto data = ck.get_f32(name);
            check(data.size() == v.size(), "checkpoint: size mismatch for " + name);
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S>(data[i]);
        } else {
            const auto data = ck.get_f64(name);
            check(data.size() == v.size(), "checkpoint: size mismatch for " + name);
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S>(data[i]);
        }
    }

    static void add_params(CheckpointFile& ck, const std::string& prefix, const Params<S>& p, bool target_only) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            const auto& e = p.entry(i);
            if (target_only && !e.in_target_path) continue;
            if constexpr (sizeof(S) == 4)
                ck.add_f32(prefix + e.name, e.t.shape(), reinterpret_cast<const float*>(e.t.data()));
            else
                ck.add_f64(prefix + e.name, e.t.shape(), reinterpret_cast<const double*>(e.t.data()));
        }
    }

    static void load_params(const CheckpointFile& ck, const std::string& prefix, Params<S>& p, bool target_only) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto& e = p.entry(i);
            if (target_only && !e.in_target_path) continue;
            const auto& r = ck.require(prefix + e.name);
            check(r.shape == e.t.shape(), "checkpoint: shape mismatch for " + prefix + e.name + ": file has " +
                                              shape_str(r.shape) + ", model expects " + shape_str(e.t.shape()));
            const RecordType want = sizeof(S) == 4 ? RecordType::f32 : RecordType::f64;
            if (r.type != want)
                throw IoError("checkpoint dtype is " + std::string(record_type_name(r.type)) + " but the run uses " +
                              dtype_name<S>());
            std::memcpy(e.t.data(), r.bytes.data(), r.bytes.size());
        }
    }
};

}  // namespace cmvim
