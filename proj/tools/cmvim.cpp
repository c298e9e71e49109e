// Command-line entry point: synthetic data generation, two-stage pretraining,
// fine-tuning, evaluation, and the built-in self-test suites.
//
// Exit codes: 0 success, 1 runtime failure (IO, non-finite loss), 2 usage or
// config error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "cmvim/data.hpp"
#include "cmvim/selftest.hpp"
#include "cmvim/trainer.hpp"

namespace fs = std::filesystem;
using namespace cmvim;

namespace {

constexpr const char* kBuildId = "cmvim-0.1.0";

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void write_manifest(const std::string& out_dir, const std::string& command, const std::string& config_text,
                    std::uint64_t seed, const std::vector<std::pair<std::string, std::string>>& outputs,
                    const std::string& started) {
    fs::create_directories(out_dir);
    std::ofstream f(fs::path(out_dir) / "run_manifest.txt", std::ios::trunc);
    f << "command = " << command << "\n";
    f << "build_id = " << kBuildId << "\n";
    f << "seed = " << seed << "\n";
    f << "started_utc = " << started << "\n";
    f << "finished_utc = " << utc_now() << "\n";
    for (const auto& [k, v] : outputs) f << "output." << k << " = " << v << "\n";
    std::istringstream cfg(config_text);
    std::string line;
    while (std::getline(cfg, line))
        if (!line.empty()) f << "config." << line << "\n";
}

void print_report(const EvalReport& r) {
    std::printf("accuracy\t%.6f\n", r.accuracy);
    std::printf("macro_auc\t%.6f\n", r.macro_auc);
    std::printf("macro_f1\t%.6f\n", r.macro_f1);
    for (std::size_t i = 0; i < r.confusion.size(); ++i) {
        std::printf("confusion\t%zu", i);
        for (auto v : r.confusion[i]) std::printf("\t%lld", static_cast<long long>(v));
        std::printf("\n");
    }
    std::printf("RESULT acc=%.6f auc=%.6f f1=%.6f\n", r.accuracy, r.macro_auc, r.macro_f1);
}

int cmd_gen(const std::string& spec_path, const std::string& out_dir, std::int64_t seed_override) {
    const auto started = utc_now();
    SyntheticSpec spec;
    if (!spec_path.empty()) spec = load_synthetic_spec(spec_path);
    if (seed_override >= 0) spec.seed = static_cast<std::uint64_t>(seed_override);
    const auto ds = generate(spec);
    const auto parts = split(spec.n_samples, {0.70, 0.10, 0.20}, spec.seed);
    write_dataset_split((fs::path(out_dir) / "train").string(), ds.samples, parts.train);
    write_dataset_split((fs::path(out_dir) / "val").string(), ds.samples, parts.val);
    write_dataset_split((fs::path(out_dir) / "test").string(), ds.samples, parts.test);
    write_manifest(out_dir, "gen", spec.to_text(), spec.seed,
                   {{"train", (fs::path(out_dir) / "train").string()},
                    {"val", (fs::path(out_dir) / "val").string()},
                    {"test", (fs::path(out_dir) / "test").string()}},
                   started);
    std::printf("generated %lld pairs (%lld/%lld/%lld) at extent %lld into %s\n",
                static_cast<long long>(spec.n_samples), static_cast<long long>(parts.train.size()),
                static_cast<long long>(parts.val.size()), static_cast<long long>(parts.test.size()),
                static_cast<long long>(spec.vol_extent), out_dir.c_str());
    return 0;
}

template <class S>
int pretrain_with(const TrainConfig& cfg, int stage_num, const std::string& data_dir, const std::string& resume,
                  const std::string& out_dir) {
    const auto started = utc_now();
    const Stage stage = stage_num == 1 ? Stage::pretrain1 : Stage::pretrain2;
    Trainer<S> trainer(cfg);
    if (!resume.empty()) {
        const TrainConfig ck_cfg = Trainer<S>::peek_config(resume);
        (void)ck_cfg;
        CheckpointFile probe = read_checkpoint(resume);
        const std::string tag = probe.get_text("meta/stage");
        if (stage == Stage::pretrain2 && tag == "pretrain1") {
            trainer.load_state(resume, Trainer<S>::LoadMode::next_stage);
        } else if (tag == stage_name(stage)) {
            trainer.load_state(resume, Trainer<S>::LoadMode::full_resume);
        } else {
            throw ConfigError("checkpoint stage '" + tag + "' cannot seed stage " + std::to_string(stage_num));
        }
    }
    std::printf("model parameters: %lld\n", static_cast<long long>(trainer.model.param_count()));
    auto pairs = read_dataset_split((fs::path(data_dir) / "train").string());
    auto ts = TrainSet<S>::from_pairs(pairs, cfg.model());
    fs::create_directories(out_dir);
    RunIo io;
    io.metrics_path = (fs::path(out_dir) / "metrics.tsv").string();
    io.checkpoint_path = (fs::path(out_dir) / ("stage" + std::to_string(stage_num) + ".ckpt")).string();
    io.verbose = true;
    const auto hist = trainer.run_pretrain(stage, ts, io);
    write_manifest(out_dir, "pretrain --stage " + std::to_string(stage_num), cfg.to_text(), cfg.seed,
                   {{"checkpoint", io.checkpoint_path}, {"metrics", io.metrics_path}}, started);
    std::printf("final epoch loss: %.6f\n", hist.epoch_parts.back().at("total"));
    return 0;
}

template <class S>
int finetune_with(const TrainConfig& cfg, const std::string& data_dir, const std::string& ckpt, bool scratch,
                  const std::string& out_dir) {
    const auto started = utc_now();
    Trainer<S> trainer(cfg);
    if (!scratch) trainer.load_state(ckpt, Trainer<S>::LoadMode::next_stage);
    auto train = TrainSet<S>::from_pairs(read_dataset_split((fs::path(data_dir) / "train").string()), cfg.model());
    auto val = TrainSet<S>::from_pairs(read_dataset_split((fs::path(data_dir) / "val").string()), cfg.model());
    auto test = TrainSet<S>::from_pairs(read_dataset_split((fs::path(data_dir) / "test").string()), cfg.model());
    fs::create_directories(out_dir);
    RunIo io;
    io.metrics_path = (fs::path(out_dir) / "metrics.tsv").string();
    io.checkpoint_path = (fs::path(out_dir) / "finetune.ckpt").string();
    io.verbose = true;
    const auto hist = trainer.run_finetune(train, val, test, io);
    write_manifest(out_dir, scratch ? "finetune --scratch" : "finetune", cfg.to_text(), cfg.seed,
                   {{"checkpoint", io.checkpoint_path}, {"metrics", io.metrics_path}}, started);
    std::printf("best epoch %lld (val_acc %.4f)\n", static_cast<long long>(hist.best_epoch), hist.best_val_acc);
    print_report(hist.test_report);
    return 0;
}

template <class S>
int eval_with(const TrainConfig& cfg, const std::string& data_dir, const std::string& ckpt) {
    Trainer<S> trainer(cfg);
    trainer.load_state(ckpt, Trainer<S>::LoadMode::weights_only);
    auto test = TrainSet<S>::from_pairs(read_dataset_split((fs::path(data_dir) / "test").string()), cfg.model());
    const auto scores = trainer.score_dataset(test);
    print_report(evaluate(scores, test.labels, cfg.num_classes));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contrastive masked Vim autoencoder for paired 3-d volumes"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen", "materialize a synthetic paired-volume dataset");
    std::string gen_spec, gen_out = "data";
    std::int64_t gen_seed = -1;
    gen->add_option("--spec", gen_spec, "generator spec file (key = value)");
    gen->add_option("--out", gen_out, "output dataset root");
    gen->add_option("--seed", gen_seed, "override spec seed");

    auto* pre = app.add_subcommand("pretrain", "run masked-autoencoder pretraining");
    int pre_stage = 1;
    std::string pre_cfg, pre_data, pre_resume, pre_out = "runs/pretrain";
    pre->add_option("--stage", pre_stage, "1 or 2")->check(CLI::Range(1, 2));
    pre->add_option("--config", pre_cfg, "training config file");
    pre->add_option("--data", pre_data, "dataset root")->required();
    pre->add_option("--resume", pre_resume, "checkpoint to resume or to seed stage 2");
    pre->add_option("--out", pre_out, "output directory");

    auto* fin = app.add_subcommand("finetune", "fine-tune the encoder for 3-class prediction");
    std::string fin_cfg, fin_data, fin_ckpt, fin_out = "runs/finetune";
    bool fin_scratch = false;
    fin->add_option("--config", fin_cfg, "training config file");
    fin->add_option("--data", fin_data, "dataset root")->required();
    fin->add_option("--ckpt", fin_ckpt, "pretrained checkpoint");
    fin->add_flag("--scratch", fin_scratch, "skip checkpoint loading (train from scratch)");
    fin->add_option("--out", fin_out, "output directory");

    auto* ev = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint on the test split");
    std::string ev_cfg, ev_data, ev_ckpt;
    ev->add_option("--config", ev_cfg, "training config file");
    ev->add_option("--data", ev_data, "dataset root")->required();
    ev->add_option("--ckpt", ev_ckpt, "fine-tuned checkpoint")->required();

    auto* st = app.add_subcommand("selftest", "run the built-in oracle suites");
    std::string st_fault;
    st->add_option("--inject-backward-fault", st_fault, "perturb one op's backward rule (negative control)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen(gen_spec, gen_out, gen_seed);

        if (*pre) {
            if (pre_stage == 2 && pre_resume.empty()) {
                std::fprintf(stderr, "error: stage-2 requires stage-1 checkpoint (--resume)\n");
                return 2;
            }
            TrainConfig cfg = pre_cfg.empty() ? TrainConfig{} : load_train_config(pre_cfg);
            return cfg.dtype == "float64" ? pretrain_with<double>(cfg, pre_stage, pre_data, pre_resume, pre_out)
                                          : pretrain_with<float>(cfg, pre_stage, pre_data, pre_resume, pre_out);
        }

        if (*fin) {
            if (!fin_scratch && fin_ckpt.empty()) {
                std::fprintf(stderr, "error: finetune needs --ckpt (or --scratch)\n");
                return 2;
            }
            if (!fin_scratch && !fs::exists(fin_ckpt)) {
                std::fprintf(stderr, "error: checkpoint not found: %s\n", fin_ckpt.c_str());
                return 2;
            }
            TrainConfig cfg = fin_cfg.empty() ? TrainConfig{} : load_train_config(fin_cfg);
            return cfg.dtype == "float64" ? finetune_with<double>(cfg, fin_data, fin_ckpt, fin_scratch, fin_out)
                                          : finetune_with<float>(cfg, fin_data, fin_ckpt, fin_scratch, fin_out);
        }

        if (*ev) {
            if (!fs::exists(ev_ckpt)) {
                std::fprintf(stderr, "error: checkpoint not found: %s\n", ev_ckpt.c_str());
                return 2;
            }
            TrainConfig cfg = ev_cfg.empty() ? TrainConfig{} : load_train_config(ev_cfg);
            return cfg.dtype == "float64" ? eval_with<double>(cfg, ev_data, ev_ckpt)
                                          : eval_with<float>(cfg, ev_data, ev_ckpt);
        }

        if (*st) return selftest::run_all(st_fault) ? 0 : 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
