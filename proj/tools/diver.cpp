// Command-line operator surface: preprocessing, synthetic corpora,
// pretraining, fine-tuning, invariant verification, checkpoint inspection.

#include <algorithm>
#include <filesystem>
#include <fstream>
#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "diver/checkpoint.hpp"
#include "diver/config.hpp"
#include "diver/preprocess.hpp"
#include "diver/synth.hpp"
#include "diver/train.hpp"
#include "diver/verify.hpp"

namespace fs = std::filesystem;
using namespace diver;

namespace {

constexpr const char* kToolVersion = "1.0";

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    uint64_t seed = 1;
    std::string out_dir = ".";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_path, "key=value configuration file");
    cmd->add_option("--set", a.sets, "override, repeatable: --set key=value");
    cmd->add_option("--seed", a.seed, "RNG seed");
    cmd->add_option("--out", a.out_dir, "output directory");
}

ConfigMap resolve_config(const CommonArgs& a) {
    ConfigMap cfg;
    if (!a.config_path.empty()) cfg = read_config_file(a.config_path);
    apply_overrides(cfg, a.sets);
    cfg["seed"] = std::to_string(a.seed);
    cfg["format.drf"] = "1";
    cfg["format.dcp"] = "1";
    cfg["tool.version"] = kToolVersion;
    return cfg;
}

void ensure_out(const CommonArgs& a) { fs::create_directories(a.out_dir); }

std::string out_path(const CommonArgs& a, const std::string& name) {
    return (fs::path(a.out_dir) / name).string();
}

TrainConfig train_config_from(const ConfigMap& cfg, TrainConfig base) {
    static const std::set<std::string> known = {
        "train.lr",         "train.weight_decay", "train.min_lr",
        "train.clip",       "train.cosine",       "train.steps",
        "train.epochs",     "train.batch_size",   "train.mask_ratio",
        "train.label_smoothing", "train.permute", "train.seeds",
    };
    for (const auto& [k, v] : cfg)
        if (k.rfind("train.", 0) == 0 && !known.count(k))
            throw ConfigError("config: unknown key '" + k + "'");
    TrainConfig t = base;
    t.lr = get_double(cfg, "train.lr", t.lr);
    t.weight_decay = get_double(cfg, "train.weight_decay", t.weight_decay);
    t.min_lr = get_double(cfg, "train.min_lr", t.min_lr);
    t.clip = get_double(cfg, "train.clip", t.clip);
    t.cosine = get_bool(cfg, "train.cosine", t.cosine);
    t.steps = get_int(cfg, "train.steps", t.steps);
    t.epochs = get_int(cfg, "train.epochs", t.epochs);
    t.batch_size = get_int(cfg, "train.batch_size", t.batch_size);
    t.mask_ratio = get_double(cfg, "train.mask_ratio", t.mask_ratio);
    t.label_smoothing = get_double(cfg, "train.label_smoothing", t.label_smoothing);
    t.permute_channels = get_bool(cfg, "train.permute", t.permute_channels);
    return t;
}

std::vector<uint64_t> seeds_from(const ConfigMap& cfg) {
    auto it = cfg.find("train.seeds");
    if (it == cfg.end()) return default_seeds();
    std::vector<uint64_t> seeds;
    std::stringstream ss(it->second);
    std::string part;
    while (std::getline(ss, part, ','))
        if (!part.empty()) seeds.push_back(std::stoull(part));
    if (seeds.empty()) throw ConfigError("config: train.seeds is empty");
    return seeds;
}

void write_manifest_with_model(const CommonArgs& a, ConfigMap cfg,
                               const ModelConfig& mc) {
    model_config_to(mc, cfg);
    write_manifest(out_path(a, "manifest.txt"), cfg);
}

Recording grid_to_recording(const PatchGrid& g) {
    Recording rec;
    rec.sample_rate = kTargetRateHz;
    rec.channel_labels = g.channel_labels;
    rec.samples.resize(g.channels);
    for (int c = 0; c < g.channels; ++c) {
        rec.samples[c].reserve(static_cast<size_t>(g.patches_per_channel) *
                               g.patch_len);
        for (int n = 0; n < g.patches_per_channel; ++n)
            for (int p = 0; p < g.patch_len; ++p)
                rec.samples[c].push_back(g.at(c, n, p));
    }
    return rec;
}

std::vector<std::string> sorted_drf_files(const std::string& dir) {
    std::vector<std::string> files;
    if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".drf") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("no .drf recordings in " + dir);
    return files;
}

PreprocessConfig preprocess_config_from(const ConfigMap& cfg) {
    PreprocessConfig p;
    p.band_low_hz = get_double(cfg, "preprocess.band_low_hz", p.band_low_hz);
    p.band_high_hz = get_double(cfg, "preprocess.band_high_hz", p.band_high_hz);
    p.notch_hz = get_double(cfg, "preprocess.notch_hz", p.notch_hz);
    p.select_standard_montage =
        get_bool(cfg, "preprocess.select_montage", p.select_standard_montage);
    return p;
}

int run_preprocess(const CommonArgs& a, const std::string& in_file) {
    ConfigMap cfg = resolve_config(a);
    PreprocessConfig pc = preprocess_config_from(cfg);
    Recording rec = read_recording(in_file);
    std::vector<PatchGrid> grids = preprocess_recording(rec, pc);
    ensure_out(a);
    for (size_t i = 0; i < grids.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "window_%03zu.drf", i);
        write_drf(out_path(a, name), grid_to_recording(grids[i]));
    }
    cfg["input"] = fs::path(in_file).filename().string();
    cfg["windows"] = std::to_string(grids.size());
    write_manifest(out_path(a, "manifest.txt"), cfg);
    std::cout << "wrote " << grids.size() << " windows to " << a.out_dir << "\n";
    return 0;
}

int run_synth(const CommonArgs& a) {
    ConfigMap cfg = resolve_config(a);
    SynthConfig sc;
    sc.channels = get_int(cfg, "synth.channels", sc.channels);
    sc.duration_s = get_double(cfg, "synth.duration_s", sc.duration_s);
    sc.sample_rate_hz = get_double(cfg, "synth.rate_hz", sc.sample_rate_hz);
    sc.num_classes = get_int(cfg, "synth.classes", sc.num_classes);
    int count = get_int(cfg, "synth.recordings", 3);  // per class when labeled
    double test_frac = get_double(cfg, "synth.test_frac", 0.25);

    ensure_out(a);
    Rng rng(a.seed);
    std::ofstream index;
    if (sc.num_classes > 0) index.open(out_path(a, "index.tsv"));
    int written = 0;
    int classes = std::max(1, sc.num_classes);
    for (int k = 0; k < classes; ++k) {
        int test_from = count - std::max(1, static_cast<int>(count * test_frac));
        for (int i = 0; i < count; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "rec_%03d.drf", written);
            Recording rec =
                synth_recording(sc, rng, sc.num_classes > 0 ? k : -1);
            write_drf(out_path(a, name), rec);
            if (sc.num_classes > 0)
                index << name << "\t" << k << "\t"
                      << (i >= test_from ? "test" : "train") << "\n";
            ++written;
        }
    }
    write_manifest(out_path(a, "manifest.txt"), cfg);
    std::cout << "wrote " << written << " recordings to " << a.out_dir << "\n";
    return 0;
}

int run_pretrain(const CommonArgs& a, const std::string& data_dir) {
    ConfigMap cfg = resolve_config(a);
    ModelConfig mc = model_config_from(cfg);
    TrainConfig tc = train_config_from(cfg, TrainConfig::pretrain_defaults());
    PreprocessConfig pc = preprocess_config_from(cfg);

    std::vector<PatchGrid> corpus;
    for (const auto& f : sorted_drf_files(data_dir)) {
        auto grids = preprocess_recording(read_recording(f), pc);
        corpus.insert(corpus.end(), grids.begin(), grids.end());
    }
    if (corpus.empty()) throw ConfigError("preprocessing produced no windows");

    DiverModel model(mc);
    Rng rng(a.seed);
    model.init(rng);
    ensure_out(a);
    std::ofstream log(out_path(a, "loss_log.tsv"));
    log << "step\tloss\tlr\n";
    std::vector<double> losses = pretrain(model, corpus, tc, rng, &log);

    ConfigMap manifest = cfg;
    model_config_to(mc, manifest);
    save_checkpoint(out_path(a, "checkpoint.dcp"), config_to_text(manifest),
                    model.named_params());
    write_manifest(out_path(a, "manifest.txt"), manifest);
    std::cout << "pretrain: " << losses.size() << " steps, first "
              << losses.front() << ", last " << losses.back() << "\n";
    return 0;
}

LabeledGrids load_labeled_dir(const std::string& dir, const PreprocessConfig& pc) {
    std::ifstream index(fs::path(dir) / "index.tsv");
    if (!index) throw ConfigError("missing index.tsv in " + dir);
    LabeledGrids data;
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string file, split;
        int label;
        if (!(ss >> file >> label >> split))
            throw ConfigError("bad index line: " + line);
        auto grids = preprocess_recording(
            read_recording((fs::path(dir) / file).string()), pc);
        for (auto& g : grids) {
            data.grids.push_back(std::move(g));
            data.labels.push_back(label);
            int idx = static_cast<int>(data.grids.size()) - 1;
            if (split == "test") data.test_idx.push_back(idx);
            else if (split == "train") data.train_idx.push_back(idx);
            else throw ConfigError("bad split tag: " + split);
            data.num_classes = std::max(data.num_classes, label + 1);
        }
    }
    return data;
}

int run_finetune(const CommonArgs& a, const std::string& data_dir,
                 const std::string& init_ckpt) {
    ConfigMap cfg = resolve_config(a);
    ModelConfig mc = model_config_from(cfg);
    TrainConfig tc = train_config_from(cfg, TrainConfig::finetune_defaults());
    std::vector<uint64_t> seeds = seeds_from(cfg);
    LabeledGrids data = load_labeled_dir(data_dir, preprocess_config_from(cfg));

    Checkpoint init;
    bool has_init = !init_ckpt.empty();
    if (has_init) init = load_checkpoint(init_ckpt);

    ensure_out(a);
    std::ofstream log(out_path(a, "train_log.tsv"));
    FinetuneResult res =
        finetune(mc, data, tc, seeds, has_init ? &init : nullptr, &log);

    std::ofstream report(out_path(a, "metrics_report.txt"));
    report << "seed\tbal_acc\tkappa\tweighted_f1\n";
    for (size_t i = 0; i < seeds.size(); ++i)
        report << seeds[i] << "\t" << res.per_seed[i].balanced_accuracy << "\t"
               << res.per_seed[i].kappa << "\t" << res.per_seed[i].weighted_f1
               << "\n";
    report << "mean\t" << res.balanced_accuracy.mean << "\t" << res.kappa.mean
           << "\t" << res.weighted_f1.mean << "\n";
    report << "std\t" << res.balanced_accuracy.stddev << "\t"
           << res.kappa.stddev << "\t" << res.weighted_f1.stddev << "\n";

    write_manifest_with_model(a, cfg, mc);
    std::cout << "finetune: bal_acc " << res.balanced_accuracy.mean << " +- "
              << res.balanced_accuracy.stddev << " over " << seeds.size()
              << " seeds\n";
    return 0;
}

int run_verify(const CommonArgs& a, const std::string& ckpt_path) {
    ConfigMap cfg = resolve_config(a);
    ModelConfig mc;
    if (!ckpt_path.empty()) {
        Checkpoint ck = load_checkpoint(ckpt_path);
        mc = model_config_from(parse_config_text(ck.config_text));
    } else {
        // verification default: a small but fully featured model
        mc = model_config_from(cfg, ModelConfig::tiny());
    }
    std::vector<CheckResult> results = run_invariant_suite(mc, a.seed);
    print_report(results, std::cout);
    ensure_out(a);
    std::ofstream report(out_path(a, "verify_report.txt"));
    print_report(results, report);
    write_manifest_with_model(a, cfg, mc);
    return all_as_expected(results) ? 0 : 1;
}

int run_inspect(const std::string& ckpt_path) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    std::cout << "config:\n" << ck.config_text << "\nentries:\n";
    for (const auto& [name, t] : ck.entries)
        std::cout << "  " << name << "  f64 " << shape_str(t.shape()) << "  "
                  << t.size() << " values\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef M_MMAP_THRESHOLD
    // keep large activation buffers in the heap; mmap/munmap churn otherwise
    // dominates training wall time
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    CLI::App app{"DIVER: channel-equivariant EEG modeling toolkit"};
    app.require_subcommand(1);

    CommonArgs pre_args, synth_args, pt_args, ft_args, ver_args;
    std::string pre_in, pt_data, ft_data, ft_init, ver_ckpt, inspect_path;

    auto* pre = app.add_subcommand("preprocess", "filter, resample and segment a recording");
    add_common(pre, pre_args);
    pre->add_option("--in", pre_in, "input recording (.drf or .csv)")->required();

    auto* syn = app.add_subcommand("synth", "generate a synthetic corpus");
    add_common(syn, synth_args);

    auto* pt = app.add_subcommand("pretrain", "masked patch reconstruction pretraining");
    add_common(pt, pt_args);
    pt->add_option("--data", pt_data, "directory of .drf recordings")->required();

    auto* ft = app.add_subcommand("finetune", "classification fine-tuning");
    add_common(ft, ft_args);
    ft->add_option("--data", ft_data, "directory with index.tsv + recordings")->required();
    ft->add_option("--init", ft_init, "pretraining checkpoint (.dcp)");

    auto* ver = app.add_subcommand("verify", "run the invariant suite");
    add_common(ver, ver_args);
    ver->add_option("--ckpt", ver_ckpt, "checkpoint to take the model config from");

    auto* ins = app.add_subcommand("inspect-ckpt", "describe a checkpoint");
    ins->add_option("--ckpt", inspect_path, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
        if (pre->parsed()) return run_preprocess(pre_args, pre_in);
        if (syn->parsed()) return run_synth(synth_args);
        if (pt->parsed()) return run_pretrain(pt_args, pt_data);
        if (ft->parsed()) return run_finetune(ft_args, ft_data, ft_init);
        if (ver->parsed()) return run_verify(ver_args, ver_ckpt);
        if (ins->parsed()) return run_inspect(inspect_path);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const RecordingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
