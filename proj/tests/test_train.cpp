// Metrics, checkpointing, config parsing, synthetic data, and training loops.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "diver/checkpoint.hpp"
#include "diver/config.hpp"
#include "diver/metrics.hpp"
#include "diver/preprocess.hpp"
#include "diver/synth.hpp"
#include "diver/train.hpp"
#include "diver/verify.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace diver;

TEST_CASE("perfect predictions score 100 everywhere") {
    std::vector<int> y = {0, 1, 2, 0, 1, 2};
    MetricSet m = compute_metrics(y, y, 3);
    CHECK(m.balanced_accuracy == doctest::Approx(100.0).epsilon(1e-12));
    CHECK(m.kappa == doctest::Approx(100.0).epsilon(1e-12));
    CHECK(m.weighted_f1 == doctest::Approx(100.0).epsilon(1e-12));
}

TEST_CASE("balanced accuracy is the mean of per-class recalls") {
    // class 0: 2/2 recalled, class 1: 1/2 recalled -> (1.0 + 0.5)/2
    std::vector<int> labels = {0, 0, 1, 1};
    std::vector<int> preds = {0, 0, 1, 0};
    MetricSet m = compute_metrics(preds, labels, 2);
    CHECK(m.balanced_accuracy == doctest::Approx(75.0).epsilon(1e-12));
}

TEST_CASE("metrics on a fixed 3x3 confusion matrix match hand computation") {
    // confusion matrix [[5,1,0],[1,4,1],[0,2,6]], rows = truth
    std::vector<int> labels, preds;
    int cm[3][3] = {{5, 1, 0}, {1, 4, 1}, {0, 2, 6}};
    for (int t = 0; t < 3; ++t)
        for (int p = 0; p < 3; ++p)
            for (int k = 0; k < cm[t][p]; ++k) {
                labels.push_back(t);
                preds.push_back(p);
            }
    MetricSet m = compute_metrics(preds, labels, 3);

    // hand computation from the definitions:
    // supports 6,6,8 (total 20); predicted 6,7,7; correct 15
    // recalls: 5/6, 4/6, 6/8 -> bal acc = (0.8333... + 0.6666... + 0.75)/3
    double bal = (5.0 / 6 + 4.0 / 6 + 6.0 / 8) / 3 * 100.0;
    // p_o = 15/20; p_e = (6*6 + 6*7 + 8*7)/400 = 134/400
    double po = 15.0 / 20, pe = 134.0 / 400;
    double kappa = (po - pe) / (1 - pe) * 100.0;
    // precisions: 5/6, 4/7, 6/7; F1 per class: 2pr/(p+r)
    double f1_0 = 2 * (5.0 / 6) * (5.0 / 6) / (5.0 / 6 + 5.0 / 6);
    double f1_1 = 2 * (4.0 / 7) * (4.0 / 6) / (4.0 / 7 + 4.0 / 6);
    double f1_2 = 2 * (6.0 / 7) * (6.0 / 8) / (6.0 / 7 + 6.0 / 8);
    double f1 = (6 * f1_0 + 6 * f1_1 + 8 * f1_2) / 20 * 100.0;

    CHECK(m.balanced_accuracy == doctest::Approx(bal).epsilon(1e-10));
    CHECK(m.kappa == doctest::Approx(kappa).epsilon(1e-10));
    CHECK(m.weighted_f1 == doctest::Approx(f1).epsilon(1e-10));
}

TEST_CASE("metrics are invariant under consistent relabeling") {
    Rng rng(3);
    std::vector<int> labels, preds;
    for (int i = 0; i < 60; ++i) {
        labels.push_back(rng.uniform_int(0, 2));
        preds.push_back(rng.uniform_int(0, 2));
    }
    MetricSet a = compute_metrics(preds, labels, 3);
    std::vector<int> map = {2, 0, 1};
    std::vector<int> rl, rp;
    for (size_t i = 0; i < labels.size(); ++i) {
        rl.push_back(map[labels[i]]);
        rp.push_back(map[preds[i]]);
    }
    MetricSet b = compute_metrics(rp, rl, 3);
    CHECK(a.balanced_accuracy == doctest::Approx(b.balanced_accuracy).epsilon(1e-12));
    CHECK(a.kappa == doctest::Approx(b.kappa).epsilon(1e-12));
    CHECK(a.weighted_f1 == doctest::Approx(b.weighted_f1).epsilon(1e-12));
}

TEST_CASE("constant predictor on balanced data: 25% balanced acc, kappa 0") {
    std::vector<int> labels = {0, 1, 2, 3, 0, 1, 2, 3};
    std::vector<int> preds(8, 2);
    MetricSet m = compute_metrics(preds, labels, 4);
    CHECK(m.balanced_accuracy == doctest::Approx(25.0).epsilon(1e-12));
    CHECK(m.kappa == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("metrics reject degenerate input") {
    CHECK_THROWS_AS(compute_metrics({}, {}, 3), MetricsError);
    CHECK_THROWS_AS(compute_metrics({0}, {0}, 1), MetricsError);
    CHECK_THROWS_AS(compute_metrics({5}, {0}, 3), MetricsError);
}

TEST_CASE("checkpoint round trip is bit exact") {
    ModelConfig cfg = ModelConfig::tiny(3);
    DiverModel m(cfg);
    Rng rng(7);
    m.init(rng, true);
    std::string path = "roundtrip.dcp";
    save_checkpoint(path, "model.dim=20\n", m.named_params());

    Checkpoint ck = load_checkpoint(path);
    CHECK(ck.config_text == "model.dim=20\n");

    DiverModel m2(cfg);
    Rng rng2(999);
    m2.init(rng2, true);
    load_into(ck, m2.named_params());
    auto pa = m.named_params();
    auto pb = m2.named_params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(pa[i].tensor.data() == pb[i].tensor.data());
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint errors are detected") {
    CHECK_THROWS_AS(load_checkpoint("does_not_exist.dcp"), CheckpointError);
    std::ofstream("bad.dcp") << "not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint("bad.dcp"), CheckpointError);
    std::remove("bad.dcp");

    ModelConfig cfg = ModelConfig::tiny();
    DiverModel m(cfg);
    Rng rng(7);
    m.init(rng);
    save_checkpoint("partial.dcp", "", {m.named_params()[0]});
    Checkpoint ck = load_checkpoint("partial.dcp");
    CHECK_THROWS_AS(load_into(ck, m.named_params()), CheckpointError);
    std::remove("partial.dcp");
}

TEST_CASE("config parsing, overrides, and typed access") {
    ConfigMap cfg = parse_config_text(
        "# comment\n model.dim = 24 \ntrain.lr=0.001\nflag=true\n\n");
    CHECK(cfg.at("model.dim") == "24");
    CHECK(get_double(cfg, "train.lr", 0.0) == doctest::Approx(0.001));
    CHECK(get_bool(cfg, "flag", false) == true);
    CHECK(get_int(cfg, "missing", 5) == 5);
    apply_overrides(cfg, {"model.dim=32", "extra=1"});
    CHECK(cfg.at("model.dim") == "32");
    CHECK_THROWS_AS(parse_config_text("novalue\n"), ConfigError);
    CHECK_THROWS_AS(get_int(cfg, "flag", 0), ConfigError);

    ModelConfig mc = model_config_from(
        parse_config_text("model.dim=24\nmodel.heads=2\nmodel.stcpe_dim=8\n"
                          "model.stcpe_heads=2\nmodel.cnn_channels=2,3\n"));
    CHECK(mc.dim == 24);
    CHECK(mc.cnn_channels == std::vector<int>{2, 3});
    CHECK_THROWS_AS(model_config_from(parse_config_text("model.typo=1\n")),
                    ConfigError);

    // serialize -> reparse round trip
    ConfigMap out;
    model_config_to(mc, out);
    ModelConfig mc2 = model_config_from(out);
    CHECK(mc2.dim == mc.dim);
    CHECK(mc2.cnn_channels == mc.cnn_channels);
    CHECK(mc2.positional == mc.positional);
}

TEST_CASE("synthetic recordings are deterministic and bounded") {
    SynthConfig sc;
    sc.channels = 4;
    sc.duration_s = 5.0;
    Rng r1(42), r2(42);
    Recording a = synth_recording(sc, r1);
    Recording b = synth_recording(sc, r2);
    CHECK(a.samples == b.samples);
    for (const auto& ch : a.samples)
        for (double v : ch) CHECK(std::abs(v) <= 100.0);
}

TEST_CASE("synthetic 95 s recording yields 3 windows downstream") {
    SynthConfig sc;
    Rng rng(11);
    Recording rec = synth_recording(sc, rng);
    auto grids = preprocess_recording(rec);
    CHECK(grids.size() == 3);
    CHECK(grids[0].channels == 19);
    CHECK(grids[0].patches_per_channel == kWindowPatches);
}

TEST_CASE("class bands separate under a bandpower oracle") {
    // nearest-dominant-band classifier on the raw grid spectrum
    Rng rng(5);
    const auto& bands = synth_class_bands();
    int correct = 0, total = 0;
    for (int k = 0; k < 4; ++k)
        for (int rep = 0; rep < 10; ++rep) {
            PatchGrid g = synth_grid(2, 2, rng, k);
            // DFT over one full channel (2 patches = 400 samples at 200 Hz)
            std::vector<double> sig(g.data.begin(), g.data.begin() + 400);
            auto mag = testutil::naive_dft_magnitude(sig);
            double hz_per_bin = kTargetRateHz / sig.size();
            std::vector<double> power(bands.size(), 0.0);
            for (size_t bin = 1; bin < sig.size() / 2; ++bin) {
                double f = bin * hz_per_bin;
                for (size_t c = 0; c < bands.size(); ++c)
                    if (f >= bands[c].lo_hz && f <= bands[c].hi_hz)
                        power[c] += mag[bin] * mag[bin];
            }
            int guess = static_cast<int>(
                std::max_element(power.begin(), power.end()) - power.begin());
            correct += guess == k;
            ++total;
        }
    CHECK(static_cast<double>(correct) / total >= 0.95);
}

TEST_CASE("mask plans have the exact requested size") {
    Rng rng(9);
    auto mask = make_mask_plan(19, 30, 0.5, rng);
    int count = 0;
    for (auto v : mask) count += v;
    CHECK(count == 285);  // round(0.5 * 570)
    auto none = make_mask_plan(3, 4, 0.0, rng);
    for (auto v : none) CHECK(v == 0);
    auto all = make_mask_plan(3, 4, 1.0, rng);
    for (auto v : all) CHECK(v == 1);
    CHECK_THROWS_AS(make_mask_plan(3, 4, 1.5, rng), TrainError);
}

TEST_CASE("empty mask gives a constant zero loss") {
    DiverModel m(ModelConfig::tiny());
    Rng rng(13);
    m.init(rng);
    PatchGrid g;
    g.channels = 2;
    g.patches_per_channel = 3;
    g.patch_len = m.config().patch_len;
    g.data.resize(static_cast<size_t>(2) * 3 * g.patch_len);
    for (double& v : g.data) v = rng.normal(0.0, 10.0);
    std::vector<uint8_t> mask(6, 0);
    ForwardCtx ctx;
    Tensor loss = masked_recon_loss(m, g, mask, ctx);
    CHECK(loss.item() == 0.0);
    CHECK_FALSE(loss.requires_grad());
}

TEST_CASE("reconstruction loss matches a full-matrix masked-MSE oracle") {
    ModelConfig cfg = ModelConfig::tiny();
    DiverModel m(cfg);
    Rng rng(17);
    m.init(rng, true);
    int C = 2, N = 3, P = cfg.patch_len, T = C * N;
    PatchGrid g;
    g.channels = C;
    g.patches_per_channel = N;
    g.patch_len = P;
    g.data.resize(static_cast<size_t>(T) * P);
    for (double& v : g.data) v = rng.normal(0.0, 10.0);
    std::vector<uint8_t> mask = {1, 0, 0, 1, 1, 0};
    ForwardCtx ctx;

    Tensor loss = masked_recon_loss(m, g, mask, ctx);

    // oracle: full prediction matrix, weighted by the mask
    Tensor tokens = m.forward_tokens(g, mask, ctx);
    Tensor pred_full = m.reconstruct(tokens);
    std::vector<double> target(static_cast<size_t>(T) * P, 0.0), weight(target.size(), 0.0);
    int masked_cells = 0;
    for (int r = 0; r < T; ++r) {
        if (!mask[r]) continue;
        ++masked_cells;
        const double* src = g.data.data() + static_cast<int64_t>(r) * P;
        double mean = 0.0;
        for (int p = 0; p < P; ++p) mean += src[p];
        mean /= P;
        double var = 0.0;
        for (int p = 0; p < P; ++p) var += (src[p] - mean) * (src[p] - mean);
        double sd = std::max(std::sqrt(var / P), 1e-8);
        for (int p = 0; p < P; ++p) {
            target[r * P + p] = (src[p] - mean) / sd;
            weight[r * P + p] = 1.0;
        }
    }
    Tensor w = Tensor::from_vector(std::move(weight), {T, P});
    Tensor t = Tensor::from_vector(std::move(target), {T, P});
    Tensor diff = sub(pred_full, t);
    Tensor oracle = scale(sum_all(mul(w, mul(diff, diff))),
                          1.0 / (static_cast<double>(masked_cells) * P));
    CHECK(std::abs(loss.item() - oracle.item()) < 1e-9);

    // gradient of the oracle loss w.r.t. the prediction matrix vanishes at
    // every unmasked cell
    BackwardCtx bctx = backward(oracle);
    const std::vector<double>* gp = bctx.find(pred_full.node());
    REQUIRE(gp != nullptr);
    for (int r = 0; r < T; ++r)
        if (!mask[r])
            for (int p = 0; p < P; ++p) CHECK((*gp)[r * P + p] == 0.0);
}

TEST_CASE("label-smoothed cross entropy matches the stated definition") {
    Tensor logits = Tensor::from_vector({1.0, -2.0, 0.5, 0.0}, {1, 4}, true);
    Tensor loss = smoothed_cross_entropy(logits, 2, 4, 0.1);
    // target = 0.9 * onehot(2) + 0.025 everywhere
    double Z = std::exp(1.0) + std::exp(-2.0) + std::exp(0.5) + std::exp(0.0);
    double expect = 0.0;
    std::vector<double> l = {1.0, -2.0, 0.5, 0.0};
    for (int k = 0; k < 4; ++k) {
        double t = 0.1 / 4 + (k == 2 ? 0.9 : 0.0);
        expect -= t * (l[k] - std::log(Z));
    }
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-12));
    CHECK_THROWS_AS(smoothed_cross_entropy(logits, 7, 4, 0.1), TrainError);
}

TEST_CASE("pretraining is deterministic for a fixed seed") {
    ModelConfig cfg = ModelConfig::tiny();
    Rng data_rng(23);
    std::vector<PatchGrid> corpus;
    for (int i = 0; i < 3; ++i) {
        PatchGrid g;
        g.channels = 2;
        g.patches_per_channel = 3;
        g.patch_len = cfg.patch_len;
        g.data.resize(2 * 3 * cfg.patch_len);
        for (double& v : g.data) v = data_rng.normal(0.0, 10.0);
        corpus.push_back(g);
    }
    TrainConfig tc = TrainConfig::pretrain_defaults();
    tc.steps = 4;
    tc.batch_size = 2;

    auto run = [&]() {
        DiverModel m(cfg);
        Rng rng(31);
        m.init(rng);
        return pretrain(m, corpus, tc, rng);
    };
    auto a = run();
    auto b = run();
    CHECK(a.size() == 4);
    CHECK(a == b);  // bit-identical losses
}

TEST_CASE("permutation protocol with an equivariant encoder") {
    ModelConfig cfg = ModelConfig::tiny(4);
    DiverModel m(cfg);
    Rng rng(37);
    m.init(rng, true);
    PatchGrid g;
    g.channels = 4;
    g.patches_per_channel = 5;
    g.patch_len = cfg.patch_len;
    g.data.resize(static_cast<size_t>(4) * 5 * cfg.patch_len);
    for (double& v : g.data) v = rng.normal(0.0, 10.0);

    ForwardCtx ctx;
    NoGradGuard ng;
    Tensor intact = classify_logits(m, g, ctx);

    std::vector<int> identity = {0, 1, 2, 3};
    Tensor same = permutation_protocol_logits(m, g, identity, ctx);
    CHECK(same.data() == intact.data());

    for (int trial = 0; trial < 5; ++trial) {
        std::vector<int> perm = rng.permutation(4);
        Tensor prot = permutation_protocol_logits(m, g, perm, ctx);
        CHECK(testutil::max_abs_diff(prot.data(), intact.data()) < 1e-6);
    }
    CHECK_THROWS_AS(permutation_protocol_logits(m, g, {0, 0, 1, 2}, ctx),
                    TrainError);
}

TEST_CASE("finetune rejects a training split missing a class") {
    Rng rng(41);
    LabeledGrids data = make_labeled_dataset(3, 4, 2, 2, rng);
    // strip class 2 from the training split
    std::vector<int> kept;
    for (int i : data.train_idx)
        if (data.labels[i] != 2) kept.push_back(i);
    data.train_idx = kept;
    TrainConfig tc = TrainConfig::finetune_defaults();
    tc.epochs = 1;
    CHECK_THROWS_AS(finetune(ModelConfig::tiny(), data, tc, {41}), TrainError);
}

TEST_CASE("invariant suite passes on a fresh tiny model") {
    auto results = run_invariant_suite(ModelConfig::tiny(), 3);
    for (const auto& r : results) {
        INFO(r.name, " value=", r.value);
        CHECK(r.as_expected());
        CHECK(r.expect_pass);
    }
    CHECK(all_as_expected(results));
}

TEST_CASE("invariant suite witnesses broken equivariance") {
    ModelConfig vcfg = ModelConfig::tiny();
    vcfg.block_kind = BlockKind::vanilla;
    auto vres = run_invariant_suite(vcfg, 3);
    bool saw_perm = false;
    for (const auto& r : vres)
        if (r.name == "perm-equivariance" || r.name == "protocol-invariance") {
            saw_perm = true;
            CHECK_FALSE(r.expect_pass);
            CHECK(r.as_expected());  // gap actually exceeds the threshold
        }
    CHECK(saw_perm);

    ModelConfig acfg = ModelConfig::tiny();
    acfg.positional = Positional::acpe;
    acfg.acpe_channels = 4;
    auto ares = run_invariant_suite(acfg, 3);
    for (const auto& r : ares) {
        if (r.name == "perm-equivariance") {
            CHECK_FALSE(r.expect_pass);
            CHECK(r.as_expected());
        }
        if (r.name == "translation-equivariance") {
            CHECK(r.expect_pass);
            CHECK(r.as_expected());
        }
    }
}
