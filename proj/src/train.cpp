#include "diver/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "diver/checkpoint.hpp"
#include "diver/optim.hpp"

namespace diver {

namespace {

PatchGrid permute_grid_channels(const PatchGrid& g, const std::vector<int>& perm) {
    PatchGrid out = g;
    for (int c = 0; c < g.channels; ++c)
        for (int n = 0; n < g.patches_per_channel; ++n)
            for (int p = 0; p < g.patch_len; ++p)
                out.at(c, n, p) = g.at(perm[c], n, p);
    return out;
}

void check_bijection(const std::vector<int>& perm, int C) {
    if (static_cast<int>(perm.size()) != C)
        throw TrainError("permutation length does not match channel count");
    std::vector<bool> seen(C, false);
    for (int p : perm) {
        if (p < 0 || p >= C || seen[p])
            throw TrainError("permutation is not a bijection");
        seen[p] = true;
    }
}

// Per-patch z-scored reconstruction target for the listed token rows.
Tensor zscored_target(const PatchGrid& g, const std::vector<int>& rows) {
    int P = g.patch_len;
    std::vector<double> t(rows.size() * static_cast<size_t>(P));
    for (size_t r = 0; r < rows.size(); ++r) {
        const double* src = g.data.data() + static_cast<int64_t>(rows[r]) * P;
        double mean = 0.0;
        for (int p = 0; p < P; ++p) mean += src[p];
        mean /= P;
        double var = 0.0;
        for (int p = 0; p < P; ++p) var += (src[p] - mean) * (src[p] - mean);
        double sd = std::sqrt(var / P);
        if (sd < 1e-8) sd = 1.0;  // flat patch: keep the target finite
        for (int p = 0; p < P; ++p) t[r * P + p] = (src[p] - mean) / sd;
    }
    return Tensor::from_vector(std::move(t),
                               {static_cast<int>(rows.size()), P});
}

// One backward pass accumulated into `accum` with the given weight.
void accumulate_grads(const Tensor& loss, const std::vector<NamedParam>& params,
                      double weight, std::vector<std::vector<double>>& accum) {
    BackwardCtx ctx = backward(loss);
    for (size_t i = 0; i < params.size(); ++i) {
        std::vector<double> g = grad_of(ctx, params[i].tensor);
        for (size_t j = 0; j < g.size(); ++j) accum[i][j] += weight * g[j];
    }
}

AdamWConfig optimizer_config(const TrainConfig& cfg, long total_steps) {
    AdamWConfig a;
    a.lr = cfg.lr;
    a.weight_decay = cfg.weight_decay;
    a.clip_norm = cfg.clip;
    a.cosine_steps = cfg.cosine ? total_steps : 0;
    a.min_lr = cfg.min_lr;
    return a;
}

int argmax_row(const std::vector<double>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Copies every checkpoint entry whose name and shape match a parameter;
// parameters absent from the checkpoint (e.g. a fresh class head) keep
// their initialization.
void load_matching(const Checkpoint& ckpt, const std::vector<NamedParam>& params) {
    for (const auto& p : params)
        for (const auto& [name, t] : ckpt.entries)
            if (name == p.name && t.shape() == p.tensor.shape())
                const_cast<Tensor&>(p.tensor).mutable_data() = t.data();
}

}  // namespace

TrainConfig TrainConfig::pretrain_defaults() {
    TrainConfig c;
    c.lr = 5e-4;
    c.weight_decay = 5e-4;
    c.steps = 300;
    c.batch_size = 16;
    return c;
}

TrainConfig TrainConfig::finetune_defaults() {
    TrainConfig c;
    c.lr = 1e-4;
    c.weight_decay = 5e-2;
    c.epochs = 50;
    c.batch_size = 64;
    c.label_smoothing = 0.1;
    c.clip = 1.0;
    c.min_lr = 1e-6;
    return c;
}

const std::vector<uint64_t>& default_seeds() {
    static const std::vector<uint64_t> s = {41, 42, 43, 44, 45};
    return s;
}

std::vector<uint8_t> make_mask_plan(int C, int N, double ratio, Rng& rng) {
    if (C < 1 || N < 1) throw TrainError("mask plan: empty grid");
    if (ratio < 0.0 || ratio > 1.0) throw TrainError("mask ratio outside [0, 1]");
    int total = C * N;
    int k = static_cast<int>(std::llround(ratio * total));
    std::vector<uint8_t> mask(total, 0);
    for (int i : rng.sample_without_replacement(total, k)) mask[i] = 1;
    return mask;
}

Tensor masked_recon_loss(DiverModel& model, const PatchGrid& grid,
                         const std::vector<uint8_t>& mask, ForwardCtx& ctx) {
    std::vector<int> masked;
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) masked.push_back(static_cast<int>(i));
    if (masked.empty()) return Tensor::scalar(0.0);
    Tensor tokens = model.forward_tokens(grid, mask, ctx);
    Tensor pred = model.reconstruct(gather_rows(tokens, masked));
    Tensor diff = sub(pred, zscored_target(grid, masked));
    return mean_all(mul(diff, diff));
}

std::vector<double> pretrain(DiverModel& model, const std::vector<PatchGrid>& corpus,
                             const TrainConfig& cfg, Rng& rng, std::ostream* log) {
    if (corpus.empty()) throw TrainError("pretrain: empty corpus");
    std::vector<NamedParam> params = model.named_params();
    AdamW opt(params, optimizer_config(cfg, cfg.steps));

    std::vector<int> perm;
    if (cfg.permute_channels) perm = rng.permutation(corpus[0].channels);

    std::vector<double> losses;
    losses.reserve(cfg.steps);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<double>> accum(params.size());
        for (size_t i = 0; i < params.size(); ++i)
            accum[i].assign(params[i].tensor.size(), 0.0);
        double batch_loss = 0.0;
        try {
            for (int b = 0; b < cfg.batch_size; ++b) {
                const PatchGrid& picked =
                    corpus[rng.uniform_int(0, static_cast<int>(corpus.size()) - 1)];
                PatchGrid permuted;
                const PatchGrid* grid = &picked;
                if (cfg.permute_channels) {
                    permuted = permute_grid_channels(picked, perm);
                    grid = &permuted;
                }
                std::vector<uint8_t> mask = make_mask_plan(
                    grid->channels, grid->patches_per_channel, cfg.mask_ratio, rng);
                ForwardCtx ctx{&rng, true};
                Tensor loss = masked_recon_loss(model, *grid, mask, ctx);
                batch_loss += loss.item();
                if (loss.requires_grad())
                    accumulate_grads(loss, params, 1.0 / cfg.batch_size, accum);
            }
            opt.step(accum);
        } catch (const TensorError& e) {
            throw TrainError("pretrain step " + std::to_string(step) + ": " +
                             e.what());
        }
        batch_loss /= cfg.batch_size;
        losses.push_back(batch_loss);
        if (log)
            *log << step << "\t" << batch_loss << "\t" << opt.lr_at(step) << "\n";
    }
    return losses;
}

Tensor smoothed_cross_entropy(const Tensor& logits, int label, int num_classes,
                              double eps) {
    if (label < 0 || label >= num_classes)
        throw TrainError("label out of range");
    std::vector<double> target(num_classes, eps / num_classes);
    target[label] += 1.0 - eps;
    Tensor t = Tensor::from_vector(std::move(target), {1, num_classes});
    return neg(sum_all(mul(t, log_softmax_lastaxis(logits))));
}

Tensor classify_logits(DiverModel& model, const PatchGrid& grid, ForwardCtx& ctx) {
    std::vector<uint8_t> mask(
        static_cast<size_t>(grid.channels) * grid.patches_per_channel, 0);
    return model.logits(model.forward_tokens(grid, mask, ctx));
}

Tensor permutation_protocol_logits(DiverModel& model, const PatchGrid& grid,
                                   const std::vector<int>& perm, ForwardCtx& ctx) {
    int C = grid.channels, N = grid.patches_per_channel;
    check_bijection(perm, C);
    std::vector<int> inv(C);
    for (int i = 0; i < C; ++i) inv[perm[i]] = i;

    PatchGrid permuted = permute_grid_channels(grid, perm);
    std::vector<uint8_t> mask(static_cast<size_t>(C) * N, 0);
    Tensor tokens = model.forward_tokens(permuted, mask, ctx);
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(C) * N);
    for (int c = 0; c < C; ++c)
        for (int n = 0; n < N; ++n) rows.push_back(inv[c] * N + n);
    return model.logits(gather_rows(tokens, rows));
}

FinetuneResult finetune(const ModelConfig& mc, const LabeledGrids& data,
                        const TrainConfig& cfg, const std::vector<uint64_t>& seeds,
                        const Checkpoint* init, std::ostream* log) {
    if (data.train_idx.empty() || data.test_idx.empty())
        throw TrainError("finetune: need non-empty train and test splits");
    std::set<int> train_classes;
    for (int i : data.train_idx) train_classes.insert(data.labels[i]);
    for (int k = 0; k < data.num_classes; ++k)
        if (!train_classes.count(k))
            throw TrainError("finetune: class " + std::to_string(k) +
                             " absent from the training split");

    ModelConfig cls_cfg = mc;
    cls_cfg.num_classes = data.num_classes;

    FinetuneResult result;
    result.seeds = seeds;
    std::vector<double> accs, kappas, f1s;
    for (uint64_t seed : seeds) {
        Rng rng(seed);
        DiverModel model(cls_cfg);
        model.init(rng);
        std::vector<NamedParam> params = model.named_params();
        if (init) load_matching(*init, params);

        std::vector<int> perm;
        if (cfg.permute_channels)
            perm = rng.permutation(data.grids[data.train_idx[0]].channels);

        int per_epoch = (static_cast<int>(data.train_idx.size()) +
                         cfg.batch_size - 1) / cfg.batch_size;
        AdamW opt(params, optimizer_config(
                              cfg, static_cast<long>(cfg.epochs) * per_epoch));

        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::vector<int> order(data.train_idx);
            std::vector<int> shuffle = rng.permutation(static_cast<int>(order.size()));
            double epoch_loss = 0.0;
            for (int b = 0; b < per_epoch; ++b) {
                int lo = b * cfg.batch_size;
                int hi = std::min<int>(lo + cfg.batch_size,
                                       static_cast<int>(order.size()));
                std::vector<std::vector<double>> accum(params.size());
                for (size_t i = 0; i < params.size(); ++i)
                    accum[i].assign(params[i].tensor.size(), 0.0);
                for (int s = lo; s < hi; ++s) {
                    int idx = order[shuffle[s]];
                    ForwardCtx ctx{&rng, true};
                    Tensor logits =
                        cfg.permute_channels
                            ? permutation_protocol_logits(model, data.grids[idx],
                                                          perm, ctx)
                            : classify_logits(model, data.grids[idx], ctx);
                    Tensor loss = smoothed_cross_entropy(
                        logits, data.labels[idx], data.num_classes,
                        cfg.label_smoothing);
                    epoch_loss += loss.item();
                    accumulate_grads(loss, params, 1.0 / (hi - lo), accum);
                }
                opt.step(accum);
            }
            if (log)
                *log << "seed " << seed << "\tepoch " << epoch << "\tloss "
                     << epoch_loss / data.train_idx.size() << "\n";
        }

        std::vector<int> preds, truth;
        {
            NoGradGuard ng;
            ForwardCtx ectx;
            for (int idx : data.test_idx) {
                Tensor logits =
                    cfg.permute_channels
                        ? permutation_protocol_logits(model, data.grids[idx],
                                                      perm, ectx)
                        : classify_logits(model, data.grids[idx], ectx);
                preds.push_back(argmax_row(logits.data()));
                truth.push_back(data.labels[idx]);
            }
        }
        MetricSet m = compute_metrics(preds, truth, data.num_classes);
        result.per_seed.push_back(m);
        accs.push_back(m.balanced_accuracy);
        kappas.push_back(m.kappa);
        f1s.push_back(m.weighted_f1);
        if (log)
            *log << "seed " << seed << "\tbal_acc " << m.balanced_accuracy
                 << "\tkappa " << m.kappa << "\tf1 " << m.weighted_f1 << "\n";
    }
    result.balanced_accuracy = mean_std(accs);
    result.kappa = mean_std(kappas);
    result.weighted_f1 = mean_std(f1s);
    return result;
}

}  // namespace diver
