#pragma once

#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "diver/metrics.hpp"
#include "diver/model.hpp"
#include "diver/synth.hpp"

namespace diver {

struct TrainError : std::runtime_error {
    explicit TrainError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 5e-2;
    double min_lr = 1e-6;
    double clip = 1.0;
    bool cosine = true;
    int steps = 300;     // pretraining
    int epochs = 50;     // fine-tuning
    int batch_size = 64;
    double mask_ratio = 0.5;
    double label_smoothing = 0.1;
    bool permute_channels = false;  // fixed per-run permutation condition

    static TrainConfig pretrain_defaults();  // lr 5e-4, wd 5e-4
    static TrainConfig finetune_defaults();  // Table-4 settings
};

// round(ratio * C * N) cells masked, drawn uniformly without replacement.
std::vector<uint8_t> make_mask_plan(int C, int N, double ratio, Rng& rng);

// Masked-patch reconstruction MSE over masked cells only; target is the
// per-patch z-scored raw patch. Zero-mask plans yield a constant 0 loss.
Tensor masked_recon_loss(DiverModel& model, const PatchGrid& grid,
                         const std::vector<uint8_t>& mask, ForwardCtx& ctx);

// Runs `cfg.steps` AdamW updates over randomly drawn batches; returns the
// per-step mean batch loss. Optional tab-separated log: step, loss, lr.
std::vector<double> pretrain(DiverModel& model, const std::vector<PatchGrid>& corpus,
                             const TrainConfig& cfg, Rng& rng,
                             std::ostream* log = nullptr);

// Label-smoothed cross entropy: target (1-eps) * onehot + eps/K.
Tensor smoothed_cross_entropy(const Tensor& logits, int label, int num_classes,
                              double eps);

// Unmasked forward to class logits (1 x K).
Tensor classify_logits(DiverModel& model, const PatchGrid& grid, ForwardCtx& ctx);

// Section 3.3 protocol: permute channels, encode, un-permute token states,
// then classify. perm must be a bijection on [0, C).
Tensor permutation_protocol_logits(DiverModel& model, const PatchGrid& grid,
                                   const std::vector<int>& perm, ForwardCtx& ctx);

struct FinetuneResult {
    std::vector<uint64_t> seeds;
    std::vector<MetricSet> per_seed;
    MeanStd balanced_accuracy, kappa, weighted_f1;  // across seeds
};

// Trains a fresh head+encoder per seed on the train split and evaluates on
// the held-out split. `init` (optional) seeds encoder weights from a
// pretraining checkpoint before training.
struct Checkpoint;
FinetuneResult finetune(const ModelConfig& mc, const LabeledGrids& data,
                        const TrainConfig& cfg, const std::vector<uint64_t>& seeds,
                        const Checkpoint* init = nullptr,
                        std::ostream* log = nullptr);

const std::vector<uint64_t>& default_seeds();  // {41, 42, 43, 44, 45}

}  // namespace diver
