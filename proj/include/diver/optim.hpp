// AdamW with decoupled weight decay, global gradient-norm clipping and a
// cosine-annealed learning rate.

#pragma once

#include <string>
#include <vector>

#include "diver/tensor.hpp"

namespace diver {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-2;
    double clip_norm = 1.0;       // <= 0 disables clipping
    // Cosine schedule over one cycle; cosine_steps <= 0 keeps lr constant.
    long cosine_steps = 0;
    double min_lr = 1e-6;
};

class AdamW {
public:
    AdamW(std::vector<NamedParam> params, AdamWConfig cfg);

    // Effective lr for step `step` (0-based), following the cosine curve.
    double lr_at(long step) const;
    long step_count() const { return step_; }

    // Applies one update. `grads[i]` must match params[i] elementwise.
    // Throws TensorError on a non-finite gradient; the step is not applied.
    void step(const std::vector<std::vector<double>>& grads);

    const std::vector<NamedParam>& params() const { return params_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    std::vector<NamedParam> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    long step_ = 0;
};

}  // namespace diver
