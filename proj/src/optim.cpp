#include "diver/optim.hpp"

#include <cmath>

namespace diver {

AdamW::AdamW(std::vector<NamedParam> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.size(), 0.0);
        v_.emplace_back(p.tensor.size(), 0.0);
    }
}

double AdamW::lr_at(long step) const {
    if (cfg_.cosine_steps <= 0) return cfg_.lr;
    long t = step % cfg_.cosine_steps;
    double frac = static_cast<double>(t) / static_cast<double>(cfg_.cosine_steps);
    return cfg_.min_lr +
           0.5 * (cfg_.lr - cfg_.min_lr) * (1.0 + std::cos(M_PI * frac));
}

void AdamW::step(const std::vector<std::vector<double>>& grads) {
    if (grads.size() != params_.size())
        throw TensorError("AdamW::step: gradient count mismatch");
    double sq = 0.0;
    for (size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].size() != static_cast<size_t>(params_[i].tensor.size()))
            throw TensorError("AdamW::step: gradient shape mismatch for " +
                              params_[i].name);
        for (double g : grads[i]) {
            if (!std::isfinite(g))
                throw TensorError("AdamW::step: non-finite gradient in " +
                                  params_[i].name + "; step aborted");
            sq += g * g;
        }
    }
    double gscale = 1.0;
    if (cfg_.clip_norm > 0.0) {
        double norm = std::sqrt(sq);
        if (norm > cfg_.clip_norm) gscale = cfg_.clip_norm / norm;
    }
    double lr = lr_at(step_);
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].tensor.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        const auto& g = grads[i];
        for (size_t j = 0; j < p.size(); ++j) {
            double gj = g[j] * gscale;
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            double mh = m[j] / bc1;
            double vh = v[j] / bc2;
            // Decoupled decay: applied to the parameter, not the gradient.
            p[j] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) +
                          cfg_.weight_decay * p[j]);
        }
    }
}

}  // namespace diver
