#include "diver/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace diver {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

struct Tone {
    double freq_hz, amp_uv, phase;
};

// Per-channel tone set for one recording/grid. Three tones: the first is the
// class-band carrier (strong, shared frequency across channels), the rest are
// weak distractors.
std::vector<Tone> draw_tones(Rng& rng, int class_id, double carrier_freq) {
    std::vector<Tone> tones;
    if (class_id >= 0) {
        tones.push_back({carrier_freq, 25.0, rng.uniform(0.0, kTwoPi)});
    } else {
        tones.push_back({rng.uniform(1.0, 45.0), rng.uniform(5.0, 25.0),
                         rng.uniform(0.0, kTwoPi)});
    }
    for (int i = 0; i < 2; ++i)
        tones.push_back({rng.uniform(1.0, 45.0), rng.uniform(1.0, 8.0),
                         rng.uniform(0.0, kTwoPi)});
    return tones;
}

double sample_at(const std::vector<Tone>& tones, double t, Rng& rng,
                 double noise_uv) {
    double v = 0.0;
    for (const Tone& tn : tones)
        v += tn.amp_uv * std::sin(kTwoPi * tn.freq_hz * t + tn.phase);
    double noise = rng.normal(0.0, noise_uv);
    // keep the hard amplitude bound regardless of the gaussian tail
    v += std::clamp(noise, -4.0 * noise_uv, 4.0 * noise_uv);
    return v;
}

std::vector<std::string> channel_names(int n) {
    const auto& std19 = standard_19_channels();
    if (n <= static_cast<int>(std19.size()))
        return {std19.begin(), std19.begin() + n};
    std::vector<std::string> labels = std19;
    for (int i = static_cast<int>(std19.size()); i < n; ++i)
        labels.push_back("X" + std::to_string(i + 1));
    return labels;
}

double draw_carrier(Rng& rng, int class_id) {
    const auto& bands = synth_class_bands();
    if (class_id < 0) return 0.0;
    if (class_id >= static_cast<int>(bands.size()))
        throw std::invalid_argument("synth: class id beyond the defined bands");
    return rng.uniform(bands[class_id].lo_hz, bands[class_id].hi_hz);
}

}  // namespace

const std::vector<ClassBand>& synth_class_bands() {
    static const std::vector<ClassBand> bands = {
        {3.0, 5.0}, {9.0, 12.0}, {18.0, 22.0}, {30.0, 35.0}};
    return bands;
}

Recording synth_recording(const SynthConfig& cfg, Rng& rng, int class_id) {
    if (cfg.channels < 1 || cfg.duration_s <= 0.0 || cfg.sample_rate_hz <= 0.0)
        throw std::invalid_argument("synth: bad config");
    double carrier = draw_carrier(rng, class_id);
    int64_t n = static_cast<int64_t>(std::llround(cfg.duration_s * cfg.sample_rate_hz));
    Recording rec;
    rec.sample_rate = cfg.sample_rate_hz;
    rec.channel_labels = channel_names(cfg.channels);
    rec.samples.resize(cfg.channels);
    for (int c = 0; c < cfg.channels; ++c) {
        std::vector<Tone> tones = draw_tones(rng, class_id, carrier);
        rec.samples[c].resize(n);
        for (int64_t i = 0; i < n; ++i)
            rec.samples[c][i] =
                sample_at(tones, i / cfg.sample_rate_hz, rng, cfg.noise_uv);
    }
    return rec;
}

PatchGrid synth_grid(int channels, int patches, Rng& rng, int class_id,
                     double noise_uv, bool shared_tones) {
    double carrier = draw_carrier(rng, class_id);
    std::vector<Tone> common;
    if (shared_tones) common = draw_tones(rng, class_id, carrier);
    PatchGrid g;
    g.channels = channels;
    g.patches_per_channel = patches;
    g.patch_len = kPatchSamples;
    g.channel_labels = channel_names(channels);
    g.data.resize(static_cast<size_t>(channels) * patches * kPatchSamples);
    for (int c = 0; c < channels; ++c) {
        std::vector<Tone> tones =
            shared_tones ? common : draw_tones(rng, class_id, carrier);
        for (int n = 0; n < patches; ++n)
            for (int p = 0; p < kPatchSamples; ++p) {
                double t = (n * kPatchSamples + p) / kTargetRateHz;
                g.at(c, n, p) = sample_at(tones, t, rng, noise_uv);
            }
    }
    return g;
}

LabeledGrids make_labeled_dataset(int num_classes, int per_class, int channels,
                                  int patches, Rng& rng, double test_frac) {
    if (num_classes < 2 || per_class < 2)
        throw std::invalid_argument("synth: need >= 2 classes with >= 2 examples");
    LabeledGrids out;
    out.num_classes = num_classes;
    int test_per_class = std::max(1, static_cast<int>(per_class * test_frac));
    for (int k = 0; k < num_classes; ++k)
        for (int i = 0; i < per_class; ++i) {
            out.grids.push_back(synth_grid(channels, patches, rng, k));
            out.labels.push_back(k);
            int idx = static_cast<int>(out.grids.size()) - 1;
            (i >= per_class - test_per_class ? out.test_idx : out.train_idx)
                .push_back(idx);
        }
    return out;
}

}  // namespace diver
