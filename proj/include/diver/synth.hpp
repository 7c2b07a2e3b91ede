#pragma once

#include <vector>

#include "diver/preprocess.hpp"
#include "diver/random.hpp"
#include "diver/recording.hpp"

namespace diver {

// Synthetic band-limited EEG-like signals. Amplitudes stay well under the
// 100 uV rejection threshold by construction so no window is dropped.
struct SynthConfig {
    int channels = 19;
    double duration_s = 95.0;
    double sample_rate_hz = 250.0;
    int num_classes = 0;  // 0 = unlabeled pretraining corpus
    double noise_uv = 2.0;
};

// Dominant frequency band per class id (4 well-separated bands).
struct ClassBand {
    double lo_hz, hi_hz;
};
const std::vector<ClassBand>& synth_class_bands();

// Sum of 3 random sinusoids plus clamped noise; when class_id >= 0 the first
// sinusoid is drawn from that class's band at a fixed strong amplitude.
Recording synth_recording(const SynthConfig& cfg, Rng& rng, int class_id = -1);

// Directly sampled 200 Hz patch grid with the same signal family, bypassing
// the preprocessing pipeline (for in-memory training smoke tests).
PatchGrid synth_grid(int channels, int patches, Rng& rng, int class_id = -1,
                     double noise_uv = 2.0, bool shared_tones = false);

struct LabeledGrids {
    std::vector<PatchGrid> grids;
    std::vector<int> labels;
    std::vector<int> train_idx, test_idx;
    int num_classes = 0;
};

// Balanced separable dataset: `per_class` grids per class, last `test_frac`
// share of each class held out.
LabeledGrids make_labeled_dataset(int num_classes, int per_class, int channels,
                                  int patches, Rng& rng,
                                  double test_frac = 0.25);

}  // namespace diver
