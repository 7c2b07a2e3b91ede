#pragma once

#include <string>
#include <vector>

#include "diver/filters.hpp"
#include "diver/recording.hpp"
#include "diver/resample.hpp"

namespace diver {

// Grid of 1 s patches: C channels by N patches of P samples each.
struct PatchGrid {
    int channels = 0;
    int patches_per_channel = 0;
    int patch_len = 0;
    std::vector<double> data;        // channel-major, then patch, then sample
    std::vector<uint8_t> mask;       // C*N flags, 1 = masked
    std::vector<std::string> channel_labels;
    std::string recording_id;
    double start_time_s = 0.0;

    double& at(int c, int n, int p) {
        return data[(static_cast<int64_t>(c) * patches_per_channel + n) * patch_len + p];
    }
    double at(int c, int n, int p) const {
        return data[(static_cast<int64_t>(c) * patches_per_channel + n) * patch_len + p];
    }
};

constexpr int kPatchSamples = 200;
constexpr int kWindowPatches = 30;
constexpr double kTargetRateHz = 200.0;
constexpr double kRejectAmplitudeUv = 100.0;

// The classical 19-channel 10-20 clinical montage.
const std::vector<std::string>& standard_19_channels();

// Label normalization: uppercase plus the T3/T7, T4/T8, T5/P7, T6/P8 aliases.
std::string canonical_label(const std::string& label);

// Reorders/subsets channels to `wanted` (alias-aware). Missing labels raise
// a RecordingError naming every absentee.
Recording select_channels(const Recording& rec,
                          const std::vector<std::string>& wanted);

// Non-overlapping 30 s windows at 200 Hz; a window is dropped when any
// sample of any channel strictly exceeds 100 uV in magnitude. The trailing
// remainder shorter than 30 s is dropped.
std::vector<PatchGrid> segment_and_reject(const Recording& rec);

struct PreprocessConfig {
    double band_low_hz = 0.3;
    double band_high_hz = 75.0;
    double notch_hz = 60.0;
    double target_rate_hz = kTargetRateHz;
    bool select_standard_montage = true;
    FilterConfig filter;
};

// Fixed order: bandpass -> notch -> resample -> channel select -> segment.
std::vector<PatchGrid> preprocess_recording(const Recording& rec,
                                            const PreprocessConfig& cfg = {});

}  // namespace diver
