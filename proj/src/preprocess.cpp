#include "diver/preprocess.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

namespace diver {

const std::vector<std::string>& standard_19_channels() {
    static const std::vector<std::string> chans{
        "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
        "C4",  "T4",  "T5", "P3", "Pz", "P4", "T6", "O1", "O2"};
    return chans;
}

std::string canonical_label(const std::string& label) {
    std::string up;
    for (char c : label) up.push_back(static_cast<char>(std::toupper(c)));
    static const std::map<std::string, std::string> aliases{
        {"T7", "T3"}, {"T8", "T4"}, {"P7", "T5"}, {"P8", "T6"}};
    auto it = aliases.find(up);
    return it == aliases.end() ? up : it->second;
}

Recording select_channels(const Recording& rec,
                          const std::vector<std::string>& wanted) {
    rec.validate();
    std::map<std::string, int> have;
    for (int i = 0; i < rec.channels(); ++i)
        have[canonical_label(rec.channel_labels[i])] = i;
    std::vector<int> order;
    std::string missing;
    for (const auto& w : wanted) {
        auto it = have.find(canonical_label(w));
        if (it == have.end()) {
            if (!missing.empty()) missing += ", ";
            missing += w;
        } else {
            order.push_back(it->second);
        }
    }
    if (!missing.empty())
        throw RecordingError("select_channels: missing channels: " + missing);
    Recording out;
    out.sample_rate = rec.sample_rate;
    out.subject_id = rec.subject_id;
    out.session_id = rec.session_id;
    for (size_t i = 0; i < order.size(); ++i) {
        out.channel_labels.push_back(wanted[i]);
        out.samples.push_back(rec.samples[order[i]]);
    }
    return out;
}

std::vector<PatchGrid> segment_and_reject(const Recording& rec) {
    rec.validate();
    if (std::abs(rec.sample_rate - kTargetRateHz) > 1e-6)
        throw RecordingError("segment_and_reject: recording must be at 200 Hz");
    const int win = kWindowPatches * kPatchSamples;  // 6000 samples = 30 s
    int64_t n = rec.num_samples();
    int C = rec.channels();
    std::vector<PatchGrid> out;
    for (int64_t start = 0; start + win <= n; start += win) {
        bool reject = false;
        for (int c = 0; c < C && !reject; ++c) {
            const double* x = rec.samples[c].data() + start;
            for (int t = 0; t < win; ++t) {
                if (std::abs(x[t]) > kRejectAmplitudeUv) {  // strict: 100 uV kept
                    reject = true;
                    break;
                }
            }
        }
        if (reject) continue;
        PatchGrid grid;
        grid.channels = C;
        grid.patches_per_channel = kWindowPatches;
        grid.patch_len = kPatchSamples;
        grid.channel_labels = rec.channel_labels;
        grid.recording_id = rec.subject_id.empty() ? rec.session_id : rec.subject_id;
        grid.start_time_s = static_cast<double>(start) / rec.sample_rate;
        grid.data.resize(static_cast<int64_t>(C) * win);
        grid.mask.assign(static_cast<size_t>(C) * kWindowPatches, 0);
        for (int c = 0; c < C; ++c) {
            std::copy_n(rec.samples[c].data() + start, win,
                        grid.data.data() + static_cast<int64_t>(c) * win);
        }
        out.push_back(std::move(grid));
    }
    return out;
}

std::vector<PatchGrid> preprocess_recording(const Recording& rec,
                                            const PreprocessConfig& cfg) {
    Recording r = bandpass(rec, cfg.band_low_hz, cfg.band_high_hz, cfg.filter);
    r = notch(r, cfg.notch_hz, cfg.filter);
    r = resample(r, cfg.target_rate_hz);
    if (cfg.select_standard_montage) r = select_channels(r, standard_19_channels());
    return segment_and_reject(r);
}

}  // namespace diver
