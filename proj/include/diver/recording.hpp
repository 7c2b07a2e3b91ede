#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace diver {

struct RecordingError : std::runtime_error {
    explicit RecordingError(const std::string& what) : std::runtime_error(what) {}
};

// Multi-channel raw EEG, channel-major, values in microvolts.
struct Recording {
    std::vector<std::string> channel_labels;
    double sample_rate = 0.0;
    std::vector<std::vector<double>> samples;
    std::string subject_id;
    std::string session_id;

    int channels() const { return static_cast<int>(channel_labels.size()); }
    int64_t num_samples() const {
        return samples.empty() ? 0 : static_cast<int64_t>(samples[0].size());
    }
    double duration_s() const {
        return sample_rate > 0 ? num_samples() / sample_rate : 0.0;
    }

    // Enforces unique labels, equal channel lengths, positive rate.
    void validate() const;
};

// DRF container: magic "DRF1", u32 channel count, f64 sample rate,
// length-prefixed UTF-8 labels, u64 samples per channel, then channel-major
// little-endian f32 samples.
Recording read_drf(const std::string& path);
void write_drf(const std::string& path, const Recording& rec);

// Headered CSV: first column time, one column per channel. Sample rate is
// inferred from the first two time stamps.
Recording read_csv(const std::string& path);

// Dispatches on extension (.drf / .csv).
Recording read_recording(const std::string& path);

}  // namespace diver
