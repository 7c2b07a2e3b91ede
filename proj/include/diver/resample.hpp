#pragma once

#include <vector>

#include "diver/recording.hpp"

namespace diver {

// Polyphase rational resampling with a Kaiser-windowed sinc anti-alias
// low-pass at min(source, target)/2. Output length is
// round(input_length * target / source). Same-rate input is returned
// bit-identical.
std::vector<double> resample_signal(const std::vector<double>& x,
                                    double source_hz, double target_hz);

Recording resample(const Recording& rec, double target_hz);

}  // namespace diver
