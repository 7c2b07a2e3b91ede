// IIR filter design (bilinear transform with frequency prewarping) and
// zero-phase forward-backward application.

#pragma once

#include <vector>

#include "diver/recording.hpp"

namespace diver {

// Normalized second-order section (a0 == 1).
struct Biquad {
    double b0, b1, b2, a1, a2;
};

// Butterworth designs as cascaded biquads; order must be even.
std::vector<Biquad> butter_lowpass_sos(int order, double fc, double fs);
std::vector<Biquad> butter_highpass_sos(int order, double fc, double fs);

// Second-order IIR notch at f0 with quality factor Q.
Biquad notch_biquad(double f0, double fs, double q);

// Causal single pass through a biquad cascade (direct form II transposed).
std::vector<double> sosfilt(const std::vector<Biquad>& sos,
                            const std::vector<double>& x);

// Zero-phase forward-backward pass with odd-reflection edge padding.
std::vector<double> filtfilt(const std::vector<Biquad>& sos,
                             const std::vector<double>& x, int padlen);

struct FilterConfig {
    int butter_order = 4;  // per side (high-pass and low-pass)
    double notch_q = 30.0;
};

// 0.3-75 Hz style bandpass: order-N Butterworth high-pass at `low` cascaded
// with order-N low-pass at `high`, applied forward-backward.
Recording bandpass(const Recording& rec, double low, double high,
                   const FilterConfig& cfg = {});

Recording notch(const Recording& rec, double f0, const FilterConfig& cfg = {});

}  // namespace diver
