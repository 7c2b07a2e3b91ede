#include "diver/filters.hpp"

#include <algorithm>
#include <cmath>

namespace diver {

namespace {

// Butterworth pole Q for section k of an even-order cascade.
double butter_q(int order, int k) {
    double theta = M_PI * (2.0 * k + 1.0) / (2.0 * order);
    return 1.0 / (2.0 * std::cos(theta));
}

void check_cutoff(double fc, double fs) {
    if (fc <= 0.0 || fc >= fs / 2.0)
        throw RecordingError("filter cutoff must lie in (0, Nyquist)");
}

}  // namespace

std::vector<Biquad> butter_lowpass_sos(int order, double fc, double fs) {
    if (order < 2 || order % 2 != 0)
        throw RecordingError("butterworth order must be even and >= 2");
    check_cutoff(fc, fs);
    double w0 = 2.0 * M_PI * fc / fs;
    double cw = std::cos(w0), sw = std::sin(w0);
    std::vector<Biquad> sos;
    for (int k = 0; k < order / 2; ++k) {
        double alpha = sw / (2.0 * butter_q(order, k));
        double a0 = 1.0 + alpha;
        Biquad s;
        s.b0 = (1.0 - cw) / 2.0 / a0;
        s.b1 = (1.0 - cw) / a0;
        s.b2 = s.b0;
        s.a1 = -2.0 * cw / a0;
        s.a2 = (1.0 - alpha) / a0;
        sos.push_back(s);
    }
    return sos;
}

std::vector<Biquad> butter_highpass_sos(int order, double fc, double fs) {
    if (order < 2 || order % 2 != 0)
        throw RecordingError("butterworth order must be even and >= 2");
    check_cutoff(fc, fs);
    double w0 = 2.0 * M_PI * fc / fs;
    double cw = std::cos(w0), sw = std::sin(w0);
    std::vector<Biquad> sos;
    for (int k = 0; k < order / 2; ++k) {
        double alpha = sw / (2.0 * butter_q(order, k));
        double a0 = 1.0 + alpha;
        Biquad s;
        s.b0 = (1.0 + cw) / 2.0 / a0;
        s.b1 = -(1.0 + cw) / a0;
        s.b2 = s.b0;
        s.a1 = -2.0 * cw / a0;
        s.a2 = (1.0 - alpha) / a0;
        sos.push_back(s);
    }
    return sos;
}

Biquad notch_biquad(double f0, double fs, double q) {
    check_cutoff(f0, fs);
    double w0 = 2.0 * M_PI * f0 / fs;
    double cw = std::cos(w0);
    double alpha = std::sin(w0) / (2.0 * q);
    double a0 = 1.0 + alpha;
    Biquad s;
    s.b0 = 1.0 / a0;
    s.b1 = -2.0 * cw / a0;
    s.b2 = 1.0 / a0;
    s.a1 = -2.0 * cw / a0;
    s.a2 = (1.0 - alpha) / a0;
    return s;
}

std::vector<double> sosfilt(const std::vector<Biquad>& sos,
                            const std::vector<double>& x) {
    std::vector<double> y = x;
    for (const Biquad& s : sos) {
        double z1 = 0.0, z2 = 0.0;
        for (double& v : y) {
            double in = v;
            double out = s.b0 * in + z1;
            z1 = s.b1 * in - s.a1 * out + z2;
            z2 = s.b2 * in - s.a2 * out;
            v = out;
        }
    }
    return y;
}

std::vector<double> filtfilt(const std::vector<Biquad>& sos,
                             const std::vector<double>& x, int padlen) {
    int n = static_cast<int>(x.size());
    if (n == 0) return {};
    padlen = std::min(padlen, n - 1);
    if (padlen < 0) padlen = 0;
    // Odd reflection about the end points damps start-up transients.
    std::vector<double> ext;
    ext.reserve(n + 2 * padlen);
    for (int i = padlen; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (int i = 1; i <= padlen; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);
    std::vector<double> fwd = sosfilt(sos, ext);
    std::reverse(fwd.begin(), fwd.end());
    std::vector<double> bwd = sosfilt(sos, fwd);
    std::reverse(bwd.begin(), bwd.end());
    return std::vector<double>(bwd.begin() + padlen, bwd.begin() + padlen + n);
}

namespace {

Recording apply_per_channel(const Recording& rec,
                            const std::vector<Biquad>& sos, int padlen) {
    Recording out = rec;
    for (auto& ch : out.samples) ch = filtfilt(sos, ch, padlen);
    return out;
}

}  // namespace

Recording bandpass(const Recording& rec, double low, double high,
                   const FilterConfig& cfg) {
    rec.validate();
    if (!(0.0 < low && low < high))
        throw RecordingError("bandpass: need 0 < low < high");
    if (high >= rec.sample_rate / 2.0)
        throw RecordingError("bandpass: high cutoff at or above Nyquist");
    std::vector<Biquad> sos = butter_highpass_sos(cfg.butter_order, low, rec.sample_rate);
    std::vector<Biquad> lp = butter_lowpass_sos(cfg.butter_order, high, rec.sample_rate);
    sos.insert(sos.end(), lp.begin(), lp.end());
    // Long enough for the low-cutoff transient to die out at the edges.
    int padlen = static_cast<int>(std::min<double>(
        3.0 * rec.sample_rate / low, static_cast<double>(rec.num_samples() - 1)));
    return apply_per_channel(rec, sos, padlen);
}

Recording notch(const Recording& rec, double f0, const FilterConfig& cfg) {
    rec.validate();
    if (f0 >= rec.sample_rate / 2.0)
        throw RecordingError("notch: frequency at or above Nyquist");
    std::vector<Biquad> sos{notch_biquad(f0, rec.sample_rate, cfg.notch_q)};
    int padlen = static_cast<int>(std::min<double>(
        2.0 * rec.sample_rate * cfg.notch_q / f0,
        static_cast<double>(rec.num_samples() - 1)));
    return apply_per_channel(rec, sos, padlen);
}

}  // namespace diver
