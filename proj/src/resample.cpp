#include "diver/resample.hpp"

#include <cmath>
#include <numeric>

namespace diver {

namespace {

double bessel_i0(double x) {
    // Series expansion; converges quickly for the beta values used here.
    double sum = 1.0, term = 1.0;
    double half = x / 2.0;
    for (int k = 1; k < 64; ++k) {
        term *= (half / k) * (half / k);
        sum += term;
        if (term < 1e-18 * sum) break;
    }
    return sum;
}

std::vector<double> kaiser_sinc_taps(int up, int down, int half_factor,
                                     double beta) {
    int maxlm = std::max(up, down);
    int half = half_factor * maxlm;
    int n = 2 * half + 1;
    double wc = M_PI / maxlm;
    double i0b = bessel_i0(beta);
    std::vector<double> h(n);
    for (int i = 0; i < n; ++i) {
        int d = i - half;
        double sinc = (d == 0) ? wc / M_PI : std::sin(wc * d) / (M_PI * d);
        double t = static_cast<double>(i) / (n - 1) * 2.0 - 1.0;
        double win = bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - t * t))) / i0b;
        h[i] = up * sinc * win;
    }
    return h;
}

}  // namespace

std::vector<double> resample_signal(const std::vector<double>& x,
                                    double source_hz, double target_hz) {
    if (source_hz <= 0.0 || target_hz <= 0.0)
        throw RecordingError("resample: rates must be positive");
    if (x.empty()) throw RecordingError("resample: empty input");
    if (source_hz == target_hz) return x;
    // Rational ratio from milli-hertz resolution rates.
    long long src = std::llround(source_hz * 1000.0);
    long long tgt = std::llround(target_hz * 1000.0);
    long long g = std::gcd(src, tgt);
    int up = static_cast<int>(tgt / g);
    int down = static_cast<int>(src / g);
    if (up == down) return x;

    std::vector<double> h = kaiser_sinc_taps(up, down, 10, 8.6);
    int half = (static_cast<int>(h.size()) - 1) / 2;
    int64_t n = static_cast<int64_t>(x.size());
    int64_t out_n = std::llround(static_cast<double>(n) * target_hz / source_hz);
    std::vector<double> y(out_n, 0.0);
    for (int64_t m = 0; m < out_n; ++m) {
        // Center of the filter sits at upsampled index m*down.
        int64_t p = m * down + half;
        // Zero-stuffed input is nonzero only at multiples of `up`.
        int64_t j_hi = std::min(p, (n - 1) * static_cast<int64_t>(up));
        j_hi -= ((j_hi % up) + up) % up;
        int64_t j_lo = std::max<int64_t>(0, p - (static_cast<int64_t>(h.size()) - 1));
        double acc = 0.0;
        for (int64_t j = j_hi; j >= j_lo; j -= up) {
            acc += h[p - j] * x[j / up];
        }
        y[m] = acc;
    }
    return y;
}

Recording resample(const Recording& rec, double target_hz) {
    rec.validate();
    Recording out = rec;
    out.sample_rate = target_hz;
    for (auto& ch : out.samples) ch = resample_signal(ch, rec.sample_rate, target_hz);
    return out;
}

}  // namespace diver
