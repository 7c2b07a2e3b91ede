#include "diver/verify.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>

#include "diver/filters.hpp"
#include "diver/train.hpp"

namespace diver {

namespace {

double max_abs_gap(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Tensor permute_tokens(const Tensor& x, int C, int N, const std::vector<int>& perm) {
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(C) * N);
    for (int c = 0; c < C; ++c)
        for (int n = 0; n < N; ++n) rows.push_back(perm[c] * N + n);
    return gather_rows(x, rows);
}

PatchGrid random_grid(int C, int N, int P, Rng& rng) {
    PatchGrid g;
    g.channels = C;
    g.patches_per_channel = N;
    g.patch_len = P;
    g.data.resize(static_cast<size_t>(C) * N * P);
    for (double& v : g.data) v = rng.normal(0.0, 10.0);
    return g;
}

// Positional encoding followed by the encoder stack, token-level.
Tensor full_stack(DiverModel& m, const Tensor& x, int C, int N, ForwardCtx& ctx) {
    Tensor xo = x;
    if (m.config().positional != Positional::none)
        xo = add(x, m.positional_encoding(x, C, N, ctx));
    return m.encoder_forward(xo, C, N, ctx);
}

double sine_rms(const std::vector<double>& x, size_t skip) {
    double s = 0.0;
    size_t n = 0;
    for (size_t i = skip; i + skip < x.size(); ++i, ++n) s += x[i] * x[i];
    return std::sqrt(s / std::max<size_t>(1, n));
}

}  // namespace

std::vector<CheckResult> run_invariant_suite(const ModelConfig& cfg,
                                             uint64_t seed) {
    ModelConfig mc = cfg;
    mc.dropout = 0.0;
    if (mc.num_classes < 2) mc.num_classes = 4;
    mc.validate();

    bool equivariant = mc.block_kind != BlockKind::vanilla &&
                       mc.positional != Positional::acpe;

    DiverModel m(mc);
    Rng rng(seed);
    m.init(rng, /*random_pe=*/true);

    int C = mc.positional == Positional::acpe ? mc.acpe_channels : 4;
    int N = 8;
    if (mc.positional == Positional::stcpe)
        N = std::max(N, 2 * mc.stcpe_window + 2);
    if (mc.positional == Positional::acpe) N = std::max(N, mc.acpe_kernel_t + 3);
    if (mc.block_kind == BlockKind::vanilla) {
        C = std::min(C, mc.abs_max_channels);
        N = std::min(N, mc.abs_max_patches);
    }
    int T = C * N, D = mc.dim;

    std::vector<CheckResult> out;
    ForwardCtx ectx;  // eval mode

    {
        NoGradGuard ng;

        // channel permutation equivariance of positional encoding + encoder
        std::vector<double> xv(static_cast<size_t>(T) * D);
        for (double& v : xv) v = rng.normal(0.0, 1.0);
        Tensor x = Tensor::from_vector(xv, {T, D});
        Tensor base = full_stack(m, x, C, N, ectx);
        double gap = 0.0;
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<int> perm = rng.permutation(C);
            Tensor pout = full_stack(m, permute_tokens(x, C, N, perm), C, N, ectx);
            gap = std::max(gap, max_abs_gap(pout.data(),
                                            permute_tokens(base, C, N, perm).data()));
        }
        out.push_back({"perm-equivariance", gap, 1e-8, 1e-3, equivariant});

        // permute -> encode -> un-permute protocol at the logit level
        PatchGrid grid = random_grid(C, N, mc.patch_len, rng);
        Tensor intact = classify_logits(m, grid, ectx);
        double pgap = 0.0;
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<int> perm = rng.permutation(C);
            Tensor prot = permutation_protocol_logits(m, grid, perm, ectx);
            pgap = std::max(pgap, max_abs_gap(prot.data(), intact.data()));
        }
        out.push_back({"protocol-invariance", pgap, 1e-6, 1e-3, equivariant});

        // temporal translation equivariance of the positional encoding
        if (mc.positional == Positional::stcpe) {
            int W = mc.stcpe_window, s = 1;
            Tensor pe = m.stcpe_encoding(x, C, N, ectx);
            std::vector<int> rows;
            for (int c = 0; c < C; ++c)
                for (int n = 0; n < N - s; ++n) rows.push_back(c * N + n + s);
            Tensor pes = m.stcpe_encoding(gather_rows(x, rows), C, N - s, ectx);
            double tgap = 0.0;
            for (int c = 0; c < C; ++c)
                for (int j = W - 1; j <= N - s - W; ++j)
                    for (int d = 0; d < D; ++d)
                        tgap = std::max(
                            tgap, std::abs(pes.data()[(c * (N - s) + j) * D + d] -
                                           pe.data()[(c * N + j + s) * D + d]));
            out.push_back({"translation-equivariance", tgap, 1e-9, 1e-3, true});
        } else if (mc.positional == Positional::acpe) {
            int half = mc.acpe_kernel_t / 2, s = 1;
            Tensor pe = m.acpe_encoding(x, C, N);
            std::vector<int> rows;
            for (int c = 0; c < C; ++c)
                for (int n = 0; n < N - s; ++n) rows.push_back(c * N + n + s);
            Tensor pes = m.acpe_encoding(gather_rows(x, rows), C, N - s);
            double tgap = 0.0;
            for (int c = 0; c < C; ++c)
                for (int j = half; j < N - s - half; ++j)
                    for (int d = 0; d < D; ++d)
                        tgap = std::max(
                            tgap, std::abs(pes.data()[(c * (N - s) + j) * D + d] -
                                           pe.data()[(c * N + j + s) * D + d]));
            out.push_back({"translation-equivariance", tgap, 1e-9, 1e-3, true});
        }

        // rotary relativity: equal content, equal offsets, equal scores
        if (mc.rope && mc.block_kind != BlockKind::vanilla && !m.blocks.empty()) {
            std::vector<double> row(D);
            for (double& v : row) v = rng.normal(0.0, 1.0);
            std::vector<double> rep;
            for (int t = 0; t < N; ++t) rep.insert(rep.end(), row.begin(), row.end());
            Tensor xr = Tensor::from_vector(std::move(rep), {N, D});
            const auto& lay = m.layout(1, N);
            double rgap = 0.0, zgap = 0.0;
            AttnOpts plain = m.main_opts();
            plain.rope = false;
            for (int h = 0; h < mc.heads; ++h) {
                Tensor e = m.attention_scores(xr, m.blocks[0].attn, lay,
                                              m.main_opts(), h);
                Tensor e0 = m.attention_scores(xr, m.blocks[0].attn, lay, plain, h);
                for (int i = 3; i < N; ++i)
                    rgap = std::max(rgap, std::abs(e.data()[i * N + (i - 3)] -
                                                   e.data()[3 * N + 0]));
                for (int i = 0; i < N; ++i)
                    zgap = std::max(zgap, std::abs(e.data()[i * N + i] -
                                                   e0.data()[i * N + i]));
            }
            out.push_back({"rope-relativity", rgap, 1e-10, 1e-3, true});
            out.push_back({"rope-zero-offset", zgap, 1e-12, 1e-3, true});
        }

        // equal bias scalars collapse out of the softmax
        if (mc.binary_bias && mc.block_kind != BlockKind::vanilla &&
            !m.blocks.empty()) {
            Tensor xa = Tensor::from_vector(
                std::vector<double>(xv.begin(), xv.begin() + static_cast<size_t>(T) * D),
                {T, D});
            auto& attn = m.blocks[0].attn;
            Tensor a0 = m.attention(xa, attn, m.layout(C, N), m.main_opts(), ectx);
            std::vector<double> saved_s = attn.u_same.data();
            std::vector<double> saved_d = attn.u_diff.data();
            std::fill(attn.u_same.mutable_data().begin(),
                      attn.u_same.mutable_data().end(), 0.9);
            std::fill(attn.u_diff.mutable_data().begin(),
                      attn.u_diff.mutable_data().end(), 0.9);
            Tensor a1 = m.attention(xa, attn, m.layout(C, N), m.main_opts(), ectx);
            attn.u_same.mutable_data() = saved_s;
            attn.u_diff.mutable_data() = saved_d;
            // valid only when the baseline biases are themselves uniform
            bool uniform = true;
            for (double v : saved_s) uniform = uniform && v == saved_s[0];
            for (double v : saved_d) uniform = uniform && v == saved_d[0];
            if (uniform && saved_s[0] == saved_d[0])
                out.push_back({"bias-collapse", max_abs_gap(a0.data(), a1.data()),
                               1e-12, 1e-3, true});
        }

        // softmax normalization over the flattened key axis
        if (!m.blocks.empty()) {
            Tensor xa = Tensor::from_vector(xv, {T, D});
            double sgap = 0.0;
            Tensor a = softmax_lastaxis(m.attention_scores(
                xa, m.blocks[0].attn, m.layout(C, N), m.main_opts(), 0));
            for (int i = 0; i < T; ++i) {
                double s = 0.0;
                for (int j = 0; j < T; ++j) s += a.data()[i * T + j];
                sgap = std::max(sgap, std::abs(s - 1.0));
            }
            out.push_back({"softmax-rows", sgap, 1e-12, 1e-3, true});
        }
    }

    // finite-difference spot checks over a few entries of every parameter
    {
        PatchGrid g = random_grid(C, std::min(N, 3), mc.patch_len, rng);
        std::vector<uint8_t> mask(static_cast<size_t>(C) * g.patches_per_channel, 0);
        mask[0] = 1;
        auto loss_fn = [&]() {
            ForwardCtx ctx;
            return masked_recon_loss(m, g, mask, ctx);
        };
        Tensor loss = loss_fn();
        BackwardCtx bctx = backward(loss);
        double worst = 0.0;
        const double step = 1e-6;
        for (auto& np : m.named_params()) {
            std::vector<double> an = grad_of(bctx, np.tensor);
            auto& data = const_cast<Tensor&>(np.tensor).mutable_data();
            int probes = std::min<int>(2, static_cast<int>(data.size()));
            for (int pi = 0; pi < probes; ++pi) {
                size_t i = data.size() <= 2 ? pi
                                            : rng.uniform_int(
                                                  0, static_cast<int>(data.size()) - 1);
                double orig = data[i], lp, lm;
                {
                    NoGradGuard ng;
                    data[i] = orig + step;
                    lp = loss_fn().item();
                    data[i] = orig - step;
                    lm = loss_fn().item();
                    data[i] = orig;
                }
                double fd = (lp - lm) / (2.0 * step);
                worst = std::max(worst, std::abs(fd - an[i]) /
                                            std::max({1.0, std::abs(fd),
                                                      std::abs(an[i])}));
            }
        }
        out.push_back({"gradient-check", worst, 1e-4, 1e-3, true});
    }

    // preprocessing filter properties
    {
        double fs = 250.0;
        int n = static_cast<int>(fs) * 10;
        Recording rec;
        rec.sample_rate = fs;
        rec.channel_labels = {"CZ"};
        rec.samples.resize(1, std::vector<double>(n));
        for (int i = 0; i < n; ++i)
            rec.samples[0][i] = 10.0 * std::sin(2.0 * M_PI * 60.0 * i / fs);
        Recording notched = notch(rec, 60.0);
        double notch_ratio =
            sine_rms(notched.samples[0], n / 4) / sine_rms(rec.samples[0], n / 4);
        out.push_back({"notch-depth", notch_ratio, 0.1, 0.5, true});

        for (int i = 0; i < n; ++i)
            rec.samples[0][i] = 10.0 * std::sin(2.0 * M_PI * 10.0 * i / fs);
        Recording banded = bandpass(rec, 0.3, 75.0);
        double band_err = std::abs(sine_rms(banded.samples[0], n / 4) /
                                       sine_rms(rec.samples[0], n / 4) -
                                   1.0);
        out.push_back({"bandpass-passband", band_err, 0.05, 0.5, true});
    }

    return out;
}

bool all_as_expected(const std::vector<CheckResult>& results) {
    return std::all_of(results.begin(), results.end(),
                       [](const CheckResult& r) { return r.as_expected(); });
}

void print_report(const std::vector<CheckResult>& results, std::ostream& os) {
    os << std::left << std::setw(28) << "check" << std::right << std::setw(14)
       << "measured" << std::setw(12) << "bound" << std::setw(14) << "expected"
       << std::setw(10) << "verdict" << "\n";
    for (const auto& r : results) {
        os << std::left << std::setw(28) << r.name << std::right << std::setw(14)
           << std::scientific << std::setprecision(3) << r.value << std::setw(12)
           << (r.expect_pass ? r.tolerance : r.fail_threshold) << std::setw(14)
           << (r.expect_pass ? "pass" : "fail(gap)") << std::setw(10)
           << (r.as_expected() ? "ok" : "VIOLATED") << "\n";
    }
    os.flush();
}

}  // namespace diver
