// Patch encoder, STCPE, and DIVER attention invariants.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "diver/model.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace diver;

namespace {

PatchGrid make_grid(int C, int N, int P, Rng& rng, double scale = 1.0) {
    PatchGrid g;
    g.channels = C;
    g.patches_per_channel = N;
    g.patch_len = P;
    g.data.resize(static_cast<size_t>(C) * N * P);
    for (double& x : g.data) x = rng.normal(0.0, scale);
    return g;
}

// Output channel c of the permuted grid is input channel perm[c].
PatchGrid permute_grid(const PatchGrid& g, const std::vector<int>& perm) {
    PatchGrid out = g;
    for (int c = 0; c < g.channels; ++c) {
        int src = perm[c];
        for (int n = 0; n < g.patches_per_channel; ++n)
            for (int p = 0; p < g.patch_len; ++p)
                out.at(c, n, p) = g.at(src, n, p);
    }
    return out;
}

// Permute channel blocks of a (C*N) x D token matrix.
Tensor permute_tokens(const Tensor& x, int C, int N, const std::vector<int>& perm) {
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(C) * N);
    for (int c = 0; c < C; ++c)
        for (int n = 0; n < N; ++n) rows.push_back(perm[c] * N + n);
    return gather_rows(x, rows);
}

DiverModel make_model(ModelConfig cfg, uint64_t seed, bool random_pe = true) {
    DiverModel m(std::move(cfg));
    Rng rng(seed);
    m.init(rng, random_pe);
    return m;
}

void zero_param(Tensor& t) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0); }

int coverage(int j, int N, int W) {
    return std::min(std::min(j + 1, W), std::min(N - j, N - W + 1));
}

}  // namespace

TEST_CASE("spectral pathway adds the DFT magnitude of the CNN output") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.spectral = false;
    DiverModel plain = make_model(cfg, 7);
    cfg.spectral = true;
    DiverModel spec = make_model(cfg, 7);  // same seed, identical parameters

    Rng rng(11);
    Tensor patch = testutil::random_tensor({1, cfg.patch_len}, rng, false);
    NoGradGuard ng;
    Tensor base = plain.encode_patches(patch);
    Tensor full = spec.encode_patches(patch);
    std::vector<double> oracle = testutil::naive_dft_magnitude(base.data());
    for (int i = 0; i < cfg.dim; ++i)
        CHECK(std::abs(full.data()[i] - (base.data()[i] + oracle[i])) < 1e-9);
}

TEST_CASE("zero patch with zero biases embeds to zero") {
    DiverModel m = make_model(ModelConfig::tiny(), 3);
    for (auto& st : m.patch_enc.convs) zero_param(st.b);
    zero_param(m.patch_enc.proj.b);
    Tensor patch = Tensor::zeros({1, m.config().patch_len});
    NoGradGuard ng;
    Tensor e = m.encode_patches(patch);
    for (double v : e.data()) CHECK(v == 0.0);
}

TEST_CASE("encode_patches rejects wrong patch length") {
    DiverModel m = make_model(ModelConfig::tiny(), 3);
    CHECK_THROWS(m.encode_patches(Tensor::zeros({1, m.config().patch_len + 1})));
}

TEST_CASE("encode_grid mask handling") {
    DiverModel m = make_model(ModelConfig::tiny(), 5);
    Rng rng(9);
    int C = 3, N = 4, P = m.config().patch_len;
    PatchGrid g = make_grid(C, N, P, rng);
    ForwardCtx ctx;
    NoGradGuard ng;

    SUBCASE("all masked: every row is the mask token") {
        std::vector<uint8_t> mask(C * N, 1);
        Tensor e = m.encode_grid(g, mask, ctx);
        const auto& mt = m.patch_enc.mask_token.data();
        for (int r = 0; r < C * N; ++r)
            for (int d = 0; d < m.config().dim; ++d)
                CHECK(e.data()[r * m.config().dim + d] == mt[d]);
    }
    SUBCASE("no mask: equals the per-patch map") {
        std::vector<uint8_t> mask(C * N, 0);
        Tensor e = m.encode_grid(g, mask, ctx);
        Tensor raw = Tensor::from_vector(g.data, {C * N, P});
        Tensor direct = m.encode_patches(raw);
        CHECK(testutil::max_abs_diff(e.data(), direct.data()) == 0.0);
    }
    SUBCASE("mixed mask, channel permutation moves rows exactly") {
        std::vector<uint8_t> mask(C * N, 0);
        mask[1] = mask[5] = mask[10] = 1;
        std::vector<int> perm = {2, 0, 1};
        PatchGrid pg = permute_grid(g, perm);
        std::vector<uint8_t> pmask(C * N);
        for (int c = 0; c < C; ++c)
            for (int n = 0; n < N; ++n) pmask[c * N + n] = mask[perm[c] * N + n];
        Tensor e = m.encode_grid(g, mask, ctx);
        Tensor pe = m.encode_grid(pg, pmask, ctx);
        Tensor expected = permute_tokens(e, C, N, perm);
        CHECK(testutil::max_abs_diff(pe.data(), expected.data()) == 0.0);
    }
    SUBCASE("mask shape mismatch throws") {
        std::vector<uint8_t> mask(C * N - 1, 0);
        CHECK_THROWS(m.encode_grid(g, mask, ctx));
    }
}

TEST_CASE("stcpe window coverage counts") {
    int N = 30, W = 7;
    // brute-force enumeration of covering windows per position
    for (int j = 0; j < N; ++j) {
        int count = 0;
        for (int s = 0; s + W <= N; ++s)
            if (j >= s && j < s + W) ++count;
        CHECK(count == coverage(j, N, W));
    }
    CHECK(coverage(0, N, W) == 1);
    for (int j = 6; j <= 23; ++j) CHECK(coverage(j, N, W) == 7);
}

TEST_CASE("stcpe sums one inner-block output per covering window") {
    // Constant-output inner block: attention contributes bo, the FFN
    // contributes its output bias, so window output = z + bo + ff2.b and the
    // pre-projection PE at j is coverage(j) * (z_j + bo + ff2.b).
    ModelConfig cfg = ModelConfig::tiny();
    cfg.stcpe_window = 3;
    DiverModel m = make_model(cfg, 21);
    zero_param(m.stcpe.inner.attn.wv);
    zero_param(m.stcpe.inner.attn.wo);
    zero_param(m.stcpe.inner.ff1.w);
    zero_param(m.stcpe.inner.ff1.b);
    zero_param(m.stcpe.inner.ff2.w);

    int C = 2, N = 8, D = cfg.dim, Dpe = cfg.stcpe_dim;
    Rng rng(4);
    Tensor x = testutil::random_tensor({C * N, D}, rng, false);
    ForwardCtx ctx;
    NoGradGuard ng;
    Tensor pe = m.stcpe_encoding(x, C, N, ctx);

    Tensor z = m.stcpe.down.forward(x);
    const auto& bo = m.stcpe.inner.attn.bo.data();
    const auto& b2 = m.stcpe.inner.ff2.b.data();
    std::vector<double> pre(static_cast<size_t>(C * N) * Dpe);
    for (int c = 0; c < C; ++c)
        for (int n = 0; n < N; ++n) {
            int cov = coverage(n, N, cfg.stcpe_window);
            for (int d = 0; d < Dpe; ++d) {
                size_t k = static_cast<size_t>(c * N + n) * Dpe + d;
                pre[k] = cov * (z.data()[k] + bo[d] + b2[d]);
            }
        }
    Tensor expected =
        m.stcpe.up.forward(Tensor::from_vector(std::move(pre), {C * N, Dpe}));
    CHECK(testutil::max_abs_diff(pe.data(), expected.data()) < 1e-9);
}

TEST_CASE("stcpe degenerate single window") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.stcpe_window = 7;  // N < W: one window spanning the whole grid
    DiverModel m = make_model(cfg, 33);
    Rng rng(6);
    int C = 1, N = 1;
    Tensor x = testutil::random_tensor({C * N, cfg.dim}, rng, false);
    ForwardCtx ctx;
    NoGradGuard ng;
    Tensor pe = m.stcpe_encoding(x, C, N, ctx);
    Tensor direct = m.stcpe.up.forward(m.block_forward(
        m.stcpe.down.forward(x), m.stcpe.inner, m.layout(1, 1), m.stcpe_opts(), ctx));
    CHECK(testutil::max_abs_diff(pe.data(), direct.data()) == 0.0);
    CHECK_THROWS(m.stcpe_encoding(x, 0, 0, ctx));
}

TEST_CASE("stcpe channel permutation equivariance") {
    DiverModel m = make_model(ModelConfig::tiny(), 44);
    Rng rng(13);
    int C = 5, N = 10;
    Tensor x = testutil::random_tensor({C * N, m.config().dim}, rng, false);
    ForwardCtx ctx;
    NoGradGuard ng;
    Tensor pe = m.stcpe_encoding(x, C, N, ctx);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<int> perm = rng.permutation(C);
        Tensor ppe = m.stcpe_encoding(permute_tokens(x, C, N, perm), C, N, ctx);
        Tensor expected = permute_tokens(pe, C, N, perm);
        CHECK(testutil::max_abs_diff(ppe.data(), expected.data()) < 1e-9);
    }
}

TEST_CASE("stcpe temporal translation equivariance at interior positions") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.stcpe_window = 7;
    DiverModel m = make_model(cfg, 55);
    Rng rng(17);
    int C = 3, N = 30, W = cfg.stcpe_window, D = cfg.dim;
    Tensor x = testutil::random_tensor({C * N, D}, rng, false);
    ForwardCtx ctx;
    NoGradGuard ng;
    Tensor pe = m.stcpe_encoding(x, C, N, ctx);
    for (int s : {1, 3, 7}) {
        int Ns = N - s;
        std::vector<int> rows;
        for (int c = 0; c < C; ++c)
            for (int n = 0; n < Ns; ++n) rows.push_back(c * N + n + s);
        Tensor xs = gather_rows(x, rows);
        Tensor pes = m.stcpe_encoding(xs, C, Ns, ctx);
        for (int c = 0; c < C; ++c)
            for (int j = W - 1; j <= N - s - W; ++j)
                for (int d = 0; d < D; ++d) {
                    double a = pes.data()[(c * Ns + j) * D + d];
                    double b = pe.data()[(c * N + j + s) * D + d];
                    CHECK(std::abs(a - b) < 1e-9);
                }
    }
}

TEST_CASE("apply_positional is plain addition and respects ablation") {
    ModelConfig cfg = ModelConfig::tiny();
    DiverModel zero_pe = make_model(cfg, 61, /*random_pe=*/false);
    Rng rng(8);
    int C = 2, N = 5;
    PatchGrid g = make_grid(C, N, cfg.patch_len, rng);
    std::vector<uint8_t> mask(C * N, 0);
    ForwardCtx ctx;
    NoGradGuard ng;
    Tensor x = zero_pe.encode_grid(g, mask, ctx);
    // zero-initialized up projection: PE == 0 so X^o == X
    Tensor pe = zero_pe.positional_encoding(x, C, N, ctx);
    for (double v : pe.data()) CHECK(v == 0.0);

    cfg.positional = Positional::none;
    DiverModel no_pe = make_model(cfg, 61);
    Tensor pe2 = no_pe.positional_encoding(x, C, N, ctx);
    for (double v : pe2.data()) CHECK(v == 0.0);

    // linearity: recomputing X + stcpe(X) matches the fused path
    DiverModel m = make_model(ModelConfig::tiny(), 61);
    m.blocks.clear();  // isolate encode + positional
    Tensor xo = m.forward_tokens(g, mask, ctx);
    Tensor x2 = m.encode_grid(g, mask, ctx);
    Tensor manual = add(x2, m.stcpe_encoding(x2, C, N, ctx));
    CHECK(testutil::max_abs_diff(xo.data(), manual.data()) == 0.0);
}

TEST_CASE("equal bias scalars collapse to the bias-free attention") {
    ModelConfig cfg = ModelConfig::tiny();
    DiverModel m = make_model(cfg, 71);
    Rng rng(5);
    int C = 3, N = 4;
    Tensor x = testutil::random_tensor({C * N, cfg.dim}, rng, false);
    ForwardCtx ctx;
    NoGradGuard ng;
    BlockLayerParams& b = m.blocks[0];
    auto& lay = m.layout(C, N);
    Tensor base = m.attention(x, b.attn, lay, m.main_opts(), ctx);
    std::fill(b.attn.u_same.mutable_data().begin(), b.attn.u_same.mutable_data().end(), 0.7);
    std::fill(b.attn.u_diff.mutable_data().begin(), b.attn.u_diff.mutable_data().end(), 0.7);
    Tensor shifted = m.attention(x, b.attn, lay, m.main_opts(), ctx);
    CHECK(testutil::max_abs_diff(base.data(), shifted.data()) < 1e-12);
}

TEST_CASE("rotary scores depend only on the temporal offset") {
    ModelConfig cfg = ModelConfig::tiny();
    DiverModel m = make_model(cfg, 81);
    Rng rng(19);
    int C = 1, N = 10, T = C * N;
    // identical content at every position isolates the offset dependence
    std::vector<double> row(cfg.dim);
    for (double& v : row) v = rng.normal(0.0, 1.0);
    std::vector<double> xs;
    for (int t = 0; t < T; ++t) xs.insert(xs.end(), row.begin(), row.end());
    Tensor x = Tensor::from_vector(std::move(xs), {T, cfg.dim});
    NoGradGuard ng;
    for (int h = 0; h < cfg.heads; ++h) {
        Tensor e = m.attention_scores(x, m.blocks[0].attn, m.layout(C, N),
                                      m.main_opts(), h);
        // (i, j) = (5, 2) vs (8, 5): same offset, same score
        CHECK(std::abs(e.data()[5 * T + 2] - e.data()[8 * T + 5]) < 1e-10);
        // zero offset: R_0 = I, so the diagonal equals the unrotated score
        AttnOpts plain = m.main_opts();
        plain.rope = false;
        Tensor e0 = m.attention_scores(x, m.blocks[0].attn, m.layout(C, N),
                                       plain, h);
        for (int i = 0; i < T; ++i)
            CHECK(std::abs(e.data()[i * T + i] - e0.data()[i * T + i]) < 1e-12);
    }
}

TEST_CASE("single token attention is the value path") {
    ModelConfig cfg = ModelConfig::tiny();
    DiverModel m = make_model(cfg, 91);
    Rng rng(23);
    Tensor x = testutil::random_tensor({1, cfg.dim}, rng, false);
    ForwardCtx ctx;
    NoGradGuard ng;
    const AttentionLayerParams& p = m.blocks[0].attn;
    Tensor out = m.attention(x, p, m.layout(1, 1), m.main_opts(), ctx);
    Tensor direct = add(matmul(matmul(x, p.wv), p.wo), p.bo);
    CHECK(testutil::max_abs_diff(out.data(), direct.data()) < 1e-12);
}

TEST_CASE("attention weights over the flattened key axis sum to 1") {
    ModelConfig cfg = ModelConfig::tiny();
    DiverModel m = make_model(cfg, 101);
    Rng rng(29);
    int C = 4, N = 6, T = C * N;
    Tensor x = testutil::random_tensor({T, cfg.dim}, rng, false);
    NoGradGuard ng;
    for (int h = 0; h < cfg.heads; ++h) {
        Tensor a = softmax_lastaxis(m.attention_scores(
            x, m.blocks[0].attn, m.layout(C, N), m.main_opts(), h));
        for (int i = 0; i < T; ++i) {
            double s = 0.0;
            for (int j = 0; j < T; ++j) s += a.data()[i * T + j];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("raising the same-channel bias raises same-channel mass") {
    ModelConfig cfg = ModelConfig::tiny();
    DiverModel m = make_model(cfg, 111);
    Rng rng(31);
    int C = 3, N = 5, T = C * N;
    Tensor x = testutil::random_tensor({T, cfg.dim}, rng, false);
    NoGradGuard ng;
    auto& lay = m.layout(C, N);
    double prev = -1.0;
    for (double u1 : {0.0, 0.5, 1.5}) {
        auto& us = m.blocks[0].attn.u_same.mutable_data();
        std::fill(us.begin(), us.end(), u1);
        Tensor a = softmax_lastaxis(
            m.attention_scores(x, m.blocks[0].attn, lay, m.main_opts(), 0));
        double mass = 0.0;
        for (int i = 0; i < T; ++i)
            for (int j = 0; j < T; ++j)
                if (i / N == j / N) mass += a.data()[i * T + j];
        CHECK(mass > prev);
        prev = mass;
    }
}

TEST_CASE("block and full stack channel permutation equivariance") {
    ModelConfig cfg = ModelConfig::tiny();
    DiverModel m = make_model(cfg, 121);
    Rng rng(37);
    ForwardCtx ctx;
    NoGradGuard ng;
    for (int C : {2, 5}) {
        int N = 8;
        Tensor x = testutil::random_tensor({C * N, cfg.dim}, rng, false);
        Tensor bout = m.block_forward(x, m.blocks[0], m.layout(C, N),
                                      m.main_opts(), ctx);
        Tensor full = m.encoder_forward(x, C, N, ctx);
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<int> perm = rng.permutation(C);
            Tensor px = permute_tokens(x, C, N, perm);
            Tensor pb = m.block_forward(px, m.blocks[0], m.layout(C, N),
                                        m.main_opts(), ctx);
            CHECK(testutil::max_abs_diff(
                      pb.data(), permute_tokens(bout, C, N, perm).data()) < 1e-9);
            Tensor pf = m.encoder_forward(px, C, N, ctx);
            CHECK(testutil::max_abs_diff(
                      pf.data(), permute_tokens(full, C, N, perm).data()) < 1e-8);
        }
    }
}

TEST_CASE("zero-depth encoder is the identity, eval is deterministic") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.blocks = 0;
    DiverModel m = make_model(cfg, 131);
    Rng rng(41);
    Tensor x = testutil::random_tensor({12, cfg.dim}, rng, false);
    ForwardCtx ctx;
    NoGradGuard ng;
    Tensor out = m.encoder_forward(x, 3, 4, ctx);
    CHECK(testutil::max_abs_diff(out.data(), x.data()) == 0.0);

    DiverModel deep = make_model(ModelConfig::tiny(), 131);
    PatchGrid g = make_grid(3, 4, ModelConfig::tiny().patch_len, rng);
    std::vector<uint8_t> mask(12, 0);
    Tensor a = deep.forward_tokens(g, mask, ctx);
    Tensor b = deep.forward_tokens(g, mask, ctx);
    CHECK(a.data() == b.data());
}

TEST_CASE("vanilla block with zero absolute embeddings matches stripped DIVER") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.block_kind = BlockKind::vanilla;
    DiverModel vanilla = make_model(cfg, 141);
    zero_param(vanilla.abs_embed);

    ModelConfig cfg2 = ModelConfig::tiny();
    cfg2.rope = false;
    cfg2.binary_bias = false;
    DiverModel stripped = make_model(cfg2, 141);  // same draws up to the blocks

    Rng rng(43);
    int C = 3, N = 4;
    Tensor x = testutil::random_tensor({C * N, cfg.dim}, rng, false);
    ForwardCtx ctx;
    NoGradGuard ng;
    Tensor a = vanilla.encoder_forward(x, C, N, ctx);
    Tensor b = stripped.encoder_forward(x, C, N, ctx);
    CHECK(testutil::max_abs_diff(a.data(), b.data()) == 0.0);
}

TEST_CASE("cbramod-style temporal heads never cross channels") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.block_kind = BlockKind::cbramod;
    DiverModel m = make_model(cfg, 151);
    Rng rng(47);
    int C = 3, N = 5, T = C * N;
    Tensor x = testutil::random_tensor({T, cfg.dim}, rng, false);
    NoGradGuard ng;
    // head 0 is a temporal head: weight is exactly 0 across channels
    Tensor a = softmax_lastaxis(m.attention_scores(
        x, m.blocks[0].attn, m.layout(C, N), m.main_opts(), 0));
    // last head is spatial: weight is exactly 0 across time steps
    Tensor s = softmax_lastaxis(m.attention_scores(
        x, m.blocks[0].attn, m.layout(C, N), m.main_opts(), cfg.heads - 1));
    for (int i = 0; i < T; ++i)
        for (int j = 0; j < T; ++j) {
            if (i / N != j / N) CHECK(a.data()[i * T + j] == 0.0);
            if (i % N != j % N) CHECK(s.data()[i * T + j] == 0.0);
        }

    // both variants keep the C*N x D shape
    ForwardCtx ctx;
    Tensor out = m.encoder_forward(x, C, N, ctx);
    CHECK(out.shape() == Shape{T, cfg.dim});
    ModelConfig vcfg = ModelConfig::tiny();
    vcfg.block_kind = BlockKind::vanilla;
    DiverModel vm = make_model(vcfg, 151);
    CHECK(vm.encoder_forward(x, C, N, ctx).shape() == Shape{T, cfg.dim});
}

TEST_CASE("acpe is a depthwise grid convolution and needs the fixed montage") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.positional = Positional::acpe;
    cfg.acpe_channels = 3;
    DiverModel m = make_model(cfg, 161);
    Rng rng(53);
    int C = 3, N = 6, D = cfg.dim;
    Tensor x = testutil::random_tensor({C * N, D}, rng, false);
    NoGradGuard ng;
    Tensor pe = m.acpe_encoding(x, C, N);
    // direct zero-padded convolution oracle
    int kc = cfg.acpe_kernel_c, kt = cfg.acpe_kernel_t;
    for (int c = 0; c < C; ++c)
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < D; ++d) {
                double acc = 0.0;
                for (int dc = 0; dc < kc; ++dc)
                    for (int dt = 0; dt < kt; ++dt) {
                        int cs = c + dc - kc / 2, ns = n + dt - kt / 2;
                        if (cs < 0 || cs >= C || ns < 0 || ns >= N) continue;
                        acc += x.data()[(cs * N + ns) * D + d] *
                               m.acpe.kernel.data()[(dc * kt + dt) * D + d];
                    }
                CHECK(std::abs(pe.data()[(c * N + n) * D + d] - acc) < 1e-12);
            }
    CHECK_THROWS(m.acpe_encoding(x, 2, 9));
}

TEST_CASE("finite differences validate one full block") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.blocks = 1;
    DiverModel m = make_model(cfg, 171);
    Rng rng(59);
    int C = 2, N = 3;
    Tensor x = testutil::random_tensor({C * N, cfg.dim}, rng, true, 0.5);
    ForwardCtx ctx;
    std::vector<Tensor> params = {x};
    for (auto& np : m.named_params())
        if (np.name.rfind("blocks.0", 0) == 0) params.push_back(np.tensor);
    auto loss = [&]() {
        Tensor out = m.block_forward(x, m.blocks[0], m.layout(C, N),
                                     m.main_opts(), ctx);
        return mean_all(mul(out, out));
    };
    CHECK(testutil::max_grad_rel_err(params, loss) < 1e-4);
}
