#include "diver/model.hpp"

#include <cmath>
#include <stdexcept>

namespace diver {

namespace {

constexpr int kConvKernel = 7;
constexpr int kConvStride = 2;
constexpr int kConvPad = 3;
constexpr double kForbid = -1e30;

int conv_out_len(int len) {
    return (len + 2 * kConvPad - kConvKernel) / kConvStride + 1;
}

LinearLayer make_linear(int in, int out, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    LinearLayer l;
    l.w = init_uniform({in, out}, bound, rng);
    l.b = init_uniform({out}, bound, rng);
    return l;
}

LinearLayer make_zero_linear(int in, int out) {
    LinearLayer l;
    l.w = Tensor::zeros({in, out}, true);
    l.b = Tensor::zeros({out}, true);
    return l;
}

LayerNormLayer make_layernorm(int d) {
    LayerNormLayer l;
    l.gain = Tensor::full({d}, 1.0, true);
    l.bias = Tensor::zeros({d}, true);
    return l;
}

BlockLayerParams make_block(int dim, int heads, int ffn, Rng& rng) {
    BlockLayerParams b;
    double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    b.attn.wq = init_uniform({dim, dim}, bound, rng);
    b.attn.wk = init_uniform({dim, dim}, bound, rng);
    b.attn.wv = init_uniform({dim, dim}, bound, rng);
    b.attn.wo = init_uniform({dim, dim}, bound, rng);
    b.attn.bo = Tensor::zeros({dim}, true);
    b.attn.u_same = Tensor::zeros({1, heads}, true);
    b.attn.u_diff = Tensor::zeros({1, heads}, true);
    b.ln1 = make_layernorm(dim);
    b.ln2 = make_layernorm(dim);
    b.ff1 = make_linear(dim, ffn, rng);
    b.ff2 = make_linear(ffn, dim, rng);
    return b;
}

void push_linear(std::vector<NamedParam>& out, const std::string& prefix,
                 const LinearLayer& l) {
    out.push_back({prefix + ".w", l.w});
    out.push_back({prefix + ".b", l.b});
}

void push_layernorm(std::vector<NamedParam>& out, const std::string& prefix,
                    const LayerNormLayer& l) {
    out.push_back({prefix + ".gain", l.gain});
    out.push_back({prefix + ".bias", l.bias});
}

void push_block(std::vector<NamedParam>& out, const std::string& prefix,
                const BlockLayerParams& b) {
    out.push_back({prefix + ".attn.wq", b.attn.wq});
    out.push_back({prefix + ".attn.wk", b.attn.wk});
    out.push_back({prefix + ".attn.wv", b.attn.wv});
    out.push_back({prefix + ".attn.wo", b.attn.wo});
    out.push_back({prefix + ".attn.bo", b.attn.bo});
    out.push_back({prefix + ".attn.u_same", b.attn.u_same});
    out.push_back({prefix + ".attn.u_diff", b.attn.u_diff});
    push_layernorm(out, prefix + ".ln1", b.ln1);
    push_layernorm(out, prefix + ".ln2", b.ln2);
    push_linear(out, prefix + ".ff1", b.ff1);
    push_linear(out, prefix + ".ff2", b.ff2);
}

}  // namespace

Tensor init_uniform(const Shape& shape, double bound, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from_vector(std::move(v), shape, true);
}

Tensor init_linear_weight(int in, int out, Rng& rng) {
    return init_uniform({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

void ModelConfig::validate() const {
    if (patch_len <= 0) throw std::invalid_argument("patch_len must be positive");
    if (dim <= 0 || heads <= 0 || dim % heads != 0)
        throw std::invalid_argument("dim must be a positive multiple of heads");
    if (rope && head_dim() % 2 != 0)
        throw std::invalid_argument("rotary embedding needs an even head dim");
    if (blocks < 0 || ffn_dim <= 0)
        throw std::invalid_argument("bad encoder depth or ffn width");
    if (dropout < 0.0 || dropout >= 1.0)
        throw std::invalid_argument("dropout must be in [0, 1)");
    if (cnn_encoding && cnn_channels.empty())
        throw std::invalid_argument("cnn_channels must be non-empty");
    if (positional == Positional::stcpe) {
        if (stcpe_window < 1) throw std::invalid_argument("stcpe_window >= 1");
        if (stcpe_dim <= 0 || stcpe_dim >= dim)
            throw std::invalid_argument("stcpe_dim must lie in (0, dim)");
        if (stcpe_heads <= 0 || stcpe_dim % stcpe_heads != 0 ||
            (stcpe_dim / stcpe_heads) % 2 != 0)
            throw std::invalid_argument("stcpe head dim must be even");
        if (stcpe_ffn <= 0) throw std::invalid_argument("stcpe_ffn > 0");
    }
    if (positional == Positional::acpe) {
        if (acpe_channels <= 0 || acpe_kernel_c <= 0 || acpe_kernel_t <= 0 ||
            acpe_kernel_c % 2 == 0 || acpe_kernel_t % 2 == 0)
            throw std::invalid_argument("acpe kernel extents must be odd");
    }
    if (block_kind == BlockKind::cbramod && heads % 2 != 0)
        throw std::invalid_argument("cbramod-style split needs even head count");
    if (block_kind == BlockKind::vanilla &&
        (abs_max_channels <= 0 || abs_max_patches <= 0))
        throw std::invalid_argument("absolute embedding table must be non-empty");
    if (num_classes < 0) throw std::invalid_argument("num_classes >= 0");
}

ModelConfig ModelConfig::smoke(int num_classes) {
    ModelConfig c;
    c.dim = 16;
    c.heads = 2;
    c.blocks = 1;
    c.ffn_dim = 32;
    c.dropout = 0.0;
    c.cnn_channels = {2, 4};
    c.stcpe_dim = 8;
    c.stcpe_heads = 2;
    c.stcpe_ffn = 16;
    c.num_classes = num_classes;
    return c;
}

ModelConfig ModelConfig::tiny(int num_classes) {
    ModelConfig c;
    c.patch_len = 16;
    c.dim = 20;
    c.heads = 2;
    c.blocks = 2;
    c.ffn_dim = 40;
    c.dropout = 0.0;
    c.cnn_channels = {2, 3};
    c.stcpe_window = 3;
    c.stcpe_dim = 8;
    c.stcpe_heads = 2;
    c.stcpe_ffn = 16;
    c.num_classes = num_classes;
    return c;
}

DiverModel::DiverModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
}

void DiverModel::init(Rng& rng, bool random_pe) {
    int flat = cfg_.patch_len;
    if (cfg_.cnn_encoding) {
        patch_enc.convs.clear();
        int in_ch = 1;
        int len = cfg_.patch_len;
        for (int out_ch : cfg_.cnn_channels) {
            ConvStage st;
            st.stride = kConvStride;
            st.pad = kConvPad;
            double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * kConvKernel));
            st.w = init_uniform({out_ch, in_ch, kConvKernel}, bound, rng);
            st.b = init_uniform({out_ch}, bound, rng);
            len = conv_out_len(len);
            if (len <= 0) throw std::invalid_argument("patch too short for conv stack");
            st.ln = make_layernorm(len);
            patch_enc.convs.push_back(std::move(st));
            in_ch = out_ch;
        }
        flat = in_ch * len;
    }
    patch_enc.proj = make_linear(flat, cfg_.dim, rng);
    {
        std::vector<double> v(cfg_.dim);
        for (double& x : v) x = rng.normal(0.0, 0.02);
        patch_enc.mask_token = Tensor::from_vector(std::move(v), {1, cfg_.dim}, true);
    }

    blocks.clear();
    for (int i = 0; i < cfg_.blocks; ++i)
        blocks.push_back(make_block(cfg_.dim, cfg_.heads, cfg_.ffn_dim, rng));

    if (cfg_.positional == Positional::stcpe) {
        stcpe.down = make_linear(cfg_.dim, cfg_.stcpe_dim, rng);
        stcpe.inner =
            make_block(cfg_.stcpe_dim, cfg_.stcpe_heads, cfg_.stcpe_ffn, rng);
        // Zero init keeps PE = 0 at the start of training; verification
        // harnesses randomize it so equivariance is exercised on nonzero PE.
        stcpe.up = random_pe ? make_linear(cfg_.stcpe_dim, cfg_.dim, rng)
                             : make_zero_linear(cfg_.stcpe_dim, cfg_.dim);
    }
    if (cfg_.positional == Positional::acpe) {
        int taps = cfg_.acpe_kernel_c * cfg_.acpe_kernel_t;
        acpe.kernel = init_uniform({taps, cfg_.dim},
                                   1.0 / std::sqrt(static_cast<double>(taps)), rng);
    }
    if (cfg_.block_kind == BlockKind::vanilla) {
        int slots = cfg_.abs_max_channels * cfg_.abs_max_patches;
        std::vector<double> v(static_cast<size_t>(slots) * cfg_.dim);
        for (double& x : v) x = rng.normal(0.0, 0.02);
        abs_embed = Tensor::from_vector(std::move(v), {slots, cfg_.dim}, true);
    }

    recon_head = make_linear(cfg_.dim, cfg_.patch_len, rng);
    if (cfg_.num_classes > 0)
        cls_head = make_linear(cfg_.dim, cfg_.num_classes, rng);
}

std::vector<NamedParam> DiverModel::named_params() const {
    std::vector<NamedParam> out;
    for (size_t i = 0; i < patch_enc.convs.size(); ++i) {
        std::string p = "patch_enc.conv" + std::to_string(i);
        out.push_back({p + ".w", patch_enc.convs[i].w});
        out.push_back({p + ".b", patch_enc.convs[i].b});
        push_layernorm(out, p + ".ln", patch_enc.convs[i].ln);
    }
    push_linear(out, "patch_enc.proj", patch_enc.proj);
    out.push_back({"patch_enc.mask_token", patch_enc.mask_token});
    for (size_t i = 0; i < blocks.size(); ++i)
        push_block(out, "blocks." + std::to_string(i), blocks[i]);
    if (cfg_.positional == Positional::stcpe) {
        push_linear(out, "stcpe.down", stcpe.down);
        push_block(out, "stcpe.inner", stcpe.inner);
        push_linear(out, "stcpe.up", stcpe.up);
    }
    if (cfg_.positional == Positional::acpe)
        out.push_back({"acpe.kernel", acpe.kernel});
    if (cfg_.block_kind == BlockKind::vanilla)
        out.push_back({"abs_embed", abs_embed});
    push_linear(out, "recon_head", recon_head);
    if (cfg_.num_classes > 0) push_linear(out, "cls_head", cls_head);
    return out;
}

const TokenLayout& DiverModel::layout(int C, int N) {
    auto key = std::make_pair(C, N);
    auto it = layouts_.find(key);
    if (it != layouts_.end()) return it->second;

    TokenLayout lay;
    lay.C = C;
    lay.N = N;
    int T = C * N;
    lay.times.resize(T);
    for (int c = 0; c < C; ++c)
        for (int n = 0; n < N; ++n) lay.times[c * N + n] = n;

    std::vector<double> same(static_cast<size_t>(T) * T);
    std::vector<double> diff(same.size());
    std::vector<double> tf(same.size());
    std::vector<double> sf(same.size());
    for (int i = 0; i < T; ++i) {
        int ci = i / N, ni = i % N;
        for (int j = 0; j < T; ++j) {
            int cj = j / N, nj = j % N;
            size_t k = static_cast<size_t>(i) * T + j;
            bool sc = ci == cj;
            same[k] = sc ? 1.0 : 0.0;
            diff[k] = sc ? 0.0 : 1.0;
            tf[k] = sc ? 0.0 : kForbid;
            sf[k] = (ni == nj) ? 0.0 : kForbid;
        }
    }
    lay.same_mask = Tensor::from_vector(std::move(same), {T, T});
    lay.diff_mask = Tensor::from_vector(std::move(diff), {T, T});
    lay.temporal_forbid = Tensor::from_vector(std::move(tf), {T, T});
    lay.spatial_forbid = Tensor::from_vector(std::move(sf), {T, T});
    return layouts_.emplace(key, std::move(lay)).first->second;
}

AttnOpts DiverModel::main_opts() const {
    AttnOpts o;
    o.heads = cfg_.heads;
    o.kind = cfg_.block_kind;
    // The vanilla variant drops both the rotary transform and the channel
    // bias regardless of the individual toggles.
    o.rope = cfg_.rope && cfg_.block_kind != BlockKind::vanilla;
    o.binary_bias = cfg_.binary_bias && cfg_.block_kind != BlockKind::vanilla;
    o.rope_base = cfg_.rope_base;
    o.dropout = cfg_.dropout;
    return o;
}

AttnOpts DiverModel::stcpe_opts() const {
    AttnOpts o;
    o.heads = cfg_.stcpe_heads;
    o.kind = BlockKind::diver;
    o.rope = true;
    o.binary_bias = true;
    o.rope_base = cfg_.rope_base;
    o.dropout = cfg_.dropout;
    return o;
}

Tensor DiverModel::cnn_rows(const Tensor& raw) {
    if (!cfg_.cnn_encoding) return patch_enc.proj.forward(raw);
    int rows = raw.extent(0);
    std::vector<Tensor> out;
    out.reserve(rows);
    for (int r = 0; r < rows; ++r) {
        Tensor x = gather_rows(raw, {r});  // 1 x P, one input channel
        for (const ConvStage& st : patch_enc.convs) {
            x = conv1d(x, st.w, st.b, st.stride, st.pad);
            x = gelu(st.ln.forward(x));
        }
        Tensor flat = reshape(x, {1, static_cast<int>(x.size())});
        out.push_back(patch_enc.proj.forward(flat));
    }
    return out.size() == 1 ? out[0] : concat_rows(out);
}

Tensor DiverModel::encode_patches(const Tensor& raw) {
    if (raw.rank() != 2 || raw.extent(1) != cfg_.patch_len)
        throw std::invalid_argument("encode_patches: rows must have patch_len samples");
    Tensor e = cnn_rows(raw);
    if (cfg_.spectral) e = add(e, dft_magnitude(e));
    return e;
}

Tensor DiverModel::encode_grid(const PatchGrid& grid,
                               const std::vector<uint8_t>& mask, ForwardCtx&) {
    int C = grid.channels, N = grid.patches_per_channel;
    int T = C * N;
    if (grid.patch_len != cfg_.patch_len)
        throw std::invalid_argument("grid patch length does not match model");
    if (static_cast<int>(mask.size()) != T)
        throw std::invalid_argument("mask size does not match grid");

    Tensor raw = Tensor::from_vector(grid.data, {T, cfg_.patch_len});
    std::vector<int> kept, masked;
    for (int i = 0; i < T; ++i) (mask[i] ? masked : kept).push_back(i);

    Tensor result;
    if (!kept.empty()) {
        Tensor enc = encode_patches(gather_rows(raw, kept));
        result = (kept.size() == static_cast<size_t>(T))
                     ? enc
                     : scatter_rows(enc, kept, T);
    }
    if (!masked.empty()) {
        Tensor ones = Tensor::full({static_cast<int>(masked.size()), 1}, 1.0);
        Tensor mt = matmul(ones, patch_enc.mask_token);
        Tensor sc = (masked.size() == static_cast<size_t>(T))
                        ? mt
                        : scatter_rows(mt, masked, T);
        result = result.defined() ? add(result, sc) : sc;
    }
    return result;
}

Tensor DiverModel::attention_scores(const Tensor& x, const AttentionLayerParams& p,
                                    const TokenLayout& lay, const AttnOpts& opts,
                                    int head) {
    int dh = x.extent(1) / opts.heads;
    Tensor qh = slice_cols(matmul(x, p.wq), head * dh, dh);
    Tensor kh = slice_cols(matmul(x, p.wk), head * dh, dh);
    if (opts.rope) {
        qh = rope_rotate(qh, lay.times, opts.rope_base);
        kh = rope_rotate(kh, lay.times, opts.rope_base);
    }
    Tensor scores = matmul_scaled(qh, transpose2d(kh), 1.0 / std::sqrt(dh));
    if (opts.binary_bias) {
        // u_s*same + u_d*(1-same), fused
        scores = mask_bias(scores, lay.same_mask, slice_cols(p.u_same, head, 1),
                           slice_cols(p.u_diff, head, 1));
    }
    if (opts.kind == BlockKind::cbramod)
        scores = add(scores, head < opts.heads / 2 ? lay.temporal_forbid
                                                   : lay.spatial_forbid);
    return scores;
}

Tensor DiverModel::attention(const Tensor& x, const AttentionLayerParams& p,
                             const TokenLayout& lay, const AttnOpts& opts,
                             ForwardCtx& ctx) {
    int D = x.extent(1);
    int dh = D / opts.heads;
    Tensor q = matmul(x, p.wq);
    Tensor k = matmul(x, p.wk);
    Tensor v = matmul(x, p.wv);
    double inv = 1.0 / std::sqrt(dh);
    bool drop = ctx.training && opts.dropout > 0.0 && ctx.rng != nullptr;

    std::vector<Tensor> heads_out;
    heads_out.reserve(opts.heads);
    for (int h = 0; h < opts.heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        if (opts.rope) {
            qh = rope_rotate(qh, lay.times, opts.rope_base);
            kh = rope_rotate(kh, lay.times, opts.rope_base);
        }
        Tensor scores = matmul_scaled(qh, transpose2d(kh), inv);
        if (opts.binary_bias) {
            scores = mask_bias(scores, lay.same_mask,
                               slice_cols(p.u_same, h, 1),
                               slice_cols(p.u_diff, h, 1));
        }
        if (opts.kind == BlockKind::cbramod)
            scores = add(scores, h < opts.heads / 2 ? lay.temporal_forbid
                                                    : lay.spatial_forbid);
        Tensor a = softmax_lastaxis(scores);
        if (drop) a = dropout(a, opts.dropout, *ctx.rng, true);
        heads_out.push_back(matmul(a, vh));
    }
    Tensor cat = opts.heads == 1 ? heads_out[0] : concat_cols(heads_out);
    return add(matmul(cat, p.wo), p.bo);
}

Tensor DiverModel::block_forward(const Tensor& x, const BlockLayerParams& b,
                                 const TokenLayout& lay, const AttnOpts& opts,
                                 ForwardCtx& ctx) {
    Tensor h = add(x, attention(b.ln1.forward(x), b.attn, lay, opts, ctx));
    Tensor f = b.ff2.forward(gelu(b.ff1.forward(b.ln2.forward(h))));
    if (ctx.training && opts.dropout > 0.0 && ctx.rng != nullptr)
        f = dropout(f, opts.dropout, *ctx.rng, true);
    return add(h, f);
}

Tensor DiverModel::stcpe_encoding(const Tensor& x, int C, int N, ForwardCtx& ctx) {
    if (C < 1 || N < 1) throw std::invalid_argument("stcpe: empty grid");
    Tensor z = stcpe.down.forward(x);
    int wl = std::min(cfg_.stcpe_window, N);
    const TokenLayout& wlay = layout(C, wl);  // window-relative time indices
    AttnOpts opts = stcpe_opts();
    int T = C * N;

    Tensor accum;
    for (int s = 0; s + wl <= N; ++s) {
        std::vector<int> idx;
        idx.reserve(static_cast<size_t>(C) * wl);
        for (int c = 0; c < C; ++c)
            for (int t = 0; t < wl; ++t) idx.push_back(c * N + s + t);
        Tensor out = block_forward(gather_rows(z, idx), stcpe.inner, wlay, opts, ctx);
        Tensor sc = (wl == N) ? out : scatter_rows(out, idx, T);
        accum = accum.defined() ? add(accum, sc) : sc;
    }
    return stcpe.up.forward(accum);
}

Tensor DiverModel::acpe_encoding(const Tensor& x, int C, int N) {
    if (C != cfg_.acpe_channels)
        throw std::invalid_argument("acpe is fixed to " +
                                    std::to_string(cfg_.acpe_channels) + " channels");
    int T = C * N;
    int kc = cfg_.acpe_kernel_c, kt = cfg_.acpe_kernel_t;
    Tensor accum;
    for (int dc = 0; dc < kc; ++dc) {
        for (int dt = 0; dt < kt; ++dt) {
            std::vector<int> src, dst;
            for (int c = 0; c < C; ++c) {
                int cs = c + dc - kc / 2;
                if (cs < 0 || cs >= C) continue;
                for (int n = 0; n < N; ++n) {
                    int ns = n + dt - kt / 2;
                    if (ns < 0 || ns >= N) continue;
                    dst.push_back(c * N + n);
                    src.push_back(cs * N + ns);
                }
            }
            if (src.empty()) continue;
            Tensor shifted = scatter_rows(gather_rows(x, src), dst, T);
            Tensor krow = reshape(gather_rows(acpe.kernel, {dc * kt + dt}),
                                  {cfg_.dim});
            Tensor term = mul(shifted, krow);
            accum = accum.defined() ? add(accum, term) : term;
        }
    }
    return accum;
}

Tensor DiverModel::positional_encoding(const Tensor& x, int C, int N,
                                       ForwardCtx& ctx) {
    switch (cfg_.positional) {
        case Positional::stcpe:
            return stcpe_encoding(x, C, N, ctx);
        case Positional::acpe:
            return acpe_encoding(x, C, N);
        case Positional::none:
            return Tensor::zeros(x.shape());
    }
    throw std::logic_error("unreachable");
}

Tensor DiverModel::encoder_forward(const Tensor& xo, int C, int N,
                                   ForwardCtx& ctx) {
    Tensor h = xo;
    if (cfg_.block_kind == BlockKind::vanilla) {
        if (C > cfg_.abs_max_channels || N > cfg_.abs_max_patches)
            throw std::invalid_argument("grid exceeds absolute embedding table");
        std::vector<int> idx;
        idx.reserve(static_cast<size_t>(C) * N);
        for (int c = 0; c < C; ++c)
            for (int n = 0; n < N; ++n) idx.push_back(c * cfg_.abs_max_patches + n);
        h = add(h, gather_rows(abs_embed, idx));
    }
    const TokenLayout& lay = layout(C, N);
    AttnOpts opts = main_opts();
    for (const BlockLayerParams& b : blocks)
        h = block_forward(h, b, lay, opts, ctx);
    return h;
}

Tensor DiverModel::forward_tokens(const PatchGrid& grid,
                                  const std::vector<uint8_t>& mask,
                                  ForwardCtx& ctx) {
    int C = grid.channels, N = grid.patches_per_channel;
    Tensor x = encode_grid(grid, mask, ctx);
    if (cfg_.positional != Positional::none)
        x = add(x, positional_encoding(x, C, N, ctx));
    return encoder_forward(x, C, N, ctx);
}

Tensor DiverModel::reconstruct(const Tensor& tokens) {
    return recon_head.forward(tokens);
}

Tensor DiverModel::logits(const Tensor& tokens) {
    if (cfg_.num_classes <= 0)
        throw std::logic_error("model has no classification head");
    Tensor pooled = reshape(mean_rows(tokens), {1, cfg_.dim});
    return cls_head.forward(pooled);
}

}  // namespace diver
