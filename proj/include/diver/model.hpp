// DIVER architecture: patch encoder (CNN + spectral pathway), sliding
// temporal conditional positional encoding, and the unified spatio-temporal
// attention encoder with rotary temporal embedding and per-head binary
// channel-identity biases.

#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "diver/optim.hpp"
#include "diver/preprocess.hpp"
#include "diver/random.hpp"
#include "diver/tensor.hpp"

namespace diver {

enum class Positional { stcpe, acpe, none };
enum class BlockKind { diver, vanilla, cbramod };

struct ModelConfig {
    int patch_len = kPatchSamples;  // P
    int dim = 200;                  // D
    int heads = 10;                 // H
    int blocks = 12;
    int ffn_dim = 800;
    double dropout = 0.1;
    double rope_base = 10000.0;

    // Patch encoder. cnn_encoding=false swaps the conv stack for a single
    // learned P->D projection; spectral=false drops the DFT addend.
    bool cnn_encoding = true;
    bool spectral = true;
    std::vector<int> cnn_channels = {25, 50, 50};

    Positional positional = Positional::stcpe;
    int stcpe_window = 7;  // W, patches (1 s each)
    int stcpe_dim = 40;    // D_pe
    int stcpe_heads = 2;
    int stcpe_ffn = 160;

    BlockKind block_kind = BlockKind::diver;
    bool rope = true;
    bool binary_bias = true;

    // ACPE baseline: fixed channel count, asymmetric (channel x time) kernel.
    int acpe_channels = 19;
    int acpe_kernel_c = 3;
    int acpe_kernel_t = 7;

    // Vanilla-block ablation: learned absolute embedding per (channel, time)
    // slot, which deliberately breaks channel permutation equivariance.
    int abs_max_channels = 19;
    int abs_max_patches = 30;

    int num_classes = 0;  // 0 = no classification head

    int head_dim() const { return dim / heads; }
    void validate() const;

    // Compact configuration for fast smoke-scale training.
    static ModelConfig smoke(int num_classes = 0);
    // Tiny configuration used by exhaustive gradient checks.
    static ModelConfig tiny(int num_classes = 0);
};

struct LinearLayer {
    Tensor w, b;
    Tensor forward(const Tensor& x) const { return add(matmul(x, w), b); }
};

struct LayerNormLayer {
    Tensor gain, bias;
    Tensor forward(const Tensor& x) const { return layernorm(x, gain, bias); }
};

struct AttentionLayerParams {
    Tensor wq, wk, wv;      // D×D, all heads packed
    Tensor wo, bo;          // D×D, D
    Tensor u_same, u_diff;  // per-head scalars, shape {1, H}
};

// Per-call attention settings (the STCPE inner block differs from the main
// stack in width and head count, and always runs the full DIVER wiring).
struct AttnOpts {
    int heads = 1;
    bool rope = true;
    bool binary_bias = true;
    BlockKind kind = BlockKind::diver;
    double rope_base = 10000.0;
    double dropout = 0.0;
};

struct BlockLayerParams {
    AttentionLayerParams attn;
    LayerNormLayer ln1, ln2;
    LinearLayer ff1, ff2;
};

struct ConvStage {
    Tensor w, b;  // Cout×Cin×K, Cout
    LayerNormLayer ln;
    int stride = 2, pad = 3;
};

struct PatchEncoderLayerParams {
    std::vector<ConvStage> convs;  // empty when cnn_encoding == false
    LinearLayer proj;              // flattened conv output (or raw patch) -> D
    Tensor mask_token;             // {D}
};

struct StcpeLayerParams {
    LinearLayer down;  // D -> D_pe
    BlockLayerParams inner;
    LinearLayer up;    // D_pe -> D, zero-initialized for training
};

struct AcpeLayerParams {
    Tensor kernel;  // {kc*kt, D}, depthwise over the (channel, time) grid
};

// Constant per-(C,N) structures shared by all attention calls.
struct TokenLayout {
    int C = 0, N = 0;
    std::vector<double> times;  // patch index per token, token id = c*N + n
    Tensor same_mask;           // T×T, 1 where channels match
    Tensor diff_mask;           // complement
    Tensor temporal_forbid;     // -1e30 where channels differ (cbramod heads)
    Tensor spatial_forbid;      // -1e30 where times differ
};

struct ForwardCtx {
    Rng* rng = nullptr;
    bool training = false;
};

class DiverModel {
public:
    explicit DiverModel(ModelConfig cfg);

    // random_pe=true also randomizes the STCPE up-projection (the training
    // default starts it at zero, which would make PE trivially zero).
    void init(Rng& rng, bool random_pe = false);

    std::vector<NamedParam> named_params() const;

    const ModelConfig& config() const { return cfg_; }

    // Embed rows of raw patches (R×P -> R×D), CNN + optional spectral addend.
    Tensor encode_patches(const Tensor& raw);
    // Patch embedding with mask-token substitution; tokens ordered c*N+n.
    Tensor encode_grid(const PatchGrid& grid, const std::vector<uint8_t>& mask,
                       ForwardCtx& ctx);

    // Positional encoding of X (zero tensor when positional == none).
    Tensor positional_encoding(const Tensor& x, int C, int N, ForwardCtx& ctx);
    Tensor stcpe_encoding(const Tensor& x, int C, int N, ForwardCtx& ctx);
    Tensor acpe_encoding(const Tensor& x, int C, int N);

    // 12-block (configurable) encoder over X^o.
    Tensor encoder_forward(const Tensor& xo, int C, int N, ForwardCtx& ctx);

    // Full path: encode -> X + PE -> encoder. Returns final token states T×D.
    Tensor forward_tokens(const PatchGrid& grid,
                          const std::vector<uint8_t>& mask, ForwardCtx& ctx);

    // Reconstruction head applied to selected token rows.
    Tensor reconstruct(const Tensor& tokens);

    // Mean-pool over tokens then linear head; requires num_classes > 0.
    Tensor logits(const Tensor& tokens);

    // One attention sub-layer (exposed for invariant tests).
    Tensor attention(const Tensor& x, const AttentionLayerParams& p,
                     const TokenLayout& layout, const AttnOpts& opts,
                     ForwardCtx& ctx);
    // Raw pre-softmax score matrix of one head (invariant tests).
    Tensor attention_scores(const Tensor& x, const AttentionLayerParams& p,
                            const TokenLayout& layout, const AttnOpts& opts,
                            int head);
    Tensor block_forward(const Tensor& x, const BlockLayerParams& block,
                         const TokenLayout& layout, const AttnOpts& opts,
                         ForwardCtx& ctx);

    // Options matching the main encoder stack / the STCPE inner block.
    AttnOpts main_opts() const;
    AttnOpts stcpe_opts() const;

    const TokenLayout& layout(int C, int N);

    PatchEncoderLayerParams patch_enc;
    StcpeLayerParams stcpe;
    AcpeLayerParams acpe;
    Tensor abs_embed;  // vanilla-block ablation only
    std::vector<BlockLayerParams> blocks;
    LinearLayer recon_head;
    LinearLayer cls_head;

private:
    Tensor cnn_rows(const Tensor& raw);  // conv stack or linear map, R×P -> R×D
    ModelConfig cfg_;
    std::map<std::pair<int, int>, TokenLayout> layouts_;
};

// Reusable init helpers.
Tensor init_linear_weight(int in, int out, Rng& rng);
Tensor init_uniform(const Shape& shape, double bound, Rng& rng);

}  // namespace diver
