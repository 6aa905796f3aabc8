#pragma once

#include "padapt/backbone.hpp"
#include "padapt/config.hpp"
#include "padapt/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace padapt {

// Per-linear learnable scale (init 1) and bias (init 0) around a frozen weight.
struct LinearSB {
    Tensor scale, bias;
};

// All learnable additions on top of a frozen backbone: gated adaptation
// prompts in the last L layers, per-channel scale/bias on every linear,
// unfrozen norm copies, and the visual projection with per-layer visual gates.
struct AdapterState {
    AdapterConfig config;

    struct LayerAdaption {
        Tensor prompt;  // [prompt_len, d]
        Tensor gate;    // [n_heads], init 0
    };
    std::vector<LayerAdaption> prompts;  // size L, prompts[j] belongs to layer N-L+j

    struct LayerSB {
        LinearSB wq, wk, wv, wo, w_gate, w_up, w_down;
    };
    std::vector<LayerSB> sb;  // size N
    LinearSB head_sb;

    // learnable copies of the frozen norm weights
    std::vector<Tensor> attn_norm, ffn_norm;  // size N
    Tensor final_norm;

    Tensor vis_proj_w;  // [feat_dim, visual_len * d]
    Tensor vis_proj_b;  // [visual_len * d]
    std::vector<Tensor> visual_gates;  // size K, each [n_heads], init 0

    static AdapterState init(const BackboneWeights& backbone, const AdapterConfig& cfg,
                             uint64_t seed);

    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    uint64_t content_hash() const;
    int64_t num_layers() const { return static_cast<int64_t>(sb.size()); }
};

// y = s ⊙ (xW + b). Gradients reach s and b; W stays frozen.
Tensor scaled_linear_forward(Tape& g, const Tensor& x, const Tensor& w, const Tensor& s,
                             const Tensor& b);

// Attention sublayer over pre-normed word states x with a gated prompt prefix:
// per head, prefix and word attention weights are softmaxed separately and the
// prefix side is scaled by the head's gate. At gate = 0 this is exactly plain
// causal attention. Plain (unscaled) linears; the adapted forward uses the
// scale/bias variant internally.
Tensor zero_init_prefix_attention(Tape& g, const BackboneConfig& cfg,
                                  const BackboneWeights::Layer& layer, const Tensor& x,
                                  const Tensor& prompt, const Tensor& gate);

// Projects one visual feature vector into visual_len token embeddings [V, d].
Tensor project_visual(Tape& g, const Tensor& features, const AdapterState& adapter,
                      int64_t d_model);

// Fully adapted forward pass. visual_features may be null (language-only).
Tensor forward_adapted(Tape& g, const BackboneWeights& backbone, const AdapterState& adapter,
                       std::span<const int> tokens, const Tensor* visual_features);

// Predecessor-style multimodal pass: no early fusion; the projected global
// visual vector is added to every adaptation prompt row instead.
Tensor forward_v1_style(Tape& g, const BackboneWeights& backbone, const AdapterState& adapter,
                        std::span<const int> tokens, const Tensor* visual_features);

struct TunableBreakdown {
    int64_t prompts = 0;
    int64_t gates = 0;
    int64_t scale = 0;
    int64_t bias = 0;
    int64_t norms = 0;
    int64_t visual_projection = 0;
    int64_t total = 0;
    int64_t backbone_total = 0;
    double fraction_of_backbone = 0.0;
    int64_t bias_tuning_subtotal() const { return scale + bias + norms; }
};

TunableBreakdown count_tunable(const BackboneConfig& bb, const AdapterConfig& ad);

}  // namespace padapt
