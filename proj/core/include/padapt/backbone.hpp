#pragma once

#include "padapt/config.hpp"
#include "padapt/tensor.hpp"

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace padapt {

// Frozen decoder-only transformer: rotary attention, RMS norm, SiLU-gated FFN,
// untied output head, no bias terms anywhere.
struct BackboneWeights {
    BackboneConfig config;
    Tensor tok_embedding;  // [vocab, d]
    struct Layer {
        Tensor wq, wk, wv, wo;        // [d, d]
        Tensor w_gate, w_up;          // [d, ffn]
        Tensor w_down;                // [ffn, d]
        Tensor attn_norm, ffn_norm;   // [d]
    };
    std::vector<Layer> layers;
    Tensor final_norm;  // [d]
    Tensor head;        // [d, vocab]

    static BackboneWeights init(const BackboneConfig& cfg, uint64_t seed);

    void freeze();
    bool frozen() const;

    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    uint64_t content_hash() const;
};

// [seq, seq] additive mask: 0 on/below the diagonal, -1e9 above.
Tensor causal_mask(int64_t seq);

// Unadapted forward pass: logits [seq, vocab].
Tensor forward_base(Tape& tape, const BackboneWeights& w, std::span<const int> tokens);

struct PretrainReport {
    std::vector<float> losses;
    float heldout_initial = 0.0f;
    float heldout_final = 0.0f;
};

// Next-token training on newline-or-blank-line separated passages. Weights are
// frozen before being returned.
BackboneWeights pretrain_backbone(const BackboneConfig& cfg, const std::string& corpus,
                                  int64_t steps, uint64_t seed, const TrainConfig& hp,
                                  PretrainReport* report = nullptr);

enum class SampleMode { greedy, temperature, top_k };

struct SampleConfig {
    SampleMode mode = SampleMode::greedy;
    float temperature = 1.0f;
    int top_k = 0;
    uint64_t seed = 0;
};

// Forward closure: tokens -> logits [len(tokens), vocab].
using ForwardFn = std::function<Tensor(Tape&, std::span<const int>)>;

// Appends up to max_new tokens; stops at EOS. Returns only the new tokens.
std::vector<int> generate(const ForwardFn& forward, std::vector<int> prompt, int max_new,
                          const SampleConfig& sample, int64_t max_seq_len);

uint64_t hash_tensors(const std::vector<std::pair<std::string, Tensor>>& named);

}  // namespace padapt
