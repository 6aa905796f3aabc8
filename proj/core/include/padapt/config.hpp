#pragma once

#include <cstdint>
#include <string>

namespace padapt {

struct BackboneConfig {
    int64_t vocab_size = 259;
    int64_t d_model = 128;
    int64_t n_layers = 8;
    int64_t n_heads = 4;
    int64_t ffn_hidden = 256;
    int64_t max_seq_len = 256;
    float rope_base = 10000.0f;
    float norm_eps = 1e-5f;

    int64_t head_dim() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

struct AdapterConfig {
    int64_t prompt_len = 10;    // rows per adaptation prompt
    int64_t adapted_layers = 7; // L: prompts live in the last L layers
    int64_t fusion_depth = 1;   // K: visual tokens live in layers 1..K
    int64_t visual_len = 4;     // visual prompt length
    int64_t feat_dim = 32;      // frozen visual-encoder feature size

    void validate(const BackboneConfig& bb) const;
    bool operator==(const AdapterConfig&) const = default;
};

struct TrainConfig {
    float lr = 1e-3f;
    float caption_lr = 0.0f;      // per-group override; 0 falls back to lr
    float instruction_lr = 0.0f;  // per-group override; 0 falls back to lr
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
    float clip_norm = 1.0f;
    int64_t ratio = 1;  // caption batches per instruction batch
    int64_t batch_size = 4;
    int64_t steps = 1500;
    uint64_t seed = 0;

    void validate() const;
};

struct RunConfig {
    BackboneConfig backbone;
    AdapterConfig adapter;
    TrainConfig train;
};

RunConfig desk_preset();
RunConfig llama7b_preset();

RunConfig load_run_config(const std::string& path);
std::string run_config_json(const RunConfig& cfg);

}  // namespace padapt
