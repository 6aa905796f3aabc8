#include "padapt/config.hpp"

#include <json.hpp>

#include <fstream>
#include <stdexcept>

namespace padapt {

using nlohmann::json;

void BackboneConfig::validate() const {
    if (vocab_size < 1) throw std::invalid_argument("vocab_size must be positive");
    if (n_heads < 1 || d_model % n_heads != 0)
        throw std::invalid_argument("d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw std::invalid_argument("head_dim must be even for rotary encoding");
    if (n_layers < 2) throw std::invalid_argument("n_layers must be at least 2");
    if (ffn_hidden < 1 || max_seq_len < 2) throw std::invalid_argument("invalid backbone dims");
    if (norm_eps <= 0.0f) throw std::invalid_argument("norm_eps must be positive");
}

void AdapterConfig::validate(const BackboneConfig& bb) const {
    if (prompt_len < 1 || visual_len < 1 || feat_dim < 1)
        throw std::invalid_argument("adapter dims must be positive");
    if (adapted_layers < 1 || adapted_layers > bb.n_layers - 1)
        throw std::invalid_argument("adapted_layers L must satisfy 1 <= L <= n_layers-1");
    // visual layers 1..K and prompt layers N-L+1..N must be disjoint
    if (fusion_depth < 1 || fusion_depth > bb.n_layers - adapted_layers)
        throw std::invalid_argument("fusion_depth K must satisfy 1 <= K <= n_layers - L");
}

void TrainConfig::validate() const {
    if (lr <= 0.0f) throw std::invalid_argument("learning rate must be positive");
    if (caption_lr < 0.0f || instruction_lr < 0.0f)
        throw std::invalid_argument("per-group learning rates must be non-negative");
    if (ratio < 1) throw std::invalid_argument("mixing ratio must be positive");
    if (batch_size < 1 || steps < 1) throw std::invalid_argument("invalid training config");
}

RunConfig desk_preset() { return RunConfig{}; }

RunConfig llama7b_preset() {
    RunConfig cfg;
    cfg.backbone = {.vocab_size = 32000,
                    .d_model = 4096,
                    .n_layers = 32,
                    .n_heads = 32,
                    .ffn_hidden = 11008,
                    .max_seq_len = 2048,
                    .rope_base = 10000.0f,
                    .norm_eps = 1e-5f};
    cfg.adapter = {.prompt_len = 10,
                   .adapted_layers = 31,
                   .fusion_depth = 1,
                   .visual_len = 20,
                   .feat_dim = 768};
    return cfg;
}

static void from_json_backbone(const json& j, BackboneConfig& c) {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
}

static void from_json_adapter(const json& j, AdapterConfig& c) {
    c.prompt_len = j.value("prompt_len", c.prompt_len);
    c.adapted_layers = j.value("adapted_layers", c.adapted_layers);
    c.fusion_depth = j.value("fusion_depth", c.fusion_depth);
    c.visual_len = j.value("visual_len", c.visual_len);
    c.feat_dim = j.value("feat_dim", c.feat_dim);
}

static void from_json_train(const json& j, TrainConfig& c) {
    c.lr = j.value("lr", c.lr);
    c.caption_lr = j.value("caption_lr", c.caption_lr);
    c.instruction_lr = j.value("instruction_lr", c.instruction_lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.ratio = j.value("ratio", c.ratio);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    json j = json::parse(in);
    RunConfig cfg;
    if (j.contains("preset")) {
        const std::string p = j["preset"].get<std::string>();
        if (p == "desk")
            cfg = desk_preset();
        else if (p == "llama7b")
            cfg = llama7b_preset();
        else
            throw std::runtime_error("unknown preset: " + p);
    }
    if (j.contains("backbone")) from_json_backbone(j["backbone"], cfg.backbone);
    if (j.contains("adapter")) from_json_adapter(j["adapter"], cfg.adapter);
    if (j.contains("train")) from_json_train(j["train"], cfg.train);
    cfg.backbone.validate();
    cfg.adapter.validate(cfg.backbone);
    cfg.train.validate();
    return cfg;
}

std::string run_config_json(const RunConfig& cfg) {
    json j;
    j["backbone"] = {{"vocab_size", cfg.backbone.vocab_size}, {"d_model", cfg.backbone.d_model},
                     {"n_layers", cfg.backbone.n_layers},     {"n_heads", cfg.backbone.n_heads},
                     {"ffn_hidden", cfg.backbone.ffn_hidden}, {"max_seq_len", cfg.backbone.max_seq_len},
                     {"rope_base", cfg.backbone.rope_base},   {"norm_eps", cfg.backbone.norm_eps}};
    j["adapter"] = {{"prompt_len", cfg.adapter.prompt_len},
                    {"adapted_layers", cfg.adapter.adapted_layers},
                    {"fusion_depth", cfg.adapter.fusion_depth},
                    {"visual_len", cfg.adapter.visual_len},
                    {"feat_dim", cfg.adapter.feat_dim}};
    j["train"] = {{"lr", cfg.train.lr},
                  {"caption_lr", cfg.train.caption_lr},
                  {"instruction_lr", cfg.train.instruction_lr},
                  {"beta1", cfg.train.beta1},
                  {"beta2", cfg.train.beta2},
                  {"eps", cfg.train.eps},
                  {"weight_decay", cfg.train.weight_decay},
                  {"clip_norm", cfg.train.clip_norm},
                  {"ratio", cfg.train.ratio},
                  {"batch_size", cfg.train.batch_size},
                  {"steps", cfg.train.steps},
                  {"seed", cfg.train.seed}};
    return j.dump(2);
}

}  // namespace padapt
