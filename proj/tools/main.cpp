#include "padapt/adapter.hpp"
#include "padapt/backbone.hpp"
#include "padapt/checkpoint.hpp"
#include "padapt/config.hpp"
#include "padapt/experts.hpp"
#include "padapt/synthworld.hpp"
#include "padapt/tokenizer.hpp"
#include "padapt/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace padapt;
using nlohmann::json;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_usage = 1;
constexpr int exit_runtime = 2;
constexpr int exit_check_failure = 3;

void guard_overwrite(const std::string& path, bool force) {
    if (!force && std::filesystem::exists(path))
        throw std::runtime_error("refusing to overwrite existing file " + path +
                                 " (pass --force to allow)");
}

RunConfig resolve_config(const std::string& config_path, const std::string& preset) {
    if (!config_path.empty()) return load_run_config(config_path);
    if (preset == "llama7b") return llama7b_preset();
    if (preset.empty() || preset == "desk") return desk_preset();
    throw std::runtime_error("unknown preset: " + preset);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// gradcheck: central finite differences against tape gradients

struct FdCase {
    std::string name;
    double max_violation = 0.0;  // |fd - an| / (rel_tol*max(|fd|,|an|) + abs_tol); pass iff <= 1
    bool pass = false;
};

// Central differences on a random weighting of the outputs, reduced in double
// precision. The absolute term in the pass rule absorbs the f32
// forward-evaluation noise floor on near-zero gradient coordinates.
double fd_max_violation(std::vector<Tensor> params, const std::function<Tensor(Tape&)>& make_out,
                        int64_t max_coords, uint64_t seed, double rel_tol, double abs_tol) {
    const float eps = 1e-3f;
    for (Tensor& p : params) {
        p.set_requires_grad(true);
        p.ensure_grad();
        p.zero_grad();
    }
    std::mt19937 rng(static_cast<uint32_t>(seed));
    std::vector<float> weights;
    {
        Tape g;
        Tensor out = make_out(g);
        std::normal_distribution<float> dist(0.0f, 1.0f);
        weights.resize(static_cast<size_t>(out.numel()));
        for (float& w : weights) w = dist(rng);
    }
    {
        Tape g;
        Tensor out = make_out(g);
        Tensor w = Tensor::from(out.shape(), weights);
        g.backward(g.sum(g.mul(out, w)));
    }
    std::vector<std::vector<float>> analytic;
    for (Tensor& p : params) analytic.push_back(p.grad_vec());

    auto eval = [&]() {
        Tape g;
        Tensor out = make_out(g);
        double acc = 0.0;
        for (int64_t i = 0; i < out.numel(); ++i)
            acc += static_cast<double>(out.data()[i]) *
                   static_cast<double>(weights[static_cast<size_t>(i)]);
        return acc;
    };
    double max_violation = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        std::vector<int64_t> coords(static_cast<size_t>(p.numel()));
        for (int64_t i = 0; i < p.numel(); ++i) coords[static_cast<size_t>(i)] = i;
        if (static_cast<int64_t>(coords.size()) > max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(static_cast<size_t>(max_coords));
        }
        for (int64_t c : coords) {
            const float orig = p.data()[c];
            p.data()[c] = orig + eps;
            const double hi_x = p.data()[c];
            const double up = eval();
            p.data()[c] = orig - eps;
            const double lo_x = p.data()[c];
            const double down = eval();
            p.data()[c] = orig;
            const double fd = (up - down) / (hi_x - lo_x);
            const double an = analytic[pi][static_cast<size_t>(c)];
            const double allow = rel_tol * std::max(std::fabs(fd), std::fabs(an)) + abs_tol;
            max_violation = std::max(max_violation, std::fabs(fd - an) / allow);
        }
    }
    return max_violation;
}

int run_gradcheck(uint64_t seed) {
    std::mt19937 rng(static_cast<uint32_t>(seed));
    auto randn = [&](Shape shape, float stddev) {
        Tensor t = Tensor::zeros(std::move(shape), true);
        std::normal_distribution<float> dist(0.0f, stddev);
        for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = dist(rng);
        return t;
    };

    std::vector<FdCase> cases;
    auto add = [&](const std::string& name, std::vector<Tensor> params,
                   const std::function<Tensor(Tape&)>& out, int64_t coords) {
        FdCase c;
        c.name = name;
        c.max_violation =
            fd_max_violation(std::move(params), out, coords, seed + cases.size(), 1e-3, 1e-3);
        c.pass = c.max_violation <= 1.0;
        cases.push_back(c);
    };

    {
        Tensor a = randn({5, 7}, 0.5f), b = randn({7, 3}, 0.5f);
        add("matmul", {a, b}, [&](Tape& g) { return g.matmul(a, b); }, 32);
    }
    {
        Tensor x = randn({3, 6}, 1.0f);
        add("softmax_rows", {x}, [&](Tape& g) { return g.softmax_rows(x); }, 18);
    }
    {
        Tensor x = randn({3, 8}, 1.0f), w = randn({8}, 0.5f);
        add("rms_norm", {x, w}, [&](Tape& g) { return g.rms_norm(x, w, 1e-5f); }, 24);
    }
    {
        Tensor x = randn({4, 8}, 1.0f);
        add("rope", {x}, [&](Tape& g) { return g.rope(x, 4, 10000.0f, 2); }, 24);
    }
    {
        BackboneConfig cfg;
        cfg.vocab_size = 32;
        cfg.d_model = 8;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.ffn_hidden = 16;
        cfg.max_seq_len = 32;
        BackboneWeights w = BackboneWeights::init(cfg, seed);
        w.freeze();
        AdapterConfig acfg;
        acfg.prompt_len = 3;
        acfg.adapted_layers = 1;
        acfg.fusion_depth = 1;
        acfg.visual_len = 2;
        acfg.feat_dim = 5;
        AdapterState a = AdapterState::init(w, acfg, seed + 1);
        std::normal_distribution<float> dist(0.0f, 0.05f);
        for (auto& [name, t] : a.named_tensors())
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] += dist(rng);
        Tensor feat = randn({acfg.feat_dim}, 1.0f);
        feat.set_requires_grad(false);
        std::vector<int> toks = {4, 9, 2, 17, 8};
        std::vector<int> targets = {9, 2, 17, 8, 3};
        std::vector<uint8_t> mask = {1, 1, 1, 1, 1};
        std::vector<Tensor> params;
        for (auto& [name, t] : a.named_tensors()) params.push_back(t);
        add("adapted_model", params,
            [&](Tape& g) {
                return g.cross_entropy_masked(forward_adapted(g, w, a, toks, &feat), targets,
                                              mask);
            },
            6);
    }

    json out = json::array();
    bool all_pass = true;
    for (const FdCase& c : cases) {
        out.push_back({{"case", c.name}, {"max_violation", c.max_violation}, {"pass", c.pass}});
        all_pass = all_pass && c.pass;
    }
    std::cout << json{{"cases", out}, {"pass", all_pass}}.dump(2) << "\n";
    return all_pass ? exit_ok : exit_check_failure;
}

std::unique_ptr<Expert> make_expert(const std::string& spec, const BackboneWeights& backbone,
                                    const AdapterState& adapter, uint64_t encoder_seed) {
    if (spec == "none" || spec.empty()) return nullptr;
    if (spec == "self")
        return std::make_unique<SelfCaptionExpert>(backbone, adapter, encoder_seed);
    if (spec == "oracle") return std::make_unique<OracleExpert>(OracleExpert::ground_truth());
    if (spec.rfind("oracle:", 0) == 0)
        return std::make_unique<OracleExpert>(OracleExpert::from_json_file(spec.substr(7)));
    throw std::runtime_error("unknown expert: " + spec + " (use none|self|oracle|oracle:file)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"parameter-efficient adapter training over a frozen byte-level transformer"};
    app.require_subcommand(1);

    std::string config_path, preset;
    app.add_option("--config", config_path, "JSON run config (overrides --preset)");
    app.add_option("--preset", preset, "built-in config preset: desk|llama7b");

    // pretrain
    auto* cmd_pre = app.add_subcommand("pretrain", "pretrain and freeze a backbone");
    std::string pre_corpus, pre_out;
    int64_t pre_steps = 3000;
    uint64_t pre_seed = 0;
    bool pre_force = false;
    cmd_pre->add_option("--corpus", pre_corpus, "corpus text file (blank-line separated)")
        ->required();
    cmd_pre->add_option("--out", pre_out, "backbone checkpoint path")->required();
    cmd_pre->add_option("--steps", pre_steps, "training steps");
    cmd_pre->add_option("--seed", pre_seed, "rng seed");
    cmd_pre->add_flag("--force", pre_force, "overwrite an existing checkpoint");

    // gen-data
    auto* cmd_gen = app.add_subcommand("gen-data", "emit synthetic datasets");
    std::string gen_kind, gen_out;
    int gen_n = 1000;
    uint64_t gen_seed = 0;
    bool gen_force = false;
    cmd_gen->add_option("--kind", gen_kind, "caption|instruction|corpus")->required();
    cmd_gen->add_option("--out", gen_out, "output path (JSONL, or text for corpus)")->required();
    cmd_gen->add_option("--n", gen_n, "number of examples / passages");
    cmd_gen->add_option("--seed", gen_seed, "rng seed");
    cmd_gen->add_flag("--force", gen_force, "overwrite an existing file");

    // adapt
    auto* cmd_adapt = app.add_subcommand("adapt", "train adapter parameters");
    std::string ad_backbone, ad_captions, ad_instructions, ad_mode = "joint", ad_out, ad_log;
    int64_t ad_steps = -1;
    uint64_t ad_seed = 0, ad_encoder_seed = 7;
    bool ad_force = false;
    cmd_adapt->add_option("--backbone", ad_backbone, "backbone checkpoint")->required();
    cmd_adapt->add_option("--captions", ad_captions, "caption JSONL")->required();
    cmd_adapt->add_option("--instructions", ad_instructions, "instruction JSONL")->required();
    cmd_adapt->add_option("--mode", ad_mode,
                          "joint|caption_only|instruction_only|naive_mixed|v1_style");
    cmd_adapt->add_option("--out", ad_out, "adapter checkpoint path")->required();
    cmd_adapt->add_option("--log", ad_log, "JSONL step log path");
    cmd_adapt->add_option("--steps", ad_steps, "override config step count");
    cmd_adapt->add_option("--seed", ad_seed, "rng seed");
    cmd_adapt->add_option("--encoder-seed", ad_encoder_seed, "visual encoder seed");
    cmd_adapt->add_flag("--force", ad_force, "overwrite existing outputs");

    // eval
    auto* cmd_eval = app.add_subcommand("eval", "run an evaluation suite");
    std::string ev_backbone, ev_adapter, ev_suite = "vqa", ev_expert = "none";
    int ev_n = 200;
    uint64_t ev_seed = 0, ev_encoder_seed = 7;
    cmd_eval->add_option("--backbone", ev_backbone, "backbone checkpoint")->required();
    cmd_eval->add_option("--adapter", ev_adapter, "adapter checkpoint")->required();
    cmd_eval->add_option("--suite", ev_suite, "vqa|caption|instruction");
    cmd_eval->add_option("--expert", ev_expert, "context expert for vqa: none|self|oracle|oracle:file");
    cmd_eval->add_option("--n", ev_n, "number of eval examples");
    cmd_eval->add_option("--seed", ev_seed, "rng seed");
    cmd_eval->add_option("--encoder-seed", ev_encoder_seed, "visual encoder seed");

    // generate
    auto* cmd_genr = app.add_subcommand("generate", "one-shot inference");
    std::string gn_backbone, gn_adapter, gn_instruction, gn_image, gn_expert = "none";
    uint64_t gn_encoder_seed = 7;
    cmd_genr->add_option("--backbone", gn_backbone, "backbone checkpoint")->required();
    cmd_genr->add_option("--adapter", gn_adapter, "adapter checkpoint")->required();
    cmd_genr->add_option("--instruction", gn_instruction, "instruction text")->required();
    cmd_genr->add_option("--image", gn_image, "image spec 'shape,color,size'");
    cmd_genr->add_option("--expert", gn_expert, "none|self|oracle|oracle:file");
    cmd_genr->add_option("--encoder-seed", gn_encoder_seed, "visual encoder seed");

    // params
    auto* cmd_params = app.add_subcommand("params", "print the tunable-parameter breakdown");

    // gradcheck
    auto* cmd_grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    uint64_t gc_seed = 0;
    cmd_grad->add_option("--seed", gc_seed, "rng seed");

    for (CLI::App* sc : {cmd_pre, cmd_gen, cmd_adapt, cmd_eval, cmd_genr, cmd_params, cmd_grad})
        sc->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? exit_ok : exit_usage;
    }

    try {
        RunConfig rc = resolve_config(config_path, preset);

        if (*cmd_pre) {
            guard_overwrite(pre_out, pre_force);
            const std::string corpus = read_file(pre_corpus);
            PretrainReport rep;
            BackboneWeights w =
                pretrain_backbone(rc.backbone, corpus, pre_steps, pre_seed, rc.train, &rep);
            save_backbone(w, pre_out);
            std::cout << json{{"heldout_initial", rep.heldout_initial},
                              {"heldout_final", rep.heldout_final},
                              {"steps", pre_steps},
                              {"out", pre_out}}
                             .dump(2)
                      << "\n";
        } else if (*cmd_gen) {
            guard_overwrite(gen_out, gen_force);
            if (gen_kind == "caption") {
                save_caption_jsonl(gen_out, gen_caption_dataset(gen_n, gen_seed));
            } else if (gen_kind == "instruction") {
                save_instruction_jsonl(gen_out, gen_instruction_dataset(gen_n, gen_seed));
            } else if (gen_kind == "corpus") {
                std::ofstream out(gen_out);
                if (!out) throw std::runtime_error("cannot open for writing: " + gen_out);
                out << gen_pretrain_corpus(gen_n, gen_seed);
            } else {
                throw std::runtime_error("unknown gen-data kind: " + gen_kind);
            }
            std::cout << json{{"kind", gen_kind}, {"n", gen_n}, {"out", gen_out}}.dump(2) << "\n";
        } else if (*cmd_adapt) {
            guard_overwrite(ad_out, ad_force);
            if (!ad_log.empty()) guard_overwrite(ad_log, ad_force);
            BackboneWeights w = load_backbone(ad_backbone);
            AdapterState a = AdapterState::init(w, rc.adapter, ad_seed);
            auto caps = load_caption_jsonl(ad_captions);
            auto ins = load_instruction_jsonl(ad_instructions);
            TrainConfig hp = rc.train;
            hp.seed = ad_seed;
            if (ad_steps > 0) hp.steps = ad_steps;
            TrainMode mode = parse_train_mode(ad_mode);
            std::ofstream log_stream;
            std::ostream* log = nullptr;
            if (!ad_log.empty()) {
                log_stream.open(ad_log);
                if (!log_stream) throw std::runtime_error("cannot open step log: " + ad_log);
                log = &log_stream;
            }
            TrainReport rep = joint_train(w, a, caps, ins, hp, mode, ad_encoder_seed, log);
            save_adapter(a, w.config, ad_out);
            std::cout << json{{"mode", ad_mode},
                              {"steps", hp.steps},
                              {"caption_loss_last10pct",
                               rep.mean_loss(StreamTag::caption, 0.9, 1.0)},
                              {"instruction_loss_last10pct",
                               rep.mean_loss(StreamTag::instruction, 0.9, 1.0)},
                              {"out", ad_out}}
                             .dump(2)
                      << "\n";
        } else if (*cmd_eval) {
            BackboneWeights w = load_backbone(ev_backbone);
            AdapterState a = load_adapter(ev_adapter, w);
            json out;
            if (ev_suite == "vqa") {
                double acc;
                if (ev_expert == "none") {
                    acc = eval_zero_shot_vqa(w, a, ev_n, ev_seed, ev_encoder_seed);
                } else {
                    std::unique_ptr<Expert> expert = make_expert(ev_expert, w, a, ev_encoder_seed);
                    acc = eval_zero_shot_vqa_with(
                        [&](const SynthImage& img, const std::string& q) {
                            return answer_with_expert(w, a, img, q, expert.get(), ev_encoder_seed)
                                .text;
                        },
                        ev_n, ev_seed);
                }
                out = {{"suite", "vqa"}, {"n", ev_n}, {"expert", ev_expert}, {"accuracy", acc}};
            } else if (ev_suite == "caption") {
                out = {{"suite", "caption"},
                       {"accuracy", eval_caption_match(w, a, ev_encoder_seed)}};
            } else if (ev_suite == "instruction") {
                out = {{"suite", "instruction"},
                       {"n", ev_n},
                       {"accuracy", eval_instruction_suite(w, a, ev_n, ev_seed)}};
            } else {
                throw std::runtime_error("unknown eval suite: " + ev_suite);
            }
            std::cout << out.dump(2) << "\n";
        } else if (*cmd_genr) {
            BackboneWeights w = load_backbone(gn_backbone);
            AdapterState a = load_adapter(gn_adapter, w);
            if (gn_image.empty()) throw std::runtime_error("generate requires --image");
            SynthImage img = SynthImage::parse(gn_image);
            std::unique_ptr<Expert> expert = make_expert(gn_expert, w, a, gn_encoder_seed);
            ExpertAnswer ans =
                answer_with_expert(w, a, img, gn_instruction, expert.get(), gn_encoder_seed);
            std::cout << json{{"instruction", gn_instruction},
                              {"image", gn_image},
                              {"expert", gn_expert},
                              {"used_fallback", ans.used_fallback},
                              {"response", ans.text}}
                             .dump(2)
                      << "\n";
        } else if (*cmd_params) {
            TunableBreakdown bd = count_tunable(rc.backbone, rc.adapter);
            const int64_t reference_total = 14'000'000;  // published 7B-scale tunable count
            json out = {{"prompts", bd.prompts},
                        {"gates", bd.gates},
                        {"scale", bd.scale},
                        {"bias", bd.bias},
                        {"norms", bd.norms},
                        {"visual_projection", bd.visual_projection},
                        {"bias_tuning_subtotal", bd.bias_tuning_subtotal()},
                        {"total", bd.total},
                        {"backbone_total", bd.backbone_total},
                        {"fraction_of_backbone", bd.fraction_of_backbone},
                        {"reference_total", reference_total},
                        {"ratio_vs_reference",
                         static_cast<double>(bd.total) / static_cast<double>(reference_total)}};
            std::cout << out.dump(2) << "\n";
        } else if (*cmd_grad) {
            return run_gradcheck(gc_seed);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_runtime;
    }
    return exit_ok;
}
