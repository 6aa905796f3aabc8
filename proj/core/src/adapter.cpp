#include "padapt/adapter.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace padapt {

static Tensor randn(Shape shape, float stddev, std::mt19937& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    std::normal_distribution<float> dist(0.0f, stddev);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = dist(rng);
    return t;
}

static LinearSB make_sb(int64_t d_out, const std::string& prefix) {
    LinearSB sb;
    sb.scale = Tensor::full({d_out}, 1.0f, true);
    sb.bias = Tensor::zeros({d_out}, true);
    sb.scale.set_name(prefix + ".scale");
    sb.bias.set_name(prefix + ".bias");
    return sb;
}

static Tensor copy_of(const Tensor& src, const std::string& name) {
    Tensor t = Tensor::from(src.shape(), src.vec(), true);
    t.set_name(name);
    return t;
}

AdapterState AdapterState::init(const BackboneWeights& backbone, const AdapterConfig& cfg,
                                uint64_t seed) {
    const BackboneConfig& bb = backbone.config;
    cfg.validate(bb);
    std::mt19937 rng(static_cast<uint32_t>(seed ^ 0x51f15eedu));

    AdapterState a;
    a.config = cfg;
    const int64_t first_prompt_layer = bb.n_layers - cfg.adapted_layers;
    for (int64_t i = 0; i < bb.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        if (i >= first_prompt_layer) {
            LayerAdaption la;
            la.prompt = randn({cfg.prompt_len, bb.d_model}, 0.02f, rng);
            la.gate = Tensor::zeros({bb.n_heads}, true);
            la.prompt.set_name(p + "attn.prompt");
            la.gate.set_name(p + "attn.gate");
            a.prompts.push_back(std::move(la));
        }
        if (i < cfg.fusion_depth) {
            Tensor vg = Tensor::zeros({bb.n_heads}, true);
            vg.set_name(p + "visual.gate");
            a.visual_gates.push_back(std::move(vg));
        }
        LayerSB sb;
        sb.wq = make_sb(bb.d_model, p + "wq");
        sb.wk = make_sb(bb.d_model, p + "wk");
        sb.wv = make_sb(bb.d_model, p + "wv");
        sb.wo = make_sb(bb.d_model, p + "wo");
        sb.w_gate = make_sb(bb.ffn_hidden, p + "w_gate");
        sb.w_up = make_sb(bb.ffn_hidden, p + "w_up");
        sb.w_down = make_sb(bb.d_model, p + "w_down");
        a.sb.push_back(std::move(sb));
        a.attn_norm.push_back(copy_of(backbone.layers[static_cast<size_t>(i)].attn_norm,
                                      p + "attn_norm.weight"));
        a.ffn_norm.push_back(copy_of(backbone.layers[static_cast<size_t>(i)].ffn_norm,
                                     p + "ffn_norm.weight"));
    }
    a.final_norm = copy_of(backbone.final_norm, "final_norm.weight");
    a.head_sb = make_sb(bb.vocab_size, "head");
    a.vis_proj_w = randn({cfg.feat_dim, cfg.visual_len * bb.d_model}, 0.02f, rng);
    a.vis_proj_b = Tensor::zeros({cfg.visual_len * bb.d_model}, true);
    a.vis_proj_w.set_name("visual.proj.weight");
    a.vis_proj_b.set_name("visual.proj.bias");
    return a;
}

std::vector<std::pair<std::string, Tensor>> AdapterState::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto push = [&out](const Tensor& t) { out.emplace_back(t.name(), t); };
    const int64_t n = num_layers();
    const int64_t first_prompt_layer = n - static_cast<int64_t>(prompts.size());
    for (int64_t i = 0; i < n; ++i) {
        if (i >= first_prompt_layer) {
            push(prompts[static_cast<size_t>(i - first_prompt_layer)].prompt);
            push(prompts[static_cast<size_t>(i - first_prompt_layer)].gate);
        }
        if (i < static_cast<int64_t>(visual_gates.size())) push(visual_gates[static_cast<size_t>(i)]);
        const LayerSB& s = sb[static_cast<size_t>(i)];
        for (const LinearSB* l : {&s.wq, &s.wk, &s.wv, &s.wo, &s.w_gate, &s.w_up, &s.w_down}) {
            push(l->scale);
            push(l->bias);
        }
        push(attn_norm[static_cast<size_t>(i)]);
        push(ffn_norm[static_cast<size_t>(i)]);
    }
    push(final_norm);
    push(head_sb.scale);
    push(head_sb.bias);
    push(vis_proj_w);
    push(vis_proj_b);
    return out;
}

uint64_t AdapterState::content_hash() const { return hash_tensors(named_tensors()); }

// ---------------------------------------------------------------------------
// forward pieces

Tensor scaled_linear_forward(Tape& g, const Tensor& x, const Tensor& w, const Tensor& s,
                             const Tensor& b) {
    return g.mul_rowvec(g.add_rowvec(g.matmul(x, w), b), s);
}

static Tensor lin(Tape& g, const Tensor& x, const Tensor& w, const LinearSB* sb) {
    if (!sb) return g.matmul(x, w);
    return scaled_linear_forward(g, x, w, sb->scale, sb->bias);
}

namespace {

struct PrefixKV {
    Tensor k, v;          // [P, d]
    const Tensor* gate;   // [n_heads]
};

// Attention over h = [n_vis visual rows | n_words word rows], both pre-normed.
// Word rows attend causally to words, plus gated segments for the visual
// prefix and/or the adaptation prompt. Visual rows attend causally among
// themselves. Prefix keys/values carry no rotary offset; word positions are
// 0..n_words-1 regardless of any prefix, which keeps the gate-zero path
// bitwise equal to the plain causal attention.
Tensor attention_block(Tape& g, const BackboneConfig& cfg, const BackboneWeights::Layer& l,
                       const AdapterState::LayerSB* sb, const Tensor& h, int64_t n_vis,
                       const Tensor* vis_gate, const Tensor* prompt, const Tensor* prompt_gate) {
    const int64_t hd = cfg.head_dim();
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    const int64_t n_words = h.dim(0) - n_vis;

    Tensor q = lin(g, h, l.wq, sb ? &sb->wq : nullptr);
    Tensor k = lin(g, h, l.wk, sb ? &sb->wk : nullptr);
    Tensor v = lin(g, h, l.wv, sb ? &sb->wv : nullptr);

    Tensor qv, kv, vv;
    Tensor qw, kw, vw;
    if (n_vis > 0) {
        qv = g.slice_rows(q, 0, n_vis);
        kv = g.slice_rows(k, 0, n_vis);
        vv = g.slice_rows(v, 0, n_vis);
        qw = g.slice_rows(q, n_vis, n_words);
        kw = g.slice_rows(k, n_vis, n_words);
        vw = g.slice_rows(v, n_vis, n_words);
    } else {
        qw = q;
        kw = k;
        vw = v;
    }
    qw = g.rope(qw, hd, cfg.rope_base, 0);
    kw = g.rope(kw, hd, cfg.rope_base, 0);

    std::vector<PrefixKV> prefixes;
    if (n_vis > 0) prefixes.push_back({kv, vv, vis_gate});
    if (prompt) {
        PrefixKV p;
        p.k = lin(g, *prompt, l.wk, sb ? &sb->wk : nullptr);
        p.v = lin(g, *prompt, l.wv, sb ? &sb->wv : nullptr);
        p.gate = prompt_gate;
        prefixes.push_back(std::move(p));
    }

    Tensor word_mask = causal_mask(n_words);
    Tensor vis_mask = n_vis > 0 ? causal_mask(n_vis) : Tensor{};

    std::vector<Tensor> heads;
    for (int64_t head = 0; head < cfg.n_heads; ++head) {
        Tensor qwh = g.slice_cols(qw, head * hd, hd);
        Tensor kwh = g.slice_cols(kw, head * hd, hd);
        Tensor vwh = g.slice_cols(vw, head * hd, hd);

        Tensor scores = g.scale_by_scalar(g.matmul(qwh, g.transpose(kwh)), inv_sqrt);
        Tensor out_w = g.matmul(g.softmax_rows(g.add(scores, word_mask)), vwh);

        for (const PrefixKV& p : prefixes) {
            Tensor kph = g.slice_cols(p.k, head * hd, hd);
            Tensor vph = g.slice_cols(p.v, head * hd, hd);
            Tensor sp = g.scale_by_scalar(g.matmul(qwh, g.transpose(kph)), inv_sqrt);
            Tensor contrib = g.matmul(g.softmax_rows(sp), vph);
            out_w = g.add(out_w, g.scale_by(contrib, g.slice_rows(*p.gate, head, 1)));
        }

        if (n_vis > 0) {
            Tensor qvh = g.slice_cols(qv, head * hd, hd);
            Tensor kvh = g.slice_cols(kv, head * hd, hd);
            Tensor vvh = g.slice_cols(vv, head * hd, hd);
            Tensor sv = g.scale_by_scalar(g.matmul(qvh, g.transpose(kvh)), inv_sqrt);
            Tensor out_v = g.matmul(g.softmax_rows(g.add(sv, vis_mask)), vvh);
            heads.push_back(g.concat_along_axis(0, {out_v, out_w}));
        } else {
            heads.push_back(out_w);
        }
    }
    return lin(g, g.concat_along_axis(1, heads), l.wo, sb ? &sb->wo : nullptr);
}

Tensor ffn_block(Tape& g, const BackboneWeights::Layer& l, const AdapterState::LayerSB& sb,
                 const Tensor& h) {
    Tensor gate = g.silu(lin(g, h, l.w_gate, &sb.w_gate));
    Tensor up = lin(g, h, l.w_up, &sb.w_up);
    return lin(g, g.mul(gate, up), l.w_down, &sb.w_down);
}

}  // namespace

Tensor zero_init_prefix_attention(Tape& g, const BackboneConfig& cfg,
                                  const BackboneWeights::Layer& layer, const Tensor& x,
                                  const Tensor& prompt, const Tensor& gate) {
    if (prompt.rank() != 2 || prompt.dim(1) != cfg.d_model)
        throw std::invalid_argument("zero_init_prefix_attention: prompt shape " +
                                    shape_str(prompt.shape()) + " does not match d_model");
    if (gate.numel() != cfg.n_heads)
        throw std::invalid_argument("zero_init_prefix_attention: gate must have one entry per head");
    return attention_block(g, cfg, layer, nullptr, x, 0, nullptr, &prompt, &gate);
}

Tensor project_visual(Tape& g, const Tensor& features, const AdapterState& adapter,
                      int64_t d_model) {
    const AdapterConfig& cfg = adapter.config;
    if (features.numel() != cfg.feat_dim)
        throw std::invalid_argument("project_visual: feature length " +
                                    std::to_string(features.numel()) + " != feat_dim " +
                                    std::to_string(cfg.feat_dim));
    Tensor f = g.reshape(features, {1, cfg.feat_dim});
    Tensor flat = g.add_rowvec(g.matmul(f, adapter.vis_proj_w), adapter.vis_proj_b);
    return g.reshape(flat, {cfg.visual_len, d_model});
}

static Tensor forward_impl(Tape& g, const BackboneWeights& backbone, const AdapterState& adapter,
                           std::span<const int> tokens, const Tensor* visual_features,
                           bool v1_style) {
    const BackboneConfig& cfg = backbone.config;
    const AdapterConfig& ad = adapter.config;
    const int64_t n_words = static_cast<int64_t>(tokens.size());
    if (n_words < 1) throw std::invalid_argument("forward_adapted: empty token sequence");
    const bool fused = visual_features != nullptr && !v1_style;
    const int64_t budget = cfg.max_seq_len - (fused ? ad.visual_len : 0);
    if (n_words > budget)
        throw std::invalid_argument("forward_adapted: sequence length " + std::to_string(n_words) +
                                    " exceeds budget " + std::to_string(budget));

    Tensor x = g.embedding_lookup(backbone.tok_embedding, tokens);
    if (fused) {
        Tensor vis = project_visual(g, *visual_features, adapter, cfg.d_model);
        x = g.concat_along_axis(0, {vis, x});
    }

    // v1: global visual vector broadcast onto every adaptation prompt row
    Tensor v1_prompt_offset;
    if (v1_style && visual_features != nullptr) {
        Tensor vis = project_visual(g, *visual_features, adapter, cfg.d_model);
        Tensor mean_row =
            g.matmul(Tensor::full({1, ad.visual_len}, 1.0f / static_cast<float>(ad.visual_len)),
                     vis);
        v1_prompt_offset =
            g.matmul(Tensor::full({ad.prompt_len, 1}, 1.0f), mean_row);  // [P, d]
    }

    const int64_t first_prompt_layer = cfg.n_layers - ad.adapted_layers;
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        const auto& l = backbone.layers[static_cast<size_t>(i)];
        const auto& sb = adapter.sb[static_cast<size_t>(i)];
        const int64_t n_vis = (fused && i < ad.fusion_depth) ? ad.visual_len : 0;
        const Tensor* vis_gate =
            n_vis > 0 ? &adapter.visual_gates[static_cast<size_t>(i)] : nullptr;

        Tensor prompt;
        const Tensor* prompt_ptr = nullptr;
        const Tensor* prompt_gate = nullptr;
        if (i >= first_prompt_layer) {
            const auto& la = adapter.prompts[static_cast<size_t>(i - first_prompt_layer)];
            prompt = la.prompt;
            if (v1_prompt_offset.defined()) prompt = g.add(prompt, v1_prompt_offset);
            prompt_ptr = &prompt;
            prompt_gate = &la.gate;
        }

        Tensor h = g.rms_norm(x, adapter.attn_norm[static_cast<size_t>(i)], cfg.norm_eps);
        x = g.add(x, attention_block(g, cfg, l, &sb, h, n_vis, vis_gate, prompt_ptr, prompt_gate));
        Tensor h2 = g.rms_norm(x, adapter.ffn_norm[static_cast<size_t>(i)], cfg.norm_eps);
        x = g.add(x, ffn_block(g, l, sb, h2));

        if (fused && i == ad.fusion_depth - 1) x = g.slice_rows(x, ad.visual_len, n_words);
    }
    x = g.rms_norm(x, adapter.final_norm, cfg.norm_eps);
    return lin(g, x, backbone.head, &adapter.head_sb);
}

Tensor forward_adapted(Tape& g, const BackboneWeights& backbone, const AdapterState& adapter,
                       std::span<const int> tokens, const Tensor* visual_features) {
    return forward_impl(g, backbone, adapter, tokens, visual_features, false);
}

Tensor forward_v1_style(Tape& g, const BackboneWeights& backbone, const AdapterState& adapter,
                        std::span<const int> tokens, const Tensor* visual_features) {
    return forward_impl(g, backbone, adapter, tokens, visual_features, true);
}

// ---------------------------------------------------------------------------

TunableBreakdown count_tunable(const BackboneConfig& bb, const AdapterConfig& ad) {
    bb.validate();
    ad.validate(bb);
    TunableBreakdown c;
    const int64_t d = bb.d_model, f = bb.ffn_hidden, n = bb.n_layers, v = bb.vocab_size;
    c.prompts = ad.adapted_layers * ad.prompt_len * d;
    c.gates = ad.adapted_layers * bb.n_heads + ad.fusion_depth * bb.n_heads;
    // per layer: wq,wk,wv,wo out d; w_gate,w_up out f; w_down out d; plus head out v
    const int64_t per_layer_out = 5 * d + 2 * f;
    c.scale = n * per_layer_out + v;
    c.bias = n * per_layer_out + v;
    c.norms = (2 * n + 1) * d;
    c.visual_projection = ad.feat_dim * ad.visual_len * d + ad.visual_len * d;
    c.total = c.prompts + c.gates + c.scale + c.bias + c.norms + c.visual_projection;
    c.backbone_total = v * d                        // embedding
                       + n * (4 * d * d + 3 * d * f)  // attention + ffn weights
                       + (2 * n + 1) * d              // norms
                       + d * v;                       // output head
    c.fraction_of_backbone =
        static_cast<double>(c.total) / static_cast<double>(c.backbone_total);
    return c;
}

}  // namespace padapt
