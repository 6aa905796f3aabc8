#include "padapt/backbone.hpp"

#include "padapt/optim.hpp"
#include "padapt/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>

namespace padapt {

static Tensor randn(Shape shape, float stddev, std::mt19937& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    std::normal_distribution<float> dist(0.0f, stddev);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = dist(rng);
    return t;
}

BackboneWeights BackboneWeights::init(const BackboneConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937 rng(static_cast<uint32_t>(seed ^ 0x9e3779b9u));
    const float std_w = 0.02f;
    // residual-branch outputs scaled down with depth, GPT-2 style
    const float std_res = std_w / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));

    BackboneWeights w;
    w.config = cfg;
    w.tok_embedding = randn({cfg.vocab_size, cfg.d_model}, std_w, rng);
    w.tok_embedding.set_name("tok_embedding");
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        Layer l;
        l.wq = randn({cfg.d_model, cfg.d_model}, std_w, rng);
        l.wk = randn({cfg.d_model, cfg.d_model}, std_w, rng);
        l.wv = randn({cfg.d_model, cfg.d_model}, std_w, rng);
        l.wo = randn({cfg.d_model, cfg.d_model}, std_res, rng);
        l.w_gate = randn({cfg.d_model, cfg.ffn_hidden}, std_w, rng);
        l.w_up = randn({cfg.d_model, cfg.ffn_hidden}, std_w, rng);
        l.w_down = randn({cfg.ffn_hidden, cfg.d_model}, std_res, rng);
        l.attn_norm = Tensor::full({cfg.d_model}, 1.0f, true);
        l.ffn_norm = Tensor::full({cfg.d_model}, 1.0f, true);
        const std::string p = "layer." + std::to_string(i) + ".";
        l.wq.set_name(p + "wq.weight");
        l.wk.set_name(p + "wk.weight");
        l.wv.set_name(p + "wv.weight");
        l.wo.set_name(p + "wo.weight");
        l.w_gate.set_name(p + "w_gate.weight");
        l.w_up.set_name(p + "w_up.weight");
        l.w_down.set_name(p + "w_down.weight");
        l.attn_norm.set_name(p + "attn_norm.weight");
        l.ffn_norm.set_name(p + "ffn_norm.weight");
        w.layers.push_back(std::move(l));
    }
    w.final_norm = Tensor::full({cfg.d_model}, 1.0f, true);
    w.final_norm.set_name("final_norm.weight");
    w.head = randn({cfg.d_model, cfg.vocab_size}, std_w, rng);
    w.head.set_name("head.weight");
    return w;
}

std::vector<std::pair<std::string, Tensor>> BackboneWeights::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back(tok_embedding.name(), tok_embedding);
    for (const Layer& l : layers)
        for (const Tensor* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down,
                                &l.attn_norm, &l.ffn_norm})
            out.emplace_back(t->name(), *t);
    out.emplace_back(final_norm.name(), final_norm);
    out.emplace_back(head.name(), head);
    return out;
}

void BackboneWeights::freeze() {
    for (auto& [name, t] : named_tensors()) {
        Tensor tt = t;
        tt.set_requires_grad(false);
    }
}

bool BackboneWeights::frozen() const {
    for (const auto& [name, t] : named_tensors())
        if (t.requires_grad()) return false;
    return true;
}

uint64_t hash_tensors(const std::vector<std::pair<std::string, Tensor>>& named) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& [name, t] : named) {
        mix(name.data(), name.size());
        mix(t.data(), static_cast<size_t>(t.numel()) * sizeof(float));
    }
    return h;
}

uint64_t BackboneWeights::content_hash() const { return hash_tensors(named_tensors()); }

// ---------------------------------------------------------------------------
// forward

Tensor causal_mask(int64_t seq) {
    Tensor m = Tensor::zeros({seq, seq}, false);
    for (int64_t i = 0; i < seq; ++i)
        for (int64_t j = i + 1; j < seq; ++j) m.data()[i * seq + j] = -1e9f;
    return m;
}

// Plain causal multi-head attention over x (no prefixes). q/k rotary-encoded
// from position 0.
static Tensor base_attention(Tape& g, const BackboneWeights::Layer& l, const Tensor& x,
                             const BackboneConfig& cfg) {
    const int64_t hd = cfg.head_dim();
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    Tensor q = g.rope(g.matmul(x, l.wq), hd, cfg.rope_base, 0);
    Tensor k = g.rope(g.matmul(x, l.wk), hd, cfg.rope_base, 0);
    Tensor v = g.matmul(x, l.wv);
    Tensor mask = causal_mask(x.dim(0));
    std::vector<Tensor> heads;
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
        Tensor qh = g.slice_cols(q, h * hd, hd);
        Tensor kh = g.slice_cols(k, h * hd, hd);
        Tensor vh = g.slice_cols(v, h * hd, hd);
        Tensor scores = g.scale_by_scalar(g.matmul(qh, g.transpose(kh)), inv_sqrt);
        Tensor weights = g.softmax_rows(g.add(scores, mask));
        heads.push_back(g.matmul(weights, vh));
    }
    return g.matmul(g.concat_along_axis(1, heads), l.wo);
}

static Tensor base_ffn(Tape& g, const BackboneWeights::Layer& l, const Tensor& x) {
    Tensor gate = g.silu(g.matmul(x, l.w_gate));
    Tensor up = g.matmul(x, l.w_up);
    return g.matmul(g.mul(gate, up), l.w_down);
}

Tensor forward_base(Tape& g, const BackboneWeights& w, std::span<const int> tokens) {
    const BackboneConfig& cfg = w.config;
    const int64_t seq = static_cast<int64_t>(tokens.size());
    if (seq < 1) throw std::invalid_argument("forward_base: empty token sequence");
    if (seq > cfg.max_seq_len)
        throw std::invalid_argument("forward_base: sequence length " + std::to_string(seq) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    Tensor x = g.embedding_lookup(w.tok_embedding, tokens);
    for (const auto& l : w.layers) {
        x = g.add(x, base_attention(g, l, g.rms_norm(x, l.attn_norm, cfg.norm_eps), cfg));
        x = g.add(x, base_ffn(g, l, g.rms_norm(x, l.ffn_norm, cfg.norm_eps)));
    }
    x = g.rms_norm(x, w.final_norm, cfg.norm_eps);
    return g.matmul(x, w.head);
}

// ---------------------------------------------------------------------------
// pretraining

static std::vector<std::vector<int>> corpus_passages(const std::string& corpus,
                                                     int64_t max_seq_len) {
    std::vector<std::vector<int>> out;
    size_t pos = 0;
    while (pos < corpus.size()) {
        size_t end = corpus.find("\n\n", pos);
        if (end == std::string::npos) end = corpus.size();
        std::string passage = corpus.substr(pos, end - pos);
        pos = end + 2;
        while (!passage.empty() && (passage.back() == '\n' || passage.back() == '\r'))
            passage.pop_back();
        if (passage.empty()) continue;
        std::vector<int> ids;
        ids.push_back(Tokenizer::bos_id);
        for (int t : Tokenizer::encode(passage)) ids.push_back(t);
        ids.push_back(Tokenizer::eos_id);
        if (static_cast<int64_t>(ids.size()) > max_seq_len) ids.resize(static_cast<size_t>(max_seq_len));
        if (ids.size() >= 2) out.push_back(std::move(ids));
    }
    return out;
}

static float next_token_loss(Tape& g, const BackboneWeights& w, const std::vector<int>& ids,
                             bool with_backward) {
    std::vector<int> inputs(ids.begin(), ids.end() - 1);
    std::vector<int> targets(ids.begin() + 1, ids.end());
    std::vector<uint8_t> mask(targets.size(), 1);
    Tensor logits = forward_base(g, w, inputs);
    Tensor loss = g.cross_entropy_masked(logits, targets, mask);
    if (with_backward) g.backward(loss);
    return loss.item();
}

static float heldout_loss(const BackboneWeights& w, const std::vector<std::vector<int>>& heldout) {
    double acc = 0.0;
    const size_t n = std::min<size_t>(heldout.size(), 64);
    for (size_t i = 0; i < n; ++i) {
        Tape g;
        acc += next_token_loss(g, w, heldout[i], false);
    }
    return static_cast<float>(acc / static_cast<double>(n));
}

BackboneWeights pretrain_backbone(const BackboneConfig& cfg, const std::string& corpus,
                                  int64_t steps, uint64_t seed, const TrainConfig& hp,
                                  PretrainReport* report) {
    if (steps < 1) throw std::invalid_argument("pretrain_backbone: steps must be >= 1");
    auto passages = corpus_passages(corpus, cfg.max_seq_len);
    if (passages.empty()) throw std::invalid_argument("pretrain_backbone: empty corpus");

    // every 10th passage held out (when there are enough to spare)
    std::vector<std::vector<int>> train, heldout;
    for (size_t i = 0; i < passages.size(); ++i) {
        if (passages.size() >= 10 && i % 10 == 9)
            heldout.push_back(passages[i]);
        else
            train.push_back(passages[i]);
    }
    if (heldout.empty()) heldout = train;

    BackboneWeights w = BackboneWeights::init(cfg, seed);
    std::vector<Tensor> params;
    for (auto& [name, t] : w.named_tensors()) params.push_back(t);
    AdamW opt(params, hp);

    PretrainReport rep;
    rep.heldout_initial = heldout_loss(w, heldout);

    std::mt19937 rng(static_cast<uint32_t>(seed));
    std::uniform_int_distribution<size_t> pick(0, train.size() - 1);
    for (int64_t step = 0; step < steps; ++step) {
        opt.zero_grads();
        double step_loss = 0.0;
        for (int64_t b = 0; b < hp.batch_size; ++b) {
            Tape g;
            step_loss += next_token_loss(g, w, train[pick(rng)], true);
        }
        step_loss /= static_cast<double>(hp.batch_size);
        if (!std::isfinite(step_loss))
            throw std::runtime_error("pretrain_backbone: loss diverged (non-finite) at step " +
                                     std::to_string(step));
        // batch-mean gradient
        for (Tensor& p : params)
            if (p.has_grad())
                for (int64_t j = 0; j < p.numel(); ++j)
                    p.grad()[j] /= static_cast<float>(hp.batch_size);
        opt.step();
        rep.losses.push_back(static_cast<float>(step_loss));
    }

    rep.heldout_final = heldout_loss(w, heldout);
    w.freeze();
    if (report) *report = rep;
    return w;
}

// ---------------------------------------------------------------------------
// generation

static int pick_token(const std::vector<float>& logits, const SampleConfig& sc, std::mt19937& rng) {
    const int v = static_cast<int>(logits.size());
    if (sc.mode == SampleMode::greedy ||
        (sc.mode == SampleMode::temperature && sc.temperature <= 1e-6f)) {
        int best = 0;
        for (int i = 1; i < v; ++i)
            if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
        return best;
    }
    std::vector<int> cand(static_cast<size_t>(v));
    for (int i = 0; i < v; ++i) cand[static_cast<size_t>(i)] = i;
    if (sc.mode == SampleMode::top_k && sc.top_k > 0 && sc.top_k < v) {
        std::partial_sort(cand.begin(), cand.begin() + sc.top_k, cand.end(),
                          [&](int a, int b) { return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)]; });
        cand.resize(static_cast<size_t>(sc.top_k));
    }
    const float t = sc.mode == SampleMode::temperature ? sc.temperature : 1.0f;
    float mx = -1e30f;
    for (int i : cand) mx = std::max(mx, logits[static_cast<size_t>(i)] / t);
    std::vector<double> probs;
    double denom = 0.0;
    for (int i : cand) {
        const double p = std::exp(static_cast<double>(logits[static_cast<size_t>(i)] / t - mx));
        probs.push_back(p);
        denom += p;
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double r = u(rng) * denom;
    for (size_t i = 0; i < cand.size(); ++i) {
        r -= probs[i];
        if (r <= 0.0) return cand[i];
    }
    return cand.back();
}

std::vector<int> generate(const ForwardFn& forward, std::vector<int> prompt, int max_new,
                          const SampleConfig& sample, int64_t max_seq_len) {
    if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
    std::mt19937 rng(static_cast<uint32_t>(sample.seed));
    std::vector<int> out;
    std::vector<int> seq = std::move(prompt);
    for (int i = 0; i < max_new; ++i) {
        if (static_cast<int64_t>(seq.size()) >= max_seq_len) break;
        Tape g;
        Tensor logits = forward(g, seq);
        const int64_t v = logits.dim(1);
        std::vector<float> last(logits.data() + (logits.dim(0) - 1) * v,
                                logits.data() + logits.dim(0) * v);
        const int next = pick_token(last, sample, rng);
        if (next == Tokenizer::eos_id) break;
        seq.push_back(next);
        out.push_back(next);
    }
    return out;
}

}  // namespace padapt
