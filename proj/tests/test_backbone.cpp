#include "padapt/backbone.hpp"
#include "padapt/tokenizer.hpp"

#include "reference_model.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

using namespace padapt;

static BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ffn_hidden = 16;
    cfg.max_seq_len = 32;
    return cfg;
}

TEST_CASE("tokenizer round-trips byte strings") {
    const std::string s1 = "hello, world";
    CHECK(Tokenizer::decode(Tokenizer::encode(s1)) == s1);
    std::string all;
    for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
    CHECK(Tokenizer::decode(Tokenizer::encode(all)) == all);
    std::vector<int> with_specials = {Tokenizer::bos_id, 'h', 'i', Tokenizer::eos_id,
                                      Tokenizer::pad_id};
    CHECK(Tokenizer::decode(with_specials) == "hi");
}

TEST_CASE("forward_base is causal") {
    BackboneWeights w = BackboneWeights::init(tiny_config(), 42);
    std::vector<int> prefix = {1, 5, 7, 3};
    std::vector<int> longer = {1, 5, 7, 3, 9, 11};
    Tape g;
    Tensor a = forward_base(g, w, prefix);
    Tensor b = forward_base(g, w, longer);
    for (size_t t = 0; t < prefix.size(); ++t)
        for (int64_t v = 0; v < w.config.vocab_size; ++v)
            CHECK(a.data()[static_cast<int64_t>(t) * w.config.vocab_size + v] ==
                  b.data()[static_cast<int64_t>(t) * w.config.vocab_size + v]);
}

TEST_CASE("forward_base is deterministic and rejects overlong input") {
    BackboneWeights w = BackboneWeights::init(tiny_config(), 42);
    std::vector<int> toks = {Tokenizer::bos_id % 32};
    Tape g;
    Tensor a = forward_base(g, w, toks);
    Tensor b = forward_base(g, w, toks);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);

    std::vector<int> overlong(static_cast<size_t>(w.config.max_seq_len) + 1, 1);
    CHECK_THROWS_AS(forward_base(g, w, overlong), std::invalid_argument);
}

TEST_CASE("forward_base matches the scalar reference model (2-layer, d=8)") {
    BackboneWeights w = BackboneWeights::init(tiny_config(), 7);
    std::vector<int> toks = {3, 1, 4, 1, 5, 9, 2, 6};
    Tape g;
    Tensor logits = forward_base(g, w, toks);
    refmodel::RefAdapter none;
    refmodel::Mat ref = refmodel::forward(w, none, toks);
    double max_err = 0.0;
    for (size_t t = 0; t < toks.size(); ++t)
        for (int64_t v = 0; v < w.config.vocab_size; ++v)
            max_err = std::max(max_err,
                               std::fabs(ref[t][static_cast<size_t>(v)] -
                                         logits.data()[static_cast<int64_t>(t) * 32 + v]));
    CHECK(max_err < 1e-4);
}

TEST_CASE("rotary scores depend only on relative position") {
    std::mt19937 rng(19);
    Tensor q = testutil::randn({1, 8}, 1.0f, rng, false);
    Tensor k = testutil::randn({1, 8}, 1.0f, rng, false);
    auto score = [&](int64_t qi, int64_t kj) {
        Tape g;
        Tensor qr = g.rope(q, 4, 10000.0f, qi);
        Tensor kr = g.rope(k, 4, 10000.0f, kj);
        double dot = 0.0;
        for (int j = 0; j < 8; ++j)
            dot += static_cast<double>(qr.data()[j]) * kr.data()[j];
        return dot;
    };
    CHECK(score(5, 2) == doctest::Approx(score(9, 6)).epsilon(1e-4));
    CHECK(score(3, 3) == doctest::Approx(score(11, 11)).epsilon(1e-4));
    CHECK(score(2, 5) != doctest::Approx(score(2, 6)).epsilon(1e-6));
}

TEST_CASE("pretraining improves held-out loss deterministically") {
    BackboneConfig cfg = tiny_config();
    cfg.vocab_size = 259;  // byte tokenizer ids
    std::string corpus;
    const char* sentences[] = {"the cat sat", "a dog ran fast", "birds fly high",
                               "fish swim deep", "the sun is warm"};
    for (int i = 0; i < 20; ++i) {
        corpus += sentences[i % 5];
        corpus += "\n\n";
    }
    TrainConfig hp;
    hp.batch_size = 2;
    PretrainReport rep1, rep2;
    BackboneWeights w1 = pretrain_backbone(cfg, corpus, 40, 5, hp, &rep1);
    BackboneWeights w2 = pretrain_backbone(cfg, corpus, 40, 5, hp, &rep2);
    CHECK(rep1.heldout_final < rep1.heldout_initial);
    CHECK(w1.frozen());
    CHECK(w1.content_hash() == w2.content_hash());
    CHECK(rep1.losses == rep2.losses);
}

TEST_CASE("pretraining rejects an empty corpus") {
    TrainConfig hp;
    CHECK_THROWS_AS(pretrain_backbone(tiny_config(), "\n\n\n", 1, 0, hp), std::invalid_argument);
}

TEST_CASE("desk model memorizes a repeated sentence") {
    BackboneConfig cfg;  // desk defaults
    std::string corpus;
    for (int i = 0; i < 20; ++i) corpus += "the quick red fox jumps\n\n";
    TrainConfig hp;
    hp.batch_size = 2;
    PretrainReport rep;
    BackboneWeights w = pretrain_backbone(cfg, corpus, 400, 3, hp, &rep);
    CHECK(rep.heldout_final < 0.1f);

    // greedy continuation reproduces the memorized text
    auto fwd = [&](Tape& g, std::span<const int> toks) { return forward_base(g, w, toks); };
    std::vector<int> prompt = {Tokenizer::bos_id};
    for (int t : Tokenizer::encode("the quick")) prompt.push_back(t);
    SampleConfig sc;
    std::vector<int> out = generate(fwd, prompt, 16, sc, cfg.max_seq_len);
    std::string text = Tokenizer::decode(out);
    CHECK(text.substr(0, 8) == " red fox");
}

TEST_CASE("generation modes: greedy determinism and temperature limit") {
    BackboneWeights w = BackboneWeights::init(tiny_config(), 13);
    auto fwd = [&](Tape& g, std::span<const int> toks) { return forward_base(g, w, toks); };
    std::vector<int> prompt = {1, 2, 3};

    SampleConfig greedy;
    std::vector<int> g1 = generate(fwd, prompt, 8, greedy, 32);
    std::vector<int> g2 = generate(fwd, prompt, 8, greedy, 32);
    CHECK(g1 == g2);

    SampleConfig cold;
    cold.mode = SampleMode::temperature;
    cold.temperature = 1e-9f;
    cold.seed = 99;
    CHECK(generate(fwd, prompt, 8, cold, 32) == g1);
}

TEST_CASE("full tiny model gradients match finite differences") {
    BackboneConfig cfg = tiny_config();
    BackboneWeights w = BackboneWeights::init(cfg, 21);
    std::vector<int> toks = {2, 7, 1, 9, 4};
    std::vector<int> targets = {7, 1, 9, 4, 6};
    std::vector<uint8_t> mask = {1, 1, 1, 1, 1};

    std::vector<Tensor> params;
    for (auto& [name, t] : w.named_tensors()) params.push_back(t);
    auto res = testutil::finite_diff_check(
        params,
        [&](Tape& g) {
            return g.cross_entropy_masked(forward_base(g, w, toks), targets, mask);
        },
        12, 6,
        [&]() {
            refmodel::RefAdapter none;
            refmodel::Mat logits = refmodel::forward(w, none, toks);
            double loss = 0.0;
            for (size_t t = 0; t < toks.size(); ++t) {
                double mx = logits[t][0];
                for (double v : logits[t]) mx = std::max(mx, v);
                double denom = 0.0;
                for (double v : logits[t]) denom += std::exp(v - mx);
                loss += -(logits[t][static_cast<size_t>(targets[t])] - mx - std::log(denom));
            }
            return std::vector<double>{loss / static_cast<double>(toks.size())};
        });
    CHECK(res.coords_checked >= 200);
    CHECK(res.max_rel_err < 1e-3);
}
