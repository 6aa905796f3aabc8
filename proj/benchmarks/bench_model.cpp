#include "padapt/adapter.hpp"
#include "padapt/backbone.hpp"
#include "padapt/synthworld.hpp"
#include "padapt/tokenizer.hpp"

#include <benchmark/benchmark.h>

#include <numeric>
#include <vector>

using namespace padapt;

static std::vector<int> bench_tokens(int64_t len) {
    std::vector<int> toks(static_cast<size_t>(len));
    for (size_t i = 0; i < toks.size(); ++i)
        toks[i] = static_cast<int>('a' + (i * 7) % 26);
    return toks;
}

static void bm_matmul(benchmark::State& state) {
    const int64_t n = state.range(0);
    Tensor a = Tensor::full({n, n}, 0.5f);
    Tensor b = Tensor::full({n, n}, 0.25f);
    for (auto _ : state) {
        Tape g;
        benchmark::DoNotOptimize(g.matmul(a, b));
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(bm_matmul)->Arg(64)->Arg(128)->Arg(256);

static void bm_forward_base(benchmark::State& state) {
    BackboneWeights w = BackboneWeights::init(desk_preset().backbone, 1);
    w.freeze();
    std::vector<int> toks = bench_tokens(state.range(0));
    for (auto _ : state) {
        Tape g;
        benchmark::DoNotOptimize(forward_base(g, w, toks));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_forward_base)->Arg(32)->Arg(128)->Arg(250);

static void bm_forward_backward(benchmark::State& state) {
    RunConfig rc = desk_preset();
    BackboneWeights w = BackboneWeights::init(rc.backbone, 1);
    w.freeze();
    AdapterState a = AdapterState::init(w, rc.adapter, 2);
    std::vector<int> toks = bench_tokens(state.range(0));
    std::vector<int> targets(toks.begin() + 1, toks.end());
    targets.push_back(Tokenizer::eos_id);
    std::vector<uint8_t> mask(toks.size(), 1);
    for (auto _ : state) {
        Tape g;
        Tensor logits = forward_adapted(g, w, a, toks, nullptr);
        Tensor loss = g.cross_entropy_masked(logits, targets, mask);
        g.backward(loss);
        for (auto& [name, t] : a.named_tensors()) t.zero_grad();
        benchmark::DoNotOptimize(loss.item());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_forward_backward)->Arg(32)->Arg(128);

static void bm_adapted_visual_forward(benchmark::State& state) {
    RunConfig rc = desk_preset();
    BackboneWeights w = BackboneWeights::init(rc.backbone, 1);
    w.freeze();
    AdapterState a = AdapterState::init(w, rc.adapter, 2);
    Tensor feats = encode_image(SynthImage{1, 2, 0}, rc.adapter.feat_dim, 7);
    std::vector<int> toks = bench_tokens(state.range(0));
    for (auto _ : state) {
        Tape g;
        benchmark::DoNotOptimize(forward_adapted(g, w, a, toks, &feats));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_adapted_visual_forward)->Arg(32)->Arg(128);

static void bm_generate(benchmark::State& state) {
    RunConfig rc = desk_preset();
    BackboneWeights w = BackboneWeights::init(rc.backbone, 1);
    w.freeze();
    std::vector<int> prompt = Tokenizer::encode("Q: Name the color.\nA: ");
    ForwardFn fwd = [&](Tape& g, std::span<const int> t) { return forward_base(g, w, t); };
    const int max_new = static_cast<int>(state.range(0));
    int64_t produced = 0;
    for (auto _ : state) {
        std::vector<int> out = generate(fwd, prompt, max_new, SampleConfig{},
                                        rc.backbone.max_seq_len);
        produced += static_cast<int64_t>(out.size());
        benchmark::DoNotOptimize(out);
    }
    state.SetItemsProcessed(produced);
}
BENCHMARK(bm_generate)->Arg(8)->Arg(24);

BENCHMARK_MAIN();
