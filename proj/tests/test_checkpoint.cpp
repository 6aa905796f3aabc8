#include "padapt/checkpoint.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

using namespace padapt;
namespace fs = std::filesystem;

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

static AdapterConfig tiny_adapter_config() {
    AdapterConfig cfg;
    cfg.prompt_len = 3;
    cfg.adapted_layers = 1;
    cfg.fusion_depth = 1;
    cfg.visual_len = 2;
    cfg.feat_dim = 5;
    return cfg;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("padapt_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

TEST_CASE("backbone checkpoint round-trip is bit-exact") {
    TempDir dir;
    BackboneWeights w = BackboneWeights::init(tiny_config(), 101);
    w.freeze();
    const std::string path = dir.file("backbone.padapt");
    save_backbone(w, path);
    BackboneWeights loaded = load_backbone(path);
    CHECK(loaded.config == w.config);
    CHECK(loaded.frozen());
    CHECK(loaded.content_hash() == w.content_hash());
}

TEST_CASE("adapter checkpoint round-trip is bit-exact") {
    TempDir dir;
    BackboneWeights w = BackboneWeights::init(tiny_config(), 5);
    w.freeze();
    AdapterState a = AdapterState::init(w, tiny_adapter_config(), 7);
    std::mt19937 rng(9);
    std::normal_distribution<float> dist(0.0f, 0.1f);
    for (auto& [name, t] : a.named_tensors())
        for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] += dist(rng);

    const std::string path = dir.file("adapter.padapt");
    save_adapter(a, w.config, path);
    AdapterState loaded = load_adapter(path, w);
    CHECK(loaded.config == a.config);
    CHECK(loaded.content_hash() == a.content_hash());
    // every tensor bitwise equal
    auto src = a.named_tensors();
    auto dst = loaded.named_tensors();
    REQUIRE(src.size() == dst.size());
    for (size_t i = 0; i < src.size(); ++i) {
        CHECK(src[i].first == dst[i].first);
        CHECK(src[i].second.vec() == dst[i].second.vec());
    }
}

TEST_CASE("corrupted magic bytes are rejected") {
    TempDir dir;
    BackboneWeights w = BackboneWeights::init(tiny_config(), 5);
    const std::string path = dir.file("bad.padapt");
    save_backbone(w, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXXXXXX", 8);
    }
    CHECK_THROWS_WITH_AS(load_backbone(path), doctest::Contains("bad magic"),
                         std::runtime_error);
}

TEST_CASE("unknown format_version is rejected") {
    TempDir dir;
    BackboneWeights w = BackboneWeights::init(tiny_config(), 5);
    const std::string path = dir.file("ver.padapt");
    save_backbone(w, path);
    // bump the version digit inside the JSON header
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const std::string needle = "\"format_version\":1";
    const size_t pos = bytes.find(needle);
    REQUIRE(pos != std::string::npos);
    bytes[pos + needle.size() - 1] = '9';
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    CHECK_THROWS_WITH_AS(load_backbone(path), doctest::Contains("format_version"),
                         std::runtime_error);
}

TEST_CASE("wrong section tag is rejected") {
    TempDir dir;
    BackboneWeights w = BackboneWeights::init(tiny_config(), 5);
    AdapterState a = AdapterState::init(w, tiny_adapter_config(), 7);
    const std::string path = dir.file("adapter.padapt");
    save_adapter(a, w.config, path);
    CHECK_THROWS_WITH_AS(load_backbone(path), doctest::Contains("section"), std::runtime_error);
}

TEST_CASE("adapter load with mismatched backbone config names both dims") {
    TempDir dir;
    BackboneWeights w = BackboneWeights::init(tiny_config(), 5);
    AdapterState a = AdapterState::init(w, tiny_adapter_config(), 7);
    const std::string path = dir.file("adapter.padapt");
    save_adapter(a, w.config, path);

    BackboneConfig other = tiny_config();
    other.d_model = 16;
    other.ffn_hidden = 32;
    BackboneWeights w2 = BackboneWeights::init(other, 5);
    CHECK_THROWS_WITH_AS(load_adapter(path, w2), doctest::Contains("d_model"),
                         std::runtime_error);
}

TEST_CASE("missing file is a clear error") {
    CHECK_THROWS_WITH_AS(load_backbone("/nonexistent/nope.padapt"),
                         doctest::Contains("cannot open"), std::runtime_error);
}
