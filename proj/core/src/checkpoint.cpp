#include "padapt/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace padapt {

using nlohmann::json;

namespace {

json backbone_cfg_json(const BackboneConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                {"ffn_hidden", c.ffn_hidden}, {"max_seq_len", c.max_seq_len},
                {"rope_base", c.rope_base},   {"norm_eps", c.norm_eps}};
}

BackboneConfig backbone_cfg_from_json(const json& j) {
    BackboneConfig c;
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.n_layers = j.at("n_layers").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.ffn_hidden = j.at("ffn_hidden").get<int64_t>();
    c.max_seq_len = j.at("max_seq_len").get<int64_t>();
    c.rope_base = j.at("rope_base").get<float>();
    c.norm_eps = j.at("norm_eps").get<float>();
    return c;
}

void write_container(const std::string& path, json header,
                     const std::vector<std::pair<std::string, Tensor>>& tensors) {
    json manifest = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        manifest.push_back({{"name", name},
                            {"shape", t.shape()},
                            {"dtype", "f32"},
                            {"byte_offset", offset}});
        offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
    }
    header["format_version"] = checkpoint_format_version;
    header["tensors"] = std::move(manifest);
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write(checkpoint_magic, 8);
    const uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

struct Container {
    json header;
    std::vector<char> payload;
};

Container read_container(const std::string& path, const std::string& expect_section) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, checkpoint_magic, 8) != 0)
        throw std::runtime_error("checkpoint format error: bad magic bytes in " + path);
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen == 0 || hlen > (1ull << 30))
        throw std::runtime_error("checkpoint format error: bad header length in " + path);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw std::runtime_error("checkpoint format error: truncated header in " + path);

    Container c;
    try {
        c.header = json::parse(hs);
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint format error: invalid header JSON in " + path);
    }
    const int version = c.header.value("format_version", -1);
    if (version != checkpoint_format_version)
        throw std::runtime_error("checkpoint format error: unknown format_version " +
                                 std::to_string(version) + " in " + path);
    const std::string section = c.header.value("section", "");
    if (section != expect_section)
        throw std::runtime_error("checkpoint format error: expected section '" + expect_section +
                                 "', found '" + section + "' in " + path);

    c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return c;
}

// name -> (shape, byte_offset)
std::map<std::string, std::pair<Shape, uint64_t>> manifest_index(const json& header) {
    std::map<std::string, std::pair<Shape, uint64_t>> idx;
    for (const auto& e : header.at("tensors")) {
        Shape s = e.at("shape").get<Shape>();
        if (e.value("dtype", "") != "f32")
            throw std::runtime_error("checkpoint format error: unsupported dtype");
        idx[e.at("name").get<std::string>()] = {std::move(s), e.at("byte_offset").get<uint64_t>()};
    }
    return idx;
}

void fill_tensors(const Container& c,
                  const std::vector<std::pair<std::string, Tensor>>& tensors) {
    auto idx = manifest_index(c.header);
    for (const auto& [name, t] : tensors) {
        auto it = idx.find(name);
        if (it == idx.end())
            throw std::runtime_error("checkpoint format error: missing tensor '" + name + "'");
        const auto& [shape, offset] = it->second;
        if (shape != t.shape())
            throw std::runtime_error("checkpoint shape mismatch for '" + name + "': file has " +
                                     shape_str(shape) + ", model expects " + shape_str(t.shape()));
        const uint64_t bytes = static_cast<uint64_t>(t.numel()) * sizeof(float);
        if (offset + bytes > c.payload.size())
            throw std::runtime_error("checkpoint format error: payload truncated at '" + name + "'");
        Tensor tt = t;
        std::memcpy(tt.data(), c.payload.data() + offset, bytes);
    }
}

}  // namespace

void save_backbone(const BackboneWeights& w, const std::string& path) {
    json header;
    header["section"] = "backbone";
    header["config"] = backbone_cfg_json(w.config);
    write_container(path, std::move(header), w.named_tensors());
}

BackboneWeights load_backbone(const std::string& path) {
    Container c = read_container(path, "backbone");
    BackboneConfig cfg = backbone_cfg_from_json(c.header.at("config"));
    cfg.validate();
    BackboneWeights w = BackboneWeights::init(cfg, 0);
    fill_tensors(c, w.named_tensors());
    w.freeze();
    return w;
}

void save_adapter(const AdapterState& a, const BackboneConfig& backbone_cfg,
                  const std::string& path) {
    json header;
    header["section"] = "adapter";
    header["config"] = backbone_cfg_json(backbone_cfg);
    header["adapter_config"] = {{"prompt_len", a.config.prompt_len},
                                {"adapted_layers", a.config.adapted_layers},
                                {"fusion_depth", a.config.fusion_depth},
                                {"visual_len", a.config.visual_len},
                                {"feat_dim", a.config.feat_dim}};
    write_container(path, std::move(header), a.named_tensors());
}

AdapterState load_adapter(const std::string& path, const BackboneWeights& backbone) {
    Container c = read_container(path, "adapter");
    BackboneConfig file_cfg = backbone_cfg_from_json(c.header.at("config"));
    if (!(file_cfg == backbone.config)) {
        throw std::runtime_error(
            "adapter checkpoint config mismatch: file built for d_model=" +
            std::to_string(file_cfg.d_model) + ", n_layers=" + std::to_string(file_cfg.n_layers) +
            "; backbone has d_model=" + std::to_string(backbone.config.d_model) +
            ", n_layers=" + std::to_string(backbone.config.n_layers));
    }
    const json& aj = c.header.at("adapter_config");
    AdapterConfig acfg;
    acfg.prompt_len = aj.at("prompt_len").get<int64_t>();
    acfg.adapted_layers = aj.at("adapted_layers").get<int64_t>();
    acfg.fusion_depth = aj.at("fusion_depth").get<int64_t>();
    acfg.visual_len = aj.at("visual_len").get<int64_t>();
    acfg.feat_dim = aj.at("feat_dim").get<int64_t>();
    AdapterState a = AdapterState::init(backbone, acfg, 0);
    fill_tensors(c, a.named_tensors());
    return a;
}

}  // namespace padapt
