#include "padapt/experts.hpp"

#include <json.hpp>

#include <fstream>
#include <stdexcept>

namespace padapt {

using nlohmann::json;

OracleExpert OracleExpert::ground_truth() {
    OracleExpert e;
    for (const SynthImage& img : SynthImage::universe()) e.set_context(img, img.caption());
    return e;
}

OracleExpert OracleExpert::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open oracle expert table: " + path);
    json j = json::parse(in);
    if (!j.is_array()) throw std::runtime_error("oracle expert table must be a JSON array");
    OracleExpert e;
    for (const auto& rec : j) {
        SynthImage img = SynthImage::parse(rec.at("shape").get<std::string>() + "," +
                                           rec.at("color").get<std::string>() + "," +
                                           rec.at("size").get<std::string>());
        e.set_context(img, rec.at("context").get<std::string>());
    }
    return e;
}

void OracleExpert::set_context(const SynthImage& image, std::string context) {
    table_[{image.shape_id, image.color_id, image.size_id}] = std::move(context);
}

std::string OracleExpert::describe(const SynthImage& image) const {
    auto it = table_.find({image.shape_id, image.color_id, image.size_id});
    return it == table_.end() ? std::string{} : it->second;
}

std::string SelfCaptionExpert::describe(const SynthImage& image) const {
    return caption_image(backbone_, adapter_, image, encoder_seed_);
}

ExpertAnswer answer_with_expert(const BackboneWeights& backbone, const AdapterState& adapter,
                                const SynthImage& image, const std::string& instruction,
                                const Expert* expert, uint64_t encoder_seed) {
    if (instruction.empty())
        throw std::invalid_argument("answer_with_expert: instruction must be non-empty");
    ExpertAnswer out;
    std::optional<std::string> context;
    if (expert) {
        std::string ctx = expert->describe(image);
        if (ctx.empty())
            out.used_fallback = true;
        else
            context = std::move(ctx);
    }
    out.text =
        answer_visual_instruction(backbone, adapter, image, instruction, context, encoder_seed);
    return out;
}

std::string caption_image(const BackboneWeights& backbone, const AdapterState& adapter,
                          const SynthImage& image, uint64_t encoder_seed) {
    return answer_visual_instruction(backbone, adapter, image, caption_question, std::nullopt,
                                     encoder_seed);
}

}  // namespace padapt
