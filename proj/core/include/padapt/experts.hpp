#pragma once

#include "padapt/adapter.hpp"
#include "padapt/backbone.hpp"
#include "padapt/synthworld.hpp"

#include <map>
#include <memory>
#include <string>
#include <tuple>

namespace padapt {

// Inference-time expert producing textual context for an image.
class Expert {
public:
    virtual ~Expert() = default;
    virtual std::string name() const = 0;
    virtual std::string describe(const SynthImage& image) const = 0;
};

// Lookup table from attribute tuple to injected context. Defaults to the
// ground-truth captions; arbitrary contexts (e.g. replayed OCR output) can be
// loaded from a JSON file.
class OracleExpert : public Expert {
public:
    static OracleExpert ground_truth();
    static OracleExpert from_json_file(const std::string& path);

    void set_context(const SynthImage& image, std::string context);

    std::string name() const override { return "oracle"; }
    std::string describe(const SynthImage& image) const override;

private:
    std::map<std::tuple<int, int, int>, std::string> table_;
};

// Reuses the (caption-trained) model itself as the captioning expert.
class SelfCaptionExpert : public Expert {
public:
    SelfCaptionExpert(const BackboneWeights& backbone, const AdapterState& adapter,
                      uint64_t encoder_seed)
        : backbone_(backbone), adapter_(adapter), encoder_seed_(encoder_seed) {}

    std::string name() const override { return "self"; }
    std::string describe(const SynthImage& image) const override;

private:
    const BackboneWeights& backbone_;
    const AdapterState& adapter_;
    uint64_t encoder_seed_;
};

struct ExpertAnswer {
    std::string text;
    bool used_fallback = false;  // expert produced empty context
};

// Greedy visual-instruction answering with optional expert context. An empty
// expert context falls back to the no-context path and flags it.
ExpertAnswer answer_with_expert(const BackboneWeights& backbone, const AdapterState& adapter,
                                const SynthImage& image, const std::string& instruction,
                                const Expert* expert, uint64_t encoder_seed);

// Greedy caption under the fixed caption template.
std::string caption_image(const BackboneWeights& backbone, const AdapterState& adapter,
                          const SynthImage& image, uint64_t encoder_seed);

}  // namespace padapt
