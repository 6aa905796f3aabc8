#include "padapt/trainer.hpp"

#include "padapt/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

namespace padapt {

using nlohmann::json;

static bool is_caption_side(const std::string& name) {
    return name.rfind("visual.", 0) == 0 || name.find(".visual.") != std::string::npos;
}

ParamGroupRegistry ParamGroupRegistry::build(const AdapterState& adapter) {
    ParamGroupRegistry reg;
    for (const auto& [name, t] : adapter.named_tensors()) {
        if (name.empty())
            throw std::runtime_error("param registry: unnamed learnable tensor cannot be assigned");
        if (is_caption_side(name))
            reg.caption_group.insert(name);
        else
            reg.instruction_group.insert(name);
    }
    return reg;
}

const char* to_string(StreamTag tag) {
    return tag == StreamTag::caption ? "caption" : "instruction";
}

const char* to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::joint: return "joint";
        case TrainMode::caption_only: return "caption_only";
        case TrainMode::instruction_only: return "instruction_only";
        case TrainMode::naive_mixed: return "naive_mixed";
        case TrainMode::v1_style: return "v1_style";
    }
    return "?";
}

TrainMode parse_train_mode(const std::string& s) {
    if (s == "joint") return TrainMode::joint;
    if (s == "caption_only") return TrainMode::caption_only;
    if (s == "instruction_only") return TrainMode::instruction_only;
    if (s == "naive_mixed") return TrainMode::naive_mixed;
    if (s == "v1_style") return TrainMode::v1_style;
    throw std::invalid_argument("unknown training mode: " + s);
}

TrainItem make_caption_item(const CaptionExample& ex, const AdapterConfig& ad,
                            int64_t max_seq_len, uint64_t encoder_seed, uint64_t salt) {
    // half canonical caption question, half paraphrases: the visual prefix has
    // to answer a spread of question phrasings, not one surface form
    const std::string question =
        salt % 2 == 1 ? describe_question_variant(salt / 2) : std::string(caption_question);
    RenderedPrompt p = format_prompt(PromptKind::caption, question, "", ex.caption, std::nullopt,
                                     max_seq_len - ad.visual_len);
    TrainItem item;
    item.tokens = std::move(p.tokens);
    item.loss_mask = std::move(p.loss_mask);
    item.features = encode_image(ex.image, ad.feat_dim, encoder_seed);
    return item;
}

TrainItem make_instruction_item(const InstructionExample& ex, int64_t max_seq_len) {
    RenderedPrompt p = format_instruction_prompt(ex, max_seq_len);
    TrainItem item;
    item.tokens = std::move(p.tokens);
    item.loss_mask = std::move(p.loss_mask);
    return item;
}

double TrainReport::mean_loss(StreamTag tag, double from_frac, double to_frac) const {
    std::vector<float> losses;
    for (const auto& s : steps)
        if (s.stream == tag) losses.push_back(s.loss);
    if (losses.empty()) return 0.0;
    const auto n = static_cast<double>(losses.size());
    const size_t lo = static_cast<size_t>(from_frac * n);
    const size_t hi = std::max(lo + 1, static_cast<size_t>(to_frac * n));
    double acc = 0.0;
    size_t count = 0;
    for (size_t i = lo; i < hi && i < losses.size(); ++i) {
        acc += losses[i];
        ++count;
    }
    return count ? acc / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------

static TrainConfig with_group_lr(TrainConfig hp, float group_lr) {
    if (group_lr > 0.0f) hp.lr = group_lr;
    return hp;
}

static std::vector<Tensor> group_params(const AdapterState& adapter,
                                        const std::set<std::string>& names) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : adapter.named_tensors())
        if (names.count(name)) out.push_back(t);
    return out;
}

AdapterTrainer::AdapterTrainer(const BackboneWeights& backbone, AdapterState& adapter,
                               const TrainConfig& hp, TrainMode mode)
    : backbone_(backbone),
      adapter_(adapter),
      hp_(hp),
      mode_(mode),
      registry_(ParamGroupRegistry::build(adapter)),
      caption_opt_(group_params(adapter, registry_.caption_group),
                   with_group_lr(hp, hp.caption_lr)),
      instruction_opt_(group_params(adapter, registry_.instruction_group),
                       with_group_lr(hp, hp.instruction_lr)) {
    if (!backbone.frozen())
        throw std::invalid_argument("AdapterTrainer: backbone must be frozen before adaptation");
    for (const auto& [name, t] : adapter.named_tensors()) all_params_.push_back(t);
}

float AdapterTrainer::train_step(const std::vector<TrainItem>& batch, StreamTag stream) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    for (Tensor& p : all_params_) p.zero_grad();

    double total_loss = 0.0;
    for (const TrainItem& item : batch) {
        if (item.tokens.size() < 2) throw std::invalid_argument("train_step: item too short");
        std::vector<int> inputs(item.tokens.begin(), item.tokens.end() - 1);
        std::vector<int> targets(item.tokens.begin() + 1, item.tokens.end());
        std::vector<uint8_t> mask(item.loss_mask.begin() + 1, item.loss_mask.end());

        Tape g;
        const Tensor* feats = item.features.defined() ? &item.features : nullptr;
        Tensor logits = mode_ == TrainMode::v1_style
                            ? forward_v1_style(g, backbone_, adapter_, inputs, feats)
                            : forward_adapted(g, backbone_, adapter_, inputs, feats);
        Tensor loss = g.cross_entropy_masked(logits, targets, mask);
        g.backward(loss);
        total_loss += loss.item();
    }
    total_loss /= static_cast<double>(batch.size());
    if (!std::isfinite(total_loss))
        throw std::runtime_error("train_step: non-finite loss at step " +
                                 std::to_string(step_index_) + " (" + to_string(stream) +
                                 " batch)");
    for (Tensor& p : all_params_)
        if (p.has_grad())
            for (int64_t j = 0; j < p.numel(); ++j)
                p.grad()[j] /= static_cast<float>(batch.size());

    const bool update_caption =
        mode_ == TrainMode::naive_mixed || mode_ == TrainMode::v1_style ||
        stream == StreamTag::caption;
    const bool update_instruction =
        mode_ == TrainMode::naive_mixed || mode_ == TrainMode::v1_style ||
        stream == StreamTag::instruction;
    if (update_caption) caption_opt_.step();
    if (update_instruction) instruction_opt_.step();
    ++step_index_;
    return static_cast<float>(total_loss);
}

// ---------------------------------------------------------------------------

namespace {

// Seeded epoch shuffling over a fixed item list.
class ItemStream {
public:
    ItemStream(std::vector<TrainItem> items, uint64_t seed)
        : items_(std::move(items)), rng_(static_cast<uint32_t>(seed)) {
        if (items_.empty()) throw std::invalid_argument("training stream is empty");
        order_.resize(items_.size());
        std::iota(order_.begin(), order_.end(), size_t{0});
        reshuffle();
    }

    const TrainItem& next() {
        if (cursor_ >= order_.size()) reshuffle();
        return items_[order_[cursor_++]];
    }

private:
    void reshuffle() {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }
    std::vector<TrainItem> items_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
    std::mt19937 rng_;
};

}  // namespace

TrainReport joint_train(const BackboneWeights& backbone, AdapterState& adapter,
                        const std::vector<CaptionExample>& captions,
                        const std::vector<InstructionExample>& instructions,
                        const TrainConfig& hp, TrainMode mode, uint64_t encoder_seed,
                        std::ostream* step_log) {
    hp.validate();
    const bool needs_captions = mode != TrainMode::instruction_only;
    const bool needs_instructions = mode != TrainMode::caption_only;
    if (needs_captions && captions.empty())
        throw std::invalid_argument("joint_train: caption stream is empty");
    if (needs_instructions && instructions.empty())
        throw std::invalid_argument("joint_train: instruction stream is empty");

    const int64_t max_len = backbone.config.max_seq_len;
    std::vector<TrainItem> cap_items, ins_items;
    for (size_t i = 0; i < captions.size(); ++i)
        cap_items.push_back(
            make_caption_item(captions[i], adapter.config, max_len, encoder_seed, i));
    for (const auto& ex : instructions)
        ins_items.push_back(make_instruction_item(ex, max_len));

    std::optional<ItemStream> cap_stream, ins_stream;
    if (needs_captions) cap_stream.emplace(std::move(cap_items), hp.seed ^ 0xcafeu);
    if (needs_instructions) ins_stream.emplace(std::move(ins_items), hp.seed ^ 0x1234u);

    AdapterTrainer trainer(backbone, adapter, hp, mode);
    TrainReport report;
    for (int64_t s = 0; s < hp.steps; ++s) {
        StreamTag tag;
        if (mode == TrainMode::caption_only)
            tag = StreamTag::caption;
        else if (mode == TrainMode::instruction_only)
            tag = StreamTag::instruction;
        else
            tag = (s % (hp.ratio + 1)) < hp.ratio ? StreamTag::caption : StreamTag::instruction;

        std::vector<TrainItem> batch;
        ItemStream& stream = tag == StreamTag::caption ? *cap_stream : *ins_stream;
        for (int64_t b = 0; b < hp.batch_size; ++b) batch.push_back(stream.next());

        const float loss = trainer.train_step(batch, tag);
        report.steps.push_back({s, tag, loss, hp.lr});
        if (step_log) {
            json rec = {{"step", s}, {"stream", to_string(tag)}, {"loss", loss}, {"lr", hp.lr}};
            *step_log << rec.dump() << "\n";
        }
    }
    return report;
}

}  // namespace padapt
