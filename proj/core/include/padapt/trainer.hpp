#pragma once

#include "padapt/adapter.hpp"
#include "padapt/backbone.hpp"
#include "padapt/config.hpp"
#include "padapt/optim.hpp"
#include "padapt/synthworld.hpp"

#include <iosfwd>
#include <set>
#include <string>
#include <vector>

namespace padapt {

// Disjoint partition of the adapter's learnable tensors: visual-side tensors
// are trained on caption data, everything else on instruction data.
struct ParamGroupRegistry {
    std::set<std::string> caption_group;
    std::set<std::string> instruction_group;

    static ParamGroupRegistry build(const AdapterState& adapter);
};

enum class StreamTag { caption, instruction };
enum class TrainMode { joint, caption_only, instruction_only, naive_mixed, v1_style };

const char* to_string(StreamTag tag);
const char* to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& s);

struct TrainItem {
    std::vector<int> tokens;
    std::vector<uint8_t> loss_mask;
    Tensor features;  // undefined for text-only items
};

TrainItem make_caption_item(const CaptionExample& ex, const AdapterConfig& ad,
                            int64_t max_seq_len, uint64_t encoder_seed, uint64_t salt = 0);
TrainItem make_instruction_item(const InstructionExample& ex, int64_t max_seq_len);

struct StepRecord {
    int64_t step = 0;
    StreamTag stream = StreamTag::caption;
    float loss = 0.0f;
    float lr = 0.0f;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    double mean_loss(StreamTag tag, double from_frac, double to_frac) const;
};

// Joint/ablation trainer over a frozen backbone. Each parameter group has its
// own optimizer; a step touches only the group(s) routed for its stream.
class AdapterTrainer {
public:
    AdapterTrainer(const BackboneWeights& backbone, AdapterState& adapter, const TrainConfig& hp,
                   TrainMode mode);

    float train_step(const std::vector<TrainItem>& batch, StreamTag stream);

    const ParamGroupRegistry& registry() const { return registry_; }

private:
    const BackboneWeights& backbone_;
    AdapterState& adapter_;
    TrainConfig hp_;
    TrainMode mode_;
    ParamGroupRegistry registry_;
    std::vector<Tensor> all_params_;
    AdamW caption_opt_, instruction_opt_;
    int64_t step_index_ = 0;
};

// Interleaves the two streams by the configured ratio (caption steps per
// instruction step); cycles each stream with a seeded reshuffle. Writes one
// JSONL record per step to step_log when given.
TrainReport joint_train(const BackboneWeights& backbone, AdapterState& adapter,
                        const std::vector<CaptionExample>& captions,
                        const std::vector<InstructionExample>& instructions,
                        const TrainConfig& hp, TrainMode mode, uint64_t encoder_seed,
                        std::ostream* step_log = nullptr);

}  // namespace padapt
