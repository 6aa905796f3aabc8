#pragma once

#include "padapt/adapter.hpp"
#include "padapt/tensor.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace padapt {

inline constexpr std::array<const char*, 4> shape_names = {"circle", "square", "triangle", "star"};
inline constexpr std::array<const char*, 4> color_names = {"red", "green", "blue", "yellow"};
inline constexpr std::array<const char*, 2> size_names = {"small", "large"};

struct SynthImage {
    int shape_id = 0;
    int color_id = 0;
    int size_id = 0;

    std::string caption() const;  // "a {size} {color} {shape}"
    static std::vector<SynthImage> universe();  // all 32 attribute tuples
    static SynthImage parse(const std::string& spec);  // "circle,red,small"
    bool operator==(const SynthImage&) const = default;
};

// Fixed frozen toy encoder: seeded linear map over the 10-dim one-hot
// attribute encoding. Deterministic and injective over the 32-image universe.
Tensor encode_image(const SynthImage& image, int64_t feat_dim, uint64_t encoder_seed);

struct InstructionExample {
    std::string instruction;
    std::string input;  // may be empty
    std::string output;
};

struct CaptionExample {
    SynthImage image;
    std::string caption;
};

std::vector<CaptionExample> gen_caption_dataset(int n, uint64_t seed);
std::vector<InstructionExample> gen_instruction_dataset(int n, uint64_t seed);

// Re-derives the expected output for a generated instruction (test oracle for
// the task rules: echo, reversal, color facts, letter counting).
std::optional<std::string> solve_instruction(const std::string& instruction);

// Synthetic pretraining text: rendered caption/instruction passages plus
// description-context QA passages, blank-line separated.
std::string gen_pretrain_corpus(int n_passages, uint64_t seed);

// JSONL dataset IO
void save_caption_jsonl(const std::string& path, const std::vector<CaptionExample>& data);
std::vector<CaptionExample> load_caption_jsonl(const std::string& path);
void save_instruction_jsonl(const std::string& path, const std::vector<InstructionExample>& data);
std::vector<InstructionExample> load_instruction_jsonl(const std::string& path);

// ---------------------------------------------------------------------------
// prompt templates

enum class PromptKind { instruction, caption, visual_instruction };

struct RenderedPrompt {
    std::vector<int> tokens;         // BOS + prompt bytes + response bytes + EOS
    std::vector<uint8_t> loss_mask;  // 1 exactly on response tokens and the EOS
    int64_t prompt_tokens = 0;       // tokens before the response region
};

inline constexpr const char* caption_question = "Describe the object in the image.";

// Canonical caption question or a paraphrase of it, picked by the salt.
std::string describe_question_variant(uint64_t salt);

RenderedPrompt format_prompt(PromptKind kind, const std::string& instruction,
                             const std::string& input, const std::string& response,
                             const std::optional<std::string>& expert_context,
                             int64_t max_seq_len);

RenderedPrompt format_caption_prompt(const CaptionExample& ex, int64_t max_seq_len);
RenderedPrompt format_instruction_prompt(const InstructionExample& ex, int64_t max_seq_len);

// ---------------------------------------------------------------------------
// evaluation

// The held-out question templates; these strings must not occur in any
// training example.
const std::array<std::string, 3>& vqa_question_templates();
bool mentions_vqa_template(const std::string& text);

// Greedy visual-instruction answering (response text only, trimmed at EOS or
// first newline).
std::string answer_visual_instruction(const BackboneWeights& backbone, const AdapterState& adapter,
                                      const SynthImage& image, const std::string& instruction,
                                      const std::optional<std::string>& context,
                                      uint64_t encoder_seed);

using AnswerFn =
    std::function<std::string(const SynthImage& image, const std::string& question)>;

// Harness shared between the model path and oracle self-tests: asks attribute
// questions about seeded random images, exact-matches the attribute word.
double eval_zero_shot_vqa_with(const AnswerFn& answer, int n_eval, uint64_t seed);

double eval_zero_shot_vqa(const BackboneWeights& backbone, const AdapterState& adapter, int n_eval,
                          uint64_t seed, uint64_t encoder_seed);

// Exact-match accuracy on freshly generated held-out instruction examples.
double eval_instruction_suite(const BackboneWeights& backbone, const AdapterState& adapter, int n,
                              uint64_t seed);

// Fraction of the 32-image universe whose generated caption contains the right
// color and shape words.
double eval_caption_match(const BackboneWeights& backbone, const AdapterState& adapter,
                          uint64_t encoder_seed);

}  // namespace padapt
