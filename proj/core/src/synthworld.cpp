#include "padapt/synthworld.hpp"

#include "padapt/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace padapt {

using nlohmann::json;

std::string SynthImage::caption() const {
    return std::string("a ") + size_names[static_cast<size_t>(size_id)] + " " +
           color_names[static_cast<size_t>(color_id)] + " " +
           shape_names[static_cast<size_t>(shape_id)];
}

std::vector<SynthImage> SynthImage::universe() {
    std::vector<SynthImage> all;
    for (int s = 0; s < 4; ++s)
        for (int c = 0; c < 4; ++c)
            for (int z = 0; z < 2; ++z) all.push_back({s, c, z});
    return all;
}

SynthImage SynthImage::parse(const std::string& spec) {
    std::stringstream ss(spec);
    std::string shape, color, size;
    if (!std::getline(ss, shape, ',') || !std::getline(ss, color, ',') ||
        !std::getline(ss, size, ','))
        throw std::invalid_argument("image spec must be 'shape,color,size', got: " + spec);
    auto find = [](const auto& names, const std::string& s, const char* what) {
        for (size_t i = 0; i < names.size(); ++i)
            if (s == names[i]) return static_cast<int>(i);
        throw std::invalid_argument(std::string("unknown ") + what + ": " + s);
    };
    return {find(shape_names, shape, "shape"), find(color_names, color, "color"),
            find(size_names, size, "size")};
}

Tensor encode_image(const SynthImage& image, int64_t feat_dim, uint64_t encoder_seed) {
    if (image.shape_id < 0 || image.shape_id >= 4 || image.color_id < 0 || image.color_id >= 4 ||
        image.size_id < 0 || image.size_id >= 2)
        throw std::invalid_argument("encode_image: attribute id out of range");
    // fixed [10 x feat_dim] map, regenerated from the seed on every call
    std::mt19937 gen(static_cast<uint32_t>(encoder_seed ^ 0xa5a5a5a5u));
    std::normal_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> map(static_cast<size_t>(10 * feat_dim));
    for (float& v : map) v = dist(gen);
    Tensor out = Tensor::zeros({feat_dim}, false);
    const int rows[3] = {image.shape_id, 4 + image.color_id, 8 + image.size_id};
    for (int r : rows)
        for (int64_t j = 0; j < feat_dim; ++j)
            out.data()[j] += map[static_cast<size_t>(r) * static_cast<size_t>(feat_dim) +
                                 static_cast<size_t>(j)];
    return out;
}

// ---------------------------------------------------------------------------
// datasets

namespace {

const std::vector<std::pair<std::string, std::string>>& color_facts() {
    static const std::vector<std::pair<std::string, std::string>> facts = {
        {"banana", "yellow"}, {"lemon", "yellow"},    {"corn", "yellow"},  {"sun", "yellow"},
        {"taxi", "yellow"},   {"grass", "green"},     {"leaf", "green"},   {"frog", "green"},
        {"lime", "green"},    {"pea", "green"},       {"emerald", "green"},{"sky", "blue"},
        {"ocean", "blue"},    {"blueberry", "blue"},  {"jeans", "blue"},   {"blood", "red"},
        {"tomato", "red"},    {"cherry", "red"},      {"rose", "red"},     {"brick", "red"}};
    return facts;
}

const std::vector<std::string>& word_list() {
    static const std::vector<std::string> words = {
        "apple",  "book",   "cloud", "dream",  "eagle", "forest", "garden", "house",
        "island", "jungle", "kitten", "lemon", "moon",  "night",  "orange", "puzzle",
        "river",  "stone",  "tiger",  "window"};
    return words;
}

}  // namespace

std::vector<CaptionExample> gen_caption_dataset(int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("gen_caption_dataset: n must be >= 1");
    std::mt19937 rng(static_cast<uint32_t>(seed ^ 0xc0ffee11u));
    std::uniform_int_distribution<int> shape(0, 3), color(0, 3), size(0, 1);
    std::vector<CaptionExample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        SynthImage img{shape(rng), color(rng), size(rng)};
        out.push_back({img, img.caption()});
    }
    return out;
}

std::vector<InstructionExample> gen_instruction_dataset(int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("gen_instruction_dataset: n must be >= 1");
    std::mt19937 rng(static_cast<uint32_t>(seed ^ 0x1457ab1eu));
    std::uniform_int_distribution<int> family(0, 3);
    std::uniform_int_distribution<size_t> word(0, word_list().size() - 1);
    std::uniform_int_distribution<size_t> fact(0, color_facts().size() - 1);
    std::vector<InstructionExample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        InstructionExample ex;
        switch (family(rng)) {
            case 0: {
                const std::string& w = word_list()[word(rng)];
                ex.instruction = "Repeat the word: " + w;
                ex.output = w;
                break;
            }
            case 1: {
                const std::string& w = word_list()[word(rng)];
                ex.instruction = "Spell " + w + " backwards.";
                ex.output = std::string(w.rbegin(), w.rend());
                break;
            }
            case 2: {
                const auto& [obj, col] = color_facts()[fact(rng)];
                ex.instruction = "What color is a " + obj + "?";
                ex.output = col;
                break;
            }
            default: {
                const std::string& w = word_list()[word(rng)];
                ex.instruction = "How many letters in " + w + "?";
                ex.output = std::to_string(w.size());
                break;
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

std::optional<std::string> solve_instruction(const std::string& instruction) {
    auto suffix_between = [&instruction](const std::string& pre,
                                         const std::string& post) -> std::optional<std::string> {
        if (instruction.rfind(pre, 0) != 0) return std::nullopt;
        const std::string rest = instruction.substr(pre.size());
        if (post.empty()) return rest;
        if (rest.size() < post.size() || rest.substr(rest.size() - post.size()) != post)
            return std::nullopt;
        return rest.substr(0, rest.size() - post.size());
    };
    if (auto w = suffix_between("Repeat the word: ", "")) return *w;
    if (auto w = suffix_between("Spell ", " backwards.")) return std::string(w->rbegin(), w->rend());
    if (auto w = suffix_between("What color is a ", "?")) {
        for (const auto& [obj, col] : color_facts())
            if (obj == *w) return col;
        return std::nullopt;
    }
    if (auto w = suffix_between("How many letters in ", "?")) return std::to_string(w->size());
    return std::nullopt;
}

std::string describe_question_variant(uint64_t salt) {
    // the canonical caption question plus paraphrases, so prefix reading is not
    // keyed to a single surface form; the canonical form gets extra weight
    static const char* variants[12] = {
        caption_question,
        caption_question,
        caption_question,
        "Describe the thing in the image.",
        "Describe the object in the picture.",
        "What is the object in the image?",
        "What is the thing in the picture?",
        "Describe the object in the scene.",
        "What is in the image?",
        "What do you see?",
        "Tell me about the object in the image.",
        "What does the image show?",
    };
    return variants[salt % 12];
}

std::string gen_pretrain_corpus(int n_passages, uint64_t seed) {
    if (n_passages < 1) throw std::invalid_argument("gen_pretrain_corpus: n must be >= 1");
    std::mt19937 rng(static_cast<uint32_t>(seed ^ 0x5eedc0deu));
    std::uniform_int_distribution<int> kind(0, 12);
    std::uniform_int_distribution<int> shape(0, 3), color(0, 3), size(0, 1);
    std::uniform_int_distribution<int> qa_attr(0, 2), qa_stem(0, 2), qa_obj(0, 3), qa_trail(0, 3);

    // question wordings are composed from independent stem/object/trailer parts
    // so context reading generalizes to unseen combinations; the held-out eval
    // phrasings are filtered below and never emitted
    static const char* attr_words[3] = {"color", "shape", "size"};
    static const char* obj_words[4] = {"it", "the object", "the thing", "the item"};
    static const char* trailers[4] = {"", " in the image", " in the picture", " in the scene"};
    auto compose_question = [&](int attr) {
        const std::string a = attr_words[attr];
        const int oi = qa_obj(rng);
        std::string obj = obj_words[oi];
        if (oi != 0) obj += trailers[qa_trail(rng)];  // "it in the image" reads badly
        std::string q;
        switch (qa_stem(rng)) {
            case 0: q = "What " + a + " is " + obj + "?"; break;
            case 1: q = "What is the " + a + " of " + obj + "?"; break;
            default: q = "Name the " + a + " of " + obj + "."; break;
        }
        if (mentions_vqa_template(q)) q = "What " + a + " is the object in the scene?";
        return q;
    };
    // context lines vary in word order and verbosity so reading them is forced
    // to be semantic rather than keyed to fixed byte positions
    std::uniform_int_distribution<int> ctx_form(0, 4);
    auto compose_context = [&](const SynthImage& im) {
        const std::string sh = shape_names[static_cast<size_t>(im.shape_id)];
        const std::string co = color_names[static_cast<size_t>(im.color_id)];
        const std::string sz = size_names[static_cast<size_t>(im.size_id)];
        switch (ctx_form(rng)) {
            case 0: return im.caption();
            case 1: return sz + " " + co + " " + sh;
            case 2: return "a " + co + " " + sh + ", " + sz;
            case 3: return sh + ", " + co + ", " + sz;
            default: return "the " + sh + " is " + co + " and " + sz;
        }
    };

    std::ostringstream out;
    for (int i = 0; i < n_passages; ++i) {
        if (i > 0) out << "\n\n";
        SynthImage img{shape(rng), color(rng), size(rng)};
        int k = kind(rng);
        if (k == 4 || k == 5) k = 2;  // context QA carries the load-bearing skill; sample it 3x
        switch (k) {
            case 0:
                out << "Q: " << describe_question_variant(rng()) << "\nA: " << img.caption();
                break;
            case 1: {
                auto ex = gen_instruction_dataset(1, rng());
                out << "Q: " << ex[0].instruction << "\nA: " << ex[0].output;
                break;
            }
            case 2: {
                const int attr = qa_attr(rng);
                const char* answer = attr == 0   ? color_names[static_cast<size_t>(img.color_id)]
                                     : attr == 1 ? shape_names[static_cast<size_t>(img.shape_id)]
                                                 : size_names[static_cast<size_t>(img.size_id)];
                out << "C: " << compose_context(img) << "\nQ: " << compose_question(attr)
                    << "\nA: " << answer;
                break;
            }
            case 3:
                out << "C: " << compose_context(img) << "\nQ: " << describe_question_variant(rng())
                    << "\nA: " << img.caption();
                break;
            case 6: {
                // direct attribute QA with no context line: the answer content is
                // unpredictable, but the answer frame (an attribute value of the
                // right kind) is learnable
                const int attr = qa_attr(rng);
                const char* answer = attr == 0   ? color_names[static_cast<size_t>(img.color_id)]
                                     : attr == 1 ? shape_names[static_cast<size_t>(img.shape_id)]
                                                 : size_names[static_cast<size_t>(img.size_id)];
                out << "Q: " << compose_question(attr) << "\nA: " << answer;
                break;
            }
            case 7: {
                // context after the question: content must be usable wherever it
                // appears in the sequence, not only at the very front
                const int attr = qa_attr(rng);
                const char* answer = attr == 0   ? color_names[static_cast<size_t>(img.color_id)]
                                     : attr == 1 ? shape_names[static_cast<size_t>(img.shape_id)]
                                                 : size_names[static_cast<size_t>(img.size_id)];
                out << "Q: " << compose_question(attr) << "\nC: " << compose_context(img)
                    << "\nA: " << answer;
                break;
            }
            case 8: {
                // multi-turn: one context serves both the description and an
                // attribute question
                const int attr = qa_attr(rng);
                const char* answer = attr == 0   ? color_names[static_cast<size_t>(img.color_id)]
                                     : attr == 1 ? shape_names[static_cast<size_t>(img.shape_id)]
                                                 : size_names[static_cast<size_t>(img.size_id)];
                out << "C: " << compose_context(img) << "\nQ: " << describe_question_variant(rng())
                    << "\nA: " << img.caption() << "\nQ: " << compose_question(attr)
                    << "\nA: " << answer;
                break;
            }
            case 9:
            case 10: {
                // instruction/response layout with a context line, one step of
                // surface form away from the adaptation prompt template
                const int attr = qa_attr(rng);
                const char* answer = attr == 0   ? color_names[static_cast<size_t>(img.color_id)]
                                     : attr == 1 ? shape_names[static_cast<size_t>(img.shape_id)]
                                                 : size_names[static_cast<size_t>(img.size_id)];
                out << "C: " << compose_context(img) << "\nInstruction:\n" << compose_question(attr)
                    << "\nResponse:\n" << answer;
                break;
            }
            case 11:
                out << "C: " << compose_context(img) << "\nInstruction:\n"
                    << describe_question_variant(rng()) << "\nResponse:\n" << img.caption();
                break;
            default: {
                const int attr = qa_attr(rng);
                const char* answer = attr == 0   ? color_names[static_cast<size_t>(img.color_id)]
                                     : attr == 1 ? shape_names[static_cast<size_t>(img.shape_id)]
                                                 : size_names[static_cast<size_t>(img.size_id)];
                out << "Instruction:\n" << compose_question(attr) << "\nResponse:\n" << answer;
                break;
            }
        }
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// JSONL

void save_caption_jsonl(const std::string& path, const std::vector<CaptionExample>& data) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& ex : data) {
        json j = {{"shape", shape_names[static_cast<size_t>(ex.image.shape_id)]},
                  {"color", color_names[static_cast<size_t>(ex.image.color_id)]},
                  {"size", size_names[static_cast<size_t>(ex.image.size_id)]},
                  {"caption", ex.caption}};
        out << j.dump() << "\n";
    }
}

std::vector<CaptionExample> load_caption_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open caption dataset: " + path);
    std::vector<CaptionExample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        SynthImage img = SynthImage::parse(j.at("shape").get<std::string>() + "," +
                                           j.at("color").get<std::string>() + "," +
                                           j.at("size").get<std::string>());
        out.push_back({img, j.at("caption").get<std::string>()});
    }
    return out;
}

void save_instruction_jsonl(const std::string& path, const std::vector<InstructionExample>& data) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& ex : data) {
        json j = {{"instruction", ex.instruction}, {"input", ex.input}, {"output", ex.output}};
        out << j.dump() << "\n";
    }
}

std::vector<InstructionExample> load_instruction_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open instruction dataset: " + path);
    std::vector<InstructionExample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        out.push_back({j.at("instruction").get<std::string>(), j.value("input", ""),
                       j.at("output").get<std::string>()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// prompt rendering

static RenderedPrompt render(const std::string& prefix, const std::string& response,
                             int64_t max_seq_len) {
    RenderedPrompt r;
    r.tokens.push_back(Tokenizer::bos_id);
    for (int t : Tokenizer::encode(prefix)) r.tokens.push_back(t);
    r.prompt_tokens = static_cast<int64_t>(r.tokens.size());
    r.loss_mask.assign(r.tokens.size(), 0);
    if (!response.empty()) {
        for (int t : Tokenizer::encode(response)) {
            r.tokens.push_back(t);
            r.loss_mask.push_back(1);
        }
        r.tokens.push_back(Tokenizer::eos_id);
        r.loss_mask.push_back(1);
    }
    if (static_cast<int64_t>(r.tokens.size()) > max_seq_len)
        throw std::invalid_argument("format_prompt: rendered prompt of " +
                                    std::to_string(r.tokens.size()) + " tokens exceeds limit " +
                                    std::to_string(max_seq_len));
    return r;
}

RenderedPrompt format_prompt(PromptKind kind, const std::string& instruction,
                             const std::string& input, const std::string& response,
                             const std::optional<std::string>& expert_context,
                             int64_t max_seq_len) {
    // single-turn instruction/response layout, distinct from the free-form
    // corpus dialect: the backbone only ever meets these markers during
    // adaptation, so instruction-following under them is learned, not inherited
    std::string prefix;
    if (kind == PromptKind::visual_instruction && expert_context && !expert_context->empty())
        prefix += "C: " + *expert_context + "\n";
    prefix += "### Instruction:\n" + instruction + "\n";
    if (!input.empty()) prefix += "### Input:\n" + input + "\n";
    prefix += "### Response:\n";
    return render(prefix, response, max_seq_len);
}

RenderedPrompt format_caption_prompt(const CaptionExample& ex, int64_t max_seq_len) {
    return format_prompt(PromptKind::caption, caption_question, "", ex.caption, std::nullopt,
                         max_seq_len);
}

RenderedPrompt format_instruction_prompt(const InstructionExample& ex, int64_t max_seq_len) {
    return format_prompt(PromptKind::instruction, ex.instruction, ex.input, ex.output, std::nullopt,
                         max_seq_len);
}

// ---------------------------------------------------------------------------
// evaluation

const std::array<std::string, 3>& vqa_question_templates() {
    static const std::array<std::string, 3> q = {"What color is the object in the image?",
                                                 "What shape is the object in the image?",
                                                 "What size is the object in the image?"};
    return q;
}

bool mentions_vqa_template(const std::string& text) {
    for (const auto& q : vqa_question_templates())
        if (text.find(q) != std::string::npos) return true;
    return false;
}

static std::string trim_answer(std::string s) {
    const size_t nl = s.find('\n');
    if (nl != std::string::npos) s.resize(nl);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.pop_back();
    size_t start = 0;
    while (start < s.size() && s[start] == ' ') ++start;
    return s.substr(start);
}

std::string answer_visual_instruction(const BackboneWeights& backbone, const AdapterState& adapter,
                                      const SynthImage& image, const std::string& instruction,
                                      const std::optional<std::string>& context,
                                      uint64_t encoder_seed) {
    const int64_t budget = backbone.config.max_seq_len - adapter.config.visual_len;
    RenderedPrompt p =
        format_prompt(PromptKind::visual_instruction, instruction, "", "", context, budget);
    Tensor features = encode_image(image, adapter.config.feat_dim, encoder_seed);
    ForwardFn fwd = [&](Tape& g, std::span<const int> toks) {
        return forward_adapted(g, backbone, adapter, toks, &features);
    };
    std::vector<int> out = generate(fwd, p.tokens, 32, SampleConfig{}, budget);
    return trim_answer(Tokenizer::decode(out));
}

double eval_zero_shot_vqa_with(const AnswerFn& answer, int n_eval, uint64_t seed) {
    if (n_eval < 1) throw std::invalid_argument("eval_zero_shot_vqa: n_eval must be >= 1");
    std::mt19937 rng(static_cast<uint32_t>(seed ^ 0xe7a1u));
    std::uniform_int_distribution<int> shape(0, 3), color(0, 3), size(0, 1);
    int correct = 0;
    for (int i = 0; i < n_eval; ++i) {
        SynthImage img{shape(rng), color(rng), size(rng)};
        const int attr = i % 3;
        const std::string& question = vqa_question_templates()[static_cast<size_t>(attr)];
        const char* expected = attr == 0   ? color_names[static_cast<size_t>(img.color_id)]
                               : attr == 1 ? shape_names[static_cast<size_t>(img.shape_id)]
                                           : size_names[static_cast<size_t>(img.size_id)];
        if (answer(img, question) == expected) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n_eval);
}

double eval_zero_shot_vqa(const BackboneWeights& backbone, const AdapterState& adapter, int n_eval,
                          uint64_t seed, uint64_t encoder_seed) {
    return eval_zero_shot_vqa_with(
        [&](const SynthImage& img, const std::string& question) {
            return answer_visual_instruction(backbone, adapter, img, question, std::nullopt,
                                             encoder_seed);
        },
        n_eval, seed);
}

double eval_instruction_suite(const BackboneWeights& backbone, const AdapterState& adapter, int n,
                              uint64_t seed) {
    auto examples = gen_instruction_dataset(n, seed);
    int correct = 0;
    for (const auto& ex : examples) {
        RenderedPrompt p = format_prompt(PromptKind::instruction, ex.instruction, ex.input, "",
                                         std::nullopt, backbone.config.max_seq_len);
        ForwardFn fwd = [&](Tape& g, std::span<const int> toks) {
            return forward_adapted(g, backbone, adapter, toks, nullptr);
        };
        std::vector<int> out = generate(fwd, p.tokens, 32, SampleConfig{},
                                        backbone.config.max_seq_len);
        if (trim_answer(Tokenizer::decode(out)) == ex.output) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

double eval_caption_match(const BackboneWeights& backbone, const AdapterState& adapter,
                          uint64_t encoder_seed) {
    const auto all = SynthImage::universe();
    int good = 0;
    for (const auto& img : all) {
        const std::string caption = answer_visual_instruction(
            backbone, adapter, img, caption_question, std::nullopt, encoder_seed);
        const bool color_ok =
            caption.find(color_names[static_cast<size_t>(img.color_id)]) != std::string::npos;
        const bool shape_ok =
            caption.find(shape_names[static_cast<size_t>(img.shape_id)]) != std::string::npos;
        if (color_ok && shape_ok) ++good;
    }
    return static_cast<double>(good) / static_cast<double>(all.size());
}

}  // namespace padapt
