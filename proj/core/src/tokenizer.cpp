#include "padapt/tokenizer.hpp"

namespace padapt {

std::vector<int> Tokenizer::encode(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids)
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    return out;
}

}  // namespace padapt
