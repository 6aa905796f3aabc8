#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace padapt {

// Byte-level tokenizer: 256 byte tokens plus BOS/EOS/PAD.
struct Tokenizer {
    static constexpr int bos_id = 256;
    static constexpr int eos_id = 257;
    static constexpr int pad_id = 258;
    static constexpr int vocab_size = 259;

    static std::vector<int> encode(std::string_view text);
    // Special tokens are skipped on decode.
    static std::string decode(std::span<const int> ids);
};

}  // namespace padapt
