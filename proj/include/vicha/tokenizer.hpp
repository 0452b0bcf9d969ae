#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace vicha {

// Deterministic whitespace tokenizer: lowercase, split on whitespace, fixed
// special ids. Vocabulary words get ids 4.. in sorted order, so the id space
// depends only on the word set.
class Tokenizer {
public:
    static constexpr int kCls = 0;
    static constexpr int kMask = 1;
    static constexpr int kPad = 2;
    static constexpr int kUnk = 3;
    static constexpr int kNumSpecials = 4;

    Tokenizer() = default;
    static Tokenizer from_captions(const std::vector<std::string>& captions);
    static Tokenizer from_vocab(const std::vector<std::string>& words);

    // content-token ids only; [CLS] is prepended by the text encoder
    std::vector<int> encode(const std::string& text) const;
    std::string decode_token(int id) const;

    int vocab_size() const { return kNumSpecials + static_cast<int>(words_.size()); }
    bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }
    const std::vector<std::string>& words() const { return words_; }

    static std::vector<std::string> split_lower(const std::string& text);

private:
    std::vector<std::string> words_;                // sorted
    std::unordered_map<std::string, int> word_id_;  // word -> id (>= 4)
};

}  // namespace vicha
