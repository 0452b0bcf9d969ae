#include "vicha/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

namespace vicha {

std::vector<std::string> Tokenizer::split_lower(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Tokenizer Tokenizer::from_captions(const std::vector<std::string>& captions) {
    std::set<std::string> uniq;
    for (const auto& c : captions)
        for (auto& w : split_lower(c)) uniq.insert(w);
    return from_vocab(std::vector<std::string>(uniq.begin(), uniq.end()));
}

Tokenizer Tokenizer::from_vocab(const std::vector<std::string>& words) {
    Tokenizer t;
    t.words_ = words;
    std::sort(t.words_.begin(), t.words_.end());
    t.words_.erase(std::unique(t.words_.begin(), t.words_.end()), t.words_.end());
    for (size_t i = 0; i < t.words_.size(); ++i)
        t.word_id_[t.words_[i]] = kNumSpecials + static_cast<int>(i);
    return t;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split_lower(text)) {
        auto it = word_id_.find(w);
        ids.push_back(it == word_id_.end() ? kUnk : it->second);
    }
    return ids;
}

std::string Tokenizer::decode_token(int id) const {
    switch (id) {
        case kCls: return "[CLS]";
        case kMask: return "[MASK]";
        case kPad: return "[PAD]";
        case kUnk: return "[UNK]";
        default: break;
    }
    int w = id - kNumSpecials;
    if (w < 0 || w >= static_cast<int>(words_.size()))
        throw std::out_of_range("Tokenizer::decode_token: id outside the vocabulary");
    return words_[static_cast<size_t>(w)];
}

}  // namespace vicha
