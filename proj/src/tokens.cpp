#include "minipost/tokens.hpp"

#include <stdexcept>

namespace minipost {

namespace tok {

std::vector<int> encode_bytes(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(kByteOffset + static_cast<int>(c));
    }
    return out;
}

std::string decode_text(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id >= kByteOffset && id < kVocabSize) {
            out.push_back(static_cast<char>(id - kByteOffset));
        }
    }
    return out;
}

std::string decode_debug(std::span<const int> ids) {
    static const char* kNames[kSpecialCount] = {"<pad>", "<eos>", "<sys>",
                                                "<usr>", "<asst>", "<tool>"};
    std::string out;
    for (int id : ids) {
        if (id >= 0 && id < kSpecialCount) {
            out += kNames[id];
        } else if (id >= kByteOffset && id < kVocabSize) {
            out.push_back(static_cast<char>(id - kByteOffset));
        } else {
            out += "<bad:" + std::to_string(id) + ">";
        }
    }
    return out;
}

}  // namespace tok

void TokenSequence::append(const TokenSequence& other) {
    if (has_mask() || other.has_mask()) {
        if (!has_mask()) {
            loss_mask.assign(ids.size(), 0);
        }
        if (other.has_mask()) {
            loss_mask.insert(loss_mask.end(), other.loss_mask.begin(),
                             other.loss_mask.end());
        } else {
            loss_mask.insert(loss_mask.end(), other.ids.size(), 0);
        }
    }
    ids.insert(ids.end(), other.ids.begin(), other.ids.end());
}

void TokenSequence::validate() const {
    if (!loss_mask.empty() && loss_mask.size() != ids.size()) {
        throw std::invalid_argument(
            "TokenSequence: loss mask length " + std::to_string(loss_mask.size()) +
            " does not match token count " + std::to_string(ids.size()));
    }
}

}  // namespace minipost
