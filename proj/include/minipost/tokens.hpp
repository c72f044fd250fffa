#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace minipost {

// Byte-level vocabulary: a handful of structural sentinels followed by the
// 256 raw byte values. Sentinel ids are load-bearing for packing, masking
// and the turn grammar; they never change.
namespace tok {
inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kSys = 2;
inline constexpr int kUsr = 3;
inline constexpr int kAsst = 4;
inline constexpr int kTool = 5;
inline constexpr int kSpecialCount = 6;
inline constexpr int kByteOffset = kSpecialCount;
inline constexpr int kVocabSize = kByteOffset + 256;

std::vector<int> encode_bytes(std::string_view text);

// Byte tokens back to text; sentinel ids are dropped.
std::string decode_text(std::span<const int> ids);

// Human-readable form with sentinel markers, for traces and error messages.
std::string decode_debug(std::span<const int> ids);
}  // namespace tok

// The unit that flows through the model, trainers and environment. The loss
// mask is either empty (no masking information) or exactly one flag per
// token; mask 1 marks tokens that carry loss/gradient.
struct TokenSequence {
    std::vector<int> ids;
    std::vector<std::uint8_t> loss_mask;

    TokenSequence() = default;
    explicit TokenSequence(std::vector<int> ids_in) : ids(std::move(ids_in)) {}
    TokenSequence(std::vector<int> ids_in, std::vector<std::uint8_t> mask)
        : ids(std::move(ids_in)), loss_mask(std::move(mask)) {}

    std::size_t size() const { return ids.size(); }
    bool has_mask() const { return !loss_mask.empty(); }

    void push_back(int id, std::uint8_t mask_bit) {
        ids.push_back(id);
        loss_mask.push_back(mask_bit);
    }

    // Appends another sequence, carrying its mask (a missing mask counts
    // as all-zero).
    void append(const TokenSequence& other);

    void validate() const;  // throws std::invalid_argument on mask size mismatch
};

}  // namespace minipost
