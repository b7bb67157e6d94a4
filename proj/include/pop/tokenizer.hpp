#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pop {

using TokenId = std::int32_t;

// Fixed byte-level vocabulary: three specials followed by the 256 byte values.
namespace tokens {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kByteOffset = 3;
inline constexpr std::size_t kVocabSize = 259;
}  // namespace tokens

// [BOS] followed by one token per byte.
std::vector<TokenId> encode(std::string_view text);
// Bytes only, without the BOS prefix.
std::vector<TokenId> encode_bytes(std::string_view text);
// Byte tokens back to bytes; special tokens are dropped.
std::string decode(std::span<const TokenId> ids);

}  // namespace pop
