#include "pop/tokenizer.hpp"

namespace pop {

std::vector<TokenId> encode_bytes(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char b : text) ids.push_back(static_cast<TokenId>(b) + tokens::kByteOffset);
  return ids;
}

std::vector<TokenId> encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(tokens::kBos);
  for (unsigned char b : text) ids.push_back(static_cast<TokenId>(b) + tokens::kByteOffset);
  return ids;
}

std::string decode(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id >= tokens::kByteOffset && id < static_cast<TokenId>(tokens::kVocabSize)) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id - tokens::kByteOffset)));
    }
  }
  return out;
}

}  // namespace pop
