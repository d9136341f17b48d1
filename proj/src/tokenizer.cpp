#include "layerskip/tokenizer.hpp"

#include <stdexcept>

namespace layerskip {

std::vector<int> ByteTokenizer::encode(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<unsigned char>(c));
  return out;
}

std::string ByteTokenizer::decode(std::span<const int> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t == kEndOfText) continue;
    if (t < 0 || t > 255) throw std::out_of_range("token id " + std::to_string(t) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

}  // namespace layerskip
