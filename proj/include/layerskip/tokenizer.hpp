#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace layerskip {

/// Byte-level tokenizer: ids 0..255 are raw bytes, 256 is end-of-text.
class ByteTokenizer {
 public:
  static constexpr int kEndOfText = 256;
  static constexpr int kVocabSize = 257;

  static std::vector<int> encode(std::string_view text);
  /// End-of-text ids are skipped; any other id outside [0, 256) throws.
  static std::string decode(std::span<const int> tokens);
};

}  // namespace layerskip
