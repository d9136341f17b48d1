#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace layerskip::testing {

// Deterministic toy English: templated sentences over small word lists.
inline std::string synthetic_sentence(std::mt19937_64& rng) {
  static const std::array<const char*, 12> subjects = {"the cat", "a dog",     "the old man", "my sister",
                                                      "the bird", "a farmer", "the teacher", "our neighbor",
                                                      "the child", "a sailor", "the queen",   "his friend"};
  static const std::array<const char*, 10> verbs = {"saw",     "found",  "liked", "carried", "painted",
                                                    "watched", "opened", "sold",  "cleaned", "wanted"};
  static const std::array<const char*, 12> objects = {"the red ball", "a small boat", "the green door", "an apple",
                                                     "the letter",   "a long rope",  "the window",     "a basket",
                                                     "the garden",   "a blue hat",   "the old map",    "some bread"};
  static const std::array<const char*, 8> places = {"in the morning", "near the river", "at the market",
                                                    "after dinner",   "by the sea",     "in the village",
                                                    "before noon",    "under the tree"};
  auto pick = [&](const auto& list) { return std::string(list[rng() % list.size()]); };
  std::string s = pick(subjects) + " " + pick(verbs) + " " + pick(objects);
  if (rng() % 2 == 0) s += " " + pick(places);
  s += ". ";
  s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

inline std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::string out;
  out.reserve(bytes + 64);
  while (out.size() < bytes) {
    out += synthetic_sentence(rng);
    if (rng() % 6 == 0) out += "\n";
  }
  out.resize(bytes);
  return out;
}

}  // namespace layerskip::testing
