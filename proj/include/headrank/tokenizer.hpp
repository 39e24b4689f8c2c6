#pragma once

// Word-level tokenizer over a closed vocabulary with a byte fallback.
//
// Ids [0, 3) are reserved markers, [3, 131) are ASCII bytes used for any word
// not in the word list, and the remainder are whole words. The vocabulary is
// fixed at build time so checkpoints never need to carry it.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "headrank/errors.hpp"

namespace headrank {

using TokenId = std::uint32_t;

namespace vocabulary {

inline constexpr std::array<std::string_view, 96> kTopicWords = {
    "river",   "engine",  "garden",  "planet",  "violin",  "harbor",  "glacier", "copper",  "lantern", "meadow",
    "falcon",  "quartz",  "bridge",  "canyon",  "orchard", "pepper",  "saddle",  "tunnel",  "velvet",  "walnut",
    "anchor",  "beacon",  "candle",  "desert",  "ember",   "forest",  "granite", "helmet",  "island",  "jungle",
    "kettle",  "ladder",  "magnet",  "needle",  "oyster",  "parrot",  "quiver",  "rocket",  "signal",  "timber",
    "umbrella", "valley", "window",  "yogurt",  "zipper",  "almond",  "basket",  "cactus",  "dragon",  "easel",
    "fabric",  "goblet",  "hammer",  "igloo",   "jacket",  "kayak",   "lemon",   "marble",  "nectar",  "olive",
    "pillow",  "quill",   "radar",   "salmon",  "teapot",  "utensil", "vortex",  "wagon",   "yacht",   "zebra",
    "acorn",   "bamboo",  "cobalt",  "dolphin", "eclipse", "ferry",   "gravel",  "hazel",   "ivory",   "jasmine",
    "koala",   "lagoon",  "mosaic",  "nickel",  "onion",   "pebble",  "quarry",  "ribbon",  "spruce",  "thistle",
    "tulip",   "vapor",   "willow",  "xenon",   "yarrow",  "zephyr"};

inline constexpr std::array<std::string_view, 24> kFillerWords = {
    "the",  "a",    "of",   "and",  "in",   "on",   "with", "for",  "is",   "was",   "at",    "by",
    "from", "near", "over", "under", "some", "many", "old",  "new",  "small", "large", "this", "that"};

inline constexpr std::array<std::string_view, 7> kInstructionWords = {"rank",      "passages", "by",   "relevance",
                                                                      "to",        "query",    "n/a"};

}  // namespace vocabulary

class Tokenizer {
 public:
  static constexpr TokenId kInstruction = 0;
  static constexpr TokenId kDocument = 1;
  static constexpr TokenId kQuery = 2;
  static constexpr TokenId kByteBase = 3;
  static constexpr TokenId kWordBase = kByteBase + 128;

  static const Tokenizer& standard() {
    static const Tokenizer instance;
    return instance;
  }

  std::size_t vocab_size() const noexcept { return kWordBase + words_.size(); }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && is_space(text[i])) ++i;
      std::size_t j = i;
      while (j < text.size() && !is_space(text[j])) ++j;
      if (j > i) append_word(text.substr(i, j - i), out);
      i = j;
    }
    return out;
  }

  std::string token_text(TokenId id) const {
    if (id == kInstruction) return "[INST]";
    if (id == kDocument) return "[DOC]";
    if (id == kQuery) return "[QRY]";
    if (id < kWordBase) return std::string(1, static_cast<char>(id - kByteBase));
    const std::size_t w = id - kWordBase;
    if (w >= words_.size()) throw Error("tokenizer", "token id " + std::to_string(id) + " out of vocabulary");
    return words_[w];
  }

  bool is_word(std::string_view w) const { return index_.contains(std::string(w)); }

 private:
  Tokenizer() {
    auto add = [this](std::string_view w) {
      if (index_.contains(std::string(w))) return;
      index_.emplace(std::string(w), static_cast<TokenId>(kWordBase + words_.size()));
      words_.emplace_back(w);
    };
    for (auto w : vocabulary::kInstructionWords) add(w);
    for (auto w : vocabulary::kFillerWords) add(w);
    for (auto w : vocabulary::kTopicWords) add(w);
  }

  static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

  void append_word(std::string_view w, std::vector<TokenId>& out) const {
    if (auto it = index_.find(std::string(w)); it != index_.end()) {
      out.push_back(it->second);
      return;
    }
    for (unsigned char c : w) out.push_back(kByteBase + (c < 128 ? c : static_cast<unsigned char>('?')));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace headrank
