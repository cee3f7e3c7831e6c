#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace salm {

// Reserved special-token ids. These occupy ids 0-4 in every vocabulary.
inline constexpr int32_t kPadId = 0;
inline constexpr int32_t kUnkId = 1;
inline constexpr int32_t kMaskId = 2;
inline constexpr int32_t kBosId = 3;
inline constexpr int32_t kEosId = 4;
inline constexpr int32_t kNumSpecials = 5;
inline constexpr int32_t kIgnoreIndex = -100;

inline constexpr std::string_view kSpecialTokens[kNumSpecials] = {"<pad>", "<unk>", "<mask>",
                                                                  "<bos>", "<eos>"};

// Word-final marker symbol. decode() turns it back into a single space.
inline constexpr std::string_view kEndOfWord = "</w>";

class Vocab {
 public:
  Vocab() = default;

  // Tokens listed by id; the first five must be the special tokens.
  static Vocab from_tokens(std::vector<std::string> tokens);

  int32_t size() const { return static_cast<int32_t>(id_to_token_.size()); }
  bool contains(std::string_view token) const { return token_to_id_.count(std::string(token)) > 0; }
  int32_t id_of(std::string_view token) const;  // kUnkId when absent
  const std::string& token(int32_t id) const;   // throws std::out_of_range
  bool is_special(int32_t id) const { return id >= 0 && id < kNumSpecials; }

  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int32_t> token_to_id_;
};

// Ordered merge rules; position in the list is the rank.
struct MergeTable {
  std::vector<std::pair<std::string, std::string>> merges;

  // rank lookup, built lazily by Tokenizer
};

struct BpeTrainResult {
  Vocab vocab;
  MergeTable merges;
};

// Greedy byte-pair-encoding training. Words are whitespace-pretokenized into
// UTF-8 codepoint symbols plus a trailing end-of-word marker. The most
// frequent adjacent pair is merged each round, ties broken by lexicographic
// (left, right); training stops when the vocabulary budget is reached or no
// pair occurs at least twice.
BpeTrainResult train_bpe(const std::vector<std::string>& sentences, int32_t vocab_size);

class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(Vocab vocab, MergeTable merges);

  const Vocab& vocab() const { return vocab_; }
  const MergeTable& merges() const { return merges_; }

  // Whitespace pretokenization, merges applied in rank order, unknown symbols
  // mapped to <unk>. Never emits specials other than <unk>.
  std::vector<int32_t> encode(std::string_view text) const;

  // Inverse of encode up to whitespace normalization. <pad>/<bos>/<eos> are
  // dropped; <mask> and <unk> render as their literal text.
  std::string decode(std::span<const int32_t> ids) const;

  // Token text with end-of-word markers stripped; "" for the bare marker.
  std::string decode_token(int32_t id) const;

  void save(const std::filesystem::path& vocab_file, const std::filesystem::path& merges_file) const;
  static Tokenizer load(const std::filesystem::path& vocab_file,
                        const std::filesystem::path& merges_file);

 private:
  Vocab vocab_;
  MergeTable merges_;
  std::unordered_map<std::string, int32_t> rank_;  // "left\nright" -> rank

  std::vector<std::string> merge_word(std::vector<std::string> symbols) const;
};

// Splits on ASCII whitespace, collapsing runs; no empty words.
std::vector<std::string> split_words(std::string_view text);

// One UTF-8 codepoint per entry; invalid bytes pass through as single-byte
// symbols.
std::vector<std::string> utf8_symbols(std::string_view word);

bool valid_utf8(std::string_view text);

}  // namespace salm
