#include "salm/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

#include "salm/errors.hpp"

namespace salm {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

std::string pair_key(std::string_view left, std::string_view right) {
  std::string k(left);
  k.push_back('\n');
  k.append(right);
  return k;
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

std::vector<std::string> utf8_symbols(std::string_view word) {
  std::vector<std::string> symbols;
  size_t i = 0;
  while (i < word.size()) {
    const auto b = static_cast<unsigned char>(word[i]);
    size_t len = 1;
    if ((b & 0x80) == 0x00)
      len = 1;
    else if ((b & 0xE0) == 0xC0)
      len = 2;
    else if ((b & 0xF0) == 0xE0)
      len = 3;
    else if ((b & 0xF8) == 0xF0)
      len = 4;
    if (i + len > word.size()) len = 1;
    // continuation bytes must match, otherwise fall back to a single byte
    for (size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(word[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    symbols.emplace_back(word.substr(i, len));
    i += len;
  }
  return symbols;
}

bool valid_utf8(std::string_view text) {
  size_t i = 0;
  while (i < text.size()) {
    const auto b = static_cast<unsigned char>(text[i]);
    size_t len;
    if ((b & 0x80) == 0x00)
      len = 1;
    else if ((b & 0xE0) == 0xC0)
      len = 2;
    else if ((b & 0xF0) == 0xE0)
      len = 3;
    else if ((b & 0xF8) == 0xF0)
      len = 4;
    else
      return false;
    if (i + len > text.size()) return false;
    for (size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) return false;
    i += len;
  }
  return true;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kNumSpecials) throw ConfigError("vocabulary must contain the special tokens");
  for (int32_t i = 0; i < kNumSpecials; ++i)
    if (tokens[static_cast<size_t>(i)] != kSpecialTokens[i])
      throw ConfigError("vocabulary id " + std::to_string(i) + " must be '" +
                        std::string(kSpecialTokens[i]) + "', got '" + tokens[static_cast<size_t>(i)] + "'");
  Vocab v;
  v.id_to_token_ = std::move(tokens);
  for (size_t i = 0; i < v.id_to_token_.size(); ++i) {
    auto [it, inserted] = v.token_to_id_.emplace(v.id_to_token_[i], static_cast<int32_t>(i));
    if (!inserted) throw ConfigError("duplicate vocabulary token '" + v.id_to_token_[i] + "'");
  }
  return v;
}

int32_t Vocab::id_of(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int32_t id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " out of range");
  return id_to_token_[static_cast<size_t>(id)];
}

BpeTrainResult train_bpe(const std::vector<std::string>& sentences, int32_t vocab_size) {
  // word frequency over whitespace tokens
  std::map<std::string, int64_t> word_freq;
  for (const auto& s : sentences)
    for (auto& w : split_words(s)) word_freq[w] += 1;
  if (word_freq.empty()) throw ConfigError("cannot train a vocabulary on an empty corpus");

  struct Word {
    std::vector<std::string> symbols;
    int64_t freq;
  };
  std::vector<Word> words;
  std::set<std::string> base_symbols;
  for (auto& [text, freq] : word_freq) {
    auto symbols = utf8_symbols(text);
    symbols.emplace_back(kEndOfWord);
    for (const auto& s : symbols) base_symbols.insert(s);
    words.push_back({std::move(symbols), freq});
  }

  const int64_t base_budget = kNumSpecials + static_cast<int64_t>(base_symbols.size());
  if (vocab_size < base_budget)
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is below the " +
                      std::to_string(base_budget) + " specials plus base symbols of this corpus");

  std::vector<std::string> tokens;
  tokens.reserve(static_cast<size_t>(vocab_size));
  for (auto sv : kSpecialTokens) tokens.emplace_back(sv);
  for (const auto& s : base_symbols) tokens.push_back(s);

  MergeTable merges;
  while (static_cast<int64_t>(tokens.size()) < vocab_size) {
    // count all adjacent pairs, weighted by word frequency
    std::map<std::pair<std::string, std::string>, int64_t> pair_freq;
    for (const auto& w : words)
      for (size_t i = 0; i + 1 < w.symbols.size(); ++i)
        pair_freq[{w.symbols[i], w.symbols[i + 1]}] += w.freq;

    // best pair: max count, ties by lexicographic (left, right). std::map
    // iterates in lexicographic order, so the first maximum wins the tie.
    const std::pair<std::string, std::string>* best = nullptr;
    int64_t best_count = 0;
    for (const auto& [pair, count] : pair_freq) {
      if (count > best_count) {
        best_count = count;
        best = &pair;
      }
    }
    if (!best || best_count < 2) break;

    const std::string merged = best->first + best->second;
    for (auto& w : words) {
      auto& s = w.symbols;
      for (size_t i = 0; i + 1 < s.size();) {
        if (s[i] == best->first && s[i + 1] == best->second) {
          s[i] = merged;
          s.erase(s.begin() + static_cast<std::ptrdiff_t>(i) + 1);
        } else {
          ++i;
        }
      }
    }
    merges.merges.push_back(*best);
    tokens.push_back(merged);
  }

  BpeTrainResult result;
  result.vocab = Vocab::from_tokens(std::move(tokens));
  result.merges = std::move(merges);
  return result;
}

Tokenizer::Tokenizer(Vocab vocab, MergeTable merges)
    : vocab_(std::move(vocab)), merges_(std::move(merges)) {
  for (size_t r = 0; r < merges_.merges.size(); ++r) {
    const auto& [left, right] = merges_.merges[r];
    if (!vocab_.contains(left + right))
      throw ConfigError("merge rule " + std::to_string(r) + " produces token '" + left + right +
                        "' absent from the vocabulary");
    rank_.emplace(pair_key(left, right), static_cast<int32_t>(r));
  }
}

std::vector<std::string> Tokenizer::merge_word(std::vector<std::string> symbols) const {
  while (symbols.size() >= 2) {
    int32_t best_rank = std::numeric_limits<int32_t>::max();
    for (size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = rank_.find(pair_key(symbols[i], symbols[i + 1]));
      if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<int32_t>::max()) break;
    const auto& [left, right] = merges_.merges[static_cast<size_t>(best_rank)];
    const std::string merged = left + right;
    for (size_t i = 0; i + 1 < symbols.size();) {
      if (symbols[i] == left && symbols[i + 1] == right) {
        symbols[i] = merged;
        symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(i) + 1);
      } else {
        ++i;
      }
    }
  }
  return symbols;
}

std::vector<int32_t> Tokenizer::encode(std::string_view text) const {
  std::vector<int32_t> ids;
  for (const auto& word : split_words(text)) {
    auto symbols = utf8_symbols(word);
    symbols.emplace_back(kEndOfWord);
    for (const auto& s : merge_word(std::move(symbols))) ids.push_back(vocab_.id_of(s));
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const int32_t> ids) const {
  std::string out;
  for (int32_t id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    out += vocab_.token(id);  // throws on out-of-range ids
  }
  // end-of-word markers become single spaces
  std::string spaced;
  size_t i = 0;
  while (i < out.size()) {
    if (out.compare(i, kEndOfWord.size(), kEndOfWord) == 0) {
      spaced.push_back(' ');
      i += kEndOfWord.size();
    } else {
      spaced.push_back(out[i]);
      ++i;
    }
  }
  while (!spaced.empty() && spaced.back() == ' ') spaced.pop_back();
  return spaced;
}

std::string Tokenizer::decode_token(int32_t id) const {
  std::string text = vocab_.token(id);
  std::string out;
  size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, kEndOfWord.size(), kEndOfWord) == 0) {
      i += kEndOfWord.size();
    } else {
      out.push_back(text[i]);
      ++i;
    }
  }
  return out;
}

void Tokenizer::save(const std::filesystem::path& vocab_file,
                     const std::filesystem::path& merges_file) const {
  std::ofstream vf(vocab_file, std::ios::binary);
  if (!vf) throw std::runtime_error("cannot write " + vocab_file.string());
  for (const auto& t : vocab_.tokens()) vf << t << '\n';
  std::ofstream mf(merges_file, std::ios::binary);
  if (!mf) throw std::runtime_error("cannot write " + merges_file.string());
  for (const auto& [l, r] : merges_.merges) mf << l << ' ' << r << '\n';
}

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_file,
                          const std::filesystem::path& merges_file) {
  std::ifstream vf(vocab_file, std::ios::binary);
  if (!vf) throw std::runtime_error("cannot read " + vocab_file.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(vf, line)) tokens.push_back(line);
  std::ifstream mf(merges_file, std::ios::binary);
  if (!mf) throw std::runtime_error("cannot read " + merges_file.string());
  MergeTable merges;
  while (std::getline(mf, line)) {
    const auto sep = line.find(' ');
    if (sep == std::string::npos) throw ConfigError("malformed merges line: '" + line + "'");
    merges.merges.emplace_back(line.substr(0, sep), line.substr(sep + 1));
  }
  return Tokenizer(Vocab::from_tokens(std::move(tokens)), std::move(merges));
}

}  // namespace salm
