#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace salm {

// Where a sentence came from: collected data, or generated in round r.
struct Provenance {
  int32_t round = 0;  // 0 = original, >= 1 = generated in that round

  bool is_original() const { return round == 0; }
  bool operator==(const Provenance&) const = default;
};

struct SentenceRecord {
  std::string text;
  Provenance provenance;
  // For generated records: index of the source sentence in the dataset state
  // at generation time.
  std::optional<int64_t> source_index;
  std::optional<double> diversity_score;

  bool operator==(const SentenceRecord&) const = default;
};

struct LanguageDataset {
  std::string lang;
  std::vector<SentenceRecord> sentences;

  int64_t size() const { return static_cast<int64_t>(sentences.size()); }
  int64_t original_count() const;
  int64_t generated_count() const;
  int64_t byte_size() const;  // UTF-8 bytes of sentences plus one newline each
};

struct SplitSpec {
  int k_percent = 80;
  uint64_t seed = 0;
};

struct LangStats {
  std::string lang;
  int64_t original = 0;
  std::map<int32_t, int64_t> generated_by_round;
  double mean_words = 0.0;
  int64_t bytes = 0;
  int64_t duplicates = 0;  // sentences whose text appears more than once
};

class MultiCorpus {
 public:
  // Languages in sorted code order, always.
  const std::map<std::string, LanguageDataset>& languages() const { return languages_; }
  bool has(const std::string& lang) const { return languages_.count(lang) > 0; }
  const LanguageDataset& dataset(const std::string& lang) const;
  int64_t total_sentences() const;
  std::vector<std::string> lang_codes() const;
  bool empty() const { return languages_.empty(); }

  // Adds a sentence, validating non-empty text and the language code.
  void add_sentence(const std::string& lang, SentenceRecord record);

  // Appends generated records for one round. Every record must carry a valid
  // source index into the current dataset.
  void augment(const std::string& lang, const std::vector<SentenceRecord>& generated, int32_t round);

  // Per-language split into train/held-out. Each language contributes
  // floor(k*n/100) train sentences, clamped to [1, n-1]; selection is a
  // seeded uniform permutation, deterministic per (seed, lang).
  std::pair<MultiCorpus, MultiCorpus> split(const SplitSpec& spec) const;

  std::vector<LangStats> stats() const;

  // Directory layout: <root>/<lang>/sentences.txt for originals, plus
  // <root>/<lang>/generated_round_<r>.txt and .meta sidecars, plus
  // <root>/manifest.tsv.
  static MultiCorpus load(const std::filesystem::path& root);
  void save(const std::filesystem::path& root) const;

  // Writes just one language's round files (the stage-3 output).
  static void write_generated(const std::filesystem::path& root, const std::string& lang,
                              int32_t round, const std::vector<SentenceRecord>& records);

 private:
  std::map<std::string, LanguageDataset> languages_;
};

void write_manifest(const std::filesystem::path& root, const MultiCorpus& corpus);

}  // namespace salm
