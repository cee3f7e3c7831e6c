#include "salm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "salm/errors.hpp"
#include "salm/rng.hpp"
#include "salm/tokenizer.hpp"

namespace salm {

namespace fs = std::filesystem;

namespace {

bool valid_lang_code(const std::string& lang) {
  if (lang.empty()) return false;
  for (char c : lang)
    if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'))) return false;
  return true;
}

std::vector<std::string> read_lines(const fs::path& file, const std::string& lang) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string() + " for language " + lang);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!valid_utf8(line))
      throw std::runtime_error("undecodable UTF-8 in " + file.string() + " (language " + lang +
                               ", line " + std::to_string(lines.size() + 1) + ")");
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace

int64_t LanguageDataset::original_count() const {
  return static_cast<int64_t>(
      std::count_if(sentences.begin(), sentences.end(),
                    [](const SentenceRecord& r) { return r.provenance.is_original(); }));
}

int64_t LanguageDataset::generated_count() const { return size() - original_count(); }

int64_t LanguageDataset::byte_size() const {
  int64_t bytes = 0;
  for (const auto& r : sentences) bytes += static_cast<int64_t>(r.text.size()) + 1;
  return bytes;
}

const LanguageDataset& MultiCorpus::dataset(const std::string& lang) const {
  auto it = languages_.find(lang);
  if (it == languages_.end()) throw std::runtime_error("unknown language '" + lang + "'");
  return it->second;
}

int64_t MultiCorpus::total_sentences() const {
  int64_t n = 0;
  for (const auto& [lang, ds] : languages_) n += ds.size();
  return n;
}

std::vector<std::string> MultiCorpus::lang_codes() const {
  std::vector<std::string> codes;
  codes.reserve(languages_.size());
  for (const auto& [lang, ds] : languages_) codes.push_back(lang);
  return codes;
}

void MultiCorpus::add_sentence(const std::string& lang, SentenceRecord record) {
  if (!valid_lang_code(lang))
    throw ConfigError("language code '" + lang + "' must be non-empty lowercase ASCII");
  if (record.text.empty()) throw std::runtime_error("refusing to store a zero-length sentence for " + lang);
  auto& ds = languages_[lang];
  ds.lang = lang;
  ds.sentences.push_back(std::move(record));
}

void MultiCorpus::augment(const std::string& lang, const std::vector<SentenceRecord>& generated,
                          int32_t round) {
  auto it = languages_.find(lang);
  if (it == languages_.end()) throw std::runtime_error("augment: unknown language '" + lang + "'");
  if (round < 1) throw std::logic_error("augment: round must be >= 1");
  const int64_t size_before = it->second.size();
  for (const auto& rec : generated) {
    if (rec.text.empty()) throw std::runtime_error("augment: zero-length sentence for " + lang);
    if (!rec.source_index || *rec.source_index < 0 || *rec.source_index >= size_before)
      throw std::logic_error("augment: generated record lacks a valid source index");
    SentenceRecord stored = rec;
    stored.provenance = Provenance{round};
    it->second.sentences.push_back(std::move(stored));
  }
}

std::pair<MultiCorpus, MultiCorpus> MultiCorpus::split(const SplitSpec& spec) const {
  if (spec.k_percent <= 0 || spec.k_percent > 100)
    throw ConfigError("split percentage must be in (0,100], got " + std::to_string(spec.k_percent));
  MultiCorpus train, heldout;
  for (const auto& [lang, ds] : languages_) {
    const int64_t n = ds.size();
    if (n < 2)
      throw std::runtime_error("language '" + lang + "' has " + std::to_string(n) +
                               " sentences; splitting requires at least 2");
    int64_t n_train = spec.k_percent * n / 100;
    n_train = std::clamp<int64_t>(n_train, 1, n - 1);

    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(spec.seed, "split", 0, lang));
    rng.shuffle(order);

    std::vector<bool> in_train(static_cast<size_t>(n), false);
    for (int64_t i = 0; i < n_train; ++i) in_train[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;
    for (int64_t i = 0; i < n; ++i) {
      auto& dst = in_train[static_cast<size_t>(i)] ? train : heldout;
      dst.add_sentence(lang, ds.sentences[static_cast<size_t>(i)]);
    }
  }
  return {std::move(train), std::move(heldout)};
}

std::vector<LangStats> MultiCorpus::stats() const {
  std::vector<LangStats> out;
  for (const auto& [lang, ds] : languages_) {
    LangStats st;
    st.lang = lang;
    st.bytes = ds.byte_size();
    int64_t words = 0;
    std::map<std::string, int64_t> text_count;
    for (const auto& r : ds.sentences) {
      if (r.provenance.is_original())
        ++st.original;
      else
        ++st.generated_by_round[r.provenance.round];
      words += static_cast<int64_t>(split_words(r.text).size());
      ++text_count[r.text];
    }
    st.mean_words = ds.size() > 0 ? static_cast<double>(words) / static_cast<double>(ds.size()) : 0.0;
    for (const auto& [text, c] : text_count)
      if (c > 1) st.duplicates += c;
    out.push_back(std::move(st));
  }
  return out;
}

MultiCorpus MultiCorpus::load(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("corpus root " + root.string() + " is not a directory");
  std::set<std::string> langs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) langs.insert(entry.path().filename().string());
  if (langs.empty()) throw std::runtime_error("corpus root " + root.string() + " contains no language directories");

  MultiCorpus corpus;
  for (const auto& lang : langs) {
    const fs::path dir = root / lang;
    const fs::path sentences_file = dir / "sentences.txt";
    if (!fs::exists(sentences_file))
      throw std::runtime_error("language '" + lang + "' is missing sentences.txt");
    const auto lines = read_lines(sentences_file, lang);
    if (lines.empty()) throw std::runtime_error("language '" + lang + "' has an empty sentences.txt");
    for (size_t i = 0; i < lines.size(); ++i) {
      if (lines[i].empty())
        throw std::runtime_error("language '" + lang + "' has a blank line at sentences.txt:" +
                                 std::to_string(i + 1));
      corpus.add_sentence(lang, SentenceRecord{lines[i], Provenance{0}, std::nullopt, std::nullopt});
    }

    // generated rounds, in round order
    std::vector<int32_t> rounds;
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      const std::string prefix = "generated_round_";
      if (name.rfind(prefix, 0) == 0 && name.size() > prefix.size() + 4 &&
          name.substr(name.size() - 4) == ".txt")
        rounds.push_back(std::stoi(name.substr(prefix.size(), name.size() - prefix.size() - 4)));
    }
    std::sort(rounds.begin(), rounds.end());
    for (int32_t r : rounds) {
      const auto texts = read_lines(dir / ("generated_round_" + std::to_string(r) + ".txt"), lang);
      const auto meta = read_lines(dir / ("generated_round_" + std::to_string(r) + ".meta"), lang);
      if (texts.size() != meta.size())
        throw std::runtime_error("language '" + lang + "' round " + std::to_string(r) +
                                 ": meta line count does not match generated line count");
      std::vector<SentenceRecord> records;
      for (size_t i = 0; i < texts.size(); ++i) {
        const auto t1 = meta[i].find('\t');
        const auto t2 = t1 == std::string::npos ? std::string::npos : meta[i].find('\t', t1 + 1);
        if (t2 == std::string::npos)
          throw std::runtime_error("language '" + lang + "' round " + std::to_string(r) +
                                   ": malformed meta line " + std::to_string(i + 1));
        const int64_t line_no = std::stoll(meta[i].substr(0, t1));
        const int64_t source = std::stoll(meta[i].substr(t1 + 1, t2 - t1 - 1));
        const double score = std::stod(meta[i].substr(t2 + 1));
        if (line_no != static_cast<int64_t>(i) + 1)
          throw std::runtime_error("language '" + lang + "' round " + std::to_string(r) +
                                   ": meta line numbering is off at line " + std::to_string(i + 1));
        records.push_back(SentenceRecord{texts[i], Provenance{r}, source, score});
      }
      corpus.augment(lang, records, r);
    }
  }
  return corpus;
}

void MultiCorpus::write_generated(const fs::path& root, const std::string& lang, int32_t round,
                                  const std::vector<SentenceRecord>& records) {
  const fs::path dir = root / lang;
  fs::create_directories(dir);
  std::ofstream tf(dir / ("generated_round_" + std::to_string(round) + ".txt"), std::ios::binary);
  std::ofstream mf(dir / ("generated_round_" + std::to_string(round) + ".meta"), std::ios::binary);
  if (!tf || !mf) throw std::runtime_error("cannot write generated files for " + lang);
  char score_buf[64];
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    tf << r.text << '\n';
    std::snprintf(score_buf, sizeof score_buf, "%.6f", r.diversity_score.value_or(0.0));
    mf << (i + 1) << '\t' << r.source_index.value_or(-1) << '\t' << score_buf << '\n';
  }
}

void MultiCorpus::save(const fs::path& root) const {
  fs::create_directories(root);
  for (const auto& [lang, ds] : languages_) {
    fs::create_directories(root / lang);
    std::ofstream sf(root / lang / "sentences.txt", std::ios::binary);
    if (!sf) throw std::runtime_error("cannot write sentences.txt for " + lang);
    std::map<int32_t, std::vector<SentenceRecord>> generated;
    for (const auto& r : ds.sentences) {
      if (r.provenance.is_original())
        sf << r.text << '\n';
      else
        generated[r.provenance.round].push_back(r);
    }
    for (const auto& [round, records] : generated) write_generated(root, lang, round, records);
  }
  write_manifest(root, *this);
}

void write_manifest(const fs::path& root, const MultiCorpus& corpus) {
  std::ofstream mf(root / "manifest.tsv", std::ios::binary);
  if (!mf) throw std::runtime_error("cannot write manifest.tsv");
  mf << "lang\toriginal_count\tgenerated_count\tbytes\n";
  for (const auto& [lang, ds] : corpus.languages())
    mf << lang << '\t' << ds.original_count() << '\t' << ds.generated_count() << '\t'
       << ds.byte_size() << '\n';
}

}  // namespace salm
