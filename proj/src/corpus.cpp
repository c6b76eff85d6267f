#include "qlstm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qlstm {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v'; }

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    fn(text.substr(start, end - start));
    if (end == text.size()) break;
    start = end + 1;
  }
}

}  // namespace

std::vector<std::string_view> split_whitespace(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : id_to_word_(std::move(words)) {
  if (id_to_word_.size() < 2 || id_to_word_[kEosId] != kEosToken || id_to_word_[kUnkId] != kUnkToken) {
    throw std::invalid_argument("vocabulary must start with </s> then <unk>");
  }
  word_to_id_.reserve(id_to_word_.size());
  for (std::size_t i = 0; i < id_to_word_.size(); ++i) {
    const std::string& w = id_to_word_[i];
    if (w.empty() || std::any_of(w.begin(), w.end(), is_space)) {
      throw std::invalid_argument("vocabulary word " + std::to_string(i) + " is empty or contains whitespace");
    }
    if (!word_to_id_.emplace(w, static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary word '" + w + "'");
    }
  }
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = word_to_id_.find(std::string(word));
  return it == word_to_id_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return word_to_id_.contains(std::string(word)); }

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= id_to_word_.size()) throw std::out_of_range("token id " + std::to_string(id) + " out of range");
  return id_to_word_[id];
}

Sentence Vocabulary::encode_line(std::string_view line) const {
  Sentence out;
  for (std::string_view tok : split_whitespace(line)) out.push_back(id(tok));
  out.push_back(kEosId);
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  if (!ids.empty() && ids.back() == kEosId) ids = ids.first(ids.size() - 1);
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write vocabulary file " + path.string());
  for (const std::string& w : id_to_word_) os << w << '\n';
  if (!os) throw std::runtime_error("failed writing vocabulary file " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  std::vector<std::string> words;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    words.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  return Vocabulary(std::move(words));
}

std::size_t Batch::token_count() const {
  std::size_t n = 0;
  for (const Sentence& s : sentences) n += s.size();
  return n;
}

Vocabulary build_vocab(std::string_view corpus_text, std::size_t min_count) {
  struct Entry {
    std::size_t count = 0;
    std::size_t first_seen = 0;
  };
  std::unordered_map<std::string, Entry> counts;
  std::size_t seen = 0;
  for_each_line(corpus_text, [&](std::string_view line) {
    for (std::string_view tok : split_whitespace(line)) {
      auto [it, inserted] = counts.try_emplace(std::string(tok));
      if (inserted) it->second.first_seen = seen;
      ++it->second.count;
      ++seen;
    }
  });
  if (seen == 0) throw std::invalid_argument("empty corpus");

  std::vector<std::pair<std::string, Entry>> ranked;
  for (auto& [word, entry] : counts) {
    if (word == kEosToken || word == kUnkToken) continue;
    if (entry.count >= min_count) ranked.emplace_back(word, entry);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first_seen < b.second.first_seen;
  });

  std::vector<std::string> words{std::string(kEosToken), std::string(kUnkToken)};
  for (auto& [word, entry] : ranked) words.push_back(word);
  return Vocabulary(std::move(words));
}

std::vector<Sentence> encode_corpus(std::string_view corpus_text, const Vocabulary& vocab) {
  std::vector<Sentence> out;
  for_each_line(corpus_text, [&](std::string_view line) {
    if (split_whitespace(line).empty()) return;
    out.push_back(vocab.encode_line(line));
  });
  return out;
}

std::vector<Batch> batchify(std::span<const Sentence> sentences, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < sentences.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, sentences.size() - i);
    Batch b;
    b.sentences.assign(sentences.begin() + static_cast<std::ptrdiff_t>(i),
                       sentences.begin() + static_cast<std::ptrdiff_t>(i + n));
    out.push_back(std::move(b));
  }
  return out;
}

void shuffle_sentences(std::vector<Sentence>& sentences, SeededRng& rng) {
  for (std::size_t i = sentences.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(sentences[i - 1], sentences[j]);
  }
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace qlstm
