#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qlstm/numerics.hpp"

namespace qlstm {

using TokenId = std::uint32_t;
using Sentence = std::vector<TokenId>;

inline constexpr std::string_view kEosToken = "</s>";
inline constexpr std::string_view kUnkToken = "<unk>";
// The boundary token doubles as the start context of every sentence.
inline constexpr TokenId kEosId = 0;
inline constexpr TokenId kUnkId = 1;

class Vocabulary {
 public:
  /// Builds from an id-ordered word list. Word 0 must be </s> and word 1 <unk>.
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const { return id_to_word_.size(); }
  TokenId eos_id() const { return kEosId; }
  TokenId unk_id() const { return kUnkId; }

  /// Id of word, or unk_id() when the word is not in the vocabulary.
  TokenId id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(TokenId id) const;
  std::span<const std::string> words() const { return id_to_word_; }

  /// Whitespace tokenization of one line with </s> appended.
  Sentence encode_line(std::string_view line) const;
  /// Space-joined words; a trailing </s> is dropped.
  std::string decode(std::span<const TokenId> ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.id_to_word_ == b.id_to_word_; }

 private:
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, TokenId> word_to_id_;
};

struct Batch {
  std::vector<Sentence> sentences;

  std::size_t token_count() const;
};

std::vector<std::string_view> split_whitespace(std::string_view line);

/// Counts whitespace tokens over all lines. Words with count >= min_count get
/// ids in order of decreasing count (first occurrence breaks ties), after
/// </s> and <unk>. Throws std::invalid_argument("empty corpus") without tokens.
Vocabulary build_vocab(std::string_view corpus_text, std::size_t min_count);

/// One sentence per non-blank line, each terminated by eos.
std::vector<Sentence> encode_corpus(std::string_view corpus_text, const Vocabulary& vocab);

/// Consecutive groups of batch_size sentences in corpus order; the last may be short.
std::vector<Batch> batchify(std::span<const Sentence> sentences, std::size_t batch_size);

/// Seeded Fisher-Yates shuffle.
void shuffle_sentences(std::vector<Sentence>& sentences, SeededRng& rng);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace qlstm
