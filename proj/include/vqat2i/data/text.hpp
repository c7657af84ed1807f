#pragma once

#include "vqat2i/core/tensor.hpp"

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace vqat2i::data {

/// Lowercase + whitespace split; punctuation stays attached to its word so
/// that detokenize(tokenize(s)) round-trips to whitespace-normalized lowercase s.
std::vector<std::string> tokenize(const std::string& text);
std::string detokenize(const std::vector<std::string>& tokens);
std::string lowercase(std::string s);
std::string trim(const std::string& s);

class Vocabulary {
 public:
  static constexpr index_t kPadId = 0;
  static constexpr index_t kUnkId = 1;
  static constexpr index_t kEndId = 2;
  static constexpr index_t kReserved = 3;

  index_t size() const { return static_cast<index_t>(id_to_token_.size()); }
  index_t min_frequency() const { return min_frequency_; }
  index_t id_of(const std::string& token) const;  // kUnkId for out-of-vocabulary
  const std::string& token_of(index_t id) const;
  bool contains(const std::string& token) const;

  std::vector<index_t> encode(const std::string& text, index_t max_len) const;
  std::string decode(const std::vector<index_t>& ids) const;

  std::uint64_t hash() const;

  friend Vocabulary build_vocabulary(const std::vector<std::string>& texts,
                                     index_t min_frequency);

 private:
  std::unordered_map<std::string, index_t> token_to_id_;
  std::vector<std::string> id_to_token_;  // index = id; first 3 reserved
  index_t min_frequency_ = 1;
};

/// Ids by corpus frequency (descending), ties broken lexicographically.
/// Throws std::invalid_argument("empty corpus") on an empty collection.
Vocabulary build_vocabulary(const std::vector<std::string>& texts, index_t min_frequency);

/// lowercase(question) + " " + lowercase(answer), outer whitespace trimmed,
/// question punctuation preserved. Throws "degenerate QA pair" when either
/// side is empty after trimming.
std::string concatenate_qa(const std::string& question, const std::string& majority_answer);

/// Most frequent answer after lowercase/trim; ties broken lexicographically.
std::string majority_answer(const std::vector<std::string>& answers);

}  // namespace vqat2i::data
