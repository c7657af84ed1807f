#include "vqat2i/data/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <stdexcept>

namespace vqat2i::data {

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> tokenize(const std::string& text) {
  std::istringstream in(lowercase(text));
  std::vector<std::string> tokens;
  std::string tok;
  while (in >> tok) tokens.push_back(tok);
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

index_t Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(index_t id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
  return id_to_token_[static_cast<size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.count(token) > 0;
}

std::vector<index_t> Vocabulary::encode(const std::string& text, index_t max_len) const {
  std::vector<index_t> ids;
  for (const auto& tok : tokenize(text)) {
    if (static_cast<index_t>(ids.size()) >= max_len) break;  // keep prefix
    ids.push_back(id_of(tok));
  }
  return ids;
}

std::string Vocabulary::decode(const std::vector<index_t>& ids) const {
  std::vector<std::string> toks;
  for (index_t id : ids) {
    if (id == kPadId || id == kEndId) continue;
    toks.push_back(token_of(id));
  }
  return detokenize(toks);
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = kFnvBasis;
  const char sep = '\x1f';
  for (const auto& tok : id_to_token_) {
    h = fnv1a64(tok, h);
    h = fnv1a64(&sep, 1, h);
  }
  h = fnv1a64(&min_frequency_, sizeof(min_frequency_), h);
  return h;
}

Vocabulary build_vocabulary(const std::vector<std::string>& texts, index_t min_frequency) {
  if (texts.empty()) throw std::invalid_argument("empty corpus");
  std::map<std::string, index_t> freq;  // ordered for deterministic ties
  for (const auto& t : texts)
    for (const auto& tok : tokenize(t)) ++freq[tok];

  std::vector<std::pair<std::string, index_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.min_frequency_ = min_frequency;
  v.id_to_token_ = {"<pad>", "<unk>", "<end>"};
  for (const auto& [tok, n] : items) {
    if (n < min_frequency) continue;
    v.token_to_id_[tok] = static_cast<index_t>(v.id_to_token_.size());
    v.id_to_token_.push_back(tok);
  }
  return v;
}

std::string concatenate_qa(const std::string& question, const std::string& majority_answer) {
  std::string q = trim(question), a = trim(majority_answer);
  if (q.empty() || a.empty()) throw std::invalid_argument("degenerate QA pair");
  return lowercase(q) + " " + lowercase(a);
}

std::string majority_answer(const std::vector<std::string>& answers) {
  if (answers.empty()) throw std::invalid_argument("majority_answer: empty answer list");
  std::map<std::string, index_t> counts;
  for (const auto& a : answers) ++counts[lowercase(trim(a))];
  std::string best;
  index_t best_count = -1;
  for (const auto& [ans, n] : counts) {  // map order = lexicographic tie-break
    if (n > best_count) {
      best = ans;
      best_count = n;
    }
  }
  return best;
}

}  // namespace vqat2i::data
