// SPDX-License-Identifier: Apache-2.0
#include "mullama/text.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "mullama/errors.hpp"

namespace mullama {

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_punct(unsigned char c) {
  return c < 0x80 && ((c >= 0x21 && c <= 0x2f) || (c >= 0x3a && c <= 0x40) ||
                      (c >= 0x5b && c <= 0x60) || (c >= 0x7b && c <= 0x7e)) &&
         c != '_';
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    const bool punct = t.size() == 1 && is_punct(static_cast<unsigned char>(t[0]));
    if (!out.empty() && !punct) out.push_back(' ');
    out += t;
  }
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

Vocabulary::Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
}

namespace {
constexpr std::string_view kPreamble =
    "Below is an instruction that describes a task. "
    "Write a response that appropriately completes the request.";
}  // namespace

std::string format_prompt(std::string_view question) {
  return std::string(kPreamble) + " Instruction: " + trim(question) + " Response:";
}

std::string format_dialogue(std::string_view question, std::string_view answer) {
  return format_prompt(question) + " " + trim(answer);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (auto& w : tokenize(format_prompt(""))) words.insert(std::move(w));
  for (const auto& t : texts) {
    for (auto& w : tokenize(t)) words.insert(std::move(w));
  }
  return from_tokens(std::vector<std::string>(words.begin(), words.end()));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  for (auto& t : tokens) {
    if (std::find(v.tokens_.begin(), v.tokens_.end(), t) == v.tokens_.end()) {
      v.tokens_.push_back(std::move(t));
    }
  }
  v.index_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<int>(i);
  return v;
}

int Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw InputError("token id " + std::to_string(id) + " out of vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& t : tokenize(text)) ids.push_back(id(t));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  for (int i : ids) {
    if (i == kEos) break;
    if (i < kNumSpecial) continue;
    words.push_back(token(i));
  }
  return detokenize(words);
}

std::vector<int> Vocabulary::encode_prompt(std::string_view question) const {
  std::vector<int> ids{kBos};
  for (int i : encode(format_prompt(question))) ids.push_back(i);
  return ids;
}

std::vector<int> Vocabulary::encode_answer(std::string_view answer) const {
  std::vector<int> ids = encode(answer);
  ids.push_back(kEos);
  return ids;
}

}  // namespace mullama
