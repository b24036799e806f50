// SPDX-License-Identifier: Apache-2.0
//
// Pinned tokenization shared by the metrics and the toy decoder: ASCII
// lowercase, every ASCII punctuation character is its own token, whitespace
// separates words. Bytes >= 0x80 are treated as word characters so UTF-8 text
// passes through unchanged.
#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mullama {

std::vector<std::string> tokenize(std::string_view text);

// Joins tokens with single spaces, without a space before punctuation.
std::string detokenize(const std::vector<std::string>& tokens);

std::string trim(std::string_view s);

// Instruction-following template every question is wrapped in:
// "<preamble> Instruction: <question> Response:".
std::string format_prompt(std::string_view question);
// The prompt followed by its answer, as one plain text (for base-decoder
// language training).
std::string format_dialogue(std::string_view question, std::string_view answer);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecial = 4;

  Vocabulary();
  // Specials followed by every distinct token of `texts` and of the prompt
  // template, sorted.
  static Vocabulary build(const std::vector<std::string>& texts);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

  // <bos> format_prompt(question)
  std::vector<int> encode_prompt(std::string_view question) const;
  // answer <eos>
  std::vector<int> encode_answer(std::string_view answer) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

}  // namespace mullama
