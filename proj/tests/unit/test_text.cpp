// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "mullama/errors.hpp"
#include "mullama/text.hpp"

using namespace mullama;

TEST_CASE("tokenize") {
  using V = std::vector<std::string>;
  CHECK(tokenize("Calm, slow Piano!") == V{"calm", ",", "slow", "piano", "!"});
  CHECK(tokenize("  ") == V{});
  CHECK(tokenize("a\tb\nc") == V{"a", "b", "c"});
  CHECK(tokenize("don't") == V{"don", "'", "t"});
  CHECK(tokenize("snake_case") == V{"snake_case"});
  CHECK(tokenize("Café Ü") == V{"café", "Ü"});
  CHECK(tokenize("100bpm") == V{"100bpm"});
}

TEST_CASE("detokenize and trim") {
  CHECK(detokenize({"calm", ",", "slow", "piano", "."}) == "calm, slow piano.");
  CHECK(detokenize({}) == "");
  CHECK(trim("  a b \n") == "a b");
  CHECK(trim("   ") == "");
}

TEST_CASE("prompt template") {
  const auto p = format_prompt("  Describe the music ");
  CHECK(p.find("Instruction: Describe the music Response:") != std::string::npos);
  CHECK(p.ends_with("Response:"));
  CHECK(format_dialogue("Q", " A ") == format_prompt("Q") + " A");
}

TEST_CASE("vocabulary") {
  const auto v = Vocabulary::build({"calm piano", "Calm drums"});
  CHECK(v.token(Vocabulary::kPad) == "<pad>");
  CHECK(v.token(Vocabulary::kBos) == "<bos>");
  CHECK(v.token(Vocabulary::kEos) == "<eos>");
  CHECK(v.token(Vocabulary::kUnk) == "<unk>");
  CHECK(v.id("calm") >= Vocabulary::kNumSpecial);
  CHECK(v.id("unseen") == Vocabulary::kUnk);
  // Every token of the template is known.
  for (int id : v.encode(format_prompt(""))) CHECK(id != Vocabulary::kUnk);
  CHECK_THROWS_AS(v.token(v.size()), InputError);

  const auto prompt = v.encode_prompt("calm piano");
  CHECK(prompt.front() == Vocabulary::kBos);
  const auto answer = v.encode_answer("calm drums");
  CHECK(answer.back() == Vocabulary::kEos);
  CHECK(v.decode(answer) == "calm drums");

  // Same texts give the same ids regardless of order.
  CHECK(Vocabulary::build({"Calm drums", "calm piano"}).tokens() == v.tokens());
  CHECK(Vocabulary::from_tokens(v.tokens()).tokens() == v.tokens());
}
