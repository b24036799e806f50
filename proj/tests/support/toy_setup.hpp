// SPDX-License-Identifier: Apache-2.0
//
// Small fixtures shared by the unit tests and the acceptance run.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "mullama/rng.hpp"
#include "mullama/trainer.hpp"

namespace fixture {

inline std::filesystem::path data_dir() { return MULLAMA_TEST_DATA; }

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mullama_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline mullama::AudioClip sine_clip(double hz, double seconds, int sample_rate = 16000,
                                    std::uint64_t noise_seed = 0, double noise = 0.0,
                                    const std::string& id = "clip") {
  mullama::AudioClip c;
  c.sample_rate = sample_rate;
  c.track_id = id;
  mullama::Rng rng(noise_seed);
  const auto n = static_cast<std::size_t>(std::lround(seconds * sample_rate));
  for (std::size_t k = 0; k < n; ++k) {
    c.samples.push_back(0.5 * std::sin(2 * std::numbers::pi * hz * static_cast<double>(k) / sample_rate) +
                        noise * rng.normal());
  }
  return c;
}

inline mullama::AudioClip noise_clip(std::uint64_t seed, double seconds = 0.2, int sample_rate = 16000) {
  mullama::AudioClip c;
  c.sample_rate = sample_rate;
  c.track_id = "noise" + std::to_string(seed);
  mullama::Rng rng(seed);
  const auto n = static_cast<std::size_t>(std::lround(seconds * sample_rate));
  for (std::size_t k = 0; k < n; ++k) c.samples.push_back(0.3 * rng.normal());
  return c;
}

// The four-clip memorization task: one sine per clip, one answer per clip,
// all asked the same question.
struct OverfitTask {
  std::vector<mullama::TrainExample> examples;
  mullama::MusicQaModel model;
  mullama::TrainConfig config;
};

inline OverfitTask overfit_task() {
  using namespace mullama;
  const std::vector<std::string> answers = {"calm piano melody", "fast rock drums", "sad violin solo",
                                            "happy jazz saxophone"};
  const double freqs[] = {220, 440, 880, 1760};
  OverfitTask t;
  std::vector<std::string> texts;
  ToyModelConfig mc;
  for (int i = 0; i < 4; ++i) {
    const std::string id = "t" + std::to_string(i);
    TrainExample ex;
    ex.id = id;
    ex.music = sine_clip(freqs[i], 1.0, 16000, 100 + i, 0.05, id);
    ex.question = "Describe the music";
    ex.answer = answers[i];
    texts.push_back(ex.question);
    texts.push_back(ex.answer);
    mc.base_corpus.push_back(format_dialogue(ex.question, ex.answer));
    t.examples.push_back(std::move(ex));
  }
  t.model = build_toy_model(mc, Vocabulary::build(texts));
  t.config = TrainConfig::defaults(Stage::kPretrain);
  t.config.learning_rate = 1e-2;
  t.config.batch_size = 4;
  t.config.accumulation_steps = 1;
  t.config.epochs = 200;
  t.config.weight_decay = 0.0;
  t.config.checkpoint_every = 0;
  return t;
}

// A small stack for fast trainer tests: 2-layer decoder, short clips. With
// base_trained the decoder first learns the dialogues as plain text.
struct SmallTask {
  std::vector<mullama::TrainExample> examples;
  mullama::MusicQaModel model;
};

inline SmallTask small_task(int n = 4, bool base_trained = false) {
  using namespace mullama;
  SmallTask t;
  std::vector<std::string> texts;
  const std::vector<std::string> answers = {"soft piano", "loud drums", "slow strings", "bright flute",
                                            "deep bass", "warm organ"};
  for (int i = 0; i < n; ++i) {
    TrainExample ex;
    ex.id = "s" + std::to_string(i);
    ex.music = sine_clip(200.0 * (i + 1), 0.1, 16000, 7 + i, 0.05, ex.id);
    ex.question = "What do you hear in the audio";
    ex.answer = answers[static_cast<std::size_t>(i) % answers.size()];
    texts.push_back(ex.question);
    texts.push_back(ex.answer);
    t.examples.push_back(std::move(ex));
  }
  ToyModelConfig mc;
  if (base_trained) {
    for (const auto& ex : t.examples) mc.base_corpus.push_back(format_dialogue(ex.question, ex.answer));
  }
  mc.decoder.num_layers = 2;
  mc.decoder.model_dim = 16;
  mc.decoder.num_heads = 2;
  mc.decoder.ffn_dim = 32;
  mc.decoder.max_seq_len = 64;
  t.model = build_toy_model(mc, Vocabulary::build(texts));
  return t;
}

}  // namespace fixture
