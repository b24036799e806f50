// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training harness. Only the adapter and the fusion gates are
// trainable; the encoder and the decoder base are shared as const and never
// written.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "mullama/adapter.hpp"
#include "mullama/encoder.hpp"
#include "mullama/errors.hpp"
#include "mullama/fusion.hpp"
#include "mullama/text.hpp"

namespace mullama {

enum class Stage { kPretrain, kFinetune };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

enum class ParamGroup { kEncoder, kDecoderBase, kAdapter, kGates };
std::string to_string(ParamGroup g);

struct FreezeSet {
  std::set<ParamGroup> frozen{ParamGroup::kEncoder, ParamGroup::kDecoderBase};
  std::set<ParamGroup> trainable{ParamGroup::kAdapter, ParamGroup::kGates};

  void validate() const;
  bool is_trainable(ParamGroup g) const { return trainable.contains(g); }
};

enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
  Stage stage = Stage::kPretrain;
  double learning_rate = 1e-4;
  int batch_size = 1;
  int accumulation_steps = 8;
  int epochs = 150;
  std::uint64_t seed = 0;

  // AdamW. Weight decay applies to matrices only (not biases, norms, gates).
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.02;
  int warmup_steps = 0;
  LrSchedule schedule = LrSchedule::kCosine;
  double min_lr_ratio = 0.0;

  int checkpoint_every = 500;  // optimizer steps; 0 disables the periodic save
  std::filesystem::path checkpoint_path;
  long max_steps = -1;  // stop after this global step (-1: run all epochs)

  // 150 pretraining / 20 finetuning epochs at base lr 1e-4, batch size 1.
  static TrainConfig defaults(Stage stage);
  void validate() const;
};

struct TrainExample {
  std::string id;
  // Empty for text-only examples, which run with a zero music context.
  std::variant<std::monostate, AudioClip, LayerStackedEmbedding> music;
  std::string question;
  std::string answer;
};

struct MusicQaModel {
  std::shared_ptr<const ToyEncoder> encoder;
  AdapterParams adapter;
  std::shared_ptr<const ToyDecoder> decoder;
  FusionConfig fusion;
  GateParams gates;
  Vocabulary vocab;

  void validate() const;
};

struct ToyModelConfig {
  EncoderSpec encoder{3, 8, 50.0};
  int sample_rate = 16000;
  std::uint64_t encoder_seed = 7;
  DecoderConfig decoder;  // vocab_size is taken from the vocabulary
  std::uint64_t decoder_seed = 11;
  // Plain sentences the base decoder is trained on (as "<bos> text <eos>")
  // before it is frozen. Empty leaves the decoder at its random initialisation.
  std::vector<std::string> base_corpus;
  LanguageModelTraining base_training;
  int adapter_layers = 0;  // inject the last adapter_layers-1 layers; 0 = all but the first
  int hidden_dim = 0;      // 0 = model_dim
  int num_subblocks = 3;
  std::uint64_t adapter_seed = 13;
};

MusicQaModel build_toy_model(const ToyModelConfig& config, const Vocabulary& vocab);

struct AdamMoments {
  AdapterParams adapter_m, adapter_v;
  Vector gates_m, gates_v;
};

struct TrainState {
  MusicQaModel model;
  AdamMoments moments;
  Stage stage = Stage::kPretrain;
  long step = 0;         // optimizer updates taken in this stage
  long total_steps = 0;  // schedule horizon (0: constant lr)

  static TrainState fresh(MusicQaModel model, Stage stage);
  // Keeps the model, resets optimizer state and step counter.
  void begin_stage(Stage next);
};

struct Gradients {
  AdapterParams adapter;
  Vector gates;
};

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
};

class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, long step, std::vector<std::string> batch_ids);
  long step;
  std::vector<std::string> batch_ids;
};

// Music features for an example (extracted once; the encoder is frozen).
struct PreparedExample {
  std::string id;
  std::optional<LayerStackedEmbedding> embedding;
  std::vector<int> tokens;     // prompt + answer + <eos>
  std::size_t prompt_len = 0;  // loss covers positions predicting tokens[prompt_len..]
};

PreparedExample prepare_example(const MusicQaModel& model, const TrainExample& ex);

MusicContextEmbedding music_context(const MusicQaModel& model, const LayerStackedEmbedding* emb);

// Mean next-token cross-entropy over answer tokens, and its gradient with
// respect to the trainable parameters.
double example_loss(const MusicQaModel& model, const PreparedExample& ex, Gradients* grads);

double learning_rate_at(const TrainConfig& config, long step, long total_steps);

StepResult train_step(const std::vector<PreparedExample>& batch, TrainState& state,
                      const TrainConfig& config);
StepResult accumulate(const std::vector<std::vector<PreparedExample>>& micro_batches,
                      TrainState& state, const TrainConfig& config);

struct LossRecord {
  long step = 0;  // 1-based index of the optimizer update
  int epoch = 0;  // 0-based
  Stage stage = Stage::kPretrain;
  double loss = 0.0;
  double lr = 0.0;

  bool operator==(const LossRecord&) const = default;
};

std::string loss_csv_header();
std::string to_csv_row(const LossRecord& r);

struct StageResult {
  std::vector<LossRecord> log;
  bool completed = false;  // false when stopped by max_steps
};

long steps_per_epoch(std::size_t dataset_size, const TrainConfig& config);

StageResult run_stage(const TrainConfig& config, const std::vector<TrainExample>& dataset,
                      TrainState& state,
                      const std::function<void(const LossRecord&)>& on_step = {});

// Checkpoint = model + optimizer state + progress in one archive.
inline constexpr int kCheckpointFormatVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

// Deterministic serialization of one parameter group (for freeze checks).
std::vector<std::uint8_t> serialize_group(const MusicQaModel& model, ParamGroup group);

// Greedy (or sampled) answer for a question about a clip's features.
std::string answer_question(const MusicQaModel& model, const LayerStackedEmbedding* emb,
                            const std::string& question, const DecodeParams& params);

}  // namespace mullama
