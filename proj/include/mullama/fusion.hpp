// SPDX-License-Identifier: Apache-2.0
//
// Query-side context injection into a frozen decoder-only transformer.
//
// In every injected layer the full-width query activations (after the query
// projection, before the rotary position encoding) are scaled per token by
//
//     q' = q * (1 + tanh(g) * ctx)
//
// with one learnable gate g per injected layer. g = 0 gives back the base
// decoder bit for bit.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mullama/adapter.hpp"
#include "mullama/archive.hpp"
#include "mullama/tensor.hpp"

namespace mullama {

struct FusionConfig {
  int total_layers = 32;
  int inject_from = 14;  // 1-based; layers inject_from..total_layers are injected
  double gate_init = 0.0;

  // Injects the last (adapter_layers - 1) layers of a `total_layers` decoder.
  static FusionConfig last_layers(int total_layers, int adapter_layers);
  // LLaMA-2 7B depth with adapter_layers = 20: the top 19 of 32 layers.
  static FusionConfig reference() { return last_layers(32, 20); }

  int num_injected() const { return total_layers - inject_from + 1; }
  bool is_injected(int layer) const { return layer >= inject_from && layer <= total_layers; }
  void validate() const;
  bool operator==(const FusionConfig&) const = default;
};

struct GateParams {
  Vector g;

  static GateParams init(const FusionConfig& config);
};

// queries: tokens x model_dim.
Matrix inject_queries(const Matrix& queries, const MusicContextEmbedding& ctx, double gate);

// ---------------------------------------------------------------------------
// Toy decoder: pre-norm LLaMA-style blocks (RMSNorm, rotary multi-head causal
// attention, SiLU-gated MLP), learned embeddings and LM head.

struct DecoderConfig {
  int vocab_size = 64;
  int model_dim = 64;
  int num_heads = 8;
  int ffn_dim = 128;
  int num_layers = 4;
  int max_seq_len = 128;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  // Standard deviations used by ToyDecoder::random.
  double embed_std = 1.0;
  double lm_head_std = 0.2;

  int head_dim() const { return model_dim / num_heads; }
  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

struct DecoderLayerWeights {
  Vector attn_norm;
  Matrix wq, wk, wv, wo;  // model x model
  Vector ffn_norm;
  Matrix w1, w3;  // ffn x model
  Matrix w2;      // model x ffn
};

struct DecoderWeights {
  Matrix embedding;  // vocab x model
  std::vector<DecoderLayerWeights> layers;
  Vector final_norm;
  Matrix lm_head;  // vocab x model

  std::map<std::string, NamedTensor> to_tensors() const;
  static DecoderWeights from_tensors(const DecoderConfig& config,
                                     const std::map<std::string, NamedTensor>& tensors);
  static DecoderWeights zeros(const DecoderConfig& config);
};

// Optional context injection for one forward pass.
struct Injection {
  FusionConfig fusion;
  MusicContextEmbedding ctx;
  Vector gates;  // one per injected layer
};

struct DecoderCache;  // opaque activation record for backward

struct DecoderOutput {
  Matrix logits;               // tokens x vocab
  std::vector<Matrix> taps;    // residual stream after each layer (if requested)
  std::shared_ptr<DecoderCache> cache;
};

struct InjectionGrads {
  Vector ctx;    // d loss / d ctx
  Vector gates;  // d loss / d gate, one per injected layer
};

class ToyDecoder {
 public:
  ToyDecoder(DecoderConfig config, DecoderWeights weights);
  static ToyDecoder random(const DecoderConfig& config, std::uint64_t seed);

  const DecoderConfig& config() const { return config_; }
  const DecoderWeights& weights() const { return weights_; }

  DecoderOutput forward(std::span<const int> tokens, const Injection* injection,
                        bool keep_cache = false, bool keep_taps = false) const;

  // Backpropagates d loss / d logits to the injection parameters. Weight
  // gradients are only accumulated when `weight_grads` is given; music
  // training leaves it null so the decoder stays frozen.
  InjectionGrads backward(const DecoderOutput& out, const Matrix& dlogits,
                          DecoderWeights* weight_grads = nullptr) const;

 private:
  DecoderConfig config_;
  DecoderWeights weights_;
};

// Text-only next-token training of every decoder weight (Adam, full batch).
// Produces the frozen base that music training later steers.
struct LanguageModelTraining {
  int steps = 200;
  double learning_rate = 1e-2;
};

struct LanguageModelResult {
  ToyDecoder decoder;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

LanguageModelResult train_language_model(const ToyDecoder& base,
                                         const std::vector<std::vector<int>>& corpus,
                                         const LanguageModelTraining& training);

// Scores for next-token prediction at every position. With `injection` absent
// (or all gates zero) this is exactly the base decoder.
Matrix decoder_forward(std::span<const int> tokens, const Injection* injection,
                       const ToyDecoder& decoder);

struct DecodeParams {
  enum class Mode { kGreedy, kSampled };
  int max_new_tokens = 32;
  Mode mode = Mode::kGreedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int eos_token = 2;
};

// Generated tokens (the end token is included when produced).
std::vector<int> generate(std::span<const int> prompt, const Injection* injection,
                          const ToyDecoder& decoder, const DecodeParams& params);

}  // namespace mullama
