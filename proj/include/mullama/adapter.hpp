// SPDX-License-Identifier: Apache-2.0
//
// Music understanding adapter.
//
//   a   = mean_t( sum_l conv.w[l] * E[l, t, :] + conv.b )       (in_dim)
//   X_0 = proj.W a + proj.b                                       (model_dim)
//   X_i = X_{i-1} + L2_i( SiLU(L1_i(N_i(X_{i-1}))) * L3_i(N_i(X_{i-1})) )
//
// N_i is layer norm with learnable gain/offset, "*" is elementwise.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mullama/archive.hpp"
#include "mullama/encoder.hpp"
#include "mullama/tensor.hpp"

namespace mullama {

struct AdapterConfig {
  int num_layers = 25;
  int in_dim = 1024;
  int model_dim = 4096;
  int num_subblocks = 3;
  int hidden_dim = 4096;

  static AdapterConfig reference() { return {25, 1024, 4096, 3, 4096}; }

  void validate() const;
  bool operator==(const AdapterConfig&) const = default;
};

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormParams {
  Vector gain;
  Vector offset;
};

struct SubBlockParams {
  LayerNormParams norm;
  Matrix l1_weight;  // hidden x model
  Vector l1_bias;
  Matrix l2_weight;  // model x hidden
  Vector l2_bias;
  Matrix l3_weight;  // hidden x model
  Vector l3_bias;
};

// One 1-D convolution with num_layers input channels, one output channel and
// kernel size 1, sliding along the feature axis.
struct ConvParams {
  Vector weight;  // num_layers
  Vector bias;    // 1
};

struct ProjectionParams {
  Matrix weight;  // model x in
  Vector bias;
};

struct AdapterParams {
  AdapterConfig config;
  ConvParams conv;
  ProjectionParams proj;
  std::vector<SubBlockParams> blocks;

  // All-zero parameters of the right shapes (also used as a gradient record).
  static AdapterParams zeros(const AdapterConfig& config);
  // Gain 1 / offset 0 norms, +-1/sqrt(fan_in) uniform affine maps, zero L2.
  static AdapterParams init(const AdapterConfig& config, std::uint64_t seed);

  // Visits every parameter under its canonical name ("conv.weight",
  // "proj.weight", "block0.norm.gain", "block0.l1.weight", ...).
  void for_each(const std::function<void(const std::string&, std::vector<double>&)>& fn);
  void for_each(const std::function<void(const std::string&, const std::vector<double>&)>& fn) const;

  std::vector<std::string> names() const;
  std::size_t num_parameters() const;

  std::map<std::string, NamedTensor> to_tensors() const;
  // Strict: unknown or missing names are rejected.
  static AdapterParams from_tensors(const AdapterConfig& config,
                                    const std::map<std::string, NamedTensor>& tensors);
};

struct MusicContextEmbedding {
  Vector values;

  std::size_t size() const { return values.size(); }
  void validate(std::size_t model_dim) const;
  bool operator==(const MusicContextEmbedding&) const = default;
};

Vector aggregate_layers(const LayerStackedEmbedding& emb, const ConvParams& conv);
Vector project(std::span<const double> v, const ProjectionParams& proj);

Vector layer_norm(std::span<const double> x, const LayerNormParams& p);
Vector subblock_forward(std::span<const double> x_prev, const SubBlockParams& p);

MusicContextEmbedding adapter_forward(const LayerStackedEmbedding& emb, const AdapterParams& params);

// Gradient of <upstream, adapter_forward(emb)> with respect to every adapter
// parameter. The encoder is frozen: no gradient flows into the embedding.
AdapterParams adapter_backward(const LayerStackedEmbedding& emb, const AdapterParams& params,
                               std::span<const double> upstream);

}  // namespace mullama
