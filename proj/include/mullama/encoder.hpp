// SPDX-License-Identifier: Apache-2.0
//
// Audio encoder contract: a frozen encoder maps a clip to a layer-stacked
// embedding of shape (num_layers, num_frames, feature_dim).
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mullama/tensor.hpp"

namespace mullama {

struct EncoderSpec {
  int num_layers = 25;
  int feature_dim = 1024;
  double frame_rate = 75.0;

  // 24 hidden layers + 1 output layer, 1024 features each, 75 frames/s.
  static EncoderSpec reference() { return {25, 1024, 75.0}; }

  void validate() const;
  bool operator==(const EncoderSpec&) const = default;
};

struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 16000;
  std::string track_id;

  void validate() const;
  double duration_seconds() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

class LayerStackedEmbedding {
 public:
  LayerStackedEmbedding() = default;
  LayerStackedEmbedding(EncoderSpec spec, std::size_t num_frames)
      : spec_(spec),
        num_frames_(num_frames),
        values_(static_cast<std::size_t>(spec.num_layers) * num_frames *
                    static_cast<std::size_t>(spec.feature_dim),
                0.0) {}
  LayerStackedEmbedding(EncoderSpec spec, std::size_t num_frames, std::vector<double> values);

  const EncoderSpec& spec() const { return spec_; }
  std::size_t num_layers() const { return static_cast<std::size_t>(spec_.num_layers); }
  std::size_t num_frames() const { return num_frames_; }
  std::size_t feature_dim() const { return static_cast<std::size_t>(spec_.feature_dim); }

  double& at(std::size_t layer, std::size_t frame, std::size_t feature) {
    return values_[(layer * num_frames_ + frame) * feature_dim() + feature];
  }
  double at(std::size_t layer, std::size_t frame, std::size_t feature) const {
    return values_[(layer * num_frames_ + frame) * feature_dim() + feature];
  }
  std::span<const double> frame(std::size_t layer, std::size_t f) const {
    return {values_.data() + (layer * num_frames_ + f) * feature_dim(), feature_dim()};
  }

  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  // Throws ConfigError on shape mismatch, NumericError on non-finite entries.
  void validate() const;

  bool operator==(const LayerStackedEmbedding&) const = default;

 private:
  EncoderSpec spec_{};
  std::size_t num_frames_ = 0;
  std::vector<double> values_;
};

// Frozen audio encoder. Implementations must be immutable after construction
// so a handle can be shared across threads.
class AudioEncoder {
 public:
  virtual ~AudioEncoder() = default;

  virtual std::string name() const = 0;
  virtual const EncoderSpec& spec() const = 0;
  virtual int sample_rate() const = 0;
  virtual std::size_t num_frames(std::size_t num_samples) const = 0;

 protected:
  friend LayerStackedEmbedding extract_features(const AudioClip&, const AudioEncoder&);
  virtual LayerStackedEmbedding encode(const AudioClip& clip) const = 0;
};

using EncoderHandle = std::shared_ptr<const AudioEncoder>;

// Validates the clip, checks the sample rate and the returned shape.
LayerStackedEmbedding extract_features(const AudioClip& clip, const AudioEncoder& encoder);

// Desk-scale stand-in: non-overlapping windows of round(sample_rate /
// frame_rate) samples, each reduced to kWindowBins log-spaced bands (root-sum-square
// of Hann-windowed spectral magnitude), then one fixed seeded linear map per layer.
// Silence maps to an all-zero embedding.
class ToyEncoder final : public AudioEncoder {
 public:
  static constexpr std::size_t kWindowBins = 16;

  ToyEncoder(EncoderSpec spec, std::uint64_t seed, int sample_rate = 16000);
  // Rebuild from stored weights (one feature_dim x kWindowBins matrix per layer).
  ToyEncoder(EncoderSpec spec, std::vector<Matrix> layer_weights, int sample_rate);

  std::string name() const override { return "toy"; }
  const EncoderSpec& spec() const override { return spec_; }
  int sample_rate() const override { return sample_rate_; }
  std::size_t num_frames(std::size_t num_samples) const override;
  std::size_t window_size() const { return window_; }

  const std::vector<Matrix>& layer_weights() const { return weights_; }

 protected:
  LayerStackedEmbedding encode(const AudioClip& clip) const override;

 private:
  EncoderSpec spec_;
  int sample_rate_;
  std::size_t window_;
  std::vector<Matrix> weights_;
};

EncoderHandle toy_encoder(const EncoderSpec& spec, std::uint64_t seed, int sample_rate = 16000);

// Plug-in point for a pretrained encoder (e.g. a MERT-shaped model served by
// another runtime). The callback receives mono samples at `sample_rate` and
// returns layer-major values plus the frame count it produced.
class PretrainedEncoderBinding final : public AudioEncoder {
 public:
  using Forward = std::function<std::vector<double>(std::span<const double> samples,
                                                    std::size_t& num_frames)>;

  PretrainedEncoderBinding(std::string name, EncoderSpec spec, int sample_rate, Forward forward);

  // 25 x 1024 at 75 frames/s over 24 kHz audio.
  static EncoderSpec mert_spec() { return EncoderSpec::reference(); }
  static constexpr int kMertSampleRate = 24000;

  std::string name() const override { return name_; }
  const EncoderSpec& spec() const override { return spec_; }
  int sample_rate() const override { return sample_rate_; }
  std::size_t num_frames(std::size_t num_samples) const override;

 protected:
  LayerStackedEmbedding encode(const AudioClip& clip) const override;

 private:
  std::string name_;
  EncoderSpec spec_;
  int sample_rate_;
  Forward forward_;
};

}  // namespace mullama
