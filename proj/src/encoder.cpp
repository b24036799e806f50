// SPDX-License-Identifier: Apache-2.0
#include "mullama/encoder.hpp"

#include <cmath>
#include <numbers>

#include "mullama/errors.hpp"
#include "mullama/rng.hpp"

namespace mullama {

void EncoderSpec::validate() const {
  if (num_layers < 1) throw ConfigError("encoder spec: num_layers must be >= 1");
  if (feature_dim < 1) throw ConfigError("encoder spec: feature_dim must be >= 1");
  if (!(frame_rate > 0.0) || !std::isfinite(frame_rate)) {
    throw ConfigError("encoder spec: frame_rate must be positive");
  }
}

void AudioClip::validate() const {
  if (samples.empty()) throw InputError("audio clip '" + track_id + "' is empty");
  if (sample_rate <= 0) throw InputError("audio clip '" + track_id + "' has invalid sample rate");
  if (!all_finite(samples)) throw InputError("audio clip '" + track_id + "' has non-finite samples");
}

LayerStackedEmbedding::LayerStackedEmbedding(EncoderSpec spec, std::size_t num_frames,
                                             std::vector<double> values)
    : spec_(spec), num_frames_(num_frames), values_(std::move(values)) {
  validate();
}

void LayerStackedEmbedding::validate() const {
  spec_.validate();
  if (num_frames_ < 1) throw ConfigError("layer-stacked embedding has no frames");
  if (values_.size() != num_layers() * num_frames_ * feature_dim()) {
    throw ConfigError("layer-stacked embedding value count does not match its shape");
  }
  if (!all_finite(values_)) throw NumericError("layer-stacked embedding has non-finite entries");
}

LayerStackedEmbedding extract_features(const AudioClip& clip, const AudioEncoder& encoder) {
  clip.validate();
  if (clip.sample_rate != encoder.sample_rate()) {
    throw ResampleRequiredError(clip.sample_rate, encoder.sample_rate());
  }
  auto emb = encoder.encode(clip);
  emb.validate();
  if (!(emb.spec() == encoder.spec()) ||
      emb.num_frames() != encoder.num_frames(clip.samples.size())) {
    throw ConfigError("encoder '" + encoder.name() + "' returned an embedding of the wrong shape");
  }
  return emb;
}

// ---------------------------------------------------------------------------
// ToyEncoder

namespace {

std::size_t window_for(const EncoderSpec& spec, int sample_rate) {
  const auto w = static_cast<long>(std::lround(sample_rate / spec.frame_rate));
  return static_cast<std::size_t>(std::max(1L, w));
}

// First DFT bin of band b; bands grow geometrically from bin 0 to nbins.
std::size_t band_edge(std::size_t b, std::size_t nbins) {
  const double x = std::pow(static_cast<double>(nbins) + 1.0,
                            static_cast<double>(b) / ToyEncoder::kWindowBins);
  return std::min(nbins, static_cast<std::size_t>(std::lround(x - 1.0)));
}

}  // namespace

ToyEncoder::ToyEncoder(EncoderSpec spec, std::uint64_t seed, int sample_rate)
    : spec_(spec), sample_rate_(sample_rate) {
  spec_.validate();
  if (sample_rate <= 0) throw ConfigError("toy encoder: sample rate must be positive");
  window_ = window_for(spec_, sample_rate_);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kWindowBins));
  for (int l = 0; l < spec_.num_layers; ++l) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(l)));
    Matrix w(static_cast<std::size_t>(spec_.feature_dim), kWindowBins);
    for (auto& x : w.data()) x = rng.normal() * scale;
    weights_.push_back(std::move(w));
  }
}

ToyEncoder::ToyEncoder(EncoderSpec spec, std::vector<Matrix> layer_weights, int sample_rate)
    : spec_(spec), sample_rate_(sample_rate), weights_(std::move(layer_weights)) {
  spec_.validate();
  if (sample_rate <= 0) throw ConfigError("toy encoder: sample rate must be positive");
  if (weights_.size() != static_cast<std::size_t>(spec_.num_layers)) {
    throw ConfigError("toy encoder: expected one weight matrix per layer");
  }
  for (const auto& w : weights_) {
    if (w.rows() != static_cast<std::size_t>(spec_.feature_dim) || w.cols() != kWindowBins) {
      throw ConfigError("toy encoder: layer weight has the wrong shape");
    }
  }
  window_ = window_for(spec_, sample_rate_);
}

std::size_t ToyEncoder::num_frames(std::size_t num_samples) const {
  return std::max<std::size_t>(1, (num_samples + window_ - 1) / window_);
}

LayerStackedEmbedding ToyEncoder::encode(const AudioClip& clip) const {
  const std::size_t frames = num_frames(clip.samples.size());
  LayerStackedEmbedding emb(spec_, frames);
  // Hann-weighted DFT basis for bins 0..window/2.
  const std::size_t nbins = window_ / 2 + 1;
  Matrix re(nbins, window_), im(nbins, window_);
  double wsum = 0.0;
  for (std::size_t n = 0; n < window_; ++n) {
    const double w = window_ > 1
        ? 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / (window_ - 1))
        : 1.0;
    wsum += w;
    for (std::size_t k = 0; k < nbins; ++k) {
      const double phase = 2.0 * std::numbers::pi * static_cast<double>(k * n % window_) /
                           static_cast<double>(window_);
      re(k, n) = w * std::cos(phase);
      im(k, n) = w * std::sin(phase);
    }
  }
  Vector frame(window_), mag(nbins), bands(kWindowBins);
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t start = f * window_;
    // Samples past the end of the clip count as zero padding.
    for (std::size_t n = 0; n < window_; ++n) {
      frame[n] = start + n < clip.samples.size() ? clip.samples[start + n] : 0.0;
    }
    for (std::size_t k = 0; k < nbins; ++k) {
      const double a = dot(re.row(k), frame), c = dot(im.row(k), frame);
      mag[k] = 2.0 * std::sqrt(a * a + c * c) / wsum;
    }
    // Log-spaced bands, each the root-sum-square of a contiguous run of bins
    // (at least one), so a tone keeps its level however wide its band is.
    for (std::size_t b = 0; b < kWindowBins; ++b) {
      const std::size_t lo = band_edge(b, nbins);
      const std::size_t hi = std::max(lo + 1, band_edge(b + 1, nbins));
      double acc = 0.0;
      for (std::size_t k = lo; k < hi; ++k) acc += mag[std::min(k, nbins - 1)] * mag[std::min(k, nbins - 1)];
      bands[b] = std::sqrt(acc);
    }
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const Vector y = matvec(weights_[l], bands);
      for (std::size_t d = 0; d < y.size(); ++d) emb.at(l, f, d) = y[d];
    }
  }
  return emb;
}

EncoderHandle toy_encoder(const EncoderSpec& spec, std::uint64_t seed, int sample_rate) {
  return std::make_shared<const ToyEncoder>(spec, seed, sample_rate);
}

// ---------------------------------------------------------------------------
// PretrainedEncoderBinding

PretrainedEncoderBinding::PretrainedEncoderBinding(std::string name, EncoderSpec spec,
                                                   int sample_rate, Forward forward)
    : name_(std::move(name)), spec_(spec), sample_rate_(sample_rate), forward_(std::move(forward)) {
  spec_.validate();
  if (!forward_) throw ConfigError("pretrained encoder binding needs a forward callback");
}

std::size_t PretrainedEncoderBinding::num_frames(std::size_t num_samples) const {
  const double seconds = static_cast<double>(num_samples) / sample_rate_;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(seconds * spec_.frame_rate)));
}

LayerStackedEmbedding PretrainedEncoderBinding::encode(const AudioClip& clip) const {
  std::size_t frames = 0;
  auto values = forward_(clip.samples, frames);
  if (frames != num_frames(clip.samples.size())) {
    throw ConfigError("encoder '" + name_ + "' produced " + std::to_string(frames) +
                      " frames, expected " + std::to_string(num_frames(clip.samples.size())));
  }
  return LayerStackedEmbedding(spec_, frames, std::move(values));
}

}  // namespace mullama
