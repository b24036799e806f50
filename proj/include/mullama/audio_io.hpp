// SPDX-License-Identifier: Apache-2.0
//
// WAV decoding/encoding, the one supported resample path, and the per-track
// embedding cache.
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mullama/encoder.hpp"

namespace mullama {

enum class WavEncoding { kPcm16, kFloat32 };

// Reads PCM 16-bit or IEEE float 32-bit WAV (plain or WAVE_FORMAT_EXTENSIBLE).
// Multi-channel audio is averaged to mono. Any other container or encoding
// raises AudioFormatError naming what was found. track_id defaults to the
// file stem.
AudioClip read_wav(const std::filesystem::path& path, std::string track_id = {});
AudioClip decode_wav(const std::vector<std::uint8_t>& bytes, std::string track_id);

void write_wav(const std::filesystem::path& path, const AudioClip& clip,
               WavEncoding encoding = WavEncoding::kFloat32);
std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding encoding);

// Linear interpolation between neighbouring samples; output length is
// round(n * target / source). No anti-alias filtering.
AudioClip resample_linear(const AudioClip& clip, int target_rate);

// Embedding cache: one archive file per track (see docs/formats.md), named
// after the track id with unsafe characters percent-encoded.
std::filesystem::path embedding_cache_path(const std::filesystem::path& dir,
                                           const std::string& track_id);
void save_embedding(const std::filesystem::path& path, const std::string& track_id,
                    const std::string& encoder_name, const LayerStackedEmbedding& emb);
struct CachedEmbedding {
  std::string track_id;
  std::string encoder_name;
  LayerStackedEmbedding embedding;
};
CachedEmbedding load_embedding(const std::filesystem::path& path);
// Loads the cached entry when present and produced with `expected` spec.
std::optional<LayerStackedEmbedding> find_cached_embedding(const std::filesystem::path& dir,
                                                           const std::string& track_id,
                                                           const EncoderSpec& expected);

}  // namespace mullama
