// SPDX-License-Identifier: Apache-2.0
#include "mullama/audio_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "mullama/archive.hpp"
#include "mullama/errors.hpp"

namespace mullama {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint32_t u32le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
std::uint16_t u16le(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

std::string describe_magic(const std::vector<std::uint8_t>& b) {
  auto starts = [&b](std::string_view m) {
    return b.size() >= m.size() && std::memcmp(b.data(), m.data(), m.size()) == 0;
  };
  if (starts("fLaC")) return "FLAC";
  if (starts("OggS")) return "Ogg";
  if (starts("ID3") || (b.size() >= 2 && b[0] == 0xFF && (b[1] & 0xE0) == 0xE0)) return "MP3";
  if (starts("FORM")) return "AIFF";
  if (starts("RIFF")) return "RIFF (non-WAVE)";
  return "unknown (not a RIFF/WAVE file)";
}

std::string encoding_name(std::uint16_t tag, std::uint16_t bits) {
  std::string base;
  switch (tag) {
    case kFormatPcm: base = "PCM"; break;
    case kFormatFloat: base = "IEEE float"; break;
    case 2: base = "MS ADPCM"; break;
    case 6: base = "A-law"; break;
    case 7: base = "mu-law"; break;
    case 0x11: base = "IMA ADPCM"; break;
    case 0x55: base = "MPEG layer 3"; break;
    default: base = "format tag " + std::to_string(tag);
  }
  return base + " " + std::to_string(bits) + "-bit";
}

void put16(std::vector<std::uint8_t>& o, std::uint16_t v) {
  o.push_back(static_cast<std::uint8_t>(v));
  o.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put32(std::vector<std::uint8_t>& o, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_tag(std::vector<std::uint8_t>& o, const char* tag) { o.insert(o.end(), tag, tag + 4); }

}  // namespace

AudioClip decode_wav(const std::vector<std::uint8_t>& b, std::string track_id) {
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0 ||
      std::memcmp(b.data() + 8, "WAVE", 4) != 0) {
    throw AudioFormatError("unsupported audio format: " + describe_magic(b) +
                           "; expected WAV (PCM 16-bit or float 32-bit)");
  }
  std::uint16_t tag = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const std::uint8_t* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::uint8_t* chunk = b.data() + pos;
    const std::size_t len = u32le(chunk + 4);
    const std::size_t avail = std::min(len, b.size() - pos - 8);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (avail < 16) throw AudioFormatError("WAV fmt chunk truncated");
      tag = u16le(chunk + 8);
      channels = u16le(chunk + 10);
      rate = u32le(chunk + 12);
      bits = u16le(chunk + 22);
      if (tag == kFormatExtensible) {
        if (avail < 40) throw AudioFormatError("WAV extensible fmt chunk truncated");
        tag = u16le(chunk + 32);  // first two bytes of the sub-format GUID
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = avail;
    }
    pos += 8 + len + (len & 1);
  }
  if (!have_fmt) throw AudioFormatError("WAV file has no fmt chunk");
  if (!data) throw AudioFormatError("WAV file has no data chunk");
  const bool pcm16 = tag == kFormatPcm && bits == 16;
  const bool f32 = tag == kFormatFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw AudioFormatError("unsupported WAV encoding: " + encoding_name(tag, bits) +
                           "; expected PCM 16-bit or float 32-bit");
  }
  if (channels == 0 || rate == 0) throw AudioFormatError("WAV header has zero channels or rate");

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.track_id = std::move(track_id);
  const std::size_t width = bits / 8;
  const std::size_t frames = data_len / (width * channels);
  clip.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::uint8_t* p = data + (f * channels + c) * width;
      if (pcm16) {
        acc += static_cast<std::int16_t>(u16le(p)) / 32768.0;
      } else {
        const std::uint32_t u = u32le(p);
        float v;
        std::memcpy(&v, &u, sizeof v);
        acc += v;
      }
    }
    clip.samples[f] = acc / channels;
  }
  if (clip.samples.empty()) throw InputError("WAV file '" + clip.track_id + "' has no samples");
  if (!all_finite(clip.samples)) throw InputError("WAV file '" + clip.track_id + "' has non-finite samples");
  return clip;
}

AudioClip read_wav(const std::filesystem::path& path, std::string track_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open audio file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (track_id.empty()) track_id = path.stem().string();
  try {
    return decode_wav(bytes, std::move(track_id));
  } catch (const AudioFormatError& e) {
    throw AudioFormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding encoding) {
  clip.validate();
  const bool pcm = encoding == WavEncoding::kPcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const auto data_len = static_cast<std::uint32_t>(clip.samples.size() * bits / 8);
  std::vector<std::uint8_t> o;
  put_tag(o, "RIFF");
  put32(o, 36 + data_len);
  put_tag(o, "WAVE");
  put_tag(o, "fmt ");
  put32(o, 16);
  put16(o, pcm ? kFormatPcm : kFormatFloat);
  put16(o, 1);
  put32(o, static_cast<std::uint32_t>(clip.sample_rate));
  put32(o, static_cast<std::uint32_t>(clip.sample_rate) * bits / 8);
  put16(o, bits / 8);
  put16(o, bits);
  put_tag(o, "data");
  put32(o, data_len);
  for (double s : clip.samples) {
    if (pcm) {
      const double c = std::clamp(s, -1.0, 32767.0 / 32768.0);
      put16(o, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32768.0))));
    } else {
      const auto f = static_cast<float>(s);
      std::uint32_t u;
      std::memcpy(&u, &f, sizeof u);
      put32(o, u);
    }
  }
  return o;
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip, WavEncoding encoding) {
  const auto bytes = encode_wav(clip, encoding);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("cannot write audio file " + path.string());
}

AudioClip resample_linear(const AudioClip& clip, int target_rate) {
  clip.validate();
  if (target_rate <= 0) throw InputError("resample: target rate must be positive");
  if (target_rate == clip.sample_rate) return clip;
  const std::size_t n = clip.samples.size();
  const auto m = static_cast<std::size_t>(std::max(
      1L, std::lround(static_cast<double>(n) * target_rate / clip.sample_rate)));
  AudioClip out{std::vector<double>(m), target_rate, clip.track_id};
  const double step = static_cast<double>(clip.sample_rate) / target_rate;
  for (std::size_t i = 0; i < m; ++i) {
    const double x = static_cast<double>(i) * step;
    const auto j = static_cast<std::size_t>(x);
    if (j + 1 >= n) {
      out.samples[i] = clip.samples[n - 1];
    } else {
      const double t = x - static_cast<double>(j);
      out.samples[i] = clip.samples[j] * (1.0 - t) + clip.samples[j + 1] * t;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding cache

std::filesystem::path embedding_cache_path(const std::filesystem::path& dir,
                                           const std::string& track_id) {
  if (track_id.empty()) throw InputError("embedding cache: empty track id");
  std::ostringstream name;
  for (unsigned char c : track_id) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.') {
      name << c;
    } else {
      name << '%' << std::uppercase << std::hex << std::setw(2) << std::setfill('0')
           << static_cast<int>(c) << std::dec;
    }
  }
  return dir / (name.str() + ".emb");
}

void save_embedding(const std::filesystem::path& path, const std::string& track_id,
                    const std::string& encoder_name, const LayerStackedEmbedding& emb) {
  emb.validate();
  Archive a;
  a.metadata = nlohmann::json{{"kind", "layer_stacked_embedding"},
                              {"track_id", track_id},
                              {"encoder", encoder_name},
                              {"frame_rate", emb.spec().frame_rate}}
                   .dump();
  a.tensors["values"] = NamedTensor{{emb.num_layers(), emb.num_frames(), emb.feature_dim()},
                                    emb.values()};
  save_archive(path, a);
}

CachedEmbedding load_embedding(const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  try {
    const auto meta = nlohmann::json::parse(a.metadata);
    if (meta.at("kind").get<std::string>() != "layer_stacked_embedding") {
      throw LoadError(path.string() + " is not an embedding cache file");
    }
    require_exact_names(a.tensors, {"values"}, path.string());
    const NamedTensor& t = a.tensors.at("values");
    if (t.shape.size() != 3) throw LoadError(path.string() + ": embedding must be 3-D");
    const EncoderSpec spec{static_cast<int>(t.shape[0]), static_cast<int>(t.shape[2]),
                           meta.at("frame_rate").get<double>()};
    return {meta.at("track_id").get<std::string>(), meta.at("encoder").get<std::string>(),
            LayerStackedEmbedding(spec, t.shape[1], t.values)};
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": bad embedding metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": " + e.what());
  } catch (const NumericError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

std::optional<LayerStackedEmbedding> find_cached_embedding(const std::filesystem::path& dir,
                                                           const std::string& track_id,
                                                           const EncoderSpec& expected) {
  const auto path = embedding_cache_path(dir, track_id);
  if (!std::filesystem::exists(path)) return std::nullopt;
  auto entry = load_embedding(path);
  if (entry.track_id != track_id || !(entry.embedding.spec() == expected)) return std::nullopt;
  return std::move(entry.embedding);
}

}  // namespace mullama
