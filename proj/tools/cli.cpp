// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mullama/audio_io.hpp"
#include "mullama/errors.hpp"
#include "mullama/metrics.hpp"
#include "mullama/qa_gen.hpp"
#include "mullama/trainer.hpp"

#ifndef MULLAMA_VERSION
#define MULLAMA_VERSION "unknown"
#endif

namespace mullama::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Settings: every command option is also a config key. Resolution order is
// command line, then config file, then the built-in default.

enum class Kind { kInt, kFloat, kBool, kString };

struct Setting {
  Setting(std::string k, Kind t, nlohmann::json def, std::string h, bool req = false, std::string alt = {})
      : key(std::move(k)), kind(t), fallback(std::move(def)), help(std::move(h)), required(req),
        alias(std::move(alt)) {}

  std::string key;
  Kind kind;
  nlohmann::json fallback;  // null: filled in by the command from other settings
  std::string help;
  bool required;
  std::string alias;  // extra flag spelling, e.g. "--input"
};

nlohmann::json convert(Kind kind, const nlohmann::json& v, const std::string& key) {
  auto bad = [&] { return ConfigError("setting '" + key + "': invalid value " + v.dump()); };
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    std::size_t used = 0;
    try {
      switch (kind) {
        case Kind::kString: return s;
        case Kind::kInt: {
          const long long x = std::stoll(s, &used);
          if (used != s.size()) throw bad();
          return x;
        }
        case Kind::kFloat: {
          const double x = std::stod(s, &used);
          if (used != s.size()) throw bad();
          return x;
        }
        case Kind::kBool:
          if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
          if (s == "false" || s == "0" || s == "no" || s == "off") return false;
          throw bad();
      }
    } catch (const std::logic_error&) {
      throw bad();
    }
  }
  switch (kind) {
    case Kind::kString: throw bad();
    case Kind::kInt:
      if (!v.is_number_integer()) throw bad();
      return v;
    case Kind::kFloat:
      if (!v.is_number()) throw bad();
      return v.get<double>();
    case Kind::kBool:
      if (!v.is_boolean()) throw bad();
      return v;
  }
  throw bad();
}

std::string normalize_key(std::string k) {
  for (auto& c : k) {
    if (c == '_') c = '-';
  }
  return k;
}

struct ConfigFile {
  nlohmann::json values = nlohmann::json::object();
  std::string command;  // set when the file is a run manifest
};

ConfigFile read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  ConfigFile cfg;
  const std::string head = trim(text);
  if (!head.empty() && head.front() == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + path + ": " + e.what());
    }
    if (j.contains("command") && j.contains("config") && j.at("config").is_object()) {
      cfg.command = j.at("command").get<std::string>();
      j = j.at("config");
    }
    for (const auto& [k, v] : j.items()) cfg.values[normalize_key(k)] = v;
    return cfg;
  }
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config file " + path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    cfg.values[normalize_key(trim(line.substr(0, eq)))] = trim(line.substr(eq + 1));
  }
  return cfg;
}

class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& description)
      : app_(parent.add_subcommand(name, description)) {}

  CLI::App* app() const { return app_; }

  void add(Setting s) {
    const std::string flag = "--" + s.key + (s.alias.empty() ? "" : "," + s.alias);
    std::string help = s.help;
    if (!s.fallback.is_null() && s.fallback != "") {
      help += " [default: " + (s.fallback.is_string() ? s.fallback.get<std::string>() : s.fallback.dump()) + "]";
    }
    if (s.kind == Kind::kBool) {
      options_[s.key] = app_->add_flag(flag, flags_[s.key], help);
    } else {
      static const char* const kTypeNames[] = {"INT", "FLOAT", "", "TEXT"};
      options_[s.key] =
          app_->add_option(flag, raw_[s.key], help)->type_name(kTypeNames[static_cast<int>(s.kind)]);
    }
    settings_.push_back(std::move(s));
  }

  ojson resolve(const ConfigFile& file) const {
    ojson out;
    for (const auto& s : settings_) out[s.key] = s.fallback;
    for (const auto& [k, v] : file.values.items()) {
      const Setting* s = find(k);
      if (!s) throw ConfigError("unknown config key '" + k + "' for " + app_->get_name());
      out[k] = convert(s->kind, v, k);
    }
    for (const auto& s : settings_) {
      if (options_.at(s.key)->count() == 0) continue;
      out[s.key] = s.kind == Kind::kBool ? nlohmann::json(flags_.at(s.key))
                                         : convert(s.kind, raw_.at(s.key), s.key);
    }
    return out;
  }

  void check_required(const ojson& cfg) const {
    for (const auto& s : settings_) {
      if (!s.required) continue;
      const auto& v = cfg.at(s.key);
      if (v.is_null() || (v.is_string() && v.get<std::string>().empty())) {
        throw UsageError(app_->get_name() + ": --" + s.key + " is required");
      }
    }
  }

 private:
  const Setting* find(const std::string& key) const {
    for (const auto& s : settings_) {
      if (s.key == key) return &s;
    }
    return nullptr;
  }

  CLI::App* app_;
  std::vector<Setting> settings_;
  std::map<std::string, CLI::Option*> options_;
  std::map<std::string, std::string> raw_;
  std::map<std::string, bool> flags_;
};

// ---------------------------------------------------------------------------
// Run manifest

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunContext {
  std::string command;
  std::vector<std::string> argv;
  std::string started_at = utc_now();
  ojson config;
  std::vector<std::string> outputs;
  ojson summary = ojson::object();
  std::string manifest_path;  // empty: command default
  bool offline = false;
};

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out << text;
    if (!out) throw InputError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_manifest(const RunContext& ctx, const std::string& default_path, std::ostream& out) {
  const std::string path = ctx.manifest_path.empty() ? default_path : ctx.manifest_path;
  if (path.empty()) return;
  ojson m;
  m["command"] = ctx.command;
  m["argv"] = ctx.argv;
  m["config"] = ctx.config;
  m["version"] = MULLAMA_VERSION;
  m["started_at"] = ctx.started_at;
  m["finished_at"] = utc_now();
  m["outputs"] = ctx.outputs;
  m["summary"] = ctx.summary;
  write_text_atomic(path, m.dump(2) + "\n");
  out << "manifest: " << path << "\n";
}

// ---------------------------------------------------------------------------
// Shared helpers

std::string str(const ojson& cfg, const char* key) { return cfg.at(key).get<std::string>(); }
long long integer(const ojson& cfg, const char* key) { return cfg.at(key).get<long long>(); }
double real(const ojson& cfg, const char* key) { return cfg.at(key).get<double>(); }
bool flag(const ojson& cfg, const char* key) { return cfg.at(key).get<bool>(); }

int to_int(const ojson& cfg, const char* key) {
  const long long v = integer(cfg, key);
  if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(std::string("setting '") + key + "' out of range");
  return static_cast<int>(v);
}

void add_encoder_settings(Command& c) {
  c.add({"encoder-layers", Kind::kInt, 3, "toy encoder layer count"});
  c.add({"encoder-dim", Kind::kInt, 8, "toy encoder feature dimension"});
  c.add({"frame-rate", Kind::kFloat, 50.0, "toy encoder frames per second"});
  c.add({"sample-rate", Kind::kInt, 16000, "toy encoder input sample rate"});
  c.add({"encoder-seed", Kind::kInt, 7, "toy encoder weight seed"});
}

EncoderSpec encoder_spec(const ojson& cfg) {
  EncoderSpec s{to_int(cfg, "encoder-layers"), to_int(cfg, "encoder-dim"), real(cfg, "frame-rate")};
  s.validate();
  return s;
}

AudioClip load_clip(const fs::path& path, const AudioEncoder& encoder, bool resample) {
  AudioClip clip = read_wav(path);
  if (resample && clip.sample_rate != encoder.sample_rate()) clip = resample_linear(clip, encoder.sample_rate());
  return clip;
}

std::vector<fs::path> wav_files(const fs::path& p) {
  if (!fs::exists(p)) throw InputError("no such file or directory: " + p.string());
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw InputError("no .wav files in " + p.string());
  return out;
}

bool offline_from_env() {
  const char* v = std::getenv("MULLAMA_OFFLINE");
  return v && *v && std::string(v) != "0";
}

// ---------------------------------------------------------------------------
// gen-dataset

void setup_gen(Command& c) {
  c.add({"annotations", Kind::kString, "", "track annotations JSONL", true, "--input"});
  c.add({"out", Kind::kString, "", "output QA JSONL", true, "--output"});
  c.add({"backend", Kind::kString, "mock", "LLM backend: mock or remote"});
  c.add({"endpoint", Kind::kString, "", "remote chat-completions URL"});
  c.add({"model", Kind::kString, "", "remote model name"});
  c.add({"token-env", Kind::kString, "MULLAMA_LLM_TOKEN", "environment variable holding the API token"});
  c.add({"timeout", Kind::kFloat, 60.0, "remote request timeout in seconds"});
  c.add({"retries", Kind::kInt, 3, "attempts per backend request"});
  c.add({"parallelism", Kind::kInt, 1, "concurrent backend requests"});
  c.add({"resume", Kind::kBool, false, "continue from the progress log of an interrupted run"});
  c.add({"prompts", Kind::kString, "", "directory of instruction templates (default: built-in)"});
  c.add({"stop-after", Kind::kInt, -1, "process at most this many pending tracks"});
}

int run_gen(RunContext& ctx, std::ostream& out, std::ostream& err) {
  const auto& cfg = ctx.config;
  const std::string backend_name = str(cfg, "backend");
  std::shared_ptr<LLMBackend> inner;
  if (backend_name == "mock") {
    inner = std::make_shared<MockBackend>();
  } else if (backend_name == "remote") {
    if (ctx.offline) throw ConfigError("remote backend requested in offline mode");
    RemoteBackendConfig rc{str(cfg, "endpoint"), str(cfg, "model"), str(cfg, "token-env"), real(cfg, "timeout")};
    inner = make_remote_backend(rc);
  } else {
    throw ConfigError("unknown backend '" + backend_name + "' (expected mock or remote)");
  }
  if (integer(cfg, "retries") < 1) throw ConfigError("retries must be >= 1");
  RetryPolicy policy;
  policy.attempts = to_int(cfg, "retries");
  RetryingBackend backend(inner, policy);

  BuildOptions options;
  options.parallelism = to_int(cfg, "parallelism");
  options.stop_after = integer(cfg, "stop-after");
  if (!str(cfg, "prompts").empty()) options.instructions = InstructionSet::load(str(cfg, "prompts"));

  const auto corpus = read_annotations(str(cfg, "annotations"));
  JsonlDatasetSink sink(str(cfg, "out"), flag(cfg, "resume"));
  const DatasetManifest m = build_dataset(corpus, backend, sink, options);
  ctx.summary = m.to_json();
  if (!m.failures.empty()) {
    for (const auto& [id, e] : m.failures) err << "failed: " << id << ": " << e << "\n";
    err << m.failures.size() << " track(s) failed; rerun with --resume to retry them\n";
    return kExitBackend;
  }
  if (!m.complete) {
    out << "stopped after " << m.tracks_completed << "/" << m.tracks_total
        << " tracks; rerun with --resume to continue\n";
    ctx.outputs.push_back(sink.progress_path().string());
  } else {
    out << "wrote " << m.pairs_total << " QA pairs for " << m.tracks_total << " tracks to "
        << str(cfg, "out") << "\n";
    ctx.outputs.push_back(str(cfg, "out"));
  }
  write_manifest(ctx, str(cfg, "out") + ".manifest.json", out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// extract

void setup_extract(Command& c) {
  c.add({"audio", Kind::kString, "", "WAV file or directory of WAV files", true});
  c.add({"cache-dir", Kind::kString, "", "embedding cache directory", true});
  c.add({"checkpoint", Kind::kString, "", "take the encoder from this checkpoint"});
  add_encoder_settings(c);
  c.add({"resample", Kind::kBool, false, "resample audio to the encoder rate"});
  c.add({"overwrite", Kind::kBool, false, "recompute cached embeddings"});
}

EncoderHandle make_encoder(const ojson& cfg) {
  if (!str(cfg, "checkpoint").empty()) return load_checkpoint(str(cfg, "checkpoint")).model.encoder;
  return toy_encoder(encoder_spec(cfg), static_cast<std::uint64_t>(integer(cfg, "encoder-seed")),
                     to_int(cfg, "sample-rate"));
}

int run_extract(RunContext& ctx, std::ostream& out, std::ostream&) {
  const auto& cfg = ctx.config;
  const EncoderHandle encoder = make_encoder(cfg);
  const fs::path dir = str(cfg, "cache-dir");
  const auto files = wav_files(str(cfg, "audio"));
  fs::create_directories(dir);
  long computed = 0, reused = 0;
  for (const auto& f : files) {
    const std::string id = f.stem().string();
    if (!flag(cfg, "overwrite") && find_cached_embedding(dir, id, encoder->spec())) {
      ++reused;
      continue;
    }
    const auto emb = extract_features(load_clip(f, *encoder, flag(cfg, "resample")), *encoder);
    const auto path = embedding_cache_path(dir, id);
    save_embedding(path, id, encoder->name(), emb);
    ctx.outputs.push_back(path.string());
    ++computed;
  }
  ctx.summary = {{"tracks", files.size()}, {"computed", computed}, {"reused", reused}};
  out << "cached " << computed << " embedding(s), reused " << reused << " in " << dir.string() << "\n";
  write_manifest(ctx, (dir / "extract.manifest.json").string(), out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

void setup_train(Command& c) {
  c.add({"stage", Kind::kString, "pretrain", "pretrain or finetune"});
  c.add({"data", Kind::kString, "", "QA JSONL (as written by gen-dataset)", true});
  c.add({"audio-dir", Kind::kString, "", "directory of <track_id>.wav files"});
  c.add({"cache-dir", Kind::kString, "", "embedding cache directory (checked before audio-dir)"});
  c.add({"resample", Kind::kBool, false, "resample audio to the encoder rate"});
  c.add({"init", Kind::kString, "", "start from this checkpoint instead of a fresh toy model"});
  c.add({"out", Kind::kString, "", "output checkpoint", true});
  c.add({"log", Kind::kString, "", "per-step loss CSV"});
  c.add({"epochs", Kind::kInt, nullptr, "epochs [default: 150 pretrain, 20 finetune]"});
  c.add({"lr", Kind::kFloat, nullptr, "base learning rate [default: 0.0001]"});
  c.add({"batch-size", Kind::kInt, nullptr, "examples per micro-batch [default: 1]"});
  c.add({"accumulation", Kind::kInt, nullptr, "micro-batches per update [default: 8]"});
  c.add({"weight-decay", Kind::kFloat, nullptr, "AdamW weight decay [default: 0.02]"});
  c.add({"schedule", Kind::kString, "cosine", "learning-rate schedule: cosine or constant"});
  c.add({"warmup", Kind::kInt, 0, "linear warmup steps"});
  c.add({"checkpoint-every", Kind::kInt, nullptr, "optimizer steps between checkpoints [default: 500]"});
  c.add({"max-steps", Kind::kInt, -1, "stop after this many optimizer steps"});
  c.add({"seed", Kind::kInt, 0, "shuffling seed"});
  add_encoder_settings(c);
  c.add({"decoder-layers", Kind::kInt, 4, "toy decoder layers"});
  c.add({"decoder-dim", Kind::kInt, 64, "toy decoder width"});
  c.add({"decoder-heads", Kind::kInt, 8, "toy decoder attention heads"});
  c.add({"decoder-ffn", Kind::kInt, 128, "toy decoder feed-forward width"});
  c.add({"decoder-seed", Kind::kInt, 11, "toy decoder seed"});
  c.add({"subblocks", Kind::kInt, 3, "adapter sub-blocks"});
  c.add({"adapter-seed", Kind::kInt, 13, "adapter seed"});
  c.add({"base-steps", Kind::kInt, 200, "language-model steps for the toy decoder before freezing"});
  c.add({"base-lr", Kind::kFloat, 1e-2, "language-model learning rate for the toy decoder"});
}

void fill_train_defaults(ojson& cfg) {
  const TrainConfig d = TrainConfig::defaults(parse_stage(str(cfg, "stage")));
  auto fill = [&](const char* key, const nlohmann::json& v) {
    if (cfg.at(key).is_null()) cfg[key] = v;
  };
  fill("epochs", d.epochs);
  fill("lr", d.learning_rate);
  fill("batch-size", d.batch_size);
  fill("accumulation", d.accumulation_steps);
  fill("weight-decay", d.weight_decay);
  fill("checkpoint-every", d.checkpoint_every);
}

TrainConfig train_config(const ojson& cfg) {
  TrainConfig t = TrainConfig::defaults(parse_stage(str(cfg, "stage")));
  t.epochs = to_int(cfg, "epochs");
  t.learning_rate = real(cfg, "lr");
  t.batch_size = to_int(cfg, "batch-size");
  t.accumulation_steps = to_int(cfg, "accumulation");
  t.weight_decay = real(cfg, "weight-decay");
  const std::string sched = str(cfg, "schedule");
  if (sched == "cosine") {
    t.schedule = LrSchedule::kCosine;
  } else if (sched == "constant") {
    t.schedule = LrSchedule::kConstant;
  } else {
    throw ConfigError("unknown schedule '" + sched + "' (expected cosine or constant)");
  }
  t.warmup_steps = to_int(cfg, "warmup");
  t.checkpoint_every = to_int(cfg, "checkpoint-every");
  t.checkpoint_path = str(cfg, "out");
  t.max_steps = integer(cfg, "max-steps");
  t.seed = static_cast<std::uint64_t>(integer(cfg, "seed"));
  t.validate();
  return t;
}

int run_train(RunContext& ctx, std::ostream& out, std::ostream&) {
  auto& cfg = ctx.config;
  const TrainConfig tc = train_config(cfg);
  const auto pairs = read_pairs(str(cfg, "data"));
  if (pairs.empty()) throw InputError("no QA pairs in " + str(cfg, "data"));

  TrainState state;
  if (!str(cfg, "init").empty()) {
    state = load_checkpoint(str(cfg, "init"));
    if (state.stage != tc.stage) state.begin_stage(tc.stage);
  } else {
    std::vector<std::string> texts, dialogues;
    for (const auto& p : pairs) {
      texts.push_back(p.question);
      texts.push_back(p.answer);
      dialogues.push_back(format_dialogue(p.question, p.answer));
    }
    const Vocabulary vocab = Vocabulary::build(texts);
    ToyModelConfig mc;
    mc.encoder = encoder_spec(cfg);
    mc.sample_rate = to_int(cfg, "sample-rate");
    mc.encoder_seed = static_cast<std::uint64_t>(integer(cfg, "encoder-seed"));
    mc.decoder.num_layers = to_int(cfg, "decoder-layers");
    mc.decoder.model_dim = to_int(cfg, "decoder-dim");
    mc.decoder.num_heads = to_int(cfg, "decoder-heads");
    mc.decoder.ffn_dim = to_int(cfg, "decoder-ffn");
    mc.decoder_seed = static_cast<std::uint64_t>(integer(cfg, "decoder-seed"));
    mc.num_subblocks = to_int(cfg, "subblocks");
    mc.adapter_seed = static_cast<std::uint64_t>(integer(cfg, "adapter-seed"));
    mc.base_training.steps = to_int(cfg, "base-steps");
    mc.base_training.learning_rate = real(cfg, "base-lr");
    if (mc.base_training.steps > 0) mc.base_corpus = dialogues;
    state = TrainState::fresh(build_toy_model(mc, vocab), tc.stage);
  }

  const fs::path audio_dir = str(cfg, "audio-dir");
  const fs::path cache_dir = str(cfg, "cache-dir");
  std::map<std::string, int> per_track;
  std::vector<TrainExample> dataset;
  for (const auto& p : pairs) {
    TrainExample ex;
    ex.id = p.track_id + "#" + std::to_string(per_track[p.track_id]++);
    ex.question = p.question;
    ex.answer = p.answer;
    std::optional<LayerStackedEmbedding> cached;
    if (!cache_dir.empty()) cached = find_cached_embedding(cache_dir, p.track_id, state.model.encoder->spec());
    if (cached) {
      ex.music = std::move(*cached);
    } else if (!audio_dir.empty()) {
      ex.music = load_clip(audio_dir / (p.track_id + ".wav"), *state.model.encoder, flag(cfg, "resample"));
    } else {
      throw InputError("no audio or cached embedding for track '" + p.track_id + "'");
    }
    dataset.push_back(std::move(ex));
  }

  std::unique_ptr<std::ofstream> log;
  if (!str(cfg, "log").empty()) {
    log = std::make_unique<std::ofstream>(str(cfg, "log"));
    if (!*log) throw InputError("cannot write " + str(cfg, "log"));
    *log << loss_csv_header() << "\n";
  }
  double last_loss = 0.0;
  const StageResult r = run_stage(tc, dataset, state, [&](const LossRecord& rec) {
    last_loss = rec.loss;
    if (log) *log << to_csv_row(rec) << "\n";
  });
  save_checkpoint(str(cfg, "out"), state);
  ctx.outputs.push_back(str(cfg, "out"));
  if (log) ctx.outputs.push_back(str(cfg, "log"));
  ctx.summary = {{"stage", to_string(tc.stage)},
                 {"examples", dataset.size()},
                 {"steps", state.step},
                 {"completed", r.completed},
                 {"final_loss", last_loss}};
  out << to_string(tc.stage) << ": " << state.step << " steps, final loss " << last_loss << ", checkpoint "
      << str(cfg, "out") << "\n";
  write_manifest(ctx, str(cfg, "out") + ".manifest.json", out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

void setup_evaluate(Command& c) {
  c.add({"pred", Kind::kString, "", "predictions JSONL ({\"id\", \"text\"})", true});
  c.add({"ref", Kind::kString, "", "references JSONL ({\"id\", \"text\"} or {\"id\", \"texts\"})", true});
  c.add({"out", Kind::kString, "", "report JSON", true});
  c.add({"bert-backend", Kind::kString, "none", "BERT-Score embeddings: none or hashing"});
  c.add({"stem", Kind::kBool, false, "enable the METEOR stem stage"});
  c.add({"synonyms", Kind::kString, "", "METEOR synonym table file"});
  c.add({"model-name", Kind::kString, "model", "row label for the printed table"});
}

int run_evaluate(RunContext& ctx, std::ostream& out, std::ostream& err) {
  const auto& cfg = ctx.config;
  EvalOptions options;
  options.meteor.stem = flag(cfg, "stem");
  if (!str(cfg, "synonyms").empty()) {
    std::ifstream in(str(cfg, "synonyms"));
    if (!in) throw InputError("cannot open synonym table " + str(cfg, "synonyms"));
    std::stringstream buf;
    buf << in.rdbuf();
    options.meteor.synonyms = std::make_shared<SynonymTable>(SynonymTable::parse(buf.str()));
  }
  const std::string bert = str(cfg, "bert-backend");
  if (bert == "hashing") {
    options.embedding = std::make_shared<HashingEmbeddingBackend>();
  } else if (bert != "none") {
    throw ConfigError("unknown bert-backend '" + bert + "' (expected none or hashing)");
  }
  Warnings warnings;
  const EvalReport report = evaluate_model(read_id_text_jsonl(str(cfg, "pred")),
                                           read_id_text_jsonl(str(cfg, "ref")), options, &warnings);
  for (const auto& w : warnings) err << "warning: " << w << "\n";
  write_text_atomic(str(cfg, "out"), report.to_json().dump(2) + "\n");
  ctx.outputs.push_back(str(cfg, "out"));
  ctx.summary = report.to_json();
  out << report_table_header() << "\n" << report.table_row(str(cfg, "model-name")) << "\n";
  write_manifest(ctx, str(cfg, "out") + ".manifest.json", out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// qa / caption

void setup_answer(Command& c, bool caption) {
  c.add({"audio", Kind::kString, "", "WAV clip", true});
  c.add({"checkpoint", Kind::kString, "", "trained checkpoint", true});
  if (caption) {
    c.add({"style", Kind::kString, "short", "short or detailed"});
  } else {
    c.add({"question", Kind::kString, "", "question about the clip", true});
  }
  c.add({"max-tokens", Kind::kInt, caption ? 64 : 32, "maximum answer length in tokens"});
  c.add({"resample", Kind::kBool, false, "resample audio to the encoder rate"});
}

std::string caption_question(const std::string& style) {
  if (style == "short") return fixed_question_set()[0];
  if (style == "detailed") return fixed_question_set()[1];
  throw ConfigError("unknown caption style '" + style + "' (expected short or detailed)");
}

// stdout carries only the answer; the manifest note goes to stderr.
int run_answer(RunContext& ctx, std::ostream& out, std::ostream& err, bool caption) {
  auto& cfg = ctx.config;
  const std::string question = caption ? caption_question(str(cfg, "style")) : str(cfg, "question");
  if (to_int(cfg, "max-tokens") < 1) throw ConfigError("max-tokens must be >= 1");
  const fs::path ckpt = str(cfg, "checkpoint");
  if (!fs::exists(ckpt)) throw LoadError("checkpoint not found: " + ckpt.string());
  const MusicQaModel model = load_checkpoint(ckpt).model;
  const auto emb = extract_features(load_clip(str(cfg, "audio"), *model.encoder, flag(cfg, "resample")),
                                    *model.encoder);
  DecodeParams params;
  params.max_new_tokens = to_int(cfg, "max-tokens");
  const std::string answer = answer_question(model, &emb, question, params);
  out << answer << "\n";
  ctx.summary = {{"question", question}, {"answer", answer}};
  write_manifest(ctx, "", err);
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mullama: music question answering and captioning toolkit", "mullama"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", MULLAMA_VERSION);
  std::string config_path, manifest_path;
  bool offline = false, print_config = false;
  app.add_option("--config", config_path, "config file (key = value lines, JSON, or a run manifest)");
  app.add_option("--manifest", manifest_path, "where to write the run manifest");
  app.add_flag("--offline", offline, "refuse network backends (also MULLAMA_OFFLINE=1)");
  app.add_flag("--print-config", print_config, "print the resolved configuration as JSON and exit");

  Command gen(app, "gen-dataset", "generate the QA dataset from track annotations");
  gen.app()->alias("qa-gen");
  setup_gen(gen);
  Command extract(app, "extract", "compute and cache layer-stacked embeddings");
  setup_extract(extract);
  Command train(app, "train", "run a training stage");
  setup_train(train);
  Command evaluate(app, "evaluate", "score predictions against references");
  setup_evaluate(evaluate);
  Command qa(app, "qa", "answer a question about a clip");
  setup_answer(qa, false);
  Command caption(app, "caption", "caption a clip");
  setup_answer(caption, true);
  const std::vector<Command*> commands{&gen, &extract, &train, &evaluate, &qa, &caption};

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (!args.empty() && !args[0].empty() && args[0][0] != '-' &&
        !app.get_subcommand_no_throw(args[0])) {
      err << "unknown subcommand '" << args[0] << "'\n" << app.help();
      return kExitUsage;
    }
    const int code = app.exit(e, out, err);
    if (code == 0) return kExitOk;
    err << app.help();
    return kExitUsage;
  }

  Command* cmd = nullptr;
  for (auto* c : commands) {
    if (c->app()->parsed()) cmd = c;
  }

  RunContext ctx;
  ctx.command = cmd->app()->get_name();
  ctx.argv = args;
  ctx.manifest_path = manifest_path;
  ctx.offline = offline || offline_from_env();
  try {
    ConfigFile file;
    if (!config_path.empty()) {
      file = read_config_file(config_path);
      if (!file.command.empty() && file.command != ctx.command) {
        throw ConfigError("manifest " + config_path + " was written by '" + file.command + "', not '" +
                          ctx.command + "'");
      }
    }
    ctx.config = cmd->resolve(file);
    if (cmd == &train) fill_train_defaults(ctx.config);
    if (print_config) {
      out << ctx.config.dump(2) << "\n";
      return kExitOk;
    }
    cmd->check_required(ctx.config);

    if (cmd == &gen) return run_gen(ctx, out, err);
    if (cmd == &extract) return run_extract(ctx, out, err);
    if (cmd == &train) return run_train(ctx, out, err);
    if (cmd == &evaluate) return run_evaluate(ctx, out, err);
    if (cmd == &qa) return run_answer(ctx, out, err, false);
    return run_answer(ctx, out, err, true);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << cmd->app()->help();
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const LoadError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const BackendError& e) {
    err << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const GenerationError& e) {
    err << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const SinkError& e) {
    err << "output error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    err << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    err << "input error: " << e.what() << "\n";
    return kExitInput;
  }
}

}  // namespace mullama::cli
