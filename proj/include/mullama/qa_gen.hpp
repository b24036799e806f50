// SPDX-License-Identifier: Apache-2.0
//
// Music QA dataset generation: prompts an instruction-following LLM with a
// caption or tag list and turns its numbered-list replies into 9 QA pairs per
// track (the four fixed description questions plus five open-ended pairs).
#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mullama/errors.hpp"

namespace mullama {

enum class Origin { kFixedQuestion, kOpenEnded };
enum class Source { kCaption, kTags };
std::string to_string(Origin o);
std::string to_string(Source s);
Origin parse_origin(const std::string& s);
Source parse_source(const std::string& s);

// The four canonical questions, in order.
const std::array<std::string, 4>& fixed_question_set();

struct TrackAnnotation {
  std::string track_id;
  std::optional<std::string> caption;
  std::optional<std::vector<std::string>> tags;

  void validate() const;
  // Caption when present, otherwise tags.
  Source preferred_source() const;
  static TrackAnnotation from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct QAPair {
  std::string track_id;
  std::string question;
  std::string answer;
  Origin origin = Origin::kFixedQuestion;
  Source source = Source::kCaption;

  void validate() const;
  static QAPair from_json(const nlohmann::json& j);
  // Field order: track_id, question, answer, origin, source.
  std::string to_json_line() const;
  bool operator==(const QAPair&) const = default;
};

enum class Expected { kFourAnswers, kFivePairs };

inline constexpr std::string_view kContentPlaceholder = "{content}";

struct InstructionTemplate {
  std::string template_id;
  std::string prompt_text;  // contains kContentPlaceholder exactly once
  Expected expected = Expected::kFourAnswers;

  int expected_outputs() const { return expected == Expected::kFourAnswers ? 4 : 5; }
  void validate() const;
  std::string render(const std::string& content) const;
};

// One template per (source, flow). Asset files are named <template_id>.txt.
struct InstructionSet {
  InstructionTemplate caption_fixed, tags_fixed, caption_open, tags_open;

  static InstructionSet builtin();
  static InstructionSet load(const std::filesystem::path& dir);
  const InstructionTemplate& get(Source source, Expected expected) const;
};

// Text handed to the template for an annotation: the caption, or the tags
// joined with ", ".
std::string annotation_content(const TrackAnnotation& ann, Source source);

// ---------------------------------------------------------------------------
// Backends

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public InputError {
 public:
  ParseError(const std::string& what, std::string raw_text)
      : InputError(what), raw(std::move(raw_text)) {}
  std::string raw;
};

class GenerationError : public std::runtime_error {
 public:
  GenerationError(std::string track, const std::string& what)
      : std::runtime_error("track '" + track + "': " + what), track_id(std::move(track)) {}
  std::string track_id;
};

struct BackendRequest {
  std::string prompt;
  // Structured hints; real backends only read the prompt.
  std::string track_id;
  Expected expected = Expected::kFourAnswers;
  std::string content;
};

class LLMBackend {
 public:
  virtual ~LLMBackend() = default;
  virtual std::string name() const = 0;
  // Throws BackendError on failure. Must be safe to call concurrently.
  virtual std::string complete(const BackendRequest& request) = 0;
};

// Deterministic stand-in: replies are a pure function of the request.
class MockBackend final : public LLMBackend {
 public:
  std::string name() const override { return "mock"; }
  std::string complete(const BackendRequest& request) override;

  long calls() const { return calls_.load(); }
  long calls_for(const std::string& track_id) const;

  // Fault injection for tests.
  void fail_next(int n) { fail_next_ = n; }                  // transient errors
  void fail_track(const std::string& id) { std::lock_guard l(mu_); failing_.insert(id); }
  void garble_track(const std::string& id) { std::lock_guard l(mu_); garbled_.insert(id); }

 private:
  std::atomic<long> calls_{0};
  std::atomic<int> fail_next_{0};
  mutable std::mutex mu_;
  std::map<std::string, long> per_track_;
  std::set<std::string> failing_, garbled_;
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_delay{500};
  double multiplier = 2.0;
};

class RetryingBackend final : public LLMBackend {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;
  RetryingBackend(std::shared_ptr<LLMBackend> inner, RetryPolicy policy = {},
                  Sleeper sleeper = nullptr);
  std::string name() const override { return inner_->name(); }
  std::string complete(const BackendRequest& request) override;

 private:
  std::shared_ptr<LLMBackend> inner_;
  RetryPolicy policy_;
  Sleeper sleep_;
};

struct RemoteBackendConfig {
  std::string endpoint;  // http(s)://host[:port]/path of a chat-completions API
  std::string model;
  std::string token_env = "MULLAMA_LLM_TOKEN";
  double timeout_seconds = 60.0;

  void validate() const;
};

// OpenAI-style chat completion over HTTP. The bearer token is read from the
// configured environment variable at construction (absent: no auth header).
std::shared_ptr<LLMBackend> make_remote_backend(const RemoteBackendConfig& config);

// ---------------------------------------------------------------------------
// Parsing and generation

struct ParsedOutput {
  std::vector<std::string> answers;                         // four_answers
  std::vector<std::pair<std::string, std::string>> pairs;   // five_pairs
};

ParsedOutput parse_backend_output(const std::string& raw, Expected expected);

std::vector<QAPair> generate_for_track(const TrackAnnotation& ann, LLMBackend& backend,
                                       const InstructionSet& instructions = InstructionSet::builtin());

// ---------------------------------------------------------------------------
// Dataset building

struct DatasetManifest {
  long tracks_total = 0;
  long tracks_completed = 0;  // including resumed ones
  long tracks_resumed = 0;    // found complete in the resume log, not re-queried
  long pairs_total = 0;
  std::map<std::string, long> pairs_by_source;
  std::map<std::string, long> pairs_by_origin;
  std::vector<std::pair<std::string, std::string>> failures;  // track_id, error
  long backend_calls = 0;
  bool complete = false;

  nlohmann::json to_json() const;
};

class SinkError : public std::runtime_error {
 public:
  SinkError(const std::string& what, DatasetManifest m)
      : std::runtime_error(what), manifest(std::move(m)) {}
  DatasetManifest manifest;
};

class DatasetSink {
 public:
  virtual ~DatasetSink() = default;
  // Pairs already recorded, keyed by track id (resume source).
  virtual std::map<std::string, std::vector<QAPair>> completed() const = 0;
  // Records one finished track; called from one thread at a time.
  virtual void append(const std::string& track_id, const std::vector<QAPair>& pairs) = 0;
  // Writes the canonical output (sorted by track id, then pair index).
  virtual void finalize() = 0;
};

// JSONL output plus a resume log at <output>.progress. Without `resume` any
// existing log is discarded.
class JsonlDatasetSink final : public DatasetSink {
 public:
  JsonlDatasetSink(std::filesystem::path output, bool resume);
  std::map<std::string, std::vector<QAPair>> completed() const override;
  void append(const std::string& track_id, const std::vector<QAPair>& pairs) override;
  void finalize() override;

  const std::filesystem::path& output() const { return output_; }
  std::filesystem::path progress_path() const;

 private:
  std::filesystem::path output_;
  std::map<std::string, std::vector<QAPair>> done_;
};

struct BuildOptions {
  int parallelism = 1;
  long stop_after = -1;  // dispatch at most this many pending tracks (-1: all)
  InstructionSet instructions = InstructionSet::builtin();
};

DatasetManifest build_dataset(const std::vector<TrackAnnotation>& corpus, LLMBackend& backend,
                              DatasetSink& sink, const BuildOptions& options = {});

std::vector<TrackAnnotation> read_annotations(const std::filesystem::path& path);
std::vector<QAPair> read_pairs(const std::filesystem::path& path);

}  // namespace mullama
