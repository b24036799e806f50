// SPDX-License-Identifier: Apache-2.0
//
// Text-generation metrics (weighted BLEU, METEOR, ROUGE-L, BERT-Score) and
// the tagging-probe protocol. All text metrics tokenize with tokenize() from
// text.hpp.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mullama/encoder.hpp"
#include "mullama/tensor.hpp"

namespace mullama {

using Tokens = std::vector<std::string>;
// Receives non-fatal diagnostics (empty candidates, excluded tags).
using Warnings = std::vector<std::string>;

// ---------------------------------------------------------------------------
// BLEU

struct NgramStats {
  std::array<long, 4> matches{};  // clipped n-gram matches, n = 1..4
  std::array<long, 4> totals{};   // candidate n-grams
  long candidate_len = 0;
  long reference_len = 0;  // closest reference length (shorter on ties)

  NgramStats& operator+=(const NgramStats& o);
};

NgramStats ngram_stats(const Tokens& candidate, const std::vector<Tokens>& references);

// Cumulative BLEU-n (uniform geometric mean of p_1..p_n times the brevity
// penalty). An order with no candidate n-grams or no matches scores 0.
double bleu_from_stats(const NgramStats& s, int n);
// Arithmetic mean of BLEU-1..BLEU-4.
double bleu_weighted_from_stats(const NgramStats& s);

double bleu_weighted(const std::string& candidate, const std::vector<std::string>& references,
                     Warnings* warnings = nullptr);

// ---------------------------------------------------------------------------
// ROUGE-L

inline constexpr double kRougeBeta = 1.2;

std::size_t lcs_length(const Tokens& a, const Tokens& b);
// LCS F-measure with recall weight kRougeBeta; max over references.
double rouge_l(const std::string& candidate, const std::vector<std::string>& references);
double rouge_l_tokens(const Tokens& candidate, const std::vector<Tokens>& references);

// ---------------------------------------------------------------------------
// METEOR

std::string porter_stem(const std::string& word);

// Words in one group are mutual synonyms. Text form: one group per line,
// whitespace separated; '#' starts a comment.
class SynonymTable {
 public:
  void add_group(const std::vector<std::string>& words);
  bool synonyms(const std::string& a, const std::string& b) const;
  static SynonymTable parse(const std::string& text);

 private:
  std::map<std::string, std::set<int>> groups_;
  int next_ = 0;
};

struct MeteorConfig {
  bool stem = false;
  std::shared_ptr<const SynonymTable> synonyms;  // null disables the stage
  double alpha = 0.9;  // Fmean = P R / (alpha P + (1 - alpha) R) -> 10PR/(R+9P)
  double gamma = 0.5;  // penalty = gamma (chunks / matches)^beta
  double beta = 3.0;
};

struct MeteorAlignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (candidate, reference), sorted
  std::size_t chunks = 0;
};

// Stage-wise alignment (exact, then stem, then synonym on still-unmatched
// words). Each stage maximizes the number of matches, then minimizes chunks.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference,
                             const MeteorConfig& config = {});
double meteor_tokens(const Tokens& candidate, const Tokens& reference,
                     const MeteorConfig& config = {});
// Max over references.
double meteor(const std::string& candidate, const std::vector<std::string>& references,
              const MeteorConfig& config = {});

// ---------------------------------------------------------------------------
// BERT-Score

class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual std::string name() const = 0;
  virtual bool available() const { return true; }
  // One row per token.
  virtual Matrix embed(const Tokens& tokens) const = 0;
};

// Deterministic pseudo-random vector per token (seeded by a hash of the
// token); identical tokens share a vector.
class HashingEmbeddingBackend final : public EmbeddingBackend {
 public:
  explicit HashingEmbeddingBackend(int dim = 64, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {}
  std::string name() const override { return "hashing"; }
  Matrix embed(const Tokens& tokens) const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

// Fixed table; unknown tokens raise InputError.
class LookupEmbeddingBackend final : public EmbeddingBackend {
 public:
  explicit LookupEmbeddingBackend(std::map<std::string, Vector> table);
  std::string name() const override { return "lookup"; }
  Matrix embed(const Tokens& tokens) const override;

 private:
  std::map<std::string, Vector> table_;
  std::size_t dim_ = 0;
};

class UnavailableEmbeddingBackend final : public EmbeddingBackend {
 public:
  std::string name() const override { return "unavailable"; }
  bool available() const override { return false; }
  Matrix embed(const Tokens&) const override;
};

struct BertScore {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

// Greedy cosine matching; F is clamped to [0, 1].
BertScore bert_score_pair(const Tokens& candidate, const Tokens& reference,
                          const EmbeddingBackend& backend);
// Mean over candidates of the best F against that candidate's references.
// nullopt when the backend is unavailable.
std::optional<double> bert_score(const std::vector<std::string>& candidates,
                                 const std::vector<std::vector<std::string>>& references,
                                 const EmbeddingBackend& backend);

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  double b_u = 0.0;
  double m_r = 0.0;
  double r_l = 0.0;
  std::optional<double> bert_s;  // absent when the embedding backend is unavailable
  long n_examples = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  // "| <name> | B-U | M-R | R-L | BERT-S |" with three decimals.
  std::string table_row(const std::string& model_name) const;
};

std::string report_table_header();

struct EvalOptions {
  MeteorConfig meteor;
  std::shared_ptr<const EmbeddingBackend> embedding;  // null: BERT-S unavailable
};

// Corpus-level scores: B-U from pooled n-gram statistics, the others as means
// of per-example scores. Ids must match exactly.
EvalReport evaluate_model(const std::vector<std::pair<std::string, std::string>>& predictions,
                          const std::vector<std::pair<std::string, std::string>>& references,
                          const EvalOptions& options = {}, Warnings* warnings = nullptr);

// JSONL with {"id": ..., "text": ...} per line; references may repeat an id.
std::vector<std::pair<std::string, std::string>> read_id_text_jsonl(const std::string& path);

// ---------------------------------------------------------------------------
// Tagging probe

struct TaggingProbeResult {
  double auc = 0.0;
  double ap = 0.0;
  int num_tags = 0;  // tags scored (degenerate tags excluded)

  nlohmann::ordered_json to_json() const;
};

struct ProbeOptions {
  int folds = 5;
  int iterations = 300;
  double learning_rate = 0.5;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

struct LabeledClip {
  AudioClip clip;
  std::vector<int> tags;  // 0/1 per tag
};

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

// Layer- and frame-mean of the stacked embedding.
Vector probe_features(const LayerStackedEmbedding& emb);

// Per-tag logistic regression scored on out-of-fold predictions; macro AUC/AP.
TaggingProbeResult tagging_probe_features(const std::vector<Vector>& features,
                                          const std::vector<std::vector<int>>& labels,
                                          const ProbeOptions& options = {},
                                          Warnings* warnings = nullptr);
TaggingProbeResult tagging_probe(const AudioEncoder& encoder, const std::vector<LabeledClip>& clips,
                                 const ProbeOptions& options = {}, Warnings* warnings = nullptr);

}  // namespace mullama
