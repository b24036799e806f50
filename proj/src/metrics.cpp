// SPDX-License-Identifier: Apache-2.0
#include "mullama/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <future>
#include <numeric>
#include <sstream>
#include <thread>

#include "mullama/errors.hpp"
#include "mullama/rng.hpp"
#include "mullama/text.hpp"

namespace mullama {

// ---------------------------------------------------------------------------
// BLEU

NgramStats& NgramStats::operator+=(const NgramStats& o) {
  for (int n = 0; n < 4; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  candidate_len += o.candidate_len;
  reference_len += o.reference_len;
  return *this;
}

namespace {

std::map<Tokens, long> count_ngrams(const Tokens& t, std::size_t n) {
  std::map<Tokens, long> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    ++out[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i),
                 t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

std::vector<Tokens> tokenize_all(const std::vector<std::string>& texts) {
  std::vector<Tokens> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(tokenize(t));
  return out;
}

void require_references(std::size_t n) {
  if (n == 0) throw InputError("at least one reference is required");
}

}  // namespace

NgramStats ngram_stats(const Tokens& candidate, const std::vector<Tokens>& references) {
  require_references(references.size());
  NgramStats s;
  s.candidate_len = static_cast<long>(candidate.size());
  long best = -1;
  for (const auto& r : references) {
    const long len = static_cast<long>(r.size());
    const long d = std::labs(len - s.candidate_len);
    const long bd = std::labs(best - s.candidate_len);
    if (best < 0 || d < bd || (d == bd && len < best)) best = len;
  }
  s.reference_len = best;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cand = count_ngrams(candidate, n);
    std::map<Tokens, long> max_ref;
    for (const auto& r : references) {
      for (const auto& [g, c] : count_ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    for (const auto& [g, c] : cand) {
      s.totals[n - 1] += c;
      const auto it = max_ref.find(g);
      if (it != max_ref.end()) s.matches[n - 1] += std::min(c, it->second);
    }
  }
  return s;
}

double bleu_from_stats(const NgramStats& s, int n) {
  if (n < 1 || n > 4) throw ConfigError("BLEU order must be in 1..4");
  if (s.candidate_len == 0) return 0.0;
  double log_p = 0.0;
  for (int k = 0; k < n; ++k) {
    if (s.totals[k] == 0 || s.matches[k] == 0) return 0.0;
    log_p += std::log(static_cast<double>(s.matches[k]) / static_cast<double>(s.totals[k]));
  }
  const double bp =
      s.candidate_len >= s.reference_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(s.reference_len) / static_cast<double>(s.candidate_len));
  return bp * std::exp(log_p / n);
}

double bleu_weighted_from_stats(const NgramStats& s) {
  double sum = 0.0;
  for (int n = 1; n <= 4; ++n) sum += 0.25 * bleu_from_stats(s, n);
  return sum;
}

double bleu_weighted(const std::string& candidate, const std::vector<std::string>& references,
                     Warnings* warnings) {
  require_references(references.size());
  const Tokens c = tokenize(candidate);
  if (c.empty()) {
    if (warnings) warnings->push_back("BLEU: empty candidate scored 0");
    return 0.0;
  }
  return bleu_weighted_from_stats(ngram_stats(c, tokenize_all(references)));
}

// ---------------------------------------------------------------------------
// ROUGE-L

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l_tokens(const Tokens& candidate, const std::vector<Tokens>& references) {
  require_references(references.size());
  if (candidate.empty()) return 0.0;
  double best = 0.0;
  for (const auto& r : references) {
    if (r.empty()) continue;
    const double lcs = static_cast<double>(lcs_length(candidate, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidate.size());
    const double rec = lcs / static_cast<double>(r.size());
    const double b2 = kRougeBeta * kRougeBeta;
    best = std::max(best, (1.0 + b2) * p * rec / (rec + b2 * p));
  }
  return best;
}

double rouge_l(const std::string& candidate, const std::vector<std::string>& references) {
  return rouge_l_tokens(tokenize(candidate), tokenize_all(references));
}

// ---------------------------------------------------------------------------
// METEOR

void SynonymTable::add_group(const std::vector<std::string>& words) {
  const int id = next_++;
  for (const auto& w : words) groups_[w].insert(id);
}

bool SynonymTable::synonyms(const std::string& a, const std::string& b) const {
  const auto ia = groups_.find(a);
  const auto ib = groups_.find(b);
  if (ia == groups_.end() || ib == groups_.end()) return false;
  for (int g : ia->second) {
    if (ib->second.count(g)) return true;
  }
  return false;
}

SynonymTable SynonymTable::parse(const std::string& text) {
  SynonymTable t;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = line.substr(0, line.find('#'));
    std::istringstream ws(line);
    std::vector<std::string> words;
    for (std::string w; ws >> w;) {
      std::transform(w.begin(), w.end(), w.begin(),
                     [](unsigned char c) { return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c); });
      words.push_back(w);
    }
    if (words.size() >= 2) t.add_group(words);
  }
  return t;
}

namespace {

std::size_t count_chunks(std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  if (pairs.empty()) return 0;
  std::sort(pairs.begin(), pairs.end());
  std::size_t chunks = 1;
  for (std::size_t i = 1; i < pairs.size(); ++i) {
    if (pairs[i].first != pairs[i - 1].first + 1 || pairs[i].second != pairs[i - 1].second + 1) {
      ++chunks;
    }
  }
  return chunks;
}

// Kuhn's augmenting-path maximum bipartite matching size.
std::size_t max_matching(const std::vector<std::vector<std::size_t>>& adj, std::size_t nr) {
  std::vector<long> owner(nr, -1);
  std::size_t size = 0;
  for (std::size_t c = 0; c < adj.size(); ++c) {
    std::vector<char> seen(nr, 0);
    std::function<bool(std::size_t)> augment = [&](std::size_t u) {
      for (std::size_t r : adj[u]) {
        if (seen[r]) continue;
        seen[r] = 1;
        if (owner[r] < 0 || augment(static_cast<std::size_t>(owner[r]))) {
          owner[r] = static_cast<long>(u);
          return true;
        }
      }
      return false;
    };
    if (augment(c)) ++size;
  }
  return size;
}

// Bounded exhaustive search for one stage; beyond the node budget the best
// alignment found so far is kept (the first one found is the greedy
// left-to-right alignment).
constexpr long kMeteorSearchBudget = 200000;

void align_stage(const std::vector<std::vector<std::size_t>>& adj, std::size_t nr,
                 std::vector<std::pair<std::size_t, std::size_t>>& fixed) {
  const std::size_t target = max_matching(adj, nr);
  if (target == 0) return;
  const std::size_t nc = adj.size();
  // Candidates with any edge, for the optimistic bound.
  std::vector<std::size_t> remaining_with_edges(nc + 1, 0);
  for (std::size_t i = nc; i-- > 0;) {
    remaining_with_edges[i] = remaining_with_edges[i + 1] + (adj[i].empty() ? 0 : 1);
  }
  std::vector<char> used(nr, 0);
  std::vector<std::pair<std::size_t, std::size_t>> cur, best;
  std::size_t best_chunks = SIZE_MAX;
  long nodes = 0;
  std::function<void(std::size_t)> dfs = [&](std::size_t i) {
    if (++nodes > kMeteorSearchBudget && !best.empty()) return;
    if (cur.size() + remaining_with_edges[i] < target) return;
    if (cur.size() == target) {
      auto all = fixed;
      all.insert(all.end(), cur.begin(), cur.end());
      const std::size_t ch = count_chunks(all);
      if (ch < best_chunks) {
        best_chunks = ch;
        best = cur;
      }
      return;
    }
    if (i == nc) return;
    for (std::size_t r : adj[i]) {
      if (used[r]) continue;
      used[r] = 1;
      cur.emplace_back(i, r);
      dfs(i + 1);
      cur.pop_back();
      used[r] = 0;
    }
    dfs(i + 1);
  };
  dfs(0);
  fixed.insert(fixed.end(), best.begin(), best.end());
}

}  // namespace

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference,
                             const MeteorConfig& config) {
  std::vector<std::function<bool(const std::string&, const std::string&)>> stages;
  stages.emplace_back([](const std::string& a, const std::string& b) { return a == b; });
  if (config.stem) {
    stages.emplace_back(
        [](const std::string& a, const std::string& b) { return porter_stem(a) == porter_stem(b); });
  }
  if (config.synonyms) {
    const auto syn = config.synonyms;
    stages.emplace_back(
        [syn](const std::string& a, const std::string& b) { return syn->synonyms(a, b); });
  }

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& match : stages) {
    std::vector<char> c_used(candidate.size(), 0), r_used(reference.size(), 0);
    for (const auto& [c, r] : pairs) {
      c_used[c] = 1;
      r_used[r] = 1;
    }
    std::vector<std::vector<std::size_t>> adj(candidate.size());
    for (std::size_t c = 0; c < candidate.size(); ++c) {
      if (c_used[c]) continue;
      for (std::size_t r = 0; r < reference.size(); ++r) {
        if (!r_used[r] && match(candidate[c], reference[r])) adj[c].push_back(r);
      }
    }
    align_stage(adj, reference.size(), pairs);
  }
  std::sort(pairs.begin(), pairs.end());
  MeteorAlignment a;
  a.chunks = count_chunks(pairs);
  a.pairs = std::move(pairs);
  return a;
}

double meteor_tokens(const Tokens& candidate, const Tokens& reference, const MeteorConfig& config) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const auto a = meteor_align(candidate, reference, config);
  const double m = static_cast<double>(a.pairs.size());
  if (m == 0.0) return 0.0;
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double fmean = p * r / (config.alpha * p + (1.0 - config.alpha) * r);
  const double penalty = config.gamma * std::pow(static_cast<double>(a.chunks) / m, config.beta);
  return fmean * (1.0 - penalty);
}

double meteor(const std::string& candidate, const std::vector<std::string>& references,
              const MeteorConfig& config) {
  require_references(references.size());
  const Tokens c = tokenize(candidate);
  double best = 0.0;
  for (const auto& r : references) best = std::max(best, meteor_tokens(c, tokenize(r), config));
  return best;
}

// ---------------------------------------------------------------------------
// BERT-Score

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Matrix HashingEmbeddingBackend::embed(const Tokens& tokens) const {
  Matrix out(tokens.size(), static_cast<std::size_t>(dim_));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    Rng rng(derive_seed(seed_, fnv1a(tokens[i])));
    for (auto& v : out.row(i)) v = rng.normal();
  }
  return out;
}

LookupEmbeddingBackend::LookupEmbeddingBackend(std::map<std::string, Vector> table)
    : table_(std::move(table)) {
  if (table_.empty()) throw ConfigError("lookup embedding table is empty");
  dim_ = table_.begin()->second.size();
  for (const auto& [tok, v] : table_) {
    if (v.size() != dim_ || dim_ == 0) {
      throw ConfigError("lookup embedding for '" + tok + "' has inconsistent dimension");
    }
  }
}

Matrix LookupEmbeddingBackend::embed(const Tokens& tokens) const {
  Matrix out(tokens.size(), dim_);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto it = table_.find(tokens[i]);
    if (it == table_.end()) throw InputError("no embedding for token '" + tokens[i] + "'");
    std::copy(it->second.begin(), it->second.end(), out.row(i).begin());
  }
  return out;
}

Matrix UnavailableEmbeddingBackend::embed(const Tokens&) const {
  throw ConfigError("embedding backend unavailable");
}

namespace {

void normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const double n = std::sqrt(dot(row, row));
    if (n > 0.0) {
      for (auto& v : row) v /= n;
    }
  }
}

}  // namespace

BertScore bert_score_pair(const Tokens& candidate, const Tokens& reference,
                          const EmbeddingBackend& backend) {
  if (!backend.available()) throw ConfigError("embedding backend unavailable");
  if (candidate.empty() || reference.empty()) return {};
  Matrix c = backend.embed(candidate);
  Matrix r = backend.embed(reference);
  normalize_rows(c);
  normalize_rows(r);
  const Matrix sim = matmul_nt(c, r);  // (|c| x |r|) cosine similarities
  BertScore s;
  for (std::size_t i = 0; i < sim.rows(); ++i) {
    double best = -1.0;
    for (std::size_t j = 0; j < sim.cols(); ++j) best = std::max(best, sim(i, j));
    s.precision += best;
  }
  for (std::size_t j = 0; j < sim.cols(); ++j) {
    double best = -1.0;
    for (std::size_t i = 0; i < sim.rows(); ++i) best = std::max(best, sim(i, j));
    s.recall += best;
  }
  s.precision /= static_cast<double>(sim.rows());
  s.recall /= static_cast<double>(sim.cols());
  const double denom = s.precision + s.recall;
  s.f1 = denom > 0.0 ? std::clamp(2.0 * s.precision * s.recall / denom, 0.0, 1.0) : 0.0;
  return s;
}

std::optional<double> bert_score(const std::vector<std::string>& candidates,
                                 const std::vector<std::vector<std::string>>& references,
                                 const EmbeddingBackend& backend) {
  if (!backend.available()) return std::nullopt;
  if (candidates.size() != references.size()) {
    throw InputError("bert_score: candidate and reference counts differ");
  }
  if (candidates.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    require_references(references[i].size());
    const Tokens c = tokenize(candidates[i]);
    double best = 0.0;
    for (const auto& r : references[i]) {
      best = std::max(best, bert_score_pair(c, tokenize(r), backend).f1);
    }
    sum += best;
  }
  return sum / static_cast<double>(candidates.size());
}

// ---------------------------------------------------------------------------
// Reports

namespace {

void check_unit(double v, const char* name) {
  if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
    throw InputError(std::string("report field ") + name + " must be in [0, 1]");
  }
}

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

void EvalReport::validate() const {
  check_unit(b_u, "b_u");
  check_unit(m_r, "m_r");
  check_unit(r_l, "r_l");
  if (bert_s) check_unit(*bert_s, "bert_s");
  if (n_examples < 1) throw InputError("report field n_examples must be >= 1");
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["b_u"] = b_u;
  j["m_r"] = m_r;
  j["r_l"] = r_l;
  j["bert_s"] = bert_s ? nlohmann::ordered_json(*bert_s) : nlohmann::ordered_json(nullptr);
  j["bert_s_status"] = bert_s ? "ok" : "unavailable";
  j["n_examples"] = n_examples;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.b_u = j.at("b_u").get<double>();
    r.m_r = j.at("m_r").get<double>();
    r.r_l = j.at("r_l").get<double>();
    const auto status = j.value("bert_s_status", std::string("ok"));
    if (status == "ok") {
      r.bert_s = j.at("bert_s").get<double>();
    } else if (status != "unavailable") {
      throw InputError("unknown bert_s_status '" + status + "'");
    }
    r.n_examples = j.at("n_examples").get<long>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed report: ") + e.what());
  }
  r.validate();
  return r;
}

std::string report_table_header() { return "| Model | B-U | M-R | R-L | BERT-S |"; }

std::string EvalReport::table_row(const std::string& model_name) const {
  return "| " + model_name + " | " + fixed3(b_u) + " | " + fixed3(m_r) + " | " + fixed3(r_l) +
         " | " + (bert_s ? fixed3(*bert_s) : std::string("n/a")) + " |";
}

EvalReport evaluate_model(const std::vector<std::pair<std::string, std::string>>& predictions,
                          const std::vector<std::pair<std::string, std::string>>& references,
                          const EvalOptions& options, Warnings* warnings) {
  std::map<std::string, std::string> pred;
  for (const auto& [id, text] : predictions) {
    if (!pred.emplace(id, text).second) throw InputError("duplicate prediction id '" + id + "'");
  }
  std::map<std::string, std::vector<std::string>> refs;
  for (const auto& [id, text] : references) refs[id].push_back(text);

  std::vector<std::string> no_ref, no_pred;
  for (const auto& [id, _] : pred) {
    if (!refs.count(id)) no_ref.push_back(id);
  }
  for (const auto& [id, _] : refs) {
    if (!pred.count(id)) no_pred.push_back(id);
  }
  if (!no_ref.empty() || !no_pred.empty()) {
    std::string msg = "prediction/reference id mismatch;";
    auto list = [&](const char* what, const std::vector<std::string>& ids) {
      if (ids.empty()) return;
      msg += std::string(" ") + what + ":";
      for (std::size_t i = 0; i < ids.size() && i < 20; ++i) msg += " " + ids[i];
      if (ids.size() > 20) msg += " ... (" + std::to_string(ids.size()) + " total)";
    };
    list("missing from references", no_ref);
    list("missing from predictions", no_pred);
    throw InputError(msg);
  }
  if (pred.empty()) throw InputError("nothing to evaluate");

  // Per-example work in map (id) order; results reduced in the same order.
  std::vector<std::string> ids;
  for (const auto& [id, _] : pred) ids.push_back(id);
  struct Scores {
    NgramStats stats;
    double meteor = 0.0, rouge = 0.0;
    bool empty = false;
  };
  std::vector<Scores> scores(ids.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Tokens c = tokenize(pred.at(ids[i]));
      const auto rt = tokenize_all(refs.at(ids[i]));
      auto& s = scores[i];
      s.empty = c.empty();
      s.stats = ngram_stats(c, rt);
      s.rouge = rouge_l_tokens(c, rt);
      for (const auto& r : rt) s.meteor = std::max(s.meteor, meteor_tokens(c, r, options.meteor));
    }
  };
  const std::size_t workers =
      std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, 8);
  const std::size_t per = (ids.size() + workers - 1) / workers;
  std::vector<std::future<void>> jobs;
  for (std::size_t b = 0; b < ids.size(); b += per) {
    jobs.push_back(std::async(std::launch::async, work, b, std::min(ids.size(), b + per)));
  }
  for (auto& j : jobs) j.get();

  EvalReport report;
  report.n_examples = static_cast<long>(ids.size());
  NgramStats pooled;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (scores[i].empty && warnings) warnings->push_back("empty prediction for id '" + ids[i] + "'");
    pooled += scores[i].stats;
    report.m_r += scores[i].meteor;
    report.r_l += scores[i].rouge;
  }
  const double n = static_cast<double>(ids.size());
  report.b_u = bleu_weighted_from_stats(pooled);
  report.m_r /= n;
  report.r_l /= n;
  if (options.embedding && options.embedding->available()) {
    std::vector<std::string> cands;
    std::vector<std::vector<std::string>> rs;
    for (const auto& id : ids) {
      cands.push_back(pred.at(id));
      rs.push_back(refs.at(id));
    }
    report.bert_s = bert_score(cands, rs, *options.embedding);
  } else if (warnings) {
    warnings->push_back("BERT-Score backend unavailable; bert_s omitted");
  }
  return report;
}

std::vector<std::pair<std::string, std::string>> read_id_text_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const auto id = j.at("id").get<std::string>();
      if (j.contains("texts")) {
        for (const auto& t : j.at("texts")) out.emplace_back(id, t.get<std::string>());
      } else {
        out.emplace_back(id, j.at("text").get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tagging probe

nlohmann::ordered_json TaggingProbeResult::to_json() const {
  return {{"auc", auc}, {"ap", ap}, {"num_tags", num_tags}};
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw InputError("roc_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i]) {
      pos += 1;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) throw InputError("roc_auc: labels must contain both classes");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw InputError("average_precision: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  const double pos = static_cast<double>(std::count_if(labels.begin(), labels.end(),
                                                       [](int l) { return l != 0; }));
  if (pos == 0) throw InputError("average_precision: no positive labels");
  double tp = 0, seen = 0, prev_recall = 0, ap = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]]) tp += 1;
      seen += 1;
      ++j;
    }
    const double recall = tp / pos;
    ap += (recall - prev_recall) * (tp / seen);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

Vector probe_features(const LayerStackedEmbedding& emb) {
  Vector out(emb.feature_dim(), 0.0);
  const std::size_t count = emb.num_layers() * emb.num_frames();
  if (count == 0) throw InputError("probe: embedding has no frames");
  for (std::size_t l = 0; l < emb.num_layers(); ++l) {
    for (std::size_t f = 0; f < emb.num_frames(); ++f) {
      const auto row = emb.frame(l, f);
      for (std::size_t d = 0; d < out.size(); ++d) out[d] += row[d];
    }
  }
  for (auto& v : out) v /= static_cast<double>(count);
  return out;
}

namespace {

// Full-batch gradient descent on mean logistic loss + l2/2 |w|^2 (bias not
// regularized). Features are already standardized.
std::pair<Vector, double> fit_logistic(const std::vector<Vector>& x, const std::vector<int>& y,
                                       const ProbeOptions& o) {
  const std::size_t d = x.front().size();
  Vector w(d, 0.0);
  double b = 0.0;
  const double n = static_cast<double>(x.size());
  Vector gw(d);
  for (int it = 0; it < o.iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double err = sigmoid(dot(w, x[i]) + b) - y[i];
      for (std::size_t k = 0; k < d; ++k) gw[k] += err * x[i][k];
      gb += err;
    }
    for (std::size_t k = 0; k < d; ++k) w[k] -= o.learning_rate * (gw[k] / n + o.l2 * w[k]);
    b -= o.learning_rate * gb / n;
  }
  return {w, b};
}

}  // namespace

TaggingProbeResult tagging_probe_features(const std::vector<Vector>& features,
                                          const std::vector<std::vector<int>>& labels,
                                          const ProbeOptions& options, Warnings* warnings) {
  const std::size_t n = features.size();
  if (n < 2) throw InputError("tagging probe needs at least 2 clips");
  if (labels.size() != n) throw InputError("tagging probe: feature and label counts differ");
  if (options.folds < 2) throw ConfigError("tagging probe needs at least 2 folds");
  const std::size_t d = features.front().size();
  const std::size_t num_tags = labels.front().size();
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].size() != d) throw InputError("tagging probe: inconsistent feature dimension");
    if (labels[i].size() != num_tags) throw InputError("tagging probe: inconsistent tag count");
    if (!all_finite(features[i])) throw NumericError("tagging probe: non-finite feature");
  }

  std::vector<std::size_t> tags;
  for (std::size_t t = 0; t < num_tags; ++t) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) pos += labels[i][t] ? 1 : 0;
    if (pos == 0 || pos == n) {
      if (warnings) {
        warnings->push_back("tag " + std::to_string(t) + " is " + (pos == 0 ? "all-negative" : "all-positive") +
                            "; excluded");
      }
      continue;
    }
    tags.push_back(t);
  }
  if (tags.empty()) throw InputError("tagging probe: no tag has both positive and negative clips");

  const std::size_t folds = std::min<std::size_t>(static_cast<std::size_t>(options.folds), n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(options.seed);
  rng.shuffle(perm.begin(), perm.end());
  std::vector<std::size_t> fold_of(n);
  for (std::size_t i = 0; i < n; ++i) fold_of[perm[i]] = i % folds;

  // scores[tag][clip], out-of-fold.
  std::vector<std::vector<double>> scores(tags.size(), std::vector<double>(n, 0.0));
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? test : train).push_back(i);
    Vector mean(d, 0.0), sd(d, 0.0);
    for (auto i : train) {
      for (std::size_t k = 0; k < d; ++k) mean[k] += features[i][k];
    }
    for (auto& v : mean) v /= static_cast<double>(train.size());
    for (auto i : train) {
      for (std::size_t k = 0; k < d; ++k) sd[k] += std::pow(features[i][k] - mean[k], 2);
    }
    for (auto& v : sd) {
      v = std::sqrt(v / static_cast<double>(train.size()));
      if (v < 1e-12) v = 1.0;
    }
    auto standardize = [&](std::size_t i) {
      Vector z(d);
      for (std::size_t k = 0; k < d; ++k) z[k] = (features[i][k] - mean[k]) / sd[k];
      return z;
    };
    std::vector<Vector> xtrain, xtest;
    for (auto i : train) xtrain.push_back(standardize(i));
    for (auto i : test) xtest.push_back(standardize(i));
    for (std::size_t t = 0; t < tags.size(); ++t) {
      std::vector<int> y;
      for (auto i : train) y.push_back(labels[i][tags[t]] ? 1 : 0);
      const auto [w, b] = fit_logistic(xtrain, y, options);
      for (std::size_t k = 0; k < test.size(); ++k) scores[t][test[k]] = dot(w, xtest[k]) + b;
    }
  }

  TaggingProbeResult r;
  r.num_tags = static_cast<int>(tags.size());
  for (std::size_t t = 0; t < tags.size(); ++t) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = labels[i][tags[t]] ? 1 : 0;
    r.auc += roc_auc(scores[t], y);
    r.ap += average_precision(scores[t], y);
  }
  r.auc /= static_cast<double>(tags.size());
  r.ap /= static_cast<double>(tags.size());
  return r;
}

TaggingProbeResult tagging_probe(const AudioEncoder& encoder, const std::vector<LabeledClip>& clips,
                                 const ProbeOptions& options, Warnings* warnings) {
  std::vector<Vector> features(clips.size());
  std::vector<std::vector<int>> labels;
  for (const auto& c : clips) labels.push_back(c.tags);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      features[i] = probe_features(extract_features(clips[i].clip, encoder));
    }
  };
  const std::size_t workers =
      std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, 8);
  const std::size_t per = std::max<std::size_t>(1, (clips.size() + workers - 1) / workers);
  std::vector<std::future<void>> jobs;
  for (std::size_t b = 0; b < clips.size(); b += per) {
    jobs.push_back(std::async(std::launch::async, work, b, std::min(clips.size(), b + per)));
  }
  for (auto& j : jobs) j.get();
  return tagging_probe_features(features, labels, options, warnings);
}

}  // namespace mullama
