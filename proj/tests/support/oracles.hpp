// SPDX-License-Identifier: Apache-2.0
//
// Independent reference computations for the tests. Written as plainly as
// possible (scalar loops, exhaustive search) and sharing no code with the
// library beyond its data types.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mullama/adapter.hpp"
#include "mullama/encoder.hpp"
#include "mullama/tensor.hpp"

namespace oracle {

using Tokens = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Text metrics

inline long count_occurrences(const Tokens& text, const Tokens& gram) {
  long c = 0;
  for (std::size_t i = 0; i + gram.size() <= text.size(); ++i) {
    bool same = true;
    for (std::size_t k = 0; k < gram.size(); ++k) same = same && text[i + k] == gram[k];
    if (same) ++c;
  }
  return c;
}

// Mean of cumulative BLEU-1..4, by direct counting.
inline double bleu_weighted(const Tokens& cand, const std::vector<Tokens>& refs) {
  if (cand.empty()) return 0.0;
  const double c = static_cast<double>(cand.size());
  std::size_t r = refs[0].size();
  for (const auto& ref : refs) {
    const double d = std::fabs(static_cast<double>(ref.size()) - c);
    const double bd = std::fabs(static_cast<double>(r) - c);
    if (d < bd || (d == bd && ref.size() < r)) r = ref.size();
  }
  const double bp = c >= static_cast<double>(r) ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
  double total = 0.0;
  for (int n = 1; n <= 4; ++n) {
    double log_sum = 0.0;
    bool zero = false;
    for (int k = 1; k <= n && !zero; ++k) {
      if (cand.size() < static_cast<std::size_t>(k)) {
        zero = true;
        break;
      }
      long matched = 0, grams = 0;
      std::vector<Tokens> seen;
      for (std::size_t i = 0; i + k <= cand.size(); ++i) {
        ++grams;
        Tokens g(cand.begin() + static_cast<long>(i), cand.begin() + static_cast<long>(i) + k);
        if (std::find(seen.begin(), seen.end(), g) != seen.end()) continue;
        seen.push_back(g);
        long in_ref = 0;
        for (const auto& ref : refs) in_ref = std::max(in_ref, count_occurrences(ref, g));
        matched += std::min(count_occurrences(cand, g), in_ref);
      }
      if (matched == 0) zero = true;
      else log_sum += std::log(static_cast<double>(matched) / static_cast<double>(grams));
    }
    if (!zero) total += 0.25 * bp * std::exp(log_sum / n);
  }
  return total;
}

// Top-down memoized LCS.
inline std::size_t lcs(const Tokens& a, const Tokens& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size() || j == b.size()) return 0;
    const auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const std::size_t v = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
    memo[key] = v;
    return v;
  };
  return go(0, 0);
}

inline double rouge_l(const Tokens& cand, const std::vector<Tokens>& refs) {
  double best = 0.0;
  for (const auto& r : refs) {
    const double l = static_cast<double>(lcs(cand, r));
    if (cand.empty() || r.empty() || l == 0) continue;
    const double p = l / static_cast<double>(cand.size()), rec = l / static_cast<double>(r.size());
    const double b2 = 1.2 * 1.2;
    best = std::max(best, (1 + b2) * p * rec / (rec + b2 * p));
  }
  return best;
}

using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;

inline std::size_t chunks(Pairs p) {
  if (p.empty()) return 0;
  std::sort(p.begin(), p.end());
  std::size_t n = 1;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (!(p[i].first == p[i - 1].first + 1 && p[i].second == p[i - 1].second + 1)) ++n;
  }
  return n;
}

// Exhaustive staged alignment: each stage enumerates every one-to-one matching
// of the still-unmatched words and keeps the one with the most matches, then
// the fewest chunks overall.
inline Pairs meteor_alignment(const Tokens& cand, const Tokens& ref,
                              const std::vector<std::function<bool(const std::string&, const std::string&)>>& stages) {
  Pairs fixed;
  for (const auto& match : stages) {
    std::vector<bool> cu(cand.size()), ru(ref.size());
    for (auto [c, r] : fixed) {
      cu[c] = true;
      ru[r] = true;
    }
    Pairs cur, best;
    bool have = false;
    std::size_t best_chunks = 0;
    std::function<void(std::size_t)> rec = [&](std::size_t i) {
      if (i == cand.size()) {
        Pairs all = fixed;
        all.insert(all.end(), cur.begin(), cur.end());
        const std::size_t ch = chunks(all);
        if (!have || cur.size() > best.size() || (cur.size() == best.size() && ch < best_chunks)) {
          have = true;
          best = cur;
          best_chunks = ch;
        }
        return;
      }
      rec(i + 1);
      if (cu[i]) return;
      for (std::size_t j = 0; j < ref.size(); ++j) {
        if (ru[j] || !match(cand[i], ref[j])) continue;
        ru[j] = true;
        cur.emplace_back(i, j);
        rec(i + 1);
        cur.pop_back();
        ru[j] = false;
      }
    };
    rec(0);
    fixed.insert(fixed.end(), best.begin(), best.end());
  }
  return fixed;
}

inline double meteor_from_alignment(std::size_t cand_len, std::size_t ref_len, const Pairs& a) {
  const double m = static_cast<double>(a.size());
  if (m == 0) return 0.0;
  const double p = m / static_cast<double>(cand_len), r = m / static_cast<double>(ref_len);
  const double fmean = 10 * p * r / (r + 9 * p);
  return fmean * (1 - 0.5 * std::pow(static_cast<double>(chunks(a)) / m, 3));
}

inline double meteor_exact(const Tokens& cand, const std::vector<Tokens>& refs) {
  double best = 0.0;
  for (const auto& r : refs) {
    if (cand.empty() || r.empty()) continue;
    const auto a = meteor_alignment(cand, r, {[](const std::string& x, const std::string& y) { return x == y; }});
    best = std::max(best, meteor_from_alignment(cand.size(), r.size(), a));
  }
  return best;
}

// Greedy-matching BERT-Score F on explicit token vectors.
inline double bert_f(const std::vector<std::vector<double>>& c, const std::vector<std::vector<double>>& r) {
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
  };
  double p = 0, rec = 0;
  for (const auto& x : c) {
    double best = -2;
    for (const auto& y : r) best = std::max(best, cosine(x, y));
    p += best;
  }
  for (const auto& y : r) {
    double best = -2;
    for (const auto& x : c) best = std::max(best, cosine(x, y));
    rec += best;
  }
  p /= static_cast<double>(c.size());
  rec /= static_cast<double>(r.size());
  return std::max(0.0, 2 * p * rec / (p + rec));
}

// ---------------------------------------------------------------------------
// Ranking metrics

// Probability that a random positive outscores a random negative (ties 1/2).
inline double auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

// Sum over distinct thresholds of (recall increase) x precision.
inline double average_precision(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> thresholds(s);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double pos = 0;
  for (int v : y) pos += v ? 1 : 0;
  double ap = 0, prev_recall = 0;
  for (double t : thresholds) {
    double tp = 0, predicted = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) {
        predicted += 1;
        tp += y[i] ? 1 : 0;
      }
    }
    ap += (tp / pos - prev_recall) * (tp / predicted);
    prev_recall = tp / pos;
  }
  return ap;
}

// ---------------------------------------------------------------------------
// Adapter pieces, scalar loops

inline std::vector<double> aggregate(const mullama::LayerStackedEmbedding& e, const mullama::ConvParams& conv) {
  std::vector<double> out(e.feature_dim(), 0.0);
  for (std::size_t f = 0; f < e.num_frames(); ++f) {
    for (std::size_t d = 0; d < e.feature_dim(); ++d) {
      double v = conv.bias[0];
      for (std::size_t l = 0; l < e.num_layers(); ++l) v += conv.weight[l] * e.at(l, f, d);
      out[d] += v / static_cast<double>(e.num_frames());
    }
  }
  return out;
}

inline std::vector<double> affine(const mullama::Matrix& w, const std::vector<double>& b, const std::vector<double>& x) {
  std::vector<double> y(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double acc = b[i];
    for (std::size_t j = 0; j < w.cols(); ++j) acc += w(i, j) * x[j];
    y[i] = acc;
  }
  return y;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const mullama::LayerNormParams& p) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * p.gain[i] + p.offset[i];
  }
  return y;
}

inline std::vector<double> subblock(const std::vector<double>& x, const mullama::SubBlockParams& p) {
  const auto n = layer_norm(x, p.norm);
  const auto a = affine(p.l1_weight, p.l1_bias, n);
  const auto b = affine(p.l3_weight, p.l3_bias, n);
  std::vector<double> h(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) h[i] = a[i] / (1 + std::exp(-a[i])) * b[i];
  const auto d = affine(p.l2_weight, p.l2_bias, h);
  std::vector<double> y(x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += d[i];
  return y;
}

inline std::vector<double> adapter(const mullama::LayerStackedEmbedding& e, const mullama::AdapterParams& p) {
  auto x = affine(p.proj.weight, p.proj.bias, aggregate(e, p.conv));
  for (const auto& b : p.blocks) x = subblock(x, b);
  return x;
}

// q' = q * (1 + tanh(g) * ctx), token by token.
inline mullama::Matrix inject(const mullama::Matrix& q, const std::vector<double>& ctx, double g) {
  mullama::Matrix out(q.rows(), q.cols());
  for (std::size_t t = 0; t < q.rows(); ++t) {
    for (std::size_t d = 0; d < q.cols(); ++d) out(t, d) = q(t, d) * (1.0 + std::tanh(g) * ctx[d]);
  }
  return out;
}

}  // namespace oracle
