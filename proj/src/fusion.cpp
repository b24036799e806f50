// SPDX-License-Identifier: Apache-2.0
#include "mullama/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "mullama/errors.hpp"
#include "mullama/rng.hpp"

namespace mullama {

// ---------------------------------------------------------------------------
// Fusion config / gates

FusionConfig FusionConfig::last_layers(int total_layers, int adapter_layers) {
  FusionConfig c;
  c.total_layers = total_layers;
  c.inject_from = total_layers - (adapter_layers - 1) + 1;
  c.validate();
  return c;
}

void FusionConfig::validate() const {
  if (total_layers < 1) throw ConfigError("fusion: total_layers must be >= 1");
  if (inject_from < 1 || inject_from > total_layers) {
    throw ConfigError("fusion: inject_from must lie in [1, total_layers]");
  }
  if (!std::isfinite(gate_init)) throw ConfigError("fusion: gate_init must be finite");
}

GateParams GateParams::init(const FusionConfig& config) {
  config.validate();
  return {Vector(static_cast<std::size_t>(config.num_injected()), config.gate_init)};
}

namespace {

Vector query_scale(const MusicContextEmbedding& ctx, double gate) {
  const double t = std::tanh(gate);
  Vector s(ctx.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = 1.0 + t * ctx.values[i];
  return s;
}

void scale_rows(Matrix& m, const Vector& s) {
  for (std::size_t t = 0; t < m.rows(); ++t) {
    auto r = m.row(t);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] *= s[i];
  }
}

}  // namespace

Matrix inject_queries(const Matrix& queries, const MusicContextEmbedding& ctx, double gate) {
  if (ctx.size() != queries.cols()) {
    throw ConfigError("inject_queries: context width " + std::to_string(ctx.size()) +
                      " != query width " + std::to_string(queries.cols()));
  }
  if (!std::isfinite(gate)) throw NumericError("inject_queries: non-finite gate");
  ctx.validate(queries.cols());
  Matrix out = queries;
  scale_rows(out, query_scale(ctx, gate));
  return out;
}

// ---------------------------------------------------------------------------
// Decoder weights

void DecoderConfig::validate() const {
  if (vocab_size < 1 || model_dim < 1 || num_heads < 1 || ffn_dim < 1 || num_layers < 1 ||
      max_seq_len < 1) {
    throw ConfigError("decoder config: all sizes must be >= 1");
  }
  if (model_dim % num_heads != 0) throw ConfigError("decoder config: model_dim % num_heads != 0");
  if (head_dim() % 2 != 0) throw ConfigError("decoder config: head_dim must be even for rotary");
  if (!(rope_base > 1.0) || !(norm_eps > 0.0)) throw ConfigError("decoder config: bad rope/eps");
}

DecoderWeights DecoderWeights::zeros(const DecoderConfig& c) {
  c.validate();
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto d = static_cast<std::size_t>(c.model_dim);
  const auto f = static_cast<std::size_t>(c.ffn_dim);
  DecoderWeights w;
  w.embedding = Matrix(V, d);
  for (int l = 0; l < c.num_layers; ++l) {
    DecoderLayerWeights L;
    L.attn_norm = Vector(d, 0.0);
    L.wq = L.wk = L.wv = L.wo = Matrix(d, d);
    L.ffn_norm = Vector(d, 0.0);
    L.w1 = L.w3 = Matrix(f, d);
    L.w2 = Matrix(d, f);
    w.layers.push_back(std::move(L));
  }
  w.final_norm = Vector(d, 0.0);
  w.lm_head = Matrix(V, d);
  return w;
}

std::map<std::string, NamedTensor> DecoderWeights::to_tensors() const {
  std::map<std::string, NamedTensor> out;
  out["embedding"] = to_tensor(embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string pre = "layer" + std::to_string(i) + ".";
    const auto& L = layers[i];
    out[pre + "attn_norm"] = to_tensor(L.attn_norm);
    out[pre + "wq"] = to_tensor(L.wq);
    out[pre + "wk"] = to_tensor(L.wk);
    out[pre + "wv"] = to_tensor(L.wv);
    out[pre + "wo"] = to_tensor(L.wo);
    out[pre + "ffn_norm"] = to_tensor(L.ffn_norm);
    out[pre + "w1"] = to_tensor(L.w1);
    out[pre + "w2"] = to_tensor(L.w2);
    out[pre + "w3"] = to_tensor(L.w3);
  }
  out["final_norm"] = to_tensor(final_norm);
  out["lm_head"] = to_tensor(lm_head);
  return out;
}

DecoderWeights DecoderWeights::from_tensors(const DecoderConfig& config,
                                            const std::map<std::string, NamedTensor>& t) {
  DecoderWeights w = zeros(config);
  std::vector<std::string> names;
  for (const auto& [name, _] : w.to_tensors()) names.push_back(name);
  require_exact_names(t, names, "decoder checkpoint");
  from_tensor(t.at("embedding"), w.embedding, "embedding");
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const std::string pre = "layer" + std::to_string(i) + ".";
    auto& L = w.layers[i];
    from_tensor(t.at(pre + "attn_norm"), L.attn_norm, pre + "attn_norm");
    from_tensor(t.at(pre + "wq"), L.wq, pre + "wq");
    from_tensor(t.at(pre + "wk"), L.wk, pre + "wk");
    from_tensor(t.at(pre + "wv"), L.wv, pre + "wv");
    from_tensor(t.at(pre + "wo"), L.wo, pre + "wo");
    from_tensor(t.at(pre + "ffn_norm"), L.ffn_norm, pre + "ffn_norm");
    from_tensor(t.at(pre + "w1"), L.w1, pre + "w1");
    from_tensor(t.at(pre + "w2"), L.w2, pre + "w2");
    from_tensor(t.at(pre + "w3"), L.w3, pre + "w3");
  }
  from_tensor(t.at("final_norm"), w.final_norm, "final_norm");
  from_tensor(t.at("lm_head"), w.lm_head, "lm_head");
  return w;
}

// ---------------------------------------------------------------------------
// Decoder

ToyDecoder::ToyDecoder(DecoderConfig config, DecoderWeights weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  // Round-trip through the strict loader to validate every shape.
  weights_ = DecoderWeights::from_tensors(config_, weights_.to_tensors());
}

ToyDecoder ToyDecoder::random(const DecoderConfig& c, std::uint64_t seed) {
  DecoderWeights w = DecoderWeights::zeros(c);
  Rng rng(seed);
  auto normal = [&rng](Matrix& m, double std) {
    for (auto& x : m.data()) x = rng.normal() * std;
  };
  const double d = c.model_dim;
  const double f = c.ffn_dim;
  normal(w.embedding, c.embed_std);
  for (auto& L : w.layers) {
    std::fill(L.attn_norm.begin(), L.attn_norm.end(), 1.0);
    std::fill(L.ffn_norm.begin(), L.ffn_norm.end(), 1.0);
    normal(L.wq, 1.0 / std::sqrt(d));
    normal(L.wk, 1.0 / std::sqrt(d));
    normal(L.wv, 1.0 / std::sqrt(d));
    normal(L.wo, 1.0 / std::sqrt(d));
    normal(L.w1, 1.0 / std::sqrt(d));
    normal(L.w3, 1.0 / std::sqrt(d));
    normal(L.w2, 1.0 / std::sqrt(f));
  }
  std::fill(w.final_norm.begin(), w.final_norm.end(), 1.0);
  normal(w.lm_head, c.lm_head_std);
  return ToyDecoder(c, std::move(w));
}

struct LayerCache {
  Matrix x;        // layer input
  Vector r1;       // 1/rms of x rows
  Matrix q;        // query projection before injection
  Vector s;        // injection scale (empty when not injected)
  double gate_tanh = 0.0;
  Matrix qr, kr;   // rotated queries / keys
  Matrix v;
  Matrix o;        // concatenated head outputs
  std::vector<Matrix> probs;  // per head, tokens x tokens (lower triangle)
  Matrix x2;       // after attention residual
  Vector r2;
  Matrix u1, u3;
};

struct DecoderCache {
  std::vector<LayerCache> layers;
  Matrix xn;
  Vector rf;
  Matrix cos, sin;  // tokens x head_dim/2
  Injection injection_copy;
  bool injected = false;
  std::vector<int> tokens;
};

namespace {

Matrix rms_norm(const Matrix& x, const Vector& gain, double eps, Vector& inv_rms) {
  Matrix y(x.rows(), x.cols());
  inv_rms.assign(x.rows(), 0.0);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto xr = x.row(t);
    double ss = 0.0;
    for (double v : xr) ss += v * v;
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(xr.size()) + eps);
    inv_rms[t] = r;
    auto yr = y.row(t);
    for (std::size_t i = 0; i < xr.size(); ++i) yr[i] = gain[i] * xr[i] * r;
  }
  return y;
}

// Accumulates d loss / d x into gx given d loss / d y.
void rms_norm_backward(const Matrix& x, const Vector& gain, const Vector& inv_rms,
                       const Matrix& gy, Matrix& gx, Vector* ggain) {
  const auto d = static_cast<double>(x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto xr = x.row(t);
    const auto gyr = gy.row(t);
    auto gxr = gx.row(t);
    const double r = inv_rms[t];
    if (ggain) {
      for (std::size_t i = 0; i < xr.size(); ++i) (*ggain)[i] += gyr[i] * xr[i] * r;
    }
    double wx = 0.0;
    for (std::size_t i = 0; i < xr.size(); ++i) wx += gain[i] * gyr[i] * xr[i];
    const double k = r * r * r * wx / d;
    for (std::size_t i = 0; i < xr.size(); ++i) gxr[i] += gain[i] * gyr[i] * r - xr[i] * k;
  }
}

void rope_tables(std::size_t tokens, int head_dim, double base, Matrix& cos, Matrix& sin) {
  const std::size_t half = static_cast<std::size_t>(head_dim) / 2;
  cos = Matrix(tokens, half);
  sin = Matrix(tokens, half);
  for (std::size_t p = 0; p < tokens; ++p) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / head_dim);
      const double angle = static_cast<double>(p) * freq;
      cos(p, i) = std::cos(angle);
      sin(p, i) = std::sin(angle);
    }
  }
}

// Rotates pairs (2i, 2i+1) of every head; inverse=true applies the transpose.
void rope_apply(Matrix& m, int num_heads, int head_dim, const Matrix& cos, const Matrix& sin,
                bool inverse) {
  const std::size_t half = static_cast<std::size_t>(head_dim) / 2;
  for (std::size_t t = 0; t < m.rows(); ++t) {
    auto r = m.row(t);
    for (int h = 0; h < num_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h * head_dim);
      for (std::size_t i = 0; i < half; ++i) {
        const double c = cos(t, i);
        const double s = inverse ? -sin(t, i) : sin(t, i);
        const double a = r[off + 2 * i];
        const double b = r[off + 2 * i + 1];
        r[off + 2 * i] = a * c - b * s;
        r[off + 2 * i + 1] = a * s + b * c;
      }
    }
  }
}

}  // namespace

DecoderOutput ToyDecoder::forward(std::span<const int> tokens, const Injection* injection,
                                  bool keep_cache, bool keep_taps) const {
  const auto& c = config_;
  if (tokens.empty()) throw InputError("decoder: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(c.max_seq_len)) {
    throw InputError("decoder: sequence of " + std::to_string(tokens.size()) +
                     " tokens exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  for (int id : tokens) {
    if (id < 0 || id >= c.vocab_size) {
      throw InputError("decoder: token id " + std::to_string(id) + " out of vocabulary [0, " +
                       std::to_string(c.vocab_size) + ")");
    }
  }
  if (injection) {
    injection->fusion.validate();
    if (injection->fusion.total_layers != c.num_layers) {
      throw ConfigError("fusion total_layers " + std::to_string(injection->fusion.total_layers) +
                        " != decoder depth " + std::to_string(c.num_layers));
    }
    if (injection->gates.size() != static_cast<std::size_t>(injection->fusion.num_injected())) {
      throw ConfigError("fusion: expected one gate per injected layer");
    }
    injection->ctx.validate(static_cast<std::size_t>(c.model_dim));
    if (!all_finite(injection->gates)) throw NumericError("fusion: non-finite gate");
  }

  const std::size_t T = tokens.size();
  const auto d = static_cast<std::size_t>(c.model_dim);
  const int H = c.num_heads;
  const int hd = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  DecoderOutput out;
  auto cache = std::make_shared<DecoderCache>();
  rope_tables(T, hd, c.rope_base, cache->cos, cache->sin);

  Matrix x(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const auto e = weights_.embedding.row(static_cast<std::size_t>(tokens[t]));
    std::copy(e.begin(), e.end(), x.row(t).begin());
  }

  for (int l = 0; l < c.num_layers; ++l) {
    const auto& W = weights_.layers[static_cast<std::size_t>(l)];
    LayerCache lc;
    lc.x = x;
    const Matrix a = rms_norm(x, W.attn_norm, c.norm_eps, lc.r1);
    lc.q = matmul_nt(a, W.wq);
    lc.kr = matmul_nt(a, W.wk);
    lc.v = matmul_nt(a, W.wv);

    lc.qr = lc.q;
    if (injection && injection->fusion.is_injected(l + 1)) {
      const double g = injection->gates[static_cast<std::size_t>(l + 1 - injection->fusion.inject_from)];
      lc.gate_tanh = std::tanh(g);
      lc.s = query_scale(injection->ctx, g);
      scale_rows(lc.qr, lc.s);
    }
    rope_apply(lc.qr, H, hd, cache->cos, cache->sin, false);
    rope_apply(lc.kr, H, hd, cache->cos, cache->sin, false);

    Matrix o(T, d);
    std::vector<double> scores(T);
    for (int h = 0; h < H; ++h) {
      const std::size_t off = static_cast<std::size_t>(h * hd);
      Matrix P(T, T);
      for (std::size_t t = 0; t < T; ++t) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= t; ++j) {
          double acc = 0.0;
          for (int i = 0; i < hd; ++i) acc += lc.qr(t, off + i) * lc.kr(j, off + i);
          scores[j] = acc * scale;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const double p = scores[j] / z;
          P(t, j) = p;
          for (int i = 0; i < hd; ++i) o(t, off + i) += p * lc.v(j, off + i);
        }
      }
      lc.probs.push_back(std::move(P));
    }
    const Matrix attn = matmul_nt(o, W.wo);
    for (std::size_t k = 0; k < x.size(); ++k) x.data()[k] += attn.data()[k];
    lc.x2 = x;
    lc.o = std::move(o);

    const Matrix b = rms_norm(x, W.ffn_norm, c.norm_eps, lc.r2);
    lc.u1 = matmul_nt(b, W.w1);
    lc.u3 = matmul_nt(b, W.w3);
    Matrix hh(T, static_cast<std::size_t>(c.ffn_dim));
    for (std::size_t k = 0; k < hh.size(); ++k) {
      hh.data()[k] = silu(lc.u1.data()[k]) * lc.u3.data()[k];
    }
    const Matrix m = matmul_nt(hh, W.w2);
    for (std::size_t k = 0; k < x.size(); ++k) x.data()[k] += m.data()[k];

    if (keep_taps) out.taps.push_back(x);
    if (keep_cache) cache->layers.push_back(std::move(lc));
  }

  cache->xn = x;
  const Matrix z = rms_norm(x, weights_.final_norm, c.norm_eps, cache->rf);
  out.logits = matmul_nt(z, weights_.lm_head);
  if (!all_finite(out.logits.data())) throw NumericError("decoder produced non-finite scores");
  if (keep_cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    if (injection) {
      cache->injection_copy = *injection;
      cache->injected = true;
    }
    out.cache = std::move(cache);
  }
  return out;
}

InjectionGrads ToyDecoder::backward(const DecoderOutput& out, const Matrix& dlogits,
                                    DecoderWeights* wg) const {
  if (!out.cache || out.cache->layers.size() != static_cast<std::size_t>(config_.num_layers)) {
    throw ConfigError("decoder backward needs a forward pass run with keep_cache");
  }
  const auto& cache = *out.cache;
  const auto& c = config_;
  const std::size_t T = cache.xn.rows();
  const auto d = static_cast<std::size_t>(c.model_dim);
  const int H = c.num_heads;
  const int hd = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (dlogits.rows() != T || dlogits.cols() != static_cast<std::size_t>(c.vocab_size)) {
    throw ConfigError("decoder backward: dlogits has the wrong shape");
  }
  if (!all_finite(dlogits.data())) throw NumericError("decoder backward: non-finite gradient");

  InjectionGrads grads;
  const Injection* inj = cache.injected ? &cache.injection_copy : nullptr;
  if (inj) {
    grads.ctx.assign(d, 0.0);
    grads.gates.assign(inj->gates.size(), 0.0);
  }

  if (wg && wg->layers.size() != static_cast<std::size_t>(c.num_layers)) {
    *wg = DecoderWeights::zeros(c);
  }
  Matrix gx(T, d);
  {
    const Matrix gz = matmul(dlogits, weights_.lm_head);
    if (wg) {
      Vector r;
      add_matmul_tn(wg->lm_head, dlogits, rms_norm(cache.xn, weights_.final_norm, c.norm_eps, r));
    }
    rms_norm_backward(cache.xn, weights_.final_norm, cache.rf, gz, gx,
                      wg ? &wg->final_norm : nullptr);
  }

  for (int l = c.num_layers - 1; l >= 0; --l) {
    const auto& W = weights_.layers[static_cast<std::size_t>(l)];
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];

    DecoderLayerWeights* lg = wg ? &wg->layers[static_cast<std::size_t>(l)] : nullptr;

    // MLP branch: x3 = x2 + W2 (silu(W1 b) * W3 b)
    const Matrix ghh = matmul(gx, W.w2);
    if (lg) {
      Matrix hh(T, static_cast<std::size_t>(c.ffn_dim));
      for (std::size_t k = 0; k < hh.size(); ++k) {
        hh.data()[k] = silu(lc.u1.data()[k]) * lc.u3.data()[k];
      }
      add_matmul_tn(lg->w2, gx, hh);
    }
    Matrix gu1(T, static_cast<std::size_t>(c.ffn_dim)), gu3(T, static_cast<std::size_t>(c.ffn_dim));
    for (std::size_t k = 0; k < ghh.size(); ++k) {
      const double u1 = lc.u1.data()[k];
      gu1.data()[k] = ghh.data()[k] * lc.u3.data()[k] * silu_grad(u1);
      gu3.data()[k] = ghh.data()[k] * silu(u1);
    }
    Matrix gb = matmul(gu1, W.w1);
    {
      const Matrix gb3 = matmul(gu3, W.w3);
      for (std::size_t k = 0; k < gb.size(); ++k) gb.data()[k] += gb3.data()[k];
    }
    if (lg) {
      Vector r;
      const Matrix b = rms_norm(lc.x2, W.ffn_norm, c.norm_eps, r);
      add_matmul_tn(lg->w1, gu1, b);
      add_matmul_tn(lg->w3, gu3, b);
    }
    rms_norm_backward(lc.x2, W.ffn_norm, lc.r2, gb, gx, lg ? &lg->ffn_norm : nullptr);

    // Attention branch: x2 = x + Wo o
    const Matrix go = matmul(gx, W.wo);
    if (lg) add_matmul_tn(lg->wo, gx, lc.o);
    Matrix gqr(T, d), gkr(T, d), gv(T, d);
    std::vector<double> gp(T);
    for (int h = 0; h < H; ++h) {
      const std::size_t off = static_cast<std::size_t>(h * hd);
      const Matrix& P = lc.probs[static_cast<std::size_t>(h)];
      for (std::size_t t = 0; t < T; ++t) {
        double dotp = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          double acc = 0.0;
          for (int i = 0; i < hd; ++i) {
            acc += go(t, off + i) * lc.v(j, off + i);
            gv(j, off + i) += P(t, j) * go(t, off + i);
          }
          gp[j] = acc;
          dotp += acc * P(t, j);
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const double gs = P(t, j) * (gp[j] - dotp) * scale;
          for (int i = 0; i < hd; ++i) {
            gqr(t, off + i) += gs * lc.kr(j, off + i);
            gkr(j, off + i) += gs * lc.qr(t, off + i);
          }
        }
      }
    }
    rope_apply(gqr, H, hd, cache.cos, cache.sin, true);
    rope_apply(gkr, H, hd, cache.cos, cache.sin, true);

    if (!lc.s.empty()) {
      const std::size_t gi = static_cast<std::size_t>(l + 1 - inj->fusion.inject_from);
      Vector gs(d, 0.0);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < d; ++i) {
          gs[i] += gqr(t, i) * lc.q(t, i);
          gqr(t, i) *= lc.s[i];
        }
      }
      double gg = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        grads.ctx[i] += lc.gate_tanh * gs[i];
        gg += gs[i] * inj->ctx.values[i];
      }
      grads.gates[gi] += (1.0 - lc.gate_tanh * lc.gate_tanh) * gg;
    }

    if (lg) {
      Vector r;
      const Matrix a = rms_norm(lc.x, W.attn_norm, c.norm_eps, r);
      add_matmul_tn(lg->wq, gqr, a);
      add_matmul_tn(lg->wk, gkr, a);
      add_matmul_tn(lg->wv, gv, a);
    }
    Matrix ga = matmul(gqr, W.wq);
    {
      const Matrix gak = matmul(gkr, W.wk);
      const Matrix gav = matmul(gv, W.wv);
      for (std::size_t k = 0; k < ga.size(); ++k) ga.data()[k] += gak.data()[k] + gav.data()[k];
    }
    rms_norm_backward(lc.x, W.attn_norm, lc.r1, ga, gx, lg ? &lg->attn_norm : nullptr);
  }
  if (wg) {
    for (std::size_t t = 0; t < T; ++t) {
      auto e = wg->embedding.row(static_cast<std::size_t>(cache.tokens[t]));
      const auto g = gx.row(t);
      for (std::size_t i = 0; i < d; ++i) e[i] += g[i];
    }
  }
  return grads;
}

namespace {

std::vector<std::span<double>> weight_views(DecoderWeights& w) {
  std::vector<std::span<double>> v{w.embedding.data()};
  for (auto& L : w.layers) {
    for (Matrix* m : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w1, &L.w3, &L.w2}) v.emplace_back(m->data());
    v.emplace_back(L.attn_norm);
    v.emplace_back(L.ffn_norm);
  }
  v.emplace_back(w.final_norm);
  v.emplace_back(w.lm_head.data());
  return v;
}

// Mean next-token cross-entropy over the corpus; fills grads when given.
double corpus_loss(const ToyDecoder& dec, const std::vector<std::vector<int>>& corpus,
                   DecoderWeights* grads) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) count += seq.size() - 1;
  for (const auto& seq : corpus) {
    const auto out = dec.forward(seq, nullptr, grads != nullptr);
    Matrix dl(out.logits.rows(), out.logits.cols());
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      const auto row = out.logits.row(t);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      const auto target = static_cast<std::size_t>(seq[t + 1]);
      total += std::log(z) + mx - row[target];
      for (std::size_t k = 0; k < row.size(); ++k) {
        dl(t, k) = (std::exp(row[k] - mx) / z - (k == target ? 1.0 : 0.0)) / static_cast<double>(count);
      }
    }
    if (grads) dec.backward(out, dl, grads);
  }
  return total / static_cast<double>(count);
}

}  // namespace

LanguageModelResult train_language_model(const ToyDecoder& base,
                                         const std::vector<std::vector<int>>& corpus,
                                         const LanguageModelTraining& training) {
  if (corpus.empty()) throw InputError("language model training: empty corpus");
  for (const auto& seq : corpus) {
    if (seq.size() < 2) throw InputError("language model training: sequences need >= 2 tokens");
  }
  if (training.steps < 0 || !(training.learning_rate > 0.0)) {
    throw ConfigError("language model training: steps >= 0 and learning_rate > 0 required");
  }
  const DecoderConfig& c = base.config();
  DecoderWeights w = base.weights();
  DecoderWeights m = DecoderWeights::zeros(c), v = DecoderWeights::zeros(c);
  auto wv = weight_views(w), mv = weight_views(m), vv = weight_views(v);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  LanguageModelResult result{base, 0.0, 0.0};
  for (int step = 1; step <= training.steps; ++step) {
    const ToyDecoder current(c, w);
    DecoderWeights g = DecoderWeights::zeros(c);
    const double loss = corpus_loss(current, corpus, &g);
    if (step == 1) result.initial_loss = loss;
    auto gv = weight_views(g);
    const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
    for (std::size_t k = 0; k < wv.size(); ++k) {
      for (std::size_t i = 0; i < wv[k].size(); ++i) {
        const double gi = gv[k][i];
        mv[k][i] = b1 * mv[k][i] + (1 - b1) * gi;
        vv[k][i] = b2 * vv[k][i] + (1 - b2) * gi * gi;
        wv[k][i] -= training.learning_rate * (mv[k][i] / c1) / (std::sqrt(vv[k][i] / c2) + eps);
      }
    }
  }
  result.decoder = ToyDecoder(c, w);
  result.final_loss = corpus_loss(result.decoder, corpus, nullptr);
  if (training.steps == 0) result.initial_loss = result.final_loss;
  return result;
}

Matrix decoder_forward(std::span<const int> tokens, const Injection* injection,
                       const ToyDecoder& decoder) {
  return decoder.forward(tokens, injection).logits;
}

std::vector<int> generate(std::span<const int> prompt, const Injection* injection,
                          const ToyDecoder& decoder, const DecodeParams& params) {
  if (params.max_new_tokens <= 0) throw InputError("generate: max_new_tokens must be >= 1");
  if (prompt.empty()) throw InputError("generate: empty prompt");
  if (params.mode == DecodeParams::Mode::kSampled && !(params.temperature > 0.0)) {
    throw InputError("generate: temperature must be positive for sampling");
  }
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> generated;
  Rng rng(params.seed);
  const auto limit = static_cast<std::size_t>(decoder.config().max_seq_len);
  while (generated.size() < static_cast<std::size_t>(params.max_new_tokens) && seq.size() < limit) {
    const Matrix logits = decoder.forward(seq, injection).logits;
    const auto last = logits.row(logits.rows() - 1);
    int next = 0;
    if (params.mode == DecodeParams::Mode::kGreedy) {
      next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    } else {
      const double mx = *std::max_element(last.begin(), last.end());
      std::vector<double> p(last.size());
      double z = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp((last[i] - mx) / params.temperature);
        z += p[i];
      }
      double u = rng.uniform() * z;
      next = static_cast<int>(p.size()) - 1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        u -= p[i];
        if (u < 0.0) {
          next = static_cast<int>(i);
          break;
        }
      }
    }
    generated.push_back(next);
    seq.push_back(next);
    if (next == params.eos_token) break;
  }
  return generated;
}

}  // namespace mullama
