// SPDX-License-Identifier: Apache-2.0
#include "mullama/adapter.hpp"

#include <cmath>

#include "mullama/errors.hpp"
#include "mullama/rng.hpp"

namespace mullama {

void AdapterConfig::validate() const {
  if (num_layers < 1 || in_dim < 1 || model_dim < 1 || hidden_dim < 1) {
    throw ConfigError("adapter config: all dimensions must be >= 1");
  }
  if (num_subblocks < 1) throw ConfigError("adapter config: num_subblocks must be >= 1");
}

void MusicContextEmbedding::validate(std::size_t model_dim) const {
  if (values.size() != model_dim) {
    throw ConfigError("music context has length " + std::to_string(values.size()) +
                      ", expected " + std::to_string(model_dim));
  }
  if (!all_finite(values)) throw NumericError("music context has non-finite entries");
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping

AdapterParams AdapterParams::zeros(const AdapterConfig& config) {
  config.validate();
  const auto L = static_cast<std::size_t>(config.num_layers);
  const auto in = static_cast<std::size_t>(config.in_dim);
  const auto model = static_cast<std::size_t>(config.model_dim);
  const auto hidden = static_cast<std::size_t>(config.hidden_dim);
  AdapterParams p;
  p.config = config;
  p.conv = {Vector(L, 0.0), Vector(1, 0.0)};
  p.proj = {Matrix(model, in), Vector(model, 0.0)};
  for (int i = 0; i < config.num_subblocks; ++i) {
    SubBlockParams b;
    b.norm = {Vector(model, 0.0), Vector(model, 0.0)};
    b.l1_weight = Matrix(hidden, model);
    b.l1_bias = Vector(hidden, 0.0);
    b.l2_weight = Matrix(model, hidden);
    b.l2_bias = Vector(model, 0.0);
    b.l3_weight = Matrix(hidden, model);
    b.l3_bias = Vector(hidden, 0.0);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

AdapterParams AdapterParams::init(const AdapterConfig& config, std::uint64_t seed) {
  AdapterParams p = zeros(config);
  Rng rng(seed);
  auto fill = [&rng](std::vector<double>& v, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : v) x = rng.uniform(-bound, bound);
  };
  fill(p.conv.weight, p.conv.weight.size());
  fill(p.conv.bias, p.conv.weight.size());
  fill(p.proj.weight.data(), p.proj.weight.cols());
  fill(p.proj.bias, p.proj.weight.cols());
  for (auto& b : p.blocks) {
    std::fill(b.norm.gain.begin(), b.norm.gain.end(), 1.0);
    fill(b.l1_weight.data(), b.l1_weight.cols());
    fill(b.l1_bias, b.l1_weight.cols());
    fill(b.l3_weight.data(), b.l3_weight.cols());
    fill(b.l3_bias, b.l3_weight.cols());
    // L2 stays zero so every sub-block starts as the identity.
  }
  return p;
}

void AdapterParams::for_each(
    const std::function<void(const std::string&, std::vector<double>&)>& fn) {
  fn("conv.weight", conv.weight);
  fn("conv.bias", conv.bias);
  fn("proj.weight", proj.weight.data());
  fn("proj.bias", proj.bias);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string pre = "block" + std::to_string(i) + ".";
    auto& b = blocks[i];
    fn(pre + "norm.gain", b.norm.gain);
    fn(pre + "norm.offset", b.norm.offset);
    fn(pre + "l1.weight", b.l1_weight.data());
    fn(pre + "l1.bias", b.l1_bias);
    fn(pre + "l2.weight", b.l2_weight.data());
    fn(pre + "l2.bias", b.l2_bias);
    fn(pre + "l3.weight", b.l3_weight.data());
    fn(pre + "l3.bias", b.l3_bias);
  }
}

void AdapterParams::for_each(
    const std::function<void(const std::string&, const std::vector<double>&)>& fn) const {
  const_cast<AdapterParams*>(this)->for_each(
      [&fn](const std::string& name, std::vector<double>& v) { fn(name, v); });
}

std::vector<std::string> AdapterParams::names() const {
  std::vector<std::string> out;
  for_each([&out](const std::string& name, const std::vector<double>&) { out.push_back(name); });
  return out;
}

std::size_t AdapterParams::num_parameters() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const std::vector<double>& v) { n += v.size(); });
  return n;
}

std::map<std::string, NamedTensor> AdapterParams::to_tensors() const {
  std::map<std::string, NamedTensor> out;
  out["conv.weight"] = to_tensor(conv.weight);
  out["conv.bias"] = to_tensor(conv.bias);
  out["proj.weight"] = to_tensor(proj.weight);
  out["proj.bias"] = to_tensor(proj.bias);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string pre = "block" + std::to_string(i) + ".";
    const auto& b = blocks[i];
    out[pre + "norm.gain"] = to_tensor(b.norm.gain);
    out[pre + "norm.offset"] = to_tensor(b.norm.offset);
    out[pre + "l1.weight"] = to_tensor(b.l1_weight);
    out[pre + "l1.bias"] = to_tensor(b.l1_bias);
    out[pre + "l2.weight"] = to_tensor(b.l2_weight);
    out[pre + "l2.bias"] = to_tensor(b.l2_bias);
    out[pre + "l3.weight"] = to_tensor(b.l3_weight);
    out[pre + "l3.bias"] = to_tensor(b.l3_bias);
  }
  return out;
}

AdapterParams AdapterParams::from_tensors(const AdapterConfig& config,
                                          const std::map<std::string, NamedTensor>& tensors) {
  AdapterParams p = zeros(config);
  require_exact_names(tensors, p.names(), "adapter checkpoint");
  from_tensor(tensors.at("conv.weight"), p.conv.weight, "conv.weight");
  from_tensor(tensors.at("conv.bias"), p.conv.bias, "conv.bias");
  from_tensor(tensors.at("proj.weight"), p.proj.weight, "proj.weight");
  from_tensor(tensors.at("proj.bias"), p.proj.bias, "proj.bias");
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string pre = "block" + std::to_string(i) + ".";
    auto& b = p.blocks[i];
    from_tensor(tensors.at(pre + "norm.gain"), b.norm.gain, pre + "norm.gain");
    from_tensor(tensors.at(pre + "norm.offset"), b.norm.offset, pre + "norm.offset");
    from_tensor(tensors.at(pre + "l1.weight"), b.l1_weight, pre + "l1.weight");
    from_tensor(tensors.at(pre + "l1.bias"), b.l1_bias, pre + "l1.bias");
    from_tensor(tensors.at(pre + "l2.weight"), b.l2_weight, pre + "l2.weight");
    from_tensor(tensors.at(pre + "l2.bias"), b.l2_bias, pre + "l2.bias");
    from_tensor(tensors.at(pre + "l3.weight"), b.l3_weight, pre + "l3.weight");
    from_tensor(tensors.at(pre + "l3.bias"), b.l3_bias, pre + "l3.bias");
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward

Vector aggregate_layers(const LayerStackedEmbedding& emb, const ConvParams& conv) {
  emb.validate();
  if (conv.weight.size() != emb.num_layers() || conv.bias.size() != 1) {
    throw ConfigError("conv expects " + std::to_string(conv.weight.size()) +
                      " input layers, embedding has " + std::to_string(emb.num_layers()));
  }
  const std::size_t D = emb.feature_dim();
  const std::size_t T = emb.num_frames();
  Vector out(D, 0.0);
  Vector frame_out(D);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(frame_out.begin(), frame_out.end(), conv.bias[0]);
    for (std::size_t l = 0; l < emb.num_layers(); ++l) {
      const auto x = emb.frame(l, t);
      const double w = conv.weight[l];
      for (std::size_t d = 0; d < D; ++d) frame_out[d] += w * x[d];
    }
    for (std::size_t d = 0; d < D; ++d) out[d] += frame_out[d];
  }
  const double inv_t = 1.0 / static_cast<double>(T);
  for (auto& v : out) v *= inv_t;
  return out;
}

Vector project(std::span<const double> v, const ProjectionParams& proj) {
  if (v.size() != proj.weight.cols()) {
    throw ConfigError("projection expects length " + std::to_string(proj.weight.cols()) +
                      ", got " + std::to_string(v.size()));
  }
  return affine(proj.weight, v, proj.bias);
}

namespace {

struct NormStats {
  Vector xhat;
  double inv_std = 0.0;
};

NormStats normalize(std::span<const double> x) {
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  NormStats s;
  s.inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
  s.xhat.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) s.xhat[i] = (x[i] - mean) * s.inv_std;
  return s;
}

struct SubBlockCache {
  NormStats stats;
  Vector n;  // normalized input
  Vector u;  // L1 output
  Vector v;  // L3 output
  Vector h;  // silu(u) * v
};

Vector subblock_forward_cached(std::span<const double> x, const SubBlockParams& p,
                               SubBlockCache* cache) {
  if (x.size() != p.l1_weight.cols() || x.size() != p.l2_weight.rows()) {
    throw ConfigError("sub-block input has length " + std::to_string(x.size()) +
                      ", expected " + std::to_string(p.l1_weight.cols()));
  }
  if (!all_finite(x)) throw NumericError("sub-block input has non-finite entries");
  SubBlockCache local;
  SubBlockCache& c = cache ? *cache : local;
  c.stats = normalize(x);
  c.n.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    c.n[i] = p.norm.gain[i] * c.stats.xhat[i] + p.norm.offset[i];
  }
  c.u = affine(p.l1_weight, c.n, p.l1_bias);
  c.v = affine(p.l3_weight, c.n, p.l3_bias);
  c.h.resize(c.u.size());
  for (std::size_t j = 0; j < c.u.size(); ++j) c.h[j] = silu(c.u[j]) * c.v[j];
  Vector y = affine(p.l2_weight, c.h, p.l2_bias);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + y[i];
  return y;
}

}  // namespace

Vector layer_norm(std::span<const double> x, const LayerNormParams& p) {
  if (x.size() != p.gain.size() || x.size() != p.offset.size()) {
    throw ConfigError("layer norm: length mismatch");
  }
  const auto s = normalize(x);
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = p.gain[i] * s.xhat[i] + p.offset[i];
  return y;
}

Vector subblock_forward(std::span<const double> x_prev, const SubBlockParams& p) {
  return subblock_forward_cached(x_prev, p, nullptr);
}

MusicContextEmbedding adapter_forward(const LayerStackedEmbedding& emb,
                                      const AdapterParams& params) {
  if (emb.num_layers() != static_cast<std::size_t>(params.config.num_layers) ||
      emb.feature_dim() != static_cast<std::size_t>(params.config.in_dim)) {
    throw ConfigError("embedding shape does not match adapter config");
  }
  Vector x = project(aggregate_layers(emb, params.conv), params.proj);
  for (const auto& block : params.blocks) x = subblock_forward(x, block);
  return {std::move(x)};
}

// ---------------------------------------------------------------------------
// Backward

AdapterParams adapter_backward(const LayerStackedEmbedding& emb, const AdapterParams& params,
                               std::span<const double> upstream) {
  const auto model = static_cast<std::size_t>(params.config.model_dim);
  if (upstream.size() != model) throw ConfigError("upstream gradient has the wrong length");
  if (!all_finite(upstream)) throw NumericError("upstream gradient has non-finite entries");
  if (emb.num_layers() != static_cast<std::size_t>(params.config.num_layers) ||
      emb.feature_dim() != static_cast<std::size_t>(params.config.in_dim)) {
    throw ConfigError("embedding shape does not match adapter config");
  }

  // Forward with caches.
  const Vector pooled_mean = [&] {
    // Frame-mean of each layer: the conv is linear, so its weight gradient only
    // needs these averages.
    Vector m(emb.num_layers() * emb.feature_dim(), 0.0);
    for (std::size_t l = 0; l < emb.num_layers(); ++l) {
      for (std::size_t t = 0; t < emb.num_frames(); ++t) {
        const auto x = emb.frame(l, t);
        for (std::size_t d = 0; d < x.size(); ++d) m[l * x.size() + d] += x[d];
      }
    }
    const double inv_t = 1.0 / static_cast<double>(emb.num_frames());
    for (auto& v : m) v *= inv_t;
    return m;
  }();
  const Vector a = aggregate_layers(emb, params.conv);
  std::vector<Vector> xs{project(a, params.proj)};
  std::vector<SubBlockCache> caches(params.blocks.size());
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    xs.push_back(subblock_forward_cached(xs.back(), params.blocks[i], &caches[i]));
  }

  AdapterParams g = AdapterParams::zeros(params.config);
  Vector gx(upstream.begin(), upstream.end());
  for (std::size_t i = params.blocks.size(); i-- > 0;) {
    const auto& p = params.blocks[i];
    const auto& c = caches[i];
    auto& gb = g.blocks[i];

    // y = x + L2 h
    add_outer(gb.l2_weight, gx, c.h);
    for (std::size_t k = 0; k < model; ++k) gb.l2_bias[k] += gx[k];
    const Vector gh = matvec_t(p.l2_weight, gx);

    Vector gu(gh.size()), gv(gh.size());
    for (std::size_t j = 0; j < gh.size(); ++j) {
      gu[j] = gh[j] * c.v[j] * silu_grad(c.u[j]);
      gv[j] = gh[j] * silu(c.u[j]);
    }
    add_outer(gb.l1_weight, gu, c.n);
    add_outer(gb.l3_weight, gv, c.n);
    for (std::size_t j = 0; j < gu.size(); ++j) {
      gb.l1_bias[j] += gu[j];
      gb.l3_bias[j] += gv[j];
    }
    Vector gn = matvec_t(p.l1_weight, gu);
    const Vector gn3 = matvec_t(p.l3_weight, gv);
    for (std::size_t k = 0; k < model; ++k) gn[k] += gn3[k];

    // Layer norm.
    Vector gxhat(model);
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t k = 0; k < model; ++k) {
      gb.norm.gain[k] += gn[k] * c.stats.xhat[k];
      gb.norm.offset[k] += gn[k];
      gxhat[k] = gn[k] * p.norm.gain[k];
      mean_g += gxhat[k];
      mean_gx += gxhat[k] * c.stats.xhat[k];
    }
    mean_g /= static_cast<double>(model);
    mean_gx /= static_cast<double>(model);
    for (std::size_t k = 0; k < model; ++k) {
      gx[k] += c.stats.inv_std * (gxhat[k] - mean_g - c.stats.xhat[k] * mean_gx);
    }
  }

  // X_0 = P a + b
  add_outer(g.proj.weight, gx, a);
  for (std::size_t k = 0; k < model; ++k) g.proj.bias[k] += gx[k];
  const Vector ga = matvec_t(params.proj.weight, gx);

  const std::size_t D = emb.feature_dim();
  for (std::size_t l = 0; l < emb.num_layers(); ++l) {
    double acc = 0.0;
    for (std::size_t d = 0; d < D; ++d) acc += ga[d] * pooled_mean[l * D + d];
    g.conv.weight[l] = acc;
  }
  double gb = 0.0;
  for (double v : ga) gb += v;
  g.conv.bias[0] = gb;
  return g;
}

}  // namespace mullama
