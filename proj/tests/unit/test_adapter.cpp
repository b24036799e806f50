// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "mullama/adapter.hpp"
#include "mullama/errors.hpp"
#include "mullama/rng.hpp"
#include "oracles.hpp"

using namespace mullama;

namespace {

const AdapterConfig kToy{3, 4, 8, 3, 8};

LayerStackedEmbedding random_embedding(const AdapterConfig& c, std::size_t frames, std::uint64_t seed) {
  LayerStackedEmbedding e({c.num_layers, c.in_dim, 50.0}, frames);
  Rng rng(seed);
  for (auto& v : e.values()) v = rng.normal();
  return e;
}

// Every parameter drawn at random, so no gradient path is trivially zero.
AdapterParams random_params(const AdapterConfig& c, std::uint64_t seed) {
  auto p = AdapterParams::init(c, seed);
  Rng rng(seed + 1000);
  p.for_each([&](const std::string& name, std::vector<double>& v) {
    for (auto& x : v) x = (name.ends_with("norm.gain") ? 1.0 : 0.0) + 0.5 * rng.normal();
  });
  return p;
}

double objective(const LayerStackedEmbedding& e, const AdapterParams& p, const Vector& up) {
  const auto y = adapter_forward(e, p).values;
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * up[i];
  return s;
}

}  // namespace

TEST_CASE("aggregate_layers") {
  SUBCASE("zero input gives zero") {
    LayerStackedEmbedding e({25, 1024, 75.0}, 3);
    ConvParams conv{Vector(25, 0.3), {0.0}};
    const auto a = aggregate_layers(e, conv);
    CHECK(a.size() == 1024);
    for (double v : a) CHECK(v == 0.0);
  }
  SUBCASE("uniform weights on one frame give the layer mean") {
    LayerStackedEmbedding e({3, 4, 50.0}, 1, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    ConvParams conv{Vector(3, 1.0 / 3.0), {0.0}};
    const auto a = aggregate_layers(e, conv);
    const double expected[] = {5, 6, 7, 8};
    for (int d = 0; d < 4; ++d) CHECK(a[static_cast<std::size_t>(d)] == doctest::Approx(expected[d]).epsilon(1e-15));
  }
  SUBCASE("reference shape") {
    LayerStackedEmbedding e({25, 1024, 75.0}, 100);
    CHECK(aggregate_layers(e, {Vector(25, 0.04), {0.0}}).size() == 1024);
  }
  SUBCASE("matches the scalar oracle") {
    const auto e = random_embedding(kToy, 5, 1);
    const auto p = random_params(kToy, 2);
    const auto a = aggregate_layers(e, p.conv);
    const auto o = oracle::aggregate(e, p.conv);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(o[i]).epsilon(1e-12));
  }
  SUBCASE("layer count mismatch") {
    LayerStackedEmbedding e({3, 4, 50.0}, 1);
    CHECK_THROWS_AS(aggregate_layers(e, {Vector(2, 1.0), {0.0}}), ConfigError);
  }
}

TEST_CASE("project") {
  ProjectionParams zero{Matrix(8, 4), Vector(8, 0.0)};
  for (double v : project(Vector{1, 2, 3, 4}, zero)) CHECK(v == 0.0);

  ProjectionParams id{Matrix(4, 4), Vector(4, 0.0)};
  for (int i = 0; i < 4; ++i) id.weight(static_cast<std::size_t>(i), static_cast<std::size_t>(i)) = 1.0;
  const Vector v{0.5, -1.0, 2.0, 3.5};
  CHECK(project(v, id) == v);

  ProjectionParams known{Matrix(8, 4), Vector(8, 0.0)};
  for (std::size_t r = 0; r < 8; ++r) {
    known.bias[r] = 0.1 * static_cast<double>(r);
    for (std::size_t c = 0; c < 4; ++c) known.weight(r, c) = static_cast<double>(r) - static_cast<double>(c);
  }
  // Row r: sum_c (r - c) v_c + 0.1 r, with sum v = 5 and sum c v_c = 13.5.
  const auto y = project(v, known);
  for (std::size_t r = 0; r < 8; ++r) {
    CHECK(y[r] == doctest::Approx(5.0 * static_cast<double>(r) - 13.5 + 0.1 * static_cast<double>(r)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(project(Vector{1, 2}, known), ConfigError);
}

TEST_CASE("subblock_forward") {
  auto p = random_params(kToy, 3).blocks[0];
  Rng rng(4);
  Vector x(8);
  for (auto& v : x) v = rng.normal();

  SUBCASE("scalar oracle") {
    const auto y = subblock_forward(x, p);
    const auto o = oracle::subblock(x, p);
    for (std::size_t i = 0; i < 8; ++i) CHECK(std::fabs(y[i] - o[i]) <= 1e-10 * std::max(1.0, std::fabs(o[i])));
  }
  SUBCASE("zero L2 is the identity") {
    std::fill(p.l2_weight.data().begin(), p.l2_weight.data().end(), 0.0);
    std::fill(p.l2_bias.begin(), p.l2_bias.end(), 0.0);
    CHECK(subblock_forward(x, p) == x);
  }
  SUBCASE("zero input with zero offsets and L1/L3 biases yields the L2 bias") {
    std::fill(p.norm.offset.begin(), p.norm.offset.end(), 0.0);
    std::fill(p.l1_bias.begin(), p.l1_bias.end(), 0.0);
    std::fill(p.l3_bias.begin(), p.l3_bias.end(), 0.0);
    const auto y = subblock_forward(Vector(8, 0.0), p);
    for (std::size_t i = 0; i < 8; ++i) CHECK(y[i] == doctest::Approx(p.l2_bias[i]).epsilon(1e-14));
  }
  SUBCASE("non-finite input") {
    x[2] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(subblock_forward(x, p), NumericError);
  }
}

TEST_CASE("layer norm statistics") {
  LayerNormParams unit{Vector(6, 1.0), Vector(6, 0.0)};
  const auto y = layer_norm(Vector{1, 2, 3, 4, 5, 9}, unit);
  double mean = 0, var = 0;
  for (double v : y) mean += v / 6;
  for (double v : y) var += (v - mean) * (v - mean) / 6;
  CHECK(std::fabs(mean) < 1e-12);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("adapter_forward") {
  SUBCASE("reference output width") {
    AdapterConfig cfg = AdapterConfig::reference();
    cfg.hidden_dim = 8;
    LayerStackedEmbedding e({25, 1024, 75.0}, 2);
    CHECK(adapter_forward(e, AdapterParams::init(cfg, 1)).size() == 4096);
  }
  SUBCASE("composition oracle") {
    const auto e = random_embedding(kToy, 4, 5);
    const auto p = random_params(kToy, 6);
    const auto y = adapter_forward(e, p).values;
    const auto o = oracle::adapter(e, p);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::fabs(y[i] - o[i]) <= 1e-10 * std::max(1.0, std::fabs(o[i])));
  }
  SUBCASE("init is the projected aggregate") {
    const auto e = random_embedding(kToy, 4, 7);
    const auto p = AdapterParams::init(kToy, 8);
    CHECK(adapter_forward(e, p).values == project(aggregate_layers(e, p.conv), p.proj));
  }
  SUBCASE("deterministic") {
    const auto e = random_embedding(kToy, 4, 9);
    const auto p = random_params(kToy, 10);
    CHECK(adapter_forward(e, p) == adapter_forward(e, p));
  }
}

TEST_CASE("adapter_backward matches central differences for every parameter") {
  const auto e = random_embedding(kToy, 3, 11);
  auto p = random_params(kToy, 12);
  Rng rng(13);
  Vector up(8);
  for (auto& v : up) v = rng.normal();
  const auto g = adapter_backward(e, p, up);

  std::map<std::string, std::vector<double>> analytic;
  g.for_each([&](const std::string& n, const std::vector<double>& v) { analytic[n] = v; });
  const double h = 1e-5;
  std::size_t checked = 0;
  p.for_each([&](const std::string& name, std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + h;
      const double fp = objective(e, p, up);
      values[i] = keep - h;
      const double fm = objective(e, p, up);
      values[i] = keep;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic.at(name)[i];
      CAPTURE(name);
      CAPTURE(i);
      CHECK(std::fabs(a - numeric) <= 1e-4 * std::max(1.0, std::max(std::fabs(a), std::fabs(numeric))));
      ++checked;
    }
  });
  CHECK(checked == p.num_parameters());
}

TEST_CASE("adapter_backward edge cases") {
  const auto e = random_embedding(kToy, 2, 14);
  const auto p = random_params(kToy, 15);
  const auto g = adapter_backward(e, p, Vector(8, 0.0));
  g.for_each([](const std::string&, const std::vector<double>& v) {
    for (double x : v) CHECK(x == 0.0);
  });
  Vector bad(8, 0.0);
  bad[1] = std::nan("");
  CHECK_THROWS_AS(adapter_backward(e, p, bad), NumericError);
}

TEST_CASE("parameter names and strict tensor loading") {
  const auto p = AdapterParams::init(kToy, 1);
  const auto names = p.names();
  CHECK(names.front() == "conv.weight");
  CHECK(std::find(names.begin(), names.end(), "block2.l3.bias") != names.end());
  std::size_t count = 0;
  p.for_each([&](const std::string&, const std::vector<double>& v) { count += v.size(); });
  CHECK(count == p.num_parameters());

  auto tensors = p.to_tensors();
  const auto back = AdapterParams::from_tensors(kToy, tensors);
  CHECK(back.to_tensors() == tensors);

  auto extra = tensors;
  extra["block9.l1.weight"] = tensors.at("block0.l1.weight");
  CHECK_THROWS_AS(AdapterParams::from_tensors(kToy, extra), LoadError);
  auto missing = tensors;
  missing.erase("proj.bias");
  CHECK_THROWS_AS(AdapterParams::from_tensors(kToy, missing), LoadError);
  AdapterConfig other = kToy;
  other.model_dim = 6;
  CHECK_THROWS_AS(AdapterParams::from_tensors(other, tensors), LoadError);
}

TEST_CASE("config validation") {
  AdapterConfig bad = kToy;
  bad.num_subblocks = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(AdapterConfig::reference() == AdapterConfig{25, 1024, 4096, 3, 4096});
}
