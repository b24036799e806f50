// SPDX-License-Identifier: Apache-2.0
#include "mullama/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "mullama/archive.hpp"
#include "mullama/rng.hpp"

namespace mullama {

using json = nlohmann::json;

std::string to_string(Stage s) { return s == Stage::kPretrain ? "pretrain" : "finetune"; }

Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "finetune") return Stage::kFinetune;
  throw ConfigError("unknown stage '" + s + "' (expected pretrain or finetune)");
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kEncoder: return "encoder";
    case ParamGroup::kDecoderBase: return "decoder_base";
    case ParamGroup::kAdapter: return "adapter";
    case ParamGroup::kGates: return "gates";
  }
  return "?";
}

void FreezeSet::validate() const {
  for (auto g : frozen) {
    if (trainable.contains(g)) throw ConfigError("freeze set: " + to_string(g) + " is both frozen and trainable");
  }
  for (auto g : {ParamGroup::kEncoder, ParamGroup::kDecoderBase, ParamGroup::kAdapter,
                 ParamGroup::kGates}) {
    if (!frozen.contains(g) && !trainable.contains(g)) {
      throw ConfigError("freeze set does not cover " + to_string(g));
    }
  }
  // The encoder and decoder base are held as const; they can only be frozen.
  if (trainable.contains(ParamGroup::kEncoder) || trainable.contains(ParamGroup::kDecoderBase)) {
    throw ConfigError("freeze set: encoder and decoder_base must stay frozen");
  }
}

TrainConfig TrainConfig::defaults(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  c.epochs = stage == Stage::kPretrain ? 150 : 20;
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be a finite non-negative number");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (accumulation_steps < 1) throw ConfigError("accumulation_steps must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) {
    throw ConfigError("invalid AdamW hyperparameters");
  }
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (min_lr_ratio < 0 || min_lr_ratio > 1) throw ConfigError("min_lr_ratio must be in [0, 1]");
}

TrainingError::TrainingError(const std::string& what, long s, std::vector<std::string> ids)
    : NumericError([&] {
        std::ostringstream os;
        os << what << " at step " << s << " (batch:";
        for (const auto& id : ids) os << ' ' << id;
        os << ')';
        return os.str();
      }()),
      step(s),
      batch_ids(std::move(ids)) {}

// ---------------------------------------------------------------------------
// Model assembly

void MusicQaModel::validate() const {
  if (!encoder || !decoder) throw ConfigError("model: encoder and decoder are required");
  const auto& es = encoder->spec();
  const auto& ac = adapter.config;
  if (ac.num_layers != es.num_layers || ac.in_dim != es.feature_dim) {
    throw ConfigError("model: adapter input does not match encoder spec");
  }
  if (ac.model_dim != decoder->config().model_dim) {
    throw ConfigError("model: adapter model_dim must equal decoder width");
  }
  if (fusion.total_layers != decoder->config().num_layers) {
    throw ConfigError("model: fusion depth does not match decoder");
  }
  if (gates.g.size() != static_cast<std::size_t>(fusion.num_injected())) {
    throw ConfigError("model: expected one gate per injected layer");
  }
  if (vocab.size() != decoder->config().vocab_size) {
    throw ConfigError("model: vocabulary size does not match decoder");
  }
}

MusicQaModel build_toy_model(const ToyModelConfig& config, const Vocabulary& vocab) {
  MusicQaModel m;
  m.encoder = std::make_shared<const ToyEncoder>(config.encoder, config.encoder_seed,
                                                 config.sample_rate);
  DecoderConfig dc = config.decoder;
  dc.vocab_size = vocab.size();
  ToyDecoder decoder = ToyDecoder::random(dc, config.decoder_seed);
  if (!config.base_corpus.empty()) {
    std::vector<std::vector<int>> corpus;
    for (const auto& text : config.base_corpus) {
      std::vector<int> seq{Vocabulary::kBos};
      const auto body = vocab.encode_answer(text);
      seq.insert(seq.end(), body.begin(), body.end());
      corpus.push_back(std::move(seq));
    }
    decoder = train_language_model(decoder, corpus, config.base_training).decoder;
  }
  m.decoder = std::make_shared<const ToyDecoder>(std::move(decoder));
  AdapterConfig ac;
  ac.num_layers = config.encoder.num_layers;
  ac.in_dim = config.encoder.feature_dim;
  ac.model_dim = dc.model_dim;
  ac.num_subblocks = config.num_subblocks;
  ac.hidden_dim = config.hidden_dim > 0 ? config.hidden_dim : dc.model_dim;
  m.adapter = AdapterParams::init(ac, config.adapter_seed);
  const int adapter_layers = config.adapter_layers > 0 ? config.adapter_layers : dc.num_layers;
  m.fusion = FusionConfig::last_layers(dc.num_layers, adapter_layers);
  m.gates = GateParams::init(m.fusion);
  m.vocab = vocab;
  m.validate();
  return m;
}

TrainState TrainState::fresh(MusicQaModel model, Stage stage) {
  TrainState s;
  s.model = std::move(model);
  s.begin_stage(stage);
  return s;
}

void TrainState::begin_stage(Stage next) {
  stage = next;
  step = 0;
  total_steps = 0;
  moments.adapter_m = AdapterParams::zeros(model.adapter.config);
  moments.adapter_v = AdapterParams::zeros(model.adapter.config);
  moments.gates_m.assign(model.gates.g.size(), 0.0);
  moments.gates_v.assign(model.gates.g.size(), 0.0);
}

// ---------------------------------------------------------------------------
// Loss and gradients

PreparedExample prepare_example(const MusicQaModel& model, const TrainExample& ex) {
  if (trim(ex.answer).empty()) throw InputError("example '" + ex.id + "' has an empty answer");
  PreparedExample p;
  p.id = ex.id;
  if (const auto* clip = std::get_if<AudioClip>(&ex.music)) {
    p.embedding = extract_features(*clip, *model.encoder);
  } else if (const auto* emb = std::get_if<LayerStackedEmbedding>(&ex.music)) {
    emb->validate();
    if (!(emb->spec() == model.encoder->spec())) {
      throw ConfigError("example '" + ex.id + "': cached embedding does not match encoder spec");
    }
    p.embedding = *emb;
  }
  p.tokens = model.vocab.encode_prompt(ex.question);
  p.prompt_len = p.tokens.size();
  for (int id : model.vocab.encode_answer(ex.answer)) p.tokens.push_back(id);
  if (p.tokens.size() > static_cast<std::size_t>(model.decoder->config().max_seq_len)) {
    throw InputError("example '" + ex.id + "' is longer than the decoder context");
  }
  return p;
}

MusicContextEmbedding music_context(const MusicQaModel& model, const LayerStackedEmbedding* emb) {
  if (!emb) return {Vector(static_cast<std::size_t>(model.adapter.config.model_dim), 0.0)};
  return adapter_forward(*emb, model.adapter);
}

double example_loss(const MusicQaModel& model, const PreparedExample& ex, Gradients* grads) {
  const LayerStackedEmbedding* emb = ex.embedding ? &*ex.embedding : nullptr;
  const Injection inj{model.fusion, music_context(model, emb), model.gates.g};
  const auto out = model.decoder->forward(ex.tokens, &inj, grads != nullptr);

  const std::size_t T = ex.tokens.size();
  const std::size_t first = ex.prompt_len - 1;
  const std::size_t n_targets = T - ex.prompt_len;
  const double inv_n = 1.0 / static_cast<double>(n_targets);
  Matrix dlogits(out.logits.rows(), out.logits.cols());
  double loss = 0.0;
  for (std::size_t t = first; t + 1 < T; ++t) {
    const auto row = out.logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double logz = mx + std::log(z);
    const auto target = static_cast<std::size_t>(ex.tokens[t + 1]);
    loss += logz - row[target];
    if (grads) {
      auto g = dlogits.row(t);
      for (std::size_t k = 0; k < row.size(); ++k) g[k] = std::exp(row[k] - logz) * inv_n;
      g[target] -= inv_n;
    }
  }
  loss *= inv_n;

  if (grads) {
    const auto ig = model.decoder->backward(out, dlogits);
    grads->gates = ig.gates;
    grads->adapter = emb ? adapter_backward(*emb, model.adapter, ig.ctx)
                         : AdapterParams::zeros(model.adapter.config);
  }
  return loss;
}

namespace {

Gradients zero_grads(const MusicQaModel& model) {
  return {AdapterParams::zeros(model.adapter.config), Vector(model.gates.g.size(), 0.0)};
}

void add_scaled(Gradients& acc, Gradients& g, double scale) {
  std::vector<std::vector<double>*> dst, src;
  acc.adapter.for_each([&dst](const std::string&, std::vector<double>& v) { dst.push_back(&v); });
  g.adapter.for_each([&src](const std::string&, std::vector<double>& v) { src.push_back(&v); });
  for (std::size_t i = 0; i < dst.size(); ++i) {
    for (std::size_t k = 0; k < dst[i]->size(); ++k) (*dst[i])[k] += scale * (*src[i])[k];
  }
  for (std::size_t k = 0; k < acc.gates.size(); ++k) acc.gates[k] += scale * g.gates[k];
}

std::vector<std::string> ids_of(const std::vector<PreparedExample>& batch) {
  std::vector<std::string> ids;
  for (const auto& ex : batch) ids.push_back(ex.id);
  return ids;
}

// Mean loss and mean gradient over a batch.
double batch_gradients(const MusicQaModel& model, const std::vector<PreparedExample>& batch,
                       Gradients& out) {
  out = zero_grads(model);
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    Gradients g;
    loss += example_loss(model, ex, &g);
    add_scaled(out, g, inv);
  }
  return loss * inv;
}

// Forward or backward numeric failures carry the step and batch ids too.
double checked_gradients(const TrainState& state, const std::vector<PreparedExample>& batch,
                         Gradients& out) {
  try {
    return batch_gradients(state.model, batch, out);
  } catch (const TrainingError&) {
    throw;
  } catch (const NumericError& e) {
    throw TrainingError(e.what(), state.step + 1, ids_of(batch));
  }
}

bool decays(const std::string& name) {
  return name.ends_with(".weight") && name != "conv.weight";
}

void adamw_update(TrainState& state, Gradients& g, const TrainConfig& c, double lr) {
  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  auto update = [&](std::vector<double>& p, const std::vector<double>& grad, std::vector<double>& m,
                    std::vector<double>& v, double wd) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + c.adam_eps) + wd * p[i]);
    }
  };
  std::vector<std::pair<std::string, std::vector<double>*>> ps;
  std::vector<std::vector<double>*> gs, ms, vs;
  state.model.adapter.for_each(
      [&ps](const std::string& n, std::vector<double>& v) { ps.emplace_back(n, &v); });
  g.adapter.for_each([&gs](const std::string&, std::vector<double>& v) { gs.push_back(&v); });
  state.moments.adapter_m.for_each(
      [&ms](const std::string&, std::vector<double>& v) { ms.push_back(&v); });
  state.moments.adapter_v.for_each(
      [&vs](const std::string&, std::vector<double>& v) { vs.push_back(&v); });
  for (std::size_t i = 0; i < ps.size(); ++i) {
    update(*ps[i].second, *gs[i], *ms[i], *vs[i], decays(ps[i].first) ? c.weight_decay : 0.0);
  }
  update(state.model.gates.g, g.gates, state.moments.gates_m, state.moments.gates_v, 0.0);
}


StepResult apply_update(TrainState& state, Gradients& g, double loss, const TrainConfig& config,
                        const std::vector<std::string>& ids) {
  if (!std::isfinite(loss)) throw TrainingError("non-finite loss", state.step + 1, ids);
  bool finite = all_finite(g.gates);
  g.adapter.for_each([&finite](const std::string&, const std::vector<double>& v) {
    finite = finite && all_finite(v);
  });
  if (!finite) throw TrainingError("non-finite gradient", state.step + 1, ids);
  const double lr = learning_rate_at(config, state.step, state.total_steps);
  adamw_update(state, g, config, lr);
  ++state.step;
  return {loss, lr};
}

}  // namespace

double learning_rate_at(const TrainConfig& c, long step, long total_steps) {
  if (c.warmup_steps > 0 && step < c.warmup_steps) {
    return c.learning_rate * static_cast<double>(step + 1) / c.warmup_steps;
  }
  if (c.schedule == LrSchedule::kConstant || total_steps <= 0) return c.learning_rate;
  const double span = static_cast<double>(std::max<long>(1, total_steps - c.warmup_steps));
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
  const double min_lr = c.learning_rate * c.min_lr_ratio;
  return min_lr + (c.learning_rate - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

StepResult train_step(const std::vector<PreparedExample>& batch, TrainState& state,
                      const TrainConfig& config) {
  if (batch.empty()) throw InputError("train_step: empty batch");
  Gradients g;
  const double loss = checked_gradients(state, batch, g);
  return apply_update(state, g, loss, config, ids_of(batch));
}

StepResult accumulate(const std::vector<std::vector<PreparedExample>>& micro_batches,
                      TrainState& state, const TrainConfig& config) {
  if (micro_batches.size() != static_cast<std::size_t>(config.accumulation_steps)) {
    throw InputError("accumulate: got " + std::to_string(micro_batches.size()) +
                     " micro-batches, accumulation_steps is " +
                     std::to_string(config.accumulation_steps));
  }
  Gradients total = zero_grads(state.model);
  double loss = 0.0;
  std::vector<std::string> ids;
  const double inv = 1.0 / static_cast<double>(micro_batches.size());
  for (const auto& mb : micro_batches) {
    if (mb.empty()) throw InputError("accumulate: empty micro-batch");
    Gradients g;
    loss += checked_gradients(state, mb, g) * inv;
    add_scaled(total, g, inv);
    for (auto& id : ids_of(mb)) ids.push_back(std::move(id));
  }
  return apply_update(state, total, loss, config, ids);
}

// ---------------------------------------------------------------------------
// Stage loop

std::string loss_csv_header() { return "step,epoch,stage,loss,lr"; }

std::string to_csv_row(const LossRecord& r) {
  std::ostringstream os;
  os << r.step << ',' << r.epoch << ',' << to_string(r.stage) << ',' << std::setprecision(17)
     << r.loss << ',' << r.lr;
  return os.str();
}

long steps_per_epoch(std::size_t dataset_size, const TrainConfig& config) {
  const auto group = static_cast<std::size_t>(config.batch_size) *
                     static_cast<std::size_t>(config.accumulation_steps);
  return static_cast<long>((dataset_size + group - 1) / group);
}

StageResult run_stage(const TrainConfig& config, const std::vector<TrainExample>& dataset,
                      TrainState& state, const std::function<void(const LossRecord&)>& on_step) {
  config.validate();
  if (dataset.empty()) throw InputError("run_stage: dataset is empty");
  if (state.stage != config.stage) {
    throw ConfigError("run_stage: state is in stage " + to_string(state.stage) +
                      ", config asks for " + to_string(config.stage));
  }
  std::vector<PreparedExample> prepared;
  prepared.reserve(dataset.size());
  for (const auto& ex : dataset) prepared.push_back(prepare_example(state.model, ex));

  const long per_epoch = steps_per_epoch(prepared.size(), config);
  const long total = per_epoch * config.epochs;
  if (state.total_steps != 0 && state.total_steps != total && state.step > 0) {
    throw ConfigError("run_stage: resumed state was trained with a different schedule");
  }
  state.total_steps = total;

  const auto B = static_cast<std::size_t>(config.batch_size);
  const auto group = B * static_cast<std::size_t>(config.accumulation_steps);
  StageResult result;
  auto checkpoint = [&] {
    if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, state);
  };

  while (state.step < total) {
    if (config.max_steps >= 0 && state.step >= config.max_steps) return result;
    const long epoch = state.step / per_epoch;
    const long in_epoch = state.step % per_epoch;

    std::vector<std::size_t> order(prepared.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());

    const std::size_t begin = static_cast<std::size_t>(in_epoch) * group;
    const std::size_t end = std::min(prepared.size(), begin + group);
    std::vector<std::vector<PreparedExample>> micro;
    for (std::size_t i = begin; i < end; i += B) {
      std::vector<PreparedExample> mb;
      for (std::size_t k = i; k < std::min(end, i + B); ++k) mb.push_back(prepared[order[k]]);
      micro.push_back(std::move(mb));
    }
    TrainConfig step_config = config;
    step_config.accumulation_steps = static_cast<int>(micro.size());
    const StepResult r = accumulate(micro, state, step_config);

    LossRecord rec{state.step, static_cast<int>(epoch), config.stage, r.loss, r.lr};
    result.log.push_back(rec);
    if (on_step) on_step(rec);

    const bool epoch_end = state.step % per_epoch == 0;
    const bool periodic = config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0;
    if (epoch_end || periodic) checkpoint();
  }
  result.completed = true;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json encoder_meta(const ToyEncoder& e) {
  return {{"kind", e.name()},
          {"num_layers", e.spec().num_layers},
          {"feature_dim", e.spec().feature_dim},
          {"frame_rate", e.spec().frame_rate},
          {"sample_rate", e.sample_rate()}};
}

json adapter_meta(const AdapterConfig& c) {
  return {{"num_layers", c.num_layers}, {"in_dim", c.in_dim},     {"model_dim", c.model_dim},
          {"num_subblocks", c.num_subblocks}, {"hidden_dim", c.hidden_dim}};
}

json decoder_meta(const DecoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim},     {"num_heads", c.num_heads},
          {"ffn_dim", c.ffn_dim},       {"num_layers", c.num_layers},   {"max_seq_len", c.max_seq_len},
          {"rope_base", c.rope_base},   {"norm_eps", c.norm_eps},       {"embed_std", c.embed_std},
          {"lm_head_std", c.lm_head_std}};
}

std::map<std::string, NamedTensor> encoder_tensors(const ToyEncoder& e) {
  std::map<std::string, NamedTensor> out;
  for (std::size_t l = 0; l < e.layer_weights().size(); ++l) {
    out["layer" + std::to_string(l) + ".weight"] = to_tensor(e.layer_weights()[l]);
  }
  return out;
}

std::map<std::string, NamedTensor> gate_tensors(const Vector& g) { return {{"gate", to_tensor(g)}}; }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  const auto& m = state.model;
  m.validate();
  json meta = {{"format", "mullama-checkpoint"},
               {"format_version", kCheckpointFormatVersion},
               {"encoder", encoder_meta(*m.encoder)},
               {"adapter", adapter_meta(m.adapter.config)},
               {"decoder", decoder_meta(m.decoder->config())},
               {"fusion",
                {{"total_layers", m.fusion.total_layers},
                 {"inject_from", m.fusion.inject_from},
                 {"gate_init", m.fusion.gate_init}}},
               {"vocab", m.vocab.tokens()},
               {"stage", to_string(state.stage)},
               {"step", state.step},
               {"total_steps", state.total_steps}};
  Archive a;
  a.metadata = meta.dump();
  a.put_section("encoder/", encoder_tensors(*m.encoder));
  a.put_section("adapter/", m.adapter.to_tensors());
  a.put_section("decoder/", m.decoder->weights().to_tensors());
  a.put_section("gates/", gate_tensors(m.gates.g));
  a.put_section("optim/adapter_m/", state.moments.adapter_m.to_tensors());
  a.put_section("optim/adapter_v/", state.moments.adapter_v.to_tensors());
  a.put_section("optim/gates_m/", gate_tensors(state.moments.gates_m));
  a.put_section("optim/gates_v/", gate_tensors(state.moments.gates_v));
  save_archive(path, a);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  json meta;
  try {
    meta = json::parse(a.metadata);
    if (meta.at("format") != "mullama-checkpoint") throw LoadError("not a mullama checkpoint");
    if (meta.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw LoadError("checkpoint format version " +
                      std::to_string(meta.at("format_version").get<int>()) + " unsupported");
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint metadata unreadable: ") + e.what());
  }
  try {
    const auto& em = meta.at("encoder");
    if (em.at("kind") != "toy") throw LoadError("checkpoint encoder kind is not loadable");
    EncoderSpec es{em.at("num_layers").get<int>(), em.at("feature_dim").get<int>(),
                   em.at("frame_rate").get<double>()};
    std::vector<Matrix> enc_w;
    const auto enc_t = a.section("encoder/");
    std::vector<std::string> enc_names;
    for (int l = 0; l < es.num_layers; ++l) enc_names.push_back("layer" + std::to_string(l) + ".weight");
    require_exact_names(enc_t, enc_names, "encoder checkpoint");
    for (const auto& n : enc_names) {
      Matrix w(static_cast<std::size_t>(es.feature_dim), ToyEncoder::kWindowBins);
      from_tensor(enc_t.at(n), w, n);
      enc_w.push_back(std::move(w));
    }

    const auto& am = meta.at("adapter");
    AdapterConfig ac{am.at("num_layers").get<int>(), am.at("in_dim").get<int>(),
                     am.at("model_dim").get<int>(), am.at("num_subblocks").get<int>(),
                     am.at("hidden_dim").get<int>()};
    const auto& dm = meta.at("decoder");
    DecoderConfig dc;
    dc.vocab_size = dm.at("vocab_size").get<int>();
    dc.model_dim = dm.at("model_dim").get<int>();
    dc.num_heads = dm.at("num_heads").get<int>();
    dc.ffn_dim = dm.at("ffn_dim").get<int>();
    dc.num_layers = dm.at("num_layers").get<int>();
    dc.max_seq_len = dm.at("max_seq_len").get<int>();
    dc.rope_base = dm.at("rope_base").get<double>();
    dc.norm_eps = dm.at("norm_eps").get<double>();
    dc.embed_std = dm.at("embed_std").get<double>();
    dc.lm_head_std = dm.at("lm_head_std").get<double>();
    const auto& fm = meta.at("fusion");
    FusionConfig fc{fm.at("total_layers").get<int>(), fm.at("inject_from").get<int>(),
                    fm.at("gate_init").get<double>()};

    TrainState s;
    auto& m = s.model;
    m.encoder = std::make_shared<const ToyEncoder>(es, std::move(enc_w),
                                                   em.at("sample_rate").get<int>());
    m.adapter = AdapterParams::from_tensors(ac, a.section("adapter/"));
    m.decoder = std::make_shared<const ToyDecoder>(
        dc, DecoderWeights::from_tensors(dc, a.section("decoder/")));
    m.fusion = fc;
    m.gates = GateParams::init(fc);
    auto load_gates = [&](const std::string& prefix, Vector& dst) {
      const auto t = a.section(prefix);
      require_exact_names(t, {"gate"}, prefix);
      dst.assign(static_cast<std::size_t>(fc.num_injected()), 0.0);
      from_tensor(t.at("gate"), dst, prefix + "gate");
    };
    load_gates("gates/", m.gates.g);
    m.vocab = Vocabulary::from_tokens([&] {
      auto toks = meta.at("vocab").get<std::vector<std::string>>();
      if (toks.size() < Vocabulary::kNumSpecial) throw LoadError("checkpoint vocabulary truncated");
      return std::vector<std::string>(toks.begin() + Vocabulary::kNumSpecial, toks.end());
    }());
    m.validate();

    s.stage = parse_stage(meta.at("stage").get<std::string>());
    s.step = meta.at("step").get<long>();
    s.total_steps = meta.at("total_steps").get<long>();
    s.moments.adapter_m = AdapterParams::from_tensors(ac, a.section("optim/adapter_m/"));
    s.moments.adapter_v = AdapterParams::from_tensors(ac, a.section("optim/adapter_v/"));
    load_gates("optim/gates_m/", s.moments.gates_m);
    load_gates("optim/gates_v/", s.moments.gates_v);

    // Every tensor must belong to a known section.
    std::size_t known = 0;
    for (const char* p : {"encoder/", "adapter/", "decoder/", "gates/", "optim/adapter_m/",
                          "optim/adapter_v/", "optim/gates_m/", "optim/gates_v/"}) {
      known += a.section(p).size();
    }
    if (known != a.tensors.size()) throw LoadError("checkpoint contains unknown tensors");
    return s;
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint metadata incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint inconsistent: ") + e.what());
  }
}

std::vector<std::uint8_t> serialize_group(const MusicQaModel& model, ParamGroup group) {
  Archive a;
  switch (group) {
    case ParamGroup::kEncoder: a.tensors = encoder_tensors(*model.encoder); break;
    case ParamGroup::kDecoderBase: a.tensors = model.decoder->weights().to_tensors(); break;
    case ParamGroup::kAdapter: a.tensors = model.adapter.to_tensors(); break;
    case ParamGroup::kGates: a.tensors = gate_tensors(model.gates.g); break;
  }
  return serialize_archive(a);
}

std::string answer_question(const MusicQaModel& model, const LayerStackedEmbedding* emb,
                            const std::string& question, const DecodeParams& params) {
  const Injection inj{model.fusion, music_context(model, emb), model.gates.g};
  const auto prompt = model.vocab.encode_prompt(question);
  DecodeParams p = params;
  p.eos_token = Vocabulary::kEos;
  return model.vocab.decode(generate(prompt, &inj, *model.decoder, p));
}

}  // namespace mullama
