#include "erp/transformer.hpp"

#include <cmath>

#include "erp/errors.hpp"

namespace erp {

namespace {

constexpr const char* kEncoderKind = "encoder-classifier";
constexpr const char* kDecoderKind = "decoder-lm";

double normal(Rng& rng) {
  // Box-Muller; u1 kept away from zero.
  const double u1 = 1.0 - rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::size_t layer_param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  // q,k,v,o projections + two layer norms + two feed-forward maps.
  return 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d);
}

LayerWeights make_layer(ParameterSet& ps, const ModelConfig& c, std::size_t i, Rng& rng) {
  const std::string p = "layer" + std::to_string(i) + ".";
  const std::size_t d = c.d_model, f = c.d_ff;
  const double s = c.init_std;
  LayerWeights w;
  w.wq = ps.add(p + "attn.q.weight", {d, d}, rng, s);
  w.bq = ps.add_constant(p + "attn.q.bias", {d}, 0.0);
  w.wk = ps.add(p + "attn.k.weight", {d, d}, rng, s);
  w.bk = ps.add_constant(p + "attn.k.bias", {d}, 0.0);
  w.wv = ps.add(p + "attn.v.weight", {d, d}, rng, s);
  w.bv = ps.add_constant(p + "attn.v.bias", {d}, 0.0);
  w.wo = ps.add(p + "attn.out.weight", {d, d}, rng, s);
  w.bo = ps.add_constant(p + "attn.out.bias", {d}, 0.0);
  w.ln1_g = ps.add_constant(p + "ln1.gamma", {d}, 1.0);
  w.ln1_b = ps.add_constant(p + "ln1.beta", {d}, 0.0);
  w.w1 = ps.add(p + "ff.in.weight", {d, f}, rng, s);
  w.b1 = ps.add_constant(p + "ff.in.bias", {f}, 0.0);
  w.w2 = ps.add(p + "ff.out.weight", {f, d}, rng, s);
  w.b2 = ps.add_constant(p + "ff.out.bias", {d}, 0.0);
  w.ln2_g = ps.add_constant(p + "ln2.gamma", {d}, 1.0);
  w.ln2_b = ps.add_constant(p + "ln2.beta", {d}, 0.0);
  return w;
}

// Post-norm block: LN(x + MHA(x)), then LN(x + FFN(x)).
// keep is [B*H, L, L]: keep[.., i, j] lets query i see key j.
Tensor layer_forward(const LayerWeights& w, const Tensor& x, std::span<const std::uint8_t> keep,
                     std::size_t heads, double drop, Rng* rng, std::vector<Tensor>* attention) {
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2), dh = d / heads;
  auto split = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {b, l, heads, dh}), {0, 2, 1, 3}), {b * heads, l, dh});
  };
  const Tensor q = split(linear(x, w.wq, w.bq));
  const Tensor k = split(linear(x, w.wk, w.bk));
  const Tensor v = split(linear(x, w.wv, w.bv));
  const Tensor scores = scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor probs = masked_softmax(scores, keep);
  if (attention) attention->push_back(probs);
  probs = dropout(probs, drop, rng);
  Tensor ctx = bmm(probs, v);
  ctx = reshape(permute(reshape(ctx, {b, heads, l, dh}), {0, 2, 1, 3}), {b, l, d});
  const Tensor attn_out = dropout(linear(ctx, w.wo, w.bo), drop, rng);
  const Tensor h1 = layer_norm(add(x, attn_out), w.ln1_g, w.ln1_b);
  const Tensor ff = dropout(linear(gelu(linear(h1, w.w1, w.b1)), w.w2, w.b2), drop, rng);
  return layer_norm(add(h1, ff), w.ln2_g, w.ln2_b);
}

std::vector<TokenId> positions(std::size_t batch, std::size_t length) {
  std::vector<TokenId> pos(batch * length);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<TokenId>(i % length);
  return pos;
}

void require_length(std::size_t length, const ModelConfig& cfg) {
  if (length > cfg.max_len) {
    throw SequenceLengthError("sequence length " + std::to_string(length) +
                              " exceeds the context window of " + std::to_string(cfg.max_len));
  }
  if (length == 0) throw SequenceLengthError("empty sequence");
}

}  // namespace

// ---- ModelConfig -------------------------------------------------------------

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || max_len == 0 ||
      n_segments == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (vocab_size <= kSpecialTokens.size()) throw ConfigError("model vocab_size is smaller than the special tokens");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  for (double r : {dropout_rate, head_dropout_rate}) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("dropout rates must lie in [0,1)");
  }
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},         {"n_heads", n_heads},
          {"d_model", d_model},           {"d_ff", d_ff},
          {"vocab_size", vocab_size},     {"max_len", max_len},
          {"n_segments", n_segments},     {"dropout_rate", dropout_rate},
          {"head_dropout_rate", head_dropout_rate}, {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.max_len);
  c.n_segments = j.value("n_segments", c.n_segments);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.head_dropout_rate = j.value("head_dropout_rate", c.head_dropout_rate);
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

// ---- EncodedBatch --------------------------------------------------------------

void EncodedBatch::validate() const {
  const std::size_t n = batch * length;
  if (batch == 0 || length == 0) throw DimensionError("encoded batch is empty");
  if (token_ids.size() != n || segment_ids.size() != n || attention_mask.size() != n) {
    throw DimensionError("encoded batch grids do not match [" + std::to_string(batch) + "," +
                         std::to_string(length) + "]");
  }
  for (std::size_t r = 0; r < batch; ++r) {
    if (!attention_mask[r * length]) throw ContractError("row " + std::to_string(r) + " starts with padding");
  }
}

// ---- ParameterSet ----------------------------------------------------------------

Tensor& ParameterSet::add(std::string name, Shape shape, Rng& rng, double std_dev) {
  std::vector<double> values(numel_of(shape));
  for (double& v : values) v = std_dev * normal(rng);
  names_.push_back(std::move(name));
  tensors_.push_back(Tensor::from(std::move(shape), std::move(values), true));
  return tensors_.back();
}

Tensor& ParameterSet::add_constant(std::string name, Shape shape, double value) {
  names_.push_back(std::move(name));
  tensors_.push_back(Tensor::full(std::move(shape), value, true));
  return tensors_.back();
}

const Tensor& ParameterSet::get(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return tensors_[i];
  }
  throw ConfigError("no parameter named '" + name + "'");
}

std::size_t ParameterSet::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

NamedTensors ParameterSet::named() const {
  NamedTensors out;
  for (std::size_t i = 0; i < names_.size(); ++i) out.emplace_back(names_[i], tensors_[i]);
  return out;
}

void ParameterSet::assign(const NamedTensors& saved) {
  if (saved.size() != tensors_.size()) {
    throw ManifestError("checkpoint holds " + std::to_string(saved.size()) + " tensors, model expects " +
                        std::to_string(tensors_.size()));
  }
  for (std::size_t i = 0; i < saved.size(); ++i) {
    if (saved[i].first != names_[i] || saved[i].second.shape() != tensors_[i].shape()) {
      throw ManifestError("checkpoint tensor '" + saved[i].first + "' " +
                          shape_str(saved[i].second.shape()) + " does not match model tensor '" +
                          names_[i] + "' " + shape_str(tensors_[i].shape()));
    }
    auto dst = tensors_[i].mutable_data();
    auto src = saved[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

// ---- EncoderClassifier -------------------------------------------------------------

EncoderClassifier::EncoderClassifier(ModelConfig cfg, std::vector<TaskHeadSpec> heads,
                                     std::uint64_t seed)
    : cfg_(cfg), heads_(std::move(heads)) {
  cfg_.validate();
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    if (heads_[i].arity < 2) throw ConfigError("task '" + heads_[i].name + "' needs at least 2 classes");
    for (std::size_t j = 0; j < i; ++j) {
      if (heads_[j].name == heads_[i].name) throw ConfigError("duplicate task head '" + heads_[i].name + "'");
    }
  }
  Rng rng(seed);
  const std::size_t d = cfg_.d_model;
  params_.add("embed.token", {cfg_.vocab_size, d}, rng, cfg_.init_std);
  params_.add("embed.segment", {cfg_.n_segments, d}, rng, cfg_.init_std);
  params_.add("embed.position", {cfg_.max_len, d}, rng, cfg_.init_std);
  params_.add_constant("embed.ln.gamma", {d}, 1.0);
  params_.add_constant("embed.ln.beta", {d}, 0.0);
  for (std::size_t i = 0; i < cfg_.n_layers; ++i) layers_.push_back(make_layer(params_, cfg_, i, rng));
  params_.add("pooler.weight", {d, d}, rng, cfg_.init_std);
  params_.add_constant("pooler.bias", {d}, 0.0);
  for (const auto& h : heads_) {
    params_.add("head." + h.name + ".weight", {d, h.arity}, rng, cfg_.init_std);
    params_.add_constant("head." + h.name + ".bias", {h.arity}, 0.0);
  }
}

std::size_t EncoderClassifier::arity(const std::string& task) const {
  for (const auto& h : heads_) {
    if (h.name == task) return h.arity;
  }
  throw ConfigError("unknown task '" + task + "'");
}

Tensor EncoderClassifier::embedding_sum(const EncodedBatch& batch) const {
  batch.validate();
  require_length(batch.length, cfg_);
  for (TokenId s : batch.segment_ids) {
    if (s < 0 || static_cast<std::size_t>(s) >= cfg_.n_segments) {
      throw IndexError("segment id " + std::to_string(s) + " outside [0," +
                       std::to_string(cfg_.n_segments) + ")");
    }
  }
  const Tensor tok = embedding(params_.get("embed.token"), batch.token_ids);
  const Tensor seg = embedding(params_.get("embed.segment"), batch.segment_ids);
  const Tensor pos = embedding(params_.get("embed.position"), positions(batch.batch, batch.length));
  return reshape(add(add(tok, seg), pos), {batch.batch, batch.length, cfg_.d_model});
}

Tensor EncoderClassifier::embed(const EncodedBatch& batch) const {
  return layer_norm(embedding_sum(batch), params_.get("embed.ln.gamma"), params_.get("embed.ln.beta"));
}

EncoderOutput EncoderClassifier::encode(const EncodedBatch& batch, bool train_mode, Rng* rng) const {
  if (train_mode && rng == nullptr) throw ContractError("train-mode forward needs an rng stream");
  Rng* drop_rng = train_mode ? rng : nullptr;
  const std::size_t b = batch.batch, l = batch.length, h = cfg_.n_heads;

  // Padding keys are invisible to every query.
  std::vector<std::uint8_t> keep(b * h * l * l);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t hh = 0; hh < h; ++hh) {
      for (std::size_t i = 0; i < l; ++i) {
        for (std::size_t j = 0; j < l; ++j) {
          keep[((r * h + hh) * l + i) * l + j] = batch.attention_mask[r * l + j];
        }
      }
    }
  }

  EncoderOutput out;
  Tensor x = embed(batch);
  for (const auto& layer : layers_) {
    x = layer_forward(layer, x, keep, h, cfg_.dropout_rate, drop_rng, &out.attention);
  }
  out.hidden = x;
  out.pooled = tanh(linear(select_position(x, 0), params_.get("pooler.weight"), params_.get("pooler.bias")));
  return out;
}

Tensor EncoderClassifier::classify_head(const Tensor& pooled, const std::string& task,
                                        bool train_mode, Rng* rng) const {
  arity(task);
  if (train_mode && rng == nullptr) throw ContractError("train-mode head needs an rng stream");
  const Tensor in = dropout(pooled, cfg_.head_dropout_rate, train_mode ? rng : nullptr);
  return linear(in, params_.get("head." + task + ".weight"), params_.get("head." + task + ".bias"));
}

Tensor EncoderClassifier::logits(const EncodedBatch& batch, bool train_mode, Rng* rng) const {
  const auto enc = encode(batch, train_mode, rng);
  return classify_head(enc.pooled, batch.task_tag, train_mode, rng);
}

std::size_t EncoderClassifier::parameter_count(const ModelConfig& c,
                                               const std::vector<TaskHeadSpec>& heads) {
  const std::size_t d = c.d_model;
  std::size_t n = c.vocab_size * d + c.n_segments * d + c.max_len * d + 2 * d;
  n += c.n_layers * layer_param_count(c);
  n += d * d + d;
  for (const auto& h : heads) n += d * h.arity + h.arity;
  return n;
}

Checkpoint EncoderClassifier::to_checkpoint(const std::string& vocab_fingerprint) const {
  Checkpoint ck;
  ck.meta["kind"] = kEncoderKind;
  ck.meta["config"] = cfg_.to_json();
  ck.meta["vocab_fingerprint"] = vocab_fingerprint;
  ck.meta["heads"] = nlohmann::json::array();
  for (const auto& h : heads_) ck.meta["heads"].push_back({{"name", h.name}, {"arity", h.arity}});
  ck.tensors = params_.named();
  return ck;
}

EncoderClassifier EncoderClassifier::from_checkpoint(const Checkpoint& ckpt) {
  if (checkpoint_kind(ckpt) != kEncoderKind) {
    throw ManifestError("expected an encoder-classifier checkpoint, found '" + checkpoint_kind(ckpt) + "'");
  }
  std::vector<TaskHeadSpec> heads;
  for (const auto& h : ckpt.meta.at("heads")) {
    heads.push_back({h.at("name").get<std::string>(), h.at("arity").get<std::size_t>()});
  }
  EncoderClassifier model(ModelConfig::from_json(ckpt.meta.at("config")), std::move(heads), 0);
  model.params_.assign(ckpt.tensors);
  return model;
}

// ---- DecoderLM ---------------------------------------------------------------------

DecoderLM::DecoderLM(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t d = cfg_.d_model;
  params_.add("embed.token", {cfg_.vocab_size, d}, rng, cfg_.init_std);
  params_.add("embed.position", {cfg_.max_len, d}, rng, cfg_.init_std);
  params_.add_constant("embed.ln.gamma", {d}, 1.0);
  params_.add_constant("embed.ln.beta", {d}, 0.0);
  for (std::size_t i = 0; i < cfg_.n_layers; ++i) layers_.push_back(make_layer(params_, cfg_, i, rng));
  params_.add("lm_head.weight", {d, cfg_.vocab_size}, rng, cfg_.init_std);
  params_.add_constant("lm_head.bias", {cfg_.vocab_size}, 0.0);
}

Tensor DecoderLM::forward(const std::vector<TokenId>& token_ids, std::size_t batch, bool train_mode,
                          Rng* rng, std::vector<Tensor>* attention) const {
  if (batch == 0 || token_ids.size() % batch != 0 || token_ids.empty()) {
    throw DimensionError("decoder input of " + std::to_string(token_ids.size()) +
                         " ids does not split into " + std::to_string(batch) + " rows");
  }
  if (train_mode && rng == nullptr) throw ContractError("train-mode forward needs an rng stream");
  Rng* drop_rng = train_mode ? rng : nullptr;
  const std::size_t l = token_ids.size() / batch, h = cfg_.n_heads, d = cfg_.d_model;
  require_length(l, cfg_);

  std::vector<std::uint8_t> keep(batch * h * l * l);
  for (std::size_t s = 0; s < batch * h; ++s) {
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t j = 0; j < l; ++j) keep[(s * l + i) * l + j] = j <= i ? 1 : 0;
    }
  }

  const Tensor tok = embedding(params_.get("embed.token"), token_ids);
  const Tensor pos = embedding(params_.get("embed.position"), positions(batch, l));
  Tensor x = layer_norm(reshape(add(tok, pos), {batch, l, d}), params_.get("embed.ln.gamma"),
                        params_.get("embed.ln.beta"));
  for (const auto& layer : layers_) {
    x = layer_forward(layer, x, keep, h, cfg_.dropout_rate, drop_rng, attention);
  }
  return linear(x, params_.get("lm_head.weight"), params_.get("lm_head.bias"));
}

std::size_t DecoderLM::parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  return c.vocab_size * d + c.max_len * d + 2 * d + c.n_layers * layer_param_count(c) +
         d * c.vocab_size + c.vocab_size;
}

Checkpoint DecoderLM::to_checkpoint(const std::string& vocab_fingerprint) const {
  Checkpoint ck;
  ck.meta["kind"] = kDecoderKind;
  ck.meta["config"] = cfg_.to_json();
  ck.meta["vocab_fingerprint"] = vocab_fingerprint;
  ck.tensors = params_.named();
  return ck;
}

DecoderLM DecoderLM::from_checkpoint(const Checkpoint& ckpt) {
  if (checkpoint_kind(ckpt) != kDecoderKind) {
    throw ManifestError("expected a decoder-lm checkpoint, found '" + checkpoint_kind(ckpt) + "'");
  }
  DecoderLM model(ModelConfig::from_json(ckpt.meta.at("config")), 0);
  model.params_.assign(ckpt.tensors);
  return model;
}

std::string checkpoint_kind(const Checkpoint& ckpt) { return ckpt.meta.value("kind", std::string{}); }

void require_vocab_match(const Checkpoint& ckpt, const Vocab& vocab) {
  const std::string stored = ckpt.meta.value("vocab_fingerprint", std::string{});
  const auto cfg = ModelConfig::from_json(ckpt.meta.value("config", nlohmann::json::object()));
  if (cfg.vocab_size != vocab.size() || stored != vocab.fingerprint()) {
    throw ManifestError("checkpoint was trained with a different vocabulary (fingerprint " + stored +
                        ", size " + std::to_string(cfg.vocab_size) + ") than the one supplied (" +
                        vocab.fingerprint() + ", size " + std::to_string(vocab.size()) + ")");
  }
}

}  // namespace erp
