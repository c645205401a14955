#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "erp/checkpoint.hpp"
#include "erp/rng.hpp"
#include "erp/tensor.hpp"
#include "erp/tokenizer.hpp"

namespace erp {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 0;
  std::size_t max_len = 96;  // context window
  std::size_t n_segments = 2;
  double dropout_rate = 0.1;       // attention probabilities and residual branches
  double head_dropout_rate = 0.1;  // task-specific layers
  double init_std = 0.02;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// A classification task served by the shared encoder.
struct TaskHeadSpec {
  std::string name;
  std::size_t arity = 2;
  bool operator==(const TaskHeadSpec&) const = default;
};

// Row-major [B,L] id grids. attention_mask is 1 for real tokens, 0 for pad.
struct EncodedBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<TokenId> token_ids;
  std::vector<TokenId> segment_ids;
  std::vector<std::uint8_t> attention_mask;
  std::string task_tag;

  void validate() const;
};

// Ordered, named parameter storage.
class ParameterSet {
 public:
  Tensor& add(std::string name, Shape shape, Rng& rng, double std_dev);
  Tensor& add_constant(std::string name, Shape shape, double value);
  const Tensor& get(const std::string& name) const;
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t count() const;
  NamedTensors named() const;
  // Copies values from a checkpoint; names and shapes must match exactly.
  void assign(const NamedTensors& saved);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

struct LayerWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_g, ln1_b;
  Tensor w1, b1, w2, b2;
  Tensor ln2_g, ln2_b;
};

struct EncoderOutput {
  Tensor hidden;  // [B,L,d]
  Tensor pooled;  // [B,d]
  std::vector<Tensor> attention;  // per layer, [B*H,L,L]
};

// Bidirectional encoder shared across tasks, with one affine head per task.
class EncoderClassifier {
 public:
  EncoderClassifier(ModelConfig cfg, std::vector<TaskHeadSpec> heads, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  const std::vector<TaskHeadSpec>& heads() const { return heads_; }
  std::size_t arity(const std::string& task) const;

  // tok_emb[id] + seg_emb[seg] + pos_emb[l], before normalization.
  Tensor embedding_sum(const EncodedBatch& batch) const;
  Tensor embed(const EncodedBatch& batch) const;
  EncoderOutput encode(const EncodedBatch& batch, bool train_mode, Rng* rng = nullptr) const;
  Tensor classify_head(const Tensor& pooled, const std::string& task, bool train_mode,
                       Rng* rng = nullptr) const;
  // encode + classify_head for batch.task_tag.
  Tensor logits(const EncodedBatch& batch, bool train_mode, Rng* rng = nullptr) const;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  Checkpoint to_checkpoint(const std::string& vocab_fingerprint) const;
  static EncoderClassifier from_checkpoint(const Checkpoint& ckpt);

  // Closed form; see docs/architecture.md.
  static std::size_t parameter_count(const ModelConfig& cfg, const std::vector<TaskHeadSpec>& heads);

 private:
  ModelConfig cfg_;
  std::vector<TaskHeadSpec> heads_;
  ParameterSet params_;
  std::vector<LayerWeights> layers_;
};

// Causal decoder language model.
class DecoderLM {
 public:
  DecoderLM(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // token_ids is row-major [batch, length]; returns logits [B,L,V] where
  // position i scores token i+1.
  Tensor forward(const std::vector<TokenId>& token_ids, std::size_t batch, bool train_mode,
                 Rng* rng = nullptr, std::vector<Tensor>* attention = nullptr) const;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  Checkpoint to_checkpoint(const std::string& vocab_fingerprint) const;
  static DecoderLM from_checkpoint(const Checkpoint& ckpt);

  static std::size_t parameter_count(const ModelConfig& cfg);

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  std::vector<LayerWeights> layers_;
};

// Reads the checkpoint's stored kind ("encoder-classifier" or "decoder-lm")
// and vocabulary fingerprint.
std::string checkpoint_kind(const Checkpoint& ckpt);
void require_vocab_match(const Checkpoint& ckpt, const Vocab& vocab);

}  // namespace erp
