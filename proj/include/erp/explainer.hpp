#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "erp/comve_data.hpp"
#include "erp/tensor.hpp"
#include "erp/tokenizer.hpp"
#include "erp/trainer.hpp"
#include "erp/transformer.hpp"

namespace erp {

// Mean of -log softmax(logits)[target] over positions where loss_mask is
// nonzero. logits [B,L,V]; targets and loss_mask are row-major [B,L].
Tensor lm_loss(const Tensor& logits, std::span<const TokenId> targets, std::span<const double> loss_mask);

// Teacher-forcing batch: inputs are tokens[:-1], targets tokens[1:].
struct LmBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  std::vector<double> mask;
};

LmBatch collate_lm(std::span<const LmSequence> rows);

struct GeneratorEpoch {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr_last = 0.0;
};

// Fine-tunes the decoder on assembled subtask-C sequences with the same
// optimizer machinery as the classifier (Adamax, clipping, warm-up/decay).
std::vector<GeneratorEpoch> fit_generator(DecoderLM& model, const std::vector<LmSequence>& data,
                                          const TrainConfig& cfg,
                                          const std::function<void(const GeneratorEpoch&)>& on_epoch = nullptr);

enum class DecodeStrategy { kGreedy, kTopK };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::kGreedy;
  std::size_t k = 5;
  std::size_t max_new_tokens = 24;
  std::uint64_t seed = 13;
  // Decoding stops on [EXP] or [EOS]; other specials are never emitted.

  void validate() const;
};

// Decodes from the "[BOS] s [CUZ]" prompt and returns the explanation text.
std::string generate_explanation(const DecoderLM& model, std::string_view false_sent, const Vocab& vocab,
                                 const DecodeConfig& cfg);

// Same, returning the emitted ids (stop token excluded).
TokenIds generate_ids(const DecoderLM& model, const TokenIds& prompt, const DecodeConfig& cfg);

// ---- BLEU ------------------------------------------------------------------------

struct BleuReport {
  double corpus_bleu = 0.0;  // [0,100]
  std::vector<double> sentence_bleu;
  std::array<double, 4> precisions{};  // corpus p1..p4; 0 where no n-grams exist
  std::size_t orders_used = 0;
  double brevity_penalty = 0.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

// Lowercases, splits on whitespace, and separates ASCII punctuation into its
// own tokens: "Edible." -> ["edible", "."].
std::vector<std::string> bleu_tokenize(std::string_view text);

// Corpus BLEU up to 4-grams with counts clipped against all references of a
// candidate and the brevity penalty taken against the closest reference
// length (shorter wins ties). Orders above the shortest non-empty candidate
// length are left out of the geometric mean.
BleuReport bleu(const std::vector<std::string>& candidates,
                const std::vector<std::vector<std::string>>& references);

}  // namespace erp
