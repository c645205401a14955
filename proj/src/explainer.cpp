#include "erp/explainer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "erp/errors.hpp"
#include "erp/optim.hpp"

namespace erp {

Tensor lm_loss(const Tensor& logits, std::span<const TokenId> targets, std::span<const double> loss_mask) {
  if (logits.rank() != 3) throw DimensionError("lm_loss: logits must be [B,L,V], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0) * logits.dim(1);
  if (targets.size() != rows || loss_mask.size() != rows) {
    throw DimensionError("lm_loss: targets/mask do not cover " + shape_str(logits.shape()));
  }
  if (std::all_of(loss_mask.begin(), loss_mask.end(), [](double w) { return w == 0.0; })) {
    throw ContractError("lm_loss: loss mask selects no positions");
  }
  return weighted_cross_entropy(reshape(logits, {rows, logits.dim(2)}), targets, loss_mask);
}

LmBatch collate_lm(std::span<const LmSequence> rows) {
  if (rows.empty()) throw ContractError("collate_lm: empty batch");
  LmBatch b;
  b.batch = rows.size();
  for (const auto& r : rows) {
    if (r.tokens.size() < 2) throw ContractError("collate_lm: sequence needs at least two tokens");
    if (r.loss_mask.size() != r.tokens.size()) throw DimensionError("collate_lm: mask/token length mismatch");
    b.length = std::max(b.length, r.tokens.size() - 1);
  }
  const std::size_t n = b.batch * b.length;
  b.inputs.assign(n, id_of(Special::kPad));
  b.targets.assign(n, id_of(Special::kPad));
  b.mask.assign(n, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    for (std::size_t t = 0; t + 1 < r.tokens.size(); ++t) {
      b.inputs[i * b.length + t] = r.tokens[t];
      b.targets[i * b.length + t] = r.tokens[t + 1];
      b.mask[i * b.length + t] = r.loss_mask[t + 1];
    }
  }
  return b;
}

std::vector<GeneratorEpoch> fit_generator(DecoderLM& model, const std::vector<LmSequence>& data,
                                          const TrainConfig& cfg,
                                          const std::function<void(const GeneratorEpoch&)>& on_epoch) {
  cfg.validate();
  if (data.empty()) throw ContractError("fit_generator: no training sequences");
  for (const auto& s : data) {
    if (s.tokens.size() - 1 > model.config().max_len) {
      throw SequenceLengthError("training sequence of " + std::to_string(s.tokens.size()) +
                                " tokens exceeds the context window of " + std::to_string(model.config().max_len));
    }
  }
  Rng rng(cfg.seed);
  Rng order_rng = rng.split();
  Rng drop_rng = rng.split();
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  OptimizerState opt;
  opt.schedule = {cfg.learning_rate, cfg.warmup_fraction, per_epoch * cfg.epochs};
  opt.schedule.warmup_steps();
  auto& params = model.params().tensors();

  std::vector<GeneratorEpoch> out;
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    GeneratorEpoch ge;
    ge.epoch = e + 1;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<LmSequence> rows;
      for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch_size); ++j) rows.push_back(data[order[j]]);
      const LmBatch b = collate_lm(rows);
      const Tensor loss = lm_loss(model.forward(b.inputs, b.batch, true, &drop_rng), b.targets, b.mask);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite generator loss at epoch " + std::to_string(e + 1) + ", step " +
                            std::to_string(opt.global_step));
      }
      backward(loss);
      clip_grad_norm(params, cfg.clip_norm);
      ge.lr_last = lr_at(opt.global_step, opt.schedule);
      adamax_step(params, opt.adamax, ge.lr_last);
      zero_grads(params);
      opt.global_step += 1;
      ge.mean_loss += value;
    }
    ge.mean_loss /= static_cast<double>(per_epoch);
    if (on_epoch) on_epoch(ge);
    out.push_back(ge);
  }
  return out;
}

// ---- decoding -----------------------------------------------------------------

void DecodeConfig::validate() const {
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be at least 1");
  if (strategy == DecodeStrategy::kTopK && k < 1) throw ConfigError("top-k decoding needs k >= 1");
}

TokenIds generate_ids(const DecoderLM& model, const TokenIds& prompt, const DecodeConfig& cfg) {
  cfg.validate();
  if (prompt.empty()) throw ContractError("generation prompt is empty");
  if (prompt.size() + cfg.max_new_tokens > model.config().max_len) {
    throw SequenceLengthError("prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                              std::to_string(cfg.max_new_tokens) + " new tokens exceeds the context window of " +
                              std::to_string(model.config().max_len));
  }
  NoGradGuard guard;
  Rng rng(cfg.seed);
  const std::size_t vocab = model.config().vocab_size;
  const auto n_special = static_cast<TokenId>(kSpecialTokens.size());
  TokenIds seq = prompt;
  TokenIds emitted;
  for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
    const Tensor logits = model.forward(seq, 1, false);
    const auto last = logits.data().subspan((seq.size() - 1) * vocab, vocab);

    // Candidates: ordinary tokens plus the two stop markers.
    std::vector<std::pair<double, TokenId>> cand;
    for (TokenId id = 0; id < static_cast<TokenId>(vocab); ++id) {
      const bool stop = id == id_of(Special::kExp) || id == id_of(Special::kEos);
      if (id < n_special && !stop) continue;
      cand.emplace_back(last[static_cast<std::size_t>(id)], id);
    }
    // Highest score first; lower id wins ties.
    std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

    TokenId next = cand.front().second;
    if (cfg.strategy == DecodeStrategy::kTopK) {
      const std::size_t k = std::min(cfg.k, cand.size());
      std::vector<double> w(k);
      double z = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        w[i] = std::exp(cand[i].first - cand[0].first);
        z += w[i];
      }
      double u = rng.uniform() * z;
      next = cand[k - 1].second;
      for (std::size_t i = 0; i < k; ++i) {
        if (u < w[i]) {
          next = cand[i].second;
          break;
        }
        u -= w[i];
      }
    }
    if (next == id_of(Special::kExp) || next == id_of(Special::kEos)) break;
    emitted.push_back(next);
    seq.push_back(next);
  }
  return emitted;
}

std::string generate_explanation(const DecoderLM& model, std::string_view false_sent, const Vocab& vocab,
                                 const DecodeConfig& cfg) {
  if (vocab.size() != model.config().vocab_size) {
    throw ManifestError("decoder vocabulary size " + std::to_string(model.config().vocab_size) +
                        " does not match the supplied vocabulary of " + std::to_string(vocab.size()));
  }
  const LmSequence prompt = generation_prompt(false_sent, vocab);
  return decode(generate_ids(model, prompt.tokens, cfg), vocab);
}

// ---- BLEU ---------------------------------------------------------------------------

std::vector<std::string> bleu_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
    }
  }
  flush();
  return out;
}

namespace {

using Gram = std::vector<std::string>;
using GramCounts = std::map<Gram, std::size_t>;

GramCounts count_grams(const std::vector<std::string>& toks, std::size_t n) {
  GramCounts out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[Gram(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

struct Stats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t cand_len = 0;
  std::size_t ref_len = 0;
};

Stats sentence_stats(const std::vector<std::string>& cand, const std::vector<std::vector<std::string>>& refs) {
  Stats s;
  s.cand_len = cand.size();
  // Closest reference length; the shorter one on ties.
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t len) { return len > cand.size() ? len - cand.size() : cand.size() - len; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  s.ref_len = best;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cc = count_grams(cand, n);
    std::map<Gram, std::size_t> max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : count_grams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    for (const auto& [g, c] : cc) {
      auto it = max_ref.find(g);
      s.matches[n - 1] += std::min(c, it == max_ref.end() ? std::size_t{0} : it->second);
      s.totals[n - 1] += c;
    }
  }
  return s;
}

// Shared by sentence and corpus scores. Returns BLEU in [0,100].
double score(const Stats& s, std::size_t orders, double* bp_out) {
  double bp = 0.0;
  if (s.cand_len > 0) {
    bp = s.cand_len > s.ref_len ? 1.0
                                : std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.cand_len));
  }
  if (bp_out) *bp_out = bp;
  if (orders == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < orders; ++n) {
    if (s.matches[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
  }
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(orders));
}

}  // namespace

BleuReport bleu(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) {
    throw DimensionError("bleu: " + std::to_string(candidates.size()) + " candidates but " +
                         std::to_string(references.size()) + " reference sets");
  }
  BleuReport rep;
  Stats corpus;
  std::size_t shortest = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (references[i].empty()) throw ContractError("bleu: candidate " + std::to_string(i) + " has no references");
    const auto cand = bleu_tokenize(candidates[i]);
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : references[i]) refs.push_back(bleu_tokenize(r));
    const Stats s = sentence_stats(cand, refs);
    rep.sentence_bleu.push_back(cand.empty() ? 0.0 : score(s, std::min<std::size_t>(4, cand.size()), nullptr));
    for (std::size_t n = 0; n < 4; ++n) {
      corpus.matches[n] += s.matches[n];
      corpus.totals[n] += s.totals[n];
    }
    corpus.cand_len += s.cand_len;
    corpus.ref_len += s.ref_len;
    if (!cand.empty() && (shortest == 0 || cand.size() < shortest)) shortest = cand.size();
  }
  rep.orders_used = std::min<std::size_t>(4, shortest);
  for (std::size_t n = 0; n < 4; ++n) {
    rep.precisions[n] = corpus.totals[n] == 0 ? 0.0
                                              : static_cast<double>(corpus.matches[n]) / static_cast<double>(corpus.totals[n]);
  }
  rep.corpus_bleu = score(corpus, rep.orders_used, &rep.brevity_penalty);
  rep.candidate_length = corpus.cand_len;
  rep.reference_length = corpus.ref_len;
  return rep;
}

}  // namespace erp
