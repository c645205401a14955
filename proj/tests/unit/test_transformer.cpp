#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "erp/errors.hpp"
#include "erp/explainer.hpp"
#include "erp/rng.hpp"
#include "erp/transformer.hpp"
#include "gradcheck.hpp"

using namespace erp;

namespace {

ModelConfig tiny(std::size_t vocab = 20) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_len = 12;
  return c;
}

const std::vector<TaskHeadSpec> kHeads = {{"A", 2}, {"B", 3}};

// Rows of real tokens followed by padding, lengths given per row.
EncodedBatch random_batch(Rng& rng, std::size_t vocab, std::size_t len, const std::vector<std::size_t>& real) {
  EncodedBatch b;
  b.batch = real.size();
  b.length = len;
  b.task_tag = "A";
  for (std::size_t r = 0; r < real.size(); ++r) {
    for (std::size_t i = 0; i < len; ++i) {
      const bool keep = i < real[r];
      b.token_ids.push_back(keep ? 9 + static_cast<TokenId>(rng.below(vocab - 9)) : id_of(Special::kPad));
      b.segment_ids.push_back(keep && i >= real[r] / 2 ? 1 : 0);
      b.attention_mask.push_back(keep ? 1 : 0);
    }
  }
  return b;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.dropout_rate = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(ModelConfig::from_json(tiny().to_json()) == tiny());
}

TEST_CASE("embedding sum of zeroed tables is zero; shapes") {
  EncoderClassifier m(tiny(), kHeads, 1);
  for (const char* n : {"embed.token", "embed.segment", "embed.position"}) {
    auto t = m.params().get(n);
    for (auto& x : t.mutable_data()) x = 0.0;
  }
  Rng rng(1);
  const auto b = random_batch(rng, 20, 8, {8, 5});
  const auto s = m.embedding_sum(b);
  CHECK(s.shape() == Shape{2, 8, 8});
  for (double x : s.data()) CHECK(x == 0.0);
  CHECK(m.embed(b).shape() == Shape{2, 8, 8});
}

TEST_CASE("segment ids change the embedding") {
  EncoderClassifier m(tiny(), kHeads, 2);
  Rng rng(2);
  auto b = random_batch(rng, 20, 8, {8, 8});
  const auto e1 = m.embed(b);
  for (auto& s : b.segment_ids) s = 1 - s;
  const auto e2 = m.embed(b);
  CHECK(max_abs_diff(e1.data(), e2.data()) > 1e-6);
}

TEST_CASE("length and segment checks") {
  EncoderClassifier m(tiny(), kHeads, 3);
  Rng rng(3);
  CHECK_THROWS_AS(m.embed(random_batch(rng, 20, 13, {13})), SequenceLengthError);
  auto b = random_batch(rng, 20, 4, {4});
  b.segment_ids[0] = 2;
  CHECK_THROWS_AS(m.embed(b), IndexError);
}

TEST_CASE("encoder shapes, eval determinism, train-mode needs an rng") {
  EncoderClassifier m(tiny(), kHeads, 4);
  Rng rng(4);
  const auto b = random_batch(rng, 20, 8, {8, 3});
  const auto o1 = m.encode(b, false);
  const auto o2 = m.encode(b, false);
  CHECK(o1.hidden.shape() == Shape{2, 8, 8});
  CHECK(o1.pooled.shape() == Shape{2, 8});
  CHECK(max_abs_diff(o1.hidden.data(), o2.hidden.data()) == 0.0);
  CHECK_THROWS_AS(m.encode(b, true, nullptr), ContractError);
  Rng d(5);
  const auto o3 = m.encode(b, true, &d);
  CHECK(max_abs_diff(o1.hidden.data(), o3.hidden.data()) > 0.0);
}

TEST_CASE("pad token ids do not leak into real positions") {
  EncoderClassifier m(tiny(), kHeads, 5);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    auto b = random_batch(rng, 20, 10, {10, 4, 7});
    const auto h1 = m.encode(b, false).hidden;
    auto b2 = b;
    for (std::size_t i = 0; i < b2.token_ids.size(); ++i) {
      if (!b2.attention_mask[i]) b2.token_ids[i] = 9 + static_cast<TokenId>(rng.below(11));
    }
    const auto h2 = m.encode(b2, false).hidden;
    for (std::size_t i = 0; i < b.attention_mask.size(); ++i) {
      if (!b.attention_mask[i]) continue;
      for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(h1.data()[i * 8 + k] - h2.data()[i * 8 + k]) <= 1e-9);
    }
  }
}

TEST_CASE("attention rows sum to one over unmasked keys") {
  EncoderClassifier m(tiny(), kHeads, 6);
  Rng rng(7);
  const auto b = random_batch(rng, 20, 6, {6, 2});
  const auto out = m.encode(b, false);
  REQUIRE(out.attention.size() == 2);
  const std::size_t H = 2, L = 6;
  for (const auto& att : out.attention) {
    CHECK(att.shape() == Shape{2 * H, L, L});
    for (std::size_t bh = 0; bh < 2 * H; ++bh) {
      const std::size_t row = bh / H;
      for (std::size_t q = 0; q < L; ++q) {
        double total = 0.0;
        for (std::size_t k = 0; k < L; ++k) {
          const double p = att.data()[(bh * L + q) * L + k];
          if (!b.attention_mask[row * L + k]) CHECK(p == 0.0);
          total += p;
        }
        CHECK(std::abs(total - 1.0) <= 1e-9);
      }
    }
  }
}

TEST_CASE("classification heads") {
  EncoderClassifier m(tiny(), kHeads, 7);
  Rng rng(8);
  auto b = random_batch(rng, 20, 5, {5, 5});
  CHECK(m.logits(b, false).shape() == Shape{2, 2});
  b.task_tag = "B";
  CHECK(m.logits(b, false).shape() == Shape{2, 3});
  b.task_tag = "Z";
  CHECK_THROWS_AS(m.logits(b, false), ConfigError);
  CHECK(m.arity("B") == 3);
}

TEST_CASE("parameter count matches the closed form") {
  for (auto cfg : {tiny(), tiny(37)}) {
    EncoderClassifier m(cfg, kHeads, 1);
    CHECK(m.params().count() == EncoderClassifier::parameter_count(cfg, kHeads));
    DecoderLM d(cfg, 1);
    CHECK(d.params().count() == DecoderLM::parameter_count(cfg));
  }
  ModelConfig c = tiny();
  c.n_layers = 3;
  c.d_model = 12;
  c.n_heads = 3;
  c.d_ff = 20;
  // Hand evaluation of the documented formula for V=20, S=2, P=12, d=12, f=20, n=3, heads {2,3}.
  const std::size_t d = 12, f = 20, V = 20, S = 2, P = 12;
  const std::size_t layer = 4 * (d * d + d) + 4 * d + d * f + f + f * d + d;
  const std::size_t expected = V * d + S * d + P * d + 2 * d + 3 * layer + d * d + d + (d * 2 + 2) + (d * 3 + 3);
  CHECK(EncoderClassifier::parameter_count(c, kHeads) == expected);
  CHECK(EncoderClassifier(c, kHeads, 1).params().count() == expected);
}

TEST_CASE("decoder shapes and causality") {
  DecoderLM d(tiny(), 9);
  Rng rng(10);
  std::vector<TokenId> ids = {6, 12, 13, 14, 15};
  CHECK(d.forward(ids, 1, false).shape() == Shape{1, 5, 20});
  for (int trial = 0; trial < 5; ++trial) {
    for (auto& x : ids) x = 9 + static_cast<TokenId>(rng.below(11));
    const auto base = d.forward(ids, 1, false);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      auto p = ids;
      p[t] = p[t] == 10 ? 11 : 10;
      const auto pert = d.forward(p, 1, false);
      for (std::size_t i = 0; i < t * 20; ++i) CHECK(std::abs(base.data()[i] - pert.data()[i]) <= 1e-9);
    }
  }
}

TEST_CASE("single-token decoder input depends only on that token") {
  DecoderLM d(tiny(), 10);
  const auto a = d.forward({12}, 1, false);
  const auto b = d.forward({12}, 1, false);
  const auto c = d.forward({13}, 1, false);
  CHECK(a.shape() == Shape{1, 1, 20});
  CHECK(max_abs_diff(a.data(), b.data()) == 0.0);
  CHECK(max_abs_diff(a.data(), c.data()) > 0.0);
}

TEST_CASE("gradients of encoder-classifier and decoder match finite differences") {
  ModelConfig c = tiny(14);
  c.max_len = 6;
  EncoderClassifier m(c, kHeads, 11);
  Rng rng(12);
  const auto b = random_batch(rng, 14, 5, {5, 3});
  const std::vector<std::int64_t> t = {1, 0};
  auto mp = m.params().tensors();
  testing::scale_parameters(mp, 10.0);
  auto r = testing::grad_check(m.params().tensors(), m.params().names(), [&] { return cross_entropy(m.logits(b, false), t); });
  for (const auto& x : r) CHECK_MESSAGE(x.relative_error < 1e-4, x.name);

  DecoderLM d(c, 13);
  const std::vector<TokenId> ids = {6, 10, 11, 8, 12};
  const std::vector<TokenId> targets = {10, 11, 8, 12, 7};
  const std::vector<double> mask = {0, 0, 1, 1, 1};
  auto dp = d.params().tensors();
  testing::scale_parameters(dp, 10.0);
  auto rd = testing::grad_check(d.params().tensors(), d.params().names(),
                                [&] { return lm_loss(d.forward(ids, 1, false), targets, mask); });
  for (const auto& x : rd) CHECK_MESSAGE(x.relative_error < 1e-4, x.name);
}

TEST_CASE("checkpoints restore identical outputs and guard the vocabulary") {
  EncoderClassifier m(tiny(), kHeads, 14);
  const auto path = std::filesystem::temp_directory_path() / "erp_unit_enc.ckpt";
  save_checkpoint(path, m.to_checkpoint("fp"));
  const auto ck = load_checkpoint(path);
  CHECK(checkpoint_kind(ck) == "encoder-classifier");
  const auto back = EncoderClassifier::from_checkpoint(ck);
  CHECK(back.heads() == kHeads);
  Rng rng(15);
  const auto b = random_batch(rng, 20, 6, {6, 4});
  CHECK(max_abs_diff(m.logits(b, false).data(), back.logits(b, false).data()) == 0.0);

  DecoderLM d(tiny(), 15);
  const auto dk = d.to_checkpoint("fp");
  CHECK(checkpoint_kind(dk) == "decoder-lm");
  CHECK_THROWS_AS(EncoderClassifier::from_checkpoint(dk), ManifestError);

  std::vector<std::string> toks(kSpecialTokens.begin(), kSpecialTokens.end());
  for (int i = 0; i < 11; ++i) toks.push_back("t" + std::to_string(i));
  const Vocab v = Vocab::from_tokens(toks);
  CHECK(v.size() == 20);
  CHECK_THROWS_AS(require_vocab_match(ck, v), ManifestError);
  CHECK_NOTHROW(require_vocab_match(m.to_checkpoint(v.fingerprint()), v));
}
