#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "erp/checkpoint.hpp"
#include "erp/comve_data.hpp"
#include "erp/errors.hpp"
#include "erp/explainer.hpp"
#include "erp/optim.hpp"
#include "erp/tokenizer.hpp"
#include "erp/trainer.hpp"
#include "erp/transformer.hpp"

namespace py = pybind11;
using namespace erp;

namespace {

std::filesystem::path vocab_beside(const std::filesystem::path& ckpt, const std::optional<std::filesystem::path>& v) {
  return v ? *v : ckpt.parent_path() / "vocab.txt";
}

Checkpoint checked(const std::filesystem::path& ckpt, const Vocab& vocab) {
  auto c = load_checkpoint(ckpt);
  require_vocab_match(c, vocab);
  return c;
}

// Classifier checkpoint plus the vocabulary it was trained with.
struct Classifier {
  Vocab vocab;
  EncoderClassifier model;

  Classifier(const std::filesystem::path& ckpt, const std::optional<std::filesystem::path>& v)
      : vocab(load_vocab(vocab_beside(ckpt, v))), model(EncoderClassifier::from_checkpoint(checked(ckpt, vocab))) {}

  std::vector<std::int64_t> predict_b(const std::vector<ExplanationChoiceExample>& rows) const {
    std::vector<AssembledSequence> seqs;
    for (const auto& ex : rows) seqs.push_back(assemble_task_b(ex, ex.explanations, vocab, model.config().max_len));
    return predict(model, seqs, "B");
  }

  std::vector<std::int64_t> predict_a(const std::vector<ValidationExample>& rows) const {
    std::vector<AssembledSequence> seqs;
    for (const auto& ex : rows) seqs.push_back(assemble_task_a(ex, vocab, model.config().max_len));
    auto out = predict(model, seqs, "A");
    for (auto& x : out) ++x;  // 1 or 2, the nonsensical sentence
    return out;
  }
};

struct Generator {
  Vocab vocab;
  DecoderLM model;

  Generator(const std::filesystem::path& ckpt, const std::optional<std::filesystem::path>& v)
      : vocab(load_vocab(vocab_beside(ckpt, v))), model(DecoderLM::from_checkpoint(checked(ckpt, vocab))) {}

  std::string generate(const std::string& false_sent, const DecodeConfig& cfg) const {
    return generate_explanation(model, false_sent, vocab, cfg);
  }
};

}  // namespace

PYBIND11_MODULE(_erp, m) {
  m.doc() = "Explain-then-predict commonsense validation: tokenizer, data, BLEU and model inference";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<ManifestError>(m, "ManifestError", PyExc_RuntimeError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<SequenceLengthError>(m, "SequenceLengthError", PyExc_ValueError);

  m.attr("SPECIAL_TOKENS") = std::vector<std::string>(kSpecialTokens.begin(), kSpecialTokens.end());

  // tokenizer
  py::class_<Vocab>(m, "Vocab")
      .def_static("from_tokens", &Vocab::from_tokens, py::arg("tokens"))
      .def_static("load", &load_vocab, py::arg("path"))
      .def("save", [](const Vocab& v, const std::filesystem::path& p) { save_vocab(p, v); }, py::arg("path"))
      .def("__len__", &Vocab::size)
      .def("token", &Vocab::token, py::arg("id"))
      .def("find", &Vocab::find, py::arg("token"))
      .def("is_special", &Vocab::is_special, py::arg("id"))
      .def_property_readonly("tokens", &Vocab::tokens)
      .def("fingerprint", &Vocab::fingerprint)
      .def(py::self == py::self);

  m.def("build_vocab", &build_vocab, py::arg("corpus"), py::arg("target_size"));
  m.def("encode", [](const std::string& text, const Vocab& v) { return encode(text, v); }, py::arg("text"),
        py::arg("vocab"));
  m.def("decode", &decode, py::arg("ids"), py::arg("vocab"));
  m.def("normalize_text", [](const std::string& s) { return normalize_text(s); }, py::arg("text"));

  // data
  py::class_<ValidationExample>(m, "ValidationExample")
      .def(py::init<>())
      .def_readwrite("id", &ValidationExample::id)
      .def_readwrite("s1", &ValidationExample::s1)
      .def_readwrite("s2", &ValidationExample::s2)
      .def_readwrite("label", &ValidationExample::label);
  py::class_<ExplanationChoiceExample>(m, "ExplanationChoiceExample")
      .def(py::init<>())
      .def_readwrite("id", &ExplanationChoiceExample::id)
      .def_readwrite("false_sent", &ExplanationChoiceExample::false_sent)
      .def_readwrite("options", &ExplanationChoiceExample::options)
      .def_property(
          "label", [](const ExplanationChoiceExample& e) { return std::string(1, e.label); },
          [](ExplanationChoiceExample& e, const std::string& s) {
            if (s.size() != 1) throw ConfigError("label must be one letter, got '" + s + "'");
            label_index(s[0]);
            e.label = s[0];
          })
      .def_readwrite("explanations", &ExplanationChoiceExample::explanations);
  py::class_<GenerationExample>(m, "GenerationExample")
      .def(py::init<>())
      .def_readwrite("id", &GenerationExample::id)
      .def_readwrite("false_sent", &GenerationExample::false_sent)
      .def_readwrite("references", &GenerationExample::references);

  m.def("load_task_a", &load_task_a, py::arg("path"));
  m.def("load_task_b", &load_task_b, py::arg("path"));
  m.def("load_task_c", &load_task_c, py::arg("path"));

  py::class_<AssembledSequence>(m, "AssembledSequence")
      .def_readonly("tokens", &AssembledSequence::tokens)
      .def_readonly("segments", &AssembledSequence::segments)
      .def_readonly("label", &AssembledSequence::label);
  py::class_<LmSequence>(m, "LmSequence")
      .def_readonly("tokens", &LmSequence::tokens)
      .def_readonly("loss_mask", &LmSequence::loss_mask);

  m.def("assemble_task_a", &assemble_task_a, py::arg("example"), py::arg("vocab"), py::arg("max_len"));
  m.def("assemble_task_b", &assemble_task_b, py::arg("example"), py::arg("injected"), py::arg("vocab"),
        py::arg("max_len"));
  m.def(
      "assemble_task_c",
      [](const GenerationExample& ex, bool train, const Vocab& v) {
        return assemble_task_c(ex, train ? LmMode::kTrain : LmMode::kTest, v);
      },
      py::arg("example"), py::arg("train"), py::arg("vocab"));

  // schedule
  m.def(
      "lr_at",
      [](std::uint64_t step, double base_lr, double warmup_fraction, std::uint64_t total_steps) {
        return lr_at(step, ScheduleConfig{base_lr, warmup_fraction, total_steps});
      },
      py::arg("step"), py::arg("base_lr") = 5e-5, py::arg("warmup_fraction") = 0.1, py::arg("total_steps"));

  // BLEU
  py::class_<BleuReport>(m, "BleuReport")
      .def_readonly("corpus_bleu", &BleuReport::corpus_bleu)
      .def_readonly("sentence_bleu", &BleuReport::sentence_bleu)
      .def_readonly("precisions", &BleuReport::precisions)
      .def_readonly("orders_used", &BleuReport::orders_used)
      .def_readonly("brevity_penalty", &BleuReport::brevity_penalty)
      .def_readonly("candidate_length", &BleuReport::candidate_length)
      .def_readonly("reference_length", &BleuReport::reference_length);
  m.def("bleu", &bleu, py::arg("candidates"), py::arg("references"));
  m.def("bleu_tokenize", [](const std::string& s) { return bleu_tokenize(s); }, py::arg("text"));

  // inference
  py::class_<DecodeConfig>(m, "DecodeConfig")
      .def(py::init([](const std::string& strategy, std::size_t k, std::size_t max_new_tokens, std::uint64_t seed) {
             DecodeConfig c;
             if (strategy == "greedy") {
               c.strategy = DecodeStrategy::kGreedy;
             } else if (strategy == "top_k") {
               c.strategy = DecodeStrategy::kTopK;
             } else {
               throw ConfigError("unknown decode strategy '" + strategy + "'");
             }
             c.k = k;
             c.max_new_tokens = max_new_tokens;
             c.seed = seed;
             c.validate();
             return c;
           }),
           py::arg("strategy") = "greedy", py::arg("k") = 5, py::arg("max_new_tokens") = 24, py::arg("seed") = 13)
      .def_readonly("k", &DecodeConfig::k)
      .def_readonly("max_new_tokens", &DecodeConfig::max_new_tokens)
      .def_readonly("seed", &DecodeConfig::seed);

  m.def(
      "checkpoint_kind", [](const std::filesystem::path& p) { return checkpoint_kind(load_checkpoint(p)); },
      py::arg("path"));

  py::class_<Classifier>(m, "Classifier")
      .def(py::init<const std::filesystem::path&, const std::optional<std::filesystem::path>&>(),
           py::arg("checkpoint"), py::arg("vocab") = py::none())
      .def_property_readonly("vocab", [](const Classifier& c) { return c.vocab; })
      .def(
          "predict_b",
          [](const Classifier& c, const std::vector<ExplanationChoiceExample>& rows) {
            std::vector<std::string> out;
            for (auto i : c.predict_b(rows)) out.emplace_back(1, label_letter(i));
            return out;
          },
          py::arg("examples"))
      .def("predict_a", &Classifier::predict_a, py::arg("examples"));

  py::class_<Generator>(m, "Generator")
      .def(py::init<const std::filesystem::path&, const std::optional<std::filesystem::path>&>(),
           py::arg("checkpoint"), py::arg("vocab") = py::none())
      .def_property_readonly("vocab", [](const Generator& g) { return g.vocab; })
      .def("generate", &Generator::generate, py::arg("false_sent"), py::arg("config") = DecodeConfig{});
}
