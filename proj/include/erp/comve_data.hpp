#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "erp/rng.hpp"
#include "erp/tokenizer.hpp"
#include "erp/transformer.hpp"

namespace erp {

enum class Subtask { kA, kB, kC };

Subtask parse_subtask(std::string_view s);
std::string to_string(Subtask t);

// Two near-identical statements; label (1 or 2) marks the one that is
// against common sense.
struct ValidationExample {
  std::string id;
  std::string s1;
  std::string s2;
  int label = 1;
  bool operator==(const ValidationExample&) const = default;
};

// A false statement, three candidate reasons, and the correct letter.
// explanations holds 0-3 reference explanations (or one generated one).
struct ExplanationChoiceExample {
  std::string id;
  std::string false_sent;
  std::array<std::string, 3> options;
  char label = 'A';
  std::vector<std::string> explanations;
  bool operator==(const ExplanationChoiceExample&) const = default;
};

struct GenerationExample {
  std::string id;
  std::string false_sent;
  std::array<std::string, 3> references;
  bool operator==(const GenerationExample&) const = default;
};

// Auxiliary classification data from other corpora: {id, text, text_pair?, label}
// with label in [0, arity).
struct AuxiliaryExample {
  std::string id;
  std::string text;
  std::string text_pair;
  std::int64_t label = 0;
  bool operator==(const AuxiliaryExample&) const = default;
};

// One line of a generated-explanation file.
struct GeneratedExplanation {
  std::string id;
  std::string false_sent;
  std::string explanation;
  bool operator==(const GeneratedExplanation&) const = default;
};

// ---- JSONL ---------------------------------------------------------------------
// Blank lines are skipped. Violations throw ParseError with the 1-based line.

std::vector<ValidationExample> parse_task_a(std::istream& in);
std::vector<ExplanationChoiceExample> parse_task_b(std::istream& in);
std::vector<GenerationExample> parse_task_c(std::istream& in);
std::vector<AuxiliaryExample> parse_auxiliary(std::istream& in, std::size_t arity);
std::vector<GeneratedExplanation> parse_generated(std::istream& in);

std::vector<ValidationExample> load_task_a(const std::filesystem::path& path);
std::vector<ExplanationChoiceExample> load_task_b(const std::filesystem::path& path);
std::vector<GenerationExample> load_task_c(const std::filesystem::path& path);
std::vector<AuxiliaryExample> load_auxiliary(const std::filesystem::path& path, std::size_t arity);
std::vector<GeneratedExplanation> load_generated(const std::filesystem::path& path);

std::string to_jsonl(const ValidationExample& ex);
std::string to_jsonl(const ExplanationChoiceExample& ex);
std::string to_jsonl(const GenerationExample& ex);
std::string to_jsonl(const GeneratedExplanation& ex);

// ---- CSV conversion ------------------------------------------------------------

// RFC 4180 records (quoted fields, doubled quotes, embedded newlines).
std::vector<std::vector<std::string>> parse_csv(std::istream& in);

struct CsvSources {
  std::filesystem::path data;          // A: id,sent0,sent1[,label]  B: id,FalseSent,OptionA..C[,label]  C: id,FalseSent
  std::filesystem::path answers;       // optional id,label rows (A: 0|1, B: A|B|C) or C references id,r1,r2,r3
  std::filesystem::path explanations;  // optional, B only: id,r1,r2,r3
};

// Returns the converted records, one JSONL line each.
std::vector<std::string> convert_csv(Subtask task, const CsvSources& sources);

// ---- assembly --------------------------------------------------------------------

struct AssembledSequence {
  TokenIds tokens;
  std::vector<TokenId> segments;
  std::int64_t label = 0;  // class index
};

AssembledSequence assemble_task_a(const ValidationExample& ex, const Vocab& vocab, std::size_t max_len);
AssembledSequence assemble_task_b(const ExplanationChoiceExample& ex,
                                  const std::vector<std::string>& injected, const Vocab& vocab,
                                  std::size_t max_len);
AssembledSequence assemble_auxiliary(const AuxiliaryExample& ex, const Vocab& vocab, std::size_t max_len);

enum class LmMode { kTrain, kTest };

struct LmSequence {
  TokenIds tokens;
  std::vector<double> loss_mask;  // per token; 1 where the token is a training target
};

// train: [BOS] s [CUZ] r1 [EXP] r2 [EXP] r3 [EOS], loss on tokens after [CUZ].
// test:  [BOS] s [CUZ]
LmSequence assemble_task_c(const GenerationExample& ex, LmMode mode, const Vocab& vocab);
LmSequence generation_prompt(std::string_view false_sent, const Vocab& vocab);

// Pads rows to the longest one.
EncodedBatch collate(std::span<const AssembledSequence> rows, std::string task_tag);

// ---- explanation injection --------------------------------------------------------

struct InjectionPolicy {
  double inject_probability = 0.3;
  void validate() const;
};

// With probability inject_probability, picks n uniform in {1,2,3} and returns
// n distinct explanations in sampled order; otherwise returns nothing.
std::vector<std::string> sample_injection(const ExplanationChoiceExample& ex,
                                          const InjectionPolicy& policy, Rng& rng);

int label_index(char letter);  // 'A' -> 0
char label_letter(std::int64_t index);

}  // namespace erp
