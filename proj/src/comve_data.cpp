#include "erp/comve_data.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "erp/errors.hpp"

namespace erp {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

Subtask parse_subtask(std::string_view s) {
  if (s == "A" || s == "a") return Subtask::kA;
  if (s == "B" || s == "b") return Subtask::kB;
  if (s == "C" || s == "c") return Subtask::kC;
  throw ConfigError("unknown subtask '" + std::string(s) + "' (expected A, B or C)");
}

std::string to_string(Subtask t) {
  switch (t) {
    case Subtask::kA: return "A";
    case Subtask::kB: return "B";
    case Subtask::kC: return "C";
  }
  return "?";
}

int label_index(char letter) {
  if (letter < 'A' || letter > 'C') throw IndexError(std::string("label letter '") + letter + "' not in A-C");
  return letter - 'A';
}

char label_letter(std::int64_t index) {
  if (index < 0 || index > 2) throw IndexError("label index " + std::to_string(index) + " not in [0,3)");
  return static_cast<char>('A' + index);
}

// ---- JSONL parsing -----------------------------------------------------------------

namespace {

template <typename Fn>
auto parse_lines(std::istream& in, Fn&& fn) {
  using T = decltype(fn(std::declval<const json&>(), std::size_t{}));
  std::vector<T> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(no, "<line>", std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(no, "<line>", "expected a JSON object");
    out.push_back(fn(j, no));
  }
  return out;
}

std::string get_id(const json& j, std::size_t no) {
  if (!j.contains("id")) throw ParseError(no, "id", "missing");
  const auto& v = j["id"];
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw ParseError(no, "id", "must be a string or integer");
}

std::string get_text(const json& j, const char* field, std::size_t no, bool allow_empty = false) {
  if (!j.contains(field)) throw ParseError(no, field, "missing");
  if (!j[field].is_string()) throw ParseError(no, field, "must be a string");
  auto s = j[field].get<std::string>();
  if (!allow_empty && s.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw ParseError(no, field, "must be non-empty");
  }
  return s;
}

std::vector<std::string> get_texts(const json& j, const char* field, std::size_t no, std::size_t min_n,
                                   std::size_t max_n) {
  if (!j.contains(field)) {
    if (min_n == 0) return {};
    throw ParseError(no, field, "missing");
  }
  const auto& a = j[field];
  if (!a.is_array()) throw ParseError(no, field, "must be an array");
  if (a.size() < min_n || a.size() > max_n) {
    throw ParseError(no, field,
                     min_n == max_n ? "must hold exactly " + std::to_string(min_n) + " entries"
                                    : "must hold " + std::to_string(min_n) + "-" + std::to_string(max_n) + " entries");
  }
  std::vector<std::string> out;
  for (const auto& v : a) {
    if (!v.is_string() || v.get<std::string>().find_first_not_of(" \t\r\n") == std::string::npos) {
      throw ParseError(no, field, "entries must be non-empty strings");
    }
    out.push_back(v.get<std::string>());
  }
  return out;
}

template <typename T, typename Parse>
std::vector<T> load_file(const std::filesystem::path& path, Parse&& parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse(in);
}

}  // namespace

std::vector<ValidationExample> parse_task_a(std::istream& in) {
  return parse_lines(in, [](const json& j, std::size_t no) {
    ValidationExample ex;
    ex.id = get_id(j, no);
    ex.s1 = get_text(j, "s1", no);
    ex.s2 = get_text(j, "s2", no);
    if (!j.contains("label") || !j["label"].is_number_integer()) throw ParseError(no, "label", "must be the integer 1 or 2");
    const auto label = j["label"].get<long long>();
    if (label != 1 && label != 2) throw ParseError(no, "label", "must be 1 or 2, got " + std::to_string(label));
    ex.label = static_cast<int>(label);
    return ex;
  });
}

std::vector<ExplanationChoiceExample> parse_task_b(std::istream& in) {
  return parse_lines(in, [](const json& j, std::size_t no) {
    ExplanationChoiceExample ex;
    ex.id = get_id(j, no);
    ex.false_sent = get_text(j, "false_sent", no);
    const auto opts = get_texts(j, "options", no, 3, 3);
    std::copy(opts.begin(), opts.end(), ex.options.begin());
    const std::string label = j.contains("label") && j["label"].is_string() ? j["label"].get<std::string>() : "";
    if (label != "A" && label != "B" && label != "C") throw ParseError(no, "label", "must be \"A\", \"B\" or \"C\"");
    ex.label = label[0];
    ex.explanations = get_texts(j, "explanations", no, 0, 3);
    return ex;
  });
}

std::vector<GenerationExample> parse_task_c(std::istream& in) {
  return parse_lines(in, [](const json& j, std::size_t no) {
    GenerationExample ex;
    ex.id = get_id(j, no);
    ex.false_sent = get_text(j, "false_sent", no);
    const auto refs = get_texts(j, "references", no, 3, 3);
    std::copy(refs.begin(), refs.end(), ex.references.begin());
    return ex;
  });
}

std::vector<AuxiliaryExample> parse_auxiliary(std::istream& in, std::size_t arity) {
  return parse_lines(in, [arity](const json& j, std::size_t no) {
    AuxiliaryExample ex;
    ex.id = get_id(j, no);
    ex.text = get_text(j, "text", no);
    if (j.contains("text_pair")) ex.text_pair = get_text(j, "text_pair", no);
    if (!j.contains("label") || !j["label"].is_number_integer()) throw ParseError(no, "label", "must be an integer");
    ex.label = j["label"].get<std::int64_t>();
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= arity) {
      throw ParseError(no, "label", "must lie in [0," + std::to_string(arity) + ")");
    }
    return ex;
  });
}

std::vector<GeneratedExplanation> parse_generated(std::istream& in) {
  return parse_lines(in, [](const json& j, std::size_t no) {
    GeneratedExplanation g;
    g.id = get_id(j, no);
    g.false_sent = get_text(j, "false_sent", no);
    g.explanation = get_text(j, "explanation", no, true);
    return g;
  });
}

std::vector<ValidationExample> load_task_a(const std::filesystem::path& p) {
  return load_file<ValidationExample>(p, [](std::istream& in) { return parse_task_a(in); });
}
std::vector<ExplanationChoiceExample> load_task_b(const std::filesystem::path& p) {
  return load_file<ExplanationChoiceExample>(p, [](std::istream& in) { return parse_task_b(in); });
}
std::vector<GenerationExample> load_task_c(const std::filesystem::path& p) {
  return load_file<GenerationExample>(p, [](std::istream& in) { return parse_task_c(in); });
}
std::vector<AuxiliaryExample> load_auxiliary(const std::filesystem::path& p, std::size_t arity) {
  return load_file<AuxiliaryExample>(p, [arity](std::istream& in) { return parse_auxiliary(in, arity); });
}
std::vector<GeneratedExplanation> load_generated(const std::filesystem::path& p) {
  return load_file<GeneratedExplanation>(p, [](std::istream& in) { return parse_generated(in); });
}

std::string to_jsonl(const ValidationExample& ex) {
  return ojson{{"id", ex.id}, {"s1", ex.s1}, {"s2", ex.s2}, {"label", ex.label}}.dump();
}

std::string to_jsonl(const ExplanationChoiceExample& ex) {
  return ojson{{"id", ex.id},
               {"false_sent", ex.false_sent},
               {"options", ex.options},
               {"label", std::string(1, ex.label)},
               {"explanations", ex.explanations}}
      .dump();
}

std::string to_jsonl(const GenerationExample& ex) {
  return ojson{{"id", ex.id}, {"false_sent", ex.false_sent}, {"references", ex.references}}.dump();
}

std::string to_jsonl(const GeneratedExplanation& ex) {
  return ojson{{"id", ex.id}, {"false_sent", ex.false_sent}, {"explanation", ex.explanation}}.dump();
}

// ---- CSV -----------------------------------------------------------------------------

std::vector<std::vector<std::string>> parse_csv(std::istream& in) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    row.clear();
  };
  char c;
  while (in.get(c)) {
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n') {
      end_row();
    } else if (c == '\r') {
      if (in.peek() == '\n') in.get(c);
      end_row();
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) throw ParseError(rows.size() + 1, "<csv>", "unterminated quoted field");
  if (field_started || !row.empty()) end_row();
  // Strip a UTF-8 byte-order mark.
  if (!rows.empty() && !rows[0].empty() && rows[0][0].rfind("\xEF\xBB\xBF", 0) == 0) rows[0][0].erase(0, 3);
  return rows;
}

namespace {

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_csv(in);
}

// Header row → column index by lowercased name.
struct Table {
  std::map<std::string, std::size_t> columns;
  std::vector<std::vector<std::string>> rows;

  const std::string& cell(std::size_t r, const std::string& name) const {
    auto it = columns.find(name);
    if (it == columns.end()) throw ParseError(1, name, "column missing from CSV header");
    if (it->second >= rows[r].size()) throw ParseError(r + 2, name, "row is missing this column");
    return rows[r][it->second];
  }
  bool has(const std::string& name) const { return columns.count(name) > 0; }
};

Table read_table(const std::filesystem::path& path) {
  auto all = read_csv(path);
  Table t;
  if (all.empty()) return t;
  for (std::size_t i = 0; i < all[0].size(); ++i) t.columns[lower(all[0][i])] = i;
  t.rows.assign(all.begin() + 1, all.end());
  return t;
}

// Headerless id-keyed side files (answers, references). A leading header
// row is tolerated when its first cell is literally "id".
std::map<std::string, std::vector<std::string>> read_keyed(const std::filesystem::path& path,
                                                           std::size_t min_cols) {
  std::map<std::string, std::vector<std::string>> out;
  if (path.empty()) return out;
  const auto rows = read_csv(path);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i == 0 && !rows[i].empty() && lower(rows[i][0]) == "id") continue;
    if (rows[i].size() < min_cols) {
      throw ParseError(i + 1, path.filename().string(), "expected at least " + std::to_string(min_cols) + " columns");
    }
    out[rows[i][0]] = std::vector<std::string>(rows[i].begin() + 1, rows[i].end());
  }
  return out;
}

std::string label_cell(const Table& t, std::size_t r, const std::map<std::string, std::vector<std::string>>& answers,
                       const std::string& id) {
  if (t.has("label")) return t.cell(r, "label");
  auto it = answers.find(id);
  if (it == answers.end()) throw ParseError(r + 2, "label", "no label for id '" + id + "'");
  return it->second.at(0);
}

}  // namespace

std::vector<std::string> convert_csv(Subtask task, const CsvSources& src) {
  const Table t = read_table(src.data);
  std::vector<std::string> out;
  switch (task) {
    case Subtask::kA: {
      const auto answers = read_keyed(src.answers, 2);
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        ValidationExample ex;
        ex.id = t.cell(r, "id");
        ex.s1 = t.cell(r, "sent0");
        ex.s2 = t.cell(r, "sent1");
        const std::string label = label_cell(t, r, answers, ex.id);
        // Competition labels index the nonsensical statement from 0.
        if (label != "0" && label != "1") throw ParseError(r + 2, "label", "expected 0 or 1, got '" + label + "'");
        ex.label = label == "0" ? 1 : 2;
        out.push_back(to_jsonl(ex));
      }
      break;
    }
    case Subtask::kB: {
      const auto answers = read_keyed(src.answers, 2);
      const auto refs = read_keyed(src.explanations, 4);
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        ExplanationChoiceExample ex;
        ex.id = t.cell(r, "id");
        ex.false_sent = t.cell(r, "falsesent");
        ex.options = {t.cell(r, "optiona"), t.cell(r, "optionb"), t.cell(r, "optionc")};
        const std::string label = label_cell(t, r, answers, ex.id);
        if (label != "A" && label != "B" && label != "C") {
          throw ParseError(r + 2, "label", "expected A, B or C, got '" + label + "'");
        }
        ex.label = label[0];
        if (auto it = refs.find(ex.id); it != refs.end()) {
          ex.explanations.assign(it->second.begin(), it->second.begin() + 3);
        }
        out.push_back(to_jsonl(ex));
      }
      break;
    }
    case Subtask::kC: {
      const auto refs = read_keyed(src.answers, 4);
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        GenerationExample ex;
        ex.id = t.cell(r, "id");
        ex.false_sent = t.cell(r, "falsesent");
        auto it = refs.find(ex.id);
        if (it == refs.end()) throw ParseError(r + 2, "references", "no references for id '" + ex.id + "'");
        std::copy_n(it->second.begin(), 3, ex.references.begin());
        out.push_back(to_jsonl(ex));
      }
      break;
    }
  }
  return out;
}

// ---- assembly -------------------------------------------------------------------------

namespace {

void append(TokenIds& dst, const TokenIds& src) { dst.insert(dst.end(), src.begin(), src.end()); }

AssembledSequence pair_sequence(TokenIds a, TokenIds b, std::size_t max_len, const char* what) {
  // Longest-first truncation; every sentence keeps at least one token.
  while (a.size() + b.size() + 3 > max_len) {
    TokenIds& longer = a.size() >= b.size() ? a : b;
    if (longer.size() <= 1) {
      throw SequenceLengthError(std::string(what) + ": pair does not fit in " + std::to_string(max_len) + " tokens");
    }
    longer.pop_back();
  }
  AssembledSequence seq;
  seq.tokens.push_back(id_of(Special::kCls));
  append(seq.tokens, a);
  seq.tokens.push_back(id_of(Special::kSep));
  seq.segments.assign(seq.tokens.size(), 0);
  append(seq.tokens, b);
  seq.tokens.push_back(id_of(Special::kSep));
  seq.segments.resize(seq.tokens.size(), 1);
  return seq;
}

}  // namespace

AssembledSequence assemble_task_a(const ValidationExample& ex, const Vocab& vocab, std::size_t max_len) {
  if (ex.label != 1 && ex.label != 2) throw IndexError("task A label must be 1 or 2");
  auto seq = pair_sequence(encode(ex.s1, vocab), encode(ex.s2, vocab), max_len, "task A");
  seq.label = ex.label - 1;
  return seq;
}

AssembledSequence assemble_auxiliary(const AuxiliaryExample& ex, const Vocab& vocab, std::size_t max_len) {
  AssembledSequence seq;
  if (ex.text_pair.empty()) {
    TokenIds a = encode(ex.text, vocab);
    if (a.size() + 2 > max_len) a.resize(max_len >= 3 ? max_len - 2 : 0);
    if (a.empty()) throw SequenceLengthError("auxiliary: text does not fit in " + std::to_string(max_len) + " tokens");
    seq.tokens.push_back(id_of(Special::kCls));
    append(seq.tokens, a);
    seq.tokens.push_back(id_of(Special::kSep));
    seq.segments.assign(seq.tokens.size(), 0);
  } else {
    seq = pair_sequence(encode(ex.text, vocab), encode(ex.text_pair, vocab), max_len, "auxiliary");
  }
  seq.label = ex.label;
  return seq;
}

AssembledSequence assemble_task_b(const ExplanationChoiceExample& ex,
                                  const std::vector<std::string>& injected, const Vocab& vocab,
                                  std::size_t max_len) {
  const TokenIds sent = encode(ex.false_sent, vocab);
  std::array<TokenIds, 3> opts;
  for (std::size_t i = 0; i < 3; ++i) opts[i] = encode(ex.options[i], vocab);
  std::vector<TokenIds> exps;
  for (const auto& e : injected) exps.push_back(encode(e, vocab));

  auto length = [&] {
    std::size_t n = 1 + sent.size() + 1;  // [CLS] s ... [SEP]
    for (const auto& o : opts) n += 1 + o.size();
    for (const auto& e : exps) n += 1 + e.size();
    return n;
  };
  // Explanations go first, then option tails; the false sentence is never cut.
  while (length() > max_len && !exps.empty()) exps.pop_back();
  while (length() > max_len) {
    auto longest = std::max_element(opts.begin(), opts.end(),
                                     [](const TokenIds& a, const TokenIds& b) { return a.size() < b.size(); });
    if (longest->size() <= 1) {
      throw SequenceLengthError("task B: example '" + ex.id + "' does not fit in " + std::to_string(max_len) + " tokens");
    }
    longest->pop_back();
  }

  AssembledSequence seq;
  seq.tokens.push_back(id_of(Special::kCls));
  append(seq.tokens, sent);
  seq.segments.assign(seq.tokens.size(), 0);
  for (const auto& o : opts) {
    seq.tokens.push_back(id_of(Special::kOption));
    append(seq.tokens, o);
  }
  for (const auto& e : exps) {
    seq.tokens.push_back(id_of(Special::kExp));
    append(seq.tokens, e);
  }
  seq.tokens.push_back(id_of(Special::kSep));
  seq.segments.resize(seq.tokens.size(), 1);
  seq.label = label_index(ex.label);
  return seq;
}

LmSequence generation_prompt(std::string_view false_sent, const Vocab& vocab) {
  LmSequence seq;
  seq.tokens.push_back(id_of(Special::kBos));
  append(seq.tokens, encode(false_sent, vocab));
  seq.tokens.push_back(id_of(Special::kCuz));
  seq.loss_mask.assign(seq.tokens.size(), 0.0);
  return seq;
}

LmSequence assemble_task_c(const GenerationExample& ex, LmMode mode, const Vocab& vocab) {
  for (const auto& r : ex.references) {
    if (r.find_first_not_of(" \t\r\n") == std::string::npos) throw ContractError("task C example '" + ex.id + "' has an empty reference");
  }
  LmSequence seq = generation_prompt(ex.false_sent, vocab);
  if (mode == LmMode::kTest) return seq;
  for (std::size_t i = 0; i < ex.references.size(); ++i) {
    if (i > 0) seq.tokens.push_back(id_of(Special::kExp));
    append(seq.tokens, encode(ex.references[i], vocab));
  }
  seq.tokens.push_back(id_of(Special::kEos));
  seq.loss_mask.resize(seq.tokens.size(), 1.0);
  return seq;
}

EncodedBatch collate(std::span<const AssembledSequence> rows, std::string task_tag) {
  if (rows.empty()) throw ContractError("collate: empty batch");
  EncodedBatch b;
  b.batch = rows.size();
  for (const auto& r : rows) b.length = std::max(b.length, r.tokens.size());
  b.token_ids.assign(b.batch * b.length, id_of(Special::kPad));
  b.segment_ids.assign(b.batch * b.length, 0);
  b.attention_mask.assign(b.batch * b.length, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.segments.size() != r.tokens.size()) throw DimensionError("collate: segment/token length mismatch");
    for (std::size_t t = 0; t < r.tokens.size(); ++t) {
      b.token_ids[i * b.length + t] = r.tokens[t];
      b.segment_ids[i * b.length + t] = r.segments[t];
      b.attention_mask[i * b.length + t] = 1;
    }
  }
  b.task_tag = std::move(task_tag);
  return b;
}

// ---- injection -------------------------------------------------------------------------

void InjectionPolicy::validate() const {
  if (!(inject_probability >= 0.0 && inject_probability <= 1.0)) {
    throw ConfigError("inject_probability must lie in [0,1]");
  }
}

std::vector<std::string> sample_injection(const ExplanationChoiceExample& ex,
                                          const InjectionPolicy& policy, Rng& rng) {
  policy.validate();
  if (!rng.bernoulli(policy.inject_probability)) return {};
  const std::size_t n = 1 + rng.below(3);
  std::vector<std::size_t> idx(ex.explanations.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // Partial Fisher-Yates: the first n slots are a uniform draw without replacement.
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(n, idx.size()); ++i) {
    const std::size_t j = i + rng.below(idx.size() - i);
    std::swap(idx[i], idx[j]);
    out.push_back(ex.explanations[idx[i]]);
  }
  return out;
}

}  // namespace erp
