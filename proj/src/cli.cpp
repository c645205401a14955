#include "erp/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "erp/checkpoint.hpp"
#include "erp/errors.hpp"

namespace erp::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using ojson = nlohmann::ordered_json;

// ---- RunConfig -----------------------------------------------------------------

RunConfig::RunConfig(json flat) : flat_(std::move(flat)) {
  if (!flat_.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : flat_.items()) {
    if (v.is_object()) throw ConfigError("config key '" + k + "' must use flat dotted keys, not nested objects");
  }
}

RunConfig RunConfig::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path.string());
  try {
    return RunConfig(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

void RunConfig::set(const std::string& key, json value) { flat_[key] = std::move(value); }
bool RunConfig::has(const std::string& key) const { return flat_.contains(key) && !flat_[key].is_null(); }

namespace {

template <typename T>
T typed(const json& flat, const std::string& key, T fallback) {
  if (!flat.contains(key) || flat[key].is_null()) return fallback;
  try {
    return flat[key].get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + flat[key].dump());
  }
}

}  // namespace

std::string RunConfig::str(const std::string& key, const std::string& fallback) const {
  return typed<std::string>(flat_, key, fallback);
}
double RunConfig::num(const std::string& key, double fallback) const { return typed<double>(flat_, key, fallback); }
std::size_t RunConfig::count(const std::string& key, std::size_t fallback) const {
  if (has(key) && flat_[key].is_number_integer() && flat_[key].get<long long>() < 0) {
    throw ConfigError("config key '" + key + "' must be non-negative");
  }
  return typed<std::size_t>(flat_, key, fallback);
}
bool RunConfig::flag(const std::string& key, bool fallback) const { return typed<bool>(flat_, key, fallback); }

std::vector<std::string> RunConfig::list(const std::string& key) const {
  if (!has(key)) return {};
  if (flat_[key].is_string()) return {flat_[key].get<std::string>()};
  return typed<std::vector<std::string>>(flat_, key, {});
}

fs::path RunConfig::existing_path(const std::string& key) const {
  const std::string p = str(key);
  if (p.empty()) throw ConfigError("missing required setting '" + key + "'");
  if (!fs::exists(p)) throw ConfigError("path for '" + key + "' does not exist: " + p);
  return p;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.n_layers = count("model.n_layers", m.n_layers);
  m.n_heads = count("model.n_heads", m.n_heads);
  m.d_model = count("model.d_model", m.d_model);
  m.d_ff = count("model.d_ff", m.d_ff);
  m.max_len = count("model.max_len", m.max_len);
  m.n_segments = count("model.n_segments", m.n_segments);
  m.dropout_rate = num("model.dropout_rate", m.dropout_rate);
  m.head_dropout_rate = num("model.head_dropout_rate", m.dropout_rate);
  m.init_std = num("model.init_std", m.init_std);
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.learning_rate = num("train.learning_rate", t.learning_rate);
  t.batch_size = count("train.batch_size", t.batch_size);
  t.epochs = count("train.epochs", t.epochs);
  t.warmup_fraction = num("train.warmup_fraction", t.warmup_fraction);
  t.clip_norm = num("train.clip_norm", t.clip_norm);
  t.mixture_ratio = num("train.mixture_ratio", t.mixture_ratio);
  if (has("train.dropout_rates")) t.dropout_rates = typed<std::vector<double>>(flat_, "train.dropout_rates", {});
  t.seed = count("train.seed", t.seed);
  t.validate();
  return t;
}

InjectionPolicy RunConfig::injection_policy() const {
  InjectionPolicy p;
  p.inject_probability = num("inject.probability", p.inject_probability);
  p.validate();
  return p;
}

DecodeConfig RunConfig::decode_config() const {
  DecodeConfig d;
  const std::string strategy = str("decode.strategy", "greedy");
  if (strategy == "greedy") {
    d.strategy = DecodeStrategy::kGreedy;
  } else if (strategy == "top_k") {
    d.strategy = DecodeStrategy::kTopK;
  } else {
    throw ConfigError("decode.strategy must be 'greedy' or 'top_k'");
  }
  d.k = count("decode.k", d.k);
  d.max_new_tokens = count("decode.max_new_tokens", d.max_new_tokens);
  d.seed = count("decode.seed", count("train.seed", d.seed));
  d.validate();
  return d;
}

// ---- shared helpers --------------------------------------------------------------

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& l : lines) os << l << '\n';
}

namespace {

fs::path output_dir(const RunConfig& cfg) {
  const std::string out = cfg.str("out");
  if (out.empty()) throw ConfigError("missing required setting 'out' (--out DIR)");
  fs::create_directories(out);
  return out;
}

void echo_config(const RunConfig& cfg, const fs::path& dir) {
  std::ofstream os(dir / "config.json", std::ios::binary | std::ios::trunc);
  os << cfg.raw().dump(2) << '\n';
}

fs::path vocab_path_for(const RunConfig& cfg, const fs::path& checkpoint) {
  if (cfg.has("vocab")) return cfg.existing_path("vocab");
  const fs::path sibling = checkpoint.parent_path() / "vocab.txt";
  if (!fs::exists(sibling)) {
    throw ConfigError("no --vocab given and no vocab.txt next to " + checkpoint.string());
  }
  return sibling;
}

std::vector<std::pair<std::string, std::string>> load_false_sentences(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(no, "<line>", e.what());
    }
    if (!j.contains("id") || !(j["id"].is_string() || j["id"].is_number_integer())) throw ParseError(no, "id", "missing");
    if (!j.contains("false_sent") || !j["false_sent"].is_string()) throw ParseError(no, "false_sent", "missing");
    out.emplace_back(j["id"].is_string() ? j["id"].get<std::string>() : std::to_string(j["id"].get<long long>()),
                     j["false_sent"].get<std::string>());
  }
  return out;
}

struct AuxSpec {
  std::string task;  // "A", "B", or a generic name
  std::size_t arity = 0;
  fs::path path;
};

AuxSpec parse_aux(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("auxiliary spec '" + spec + "' must be TASK=PATH or NAME:K=PATH");
  AuxSpec a;
  std::string head = spec.substr(0, eq);
  a.path = spec.substr(eq + 1);
  if (!fs::exists(a.path)) throw ConfigError("auxiliary data path does not exist: " + a.path.string());
  if (head == "A" || head == "B") {
    a.task = head;
    a.arity = head == "A" ? 2 : 3;
  } else {
    const auto colon = head.find(':');
    if (colon == std::string::npos) throw ConfigError("generic auxiliary task '" + head + "' needs an arity (NAME:K=PATH)");
    a.task = head.substr(0, colon);
    try {
      a.arity = std::stoul(head.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad arity in auxiliary spec '" + spec + "'");
    }
    if (a.arity < 2) throw ConfigError("auxiliary arity must be at least 2");
  }
  return a;
}

std::vector<std::unique_ptr<EncoderClassifier>> load_classifiers(const std::vector<std::string>& paths,
                                                                 const Vocab& vocab) {
  std::vector<std::unique_ptr<EncoderClassifier>> models;
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw ConfigError("checkpoint does not exist: " + p);
    const Checkpoint ck = load_checkpoint(p);
    require_vocab_match(ck, vocab);
    models.push_back(std::make_unique<EncoderClassifier>(EncoderClassifier::from_checkpoint(ck)));
  }
  return models;
}

DecoderLM load_decoder(const fs::path& path, const Vocab& vocab) {
  const Checkpoint ck = load_checkpoint(path);
  require_vocab_match(ck, vocab);
  return DecoderLM::from_checkpoint(ck);
}

std::vector<std::int64_t> classify_rows(const std::vector<std::unique_ptr<EncoderClassifier>>& models,
                                        const std::vector<AssembledSequence>& rows, const std::string& task) {
  std::vector<const EncoderClassifier*> ptrs;
  for (const auto& m : models) ptrs.push_back(m.get());
  std::vector<std::int64_t> out;
  constexpr std::size_t kChunk = 32;
  for (std::size_t s = 0; s < rows.size(); s += kChunk) {
    const std::span<const AssembledSequence> chunk(rows.data() + s, std::min(kChunk, rows.size() - s));
    for (auto c : ensemble_predict(ptrs, collate(chunk, task))) out.push_back(c);
  }
  return out;
}

// ---- train ---------------------------------------------------------------------------

struct TrainingSetup {
  Vocab vocab;
  std::map<std::string, TaskData> tasks;
  std::vector<TaskHeadSpec> heads;
};

int train_generator(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const auto data = load_task_c(cfg.existing_path("data.path"));
  if (data.empty()) throw ConfigError("training data is empty");
  const TrainConfig tc = cfg.train_config();

  Vocab vocab = [&] {
    if (cfg.has("vocab")) return load_vocab(cfg.existing_path("vocab"));
    std::vector<std::string> corpus;
    for (const auto& ex : data) {
      corpus.push_back(ex.false_sent);
      for (const auto& r : ex.references) corpus.push_back(r);
    }
    return build_vocab(corpus, cfg.count("vocab.size", 4000));
  }();
  save_vocab(out / "vocab.txt", vocab);

  ModelConfig mc = cfg.model_config();
  mc.vocab_size = vocab.size();
  DecoderLM model(mc, tc.seed);
  std::vector<LmSequence> seqs;
  for (const auto& ex : data) seqs.push_back(assemble_task_c(ex, LmMode::kTrain, vocab));

  std::vector<std::string> metrics;
  fit_generator(model, seqs, tc, [&](const GeneratorEpoch& e) {
    save_checkpoint(out / ("checkpoint_epoch" + std::to_string(e.epoch) + ".ckpt"),
                    model.to_checkpoint(vocab.fingerprint()));
    metrics.push_back(ojson{{"epoch", e.epoch}, {"task", "C"}, {"mean_loss", e.mean_loss}, {"accuracy", nullptr},
                            {"lr_last", e.lr_last}}
                          .dump());
    log << "epoch " << e.epoch << " task C loss " << e.mean_loss << '\n';
  });
  save_checkpoint(out / "checkpoint_final.ckpt", model.to_checkpoint(vocab.fingerprint()));
  write_lines(out / "metrics.jsonl", metrics);
  return kOk;
}

int train_classifier(const RunConfig& cfg, Subtask task, const fs::path& out, std::ostream& log) {
  TrainConfig tc = cfg.train_config();
  tc.main_task = to_string(task);
  const ModelConfig base_mc = cfg.model_config();
  const InjectionPolicy policy = cfg.injection_policy();

  // Validate every input before any training step.
  const fs::path main_path = cfg.existing_path("data.path");
  std::vector<AuxSpec> aux;
  for (const auto& s : cfg.list("data.aux")) aux.push_back(parse_aux(s));
  const fs::path dev_path = cfg.has("data.dev") ? cfg.existing_path("data.dev") : fs::path{};

  std::vector<ValidationExample> a_main, a_dev;
  std::vector<ExplanationChoiceExample> b_main, b_dev;
  if (task == Subtask::kA) {
    a_main = load_task_a(main_path);
    if (!dev_path.empty()) a_dev = load_task_a(dev_path);
  } else {
    b_main = load_task_b(main_path);
    if (!dev_path.empty()) b_dev = load_task_b(dev_path);
  }
  if (a_main.empty() && b_main.empty()) throw ConfigError("training data is empty: " + main_path.string());

  std::map<std::string, std::vector<ValidationExample>> aux_a;
  std::map<std::string, std::vector<ExplanationChoiceExample>> aux_b;
  std::map<std::string, std::pair<std::size_t, std::vector<AuxiliaryExample>>> aux_generic;
  for (const auto& a : aux) {
    if (a.task == tc.main_task) throw ConfigError("auxiliary task '" + a.task + "' duplicates the main task");
    if (a.task == "A") {
      aux_a[a.task] = load_task_a(a.path);
    } else if (a.task == "B") {
      aux_b[a.task] = load_task_b(a.path);
    } else {
      aux_generic[a.task] = {a.arity, load_auxiliary(a.path, a.arity)};
    }
    tc.auxiliary_tasks.push_back(a.task);
  }

  // Vocabulary over all training text.
  Vocab vocab = [&] {
    if (cfg.has("vocab")) return load_vocab(cfg.existing_path("vocab"));
    std::vector<std::string> corpus;
    auto add_a = [&](const std::vector<ValidationExample>& v) {
      for (const auto& e : v) corpus.insert(corpus.end(), {e.s1, e.s2});
    };
    auto add_b = [&](const std::vector<ExplanationChoiceExample>& v) {
      for (const auto& e : v) {
        corpus.push_back(e.false_sent);
        corpus.insert(corpus.end(), e.options.begin(), e.options.end());
        corpus.insert(corpus.end(), e.explanations.begin(), e.explanations.end());
      }
    };
    add_a(a_main);
    add_b(b_main);
    for (const auto& [k, v] : aux_a) add_a(v);
    for (const auto& [k, v] : aux_b) add_b(v);
    for (const auto& [k, v] : aux_generic) {
      for (const auto& e : v.second) corpus.insert(corpus.end(), {e.text, e.text_pair});
    }
    return build_vocab(corpus, cfg.count("vocab.size", 4000));
  }();
  save_vocab(out / "vocab.txt", vocab);
  const std::size_t max_len = base_mc.max_len;

  TrainingSetup setup{vocab, {}, {}};
  auto add_task_a = [&](const std::string& name, const std::vector<ValidationExample>& train,
                        const std::vector<ValidationExample>& dev) {
    auto rows = std::make_shared<std::vector<AssembledSequence>>();
    for (const auto& e : train) rows->push_back(assemble_task_a(e, vocab, max_len));
    TaskData td{name, 2, rows->size(), [rows](std::size_t i, Rng&) { return (*rows)[i]; }, {}};
    if (dev.empty()) {
      td.eval_rows = *rows;
    } else {
      for (const auto& e : dev) td.eval_rows.push_back(assemble_task_a(e, vocab, max_len));
    }
    setup.tasks[name] = std::move(td);
    setup.heads.push_back({name, 2});
  };
  auto add_task_b = [&](const std::string& name, const std::vector<ExplanationChoiceExample>& train,
                        const std::vector<ExplanationChoiceExample>& dev) {
    auto exs = std::make_shared<std::vector<ExplanationChoiceExample>>(train);
    TaskData td{name, 3, exs->size(),
                [exs, policy, &vocab = setup.vocab, max_len](std::size_t i, Rng& rng) {
                  const auto& ex = (*exs)[i];
                  return assemble_task_b(ex, sample_injection(ex, policy, rng), vocab, max_len);
                },
                {}};
    for (const auto& e : dev.empty() ? train : dev) td.eval_rows.push_back(assemble_task_b(e, {}, vocab, max_len));
    setup.tasks[name] = std::move(td);
    setup.heads.push_back({name, 3});
  };

  if (task == Subtask::kA) add_task_a("A", a_main, a_dev);
  if (task == Subtask::kB) add_task_b("B", b_main, b_dev);
  for (const auto& [k, v] : aux_a) add_task_a(k, v, {});
  for (const auto& [k, v] : aux_b) add_task_b(k, v, {});
  for (const auto& [k, v] : aux_generic) {
    auto rows = std::make_shared<std::vector<AssembledSequence>>();
    for (const auto& e : v.second) rows->push_back(assemble_auxiliary(e, vocab, max_len));
    setup.tasks[k] = TaskData{k, v.first, rows->size(), [rows](std::size_t i, Rng&) { return (*rows)[i]; }, *rows};
    setup.heads.push_back({k, v.first});
  }

  // One model, or one per dropout rate when ensembling.
  std::vector<std::pair<fs::path, double>> members;
  if (cfg.flag("train.ensemble")) {
    for (std::size_t i = 0; i < tc.dropout_rates.size(); ++i) {
      members.emplace_back(out / ("member" + std::to_string(i)), tc.dropout_rates[i]);
    }
  } else {
    members.emplace_back(out, base_mc.head_dropout_rate);
  }

  for (std::size_t mi = 0; mi < members.size(); ++mi) {
    const auto& [dir, rate] = members[mi];
    fs::create_directories(dir);
    if (dir != out) save_vocab(dir / "vocab.txt", vocab);
    ModelConfig mc = base_mc;
    mc.vocab_size = vocab.size();
    mc.head_dropout_rate = rate;
    TrainConfig member_tc = tc;
    member_tc.seed = tc.seed + mi;
    EncoderClassifier model(mc, setup.heads, member_tc.seed);
    std::vector<std::string> metrics;
    fit(model, setup.tasks, member_tc, [&](const EpochMetrics& m) {
      save_checkpoint(dir / ("checkpoint_epoch" + std::to_string(m.epoch) + ".ckpt"),
                      model.to_checkpoint(vocab.fingerprint()));
      for (const auto& [name, tm] : m.tasks) {
        metrics.push_back(ojson{{"epoch", m.epoch}, {"task", name}, {"mean_loss", tm.mean_loss},
                                {"accuracy", tm.accuracy}, {"lr_last", m.lr_last}}
                              .dump());
        log << "epoch " << m.epoch << " task " << name << " loss " << tm.mean_loss << " acc " << tm.accuracy << '\n';
      }
    });
    save_checkpoint(dir / "checkpoint_final.ckpt", model.to_checkpoint(vocab.fingerprint()));
    write_lines(dir / "metrics.jsonl", metrics);
  }
  return kOk;
}

std::string label_string(Subtask task, std::int64_t cls) {
  return task == Subtask::kA ? std::to_string(cls + 1) : std::string(1, label_letter(cls));
}

}  // namespace

int cmd_train(const RunConfig& cfg, std::ostream& log) {
  const Subtask task = parse_subtask(cfg.str("task", "A"));
  cfg.existing_path("data.path");
  cfg.train_config();
  const fs::path out = output_dir(cfg);
  echo_config(cfg, out);
  if (task == Subtask::kC) return train_generator(cfg, out, log);
  return train_classifier(cfg, task, out, log);
}

// ---- generate -------------------------------------------------------------------------

std::vector<GeneratedExplanation> generate_for(const DecoderLM& model, const Vocab& vocab,
                                               const std::vector<std::pair<std::string, std::string>>& id_and_sentence,
                                               const DecodeConfig& cfg) {
  std::vector<GeneratedExplanation> out;
  for (const auto& [id, sent] : id_and_sentence) {
    out.push_back({id, sent, generate_explanation(model, sent, vocab, cfg)});
  }
  return out;
}

namespace {

std::vector<std::string> generated_lines(const std::vector<GeneratedExplanation>& gen) {
  std::vector<std::string> lines;
  for (const auto& g : gen) lines.push_back(to_jsonl(g));
  return lines;
}

}  // namespace

int cmd_generate(const RunConfig& cfg, std::ostream& log) {
  const fs::path data = cfg.existing_path("data.path");
  const auto ckpts = cfg.list("checkpoint");
  if (ckpts.size() != 1) throw ConfigError("generate needs exactly one decoder --checkpoint");
  if (!fs::exists(ckpts[0])) throw ConfigError("checkpoint does not exist: " + ckpts[0]);
  const DecodeConfig dc = cfg.decode_config();
  const fs::path out = output_dir(cfg);
  const Vocab vocab = load_vocab(vocab_path_for(cfg, ckpts[0]));
  const DecoderLM model = load_decoder(ckpts[0], vocab);
  const auto inputs = load_false_sentences(data);
  const auto gen = generate_for(model, vocab, inputs, dc);
  write_lines(out / "explanations.jsonl", generated_lines(gen));
  log << "wrote " << gen.size() << " explanations to " << (out / "explanations.jsonl").string() << '\n';
  return kOk;
}

// ---- eval --------------------------------------------------------------------------------

namespace {

std::map<std::string, json> load_by_id(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::map<std::string, json> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(no, "<line>", e.what());
    }
    if (!j.contains("id")) throw ParseError(no, "id", "missing");
    const std::string id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    if (!out.emplace(id, j).second) throw ParseError(no, "id", "duplicate id '" + id + "'");
  }
  return out;
}

std::int64_t predicted_class(Subtask task, const json& label, const std::string& id) {
  if (task == Subtask::kA && label.is_number_integer() && (label == 1 || label == 2)) return label.get<int>() - 1;
  if (task == Subtask::kB && label.is_string()) {
    const auto s = label.get<std::string>();
    if (s == "A" || s == "B" || s == "C") return s[0] - 'A';
  }
  throw ConfigError("prediction for id '" + id + "' has label " + label.dump() + ", which does not fit task " +
                    to_string(task));
}

}  // namespace

int cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const Subtask task = parse_subtask(cfg.str("task", "A"));
  const fs::path data = cfg.existing_path("data.path");
  const bool have_preds = cfg.has("eval.predictions");
  const auto ckpts = cfg.list("checkpoint");
  if (!have_preds && ckpts.empty()) throw ConfigError("eval needs --predictions or --checkpoint");
  const fs::path preds_path = have_preds ? cfg.existing_path("eval.predictions") : fs::path{};
  const fs::path out = output_dir(cfg);

  ojson report{{"task", to_string(task)}};
  if (task == Subtask::kC) {
    const auto gold = load_task_c(data);
    std::map<std::string, std::string> cand;
    if (have_preds) {
      for (const auto& [id, j] : load_by_id(preds_path)) {
        if (!j.contains("explanation") || !j["explanation"].is_string()) {
          throw ConfigError("prediction '" + id + "' lacks a string 'explanation' field (task C)");
        }
        cand[id] = j["explanation"].get<std::string>();
      }
    } else {
      const Vocab vocab = load_vocab(vocab_path_for(cfg, ckpts[0]));
      const DecoderLM model = load_decoder(ckpts[0], vocab);
      for (const auto& g : gold) cand[g.id] = generate_explanation(model, g.false_sent, vocab, cfg.decode_config());
    }
    std::vector<std::string> c;
    std::vector<std::vector<std::string>> refs;
    for (const auto& g : gold) {
      auto it = cand.find(g.id);
      if (it == cand.end()) throw ConfigError("no prediction for gold id '" + g.id + "'");
      c.push_back(it->second);
      refs.emplace_back(g.references.begin(), g.references.end());
      cand.erase(it);
    }
    if (!cand.empty()) throw ConfigError("prediction id '" + cand.begin()->first + "' is not in the gold data");
    const BleuReport b = bleu(c, refs);
    report["examples"] = gold.size();
    report["bleu"] = b.corpus_bleu;
    report["precisions"] = b.precisions;
    report["orders_used"] = b.orders_used;
    report["brevity_penalty"] = b.brevity_penalty;
    report["candidate_length"] = b.candidate_length;
    report["reference_length"] = b.reference_length;
  } else {
    std::vector<std::string> ids;
    std::vector<std::int64_t> gold;
    std::vector<AssembledSequence> rows;
    std::unique_ptr<Vocab> vocab;
    if (!have_preds) vocab = std::make_unique<Vocab>(load_vocab(vocab_path_for(cfg, ckpts[0])));
    const std::size_t max_len = [&]() -> std::size_t {
      if (have_preds) return 0;
      return ModelConfig::from_json(load_checkpoint(ckpts[0]).meta.at("config")).max_len;
    }();
    if (task == Subtask::kA) {
      for (const auto& e : load_task_a(data)) {
        ids.push_back(e.id);
        gold.push_back(e.label - 1);
        if (vocab) rows.push_back(assemble_task_a(e, *vocab, max_len));
      }
    } else {
      for (const auto& e : load_task_b(data)) {
        ids.push_back(e.id);
        gold.push_back(label_index(e.label));
        if (vocab) rows.push_back(assemble_task_b(e, e.explanations, *vocab, max_len));
      }
    }
    if (ids.empty()) throw ConfigError("gold data is empty: " + data.string());
    std::vector<std::int64_t> pred(ids.size());
    if (have_preds) {
      auto by_id = load_by_id(preds_path);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        auto it = by_id.find(ids[i]);
        if (it == by_id.end()) throw ConfigError("no prediction for gold id '" + ids[i] + "'");
        if (!it->second.contains("label")) throw ConfigError("prediction '" + ids[i] + "' has no label");
        pred[i] = predicted_class(task, it->second["label"], ids[i]);
        by_id.erase(it);
      }
      if (!by_id.empty()) throw ConfigError("prediction id '" + by_id.begin()->first + "' is not in the gold data");
    } else {
      pred = classify_rows(load_classifiers(ckpts, *vocab), rows, to_string(task));
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) correct += pred[i] == gold[i] ? 1 : 0;
    report["examples"] = ids.size();
    report["correct"] = correct;
    report["accuracy"] = static_cast<double>(correct) / static_cast<double>(ids.size());
  }
  const std::string text = report.dump(2);
  std::ofstream(out / "metrics.json", std::ios::binary | std::ios::trunc) << text << '\n';
  log << text << '\n';
  return kOk;
}

// ---- pipeline ----------------------------------------------------------------------------

namespace {

// Prefixes failures with the stage name and keeps the exit-code class.
template <typename Fn>
void staged(const char* stage, Fn&& fn) {
  const std::string prefix = std::string("pipeline stage '") + stage + "' failed: ";
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const ParseError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const ManifestError& e) {
    throw ManifestError(prefix + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(prefix + e.what());
  }
}

}  // namespace

int cmd_pipeline(const RunConfig& cfg, std::ostream& log) {
  const fs::path data = cfg.existing_path("data.path");
  const auto classifiers = cfg.list("checkpoint");
  if (classifiers.empty()) throw ConfigError("pipeline needs at least one classifier --checkpoint");
  for (const auto& c : classifiers) {
    if (!fs::exists(c)) throw ConfigError("checkpoint does not exist: " + c);
  }
  const bool gold = cfg.flag("pipeline.use_gold_explanations");
  const fs::path generator = gold ? fs::path{} : cfg.existing_path("generator");
  const DecodeConfig dc = cfg.decode_config();
  const fs::path out = output_dir(cfg);
  const Vocab vocab = load_vocab(vocab_path_for(cfg, classifiers[0]));
  const auto examples = load_task_b(data);

  std::vector<std::vector<std::string>> injected(examples.size());
  if (gold) {
    // Stage 2 always sees a single [EXP] block; the first reference stands in.
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (!examples[i].explanations.empty()) injected[i] = {examples[i].explanations.front()};
    }
    log << "stage 'generate' skipped: using reference explanations\n";
  } else {
    staged("generate", [&] {
      // The generator carries its own vocabulary; only text crosses stages.
      const fs::path gen_vocab_path = cfg.has("generator.vocab") ? cfg.existing_path("generator.vocab")
                                                                 : generator.parent_path() / "vocab.txt";
      if (!fs::exists(gen_vocab_path)) throw ConfigError("generator vocabulary not found: " + gen_vocab_path.string());
      const Vocab gen_vocab = load_vocab(gen_vocab_path);
      const DecoderLM model = load_decoder(generator, gen_vocab);
      std::vector<std::pair<std::string, std::string>> inputs;
      for (const auto& e : examples) inputs.emplace_back(e.id, e.false_sent);
      const auto gen = generate_for(model, gen_vocab, inputs, dc);
      write_lines(out / "explanations.jsonl", generated_lines(gen));
      for (std::size_t i = 0; i < gen.size(); ++i) injected[i] = {gen[i].explanation};
    });
    log << "stage 'generate': " << examples.size() << " explanations\n";
  }

  staged("classify", [&] {
    const auto models = load_classifiers(classifiers, vocab);
    const std::size_t max_len = models[0]->config().max_len;
    std::vector<AssembledSequence> rows;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      // An empty generation leaves nothing to inject.
      std::vector<std::string> exp;
      for (const auto& e : injected[i]) {
        if (e.find_first_not_of(" \t") != std::string::npos) exp.push_back(e);
      }
      rows.push_back(assemble_task_b(examples[i], exp, vocab, max_len));
    }
    std::vector<std::string> lines;
    if (!rows.empty()) {
      const auto pred = classify_rows(models, rows, "B");
      for (std::size_t i = 0; i < examples.size(); ++i) {
        lines.push_back(ojson{{"id", examples[i].id}, {"label", label_string(Subtask::kB, pred[i])}}.dump());
      }
    }
    write_lines(out / "predictions.jsonl", lines);
  });
  log << "stage 'classify': " << examples.size() << " predictions\n";
  return kOk;
}

// ---- convert ----------------------------------------------------------------------------

int cmd_convert(const RunConfig& cfg, std::ostream& log) {
  const Subtask task = parse_subtask(cfg.str("task", "A"));
  CsvSources src;
  src.data = cfg.existing_path("data.path");
  if (cfg.has("convert.answers")) src.answers = cfg.existing_path("convert.answers");
  if (cfg.has("convert.explanations")) src.explanations = cfg.existing_path("convert.explanations");
  if (task == Subtask::kC && src.answers.empty()) throw ConfigError("task C conversion needs --answers (references CSV)");
  const std::string out = cfg.str("out");
  if (out.empty()) throw ConfigError("missing required setting 'out' (output JSONL path)");
  const auto lines = convert_csv(task, src);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  write_lines(out, lines);
  log << "converted " << lines.size() << " records to " << out << '\n';
  return kOk;
}

// ---- entry point --------------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Explain, reason and predict: commonsense validation and explanation"};
  app.require_subcommand(1);

  std::string config_path, data, task, out_dir, vocab, generator, predictions, answers, explanations, dev;
  std::vector<std::string> checkpoints, aux;
  std::uint64_t seed = 0;
  double inject = 0.0, mixture = 0.0, lr = 0.0;
  std::size_t epochs = 0, batch = 0;
  bool use_gold = false, ensemble = false;

  auto common = [&](CLI::App* sc) {
    sc->add_option("--config", config_path, "JSON config with flat dotted keys");
    sc->add_option("--data", data, "input data file");
    sc->add_option("--task", task, "subtask: A, B or C");
    sc->add_option("--out", out_dir, "output directory (convert: output file)");
    sc->add_option("--seed", seed, "random seed (default 13)");
    sc->add_option("--vocab", vocab, "vocabulary file");
  };
  auto* train = app.add_subcommand("train", "train a classifier (A/B) or the explanation generator (C)");
  auto* generate = app.add_subcommand("generate", "generate explanations for false statements");
  auto* eval = app.add_subcommand("eval", "score predictions or a checkpoint");
  auto* pipeline = app.add_subcommand("pipeline", "generate explanations, then classify subtask B with them");
  auto* convert = app.add_subcommand("convert", "convert competition CSV files to JSONL");
  for (auto* sc : {train, generate, eval, pipeline, convert}) common(sc);
  for (auto* sc : {generate, eval, pipeline}) sc->add_option("--checkpoint", checkpoints, "model checkpoint (repeat to ensemble)");
  train->add_option("--aux", aux, "auxiliary data: A=PATH, B=PATH or NAME:K=PATH");
  train->add_option("--dev", dev, "development set for per-epoch accuracy");
  train->add_option("--inject-probability", inject, "explanation injection probability");
  train->add_option("--mixture-ratio", mixture, "auxiliary examples per main example");
  train->add_option("--epochs", epochs, "training epochs");
  train->add_option("--batch-size", batch, "batch size");
  train->add_option("--lr", lr, "peak learning rate");
  train->add_flag("--ensemble", ensemble, "train one model per dropout rate");
  pipeline->add_option("--generator", generator, "decoder checkpoint");
  pipeline->add_flag("--use-gold-explanations", use_gold, "inject reference explanations instead of generating");
  eval->add_option("--predictions", predictions, "predictions JSONL");
  convert->add_option("--answers", answers, "labels CSV (A/B) or references CSV (C)");
  convert->add_option("--explanations", explanations, "subtask B: references CSV to attach as explanations");

  std::vector<std::string> argv_store{"erp"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigFailure;
  }

  CLI::App* sc = app.get_subcommands().front();
  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
    auto given = [&](const char* name) { return sc->count(name) > 0; };
    if (given("--data")) cfg.set("data.path", data);
    if (given("--task")) cfg.set("task", task);
    if (given("--out")) cfg.set("out", out_dir);
    if (given("--vocab")) cfg.set("vocab", vocab);
    if (given("--seed")) cfg.set("train.seed", seed);
    if (sc == train) {
      if (given("--aux")) cfg.set("data.aux", aux);
      if (given("--dev")) cfg.set("data.dev", dev);
      if (given("--inject-probability")) cfg.set("inject.probability", inject);
      if (given("--mixture-ratio")) cfg.set("train.mixture_ratio", mixture);
      if (given("--epochs")) cfg.set("train.epochs", epochs);
      if (given("--batch-size")) cfg.set("train.batch_size", batch);
      if (given("--lr")) cfg.set("train.learning_rate", lr);
      if (ensemble) cfg.set("train.ensemble", true);
    }
    if (sc != train && sc != convert && given("--checkpoint")) cfg.set("checkpoint", checkpoints);
    if (sc == pipeline) {
      if (given("--generator")) cfg.set("generator", generator);
      if (use_gold) cfg.set("pipeline.use_gold_explanations", true);
    }
    if (sc == eval && given("--predictions")) cfg.set("eval.predictions", predictions);
    if (sc == convert) {
      if (given("--answers")) cfg.set("convert.answers", answers);
      if (given("--explanations")) cfg.set("convert.explanations", explanations);
    }

    if (sc == train) return cmd_train(cfg, out);
    if (sc == generate) return cmd_generate(cfg, out);
    if (sc == eval) return cmd_eval(cfg, out);
    if (sc == pipeline) return cmd_pipeline(cfg, out);
    return cmd_convert(cfg, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const ParseError& e) {
    err << "input error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const ManifestError& e) {
    err << "manifest error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
}

}  // namespace erp::cli
