#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "erp/comve_data.hpp"
#include "erp/explainer.hpp"
#include "erp/trainer.hpp"
#include "erp/transformer.hpp"

namespace erp::cli {

// Exit codes shared by every command.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeFailure = 1;
inline constexpr int kConfigFailure = 2;

// Flat JSON object with dotted keys ("train.learning_rate"). Flags are
// merged over the file's values.
class RunConfig {
 public:
  RunConfig() = default;
  explicit RunConfig(nlohmann::json flat);
  static RunConfig from_file(const std::filesystem::path& path);

  void set(const std::string& key, nlohmann::json value);
  bool has(const std::string& key) const;
  const nlohmann::json& raw() const { return flat_; }

  std::string str(const std::string& key, const std::string& fallback = "") const;
  double num(const std::string& key, double fallback) const;
  std::size_t count(const std::string& key, std::size_t fallback) const;
  bool flag(const std::string& key, bool fallback = false) const;
  std::vector<std::string> list(const std::string& key) const;

  // Throws ConfigError naming the path when the key is set but missing on disk.
  std::filesystem::path existing_path(const std::string& key) const;

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  InjectionPolicy injection_policy() const;
  DecodeConfig decode_config() const;

 private:
  nlohmann::json flat_ = nlohmann::json::object();
};

int cmd_train(const RunConfig& cfg, std::ostream& log);
int cmd_generate(const RunConfig& cfg, std::ostream& log);
int cmd_eval(const RunConfig& cfg, std::ostream& log);
int cmd_pipeline(const RunConfig& cfg, std::ostream& log);
int cmd_convert(const RunConfig& cfg, std::ostream& log);

// Explanation lines exactly as the generate command writes them.
std::vector<GeneratedExplanation> generate_for(const DecoderLM& model, const Vocab& vocab,
                                               const std::vector<std::pair<std::string, std::string>>& id_and_sentence,
                                               const DecodeConfig& cfg);

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

// argv-style entry point; never throws, returns an exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace erp::cli
