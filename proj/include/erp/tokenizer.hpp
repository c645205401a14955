#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace erp {

using TokenId = std::int64_t;
using TokenIds = std::vector<TokenId>;

// Reserved ids. They occupy the lowest slots of every vocabulary, in this order.
enum class Special : TokenId { kPad = 0, kUnk, kCls, kSep, kOption, kExp, kBos, kEos, kCuz };

inline constexpr std::array<std::string_view, 9> kSpecialTokens = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[OPTION]", "[EXP]", "[BOS]", "[EOS]", "[CUZ]"};

inline constexpr std::string_view kContinuationPrefix = "##";

constexpr TokenId id_of(Special s) { return static_cast<TokenId>(s); }

class Vocab {
 public:
  // Validates that the specials lead in the fixed order and tokens are unique.
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_special(TokenId id) const { return id >= 0 && id < static_cast<TokenId>(kSpecialTokens.size()); }

  // FNV-1a over the newline-joined token list, hex encoded. Stored in
  // checkpoint manifests to detect vocabulary mismatches.
  std::string fingerprint() const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Deterministic vocabulary: specials, every character seen (most frequent
// first), continuation characters, then whole words and frequent word
// substrings by descending frequency until target_size. Ties break
// lexicographically.
Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t target_size);

// Lowercase, whitespace split, greedy longest-match subwords per word.
// Characters with no matching piece become [UNK]. Literal special strings
// such as "[SEP]" map to their reserved ids.
TokenIds encode(std::string_view text, const Vocab& vocab);

// Joins tokens with spaces, merging continuation pieces into the previous token.
std::string decode(const TokenIds& ids, const Vocab& vocab);

// One token per line, line number = id.
void save_vocab(const std::filesystem::path& path, const Vocab& vocab);
Vocab load_vocab(const std::filesystem::path& path);

// ASCII lowercase and collapse whitespace runs to single spaces.
std::string normalize_text(std::string_view text);

}  // namespace erp
