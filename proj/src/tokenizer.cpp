#include "erp/tokenizer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "erp/errors.hpp"

namespace erp {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.push_back(text.substr(start, i - start));
  }
  return words;
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

// Byte offsets of UTF-8 code point starts, plus the end offset.
std::vector<std::size_t> codepoint_bounds(std::string_view word) {
  std::vector<std::size_t> b;
  for (std::size_t i = 0; i < word.size(); ++i) {
    if ((static_cast<unsigned char>(word[i]) & 0xC0) != 0x80) b.push_back(i);
  }
  b.push_back(word.size());
  return b;
}

std::optional<TokenId> special_literal(std::string_view word) {
  const std::string lower = to_lower(word);
  for (std::size_t i = 0; i < kSpecialTokens.size(); ++i) {
    if (lower == to_lower(kSpecialTokens[i])) return static_cast<TokenId>(i);
  }
  return std::nullopt;
}

using Counts = std::map<std::string, std::size_t>;

// Frequency descending, then lexicographic.
std::vector<std::string> ranked(const Counts& counts) {
  std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  out.reserve(items.size());
  for (auto& [tok, n] : items) out.push_back(std::move(tok));
  return out;
}

}  // namespace

std::string normalize_text(std::string_view text) {
  std::string out;
  for (auto w : split_whitespace(text)) {
    if (!out.empty()) out += ' ';
    out += to_lower(w);
  }
  return out;
}

// ---- Vocab -------------------------------------------------------------------

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kSpecialTokens.size()) {
    throw ContractError("vocabulary must start with the " + std::to_string(kSpecialTokens.size()) +
                        " special tokens");
  }
  Vocab v;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i < kSpecialTokens.size() && tokens[i] != kSpecialTokens[i]) {
      throw ContractError("vocabulary id " + std::to_string(i) + " must be " +
                          std::string(kSpecialTokens[i]) + ", found '" + tokens[i] + "'");
    }
    if (tokens[i].empty()) throw ContractError("vocabulary contains an empty token at id " + std::to_string(i));
    if (!v.index_.emplace(tokens[i], static_cast<TokenId>(i)).second) {
      throw ContractError("duplicate vocabulary token '" + tokens[i] + "'");
    }
  }
  v.tokens_ = std::move(tokens);
  return v;
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocab::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= '\n';
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- build -------------------------------------------------------------------

Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t target_size) {
  Counts chars, cont_chars, words, pieces;
  bool any_word = false;
  for (const auto& line : corpus) {
    for (auto raw : split_whitespace(line)) {
      if (special_literal(raw)) continue;
      const std::string w = to_lower(raw);
      any_word = true;
      const auto b = codepoint_bounds(w);
      const std::size_t n = b.size() - 1;
      for (std::size_t i = 0; i < n; ++i) {
        const std::string c = w.substr(b[i], b[i + 1] - b[i]);
        ++chars[c];
        if (i > 0) ++cont_chars[std::string(kContinuationPrefix) + c];
      }
      if (n > 1) ++words[w];
      // Multi-character substrings: word-initial ones bare, the rest "##".
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 2; j <= n; ++j) {
          if (i == 0 && j == n) continue;
          std::string piece = w.substr(b[i], b[j] - b[i]);
          if (i > 0) piece = std::string(kContinuationPrefix) + piece;
          ++pieces[piece];
        }
      }
    }
  }
  if (!any_word) throw ContractError("build_vocab: corpus contains no words");
  const std::size_t minimum = kSpecialTokens.size() + chars.size();
  if (target_size <= minimum) {
    throw ContractError("build_vocab: target size " + std::to_string(target_size) +
                        " must exceed specials + distinct characters = " + std::to_string(minimum));
  }

  std::vector<std::string> tokens(kSpecialTokens.begin(), kSpecialTokens.end());
  std::set<std::string> seen(tokens.begin(), tokens.end());
  auto take = [&](const std::vector<std::string>& list) {
    for (const auto& t : list) {
      if (tokens.size() >= target_size) return;
      if (seen.insert(t).second) tokens.push_back(t);
    }
  };
  take(ranked(chars));
  take(ranked(cont_chars));
  take(ranked(words));
  take(ranked(pieces));
  return Vocab::from_tokens(std::move(tokens));
}

// ---- encode / decode -----------------------------------------------------------

TokenIds encode(std::string_view text, const Vocab& vocab) {
  TokenIds out;
  const TokenId unk = id_of(Special::kUnk);
  for (auto raw : split_whitespace(text)) {
    if (auto sp = special_literal(raw)) {
      out.push_back(*sp);
      continue;
    }
    const std::string w = to_lower(raw);
    const auto b = codepoint_bounds(w);
    const std::size_t n = b.size() - 1;
    std::size_t start = 0;
    while (start < n) {
      std::optional<TokenId> match;
      std::size_t end = n;
      for (; end > start; --end) {
        std::string piece = w.substr(b[start], b[end] - b[start]);
        if (start > 0) piece = std::string(kContinuationPrefix) + piece;
        match = vocab.find(piece);
        if (match && !vocab.is_special(*match)) break;
        match.reset();
      }
      if (match) {
        out.push_back(*match);
        start = end;
      } else {
        out.push_back(unk);
        start += 1;
      }
    }
  }
  return out;
}

std::string decode(const TokenIds& ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& tok = vocab.token(id);
    const bool cont = !vocab.is_special(id) && tok.size() > kContinuationPrefix.size() &&
                      tok.compare(0, kContinuationPrefix.size(), kContinuationPrefix) == 0;
    if (cont) {
      out.append(tok, kContinuationPrefix.size());
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

void save_vocab(const std::filesystem::path& path, const Vocab& vocab) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : vocab.tokens()) os << t << '\n';
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab::from_tokens(std::move(tokens));
}

}  // namespace erp
