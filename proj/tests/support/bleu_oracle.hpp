#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace erp::testing {

// Brute-force BLEU: n-grams compared as joined strings by linear scan, no maps.
// Inputs are already tokenized.
struct OracleBleu {
  double score = 0.0;
  double brevity_penalty = 0.0;
  std::size_t orders = 0;
};

inline std::vector<std::string> oracle_ngrams(const std::vector<std::string>& toks, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string g;
    for (std::size_t k = 0; k < n; ++k) g += toks[i + k] + '\x1f';
    out.push_back(g);
  }
  return out;
}

inline std::size_t oracle_count(const std::vector<std::string>& grams, const std::string& g) {
  std::size_t c = 0;
  for (const auto& x : grams) c += x == g ? 1 : 0;
  return c;
}

inline OracleBleu oracle_bleu(const std::vector<std::vector<std::string>>& cands,
                              const std::vector<std::vector<std::vector<std::string>>>& refs) {
  std::size_t shortest = 0;
  bool any = false;
  for (const auto& c : cands) {
    if (c.empty()) continue;
    shortest = any ? std::min(shortest, c.size()) : c.size();
    any = true;
  }
  OracleBleu r;
  if (!any) return r;
  r.orders = std::min<std::size_t>(4, shortest);

  double c_len = 0, r_len = 0;
  std::vector<double> match(r.orders, 0.0), total(r.orders, 0.0);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto& c = cands[i];
    c_len += c.size();
    std::size_t best = refs[i][0].size();
    for (const auto& ref : refs[i]) {
      const auto d = [&](std::size_t L) { return L > c.size() ? L - c.size() : c.size() - L; };
      if (d(ref.size()) < d(best) || (d(ref.size()) == d(best) && ref.size() < best)) best = ref.size();
    }
    r_len += best;
    for (std::size_t n = 1; n <= r.orders; ++n) {
      const auto cg = oracle_ngrams(c, n);
      std::vector<std::string> seen;
      for (const auto& g : cg) {
        if (std::find(seen.begin(), seen.end(), g) != seen.end()) continue;
        seen.push_back(g);
        std::size_t max_ref = 0;
        for (const auto& ref : refs[i]) max_ref = std::max(max_ref, oracle_count(oracle_ngrams(ref, n), g));
        match[n - 1] += std::min(oracle_count(cg, g), max_ref);
      }
      total[n - 1] += cg.size();
    }
  }
  r.brevity_penalty = c_len >= r_len ? 1.0 : std::exp(1.0 - r_len / c_len);
  double log_sum = 0.0;
  for (std::size_t n = 0; n < r.orders; ++n) {
    if (match[n] == 0.0) return r;
    log_sum += std::log(match[n] / total[n]);
  }
  r.score = 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(r.orders));
  return r;
}

}  // namespace erp::testing
