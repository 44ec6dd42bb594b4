#pragma once

// Shared value types and small utilities used across the runtime modules.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace orchestra {

// Token usage reported by a worker call. Counts are totals across retries.
struct UsageRecord {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;

  bool operator==(const UsageRecord&) const = default;
};

// splitmix64: tiny stateless generator used everywhere determinism matters.
// All seeded behaviour in this codebase flows through these two functions so
// that a (seed, key) pair always lands on the same draw, on every platform.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_str(std::string_view s) {
  // FNV-1a, then one splitmix round to spread low-entropy inputs.
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return splitmix64(h);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  return splitmix64(seed ^ splitmix64(salt));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view salt) {
  return mix_seed(seed, hash_str(salt));
}

// Uniform double in [0, 1) from a 64-bit state.
inline double unit_double(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Counts whitespace-separated chunks. This is the only token metric the
// runtime uses; no tokenizer model is consulted anywhere.
inline std::int64_t whitespace_tokens(std::string_view text) {
  std::int64_t n = 0;
  bool in_tok = false;
  for (unsigned char c : text) {
    const bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r' ||
                    c == '\f' || c == '\v';
    if (ws) {
      in_tok = false;
    } else if (!in_tok) {
      in_tok = true;
      ++n;
    }
  }
  return n;
}

inline std::string_view trim_view(std::string_view s) {
  const auto ws = [](unsigned char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n';
  };
  while (!s.empty() && ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && ws(s.back())) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_on(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace orchestra
