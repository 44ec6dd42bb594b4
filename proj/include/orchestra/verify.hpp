#pragma once

// Outcome verification. Four checkers share one Verdict shape:
//
//   math         exact equivalence on a decidable fragment: rational
//                arithmetic and single-variable polynomials; anything
//                outside the fragment falls back to string equality;
//   qa           max(exact-match, token-F1) against a threshold;
//   code         shells out to a check command, pass iff exit 0 in budget;
//   tool_schema  JSON answer must carry required fields with right types.
//
// Every checker is symmetric where symmetry makes sense (math) and total:
// malformed inputs produce a verdict, never an exception, except for
// misconfigured harness specs which are programmer errors.

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>
#include <signal.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"
#include "orchestra/common.hpp"

namespace orchestra::verify {

struct Verdict {
  int b = 0;           // binary correctness gate
  double score = 0.0;  // graded score in [0, 1]
  std::string detail;  // which path produced the verdict

  bool operator==(const Verdict&) const = default;
};

// Infrastructure failures poison probe results rather than scoring as wrong;
// the curriculum module keys on this.
inline bool is_infra(const Verdict& verdict) {
  return verdict.detail == "infra";
}

// ---------------------------------------------------------------------------
// Math: exact rationals and single-symbol polynomials
// ---------------------------------------------------------------------------

namespace math_detail {

struct OutOfFragment {};  // not an error: routes the pair to the fallback

// Rational over int64 with gcd normalization. Any overflow bails out of the
// exact fragment instead of silently wrapping.
struct Rat {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static std::int64_t checked(__int128 v) {
    if (v > INT64_MAX || v < INT64_MIN) throw OutOfFragment{};
    return static_cast<std::int64_t>(v);
  }

  static Rat make(__int128 n, __int128 d) {
    if (d == 0) throw OutOfFragment{};
    if (d < 0) {
      n = -n;
      d = -d;
    }
    const std::int64_t ni = checked(n);
    const std::int64_t di = checked(d);
    const std::int64_t g = std::gcd(ni < 0 ? -ni : ni, di);
    return Rat{g == 0 ? 0 : ni / g, g == 0 ? 1 : di / g};
  }

  friend Rat operator+(const Rat& a, const Rat& b) {
    return make(static_cast<__int128>(a.num) * b.den +
                    static_cast<__int128>(b.num) * a.den,
                static_cast<__int128>(a.den) * b.den);
  }
  friend Rat operator-(const Rat& a, const Rat& b) {
    return make(static_cast<__int128>(a.num) * b.den -
                    static_cast<__int128>(b.num) * a.den,
                static_cast<__int128>(a.den) * b.den);
  }
  friend Rat operator*(const Rat& a, const Rat& b) {
    return make(static_cast<__int128>(a.num) * b.num,
                static_cast<__int128>(a.den) * b.den);
  }
  friend Rat operator/(const Rat& a, const Rat& b) {
    if (b.num == 0) throw OutOfFragment{};
    return make(static_cast<__int128>(a.num) * b.den,
                static_cast<__int128>(a.den) * b.num);
  }
  bool operator==(const Rat&) const = default;

  [[nodiscard]] bool is_zero() const { return num == 0; }
};

inline Rat rat_pow(Rat base, int exp) {
  if (exp < 0) {
    if (base.is_zero()) throw OutOfFragment{};
    base = Rat{base.den, base.num};
    if (base.den < 0) {
      base.num = -base.num;
      base.den = -base.den;
    }
    exp = -exp;
  }
  Rat out{1, 1};
  for (int i = 0; i < exp; ++i) out = out * base;
  return out;
}

// Polynomial in at most one symbol: exponent -> coefficient, zero
// coefficients erased so equality is canonical.
struct Poly {
  std::map<int, Rat> terms;
  std::string symbol;  // empty while constant

  static Poly constant(Rat c) {
    Poly p;
    if (!c.is_zero()) p.terms[0] = c;
    return p;
  }

  static Poly var(const std::string& name) {
    Poly p;
    p.symbol = name;
    p.terms[1] = Rat{1, 1};
    return p;
  }

  [[nodiscard]] bool is_constant() const {
    return terms.empty() || (terms.size() == 1 && terms.count(0) == 1);
  }

  [[nodiscard]] Rat constant_value() const {
    const auto it = terms.find(0);
    return it == terms.end() ? Rat{0, 1} : it->second;
  }

  void merge_symbol(const Poly& other) {
    if (other.symbol.empty()) return;
    if (symbol.empty()) {
      symbol = other.symbol;
    } else if (symbol != other.symbol) {
      throw OutOfFragment{};  // two distinct symbols
    }
  }

  void prune() {
    for (auto it = terms.begin(); it != terms.end();) {
      it = it->second.is_zero() ? terms.erase(it) : std::next(it);
    }
    if (is_constant()) symbol.clear();
  }
};

inline Poly operator+(const Poly& a, const Poly& b) {
  Poly out = a;
  out.merge_symbol(b);
  for (const auto& [e, c] : b.terms) {
    const auto it = out.terms.find(e);
    if (it == out.terms.end()) {
      out.terms[e] = c;
    } else {
      it->second = it->second + c;
    }
  }
  out.prune();
  return out;
}

inline Poly operator-(const Poly& a, const Poly& b) {
  Poly neg = b;
  for (auto& [e, c] : neg.terms) c = Rat{0, 1} - c;
  return a + neg;
}

inline Poly operator*(const Poly& a, const Poly& b) {
  Poly out;
  out.symbol = a.symbol;
  out.merge_symbol(b);
  for (const auto& [ea, ca] : a.terms) {
    for (const auto& [eb, cb] : b.terms) {
      const int e = ea + eb;
      const Rat prod = ca * cb;
      const auto it = out.terms.find(e);
      if (it == out.terms.end()) {
        out.terms[e] = prod;
      } else {
        it->second = it->second + prod;
      }
    }
  }
  out.prune();
  return out;
}

inline Poly operator/(const Poly& a, const Poly& b) {
  if (!b.is_constant()) throw OutOfFragment{};  // no polynomial division
  Poly out = a;
  const Rat d = b.constant_value();
  for (auto& [e, c] : out.terms) c = c / d;
  out.prune();
  return out;
}

inline Poly poly_pow(const Poly& base, int exp) {
  if (base.is_constant()) {
    return Poly::constant(rat_pow(base.constant_value(), exp));
  }
  if (exp < 0) throw OutOfFragment{};
  Poly out = Poly::constant(Rat{1, 1});
  for (int i = 0; i < exp; ++i) out = out * base;
  return out;
}

// Recursive-descent parser over: numbers (integer or decimal), one symbol,
// + - * / ^, parentheses, unary minus, and implicit multiplication between a
// factor and an adjacent symbol or '(' (as in "2x" or "3(x+1)").
class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  Poly parse() {
    const Poly p = expr();
    skip_ws();
    if (pos_ != text_.size()) throw OutOfFragment{};
    return p;
  }

 private:
  Poly expr() {
    Poly p = term();
    for (;;) {
      skip_ws();
      if (peek() == '+') {
        ++pos_;
        p = p + term();
      } else if (peek() == '-') {
        ++pos_;
        p = p - term();
      } else {
        return p;
      }
    }
  }

  Poly term() {
    Poly p = factor();
    for (;;) {
      skip_ws();
      const char c = peek();
      if (c == '*') {
        ++pos_;
        p = p * factor();
      } else if (c == '/') {
        ++pos_;
        p = p / factor();
      } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '(') {
        p = p * factor();  // implicit multiplication
      } else {
        return p;
      }
    }
  }

  Poly factor() {
    skip_ws();
    if (peek() == '+') {
      ++pos_;
      return factor();
    }
    if (peek() == '-') {
      ++pos_;
      return Poly::constant(Rat{0, 1}) - factor();
    }
    Poly base = primary();
    skip_ws();
    if (peek() == '^') {
      ++pos_;
      skip_ws();
      int sign = 1;
      if (peek() == '-') {
        sign = -1;
        ++pos_;
      }
      const std::int64_t e = read_integer();
      if (e > 64) throw OutOfFragment{};
      base = poly_pow(base, sign * static_cast<int>(e));
    }
    return base;
  }

  Poly primary() {
    skip_ws();
    const char c = peek();
    if (c == '(') {
      ++pos_;
      Poly p = expr();
      skip_ws();
      if (peek() != ')') throw OutOfFragment{};
      ++pos_;
      return p;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      return Poly::constant(read_number());
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      std::string name;
      while (pos_ < text_.size() &&
             (std::isalnum(static_cast<unsigned char>(text_[pos_])) ||
              text_[pos_] == '_')) {
        name += text_[pos_++];
      }
      skip_ws();
      if (peek() == '(') throw OutOfFragment{};  // function call, not a var
      return Poly::var(name);
    }
    throw OutOfFragment{};
  }

  Rat read_number() {
    __int128 whole = 0;
    bool any = false;
    while (pos_ < text_.size() &&
           std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      whole = whole * 10 + (text_[pos_] - '0');
      if (whole > INT64_MAX) throw OutOfFragment{};
      ++pos_;
      any = true;
    }
    __int128 frac = 0;
    __int128 scale = 1;
    if (pos_ < text_.size() && text_[pos_] == '.') {
      ++pos_;
      bool frac_any = false;
      while (pos_ < text_.size() &&
             std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
        frac = frac * 10 + (text_[pos_] - '0');
        scale *= 10;
        if (scale > INT64_MAX) throw OutOfFragment{};
        ++pos_;
        frac_any = true;
      }
      if (!any && !frac_any) throw OutOfFragment{};
    } else if (!any) {
      throw OutOfFragment{};
    }
    return Rat::make(whole * scale + frac, scale);
  }

  std::int64_t read_integer() {
    skip_ws();
    std::int64_t v = 0;
    bool any = false;
    while (pos_ < text_.size() &&
           std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      v = v * 10 + (text_[pos_] - '0');
      if (v > 1'000'000) throw OutOfFragment{};
      ++pos_;
      any = true;
    }
    if (!any) throw OutOfFragment{};
    return v;
  }

  void skip_ws() {
    while (pos_ < text_.size() &&
           (text_[pos_] == ' ' || text_[pos_] == '\t')) {
      ++pos_;
    }
  }

  [[nodiscard]] char peek() const {
    return pos_ < text_.size() ? text_[pos_] : '\0';
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

inline std::optional<Poly> try_parse(std::string_view text) {
  try {
    return Parser(text).parse();
  } catch (const OutOfFragment&) {
    return std::nullopt;
  }
}

inline std::string collapse_ws(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      pending_space = !out.empty();
    } else {
      if (pending_space) out += ' ';
      pending_space = false;
      out += c;
    }
  }
  return out;
}

}  // namespace math_detail

// Symmetric in its arguments. detail: "exact" when both sides parse in the
// decidable fragment, "fallback" for whitespace-normalized string equality,
// "parse" when a side is empty.
inline Verdict verify_math(const std::string& answer,
                           const std::string& gold) {
  using namespace math_detail;
  if (trim_view(answer).empty() || trim_view(gold).empty()) {
    return {0, 0.0, "parse"};
  }
  const std::optional<Poly> a = try_parse(answer);
  const std::optional<Poly> g = try_parse(gold);
  if (a && g) {
    // Distinct symbols (x vs y) mean the exact route cannot decide
    // equivalence; string fallback handles that pair.
    const bool comparable =
        a->symbol.empty() || g->symbol.empty() || a->symbol == g->symbol;
    if (comparable) {
      const int b = a->terms == g->terms ? 1 : 0;
      return {b, static_cast<double>(b), "exact"};
    }
  }
  const int b = collapse_ws(answer) == collapse_ws(gold) ? 1 : 0;
  return {b, static_cast<double>(b), "fallback"};
}

// ---------------------------------------------------------------------------
// QA: exact match and token F1
// ---------------------------------------------------------------------------

namespace qa_detail {

// lowercase -> strip punctuation -> drop articles -> collapse whitespace
inline std::vector<std::string> normalize_tokens(std::string_view text) {
  std::string clean;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) continue;
    clean += static_cast<char>(std::tolower(u));
  }
  std::vector<std::string> tokens;
  std::string current;
  const auto flush = [&] {
    if (!current.empty() && current != "a" && current != "an" &&
        current != "the") {
      tokens.push_back(current);
    }
    current.clear();
  };
  for (char c : clean) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      current += c;
    }
  }
  flush();
  return tokens;
}

inline double token_f1(const std::vector<std::string>& a,
                       const std::vector<std::string>& g) {
  if (a.empty() || g.empty()) return a == g ? 1.0 : 0.0;
  std::map<std::string, int> counts;
  for (const std::string& t : g) ++counts[t];
  int common = 0;
  for (const std::string& t : a) {
    const auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / a.size();
  const double recall = static_cast<double>(common) / g.size();
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace qa_detail

// score = max(exact match, token F1) on normalized text; b gates on the
// threshold. detail records which component won.
inline Verdict verify_qa(const std::string& answer, const std::string& gold,
                         double threshold = 0.5) {
  if (threshold < 0.0 || threshold > 1.0) {
    throw std::invalid_argument("qa threshold outside [0, 1]");
  }
  const auto a = qa_detail::normalize_tokens(answer);
  const auto g = qa_detail::normalize_tokens(gold);
  const double em = a == g ? 1.0 : 0.0;
  const double f1 = qa_detail::token_f1(a, g);
  const double score = std::max(em, f1);
  return {score >= threshold ? 1 : 0, score, em >= f1 ? "em" : "f1"};
}

// ---------------------------------------------------------------------------
// Code: shell out to a check command
// ---------------------------------------------------------------------------

struct CodeHarness {
  // Runs inside a fresh temp dir with the artifact written beside it and
  // ARTIFACT set to the file name. The default treats the artifact as a
  // shell script, mirroring scripts/check_artifact.sh.
  std::string command = "sh \"$ARTIFACT\"";
  double timeout_s = 5.0;
  std::string artifact_file = "artifact";
};

inline CodeHarness harness_from_json(const nlohmann::json& aux) {
  CodeHarness harness;
  if (aux.is_object()) {
    harness.command = aux.value("command", harness.command);
    harness.timeout_s = aux.value("timeout_s", harness.timeout_s);
    harness.artifact_file = aux.value("artifact_file", harness.artifact_file);
  }
  if (harness.command.empty() || harness.timeout_s <= 0) {
    throw std::invalid_argument("bad code harness spec");
  }
  return harness;
}

// b=1 iff the command exits 0 within the budget. detail: "pass", "exit",
// "timeout", or "infra" when the harness itself cannot run (fork failure,
// missing interpreter: exit 126/127).
inline Verdict verify_code(const std::string& artifact,
                           const CodeHarness& harness) {
  namespace fs = std::filesystem;
  char tmpl[] = "/tmp/orchestra-check-XXXXXX";
  char* dir = ::mkdtemp(tmpl);
  if (dir == nullptr) return {0, 0.0, "infra"};
  const fs::path workdir(dir);

  Verdict verdict{0, 0.0, "infra"};
  {
    std::ofstream out(workdir / harness.artifact_file, std::ios::binary);
    out << artifact;
    if (!out) {
      fs::remove_all(workdir);
      return {0, 0.0, "infra"};
    }
  }

  const pid_t pid = ::fork();
  if (pid < 0) {
    fs::remove_all(workdir);
    return {0, 0.0, "infra"};
  }
  if (pid == 0) {
    if (::chdir(dir) != 0) _exit(126);
    ::setenv("ARTIFACT", harness.artifact_file.c_str(), 1);
    ::execl("/bin/sh", "sh", "-c", harness.command.c_str(),
            static_cast<char*>(nullptr));
    _exit(127);
  }

  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::duration<double>(harness.timeout_s);
  int status = 0;
  bool finished = false;
  for (;;) {
    const pid_t r = ::waitpid(pid, &status, WNOHANG);
    if (r == pid) {
      finished = true;
      break;
    }
    if (r < 0) break;
    if (std::chrono::steady_clock::now() >= deadline) {
      ::kill(pid, SIGKILL);
      ::waitpid(pid, &status, 0);
      break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }

  if (!finished) {
    verdict = {0, 0.0, "timeout"};
  } else if (WIFEXITED(status)) {
    const int code = WEXITSTATUS(status);
    if (code == 0) {
      verdict = {1, 1.0, "pass"};
    } else if (code == 126 || code == 127) {
      verdict = {0, 0.0, "infra"};
    } else {
      verdict = {0, 0.0, "exit"};
    }
  } else {
    verdict = {0, 0.0, "exit"};  // killed by a signal
  }

  std::error_code ignore;
  fs::remove_all(workdir, ignore);
  return verdict;
}

// ---------------------------------------------------------------------------
// Tool schema: required JSON fields with matching types
// ---------------------------------------------------------------------------

namespace schema_detail {

inline bool type_matches(const nlohmann::json& value, const std::string& type) {
  if (type == "any") return true;
  if (type == "text" || type == "string") return value.is_string();
  if (type == "number") return value.is_number();
  if (type == "integer") return value.is_number_integer();
  if (type == "bool" || type == "boolean") return value.is_boolean();
  if (type == "object") return value.is_object();
  if (type == "array") return value.is_array();
  if (type == "null") return value.is_null();
  throw std::invalid_argument("unknown schema type: " + type);
}

}  // namespace schema_detail

// schema: {"required": [{"name": ..., "type": ...}, ...]}. Extra fields in
// the answer are ignored.
inline Verdict verify_schema(const std::string& answer,
                             const nlohmann::json& schema) {
  if (!schema.is_object() || !schema.contains("required") ||
      !schema.at("required").is_array()) {
    throw std::invalid_argument("schema must carry a required array");
  }
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(answer);
  } catch (const nlohmann::json::exception&) {
    return {0, 0.0, "parse"};
  }
  if (!doc.is_object()) return {0, 0.0, "parse"};
  for (const auto& field : schema.at("required")) {
    const std::string name = field.at("name").get<std::string>();
    const std::string type = field.value("type", std::string{"any"});
    if (!doc.contains(name) ||
        !schema_detail::type_matches(doc.at(name), type)) {
      return {0, 0.0, "mismatch"};
    }
  }
  return {1, 1.0, "match"};
}

// ---------------------------------------------------------------------------
// Gold specs and dispatch
// ---------------------------------------------------------------------------

struct GoldSpec {
  std::string task_id;
  std::string kind;  // math | qa | code | tool_schema
  std::string gold;
  nlohmann::json aux;
  double threshold = 0.5;
};

inline GoldSpec gold_spec_from_json(const nlohmann::json& item) {
  GoldSpec spec;
  spec.task_id = item.at("task_id").get<std::string>();
  spec.kind = item.at("kind").get<std::string>();
  spec.gold = item.value("gold", std::string{});
  if (item.contains("aux")) spec.aux = item.at("aux");
  spec.threshold = item.value("threshold", spec.threshold);
  return spec;
}

// Accepts a JSON array file or one JSON object per line.
inline std::vector<GoldSpec> load_gold_specs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  std::vector<GoldSpec> specs;
  const std::string_view trimmed = trim_view(text);
  if (!trimmed.empty() && trimmed.front() == '[') {
    for (const auto& item : nlohmann::json::parse(trimmed)) {
      specs.push_back(gold_spec_from_json(item));
    }
  } else {
    std::size_t line_no = 0;
    for (const std::string& line : split_on(text, '\n')) {
      ++line_no;
      if (trim_view(line).empty()) continue;
      try {
        specs.push_back(gold_spec_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& err) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " +
                                 err.what());
      }
    }
  }
  return specs;
}

inline Verdict verify_answer(const GoldSpec& spec, const std::string& answer) {
  if (spec.kind == "math") return verify_math(answer, spec.gold);
  if (spec.kind == "qa") return verify_qa(answer, spec.gold, spec.threshold);
  if (spec.kind == "code") {
    return verify_code(answer, harness_from_json(spec.aux));
  }
  if (spec.kind == "tool_schema") {
    return verify_schema(answer, spec.aux.is_object() &&
                                         spec.aux.contains("schema")
                                     ? spec.aux.at("schema")
                                     : spec.aux);
  }
  throw std::invalid_argument("unknown verifier kind: " + spec.kind);
}

}  // namespace orchestra::verify
