#pragma once

// Trajectory grammar: a closed XML vocabulary for orchestration transcripts.
//
// A trajectory is a <query> followed by rounds of planning, routing, and
// observation blocks, closed by exactly one <final_answer>. Structural damage
// (bad tags, orphan blocks, prose between elements) raises ParseError;
// rule-level defects (duplicate final answers, non-monotone rounds, broken
// dependency graphs, out-of-vocabulary routes, nested routes) are reported as
// data in a ValidationReport so callers can score them rather than crash.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "orchestra/common.hpp"

namespace orchestra::grammar {

// ---------------------------------------------------------------------------
// Document model
// ---------------------------------------------------------------------------

struct PlanEntry {
  int id = 0;
  std::set<int> depends_on;
  std::string description;

  bool operator==(const PlanEntry&) const = default;
};

struct PlanBlock {
  int round = 0;
  std::vector<PlanEntry> subtasks;

  bool operator==(const PlanBlock&) const = default;
};

struct RouteBlock {
  int subtask_id = 0;
  std::string model;  // worker identifier
  std::string skill;  // primitive identifier
  std::string payload;

  bool operator==(const RouteBlock&) const = default;
};

struct ObsBlock {
  int subtask_id = 0;
  std::string text;

  bool operator==(const ObsBlock&) const = default;
};

struct VerifyBlock {
  bool replan = false;
  std::string text;

  bool operator==(const VerifyBlock&) const = default;
};

// One round of the transcript. A turn opened by an explicit <plan> carries
// that plan; a bare <route> opens an implicit turn whose plan is the
// singleton subtask it names (round index inferred as previous + 1).
struct TurnBlock {
  int round = 0;
  std::optional<PlanBlock> plan;
  std::vector<RouteBlock> routes;
  std::vector<ObsBlock> observations;
  std::optional<VerifyBlock> verify;

  [[nodiscard]] bool implicit() const { return !plan.has_value(); }

  // Subtask ids this turn introduces: the plan's ids, or the routed id for an
  // implicit turn.
  [[nodiscard]] std::set<int> declared_ids() const {
    std::set<int> ids;
    if (plan) {
      for (const auto& s : plan->subtasks) ids.insert(s.id);
    } else {
      for (const auto& r : routes) ids.insert(r.subtask_id);
    }
    return ids;
  }

  bool operator==(const TurnBlock&) const = default;
};

struct TrajectoryDoc {
  std::string query;
  std::vector<TurnBlock> turns;
  // All <final_answer> blocks seen; a valid document has exactly one.
  std::vector<std::string> final_answers;

  bool operator==(const TrajectoryDoc&) const = default;
};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ParseCode {
  malformed_xml,
  unknown_element,
  unknown_attribute,
  missing_attribute,
  bad_attribute_value,
  unexpected_element,
  stray_prose,
  missing_query,
  nested_route,
  empty_document,
};

class ParseError : public std::runtime_error {
 public:
  ParseError(ParseCode code, std::size_t offset, const std::string& what)
      : std::runtime_error("parse error at byte " + std::to_string(offset) +
                           ": " + what),
        code_(code),
        offset_(offset) {}

  [[nodiscard]] ParseCode code() const { return code_; }
  [[nodiscard]] std::size_t offset() const { return offset_; }

 private:
  ParseCode code_;
  std::size_t offset_;
};

class SerializeError : public std::runtime_error {
 public:
  explicit SerializeError(const std::string& what)
      : std::runtime_error("cannot serialize invalid document: " + what) {}
};

class ClassifyError : public std::runtime_error {
 public:
  explicit ClassifyError(const std::string& what)
      : std::runtime_error("unclassifiable trajectory: " + what) {}
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

// Violation codes are a closed set; tests key on them.
inline constexpr const char* kViolationSingleFinal = "single-final-answer";
inline constexpr const char* kViolationMonotoneRounds = "monotone-rounds";
inline constexpr const char* kViolationDagAcyclic = "dag-acyclic";
inline constexpr const char* kViolationClosedVocabulary = "closed-vocabulary";
inline constexpr const char* kViolationNestedRoute = "no-nested-route";

struct Violation {
  std::string code;
  std::string location;
  std::string message;
};

struct ValidationReport {
  bool valid = true;
  std::vector<Violation> violations;

  [[nodiscard]] bool has(std::string_view code) const {
    return std::any_of(violations.begin(), violations.end(),
                       [&](const Violation& v) { return v.code == code; });
  }
};

// Vocabulary the validator resolves routes against. Kept structural so the
// grammar layer does not depend on the pool registry type; the pool module
// provides a converter.
struct RouteVocabulary {
  std::set<std::string> models;
  std::set<std::string> skills;
  std::set<std::pair<std::string, std::string>> admissible;

  [[nodiscard]] bool resolves(const std::string& model,
                              const std::string& skill) const {
    return models.count(model) > 0 && skills.count(skill) > 0 &&
           admissible.count({model, skill}) > 0;
  }
};

// ---------------------------------------------------------------------------
// Escaping
// ---------------------------------------------------------------------------

namespace detail {

inline void escape_into(std::string& out, std::string_view text,
                        bool in_attribute) {
  for (char c : text) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        if (in_attribute) {
          out += "&quot;";
        } else {
          out += c;
        }
        break;
      default:
        out += c;
    }
  }
}

inline std::string unescape(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '&') {
      const std::string_view rest = text.substr(i);
      if (rest.rfind("&amp;", 0) == 0) {
        out += '&';
        i += 5;
        continue;
      }
      if (rest.rfind("&lt;", 0) == 0) {
        out += '<';
        i += 4;
        continue;
      }
      if (rest.rfind("&gt;", 0) == 0) {
        out += '>';
        i += 4;
        continue;
      }
      if (rest.rfind("&quot;", 0) == 0) {
        out += '"';
        i += 6;
        continue;
      }
      if (rest.rfind("&apos;", 0) == 0) {
        out += '\'';
        i += 6;
        continue;
      }
    }
    out += text[i];
    ++i;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tag scanner
// ---------------------------------------------------------------------------

struct Tag {
  enum class Kind { open, close, self_close };
  Kind kind = Kind::open;
  std::string name;
  std::vector<std::pair<std::string, std::string>> attrs;
  std::size_t offset = 0;

  [[nodiscard]] const std::string* attr(std::string_view key) const {
    for (const auto& [k, v] : attrs) {
      if (k == key) return &v;
    }
    return nullptr;
  }
};

class Scanner {
 public:
  explicit Scanner(std::string_view text) : text_(text) {}

  [[nodiscard]] std::size_t pos() const { return pos_; }
  [[nodiscard]] bool at_end() const { return pos_ >= text_.size(); }

  // Text content up to the next '<'; unescaped.
  std::string read_text() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && text_[pos_] != '<') ++pos_;
    return unescape(text_.substr(start, pos_ - start));
  }

  // Raw (escaped) text up to the next '<'. Used to detect stray prose.
  std::string_view peek_raw_text() const {
    std::size_t p = pos_;
    while (p < text_.size() && text_[p] != '<') ++p;
    return text_.substr(pos_, p - pos_);
  }

  void skip_inter_block_whitespace() {
    const std::string_view raw = peek_raw_text();
    if (!trim_view(raw).empty()) {
      throw ParseError(ParseCode::stray_prose, pos_,
                       "prose outside any element");
    }
    pos_ += raw.size();
  }

  Tag read_tag() {
    if (pos_ >= text_.size() || text_[pos_] != '<') {
      throw ParseError(ParseCode::malformed_xml, pos_, "expected a tag");
    }
    Tag tag;
    tag.offset = pos_;
    ++pos_;  // consume '<'
    if (pos_ < text_.size() && text_[pos_] == '/') {
      ++pos_;
      tag.kind = Tag::Kind::close;
      tag.name = read_name();
      skip_spaces();
      expect('>');
      return tag;
    }
    tag.name = read_name();
    for (;;) {
      skip_spaces();
      if (pos_ >= text_.size()) {
        throw ParseError(ParseCode::malformed_xml, tag.offset,
                         "unterminated tag <" + tag.name);
      }
      if (text_[pos_] == '>') {
        ++pos_;
        return tag;
      }
      if (text_[pos_] == '/') {
        ++pos_;
        expect('>');
        tag.kind = Tag::Kind::self_close;
        return tag;
      }
      std::string key = read_name();
      skip_spaces();
      expect('=');
      skip_spaces();
      expect('"');
      const std::size_t vstart = pos_;
      while (pos_ < text_.size() && text_[pos_] != '"') ++pos_;
      if (pos_ >= text_.size()) {
        throw ParseError(ParseCode::malformed_xml, vstart,
                         "unterminated attribute value");
      }
      std::string value = unescape(text_.substr(vstart, pos_ - vstart));
      ++pos_;  // closing quote
      tag.attrs.emplace_back(std::move(key), std::move(value));
    }
  }

 private:
  std::string read_name() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) ||
            text_[pos_] == '_')) {
      ++pos_;
    }
    if (pos_ == start) {
      throw ParseError(ParseCode::malformed_xml, pos_, "expected a name");
    }
    return std::string(text_.substr(start, pos_ - start));
  }

  void skip_spaces() {
    while (pos_ < text_.size() &&
           (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\n' ||
            text_[pos_] == '\r')) {
      ++pos_;
    }
  }

  void expect(char c) {
    if (pos_ >= text_.size() || text_[pos_] != c) {
      throw ParseError(ParseCode::malformed_xml, pos_,
                       std::string("expected '") + c + "'");
    }
    ++pos_;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

inline int parse_int_attr(const Tag& tag, const std::string& value,
                          std::string_view attr_name) {
  int out = 0;
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || out < 0) {
    throw ParseError(ParseCode::bad_attribute_value, tag.offset,
                     "attribute " + std::string(attr_name) +
                         " is not a non-negative integer: \"" + value + "\"");
  }
  return out;
}

inline const std::string& require_attr(const Tag& tag,
                                       std::string_view attr_name) {
  const std::string* v = tag.attr(attr_name);
  if (v == nullptr) {
    throw ParseError(
        ParseCode::missing_attribute, tag.offset,
        "<" + tag.name + "> requires attribute " + std::string(attr_name));
  }
  return *v;
}

inline void reject_unknown_attrs(
    const Tag& tag, std::initializer_list<std::string_view> allowed) {
  for (const auto& [k, v] : tag.attrs) {
    (void)v;
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      throw ParseError(ParseCode::unknown_attribute, tag.offset,
                       "<" + tag.name + "> does not take attribute " + k);
    }
  }
}

inline std::set<int> parse_depends_on(const Tag& tag, const std::string& raw) {
  std::set<int> deps;
  const std::string_view trimmed = trim_view(raw);
  if (trimmed.empty()) return deps;
  for (const std::string& part : split_on(trimmed, ',')) {
    const std::string_view p = trim_view(part);
    if (p.empty()) {
      throw ParseError(ParseCode::bad_attribute_value, tag.offset,
                       "empty id in depends_on list");
    }
    deps.insert(parse_int_attr(tag, std::string(p), "depends_on"));
  }
  return deps;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

// Reads text content for a leaf element and consumes its close tag. An open
// tag inside a leaf is a nesting fault; <route> inside <route> gets its own
// code because the validator reports it as a rule violation.
namespace detail {

inline std::string read_leaf_content(Scanner& scan, const std::string& name) {
  std::string content = scan.read_text();
  const Tag tag = scan.read_tag();
  if (tag.kind == Tag::Kind::close && tag.name == name) return content;
  if (name == "route" && tag.name == "route" &&
      tag.kind != Tag::Kind::close) {
    throw ParseError(ParseCode::nested_route, tag.offset,
                     "<route> nested inside <route>");
  }
  if (tag.kind == Tag::Kind::close) {
    throw ParseError(ParseCode::malformed_xml, tag.offset,
                     "expected </" + name + ">, found </" + tag.name + ">");
  }
  throw ParseError(ParseCode::unexpected_element, tag.offset,
                   "<" + tag.name + "> may not appear inside <" + name + ">");
}

}  // namespace detail

inline TrajectoryDoc parse_trajectory(std::string_view text) {
  using detail::Scanner;
  using detail::Tag;

  Scanner scan(text);
  scan.skip_inter_block_whitespace();
  if (scan.at_end()) {
    throw ParseError(ParseCode::empty_document, 0, "no content");
  }

  Tag root = scan.read_tag();
  if (root.name != "trajectory" || root.kind != Tag::Kind::open) {
    throw ParseError(ParseCode::unexpected_element, root.offset,
                     "document must start with <trajectory>");
  }
  detail::reject_unknown_attrs(root, {});

  TrajectoryDoc doc;

  // <query> is mandatory and first.
  scan.skip_inter_block_whitespace();
  Tag query_tag = scan.read_tag();
  if (query_tag.name != "query" || query_tag.kind != Tag::Kind::open) {
    throw ParseError(ParseCode::missing_query, query_tag.offset,
                     "first block must be <query>");
  }
  detail::reject_unknown_attrs(query_tag, {});
  doc.query = detail::read_leaf_content(scan, "query");

  // Block stream. `open_turn` tracks whether trailing blocks may still join
  // the latest turn; a verify or a final answer closes it.
  bool open_turn = false;
  bool saw_close = false;
  std::set<int> current_declared;

  const auto next_round = [&doc]() {
    return doc.turns.empty() ? 1 : doc.turns.back().round + 1;
  };

  while (!saw_close) {
    scan.skip_inter_block_whitespace();
    if (scan.at_end()) {
      throw ParseError(ParseCode::malformed_xml, scan.pos(),
                       "missing </trajectory>");
    }
    Tag tag = scan.read_tag();

    if (tag.kind == Tag::Kind::close) {
      if (tag.name != "trajectory") {
        throw ParseError(ParseCode::malformed_xml, tag.offset,
                         "unexpected </" + tag.name + ">");
      }
      saw_close = true;
      break;
    }

    if (tag.name == "plan") {
      detail::reject_unknown_attrs(tag, {"round"});
      TurnBlock turn;
      turn.round =
          detail::parse_int_attr(tag, detail::require_attr(tag, "round"),
                                 "round");
      PlanBlock plan;
      plan.round = turn.round;
      if (tag.kind == Tag::Kind::open) {
        for (;;) {
          scan.skip_inter_block_whitespace();
          Tag inner = scan.read_tag();
          if (inner.kind == Tag::Kind::close && inner.name == "plan") break;
          if (inner.name != "subtask") {
            throw ParseError(ParseCode::unexpected_element, inner.offset,
                             "<plan> may only contain <subtask> blocks");
          }
          detail::reject_unknown_attrs(inner, {"id", "depends_on"});
          PlanEntry entry;
          entry.id = detail::parse_int_attr(
              inner, detail::require_attr(inner, "id"), "id");
          if (const std::string* dep = inner.attr("depends_on")) {
            entry.depends_on = detail::parse_depends_on(inner, *dep);
          }
          if (inner.kind == Tag::Kind::open) {
            entry.description = detail::read_leaf_content(scan, "subtask");
          }
          plan.subtasks.push_back(std::move(entry));
        }
      }
      turn.plan = std::move(plan);
      doc.turns.push_back(std::move(turn));
      current_declared = doc.turns.back().declared_ids();
      open_turn = true;
      continue;
    }

    if (tag.name == "route") {
      detail::reject_unknown_attrs(tag, {"subtask", "model", "skill"});
      RouteBlock route;
      route.subtask_id = detail::parse_int_attr(
          tag, detail::require_attr(tag, "subtask"), "subtask");
      route.model = detail::require_attr(tag, "model");
      route.skill = detail::require_attr(tag, "skill");
      if (tag.kind == Tag::Kind::open) {
        route.payload = detail::read_leaf_content(scan, "route");
      }
      const bool joins_current =
          open_turn && current_declared.count(route.subtask_id) > 0;
      if (joins_current) {
        doc.turns.back().routes.push_back(std::move(route));
      } else {
        // A route outside its declaring turn opens a fresh implicit round
        // whose plan is the singleton subtask it names.
        TurnBlock turn;
        turn.round = next_round();
        turn.routes.push_back(std::move(route));
        doc.turns.push_back(std::move(turn));
        current_declared = doc.turns.back().declared_ids();
        open_turn = true;
      }
      continue;
    }

    if (tag.name == "obs") {
      detail::reject_unknown_attrs(tag, {"subtask"});
      if (!open_turn) {
        throw ParseError(ParseCode::unexpected_element, tag.offset,
                         "<obs> outside an open round");
      }
      ObsBlock obs;
      obs.subtask_id = detail::parse_int_attr(
          tag, detail::require_attr(tag, "subtask"), "subtask");
      if (tag.kind == Tag::Kind::open) {
        obs.text = detail::read_leaf_content(scan, "obs");
      }
      doc.turns.back().observations.push_back(std::move(obs));
      continue;
    }

    if (tag.name == "verify") {
      detail::reject_unknown_attrs(tag, {});
      if (!open_turn) {
        throw ParseError(ParseCode::unexpected_element, tag.offset,
                         "<verify> outside an open round");
      }
      VerifyBlock verify;
      if (tag.kind == Tag::Kind::open) {
        // Body: text with at most one <replan/> marker anywhere in it.
        for (;;) {
          verify.text += scan.read_text();
          Tag inner = scan.read_tag();
          if (inner.kind == Tag::Kind::close && inner.name == "verify") break;
          if (inner.name == "replan") {
            detail::reject_unknown_attrs(inner, {});
            if (inner.kind == Tag::Kind::open) {
              // Tolerate <replan></replan> as the marker form.
              Tag closer = scan.read_tag();
              if (closer.kind != Tag::Kind::close ||
                  closer.name != "replan") {
                throw ParseError(ParseCode::malformed_xml, closer.offset,
                                 "unterminated <replan>");
              }
            }
            if (verify.replan) {
              throw ParseError(ParseCode::unexpected_element, inner.offset,
                               "duplicate <replan/> marker");
            }
            verify.replan = true;
            continue;
          }
          throw ParseError(ParseCode::unexpected_element, inner.offset,
                           "<" + inner.name + "> may not appear in <verify>");
        }
      }
      doc.turns.back().verify = std::move(verify);
      open_turn = false;
      continue;
    }

    if (tag.name == "final_answer") {
      detail::reject_unknown_attrs(tag, {});
      std::string answer;
      if (tag.kind == Tag::Kind::open) {
        answer = detail::read_leaf_content(scan, "final_answer");
      }
      doc.final_answers.push_back(std::move(answer));
      open_turn = false;
      continue;
    }

    if (tag.name == "replan") {
      throw ParseError(ParseCode::unexpected_element, tag.offset,
                       "<replan/> outside <verify>");
    }
    if (tag.name == "trajectory" || tag.name == "query" ||
        tag.name == "subtask") {
      throw ParseError(ParseCode::unexpected_element, tag.offset,
                       "<" + tag.name + "> not allowed here");
    }
    throw ParseError(ParseCode::unknown_element, tag.offset,
                     "unknown element <" + tag.name + ">");
  }

  // Only trailing whitespace may follow the root close.
  scan.skip_inter_block_whitespace();
  if (!scan.at_end()) {
    throw ParseError(ParseCode::stray_prose, scan.pos(),
                     "content after </trajectory>");
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

inline ValidationReport validate_trajectory(
    const TrajectoryDoc& doc, const RouteVocabulary* vocab = nullptr) {
  ValidationReport report;
  const auto flag = [&report](const char* code, std::string location,
                              std::string message) {
    report.valid = false;
    report.violations.push_back(
        {code, std::move(location), std::move(message)});
  };

  // Exactly one final answer.
  if (doc.final_answers.size() != 1) {
    flag(kViolationSingleFinal, "trajectory",
         "expected exactly 1 final_answer, found " +
             std::to_string(doc.final_answers.size()));
  }

  // Round indices strictly increase and start at 1 or above.
  int prev_round = 0;
  for (std::size_t i = 0; i < doc.turns.size(); ++i) {
    const int r = doc.turns[i].round;
    if (r <= prev_round) {
      flag(kViolationMonotoneRounds, "turn " + std::to_string(i + 1),
           "round " + std::to_string(r) + " does not increase on " +
               std::to_string(prev_round));
    }
    prev_round = r;
  }

  // Dependency graph: every id strictly exceeds each of its dependencies and
  // every dependency is declared by this or an earlier turn. The ordering
  // rule alone rules out cycles; an explicit Kahn pass re-checks that
  // independently rather than trusting the inference.
  std::set<int> declared;
  std::vector<std::pair<int, int>> edges;  // dep -> id
  for (std::size_t i = 0; i < doc.turns.size(); ++i) {
    const TurnBlock& turn = doc.turns[i];
    const std::set<int> turn_ids = turn.declared_ids();
    declared.insert(turn_ids.begin(), turn_ids.end());
    if (!turn.plan) continue;
    for (const PlanEntry& entry : turn.plan->subtasks) {
      for (int dep : entry.depends_on) {
        const std::string loc =
            "turn " + std::to_string(i + 1) + " subtask " +
            std::to_string(entry.id);
        if (dep >= entry.id) {
          flag(kViolationDagAcyclic, loc,
               "depends_on " + std::to_string(dep) +
                   " is not strictly below id " + std::to_string(entry.id));
        } else if (declared.count(dep) == 0) {
          flag(kViolationDagAcyclic, loc,
               "depends_on " + std::to_string(dep) + " is never declared");
        } else {
          edges.emplace_back(dep, entry.id);
        }
      }
    }
  }
  {
    // Kahn's algorithm over the collected edges.
    std::map<int, int> indegree;
    std::map<int, std::vector<int>> out;
    for (int id : declared) indegree[id] = 0;
    for (const auto& [dep, id] : edges) {
      out[dep].push_back(id);
      ++indegree[id];
    }
    std::vector<int> queue;
    for (const auto& [id, deg] : indegree) {
      if (deg == 0) queue.push_back(id);
    }
    std::size_t visited = 0;
    while (!queue.empty()) {
      const int id = queue.back();
      queue.pop_back();
      ++visited;
      for (int succ : out[id]) {
        if (--indegree[succ] == 0) queue.push_back(succ);
      }
    }
    if (visited != indegree.size()) {
      flag(kViolationDagAcyclic, "trajectory",
           "dependency graph contains a cycle");
    }
  }

  // Routes must resolve against the supplied vocabulary.
  if (vocab != nullptr) {
    for (std::size_t i = 0; i < doc.turns.size(); ++i) {
      for (const RouteBlock& route : doc.turns[i].routes) {
        if (!vocab->resolves(route.model, route.skill)) {
          flag(kViolationClosedVocabulary,
               "turn " + std::to_string(i + 1) + " route subtask " +
                   std::to_string(route.subtask_id),
               "(" + route.model + ", " + route.skill +
                   ") does not resolve against the registry");
        }
      }
    }
  }

  return report;
}

// Parses and validates raw text. A route nested inside a route surfaces as
// the no-nested-route violation; every other structural fault still throws.
inline ValidationReport validate_text(std::string_view text,
                                      const RouteVocabulary* vocab = nullptr) {
  try {
    const TrajectoryDoc doc = parse_trajectory(text);
    return validate_trajectory(doc, vocab);
  } catch (const ParseError& err) {
    if (err.code() == ParseCode::nested_route) {
      ValidationReport report;
      report.valid = false;
      report.violations.push_back(
          {kViolationNestedRoute,
           "byte " + std::to_string(err.offset()), err.what()});
      return report;
    }
    throw;
  }
}

// ---------------------------------------------------------------------------
// Canonical serialization
// ---------------------------------------------------------------------------

// Serialization without the validity gate: used to render documents that
// are still being built (no final answer yet). Round-trip guarantees only
// hold for valid documents.
inline std::string render_trajectory(const TrajectoryDoc& doc) {
  std::string out;
  out += "<trajectory>\n";
  out += "<query>";
  detail::escape_into(out, doc.query, false);
  out += "</query>\n";
  for (const TurnBlock& turn : doc.turns) {
    if (turn.plan) {
      out += "<plan round=\"" + std::to_string(turn.round) + "\">\n";
      for (const PlanEntry& entry : turn.plan->subtasks) {
        out += "<subtask id=\"" + std::to_string(entry.id) + "\" depends_on=\"";
        bool first = true;
        for (int dep : entry.depends_on) {
          if (!first) out += ',';
          out += std::to_string(dep);
          first = false;
        }
        out += "\">";
        detail::escape_into(out, entry.description, false);
        out += "</subtask>\n";
      }
      out += "</plan>\n";
    }
    for (const RouteBlock& route : turn.routes) {
      out += "<route subtask=\"" + std::to_string(route.subtask_id) +
             "\" model=\"";
      detail::escape_into(out, route.model, true);
      out += "\" skill=\"";
      detail::escape_into(out, route.skill, true);
      out += "\">";
      detail::escape_into(out, route.payload, false);
      out += "</route>\n";
    }
    for (const ObsBlock& obs : turn.observations) {
      out += "<obs subtask=\"" + std::to_string(obs.subtask_id) + "\">";
      detail::escape_into(out, obs.text, false);
      out += "</obs>\n";
    }
    if (turn.verify) {
      out += "<verify>";
      if (turn.verify->replan) out += "<replan/>";
      detail::escape_into(out, turn.verify->text, false);
      out += "</verify>\n";
    }
  }
  for (const std::string& answer : doc.final_answers) {
    out += "<final_answer>";
    detail::escape_into(out, answer, false);
    out += "</final_answer>\n";
  }
  out += "</trajectory>\n";
  return out;
}

inline std::string serialize_trajectory(const TrajectoryDoc& doc) {
  const ValidationReport report = validate_trajectory(doc);
  if (!report.valid) {
    throw SerializeError(report.violations.front().code + " at " +
                         report.violations.front().location);
  }
  return render_trajectory(doc);
}

// ---------------------------------------------------------------------------
// Behaviour classification
// ---------------------------------------------------------------------------

enum class BehaviourLabel { lazy, oneshot, continuation, decomp_repair };

inline const char* to_string(BehaviourLabel label) {
  switch (label) {
    case BehaviourLabel::lazy:
      return "lazy";
    case BehaviourLabel::oneshot:
      return "oneshot";
    case BehaviourLabel::continuation:
      return "continuation";
    case BehaviourLabel::decomp_repair:
      return "decomp_repair";
  }
  return "unknown";
}

inline BehaviourLabel behaviour_from_string(std::string_view name) {
  if (name == "lazy") return BehaviourLabel::lazy;
  if (name == "oneshot") return BehaviourLabel::oneshot;
  if (name == "continuation") return BehaviourLabel::continuation;
  if (name == "decomp_repair") return BehaviourLabel::decomp_repair;
  throw std::invalid_argument("unknown behaviour label: " +
                              std::string(name));
}

// Assigns exactly one label to every valid document:
//   lazy           no plan blocks and no routes at all;
//   decomp_repair  a replanning verify with an explicit plan in a later turn;
//   oneshot        exactly one explicit plan and routing confined to its turn;
//   continuation   everything else (implicit single-route rounds, mixed
//                  follow-up routing).
inline BehaviourLabel classify_behaviour(const TrajectoryDoc& doc) {
  const ValidationReport report = validate_trajectory(doc);
  if (!report.valid) {
    throw ClassifyError(report.violations.front().code + " at " +
                        report.violations.front().location);
  }

  bool any_plan = false;
  bool any_route = false;
  for (const TurnBlock& turn : doc.turns) {
    any_plan |= !turn.implicit();
    any_route |= !turn.routes.empty();
  }
  if (!any_plan && !any_route) return BehaviourLabel::lazy;

  for (std::size_t i = 0; i < doc.turns.size(); ++i) {
    if (!doc.turns[i].verify || !doc.turns[i].verify->replan) continue;
    for (std::size_t j = i + 1; j < doc.turns.size(); ++j) {
      if (!doc.turns[j].implicit()) return BehaviourLabel::decomp_repair;
    }
  }

  std::size_t plan_count = 0;
  std::size_t plan_turn = 0;
  for (std::size_t i = 0; i < doc.turns.size(); ++i) {
    if (!doc.turns[i].implicit()) {
      ++plan_count;
      plan_turn = i;
    }
  }
  if (plan_count == 1) {
    bool routed_elsewhere = false;
    for (std::size_t i = 0; i < doc.turns.size(); ++i) {
      if (i != plan_turn && !doc.turns[i].routes.empty()) {
        routed_elsewhere = true;
      }
    }
    if (!routed_elsewhere) return BehaviourLabel::oneshot;
  }
  return BehaviourLabel::continuation;
}

// ---------------------------------------------------------------------------
// Corpus ingestion
// ---------------------------------------------------------------------------

struct CorpusEntry {
  std::string source;  // file path, with #N suffix for stream entries
  std::string text;
};

// Splits a concatenated stream on lines consisting of `===`.
inline std::vector<CorpusEntry> read_corpus_stream(std::string_view text,
                                                   std::string_view source) {
  std::vector<CorpusEntry> entries;
  std::string current;
  std::size_t index = 0;
  const auto emit = [&]() {
    if (!trim_view(current).empty()) {
      entries.push_back({std::string(source) + "#" + std::to_string(index),
                         current});
      ++index;
    }
    current.clear();
  };
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    if (trim_view(line) == "===") {
      emit();
    } else {
      current += line;
      current += '\n';
    }
    start = end + 1;
  }
  emit();
  return entries;
}

// Reads a corpus from a stream file or a directory tree (files visited in
// sorted path order; each file may itself be a multi-entry stream).
inline std::vector<CorpusEntry> read_corpus_path(
    const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const auto read_file = [](const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) {
      throw std::runtime_error("cannot read " + file.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  };

  std::vector<CorpusEntry> entries;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& item : fs::recursive_directory_iterator(path)) {
      if (item.is_regular_file()) files.push_back(item.path());
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& file : files) {
      for (CorpusEntry& e :
           read_corpus_stream(read_file(file), file.string())) {
        entries.push_back(std::move(e));
      }
    }
  } else {
    entries = read_corpus_stream(read_file(path), path.string());
  }
  return entries;
}

struct CorpusReport {
  std::map<std::string, int> counts;  // label name -> frequency
  std::vector<std::pair<std::string, BehaviourLabel>> labels;
  int total = 0;
};

inline CorpusReport classify_corpus(const std::vector<CorpusEntry>& entries) {
  CorpusReport report;
  for (const CorpusEntry& entry : entries) {
    const TrajectoryDoc doc = parse_trajectory(entry.text);
    const BehaviourLabel label = classify_behaviour(doc);
    ++report.counts[to_string(label)];
    report.labels.emplace_back(entry.source, label);
    ++report.total;
  }
  return report;
}

}  // namespace orchestra::grammar
