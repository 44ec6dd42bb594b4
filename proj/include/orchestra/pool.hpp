#pragma once

// Worker pool registry: the closed vocabulary of workers and primitives that
// routes resolve against, per-pair pricing, and the seeded anonymization the
// router-facing catalogue uses.
//
// Money is held as integer nano-USD throughout (1 USD = 1e9). Catalogue
// prices are quoted in USD per million tokens, so one quoted unit is exactly
// one micro-USD per mille tokens; nano resolution keeps every per-call cost
// and every ledger total exact in integer arithmetic.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "orchestra/common.hpp"
#include "orchestra/grammar.hpp"

namespace orchestra::pool {

class RegistryError : public std::runtime_error {
 public:
  explicit RegistryError(const std::string& what)
      : std::runtime_error("registry: " + what) {}
};

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

struct PriceSheet {
  std::int64_t prompt_nano_per_token = 0;
  std::int64_t completion_nano_per_token = 0;

  [[nodiscard]] double prompt_usd_per_mtok() const {
    return static_cast<double>(prompt_nano_per_token) / 1e3;
  }
  [[nodiscard]] double completion_usd_per_mtok() const {
    return static_cast<double>(completion_nano_per_token) / 1e3;
  }

  bool operator==(const PriceSheet&) const = default;
};

struct PrimitiveSpec {
  std::string id;
  std::string family;
  std::string description;

  bool operator==(const PrimitiveSpec&) const = default;
};

struct WorkerSpec {
  std::string id;
  std::string model;  // upstream model name for HTTP calls; defaults to id
  PriceSheet price;
  std::vector<std::string> skills;  // primitive ids this worker accepts
  std::string endpoint;             // empty => no HTTP backend
  nlohmann::json scripted;          // opaque here; the workers module reads it

  bool operator==(const WorkerSpec&) const = default;
};

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

class Registry {
 public:
  Registry() = default;
  Registry(std::vector<WorkerSpec> workers,
           std::vector<PrimitiveSpec> primitives)
      : workers_(std::move(workers)), primitives_(std::move(primitives)) {
    check();
  }

  [[nodiscard]] const std::vector<WorkerSpec>& workers() const {
    return workers_;
  }
  [[nodiscard]] const std::vector<PrimitiveSpec>& primitives() const {
    return primitives_;
  }

  [[nodiscard]] const WorkerSpec* worker(std::string_view id) const {
    for (const WorkerSpec& w : workers_) {
      if (w.id == id) return &w;
    }
    return nullptr;
  }

  [[nodiscard]] const PrimitiveSpec* primitive(std::string_view id) const {
    for (const PrimitiveSpec& p : primitives_) {
      if (p.id == id) return &p;
    }
    return nullptr;
  }

  // A pair is admissible iff the worker lists the primitive.
  [[nodiscard]] bool admissible(std::string_view worker_id,
                                std::string_view primitive_id) const {
    const WorkerSpec* w = worker(worker_id);
    if (w == nullptr || primitive(primitive_id) == nullptr) return false;
    for (const std::string& s : w->skills) {
      if (s == primitive_id) return true;
    }
    return false;
  }

  [[nodiscard]] std::vector<std::pair<std::string, std::string>>
  admissible_pairs() const {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const WorkerSpec& w : workers_) {
      for (const std::string& s : w.skills) pairs.emplace_back(w.id, s);
    }
    return pairs;
  }

  [[nodiscard]] grammar::RouteVocabulary vocabulary() const {
    grammar::RouteVocabulary vocab;
    for (const WorkerSpec& w : workers_) {
      vocab.models.insert(w.id);
      for (const std::string& s : w.skills) vocab.admissible.insert({w.id, s});
    }
    for (const PrimitiveSpec& p : primitives_) vocab.skills.insert(p.id);
    return vocab;
  }

 private:
  void check() const {
    if (workers_.empty()) throw RegistryError("no workers");
    if (primitives_.empty()) throw RegistryError("no primitives");
    std::set<std::string> seen;
    for (const PrimitiveSpec& p : primitives_) {
      if (p.id.empty()) throw RegistryError("primitive with empty id");
      if (!seen.insert(p.id).second) {
        throw RegistryError("duplicate primitive id " + p.id);
      }
    }
    std::set<std::string> worker_ids;
    for (const WorkerSpec& w : workers_) {
      if (w.id.empty()) throw RegistryError("worker with empty id");
      if (!worker_ids.insert(w.id).second) {
        throw RegistryError("duplicate worker id " + w.id);
      }
      if (w.price.prompt_nano_per_token < 0 ||
          w.price.completion_nano_per_token < 0) {
        throw RegistryError("negative price for " + w.id);
      }
      if (w.skills.empty()) {
        throw RegistryError("worker " + w.id + " lists no skills");
      }
      for (const std::string& s : w.skills) {
        if (seen.count(s) == 0) {
          throw RegistryError("worker " + w.id + " lists unknown skill " + s);
        }
      }
    }
  }

  std::vector<WorkerSpec> workers_;
  std::vector<PrimitiveSpec> primitives_;
};

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

namespace detail {

// Quoted USD-per-million-token price -> integer nano-USD per token. Quotes
// are accepted down to micro-cent resolution; anything finer is rejected
// rather than silently rounded.
inline std::int64_t price_to_nano(double usd_per_mtok, const std::string& who) {
  if (usd_per_mtok < 0) throw RegistryError("negative price for " + who);
  const double scaled = usd_per_mtok * 1e3;
  const auto nano = static_cast<std::int64_t>(std::llround(scaled));
  if (std::fabs(scaled - static_cast<double>(nano)) > 1e-6) {
    throw RegistryError("price for " + who +
                        " is finer than nano-USD/token resolution");
  }
  return nano;
}

}  // namespace detail

inline Registry load_registry(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("workers") ||
      !doc.contains("primitives")) {
    throw RegistryError("expected top-level keys: workers, primitives");
  }

  std::vector<PrimitiveSpec> primitives;
  for (const auto& item : doc.at("primitives")) {
    PrimitiveSpec spec;
    spec.id = item.at("id").get<std::string>();
    spec.family = item.value("family", std::string{});
    spec.description = item.value("description", std::string{});
    primitives.push_back(std::move(spec));
  }

  std::vector<WorkerSpec> workers;
  for (const auto& item : doc.at("workers")) {
    WorkerSpec spec;
    spec.id = item.at("id").get<std::string>();
    spec.model = item.value("model", spec.id);
    const auto& price = item.at("price");
    spec.price.prompt_nano_per_token =
        detail::price_to_nano(price.at("prompt").get<double>(), spec.id);
    spec.price.completion_nano_per_token =
        detail::price_to_nano(price.at("completion").get<double>(), spec.id);
    for (const auto& s : item.at("skills")) {
      spec.skills.push_back(s.get<std::string>());
    }
    spec.endpoint = item.value("endpoint", std::string{});
    if (item.contains("scripted")) spec.scripted = item.at("scripted");
    workers.push_back(std::move(spec));
  }

  return Registry(std::move(workers), std::move(primitives));
}

inline Registry load_registry_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RegistryError("cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& err) {
    throw RegistryError("bad JSON in " + path + ": " + err.what());
  }
  return load_registry(doc);
}

// ---------------------------------------------------------------------------
// Cost
// ---------------------------------------------------------------------------

// cost = prompt_tokens/1e6 * prompt_price + completion_tokens/1e6 *
// completion_price, carried out exactly in nano-USD.
inline std::int64_t pair_cost_nano(const PriceSheet& price,
                                   const UsageRecord& usage) {
  if (usage.prompt_tokens < 0 || usage.completion_tokens < 0) {
    throw std::invalid_argument("negative token count");
  }
  return usage.prompt_tokens * price.prompt_nano_per_token +
         usage.completion_tokens * price.completion_nano_per_token;
}

inline double pair_cost_usd(const PriceSheet& price,
                            const UsageRecord& usage) {
  return static_cast<double>(pair_cost_nano(price, usage)) / 1e9;
}

inline double nano_to_usd(std::int64_t nano) {
  return static_cast<double>(nano) / 1e9;
}

// ---------------------------------------------------------------------------
// Anonymization
// ---------------------------------------------------------------------------

// Router-facing catalogue: the same workers under positional labels
// "Worker 1".."Worker K", ordered by a seeded permutation. Identity never
// leaks through the label; callers resolve labels back through the view.
struct AnonymizedView {
  std::vector<std::string> labels;             // presentation order
  std::map<std::string, std::string> label_to_id;
  std::map<std::string, std::string> id_to_label;

  [[nodiscard]] const std::string* resolve(const std::string& label) const {
    const auto it = label_to_id.find(label);
    return it == label_to_id.end() ? nullptr : &it->second;
  }

  [[nodiscard]] const std::string& label_for(const std::string& id) const {
    return id_to_label.at(id);
  }
};

inline AnonymizedView anonymize_pool(const Registry& registry,
                                     std::uint64_t seed) {
  const std::size_t n = registry.workers().size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  // Fisher-Yates driven by the shared splitmix stream.
  std::uint64_t state = mix_seed(seed, "pool-anonymize");
  for (std::size_t i = n; i > 1; --i) {
    state = splitmix64(state);
    const std::size_t j = state % i;
    std::swap(order[i - 1], order[j]);
  }

  AnonymizedView view;
  for (std::size_t k = 0; k < n; ++k) {
    const std::string label = "Worker " + std::to_string(k + 1);
    const std::string& id = registry.workers()[order[k]].id;
    view.labels.push_back(label);
    view.label_to_id[label] = id;
    view.id_to_label[id] = label;
  }
  return view;
}

}  // namespace orchestra::pool
