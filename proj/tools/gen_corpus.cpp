// Regenerates the checked-in behaviour corpus: a `===`-separated trajectory
// stream plus a manifest recording each entry's expected label. The mode mix
// pins the one-decimal frequencies 15.6 / 49.5 / 30.4 / 4.4 percent; those
// figures sum to 99.9%, so the stream holds 999 entries, which puts every
// mode count exactly at its nominal rate. Output is a pure function of the
// seed, so a regeneration with the default seed is byte-identical to the
// files in data/corpus.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "orchestra/grammar.hpp"
#include "support/generators.hpp"

namespace {

using orchestra::grammar::BehaviourLabel;

constexpr int kLazy = 156;
constexpr int kOneshot = 495;
constexpr int kContinuation = 304;
constexpr int kDecompRepair = 44;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"behaviour corpus generator"};
  std::string out_dir = "data/corpus";
  std::uint64_t seed = 7;
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);

  orchestra::testgen::Rng rng(seed);

  std::vector<BehaviourLabel> labels;
  labels.insert(labels.end(), kLazy, BehaviourLabel::lazy);
  labels.insert(labels.end(), kOneshot, BehaviourLabel::oneshot);
  labels.insert(labels.end(), kContinuation, BehaviourLabel::continuation);
  labels.insert(labels.end(), kDecompRepair, BehaviourLabel::decomp_repair);
  for (std::size_t i = labels.size(); i > 1; --i) {
    std::swap(labels[i - 1], labels[rng.below(i)]);
  }

  std::string stream;
  nlohmann::json manifest_labels = nlohmann::json::array();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    orchestra::grammar::TrajectoryDoc doc;
    switch (labels[i]) {
      case BehaviourLabel::lazy:
        doc = orchestra::testgen::make_lazy(rng);
        break;
      case BehaviourLabel::oneshot:
        doc = orchestra::testgen::make_oneshot(rng);
        break;
      case BehaviourLabel::continuation:
        doc = orchestra::testgen::make_continuation(rng);
        break;
      case BehaviourLabel::decomp_repair:
        doc = orchestra::testgen::make_decomp_repair(rng);
        break;
    }
    if (i > 0) stream += "===\n";
    stream += orchestra::grammar::serialize_trajectory(doc);
    manifest_labels.push_back(orchestra::grammar::to_string(labels[i]));
  }

  const nlohmann::json manifest = {
      {"total", static_cast<int>(labels.size())},
      {"counts",
       {{"lazy", kLazy},
        {"oneshot", kOneshot},
        {"continuation", kContinuation},
        {"decomp_repair", kDecompRepair}}},
      {"labels", manifest_labels}};

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  {
    std::ofstream os(fs::path(out_dir) / "corpus.stream", std::ios::binary);
    os << stream;
  }
  {
    std::ofstream os(fs::path(out_dir) / "manifest.json", std::ios::binary);
    os << manifest.dump(2) << "\n";
  }
  std::cout << labels.size() << " trajectories -> " << out_dir << "\n";
  return 0;
}
