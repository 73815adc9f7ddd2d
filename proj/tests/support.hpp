#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "compkg/eei_model.hpp"
#include "compkg/ingest.hpp"
#include "compkg/kgraph.hpp"
#include "compkg/trigraph.hpp"

namespace compkg::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

ingest::EntityEntry entry(const std::string& id, const std::string& name,
                          std::vector<std::string> aliases = {}, std::int64_t conversions = 0,
                          std::int64_t clicks = 0);

/// Small random corpus: every item assigned to entity (index % entities),
/// every entity with one or two complementary successors, users with random
/// clicks/conversions and bills inside a 30-day window before `as_of`.
struct ToyWorld {
  std::vector<ingest::Item> items;
  std::vector<ingest::Bill> bills;
  ingest::InteractionLog log;
  kgraph::ComplementaryGraph graph;
  std::int64_t as_of = 0;
};

ToyWorld toy_world(std::size_t users, std::size_t items, std::size_t entities,
                   std::size_t feature_dim, std::uint64_t seed);
eei::TriGraph toy_trigraph(const ToyWorld& w, int window_days = 30);

/// Random (entity, item, label) triples with both labels present.
std::vector<eei::EeiSample> random_samples(const eei::TriGraph& g, std::size_t n,
                                           std::uint64_t seed);

/// Model with every parameter drawn uniformly from [-scale, scale].
eei::EeiModel random_model(const eei::TriGraph& g, const eei::Hyperparams& hp, double scale,
                           std::uint64_t seed);

/// Random gazetteer over a small vocabulary so names share prefixes and
/// overlap often; every surface form belongs to exactly one entity.
std::vector<ingest::EntityEntry> random_gazetteer(std::mt19937_64& rng, std::size_t entities);
/// Random text over the same vocabulary plus filler words.
std::string random_text(std::mt19937_64& rng, std::size_t words);

/// Independent extractor: enumerate every span, then walk left to right
/// taking the longest hit at each position.
std::vector<EntityId> brute_force_extract(const std::string& text,
                                          const std::vector<ingest::EntityEntry>& entries);

}  // namespace compkg::testing
