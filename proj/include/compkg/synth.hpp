#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "compkg/common.hpp"
#include "compkg/ingest.hpp"
#include "compkg/oracle.hpp"
#include "compkg/pairgen.hpp"

namespace compkg::synth {

struct SyntheticSpec {
  std::size_t entities = 100;
  double head_fraction = 0.2;  // share of entities in the head
  double head_share = 0.8;     // share of sessions whose bill entity is in the head
  double tail_exponent = 1.0;  // Zipf exponent inside the tail
  std::size_t users = 200;
  std::size_t items_per_entity = 30;
  std::size_t unmatched_items = 10;  // titles naming no entity
  std::size_t feature_dim = 8;
  int days = 60;
  std::size_t sessions_per_user = 12;
  std::size_t complementary_exposures = 2;
  std::size_t random_exposures = 3;
  double click_noise = 0.1;
  double conversion_rate = 0.3;
  std::size_t min_out_degree = 2;
  std::size_t max_out_degree = 3;
  /// Generated successors are drawn uniformly from the most popular
  /// core_fraction of entities.
  double core_fraction = 0.2;
  /// Explicit planted edges by entity id; generated when empty.
  std::vector<pairgen::EntityPair> planted;
  std::int64_t start_timestamp = 1704067200;  // 2024-01-01T00:00:00Z
  std::uint64_t seed = 1;

  /// Throws UsageError on rates outside [0,1] or degenerate sizes.
  void validate() const;
};

struct GroundTruth {
  std::map<EntityId, std::string> names;
  std::set<pairgen::EntityPair> edges;
  std::map<ItemId, double> quality;
  double click_noise = 0.0;
  double conversion_rate = 0.0;

  bool complementary(const EntityId& a, const EntityId& b) const { return edges.count({a, b}) != 0; }
  double click_probability(const EntityId& bill_entity, const EntityId& item_entity,
                           const ItemId& item) const;
  /// Truth table for the stub backend, keyed by display names.
  oracle::StubBackend::Table stub_table() const;
};

struct SyntheticCorpus {
  ingest::EntityDict dict;
  std::vector<ingest::Item> items;  // entity left unassigned, as raw input
  std::vector<ingest::Bill> bills;
  ingest::InteractionLog log;
  GroundTruth truth;
  std::vector<EntityId> head;  // entities of the head segment
};

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

std::string format_truth(const GroundTruth& truth);
GroundTruth parse_truth(const std::string& content, const std::string& source = "truth");

struct CorpusPaths {
  std::filesystem::path items, bills, logs, dict, truth;
};

/// Writes items.tsv, bills.tsv, logs.csv, dict.tsv and truth.tsv into `dir`.
CorpusPaths write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

/// Share of log rows whose item belongs to a head entity.
double head_event_share(const SyntheticCorpus& corpus);

}  // namespace compkg::synth
