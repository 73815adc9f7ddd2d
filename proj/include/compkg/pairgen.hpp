#pragma once

#include <compare>
#include <string>
#include <vector>

#include "compkg/common.hpp"
#include "compkg/ingest.hpp"

namespace compkg::pairgen {

struct Thresholds {
  double q_extreme = 0.02;
  double q_popular = 0.30;
};

/// The three sets partition the entity set; each is sorted by id.
struct PopularityTiers {
  std::vector<EntityId> extremely_popular;
  std::vector<EntityId> popular;
  std::vector<EntityId> unpopular;
  Thresholds thresholds;

  std::size_t size() const {
    return extremely_popular.size() + popular.size() + unpopular.size();
  }
};

/// Ordered pair: `first` is bought, `second` is the candidate follow-up.
struct EntityPair {
  EntityId first;
  EntityId second;
  auto operator<=>(const EntityPair&) const = default;
};

enum class Segment { Head, ExtremeTail };
const char* segment_tag(Segment s);
Segment parse_segment(std::string_view tag);

struct TaggedPair {
  EntityPair pair;
  Segment segment;
  bool operator==(const TaggedPair&) const = default;
};

std::vector<EntityId> rank_entities(const ingest::EntityDict& dict);

/// Throws UsageError unless 0 < q_extreme < q_popular < 1.
PopularityTiers tier_entities(const std::vector<EntityId>& ranked, Thresholds thresholds);

/// Ordered pairs within extreme ∪ popular, plus both orientations of every
/// extreme × unpopular pair. Sorted by (first, second), no duplicates.
/// Rows are built in parallel over the head set.
std::vector<TaggedPair> generate_pairs(const PopularityTiers& tiers);

/// Single-threaded reference for generate_pairs.
std::vector<TaggedPair> generate_pairs_serial(const PopularityTiers& tiers);

struct BudgetReport {
  std::size_t entities = 0;
  std::size_t extremely_popular = 0;
  std::size_t popular = 0;
  std::size_t unpopular = 0;
  std::size_t head_pairs = 0;
  std::size_t extreme_tail_pairs = 0;
  std::size_t total_pairs = 0;
  std::size_t exhaustive_ordered = 0;  // n(n-1)
  double savings = 0.0;                // 1 - total / exhaustive
  bool empty() const { return entities == 0; }
};

BudgetReport pair_budget_report(const std::vector<TaggedPair>& pairs, const PopularityTiers& tiers);
std::string format_budget_report(const BudgetReport& report);

std::string format_pairs(const std::vector<TaggedPair>& pairs);
std::vector<TaggedPair> parse_pairs(const std::string& content, const std::string& source = "pairs");

}  // namespace compkg::pairgen
