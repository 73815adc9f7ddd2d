#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "compkg/common.hpp"
#include "compkg/eei_model.hpp"
#include "compkg/ingest.hpp"
#include "compkg/kgraph.hpp"
#include "compkg/pairgen.hpp"

namespace compkg::serve {

/// Assigned items grouped by entity, with item tower embeddings computed once.
class ItemCatalog {
 public:
  ItemCatalog(const eei::Scorer& scorer, const std::vector<ingest::Item>& items);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const ItemId& id(std::size_t i) const { return ids_[i]; }
  const EntityId& entity(std::size_t i) const { return entity_[i]; }
  std::span<const double> features(std::size_t i) const { return features_[i]; }
  std::span<const double> embedding(std::size_t i) const {
    return {embeddings_.data() + i * dim_, dim_};
  }
  std::optional<std::size_t> find(const ItemId& id) const;
  /// Item indices of an entity in input order; empty for unknown entities.
  const std::vector<std::size_t>& items_of(const EntityId& e) const;

 private:
  std::size_t dim_ = 0;
  std::vector<ItemId> ids_;
  std::vector<EntityId> entity_;
  std::vector<std::vector<double>> features_;
  std::vector<double> embeddings_;
  std::unordered_map<ItemId, std::size_t> index_;
  std::unordered_map<EntityId, std::vector<std::size_t>> by_entity_;
};

struct RecallCandidate {
  ItemId item;
  EntityId e1;  // bill entity
  EntityId e2;  // entity of the item
  double score = 0.0;
  bool operator==(const RecallCandidate&) const = default;
};

constexpr std::size_t kDefaultRecallK = 50;

/// Items of the successors of the distinct bill entities, scored against the
/// bill entity that reaches them. An item reachable from several bill
/// entities keeps its best score. Global top-k by score, ties by item id.
/// Bill entities unknown to the model are skipped. Throws UsageError for k = 0.
std::vector<RecallCandidate> complementary_recall(std::span<const EntityId> bill_sequence,
                                                  const kgraph::ComplementaryGraph& graph,
                                                  const eei::Scorer& scorer,
                                                  const ItemCatalog& catalog,
                                                  std::size_t k = kDefaultRecallK);

/// Items by clicks in rows with timestamp <= until, descending, ties by id.
std::vector<ItemId> popularity_ranking(const ingest::InteractionLog& log, std::int64_t until);

struct EnrichedSample {
  std::vector<double> base;  // (user, item) features as given
  double eei_score = 0.0;
  bool has_path = false;
  EntityId source_entity;    // bill entity attaining the score; empty without a path
  std::vector<double> entity_embedding;
  std::vector<double> item_embedding;
};

/// Max-scoring bill entity e1 with e1 -> entity(item); score 0 and zero
/// embeddings when no such entity exists or the item is not in the catalog.
EnrichedSample enrich_sample(std::span<const double> base, std::span<const EntityId> bill_sequence,
                             const ItemId& item, const kgraph::ComplementaryGraph& graph,
                             const eei::Scorer& scorer, const ItemCatalog& catalog);

enum class FeatureSet { Base, WithEei };
const char* feature_set_name(FeatureSet s);

/// Base: the base features. WithEei: base, eei score, path flag, entity
/// embedding, item embedding.
std::vector<double> ranker_features(const EnrichedSample& s, FeatureSet set);

struct RankerConfig {
  std::size_t hidden = 16;
  int epochs = 30;
  double learning_rate = 0.05;
  std::size_t batch_size = 64;
  double l2 = 1e-4;
  std::uint64_t seed = 1;
};

/// One-hidden-layer click model on standardized inputs:
/// logit = w2 . tanh(W1 x + b1) + b2.
class FineRanker {
 public:
  static FineRanker fit(const std::vector<std::vector<double>>& rows,
                        const std::vector<double>& labels, FeatureSet set,
                        const RankerConfig& config);

  FeatureSet feature_set() const { return set_; }
  std::size_t input_dim() const { return mean_.size(); }
  /// Throws DataError when the row width differs from input_dim().
  double predict(std::span<const double> row) const;
  double predict(const EnrichedSample& s) const { return predict(ranker_features(s, set_)); }

  std::string serialize() const;
  static FineRanker deserialize(const std::string& content);

 private:
  FeatureSet set_ = FeatureSet::Base;
  std::size_t hidden_ = 0;
  std::vector<double> mean_, scale_, w1_, b1_, w2_;
  double b2_ = 0.0;
};

struct RankedList {
  std::vector<ItemId> items;
  std::vector<double> scores;  // non-increasing
};

/// Stable sort of candidates by ranker score. Throws DataError when the
/// candidate and feature counts differ or a feature row has the wrong width.
RankedList fine_rank(std::span<const ItemId> candidates, std::span<const EnrichedSample> features,
                     const FineRanker& ranker);

/// Rank-sum AUC with ties counted one half. Labels are 0/1. Throws
/// UsageError on a length mismatch and DataError on single-class input.
double auc(std::span<const double> scores, std::span<const double> labels);

struct HitRate {
  std::size_t queries = 0;
  std::size_t hits = 0;
  double rate() const { return queries ? double(hits) / double(queries) : 0.0; }
};

/// A query hits when any target is in the first k recommendations. Queries
/// without targets are skipped.
HitRate hit_rate(const std::vector<std::vector<ItemId>>& recommended,
                 const std::vector<std::set<ItemId>>& targets, std::size_t k);

enum class Arm { Baseline, Experiment };
const char* arm_name(Arm a);
Arm parse_arm(std::string_view s);

/// One exposure of an item of e2 shown after a bill containing e1.
struct ArmExposure {
  Arm arm = Arm::Baseline;
  EntityId e1;
  EntityId e2;
  bool converted = false;
};

struct CvrCell {
  EntityId e1, e2;
  std::size_t exposures_baseline = 0, conversions_baseline = 0;
  std::size_t exposures_experiment = 0, conversions_experiment = 0;
  /// CVR_experiment - CVR_baseline; absent unless both arms have exposures.
  std::optional<double> delta;
};

/// One cell per pair of `universe`, in universe order.
std::vector<CvrCell> cvr_matrix(std::span<const ArmExposure> exposures,
                                std::span<const pairgen::EntityPair> universe);

/// Rows e1,e2,delta with "absent" for missing cells.
std::string format_cvr_matrix(std::span<const CvrCell> cells);
std::string format_arm_exposures(std::span<const ArmExposure> rows);
std::vector<ArmExposure> parse_arm_exposures(const std::string& content,
                                             const std::string& source = "arm log");

}  // namespace compkg::serve
