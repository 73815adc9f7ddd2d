#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "compkg/common.hpp"
#include "compkg/oracle.hpp"

namespace compkg::kgraph {

struct Provenance {
  std::string model_id;
  Day date = 0;
  bool operator==(const Provenance&) const = default;
};

struct Edge {
  Provenance provenance;
  std::optional<double> weight;  // in [0, 1] when set
  bool operator==(const Edge&) const = default;
};

/// Directed entity graph. At most one edge per ordered pair, no self loops,
/// endpoints always nodes of the graph.
class ComplementaryGraph {
 public:
  using Successors = std::map<EntityId, Edge>;

  ComplementaryGraph() = default;
  explicit ComplementaryGraph(std::set<EntityId> nodes) : nodes_(std::move(nodes)) {}

  const std::set<EntityId>& nodes() const { return nodes_; }
  const std::map<EntityId, Successors>& adjacency() const { return out_; }
  bool has_node(const EntityId& e) const { return nodes_.count(e) != 0; }
  const Edge* edge(const EntityId& first, const EntityId& second) const;
  std::size_t edge_count() const;

  void add_node(const EntityId& e) { nodes_.insert(e); }
  /// Removes the node with every incident edge; returns the number of edges dropped.
  std::size_t remove_node(const EntityId& e);
  void set_edge(const EntityId& first, const EntityId& second, Edge edge);
  bool remove_edge(const EntityId& first, const EntityId& second);
  void set_weight(const EntityId& first, const EntityId& second, std::optional<double> weight);

  /// Latest verdict day applied so far (Y or N).
  std::optional<Day> latest_date() const { return latest_; }
  void note_date(Day d) { latest_ = latest_ ? std::max(*latest_, d) : d; }

  /// Structural equality: nodes and edges including provenance and weight.
  bool operator==(const ComplementaryGraph& o) const {
    return nodes_ == o.nodes_ && out_ == o.out_;
  }

 private:
  std::set<EntityId> nodes_;
  std::map<EntityId, Successors> out_;
  std::optional<Day> latest_;
};

/// Y verdicts add or refresh edges, N verdicts delete the ordered edge, in
/// stream order (last writer wins). A re-affirmed edge keeps its weight.
/// Throws DataError listing every verdict endpoint missing from the graph.
ComplementaryGraph upsert_edges(const ComplementaryGraph& graph,
                                std::span<const oracle::OracleVerdict> verdicts);

/// Drops `retired` nodes and their edges, then upserts `daily`. Throws
/// DataError if any daily verdict predates the graph's latest day.
ComplementaryGraph incremental_update(const ComplementaryGraph& graph,
                                      std::span<const oracle::OracleVerdict> daily,
                                      const std::set<EntityId>& retired);

struct Neighbor {
  EntityId entity;
  std::optional<double> weight;
  bool operator==(const Neighbor&) const = default;
};

/// Successors by weight descending, unset weights last, then id.
std::vector<Neighbor> neighbors(const ComplementaryGraph& graph, const EntityId& entity);

using RawScorer = std::function<double(const EntityId& bill_entity, const ItemId& item)>;
using ItemIndex = std::map<EntityId, std::vector<ItemId>>;

/// weight(e1 -> e2) = mean over items of e2 of sigmoid(score(e1, item)).
/// Edges whose target has no items keep an unset weight. Never adds or
/// removes edges.
ComplementaryGraph apply_feedback_weights(const ComplementaryGraph& graph, const RawScorer& score,
                                          const ItemIndex& item_index);

class FormatVersionError : public DataError {
 public:
  using DataError::DataError;
};
class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

constexpr int kGraphFormatVersion = 1;

std::string serialize(const ComplementaryGraph& graph);
ComplementaryGraph deserialize(const std::string& content);
void persist(const ComplementaryGraph& graph, const std::filesystem::path& path);
ComplementaryGraph load(const std::filesystem::path& path);

/// Publishes immutable graph snapshots; readers never see a half-applied update.
class GraphStore {
 public:
  explicit GraphStore(ComplementaryGraph initial = {});
  std::shared_ptr<const ComplementaryGraph> snapshot() const;
  void update(const std::function<ComplementaryGraph(const ComplementaryGraph&)>& fn);

 private:
  mutable std::mutex mu_;
  std::mutex writer_;
  std::shared_ptr<const ComplementaryGraph> current_;
};

/// Tracks consecutive days an entity is missing from the refreshed
/// dictionary and reports it for retirement once the streak reaches
/// `threshold_days`.
class RetirementTracker {
 public:
  explicit RetirementTracker(int threshold_days = 7) : threshold_(threshold_days) {}

  /// `tracked` are the graph's current nodes; returns the entities to retire.
  std::set<EntityId> observe(Day day, const std::set<EntityId>& tracked,
                             const std::set<EntityId>& present);

  std::string serialize() const;
  static RetirementTracker deserialize(const std::string& content);

 private:
  int threshold_;
  std::optional<Day> last_day_;
  std::map<EntityId, int> absent_streak_;
};

}  // namespace compkg::kgraph
