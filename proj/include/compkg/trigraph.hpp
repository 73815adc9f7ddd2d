#pragma once

#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "compkg/common.hpp"
#include "compkg/ingest.hpp"
#include "compkg/kgraph.hpp"

namespace compkg::eei {

enum class NodeKind { User, Item, Entity };

/// User ∪ item ∪ entity graph. Node indices are laid out users first, then
/// items, then entities, so the kind of a node follows from its index.
///
/// Per entity k (local index) the graph also holds the four neighbour sets
/// the model aggregates over, as global node indices:
///   item_side  items assigned to the entity (dependency edges)
///   user_side  users who clicked one of those items
///   mp1        items of the entity's complementary successors
///   mp2        items converted by users who also converted an item of the
///              entity inside the bill window
class TriGraph {
 public:
  std::size_t num_users() const { return users_.size(); }
  std::size_t num_items() const { return items_.size(); }
  std::size_t num_entities() const { return entities_.size(); }
  std::size_t num_nodes() const { return users_.size() + items_.size() + entities_.size(); }
  std::size_t feature_dim() const { return feature_dim_; }

  NodeKind kind_of(std::size_t node) const;
  std::size_t user_node(std::size_t u) const { return u; }
  std::size_t item_node(std::size_t i) const { return users_.size() + i; }
  std::size_t entity_node(std::size_t e) const { return users_.size() + items_.size() + e; }

  const std::vector<UserId>& users() const { return users_; }
  const std::vector<ItemId>& items() const { return items_; }
  const std::vector<EntityId>& entities() const { return entities_; }

  std::optional<std::size_t> find_user(const UserId& id) const;
  std::optional<std::size_t> find_item(const ItemId& id) const;
  std::optional<std::size_t> find_entity(const EntityId& id) const;

  /// Local entity index of item i.
  std::size_t entity_of_item(std::size_t i) const { return item_entity_[i]; }
  std::span<const double> item_features(std::size_t i) const {
    return {item_features_.data() + i * feature_dim_, feature_dim_};
  }

  // Edge lists in local indices.
  const std::vector<std::pair<std::size_t, std::size_t>>& click_edges() const { return clicks_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& dependency_edges() const { return deps_; }
  /// Directed complementary edges between local entity indices.
  const std::vector<std::pair<std::size_t, std::size_t>>& complementary_edges() const {
    return comps_;
  }

  /// Undirected adjacency of a global node over all three edge kinds
  /// (complementary edges contribute both directions).
  const std::vector<std::size_t>& adjacency(std::size_t node) const { return adj_[node]; }

  const std::vector<std::size_t>& item_side(std::size_t e) const { return item_side_[e]; }
  const std::vector<std::size_t>& user_side(std::size_t e) const { return user_side_[e]; }
  const std::vector<std::size_t>& mp1(std::size_t e) const { return mp1_[e]; }
  const std::vector<std::size_t>& mp2(std::size_t e) const { return mp2_[e]; }
  /// Directed successors (local entity indices), ascending.
  const std::vector<std::size_t>& successors(std::size_t e) const { return succ_[e]; }

 private:
  friend TriGraph build_trigraph(const ingest::InteractionLog&, const std::vector<ingest::Item>&,
                                 const std::vector<ingest::Bill>&, const kgraph::ComplementaryGraph&,
                                 int, std::int64_t);

  std::vector<UserId> users_;
  std::vector<ItemId> items_;
  std::vector<EntityId> entities_;
  std::unordered_map<std::string, std::size_t> user_index_, item_index_, entity_index_;
  std::size_t feature_dim_ = 0;
  std::vector<std::size_t> item_entity_;
  std::vector<double> item_features_;
  std::vector<std::pair<std::size_t, std::size_t>> clicks_, deps_, comps_;
  std::vector<std::vector<std::size_t>> adj_;
  std::vector<std::vector<std::size_t>> item_side_, user_side_, mp1_, mp2_, succ_;
};

/// Builds the graph from assigned items only. Users come from the log then
/// the bills, in order of first appearance; items keep input order; entities
/// follow first appearance among items, then remaining comp-graph nodes by id.
/// MP2 looks at conversions with timestamp in [as_of - window, as_of].
/// Throws DataError on a log row naming an unknown item or an item whose
/// entity is not a node of the complementary graph.
TriGraph build_trigraph(const ingest::InteractionLog& log, const std::vector<ingest::Item>& items,
                        const std::vector<ingest::Bill>& bills,
                        const kgraph::ComplementaryGraph& comp_graph, int window_days,
                        std::int64_t as_of);

}  // namespace compkg::eei
