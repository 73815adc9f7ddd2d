#include "compkg/trigraph.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>

namespace compkg::eei {

NodeKind TriGraph::kind_of(std::size_t node) const {
  if (node < users_.size()) return NodeKind::User;
  if (node < users_.size() + items_.size()) return NodeKind::Item;
  if (node < num_nodes()) return NodeKind::Entity;
  throw std::out_of_range("node index out of range");
}

namespace {

std::optional<std::size_t> lookup(const std::unordered_map<std::string, std::size_t>& m,
                                  const std::string& id) {
  auto it = m.find(id);
  if (it == m.end()) return std::nullopt;
  return it->second;
}

void sort_unique(std::vector<std::size_t>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

}  // namespace

std::optional<std::size_t> TriGraph::find_user(const UserId& id) const {
  return lookup(user_index_, id);
}
std::optional<std::size_t> TriGraph::find_item(const ItemId& id) const {
  return lookup(item_index_, id);
}
std::optional<std::size_t> TriGraph::find_entity(const EntityId& id) const {
  return lookup(entity_index_, id);
}

TriGraph build_trigraph(const ingest::InteractionLog& log, const std::vector<ingest::Item>& items,
                        const std::vector<ingest::Bill>& bills,
                        const kgraph::ComplementaryGraph& comp_graph, int window_days,
                        std::int64_t as_of) {
  TriGraph g;

  std::unordered_set<std::string> all_items;
  for (const auto& it : items) all_items.insert(it.id);

  for (const auto& it : items) {
    if (!it.entity) continue;
    if (!comp_graph.has_node(*it.entity))
      throw DataError("item '" + it.id + "' has entity '" + *it.entity +
                      "' unknown to the complementary graph");
    if (g.entity_index_.emplace(*it.entity, g.entities_.size()).second)
      g.entities_.push_back(*it.entity);
  }
  for (const auto& e : comp_graph.nodes())
    if (g.entity_index_.emplace(e, g.entities_.size()).second) g.entities_.push_back(e);

  for (const auto& it : items) {
    if (!it.entity) continue;
    if (g.items_.empty()) g.feature_dim_ = it.features.size();
    if (it.features.size() != g.feature_dim_)
      throw DataError("item '" + it.id + "' feature length differs from the first item");
    g.item_index_.emplace(it.id, g.items_.size());
    g.items_.push_back(it.id);
    g.item_entity_.push_back(g.entity_index_.at(*it.entity));
    g.item_features_.insert(g.item_features_.end(), it.features.begin(), it.features.end());
  }

  auto add_user = [&](const UserId& u) {
    if (g.user_index_.emplace(u, g.users_.size()).second) g.users_.push_back(u);
  };
  for (const auto& r : log.rows) {
    if (!all_items.count(r.item)) throw DataError("log references unknown item '" + r.item + "'");
    add_user(r.user);
  }
  for (const auto& b : bills) add_user(b.user);

  const std::size_t U = g.users_.size(), I = g.items_.size(), E = g.entities_.size();
  g.adj_.assign(U + I + E, {});

  std::set<std::pair<std::size_t, std::size_t>> clicks;
  for (const auto& r : log.rows) {
    if (!r.clicked) continue;
    auto i = g.find_item(r.item);
    if (!i) continue;  // unassigned item, outside the graph stages
    clicks.emplace(g.user_index_.at(r.user), *i);
  }
  g.clicks_.assign(clicks.begin(), clicks.end());
  for (std::size_t i = 0; i < I; ++i) g.deps_.emplace_back(i, g.item_entity_[i]);
  for (const auto& [first, succ] : comp_graph.adjacency())
    for (const auto& [second, _] : succ)
      g.comps_.emplace_back(g.entity_index_.at(first), g.entity_index_.at(second));
  std::sort(g.comps_.begin(), g.comps_.end());

  for (auto [u, i] : g.clicks_) {
    g.adj_[g.user_node(u)].push_back(g.item_node(i));
    g.adj_[g.item_node(i)].push_back(g.user_node(u));
  }
  for (auto [i, e] : g.deps_) {
    g.adj_[g.item_node(i)].push_back(g.entity_node(e));
    g.adj_[g.entity_node(e)].push_back(g.item_node(i));
  }
  for (auto [a, b] : g.comps_) {
    g.adj_[g.entity_node(a)].push_back(g.entity_node(b));
    g.adj_[g.entity_node(b)].push_back(g.entity_node(a));
  }
  for (auto& a : g.adj_) sort_unique(a);

  g.item_side_.assign(E, {});
  g.user_side_.assign(E, {});
  g.mp1_.assign(E, {});
  g.mp2_.assign(E, {});
  g.succ_.assign(E, {});

  std::vector<std::vector<std::size_t>> items_of(E);
  for (std::size_t i = 0; i < I; ++i) items_of[g.item_entity_[i]].push_back(g.item_node(i));
  for (std::size_t e = 0; e < E; ++e) g.item_side_[e] = items_of[e];
  for (auto [u, i] : g.clicks_) g.user_side_[g.item_entity_[i]].push_back(g.user_node(u));
  for (auto [a, b] : g.comps_) g.succ_[a].push_back(b);
  for (std::size_t e = 0; e < E; ++e) {
    sort_unique(g.user_side_[e]);
    sort_unique(g.succ_[e]);
    for (auto s : g.succ_[e]) g.mp1_[e].insert(g.mp1_[e].end(), items_of[s].begin(), items_of[s].end());
    sort_unique(g.mp1_[e]);
  }

  // MP2: conversions inside the window act as item-level bills.
  const std::int64_t from = as_of - std::int64_t(window_days) * kSecondsPerDay;
  std::vector<std::vector<std::size_t>> converted_by(U);
  for (const auto& r : log.rows) {
    if (!r.converted || r.timestamp < from || r.timestamp > as_of) continue;
    auto i = g.find_item(r.item);
    if (!i) continue;
    converted_by[g.user_index_.at(r.user)].push_back(*i);
  }
  for (auto& v : converted_by) sort_unique(v);
  for (std::size_t u = 0; u < U; ++u) {
    std::vector<std::size_t> touched;
    for (auto i : converted_by[u]) touched.push_back(g.item_entity_[i]);
    sort_unique(touched);
    for (auto e : touched)
      for (auto i : converted_by[u]) g.mp2_[e].push_back(g.item_node(i));
  }
  for (auto& v : g.mp2_) sort_unique(v);
  return g;
}

}  // namespace compkg::eei
