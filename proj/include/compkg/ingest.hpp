#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "compkg/common.hpp"

namespace compkg::ingest {

struct EntityEntry {
  EntityId id;
  std::string canonical_name;
  std::vector<std::string> aliases;
  std::int64_t conversions = 0;
  std::int64_t clicks = 0;
};

/// Orders entities by popularity: (conversions, clicks) descending, then id
/// ascending. Shared by item-category tie-breaking and popularity ranking.
bool more_popular(const EntityEntry& a, const EntityEntry& b);

/// Lowercased word tokens. Bytes outside ASCII count as word characters so
/// UTF-8 words stay whole.
std::vector<std::string> tokenize(std::string_view text);

/// One gazetteer hit, in token coordinates [begin, end).
struct Match {
  EntityId entity;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
};

/// Token trie over canonical names and aliases.
class Gazetteer {
 public:
  void add(const std::vector<std::string>& tokens, std::size_t entity_index);
  /// Longest entry starting at `start`; returns (length, entity_index) or nullopt.
  std::optional<std::pair<std::size_t, std::size_t>> longest_at(
      const std::vector<std::string>& tokens, std::size_t start) const;

 private:
  struct Node {
    std::map<std::string, std::size_t, std::less<>> children;
    std::optional<std::size_t> entity;
  };
  std::vector<Node> nodes_{Node{}};
};

class EntityDict {
 public:
  EntityDict() = default;
  /// Validates: unique ids, non-empty names/aliases, each surface form maps
  /// to one entity, non-negative counters. Throws DataError otherwise.
  explicit EntityDict(std::vector<EntityEntry> entries);

  const std::vector<EntityEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const EntityEntry* find(const EntityId& id) const;
  bool contains(const EntityId& id) const { return find(id) != nullptr; }

  /// Leftmost-first, longest-match, non-overlapping scan.
  std::vector<Match> scan(std::string_view text) const;

 private:
  std::vector<EntityEntry> entries_;
  std::unordered_map<EntityId, std::size_t> index_;
  Gazetteer gazetteer_;
};

struct Item {
  ItemId id;
  std::string title;
  std::vector<double> features;
  std::optional<EntityId> entity;  // nullopt = unassigned
};

struct Bill {
  UserId user;
  std::int64_t timestamp = 0;
  std::string text;
  std::vector<EntityId> entities;
};

struct Interaction {
  UserId user;
  ItemId item;
  std::int64_t timestamp = 0;
  bool clicked = false;
  bool converted = false;
};

struct InteractionLog {
  std::vector<Interaction> rows;
};

struct LoadCounts {
  std::size_t entities = 0;
  std::size_t items = 0;
  std::size_t bills = 0;
  std::size_t users = 0;
  std::size_t interactions = 0;
};

struct Corpus {
  EntityDict dict;
  std::vector<Item> items;
  std::vector<Bill> bills;
  InteractionLog log;
  LoadCounts counts;
};

// Parsers over in-memory text; `source` names the origin in error messages.
EntityDict parse_dict(const std::string& content, const std::string& source = "dict");
std::vector<Item> parse_items(const std::string& content, std::size_t feature_dim,
                              const std::string& source = "items");
std::vector<Bill> parse_bills(const std::string& content, const std::string& source = "bills");
InteractionLog parse_log(const std::string& content, const std::string& source = "logs");

// Writers producing the same formats.
std::string format_dict(const EntityDict& dict);
std::string format_items(const std::vector<Item>& items);
std::string format_bills(const std::vector<Bill>& bills);
std::string format_log(const InteractionLog& log);

/// Loads all four sources and resolves cross references. `feature_dim` 0
/// means "take it from the first item".
Corpus load_corpus(const std::filesystem::path& items_path, const std::filesystem::path& bills_path,
                   const std::filesystem::path& logs_path, const std::filesystem::path& dict_path,
                   std::size_t feature_dim = 0);

/// Throws DataError naming the first log row whose item is unknown.
void check_references(const std::vector<Item>& items, const InteractionLog& log);

std::vector<EntityId> extract_entities(std::string_view text, const EntityDict& dict);

/// Picks the category entity for an item title: longest match, then popularity.
Item assign_item_entity(const Item& item, const EntityDict& dict);

void extract_bill_entities(std::vector<Bill>& bills, const EntityDict& dict);
void assign_item_entities(std::vector<Item>& items, const EntityDict& dict);

/// Entities of `user`'s bills with timestamp in [as_of - window, as_of],
/// most recent bill first; entity order within a bill is kept.
std::vector<EntityId> build_bill_sequence(const UserId& user, const std::vector<Bill>& bills,
                                          int window_days, std::int64_t as_of);

/// Per-user bill timelines for repeated window queries.
class BillHistory {
 public:
  explicit BillHistory(const std::vector<Bill>& bills);
  std::vector<EntityId> sequence(const UserId& user, int window_days, std::int64_t as_of) const;
  std::vector<UserId> users() const;

 private:
  struct Entry {
    std::int64_t timestamp;
    std::size_t order;
    const std::vector<EntityId>* entities;
  };
  std::map<UserId, std::vector<Entry>> by_user_;
};

/// Recomputes entity counters from the interaction log: each row adds its
/// click/conversion flags to the entity of its item. Rows on unassigned items
/// are skipped and counted in `skipped`.
EntityDict attribute_popularity(const EntityDict& dict, const std::vector<Item>& items,
                                const InteractionLog& log, std::size_t* skipped = nullptr);

}  // namespace compkg::ingest
