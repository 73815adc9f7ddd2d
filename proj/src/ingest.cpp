#include "compkg/ingest.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <unordered_set>

namespace compkg::ingest {

namespace {

bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}

void check_id(const std::string& id, const std::string& source, std::size_t line) {
  if (id.empty()) throw ParseError(source, line, "empty id");
  for (char c : id)
    if (c == ',' || c == '\t' || c == '|' || c == '\n' || c == ' ')
      throw ParseError(source, line, "id '" + id + "' contains a reserved character");
}

bool parse_flag(std::string_view s, const std::string& source, std::size_t line) {
  s = trim(s);
  if (s == "0") return false;
  if (s == "1") return true;
  throw ParseError(source, line, "flag must be 0 or 1, got '" + std::string(s) + "'");
}

}  // namespace

bool more_popular(const EntityEntry& a, const EntityEntry& b) {
  if (a.conversions != b.conversions) return a.conversions > b.conversions;
  if (a.clicks != b.clicks) return a.clicks > b.clicks;
  return a.id < b.id;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (is_word_byte(c)) {
      cur.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : ch);
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

void Gazetteer::add(const std::vector<std::string>& tokens, std::size_t entity_index) {
  std::size_t node = 0;
  for (const auto& t : tokens) {
    auto it = nodes_[node].children.find(t);
    if (it == nodes_[node].children.end()) {
      nodes_.push_back(Node{});
      it = nodes_[node].children.emplace(t, nodes_.size() - 1).first;
    }
    node = it->second;
  }
  nodes_[node].entity = entity_index;
}

std::optional<std::pair<std::size_t, std::size_t>> Gazetteer::longest_at(
    const std::vector<std::string>& tokens, std::size_t start) const {
  std::optional<std::pair<std::size_t, std::size_t>> best;
  std::size_t node = 0;
  for (std::size_t k = start; k < tokens.size(); ++k) {
    auto it = nodes_[node].children.find(tokens[k]);
    if (it == nodes_[node].children.end()) break;
    node = it->second;
    if (nodes_[node].entity) best = {k - start + 1, *nodes_[node].entity};
  }
  return best;
}

EntityDict::EntityDict(std::vector<EntityEntry> entries) : entries_(std::move(entries)) {
  std::map<std::vector<std::string>, std::size_t> surface_owner;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.id.empty()) throw DataError("entity with empty id");
    if (!index_.emplace(e.id, i).second) throw DataError("duplicate entity id '" + e.id + "'");
    if (e.conversions < 0 || e.clicks < 0)
      throw DataError("negative popularity counter for entity '" + e.id + "'");
    std::vector<std::string> forms{e.canonical_name};
    forms.insert(forms.end(), e.aliases.begin(), e.aliases.end());
    for (const auto& form : forms) {
      auto tokens = tokenize(form);
      if (tokens.empty())
        throw DataError("entity '" + e.id + "' has an empty name or alias");
      auto [it, inserted] = surface_owner.emplace(tokens, i);
      if (!inserted && it->second != i)
        throw DataError("surface form '" + form + "' maps to both '" + entries_[it->second].id +
                        "' and '" + e.id + "'");
    }
  }
  // Insertion order into the trie does not matter: each surface form has a
  // single owner, so the trie is a function of the entry set alone.
  for (const auto& [tokens, owner] : surface_owner) gazetteer_.add(tokens, owner);
}

const EntityEntry* EntityDict::find(const EntityId& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::vector<Match> EntityDict::scan(std::string_view text) const {
  std::vector<Match> out;
  const auto tokens = tokenize(text);
  std::size_t pos = 0;
  while (pos < tokens.size()) {
    if (auto hit = gazetteer_.longest_at(tokens, pos)) {
      out.push_back(Match{entries_[hit->second].id, pos, pos + hit->first});
      pos += hit->first;
    } else {
      ++pos;
    }
  }
  return out;
}

EntityDict parse_dict(const std::string& content, const std::string& source) {
  std::vector<EntityEntry> entries;
  std::unordered_map<std::string, std::size_t> first_line;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, '\t');
    if (f.size() != 5) throw ParseError(source, line, "expected 5 tab-separated fields");
    EntityEntry e;
    e.id = std::string(trim(f[0]));
    check_id(e.id, source, line);
    if (!first_line.emplace(e.id, line).second)
      throw ParseError(source, line, "duplicate entity id '" + e.id + "'");
    e.canonical_name = std::string(trim(f[1]));
    if (e.canonical_name.empty()) throw ParseError(source, line, "empty canonical name");
    if (!trim(f[2]).empty()) {
      for (auto& a : split(f[2], '|')) {
        auto alias = std::string(trim(a));
        if (alias.empty()) throw ParseError(source, line, "empty alias");
        e.aliases.push_back(std::move(alias));
      }
    }
    try {
      e.conversions = parse_int(f[3], "conversions");
      e.clicks = parse_int(f[4], "clicks");
    } catch (const DataError& err) {
      throw ParseError(source, line, err.what());
    }
    entries.push_back(std::move(e));
  });
  return EntityDict(std::move(entries));
}

std::vector<Item> parse_items(const std::string& content, std::size_t feature_dim,
                              const std::string& source) {
  std::vector<Item> items;
  std::unordered_set<std::string> seen;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, '\t');
    if (f.size() != 3) throw ParseError(source, line, "expected 3 tab-separated fields");
    Item it;
    it.id = std::string(trim(f[0]));
    check_id(it.id, source, line);
    if (!seen.insert(it.id).second)
      throw ParseError(source, line, "duplicate item id '" + it.id + "'");
    it.title = std::string(trim(f[1]));
    try {
      for (auto& v : split(f[2], ',')) it.features.push_back(parse_double(v, "feature"));
    } catch (const DataError& err) {
      throw ParseError(source, line, err.what());
    }
    if (feature_dim == 0) feature_dim = it.features.size();
    if (it.features.size() != feature_dim)
      throw ParseError(source, line,
                       "feature vector has " + std::to_string(it.features.size()) +
                           " values, expected " + std::to_string(feature_dim));
    items.push_back(std::move(it));
  });
  return items;
}

std::vector<Bill> parse_bills(const std::string& content, const std::string& source) {
  std::vector<Bill> bills;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, '\t');
    if (f.size() != 3) throw ParseError(source, line, "expected 3 tab-separated fields");
    Bill b;
    b.user = std::string(trim(f[0]));
    check_id(b.user, source, line);
    try {
      b.timestamp = parse_int(f[1], "timestamp");
    } catch (const DataError& err) {
      throw ParseError(source, line, err.what());
    }
    b.text = std::string(trim(f[2]));
    bills.push_back(std::move(b));
  });
  return bills;
}

InteractionLog parse_log(const std::string& content, const std::string& source) {
  InteractionLog log;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, ',');
    if (f.size() != 5) throw ParseError(source, line, "expected 5 comma-separated fields");
    Interaction r;
    r.user = std::string(trim(f[0]));
    r.item = std::string(trim(f[1]));
    check_id(r.user, source, line);
    check_id(r.item, source, line);
    try {
      r.timestamp = parse_int(f[2], "timestamp");
    } catch (const DataError& err) {
      throw ParseError(source, line, err.what());
    }
    r.clicked = parse_flag(f[3], source, line);
    r.converted = parse_flag(f[4], source, line);
    if (r.converted && !r.clicked)
      throw ParseError(source, line, "row converted=1 with clicked=0 (user " + r.user + ", item " +
                                         r.item + ")");
    log.rows.push_back(std::move(r));
  });
  return log;
}

std::string format_dict(const EntityDict& dict) {
  std::ostringstream os;
  for (const auto& e : dict.entries()) {
    os << e.id << '\t' << e.canonical_name << '\t';
    for (std::size_t i = 0; i < e.aliases.size(); ++i) os << (i ? "|" : "") << e.aliases[i];
    os << '\t' << e.conversions << '\t' << e.clicks << '\n';
  }
  return os.str();
}

std::string format_items(const std::vector<Item>& items) {
  std::ostringstream os;
  for (const auto& it : items) {
    os << it.id << '\t' << it.title << '\t';
    for (std::size_t i = 0; i < it.features.size(); ++i)
      os << (i ? "," : "") << format_double(it.features[i]);
    os << '\n';
  }
  return os.str();
}

std::string format_bills(const std::vector<Bill>& bills) {
  std::ostringstream os;
  for (const auto& b : bills) os << b.user << '\t' << b.timestamp << '\t' << b.text << '\n';
  return os.str();
}

std::string format_log(const InteractionLog& log) {
  std::ostringstream os;
  for (const auto& r : log.rows)
    os << r.user << ',' << r.item << ',' << r.timestamp << ',' << int(r.clicked) << ','
       << int(r.converted) << '\n';
  return os.str();
}

void check_references(const std::vector<Item>& items, const InteractionLog& log) {
  std::unordered_set<std::string> ids;
  for (const auto& it : items) ids.insert(it.id);
  for (std::size_t i = 0; i < log.rows.size(); ++i)
    if (!ids.count(log.rows[i].item))
      throw DataError("log row " + std::to_string(i + 1) + " references unknown item '" +
                      log.rows[i].item + "'");
}

Corpus load_corpus(const std::filesystem::path& items_path, const std::filesystem::path& bills_path,
                   const std::filesystem::path& logs_path, const std::filesystem::path& dict_path,
                   std::size_t feature_dim) {
  Corpus c;
  c.dict = parse_dict(read_file(dict_path), dict_path.string());
  c.items = parse_items(read_file(items_path), feature_dim, items_path.string());
  c.bills = parse_bills(read_file(bills_path), bills_path.string());
  c.log = parse_log(read_file(logs_path), logs_path.string());
  check_references(c.items, c.log);

  std::set<UserId> users;
  for (const auto& b : c.bills) users.insert(b.user);
  for (const auto& r : c.log.rows) users.insert(r.user);
  c.counts = LoadCounts{c.dict.size(), c.items.size(), c.bills.size(), users.size(),
                        c.log.rows.size()};
  return c;
}

std::vector<EntityId> extract_entities(std::string_view text, const EntityDict& dict) {
  std::vector<EntityId> out;
  for (auto& m : dict.scan(text)) out.push_back(std::move(m.entity));
  return out;
}

Item assign_item_entity(const Item& item, const EntityDict& dict) {
  Item out = item;
  out.entity.reset();
  const Match* best = nullptr;
  const EntityEntry* best_entry = nullptr;
  const auto matches = dict.scan(item.title);
  for (const auto& m : matches) {
    const EntityEntry* e = dict.find(m.entity);
    if (!best || m.length() > best->length() ||
        (m.length() == best->length() && more_popular(*e, *best_entry))) {
      best = &m;
      best_entry = e;
    }
  }
  if (best) out.entity = best->entity;
  return out;
}

void extract_bill_entities(std::vector<Bill>& bills, const EntityDict& dict) {
  for (auto& b : bills) b.entities = extract_entities(b.text, dict);
}

void assign_item_entities(std::vector<Item>& items, const EntityDict& dict) {
  for (auto& it : items) it = assign_item_entity(it, dict);
}

std::vector<EntityId> build_bill_sequence(const UserId& user, const std::vector<Bill>& bills,
                                          int window_days, std::int64_t as_of) {
  const std::int64_t from = as_of - std::int64_t(window_days) * kSecondsPerDay;
  std::vector<const Bill*> picked;
  for (const auto& b : bills)
    if (b.user == user && b.timestamp >= from && b.timestamp <= as_of) picked.push_back(&b);
  std::stable_sort(picked.begin(), picked.end(),
                   [](const Bill* a, const Bill* b) { return a->timestamp > b->timestamp; });
  std::vector<EntityId> out;
  for (const Bill* b : picked) out.insert(out.end(), b->entities.begin(), b->entities.end());
  return out;
}

BillHistory::BillHistory(const std::vector<Bill>& bills) {
  for (std::size_t i = 0; i < bills.size(); ++i)
    by_user_[bills[i].user].push_back(Entry{bills[i].timestamp, i, &bills[i].entities});
  for (auto& [user, entries] : by_user_)
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.order < b.order;
    });
}

std::vector<EntityId> BillHistory::sequence(const UserId& user, int window_days,
                                            std::int64_t as_of) const {
  std::vector<EntityId> out;
  auto it = by_user_.find(user);
  if (it == by_user_.end()) return out;
  const auto& entries = it->second;
  const std::int64_t from = as_of - std::int64_t(window_days) * kSecondsPerDay;
  // entries ascending by (timestamp, order); emit descending timestamp while
  // keeping original order among equal timestamps, matching a stable sort.
  auto hi = std::upper_bound(entries.begin(), entries.end(), as_of,
                             [](std::int64_t t, const Entry& e) { return t < e.timestamp; });
  auto lo = std::lower_bound(entries.begin(), entries.end(), from,
                             [](const Entry& e, std::int64_t t) { return e.timestamp < t; });
  auto group_end = hi;
  while (group_end != lo) {
    auto group_begin = group_end;
    const auto ts = std::prev(group_begin)->timestamp;
    while (group_begin != lo && std::prev(group_begin)->timestamp == ts) --group_begin;
    for (auto e = group_begin; e != group_end; ++e)
      out.insert(out.end(), e->entities->begin(), e->entities->end());
    group_end = group_begin;
  }
  return out;
}

std::vector<UserId> BillHistory::users() const {
  std::vector<UserId> out;
  for (const auto& [u, _] : by_user_) out.push_back(u);
  return out;
}

EntityDict attribute_popularity(const EntityDict& dict, const std::vector<Item>& items,
                                const InteractionLog& log, std::size_t* skipped) {
  std::unordered_map<ItemId, const EntityId*> item_entity;
  for (const auto& it : items)
    if (it.entity) item_entity[it.id] = &*it.entity;
  std::unordered_map<EntityId, std::pair<std::int64_t, std::int64_t>> counts;
  std::size_t skip = 0;
  for (const auto& r : log.rows) {
    auto it = item_entity.find(r.item);
    if (it == item_entity.end()) {
      ++skip;
      continue;
    }
    auto& c = counts[*it->second];
    c.first += r.converted;
    c.second += r.clicked;
  }
  if (skipped) *skipped = skip;
  std::vector<EntityEntry> entries = dict.entries();
  for (auto& e : entries) {
    auto it = counts.find(e.id);
    e.conversions = it == counts.end() ? 0 : it->second.first;
    e.clicks = it == counts.end() ? 0 : it->second.second;
  }
  return EntityDict(std::move(entries));
}

}  // namespace compkg::ingest
