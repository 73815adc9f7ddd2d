#include "support.hpp"

#include <cstdlib>
#include <algorithm>
#include <cctype>
#include <map>
#include <random>
#include <set>

namespace compkg::testing {

namespace fs = std::filesystem;

namespace {
std::string to_upper(const std::string& s) {
  std::string o;
  for (char c : s) o += char(std::toupper(static_cast<unsigned char>(c)));
  return o;
}
}  // namespace

TempDir::TempDir() {
  std::string templ = (fs::temp_directory_path() / "compkg-test-XXXXXX").string();
  if (!::mkdtemp(templ.data())) throw std::runtime_error("mkdtemp failed");
  path_ = templ;
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

ingest::EntityEntry entry(const std::string& id, const std::string& name,
                          std::vector<std::string> aliases, std::int64_t conversions,
                          std::int64_t clicks) {
  return {id, name, std::move(aliases), conversions, clicks};
}

ToyWorld toy_world(std::size_t users, std::size_t items, std::size_t entities,
                   std::size_t feature_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ToyWorld w;
  w.as_of = 1700000000;
  auto eid = [](std::size_t e) { return "e" + std::to_string(e); };
  std::set<EntityId> nodes;
  for (std::size_t e = 0; e < entities; ++e) nodes.insert(eid(e));
  w.graph = kgraph::ComplementaryGraph(nodes);
  for (std::size_t e = 0; e < entities; ++e) {
    const std::size_t deg = 1 + uniform_below(rng, 2);
    for (std::size_t k = 0; k < deg; ++k) {
      const std::size_t t = (e + 1 + uniform_below(rng, entities - 1)) % entities;
      w.graph.set_edge(eid(e), eid(t), {{"toy", 0}, std::nullopt});
    }
  }
  for (std::size_t i = 0; i < items; ++i) {
    ingest::Item it;
    it.id = "i" + std::to_string(i);
    it.title = "item " + it.id;
    for (std::size_t f = 0; f < feature_dim; ++f) it.features.push_back(uniform01(rng) * 2.0 - 1.0);
    it.entity = eid(i % entities);
    w.items.push_back(std::move(it));
  }
  const std::int64_t day = kSecondsPerDay;
  for (std::size_t u = 0; u < users; ++u) {
    const UserId user = "u" + std::to_string(u);
    for (std::size_t i = 0; i < items; ++i) {
      if (uniform01(rng) < 0.4) {
        const bool conv = uniform01(rng) < 0.5;
        w.log.rows.push_back({user, w.items[i].id, w.as_of - std::int64_t(uniform_below(rng, 20)) * day,
                              true, conv});
      } else if (uniform01(rng) < 0.3) {
        w.log.rows.push_back({user, w.items[i].id, w.as_of - std::int64_t(uniform_below(rng, 20)) * day,
                              false, false});
      }
    }
    for (int b = 0; b < 2; ++b) {
      ingest::Bill bill{user, w.as_of - std::int64_t(uniform_below(rng, 20)) * day, "bill", {}};
      bill.entities.push_back(eid(uniform_below(rng, entities)));
      w.bills.push_back(std::move(bill));
    }
  }
  return w;
}

eei::TriGraph toy_trigraph(const ToyWorld& w, int window_days) {
  return eei::build_trigraph(w.log, w.items, w.bills, w.graph, window_days, w.as_of);
}

std::vector<eei::EeiSample> random_samples(const eei::TriGraph& g, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<eei::EeiSample> out;
  for (std::size_t k = 0; k < n; ++k)
    out.push_back({uniform_below(rng, g.num_entities()), uniform_below(rng, g.num_items()),
                   k % 2 == 0 ? 1.0 : 0.0});
  return out;
}

eei::EeiModel random_model(const eei::TriGraph& g, const eei::Hyperparams& hp, double scale,
                           std::uint64_t seed) {
  eei::EeiModel m(hp, g.num_nodes(), g.feature_dim());
  std::mt19937_64 rng(seed);
  for (auto& p : m.params()) p = (uniform01(rng) * 2.0 - 1.0) * scale;
  return m;
}

namespace {
const std::vector<std::string> kVocab = {"ice", "cream", "cola", "milk", "bread", "jam", "tea", "cone"};
const std::vector<std::string> kFiller = {"and", "with", "fresh", "big"};
}  // namespace

std::vector<ingest::EntityEntry> random_gazetteer(std::mt19937_64& rng, std::size_t entities) {
  std::set<std::string> used;
  std::vector<ingest::EntityEntry> out;
  auto phrase = [&] {
    const std::size_t len = 1 + uniform_below(rng, 3);
    std::string s;
    for (std::size_t k = 0; k < len; ++k) s += (k ? " " : "") + kVocab[uniform_below(rng, kVocab.size())];
    return s;
  };
  for (std::size_t e = 0; out.size() < entities && e < entities * 20; ++e) {
    const auto name = phrase();
    if (!used.insert(name).second) continue;
    ingest::EntityEntry en{"g" + std::to_string(out.size()), name, {},
                           std::int64_t(uniform_below(rng, 50)), std::int64_t(uniform_below(rng, 50))};
    if (uniform01(rng) < 0.4) {
      const auto alias = phrase();
      if (used.insert(alias).second) en.aliases.push_back(alias);
    }
    out.push_back(std::move(en));
  }
  return out;
}

std::string random_text(std::mt19937_64& rng, std::size_t words) {
  std::string s;
  for (std::size_t k = 0; k < words; ++k) {
    const auto& w = uniform01(rng) < 0.8 ? kVocab[uniform_below(rng, kVocab.size())]
                                         : kFiller[uniform_below(rng, kFiller.size())];
    s += (k ? (uniform01(rng) < 0.2 ? ", " : " ") : "") + (uniform01(rng) < 0.1 ? to_upper(w) : w);
  }
  return s;
}

std::vector<EntityId> brute_force_extract(const std::string& text,
                                          const std::vector<ingest::EntityEntry>& entries) {
  // Lowercased words; punctuation separates words.
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || u >= 0x80) {
      cur += char(std::tolower(u));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  std::map<std::string, EntityId> surface;
  auto norm = [](const std::string& s) {
    std::string o;
    for (char c : s) o += char(std::tolower(static_cast<unsigned char>(c)));
    return o;
  };
  for (const auto& e : entries) {
    surface[norm(e.canonical_name)] = e.id;
    for (const auto& a : e.aliases) surface[norm(a)] = e.id;
  }
  // hits[i] = (length, entity) of every span starting at i.
  std::vector<std::vector<std::pair<std::size_t, EntityId>>> hits(words.size());
  for (std::size_t i = 0; i < words.size(); ++i)
    for (std::size_t j = i + 1; j <= words.size(); ++j) {
      std::string span;
      for (std::size_t k = i; k < j; ++k) span += (k > i ? " " : "") + words[k];
      auto it = surface.find(span);
      if (it != surface.end()) hits[i].emplace_back(j - i, it->second);
    }
  std::vector<EntityId> out;
  std::size_t pos = 0;
  while (pos < words.size()) {
    if (hits[pos].empty()) {
      ++pos;
      continue;
    }
    const auto best = *std::max_element(hits[pos].begin(), hits[pos].end(),
                                        [](const auto& a, const auto& b) { return a.first < b.first; });
    out.push_back(best.second);
    pos += best.first;
  }
  return out;
}

}  // namespace compkg::testing
