#include "compkg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace compkg::synth {

void SyntheticSpec::validate() const {
  auto rate = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw UsageError(std::string(name) + " must lie in [0,1]");
  };
  rate(head_fraction, "head_fraction");
  rate(head_share, "head_share");
  rate(click_noise, "click_noise");
  rate(conversion_rate, "conversion_rate");
  rate(core_fraction, "core_fraction");
  if (entities < 2) throw UsageError("need at least two entities");
  if (users == 0 || items_per_entity == 0 || sessions_per_user == 0 || days <= 0)
    throw UsageError("users, items, sessions and days must be positive");
  if (head_fraction == 0.0) throw UsageError("head_fraction must be positive");
  if (min_out_degree > max_out_degree || max_out_degree >= entities)
    throw UsageError("out-degree bounds are inconsistent with the entity count");
  if (feature_dim < 1) throw UsageError("feature_dim must be positive");
}

double GroundTruth::click_probability(const EntityId& bill_entity, const EntityId& item_entity,
                                      const ItemId& item) const {
  auto it = quality.find(item);
  const double q = it == quality.end() ? 0.5 : it->second;
  return complementary(bill_entity, item_entity) ? 1.0 - click_noise * (1.0 - q) : click_noise * q;
}

oracle::StubBackend::Table GroundTruth::stub_table() const {
  oracle::StubBackend::Table t;
  for (const auto& [a, b] : edges) {
    const auto& na = names.at(a);
    const auto& nb = names.at(b);
    t[{na, nb}] = "people who buy " + na + " usually need " + nb + " soon after";
  }
  return t;
}

namespace {

const std::vector<std::string> kAdjectives = {"fresh", "classic", "premium", "family",
                                              "organic", "daily", "deluxe", "value"};
const std::vector<std::string> kNouns = {"pack", "box", "bottle", "set", "bag", "jar"};

std::string make_name(std::mt19937_64& rng) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  std::string s;
  const std::size_t syllables = 2 + uniform_below(rng, 2);
  for (std::size_t i = 0; i < syllables; ++i) {
    s += consonants[uniform_below(rng, consonants.size())];
    s += vowels[uniform_below(rng, vowels.size())];
  }
  return s;
}

double normal(std::mt19937_64& rng) {
  const double u1 = uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t draw(std::mt19937_64& rng, const std::vector<double>& cdf) {
  const double u = uniform01(rng) * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min<std::size_t>(std::size_t(it - cdf.begin()), cdf.size() - 1);
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticCorpus out;
  const std::size_t E = spec.entities;
  std::mt19937_64 name_rng(sub_seed(spec.seed, "synth-names"));
  std::mt19937_64 rng(sub_seed(spec.seed, "synth-events"));

  // Entities, names and aliases, all surface forms distinct.
  std::unordered_set<std::string> used(kAdjectives.begin(), kAdjectives.end());
  used.insert(kNouns.begin(), kNouns.end());
  for (const char* w : {"receipt", "total", "assorted", "goods", "store"}) used.insert(w);
  std::vector<EntityId> ids(E);
  std::vector<std::string> names(E), aliases(E);
  for (std::size_t e = 0; e < E; ++e) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "E%03zu", e);
    ids[e] = buf;
    std::string n, a;
    do {
      n = make_name(name_rng);
      a = n + "s";
    } while (used.count(n) || used.count(a));
    used.insert(n);
    used.insert(a);
    names[e] = n;
    aliases[e] = a;
    out.truth.names[ids[e]] = n;
  }

  // Popularity: the head shares head_share uniformly, the tail follows Zipf.
  const std::size_t H = std::max<std::size_t>(1, std::size_t(std::llround(spec.head_fraction * double(E))));
  std::vector<double> p(E);
  double tail_norm = 0.0;
  for (std::size_t e = H; e < E; ++e) tail_norm += std::pow(double(e - H + 1), -spec.tail_exponent);
  for (std::size_t e = 0; e < E; ++e) {
    if (H == E)
      p[e] = 1.0 / double(E);
    else if (e < H)
      p[e] = spec.head_share / double(H);
    else
      p[e] = (1.0 - spec.head_share) * std::pow(double(e - H + 1), -spec.tail_exponent) / tail_norm;
  }
  std::vector<double> cdf(E);
  std::partial_sum(p.begin(), p.end(), cdf.begin());
  for (std::size_t e = 0; e < H; ++e) out.head.push_back(ids[e]);

  // Planted edges: successors drawn uniformly from the popularity core.
  std::vector<std::vector<std::size_t>> succ(E);
  std::unordered_map<EntityId, std::size_t> index;
  for (std::size_t e = 0; e < E; ++e) index[ids[e]] = e;
  if (!spec.planted.empty()) {
    for (const auto& pr : spec.planted) {
      auto a = index.find(pr.first), b = index.find(pr.second);
      if (a == index.end() || b == index.end() || a->second == b->second)
        throw UsageError("planted edge " + pr.first + "->" + pr.second + " is invalid");
      succ[a->second].push_back(b->second);
    }
  } else {
    const std::size_t C = std::max<std::size_t>(
        spec.max_out_degree + 1, std::size_t(std::llround(spec.core_fraction * double(E))));
    std::vector<double> load(C, 0.0);
    for (std::size_t a = 0; a < E; ++a) {
      const std::size_t deg =
          spec.min_out_degree + uniform_below(rng, spec.max_out_degree - spec.min_out_degree + 1);
      while (succ[a].size() < deg) {
        // Least-loaded of three draws keeps follow-up traffic spread over the
        // core instead of piling onto a few hubs.
        std::size_t b = uniform_below(rng, C);
        for (int t = 0; t < 2; ++t) {
          const std::size_t c = uniform_below(rng, C);
          if (load[c] < load[b]) b = c;
        }
        if (b != a && std::find(succ[a].begin(), succ[a].end(), b) == succ[a].end()) {
          succ[a].push_back(b);
          load[b] += p[a];
        }
      }
    }
  }
  for (std::size_t a = 0; a < E; ++a) {
    std::sort(succ[a].begin(), succ[a].end());
    succ[a].erase(std::unique(succ[a].begin(), succ[a].end()), succ[a].end());
    for (auto b : succ[a]) out.truth.edges.insert({ids[a], ids[b]});
  }

  // Items: quality plus an entity prototype with noise.
  std::vector<std::vector<double>> proto(E, std::vector<double>(spec.feature_dim - 1));
  for (auto& v : proto)
    for (auto& x : v) x = normal(rng);
  std::vector<std::vector<std::size_t>> items_of(E);
  std::vector<std::size_t> item_entity;
  auto add_item = [&](std::string title, std::optional<std::size_t> e) {
    ingest::Item it;
    char buf[16];
    std::snprintf(buf, sizeof buf, "I%04zu", out.items.size());
    it.id = buf;
    it.title = std::move(title);
    const double q = 0.2 + 0.8 * uniform01(rng);
    it.features.push_back(q);
    for (std::size_t c = 0; c + 1 < spec.feature_dim; ++c)
      it.features.push_back((e ? proto[*e][c] : 0.0) + 0.1 * normal(rng));
    out.truth.quality[it.id] = q;
    if (e) items_of[*e].push_back(out.items.size());
    item_entity.push_back(e ? *e : E);
    out.items.push_back(std::move(it));
  };
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t k = 0; k < spec.items_per_entity; ++k) {
      const auto& adj = kAdjectives[uniform_below(rng, kAdjectives.size())];
      const auto& noun = kNouns[uniform_below(rng, kNouns.size())];
      const auto& surface = uniform01(rng) < 0.3 ? aliases[e] : names[e];
      add_item(adj + " " + surface + " " + noun, e);
    }
  for (std::size_t k = 0; k < spec.unmatched_items; ++k)
    add_item(kAdjectives[uniform_below(rng, kAdjectives.size())] + " assorted goods", std::nullopt);

  // Sessions: a bill on a popularity-drawn entity, its purchase, then
  // complementary and random follow-up exposures.
  std::vector<std::int64_t> conv(E, 0), clk(E, 0);
  out.truth.click_noise = spec.click_noise;
  out.truth.conversion_rate = spec.conversion_rate;
  auto quality = [&](std::size_t item) { return out.items[item].features[0]; };
  auto log_row = [&](const UserId& u, std::size_t item, std::int64_t ts, bool clicked, bool converted) {
    out.log.rows.push_back({u, out.items[item].id, ts, clicked, converted});
    const std::size_t e = item_entity[item];
    if (e < E) {
      clk[e] += clicked;
      conv[e] += converted;
    }
  };
  const std::int64_t span = std::int64_t(spec.days) * kSecondsPerDay;
  for (std::size_t u = 0; u < spec.users; ++u) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "U%04zu", u);
    const UserId user = buf;
    std::vector<std::int64_t> times(spec.sessions_per_user);
    for (auto& t : times) t = spec.start_timestamp + std::int64_t(uniform_below(rng, std::uint64_t(span)));
    std::sort(times.begin(), times.end());
    for (auto t : times) {
      const std::size_t a = draw(rng, cdf);
      const auto& surface = uniform01(rng) < 0.3 ? aliases[a] : names[a];
      out.bills.push_back({user, t, "receipt " + surface + " total", {}});
      log_row(user, items_of[a][uniform_below(rng, items_of[a].size())], t, true, true);

      std::int64_t ts = t;
      auto expose = [&](std::size_t item) {
        ts += 60 + std::int64_t(uniform_below(rng, 600));
        const std::size_t e = item_entity[item];
        const bool comp = e < E && std::binary_search(succ[a].begin(), succ[a].end(), e);
        const double q = quality(item);
        const bool clicked = uniform01(rng) < (comp ? 1.0 - spec.click_noise * (1.0 - q) : spec.click_noise * q);
        const bool converted = clicked && uniform01(rng) < spec.conversion_rate;
        log_row(user, item, ts, clicked, converted);
      };
      for (std::size_t k = 0; k < spec.complementary_exposures && !succ[a].empty(); ++k) {
        const std::size_t b = succ[a][uniform_below(rng, succ[a].size())];
        expose(items_of[b][uniform_below(rng, items_of[b].size())]);
      }
      for (std::size_t k = 0; k < spec.random_exposures; ++k) {
        if (spec.unmatched_items > 0 && uniform01(rng) < 0.02) {
          expose(E * spec.items_per_entity + uniform_below(rng, spec.unmatched_items));
          continue;
        }
        const std::size_t b = draw(rng, cdf);
        expose(items_of[b][uniform_below(rng, items_of[b].size())]);
      }
    }
  }

  std::vector<ingest::EntityEntry> entries;
  for (std::size_t e = 0; e < E; ++e) entries.push_back({ids[e], names[e], {aliases[e]}, conv[e], clk[e]});
  out.dict = ingest::EntityDict(std::move(entries));
  return out;
}

std::string format_truth(const GroundTruth& t) {
  std::ostringstream os;
  os << "param\tclick_noise\t" << format_double(t.click_noise) << '\n';
  os << "param\tconversion_rate\t" << format_double(t.conversion_rate) << '\n';
  for (const auto& [id, name] : t.names) os << "entity\t" << id << '\t' << name << '\n';
  for (const auto& [a, b] : t.edges) os << "edge\t" << a << '\t' << b << '\n';
  for (const auto& [id, q] : t.quality) os << "item\t" << id << '\t' << format_double(q) << '\n';
  return os.str();
}

GroundTruth parse_truth(const std::string& content, const std::string& source) {
  GroundTruth t;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, '\t');
    if (f.size() != 3) throw ParseError(source, line, "expected three tab-separated fields");
    if (f[0] == "param") {
      const double v = parse_double(f[2], f[1]);
      if (f[1] == "click_noise")
        t.click_noise = v;
      else if (f[1] == "conversion_rate")
        t.conversion_rate = v;
      else
        throw ParseError(source, line, "unknown parameter '" + f[1] + "'");
    } else if (f[0] == "entity") {
      t.names[f[1]] = f[2];
    } else if (f[0] == "edge") {
      if (!t.names.count(f[1]) || !t.names.count(f[2]))
        throw ParseError(source, line, "edge names an undeclared entity");
      t.edges.insert({f[1], f[2]});
    } else if (f[0] == "item") {
      t.quality[f[1]] = parse_double(f[2], "quality");
    } else {
      throw ParseError(source, line, "unknown record kind '" + f[0] + "'");
    }
  });
  return t;
}

CorpusPaths write_corpus(const SyntheticCorpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  CorpusPaths p{dir / "items.tsv", dir / "bills.tsv", dir / "logs.csv", dir / "dict.tsv",
                dir / "truth.tsv"};
  write_file_atomic(p.items, ingest::format_items(c.items));
  write_file_atomic(p.bills, ingest::format_bills(c.bills));
  write_file_atomic(p.logs, ingest::format_log(c.log));
  write_file_atomic(p.dict, ingest::format_dict(c.dict));
  write_file_atomic(p.truth, format_truth(c.truth));
  return p;
}

double head_event_share(const SyntheticCorpus& c) {
  std::set<EntityId> head(c.head.begin(), c.head.end());
  std::map<ItemId, bool> in_head;
  for (const auto& it : c.items) {
    // items are generated with titles naming their entity
    auto m = ingest::assign_item_entity(it, c.dict);
    in_head[it.id] = m.entity && head.count(*m.entity);
  }
  std::size_t h = 0;
  for (const auto& r : c.log.rows) h += in_head[r.item];
  return c.log.rows.empty() ? 0.0 : double(h) / double(c.log.rows.size());
}

}  // namespace compkg::synth
