#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "compkg/serve.hpp"
#include "support.hpp"

using namespace compkg;
using namespace compkg::serve;

namespace {

struct Fixture {
  testing::ToyWorld world;
  eei::TriGraph graph;
  eei::Scorer scorer;
  ItemCatalog catalog;

  static Fixture make(std::uint64_t seed, std::size_t items = 24, std::size_t entities = 6) {
    auto w = testing::toy_world(6, items, entities, 3, seed);
    auto g = testing::toy_trigraph(w);
    eei::Hyperparams hp;
    hp.dim = 4;
    auto m = testing::random_model(g, hp, 0.8, seed + 1);
    auto tab = eei::compute_entity_table(m, g);
    eei::Scorer s(std::move(m), std::move(tab), g.entities());
    ItemCatalog c(s, w.items);
    return Fixture{std::move(w), std::move(g), std::move(s), std::move(c)};
  }
};

// Exhaustive recall: every (bill entity, item) pair checked against the edge set.
std::vector<RecallCandidate> recall_oracle(const std::vector<EntityId>& bill, const Fixture& f, std::size_t k) {
  std::map<ItemId, RecallCandidate> best;
  for (const auto& e1 : bill) {
    if (!f.scorer.find_entity(e1)) continue;
    for (const auto& it : f.world.items) {
      if (!it.entity || !f.world.graph.edge(e1, *it.entity)) continue;
      const double s = f.scorer.score(e1, it.features);
      auto found = best.find(it.id);
      if (found == best.end() || s > found->second.score ||
          (s == found->second.score && e1 < found->second.e1))
        best[it.id] = {it.id, e1, *it.entity, s};
    }
  }
  std::vector<RecallCandidate> v;
  for (auto& [_, c] : best) v.push_back(c);
  std::sort(v.begin(), v.end(), [](auto& a, auto& b) { return std::tie(b.score, a.item) < std::tie(a.score, b.item); });
  if (v.size() > k) v.resize(k);
  return v;
}

double auc_brute(const std::vector<double>& s, const std::vector<double>& y) {
  double num = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        ++pairs;
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return num / double(pairs);
}

}  // namespace

TEST_CASE("catalog embeddings equal the item tower") {
  const auto f = Fixture::make(3);
  CHECK(f.catalog.size() == f.world.items.size());
  for (std::size_t i = 0; i < f.catalog.size(); ++i) {
    const auto want = f.scorer.item_embedding(f.catalog.features(i));
    CHECK(std::vector<double>(f.catalog.embedding(i).begin(), f.catalog.embedding(i).end()) == want);
  }
  CHECK(f.catalog.items_of("no-such-entity").empty());
  auto dup = f.world.items;
  dup.push_back(dup.front());
  CHECK_THROWS_AS(ItemCatalog(f.scorer, dup), DataError);
}

TEST_CASE("recall equals the exhaustive oracle") {
  std::mt19937_64 rng(6);
  for (std::uint64_t seed = 1; seed <= 15; ++seed) {
    const auto f = Fixture::make(seed);
    for (int q = 0; q < 10; ++q) {
      std::vector<EntityId> bill;
      for (std::size_t n = 1 + uniform_below(rng, 4); n > 0; --n)
        bill.push_back("e" + std::to_string(uniform_below(rng, 7)));  // e6 is unknown
      const std::size_t k = 1 + uniform_below(rng, 12);
      const auto got = complementary_recall(bill, f.world.graph, f.scorer, f.catalog, k);
      const auto want = recall_oracle(bill, f, k);
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].item == want[i].item);
        CHECK(got[i].e1 == want[i].e1);
        CHECK(got[i].e2 == want[i].e2);
        CHECK(got[i].score == doctest::Approx(want[i].score).epsilon(1e-12));
      }
      for (const auto& c : got) CHECK(f.world.graph.edge(c.e1, c.e2) != nullptr);
      // Bill order and duplicates do not matter.
      auto rev = bill;
      std::reverse(rev.begin(), rev.end());
      rev.insert(rev.end(), bill.begin(), bill.end());
      CHECK(complementary_recall(rev, f.world.graph, f.scorer, f.catalog, k) == got);
    }
  }
  const auto f = Fixture::make(1);
  CHECK_THROWS_AS(complementary_recall(std::vector<EntityId>{"e0"}, f.world.graph, f.scorer, f.catalog, 0), UsageError);
  CHECK(complementary_recall(std::vector<EntityId>{}, f.world.graph, f.scorer, f.catalog, 5).empty());
}

TEST_CASE("popularity ranking") {
  ingest::InteractionLog log{{{"u", "b", 1, true, false},
                              {"u", "a", 2, true, false},
                              {"v", "b", 3, true, true},
                              {"v", "c", 4, false, false},
                              {"w", "c", 9, true, false},
                              {"w", "c", 10, true, false}}};
  CHECK(popularity_ranking(log, 5) == std::vector<ItemId>{"b", "a"});
  CHECK(popularity_ranking(log, 100) == std::vector<ItemId>{"b", "c", "a"});
  CHECK(popularity_ranking(log, 0).empty());
}

TEST_CASE("enrichment takes the best connected bill entity") {
  const auto f = Fixture::make(9);
  const std::vector<double> base = {0.5, -1.0};
  for (std::size_t i = 0; i < f.world.items.size(); ++i) {
    const auto& it = f.world.items[i];
    const std::vector<EntityId> bill = {"e0", "e1", "e2", "e3", "e4", "e5"};
    const auto s = enrich_sample(base, bill, it.id, f.world.graph, f.scorer, f.catalog);
    double best = -INFINITY;
    EntityId arg;
    for (const auto& e1 : bill)
      if (f.world.graph.edge(e1, *it.entity)) {
        const double v = f.scorer.score(e1, it.features);
        if (v > best) best = v, arg = e1;
      }
    CHECK(s.base == base);
    CHECK(s.has_path == !arg.empty());
    if (s.has_path) {
      CHECK(s.eei_score == doctest::Approx(best).epsilon(1e-12));
      CHECK(s.source_entity == arg);
      const auto emb = f.scorer.entity_embedding(arg);
      CHECK(s.entity_embedding == std::vector<double>(emb.begin(), emb.end()));
    } else {
      CHECK(s.eei_score == 0.0);
      CHECK(s.entity_embedding == std::vector<double>(4, 0.0));
    }
    const auto fw = ranker_features(s, FeatureSet::WithEei);
    CHECK(fw.size() == base.size() + 2 + 4 + 4);
    CHECK(fw[2] == s.eei_score);
    CHECK(fw[3] == (s.has_path ? 1.0 : 0.0));
    CHECK(ranker_features(s, FeatureSet::Base) == base);
  }
  const auto none = enrich_sample(base, std::vector<EntityId>{"e0"}, "missing", f.world.graph, f.scorer, f.catalog);
  CHECK_FALSE(none.has_path);
  CHECK(none.item_embedding == std::vector<double>(4, 0.0));
}

TEST_CASE("ranker fits, predicts, round-trips and ranks stably") {
  std::mt19937_64 rng(4);
  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  for (int n = 0; n < 400; ++n) {
    const double a = uniform01(rng) * 2 - 1, b = uniform01(rng) * 2 - 1;
    rows.push_back({a, b, 7.0});  // constant column must not break standardization
    labels.push_back(a + 0.3 * b > 0 ? 1.0 : 0.0);
  }
  RankerConfig cfg;
  cfg.epochs = 40;
  const auto r = FineRanker::fit(rows, labels, FeatureSet::Base, cfg);
  std::vector<double> scores;
  for (const auto& x : rows) scores.push_back(r.predict(x));
  CHECK(auc(scores, labels) > 0.95);
  const auto back = FineRanker::deserialize(r.serialize());
  CHECK(back.serialize() == r.serialize());
  for (const auto& x : rows) CHECK(back.predict(x) == r.predict(x));
  CHECK(FineRanker::fit(rows, labels, FeatureSet::Base, cfg).serialize() == r.serialize());
  CHECK_THROWS_AS(r.predict(std::vector<double>{1.0}), DataError);
  CHECK_THROWS_AS(FineRanker::fit({}, {}, FeatureSet::Base, cfg), DataError);
  CHECK_THROWS_AS(FineRanker::fit(rows, {1.0}, FeatureSet::Base, cfg), UsageError);

  std::vector<ItemId> cands;
  std::vector<EnrichedSample> feats;
  for (int i = 0; i < 20; ++i) {
    cands.push_back("c" + std::to_string(i));
    EnrichedSample s;
    s.base = {i % 4 == 0 ? 0.5 : -0.5, 0.0, 7.0};  // many exact ties
    feats.push_back(s);
  }
  const auto ranked = fine_rank(cands, feats, r);
  CHECK(std::is_sorted(ranked.scores.rbegin(), ranked.scores.rend()));
  // Ties keep candidate order.
  for (std::size_t i = 1; i < ranked.items.size(); ++i)
    if (ranked.scores[i] == ranked.scores[i - 1]) {
      const auto pos = [&](const ItemId& id) { return std::find(cands.begin(), cands.end(), id) - cands.begin(); };
      CHECK(pos(ranked.items[i - 1]) < pos(ranked.items[i]));
    }
  CHECK_THROWS_AS(fine_rank(cands, std::span(feats).first(3), r), DataError);
}

TEST_CASE("auc equals pairwise counting and ignores monotone transforms") {
  CHECK(auc(std::vector<double>{0.1, 0.9}, std::vector<double>{0, 1}) == 1.0);
  CHECK(auc(std::vector<double>{0.9, 0.1}, std::vector<double>{0, 1}) == 0.0);
  CHECK(auc(std::vector<double>{0.5, 0.5}, std::vector<double>{0, 1}) == 0.5);
  CHECK_THROWS_AS(auc(std::vector<double>{1, 2}, std::vector<double>{1, 1}), DataError);
  CHECK_THROWS_AS(auc(std::vector<double>{1}, std::vector<double>{1, 0}), UsageError);
  std::mt19937_64 rng(10);
  for (int round = 0; round < 200; ++round) {
    const std::size_t n = 2 + uniform_below(rng, 40);
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(uniform_below(rng, 6));  // coarse scores force ties
      y[i] = double(i % 2);
    }
    std::shuffle(y.begin(), y.end(), rng);
    const double a = auc(s, y);
    CHECK(a == doctest::Approx(auc_brute(s, y)).epsilon(1e-12));
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3 * s[i]) - 4;
    CHECK(auc(t, y) == doctest::Approx(a).epsilon(1e-12));
    std::vector<double> flipped(n);
    for (std::size_t i = 0; i < n; ++i) flipped[i] = 1 - y[i];
    CHECK(auc(s, flipped) == doctest::Approx(1 - a).epsilon(1e-12));
  }
}

TEST_CASE("hit rate") {
  const std::vector<std::vector<ItemId>> rec = {{"a", "b", "c"}, {"x"}, {"p", "q"}, {}};
  const std::vector<std::set<ItemId>> tgt = {{"c"}, {"y"}, {}, {"z"}};
  const auto h1 = hit_rate(rec, tgt, 2), h3 = hit_rate(rec, tgt, 3);
  CHECK(h1.queries == 3);
  CHECK(h1.hits == 0);
  CHECK(h3.hits == 1);
  CHECK(h3.rate() == doctest::Approx(1.0 / 3));
  CHECK(HitRate{}.rate() == 0.0);
  CHECK_THROWS_AS(hit_rate(rec, {}, 1), UsageError);
  std::mt19937_64 rng(2);
  for (int round = 0; round < 50; ++round) {
    std::vector<std::vector<ItemId>> r(10);
    std::vector<std::set<ItemId>> t(10);
    for (auto& v : r)
      for (int i = 0; i < 8; ++i) v.push_back("i" + std::to_string(uniform_below(rng, 20)));
    for (auto& s : t) s.insert("i" + std::to_string(uniform_below(rng, 20)));
    std::size_t last = 0;
    for (std::size_t k = 1; k <= 8; ++k) {
      const auto h = hit_rate(r, t, k);
      CHECK(h.hits >= last);  // never decreases in k
      last = h.hits;
    }
  }
}

TEST_CASE("cvr cells equal per-cell counting") {
  std::mt19937_64 rng(12);
  std::vector<pairgen::EntityPair> universe = {{"a", "b"}, {"b", "a"}, {"a", "c"}, {"c", "d"}};
  std::vector<ArmExposure> ex;
  for (int n = 0; n < 500; ++n)
    ex.push_back({uniform01(rng) < 0.5 ? Arm::Baseline : Arm::Experiment, std::string(1, char('a' + uniform_below(rng, 3))),
                  std::string(1, char('a' + uniform_below(rng, 3))), uniform01(rng) < 0.3});
  // c -> d never shows up in the experiment arm.
  ex.push_back({Arm::Baseline, "c", "d", true});
  const auto cells = cvr_matrix(ex, universe);
  REQUIRE(cells.size() == universe.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    CHECK(cells[c].e1 == universe[c].first);
    CHECK(cells[c].e2 == universe[c].second);
    double nb = 0, cb = 0, ne = 0, ce = 0;
    for (const auto& x : ex)
      if (x.e1 == universe[c].first && x.e2 == universe[c].second)
        (x.arm == Arm::Baseline ? (nb += 1, cb += x.converted) : (ne += 1, ce += x.converted));
    CHECK(cells[c].exposures_baseline == std::size_t(nb));
    CHECK(cells[c].conversions_experiment == std::size_t(ce));
    if (nb > 0 && ne > 0)
      CHECK(*cells[c].delta == doctest::Approx(ce / ne - cb / nb).epsilon(1e-12));
    else
      CHECK_FALSE(cells[c].delta.has_value());
  }
  const auto text = format_cvr_matrix(cells);
  CHECK(text.rfind("e1,e2,delta\n", 0) == 0);
  CHECK(text.find("c,d,absent\n") != std::string::npos);
  const auto back = parse_arm_exposures(format_arm_exposures(ex));
  REQUIRE(back.size() == ex.size());
  for (std::size_t i = 0; i < ex.size(); ++i) {
    CHECK(back[i].arm == ex[i].arm);
    CHECK(back[i].converted == ex[i].converted);
  }
  CHECK_THROWS_AS(parse_arm_exposures("control,a,b,1\n"), ParseError);
  CHECK_THROWS_AS(parse_arm_exposures("baseline,a,b,2\n"), ParseError);
  CHECK(parse_arm("experiment") == Arm::Experiment);
}
