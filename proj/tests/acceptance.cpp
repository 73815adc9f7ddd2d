// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>

#include "compkg/common.hpp"
#include "compkg/eei_model.hpp"
#include "compkg/ingest.hpp"
#include "compkg/kgraph.hpp"
#include "compkg/oracle.hpp"
#include "compkg/pairgen.hpp"
#include "compkg/pipeline.hpp"
#include "compkg/serve.hpp"
#include "support.hpp"

using namespace compkg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1 ------------------------------------------------------------------------

Outcome annotation_means() {
  const auto t0 = Clock::now();
  const auto table = oracle::parse_annotation_table(
      read_file(fs::path(COMPKG_FIXTURES) / "annotations.csv"), "annotations.csv");
  const std::map<std::string, double> expect = {
      {"chatglm2", 3.584}, {"chatgpt35", 3.685}, {"claude2", 4.056}};
  if (table.size() != expect.size()) return {false, "fixture has " + std::to_string(table.size()) + " models"};
  std::map<std::string, double> got;
  double worst = 0.0;
  for (const auto& m : table) {
    // Independent weighted mean over integer level sums.
    std::int64_t num = 0, den = 0;
    for (int l = 0; l < 5; ++l) {
      num += (l + 1) * m.counts.levels[l];
      den += m.counts.levels[l];
    }
    const double mean = oracle::mean_annotation_score(m.counts);
    if (!expect.count(m.model)) return {false, "unexpected model " + m.model};
    worst = std::max({worst, std::abs(mean - expect.at(m.model)), std::abs(mean - double(num) / double(den))});
    got[m.model] = mean;
  }
  const bool ordered = got["chatglm2"] < got["chatgpt35"] && got["chatgpt35"] < got["claude2"];
  const double secs = seconds_since(t0);
  return {worst < 1e-9 && ordered && secs < 1.0,
          "max err " + fmt("%.2e", worst) + ", ordered " + (ordered ? "yes" : "no") + ", " + fmt("%.3f s", secs)};
}

// 2 ------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const auto w = testing::toy_world(5, 8, 6, 3, 6);
  const auto g = testing::toy_trigraph(w);
  const auto batch = testing::random_samples(g, 20, 1);
  eei::Hyperparams hp;
  hp.dim = 4;
  hp.lambda_cl = 0.2;
  hp.lambda_l2 = 0.01;
  hp.batch_size = 0;
  const auto m = testing::random_model(g, hp, 0.4, 17);
  const auto parts = eei::total_loss(m, g, batch);
  if (parts.contrastive_entities == 0 || parts.contrastive == 0.0)
    return {false, "contrastive term inactive on the toy"};
  const auto rep = eei::gradient_check(m, g, batch, 1e-5, 150, 3);
  double control = INFINITY;
  for (auto mut : {eei::GradientMutation::ScaleByOnePointOne, eei::GradientMutation::DropAttentionCentering})
    control = std::min(control, eei::gradient_check(m, g, batch, 1e-5, 150, 3, mut).max_relative_error);
  const double secs = seconds_since(t0);
  return {rep.max_relative_error < 1e-4 && rep.checked >= 100 && control > 1e-2 && secs < 30.0,
          std::to_string(rep.checked) + " params, max rel err " + fmt("%.2e", rep.max_relative_error) +
              ", mutated min " + fmt("%.2e", control) + ", " + fmt("%.2f s", secs)};
}

// 3 ------------------------------------------------------------------------

Outcome attention_normalization() {
  std::size_t aggregations = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    // 12 users + 30 items + 8 entities = 50 nodes.
    const auto w = testing::toy_world(12, 30, 8, 3, seed);
    const auto g = testing::toy_trigraph(w);
    if (g.num_nodes() != 50) return {false, "graph has " + std::to_string(g.num_nodes()) + " nodes"};
    for (bool inside : {true, false}) {
      eei::Hyperparams hp;
      hp.dim = 6;
      hp.sigma_inside = inside;
      const auto m = testing::random_model(g, hp, 1.5, seed * 7 + inside);
      const auto& L = m.layout();
      const auto h = m.block(L.embeddings);
      const eei::GatParams v1{m.block(L.view1_w1), m.block(L.view1_w2)};
      const eei::GatParams v2{m.block(L.view2_w1), m.block(L.view2_w2)};
      for (std::size_t e = 0; e < g.num_entities(); ++e) {
        const auto c = g.entity_node(e);
        const std::pair<const std::vector<std::size_t>*, eei::GatParams> sites[] = {
            {&g.item_side(e), v1}, {&g.user_side(e), v1}, {&g.mp1(e), v2}, {&g.mp2(e), v2}};
        for (const auto& [nb, p] : sites) {
          const auto r = eei::gat_aggregate(h, hp.dim, c, *nb, p, hp);
          if (nb->empty()) continue;
          if (r.alpha.size() != nb->size()) return {false, "attention length mismatch"};
          double sum = 0.0;
          for (double a : r.alpha) sum += a;
          worst = std::max(worst, std::abs(sum - 1.0));
          ++aggregations;
        }
      }
    }
  }
  return {aggregations > 0 && worst < 1e-6,
          std::to_string(aggregations) + " aggregations, max |sum-1| " + fmt("%.2e", worst)};
}

// 4 ------------------------------------------------------------------------

Outcome infonce_closed_forms() {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (std::size_t n = 1; n <= 40; ++n) {
    const std::size_t d = 1 + uniform_below(rng, 8);
    std::vector<double> row(d);
    for (auto& x : row) x = uniform01(rng) * 2 - 1;
    row[0] += 2.0;  // keeps the norm away from zero
    std::vector<double> z;
    for (std::size_t i = 0; i < n; ++i) z.insert(z.end(), row.begin(), row.end());
    const double tau = 0.05 + uniform01(rng);
    worst = std::max(worst, std::abs(eei::infonce_loss(z, z, n, d, tau) - double(n) * std::log(double(n))));
    // A single entity against any partner costs nothing.
    std::vector<double> a(d), b(d);
    for (auto& x : a) x = uniform01(rng) + 0.1;
    for (auto& x : b) x = uniform01(rng) - 0.5;
    b[0] = 1.0;
    worst = std::max(worst, std::abs(eei::infonce_loss(a, b, 1, d, tau)));
  }
  return {worst < 1e-6, "max err " + fmt("%.2e", worst) + " over sizes 1..40"};
}

// 5 ------------------------------------------------------------------------

Outcome pair_generation() {
  std::mt19937_64 rng(5);
  std::size_t largest = 0;
  for (int seed = 0; seed < 100; ++seed) {
    const std::size_t n = seed == 0 ? 200 : 1 + uniform_below(rng, 200);
    largest = std::max(largest, n);
    std::vector<EntityId> ranked;
    for (std::size_t i = 0; i < n; ++i) ranked.push_back("e" + std::to_string(1000 + i));
    std::shuffle(ranked.begin(), ranked.end(), rng);
    const double qe = 0.01 + 0.2 * uniform01(rng);
    const double qp = qe + 0.01 + (0.98 - qe) * uniform01(rng);
    const auto t = pairgen::tier_entities(ranked, {qe, qp});
    const std::set<EntityId> ext(t.extremely_popular.begin(), t.extremely_popular.end());
    const std::set<EntityId> unp(t.unpopular.begin(), t.unpopular.end());
    // Two-rule enumeration over all n^2 ordered pairs.
    std::set<pairgen::EntityPair> want;
    for (const auto& a : ranked)
      for (const auto& b : ranked) {
        if (a == b) continue;
        const bool head_a = !unp.count(a), head_b = !unp.count(b);
        const bool rule_head = head_a && head_b;
        const bool rule_tail = (ext.count(a) && unp.count(b)) || (unp.count(a) && ext.count(b));
        if (rule_head || rule_tail) want.insert({a, b});
      }
    const auto got = pairgen::generate_pairs(t);
    std::set<pairgen::EntityPair> got_set;
    for (const auto& p : got) {
      if (p.pair.first == p.pair.second) return {false, "self-pair at seed " + std::to_string(seed)};
      if (unp.count(p.pair.first) && unp.count(p.pair.second))
        return {false, "unpopular-unpopular pair at seed " + std::to_string(seed)};
      got_set.insert(p.pair);
    }
    if (got_set.size() != got.size()) return {false, "duplicate pair at seed " + std::to_string(seed)};
    if (got_set != want) return {false, "set mismatch at seed " + std::to_string(seed)};
  }
  return {true, "100 seeds, n up to " + std::to_string(largest)};
}

// 6 ------------------------------------------------------------------------

Outcome auc_equivalence() {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int round = 0; round < 100; ++round) {
    const std::size_t n = 200;
    std::vector<double> s(n), y(n);
    const int levels = 2 + int(uniform_below(rng, 30));  // coarse scores force ties
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(uniform_below(rng, std::size_t(levels))) / double(levels);
      y[i] = uniform01(rng) < 0.3 ? 1.0 : 0.0;
    }
    y[0] = 1.0;
    y[1] = 0.0;
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] > 0.5 && y[j] < 0.5) {
          pairs += 1;
          wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    worst = std::max(worst, std::abs(serve::auc(s, y) - wins / pairs));
  }
  return {worst < 1e-12, "100 sets, max err " + fmt("%.2e", worst)};
}

// 7 ------------------------------------------------------------------------

Outcome incremental_equals_batch() {
  std::size_t retirements = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed * 1009);
    const std::size_t pool = 25;
    auto name = [](std::size_t i) { return "n" + std::to_string(100 + i); };
    std::set<EntityId> initial;
    for (std::size_t i = 0; i < 15; ++i) initial.insert(name(i));

    kgraph::ComplementaryGraph inc(initial);
    kgraph::RetirementTracker tracker(3);
    std::vector<oracle::OracleVerdict> all;
    std::set<EntityId> ever = initial, retired_total;
    const Day first = 19000;
    // Entities leave the dictionary for good on a random day; short gaps before that reset the streak.
    std::vector<Day> departs(pool);
    for (auto& d : departs) d = first + 5 + Day(uniform_below(rng, 40));
    for (Day day = first; day < first + 30; ++day) {
      // Today's dictionary: most live entities plus some newcomers.
      std::set<EntityId> present;
      for (std::size_t i = 0; i < pool; ++i) {
        const auto id = name(i);
        if (retired_total.count(id) || day >= departs[i]) continue;
        const bool known = inc.has_node(id);
        if ((known && uniform01(rng) < 0.85) || (!known && uniform01(rng) < 0.1)) present.insert(id);
      }
      const auto retired = tracker.observe(day, inc.nodes(), present);
      auto staged = inc;
      for (const auto& e : present)
        if (!staged.has_node(e) && !retired.count(e)) {
          staged.add_node(e);
          ever.insert(e);
        }
      std::vector<EntityId> live;
      for (const auto& e : staged.nodes())
        if (!retired.count(e)) live.push_back(e);
      std::vector<oracle::OracleVerdict> daily;
      for (std::size_t k = 0, n = uniform_below(rng, 12); k < n && live.size() >= 2; ++k) {
        const auto a = uniform_below(rng, live.size());
        auto b = uniform_below(rng, live.size() - 1);
        if (b >= a) ++b;
        const bool yes = uniform01(rng) < 0.65;
        daily.push_back({{live[a], live[b]},
                         yes ? oracle::Verdict::Yes : oracle::Verdict::No,
                         yes ? "fits" : "",
                         "m" + std::to_string(k % 2),
                         day * kSecondsPerDay + std::int64_t(k)});
      }
      inc = kgraph::incremental_update(staged, daily, retired);
      all.insert(all.end(), daily.begin(), daily.end());
      retired_total.insert(retired.begin(), retired.end());
    }
    auto batch = kgraph::upsert_edges(kgraph::ComplementaryGraph(ever), all);
    for (const auto& e : retired_total) batch.remove_node(e);
    retirements += retired_total.size();
    if (retired_total.empty()) return {false, "seed " + std::to_string(seed) + " retired nothing"};
    if (!(inc == batch) || kgraph::serialize(inc) != kgraph::serialize(batch))
      return {false, "graphs differ at seed " + std::to_string(seed)};
  }
  return {true, "20 seeds x 30 days, " + std::to_string(retirements) + " retirements, graphs identical"};
}

// 8, 9 --------------------------------------------------------------------

pipeline::PipelineConfig synthetic_run(const fs::path& dir, std::uint64_t seed, const std::string& extra) {
  pipeline::PipelineConfig c;
  c.out_dir = dir;
  c.seed = seed;
  pipeline::run_stage("synth", c);
  auto p = pipeline::parse_config(read_file(dir / "pipeline.conf") + extra, dir);
  for (const auto& s : {"extract", "pairs", "infer", "graph", "train", "recall", "rank", "eval", "report"})
    pipeline::run_stage(s, p);
  return p;
}

Outcome synthetic_lift() {
  const auto t0 = Clock::now();
  int hit_wins = 0, auc_wins = 0, both = 0;
  double min_ratio = INFINITY, min_gap = INFINITY;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    testing::TempDir dir;
    synthetic_run(dir.path(), seed, "eei.epochs = 5\n");
    double comp = -1, pop = -1, with = -1, base = -1;
    for (const auto& h : pipeline::parse_hit_table(read_file(dir / "hit_rate.csv"))) {
      if (h.k != 50 || h.queries == 0) continue;
      const double rate = double(h.hits) / double(h.queries);
      (h.route == "complementary" ? comp : pop) = rate;
    }
    for (const auto& a : pipeline::parse_auc_table(read_file(dir / "auc.csv")))
      if (a.auc) (a.variant == "with_eei" ? with : base) = *a.auc;
    const bool hit_ok = comp >= 0 && pop >= 0 && comp >= 2.0 * pop;
    const bool auc_ok = with >= 0 && base >= 0 && with > base;
    hit_wins += hit_ok;
    auc_wins += auc_ok;
    both += hit_ok && auc_ok;
    if (pop > 0) min_ratio = std::min(min_ratio, comp / pop);
    min_gap = std::min(min_gap, with - base);
  }
  const double secs = seconds_since(t0);
  return {both >= 9 && secs < 300.0,
          "hit@50 >= 2x popularity in " + std::to_string(hit_wins) + "/10 (min ratio " + fmt("%.2f", min_ratio) +
              "), auc lift in " + std::to_string(auc_wins) + "/10 (min gap " + fmt("%.4f", min_gap) +
              "), both in " + std::to_string(both) + "/10, " + fmt("%.1f s", secs)};
}

std::map<std::string, std::string> artifacts(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

Outcome determinism() {
  testing::TempDir a, b;
  synthetic_run(a.path(), 2024, "");
  synthetic_run(b.path(), 2024, "");
  const auto x = artifacts(a.path()), y = artifacts(b.path());
  std::size_t bytes = 0;
  for (const auto& [_, content] : x) bytes += content.size();
  if (x.size() != y.size()) return {false, "file sets differ"};
  for (const auto& [f, content] : x) {
    auto it = y.find(f);
    if (it == y.end() || it->second != content) return {false, f + " differs"};
  }
  return {true, std::to_string(x.size()) + " files, " + std::to_string(bytes) + " bytes identical"};
}

// 10 -----------------------------------------------------------------------

Outcome extractor_properties() {
  std::mt19937_64 rng(10);
  for (int round = 0; round < 1000; ++round) {
    auto entries = testing::random_gazetteer(rng, 4 + uniform_below(rng, 12));
    const ingest::EntityDict dict(entries);
    const auto text = testing::random_text(rng, 3 + uniform_below(rng, 15));
    const auto got = ingest::extract_entities(text, dict);
    if (got != testing::brute_force_extract(text, entries)) return {false, "longest-match differs: " + text};
    const auto spans = dict.scan(text);
    for (std::size_t k = 1; k < spans.size(); ++k)
      if (spans[k - 1].end > spans[k].begin) return {false, "overlapping spans: " + text};
    std::shuffle(entries.begin(), entries.end(), rng);
    if (ingest::extract_entities(text, ingest::EntityDict(entries)) != got)
      return {false, "dictionary order changed the result: " + text};
  }
  return {true, "1000 texts"};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"annotation means", annotation_means},
      {"gradient fidelity", gradient_fidelity},
      {"attention normalization", attention_normalization},
      {"contrastive closed forms", infonce_closed_forms},
      {"pair generation", pair_generation},
      {"auc equivalence", auc_equivalence},
      {"incremental equals batch", incremental_equals_batch},
      {"synthetic lift", synthetic_lift},
      {"determinism", determinism},
      {"extractor properties", extractor_properties},
  };
  int failures = 0, k = 0;
  for (const auto& [name, fn] : criteria) {
    ++k;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", k, name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
