#include <benchmark/benchmark.h>

#include <random>

#include "compkg/eei_model.hpp"
#include "compkg/kernels.hpp"
#include "compkg/kgraph.hpp"
#include "compkg/pairgen.hpp"
#include "compkg/synth.hpp"
#include "compkg/trigraph.hpp"

using namespace compkg;

namespace {

pairgen::PopularityTiers tiers_of(std::size_t n) {
  std::vector<EntityId> ranked;
  for (std::size_t i = 0; i < n; ++i) ranked.push_back("e" + std::to_string(100000 + i));
  return pairgen::tier_entities(ranked, {});
}

struct Fixture {
  eei::TriGraph graph;
  eei::EeiModel model;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    synth::SyntheticSpec spec;
    spec.entities = 120;
    spec.users = 300;
    auto corpus = synth::generate_synthetic(spec);
    ingest::assign_item_entities(corpus.items, corpus.dict);
    ingest::extract_bill_entities(corpus.bills, corpus.dict);
    std::set<EntityId> nodes;
    for (const auto& e : corpus.dict.entries()) nodes.insert(e.id);
    kgraph::ComplementaryGraph g(nodes);
    for (const auto& p : corpus.truth.edges) g.set_edge(p.first, p.second, {{"bench", 0}, std::nullopt});
    auto tri = eei::build_trigraph(corpus.log, corpus.items, corpus.bills, g, 30,
                                   corpus.log.rows.back().timestamp);
    eei::Hyperparams hp;
    hp.dim = 32;
    auto model = eei::EeiModel::initialize(tri, hp);
    return Fixture{std::move(tri), std::move(model)};
  }();
  return f;
}

std::vector<double> random_matrix(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = uniform01(rng) - 0.5;
  return v;
}

void BM_pairs_parallel(benchmark::State& st) {
  const auto t = tiers_of(std::size_t(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(pairgen::generate_pairs(t));
}
void BM_pairs_serial(benchmark::State& st) {
  const auto t = tiers_of(std::size_t(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(pairgen::generate_pairs_serial(t));
}

void BM_entity_table_parallel(benchmark::State& st) {
  const auto& f = fixture();
  for (auto _ : st) benchmark::DoNotOptimize(eei::compute_entity_table(f.model, f.graph));
}
void BM_entity_table_serial(benchmark::State& st) {
  const auto& f = fixture();
  for (auto _ : st) benchmark::DoNotOptimize(eei::compute_entity_table_serial(f.model, f.graph));
}

void BM_scores_parallel(benchmark::State& st) {
  const std::size_t n = std::size_t(st.range(0)), d = 32;
  const auto e = random_matrix(n * d, 1), i = random_matrix(4 * n * d, 2);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::score_matrix(e, n, i, 4 * n, d));
}
void BM_scores_serial(benchmark::State& st) {
  const std::size_t n = std::size_t(st.range(0)), d = 32;
  const auto e = random_matrix(n * d, 1), i = random_matrix(4 * n * d, 2);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::score_matrix_serial(e, n, i, 4 * n, d));
}

}  // namespace

BENCHMARK(BM_pairs_parallel)->Arg(200)->Arg(1000);
BENCHMARK(BM_pairs_serial)->Arg(200)->Arg(1000);
BENCHMARK(BM_entity_table_parallel);
BENCHMARK(BM_entity_table_serial);
BENCHMARK(BM_scores_parallel)->Arg(100)->Arg(400);
BENCHMARK(BM_scores_serial)->Arg(100)->Arg(400);

BENCHMARK_MAIN();
