#include "compkg/pairgen.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <omp.h>

namespace compkg::pairgen {

const char* segment_tag(Segment s) { return s == Segment::Head ? "head" : "extreme-tail"; }

Segment parse_segment(std::string_view tag) {
  tag = trim(tag);
  if (tag == "head") return Segment::Head;
  if (tag == "extreme-tail") return Segment::ExtremeTail;
  throw DataError("unknown segment tag '" + std::string(tag) + "'");
}

std::vector<EntityId> rank_entities(const ingest::EntityDict& dict) {
  std::vector<const ingest::EntityEntry*> order;
  for (const auto& e : dict.entries()) order.push_back(&e);
  std::sort(order.begin(), order.end(),
            [](auto* a, auto* b) { return ingest::more_popular(*a, *b); });
  std::vector<EntityId> out;
  out.reserve(order.size());
  for (auto* e : order) out.push_back(e->id);
  return out;
}

namespace {

std::size_t ceil_count(double q, std::size_t n) {
  // guards against q*n landing a hair above an integer
  return static_cast<std::size_t>(std::ceil(q * double(n) - 1e-9));
}

}  // namespace

PopularityTiers tier_entities(const std::vector<EntityId>& ranked, Thresholds thresholds) {
  if (!(thresholds.q_extreme > 0.0 && thresholds.q_extreme < thresholds.q_popular &&
        thresholds.q_popular < 1.0))
    throw UsageError("tier thresholds must satisfy 0 < q_extreme < q_popular < 1");
  const std::size_t n = ranked.size();
  const std::size_t n_ext = std::min(n, ceil_count(thresholds.q_extreme, n));
  const std::size_t n_head = std::min(n, std::max(n_ext, ceil_count(thresholds.q_popular, n)));
  PopularityTiers t;
  t.thresholds = thresholds;
  t.extremely_popular.assign(ranked.begin(), ranked.begin() + n_ext);
  t.popular.assign(ranked.begin() + n_ext, ranked.begin() + n_head);
  t.unpopular.assign(ranked.begin() + n_head, ranked.end());
  std::sort(t.extremely_popular.begin(), t.extremely_popular.end());
  std::sort(t.popular.begin(), t.popular.end());
  std::sort(t.unpopular.begin(), t.unpopular.end());
  return t;
}

namespace {

std::vector<EntityId> head_of(const PopularityTiers& tiers) {
  std::vector<EntityId> head = tiers.extremely_popular;
  head.insert(head.end(), tiers.popular.begin(), tiers.popular.end());
  std::sort(head.begin(), head.end());
  head.erase(std::unique(head.begin(), head.end()), head.end());
  return head;
}

void finish(std::vector<TaggedPair>& pairs) {
  std::sort(pairs.begin(), pairs.end(),
            [](const TaggedPair& a, const TaggedPair& b) { return a.pair < b.pair; });
  pairs.erase(std::unique(pairs.begin(), pairs.end(),
                          [](const TaggedPair& a, const TaggedPair& b) { return a.pair == b.pair; }),
              pairs.end());
}

}  // namespace

std::vector<TaggedPair> generate_pairs_serial(const PopularityTiers& tiers) {
  std::vector<TaggedPair> pairs;
  const auto head = head_of(tiers);
  for (const auto& a : head)
    for (const auto& b : head)
      if (a != b) pairs.push_back({{a, b}, Segment::Head});
  for (const auto& x : tiers.extremely_popular)
    for (const auto& y : tiers.unpopular) {
      if (x == y) continue;
      pairs.push_back({{x, y}, Segment::ExtremeTail});
      pairs.push_back({{y, x}, Segment::ExtremeTail});
    }
  finish(pairs);
  return pairs;
}

std::vector<TaggedPair> generate_pairs(const PopularityTiers& tiers) {
  const auto head = head_of(tiers);
  const auto& ext = tiers.extremely_popular;
  const auto& tail = tiers.unpopular;
  // Row r < |head| holds head pairs led by head[r]; row |head| + k holds the
  // extreme-tail pairs of ext[k]. Each row is written by one thread only.
  const std::ptrdiff_t rows = std::ptrdiff_t(head.size() + ext.size());
  std::vector<std::vector<TaggedPair>> out(static_cast<std::size_t>(rows));
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    auto& row = out[std::size_t(r)];
    if (std::size_t(r) < head.size()) {
      const auto& a = head[std::size_t(r)];
      row.reserve(head.size());
      for (const auto& b : head)
        if (a != b) row.push_back({{a, b}, Segment::Head});
    } else {
      const auto& x = ext[std::size_t(r) - head.size()];
      row.reserve(2 * tail.size());
      for (const auto& y : tail) {
        if (x == y) continue;
        row.push_back({{x, y}, Segment::ExtremeTail});
        row.push_back({{y, x}, Segment::ExtremeTail});
      }
    }
  }
  std::vector<TaggedPair> pairs;
  std::size_t total = 0;
  for (const auto& row : out) total += row.size();
  pairs.reserve(total);
  for (auto& row : out) std::move(row.begin(), row.end(), std::back_inserter(pairs));
  finish(pairs);
  return pairs;
}

BudgetReport pair_budget_report(const std::vector<TaggedPair>& pairs,
                                const PopularityTiers& tiers) {
  BudgetReport r;
  r.entities = tiers.size();
  if (r.entities == 0) return r;
  r.extremely_popular = tiers.extremely_popular.size();
  r.popular = tiers.popular.size();
  r.unpopular = tiers.unpopular.size();
  for (const auto& p : pairs) (p.segment == Segment::Head ? r.head_pairs : r.extreme_tail_pairs)++;
  r.total_pairs = pairs.size();
  r.exhaustive_ordered = r.entities * (r.entities - 1);
  r.savings = r.exhaustive_ordered == 0
                  ? 0.0
                  : 1.0 - double(r.total_pairs) / double(r.exhaustive_ordered);
  return r;
}

std::string format_budget_report(const BudgetReport& r) {
  std::ostringstream os;
  if (r.empty()) {
    os << "entities,0\nno data\n";
    return os.str();
  }
  os << "entities," << r.entities << '\n'
     << "extremely_popular," << r.extremely_popular << '\n'
     << "popular," << r.popular << '\n'
     << "unpopular," << r.unpopular << '\n'
     << "head_pairs," << r.head_pairs << '\n'
     << "extreme_tail_pairs," << r.extreme_tail_pairs << '\n'
     << "total_pairs," << r.total_pairs << '\n'
     << "exhaustive_ordered," << r.exhaustive_ordered << '\n'
     << "savings," << format_double(r.savings) << '\n';
  return os.str();
}

std::string format_pairs(const std::vector<TaggedPair>& pairs) {
  std::ostringstream os;
  for (const auto& p : pairs)
    os << p.pair.first << ',' << p.pair.second << ',' << segment_tag(p.segment) << '\n';
  return os.str();
}

std::vector<TaggedPair> parse_pairs(const std::string& content, const std::string& source) {
  std::vector<TaggedPair> out;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, ',');
    if (f.size() != 3) throw ParseError(source, line, "expected first,second,segment");
    TaggedPair p{{std::string(trim(f[0])), std::string(trim(f[1]))}, Segment::Head};
    try {
      p.segment = parse_segment(f[2]);
    } catch (const DataError& e) {
      throw ParseError(source, line, e.what());
    }
    if (p.pair.first == p.pair.second) throw ParseError(source, line, "self pair");
    out.push_back(std::move(p));
  });
  return out;
}

}  // namespace compkg::pairgen
