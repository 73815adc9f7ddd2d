#include "compkg/serve.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "compkg/kernels.hpp"

namespace compkg::serve {

ItemCatalog::ItemCatalog(const eei::Scorer& scorer, const std::vector<ingest::Item>& items)
    : dim_(scorer.model().dim()) {
  const std::size_t f = scorer.model().feature_dim();
  std::vector<double> flat;
  for (const auto& it : items) {
    if (!it.entity) continue;
    if (it.features.size() != f)
      throw DataError("item '" + it.id + "' feature length does not match the model");
    if (!index_.emplace(it.id, ids_.size()).second)
      throw DataError("duplicate item id '" + it.id + "'");
    by_entity_[*it.entity].push_back(ids_.size());
    ids_.push_back(it.id);
    entity_.push_back(*it.entity);
    features_.push_back(it.features);
    flat.insert(flat.end(), it.features.begin(), it.features.end());
  }
  embeddings_ = kernels::item_embeddings(scorer.model(), flat, ids_.size());
}

std::optional<std::size_t> ItemCatalog::find(const ItemId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::vector<std::size_t>& ItemCatalog::items_of(const EntityId& e) const {
  static const std::vector<std::size_t> none;
  auto it = by_entity_.find(e);
  return it == by_entity_.end() ? none : it->second;
}

std::vector<RecallCandidate> complementary_recall(std::span<const EntityId> bill_sequence,
                                                  const kgraph::ComplementaryGraph& graph,
                                                  const eei::Scorer& scorer,
                                                  const ItemCatalog& catalog, std::size_t k) {
  if (k == 0) throw UsageError("recall k must be at least 1");
  std::vector<EntityId> sources;
  for (const auto& e : bill_sequence)
    if (std::find(sources.begin(), sources.end(), e) == sources.end()) sources.push_back(e);

  std::map<std::size_t, RecallCandidate> best;  // catalog index -> candidate
  for (const auto& e1 : sources) {
    auto k1 = scorer.find_entity(e1);
    auto succ = graph.adjacency().find(e1);
    if (!k1 || succ == graph.adjacency().end()) continue;
    for (const auto& [e2, edge] : succ->second) {
      for (auto i : catalog.items_of(e2)) {
        const double s = scorer.score(*k1, catalog.embedding(i));
        auto [it, fresh] = best.try_emplace(i, RecallCandidate{catalog.id(i), e1, e2, s});
        if (!fresh && (s > it->second.score || (s == it->second.score && e1 < it->second.e1)))
          it->second = RecallCandidate{catalog.id(i), e1, e2, s};
      }
    }
  }
  std::vector<RecallCandidate> out;
  out.reserve(best.size());
  for (auto& [_, c] : best) out.push_back(std::move(c));
  std::sort(out.begin(), out.end(), [](const RecallCandidate& a, const RecallCandidate& b) {
    return a.score != b.score ? a.score > b.score : a.item < b.item;
  });
  if (out.size() > k) out.resize(k);
  return out;
}

std::vector<ItemId> popularity_ranking(const ingest::InteractionLog& log, std::int64_t until) {
  std::map<ItemId, std::int64_t> clicks;
  for (const auto& r : log.rows)
    if (r.timestamp <= until && r.clicked) ++clicks[r.item];
  std::vector<std::pair<ItemId, std::int64_t>> v(clicks.begin(), clicks.end());
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<ItemId> out;
  for (auto& [id, _] : v) out.push_back(id);
  return out;
}

EnrichedSample enrich_sample(std::span<const double> base, std::span<const EntityId> bill_sequence,
                             const ItemId& item, const kgraph::ComplementaryGraph& graph,
                             const eei::Scorer& scorer, const ItemCatalog& catalog) {
  EnrichedSample s;
  s.base.assign(base.begin(), base.end());
  const std::size_t d = catalog.dim();
  s.entity_embedding.assign(d, 0.0);
  s.item_embedding.assign(d, 0.0);
  auto idx = catalog.find(item);
  if (!idx) return s;
  const EntityId& e2 = catalog.entity(*idx);
  for (const auto& e1 : bill_sequence) {
    if (!graph.edge(e1, e2)) continue;
    auto k1 = scorer.find_entity(e1);
    if (!k1) continue;
    const double sc = scorer.score(*k1, catalog.embedding(*idx));
    if (!s.has_path || sc > s.eei_score || (sc == s.eei_score && e1 < s.source_entity)) {
      s.has_path = true;
      s.eei_score = sc;
      s.source_entity = e1;
    }
  }
  if (s.has_path) {
    auto emb = scorer.entity_embedding(s.source_entity);
    s.entity_embedding.assign(emb.begin(), emb.end());
    auto ie = catalog.embedding(*idx);
    s.item_embedding.assign(ie.begin(), ie.end());
  }
  return s;
}

const char* feature_set_name(FeatureSet s) { return s == FeatureSet::Base ? "base" : "with_eei"; }

std::vector<double> ranker_features(const EnrichedSample& s, FeatureSet set) {
  std::vector<double> f = s.base;
  if (set == FeatureSet::Base) return f;
  f.push_back(s.eei_score);
  f.push_back(s.has_path ? 1.0 : 0.0);
  f.insert(f.end(), s.entity_embedding.begin(), s.entity_embedding.end());
  f.insert(f.end(), s.item_embedding.begin(), s.item_embedding.end());
  return f;
}

// ---------------------------------------------------------------------------
// Fine ranker

FineRanker FineRanker::fit(const std::vector<std::vector<double>>& rows,
                           const std::vector<double>& labels, FeatureSet set,
                           const RankerConfig& cfg) {
  if (rows.empty()) throw DataError("ranker: no training rows");
  if (rows.size() != labels.size()) throw UsageError("ranker: rows and labels differ in length");
  if (cfg.hidden == 0 || cfg.batch_size == 0) throw UsageError("ranker: hidden and batch sizes must be positive");
  const std::size_t in = rows.front().size(), h = cfg.hidden, n = rows.size();
  for (const auto& r : rows)
    if (r.size() != in) throw DataError("ranker: ragged feature rows");

  FineRanker m;
  m.set_ = set;
  m.hidden_ = h;
  m.mean_.assign(in, 0.0);
  m.scale_.assign(in, 0.0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < in; ++c) m.mean_[c] += r[c] / double(n);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < in; ++c) m.scale_[c] += (r[c] - m.mean_[c]) * (r[c] - m.mean_[c]) / double(n);
  for (auto& s : m.scale_) s = s > 1e-12 ? 1.0 / std::sqrt(s) : 1.0;

  std::mt19937_64 rng(sub_seed(cfg.seed, std::string("ranker-") + feature_set_name(set)));
  m.w1_.resize(h * in);
  m.b1_.assign(h, 0.0);
  m.w2_.resize(h);
  const double b1 = std::sqrt(3.0 / double(std::max<std::size_t>(1, in)));
  const double b2 = std::sqrt(3.0 / double(h));
  for (auto& w : m.w1_) w = (2.0 * uniform01(rng) - 1.0) * b1;
  for (auto& w : m.w2_) w = (2.0 * uniform01(rng) - 1.0) * b2;

  std::vector<std::vector<double>> x(n, std::vector<double>(in));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < in; ++c) x[i][c] = (rows[i][c] - m.mean_[c]) * m.scale_[c];

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> gw1(h * in), gb1(h), gw2(h), a(h);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_below(rng, i)]);
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      const std::size_t e = std::min(n, s + cfg.batch_size);
      std::fill(gw1.begin(), gw1.end(), 0.0);
      std::fill(gb1.begin(), gb1.end(), 0.0);
      std::fill(gw2.begin(), gw2.end(), 0.0);
      double gb2 = 0.0;
      const double inv = 1.0 / double(e - s);
      for (std::size_t t = s; t < e; ++t) {
        const auto& xi = x[order[t]];
        double z = m.b2_;
        for (std::size_t r = 0; r < h; ++r) {
          double u = m.b1_[r];
          for (std::size_t c = 0; c < in; ++c) u += m.w1_[r * in + c] * xi[c];
          a[r] = std::tanh(u);
          z += m.w2_[r] * a[r];
        }
        const double dz = (1.0 / (1.0 + std::exp(-z)) - labels[order[t]]) * inv;
        gb2 += dz;
        for (std::size_t r = 0; r < h; ++r) {
          gw2[r] += dz * a[r];
          const double du = dz * m.w2_[r] * (1.0 - a[r] * a[r]);
          gb1[r] += du;
          for (std::size_t c = 0; c < in; ++c) gw1[r * in + c] += du * xi[c];
        }
      }
      for (std::size_t i = 0; i < gw1.size(); ++i)
        m.w1_[i] -= cfg.learning_rate * (gw1[i] + 2.0 * cfg.l2 * m.w1_[i]);
      for (std::size_t r = 0; r < h; ++r) {
        m.b1_[r] -= cfg.learning_rate * gb1[r];
        m.w2_[r] -= cfg.learning_rate * (gw2[r] + 2.0 * cfg.l2 * m.w2_[r]);
      }
      m.b2_ -= cfg.learning_rate * gb2;
    }
  }
  return m;
}

double FineRanker::predict(std::span<const double> row) const {
  const std::size_t in = input_dim();
  if (row.size() != in)
    throw DataError("ranker expects " + std::to_string(in) + " features, got " +
                    std::to_string(row.size()));
  double z = b2_;
  for (std::size_t r = 0; r < hidden_; ++r) {
    double u = b1_[r];
    for (std::size_t c = 0; c < in; ++c) u += w1_[r * in + c] * (row[c] - mean_[c]) * scale_[c];
    z += w2_[r] * std::tanh(u);
  }
  return z;
}

std::string FineRanker::serialize() const {
  std::ostringstream os;
  os << "compkg-ranker 1\n"
     << "features " << feature_set_name(set_) << '\n'
     << "input " << input_dim() << '\n'
     << "hidden " << hidden_ << '\n';
  auto row = [&](const char* name, const std::vector<double>& v) {
    os << name;
    for (double x : v) os << ' ' << format_double(x);
    os << '\n';
  };
  row("mean", mean_);
  row("scale", scale_);
  row("w1", w1_);
  row("b1", b1_);
  row("w2", w2_);
  os << "b2 " << format_double(b2_) << '\n';
  return os.str();
}

FineRanker FineRanker::deserialize(const std::string& content) {
  std::istringstream in(content);
  std::string key, value;
  FineRanker m;
  auto expect = [&](const char* k) {
    if (!(in >> key) || key != k) throw DataError(std::string("ranker file: expected ") + k);
  };
  auto read_vec = [&](const char* k, std::size_t n, std::vector<double>& v) {
    expect(k);
    v.resize(n);
    for (auto& x : v) {
      if (!(in >> value)) throw DataError(std::string("ranker file: truncated ") + k);
      x = parse_double(value, k);
    }
  };
  expect("compkg-ranker");
  in >> value;
  if (value != "1") throw DataError("ranker file: unsupported version " + value);
  expect("features");
  in >> value;
  m.set_ = value == "base" ? FeatureSet::Base : FeatureSet::WithEei;
  expect("input");
  in >> value;
  const auto n_in = std::size_t(parse_int(value, "input"));
  expect("hidden");
  in >> value;
  m.hidden_ = std::size_t(parse_int(value, "hidden"));
  read_vec("mean", n_in, m.mean_);
  read_vec("scale", n_in, m.scale_);
  read_vec("w1", n_in * m.hidden_, m.w1_);
  read_vec("b1", m.hidden_, m.b1_);
  read_vec("w2", m.hidden_, m.w2_);
  std::vector<double> b2;
  read_vec("b2", 1, b2);
  m.b2_ = b2[0];
  return m;
}

RankedList fine_rank(std::span<const ItemId> candidates, std::span<const EnrichedSample> features,
                     const FineRanker& ranker) {
  if (candidates.size() != features.size())
    throw DataError("fine_rank: " + std::to_string(candidates.size()) + " candidates but " +
                    std::to_string(features.size()) + " feature rows");
  std::vector<double> scores(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) scores[i] = ranker.predict(features[i]);
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RankedList out;
  for (auto i : order) {
    out.items.push_back(candidates[i]);
    out.scores.push_back(scores[i]);
  }
  return out;
}

double auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw UsageError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * double(i + 1 + j);  // average of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] > 0.5) {
        pos_rank_sum += mid_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw DataError("auc needs at least one positive and one negative label");
  return (pos_rank_sum - 0.5 * double(pos) * double(pos + 1)) / (double(pos) * double(neg));
}

HitRate hit_rate(const std::vector<std::vector<ItemId>>& recommended,
                 const std::vector<std::set<ItemId>>& targets, std::size_t k) {
  if (recommended.size() != targets.size()) throw UsageError("hit_rate: query counts differ");
  HitRate h;
  for (std::size_t q = 0; q < targets.size(); ++q) {
    if (targets[q].empty()) continue;
    ++h.queries;
    const std::size_t n = std::min(k, recommended[q].size());
    for (std::size_t i = 0; i < n; ++i)
      if (targets[q].count(recommended[q][i])) {
        ++h.hits;
        break;
      }
  }
  return h;
}

const char* arm_name(Arm a) { return a == Arm::Baseline ? "baseline" : "experiment"; }

Arm parse_arm(std::string_view s) {
  if (s == "baseline") return Arm::Baseline;
  if (s == "experiment") return Arm::Experiment;
  throw DataError("unknown experiment arm '" + std::string(s) + "'");
}

std::vector<CvrCell> cvr_matrix(std::span<const ArmExposure> exposures,
                                std::span<const pairgen::EntityPair> universe) {
  std::map<pairgen::EntityPair, std::size_t> at;
  std::vector<CvrCell> cells;
  for (const auto& p : universe)
    if (at.emplace(p, cells.size()).second) {
      CvrCell c;
      c.e1 = p.first;
      c.e2 = p.second;
      cells.push_back(std::move(c));
    }
  for (const auto& x : exposures) {
    auto it = at.find({x.e1, x.e2});
    if (it == at.end()) continue;
    auto& c = cells[it->second];
    if (x.arm == Arm::Baseline) {
      ++c.exposures_baseline;
      c.conversions_baseline += x.converted;
    } else {
      ++c.exposures_experiment;
      c.conversions_experiment += x.converted;
    }
  }
  for (auto& c : cells)
    if (c.exposures_baseline > 0 && c.exposures_experiment > 0)
      c.delta = double(c.conversions_experiment) / double(c.exposures_experiment) -
                double(c.conversions_baseline) / double(c.exposures_baseline);
  return cells;
}

std::string format_cvr_matrix(std::span<const CvrCell> cells) {
  std::ostringstream os;
  os << "e1,e2,delta\n";
  for (const auto& c : cells)
    os << c.e1 << ',' << c.e2 << ',' << (c.delta ? format_double(*c.delta) : "absent") << '\n';
  return os.str();
}

std::string format_arm_exposures(std::span<const ArmExposure> rows) {
  std::ostringstream os;
  for (const auto& r : rows)
    os << arm_name(r.arm) << ',' << r.e1 << ',' << r.e2 << ',' << int(r.converted) << '\n';
  return os.str();
}

std::vector<ArmExposure> parse_arm_exposures(const std::string& content, const std::string& source) {
  std::vector<ArmExposure> out;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, ',');
    if (f.size() != 4) throw ParseError(source, line, "expected arm,e1,e2,converted");
    if (f[3] != "0" && f[3] != "1") throw ParseError(source, line, "converted must be 0 or 1");
    try {
      out.push_back({parse_arm(f[0]), f[1], f[2], f[3] == "1"});
    } catch (const ParseError&) {
      throw;
    } catch (const DataError& e) {
      throw ParseError(source, line, e.what());
    }
  });
  return out;
}

}  // namespace compkg::serve
