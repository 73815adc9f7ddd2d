#include "compkg/kgraph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace compkg::kgraph {

const Edge* ComplementaryGraph::edge(const EntityId& first, const EntityId& second) const {
  auto it = out_.find(first);
  if (it == out_.end()) return nullptr;
  auto jt = it->second.find(second);
  return jt == it->second.end() ? nullptr : &jt->second;
}

std::size_t ComplementaryGraph::edge_count() const {
  std::size_t n = 0;
  for (const auto& [_, succ] : out_) n += succ.size();
  return n;
}

std::size_t ComplementaryGraph::remove_node(const EntityId& e) {
  if (!nodes_.erase(e)) return 0;
  std::size_t dropped = 0;
  if (auto it = out_.find(e); it != out_.end()) {
    dropped += it->second.size();
    out_.erase(it);
  }
  for (auto it = out_.begin(); it != out_.end();) {
    dropped += it->second.erase(e);
    it = it->second.empty() ? out_.erase(it) : std::next(it);
  }
  return dropped;
}

void ComplementaryGraph::set_edge(const EntityId& first, const EntityId& second, Edge edge) {
  if (first == second) throw DataError("self loop on '" + first + "'");
  if (!has_node(first) || !has_node(second))
    throw DataError("edge " + first + "->" + second + " has an endpoint outside the graph");
  if (edge.weight && !(*edge.weight >= 0.0 && *edge.weight <= 1.0))
    throw DataError("edge weight outside [0,1]");
  out_[first][second] = std::move(edge);
}

bool ComplementaryGraph::remove_edge(const EntityId& first, const EntityId& second) {
  auto it = out_.find(first);
  if (it == out_.end()) return false;
  bool removed = it->second.erase(second) != 0;
  if (it->second.empty()) out_.erase(it);
  return removed;
}

void ComplementaryGraph::set_weight(const EntityId& first, const EntityId& second,
                                    std::optional<double> weight) {
  auto it = out_.find(first);
  if (it == out_.end() || !it->second.count(second))
    throw DataError("no edge " + first + "->" + second);
  if (weight && !(*weight >= 0.0 && *weight <= 1.0)) throw DataError("edge weight outside [0,1]");
  it->second[second].weight = weight;
}

namespace {

void check_known(const ComplementaryGraph& g, std::span<const oracle::OracleVerdict> verdicts) {
  std::set<EntityId> unknown;
  for (const auto& v : verdicts) {
    if (!g.has_node(v.pair.first)) unknown.insert(v.pair.first);
    if (!g.has_node(v.pair.second)) unknown.insert(v.pair.second);
  }
  if (unknown.empty()) return;
  std::string msg = "verdicts name unknown entities:";
  for (const auto& e : unknown) msg += " " + e;
  throw DataError(msg);
}

void apply_in_place(ComplementaryGraph& g, std::span<const oracle::OracleVerdict> verdicts) {
  for (const auto& v : verdicts) {
    if (v.pair.first == v.pair.second) throw DataError("self-pair verdict on '" + v.pair.first + "'");
    const Day day = day_of(v.issued_at);
    g.note_date(day);
    if (v.verdict == oracle::Verdict::Yes) {
      Edge e{{v.model_id, day}, std::nullopt};
      if (const Edge* old = g.edge(v.pair.first, v.pair.second)) e.weight = old->weight;
      g.set_edge(v.pair.first, v.pair.second, std::move(e));
    } else {
      g.remove_edge(v.pair.first, v.pair.second);
    }
  }
}

}  // namespace

ComplementaryGraph upsert_edges(const ComplementaryGraph& graph,
                                std::span<const oracle::OracleVerdict> verdicts) {
  check_known(graph, verdicts);
  ComplementaryGraph g = graph;
  apply_in_place(g, verdicts);
  return g;
}

ComplementaryGraph incremental_update(const ComplementaryGraph& graph,
                                      std::span<const oracle::OracleVerdict> daily,
                                      const std::set<EntityId>& retired) {
  if (auto latest = graph.latest_date())
    for (const auto& v : daily)
      if (day_of(v.issued_at) < *latest)
        throw DataError("verdict " + v.pair.first + "->" + v.pair.second + " dated " +
                        format_day(day_of(v.issued_at)) + " predates graph date " +
                        format_day(*latest));
  ComplementaryGraph g = graph;
  for (const auto& e : retired) g.remove_node(e);
  check_known(g, daily);
  apply_in_place(g, daily);
  return g;
}

std::vector<Neighbor> neighbors(const ComplementaryGraph& graph, const EntityId& entity) {
  std::vector<Neighbor> out;
  auto it = graph.adjacency().find(entity);
  if (it == graph.adjacency().end()) return out;
  for (const auto& [second, edge] : it->second) out.push_back({second, edge.weight});
  // successors arrive id-sorted, so a stable sort on weight alone settles ties by id
  std::stable_sort(out.begin(), out.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.weight.has_value() != b.weight.has_value()) return a.weight.has_value();
    return a.weight && *a.weight > *b.weight;
  });
  return out;
}

ComplementaryGraph apply_feedback_weights(const ComplementaryGraph& graph, const RawScorer& score,
                                          const ItemIndex& item_index) {
  ComplementaryGraph g = graph;
  for (const auto& [first, succ] : graph.adjacency()) {
    for (const auto& [second, edge] : succ) {
      auto it = item_index.find(second);
      if (it == item_index.end() || it->second.empty()) {
        g.set_weight(first, second, std::nullopt);
        continue;
      }
      double sum = 0.0;
      for (const auto& item : it->second) sum += 1.0 / (1.0 + std::exp(-score(first, item)));
      g.set_weight(first, second, sum / double(it->second.size()));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Persistence
//
//   compkg-graph <version>
//   date <YYYY-MM-DD | ->
//   checksum <fnv1a64 of everything after this line>
//   nodes <n>
//   <entity id>            x n
//   edges <m>
//   first,second,weight_or_dash,model_id,date   x m

std::string serialize(const ComplementaryGraph& graph) {
  std::ostringstream body;
  body << "nodes " << graph.nodes().size() << '\n';
  for (const auto& n : graph.nodes()) body << n << '\n';
  body << "edges " << graph.edge_count() << '\n';
  for (const auto& [first, succ] : graph.adjacency())
    for (const auto& [second, e] : succ)
      body << first << ',' << second << ',' << (e.weight ? format_double(*e.weight) : "-") << ','
           << e.provenance.model_id << ',' << format_day(e.provenance.date) << '\n';
  const std::string b = body.str();
  std::ostringstream os;
  os << "compkg-graph " << kGraphFormatVersion << '\n';
  os << "date " << (graph.latest_date() ? format_day(*graph.latest_date()) : "-") << '\n';
  os << "checksum " << hex64(fnv1a64(b)) << '\n';
  os << b;
  return os.str();
}

ComplementaryGraph deserialize(const std::string& content) {
  std::size_t pos = 0;
  auto next_line = [&](const char* what) -> std::string_view {
    if (pos >= content.size()) throw ChecksumError(std::string("graph file truncated before ") + what);
    auto end = content.find('\n', pos);
    if (end == std::string::npos) throw ChecksumError(std::string("graph file truncated in ") + what);
    std::string_view line(content.data() + pos, end - pos);
    pos = end + 1;
    return line;
  };
  auto header = next_line("header");
  if (header.rfind("compkg-graph ", 0) != 0) throw FormatVersionError("not a graph file");
  const auto version = parse_int(header.substr(13), "graph format version");
  if (version != kGraphFormatVersion)
    throw FormatVersionError("graph format version " + std::to_string(version) +
                             ", expected " + std::to_string(kGraphFormatVersion));
  auto date_line = next_line("date");
  if (date_line.rfind("date ", 0) != 0) throw DataError("graph file: missing date line");
  auto checksum_line = next_line("checksum");
  if (checksum_line.rfind("checksum ", 0) != 0) throw DataError("graph file: missing checksum");
  const std::string body = content.substr(pos);
  if (hex64(fnv1a64(body)) != std::string(checksum_line.substr(9)))
    throw ChecksumError("graph file checksum mismatch");

  ComplementaryGraph g;
  auto dstr = trim(date_line.substr(5));
  if (dstr != "-") g.note_date(parse_day(dstr));
  auto counted = [&](const char* key) {
    auto line = next_line(key);
    const std::string prefix = std::string(key) + " ";
    if (line.rfind(prefix, 0) != 0) throw DataError(std::string("graph file: expected ") + key);
    return static_cast<std::size_t>(parse_int(line.substr(prefix.size()), key));
  };
  const auto n = counted("nodes");
  for (std::size_t i = 0; i < n; ++i) g.add_node(std::string(next_line("nodes")));
  const auto m = counted("edges");
  for (std::size_t i = 0; i < m; ++i) {
    auto f = split(next_line("edges"), ',');
    if (f.size() != 5) throw DataError("graph file: bad edge row");
    Edge e{{f[3], parse_day(f[4])}, std::nullopt};
    if (f[2] != "-") e.weight = parse_double(f[2], "edge weight");
    g.set_edge(f[0], f[1], std::move(e));
  }
  if (pos != content.size()) throw DataError("graph file: trailing content");
  return g;
}

void persist(const ComplementaryGraph& graph, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(graph));
}

ComplementaryGraph load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

GraphStore::GraphStore(ComplementaryGraph initial)
    : current_(std::make_shared<const ComplementaryGraph>(std::move(initial))) {}

std::shared_ptr<const ComplementaryGraph> GraphStore::snapshot() const {
  std::lock_guard lock(mu_);
  return current_;
}

void GraphStore::update(const std::function<ComplementaryGraph(const ComplementaryGraph&)>& fn) {
  std::lock_guard writer(writer_);
  auto base = snapshot();
  auto next = std::make_shared<const ComplementaryGraph>(fn(*base));
  std::lock_guard lock(mu_);
  current_ = std::move(next);
}

std::set<EntityId> RetirementTracker::observe(Day day, const std::set<EntityId>& tracked,
                                              const std::set<EntityId>& present) {
  if (last_day_ && day <= *last_day_)
    throw DataError("dictionary snapshot for " + format_day(day) + " is not after " +
                    format_day(*last_day_));
  const int elapsed = last_day_ ? int(day - *last_day_) : 1;
  last_day_ = day;
  std::set<EntityId> retire;
  std::map<EntityId, int> streaks;
  for (const auto& e : tracked) {
    if (present.count(e)) continue;
    auto it = absent_streak_.find(e);
    const int streak = (it == absent_streak_.end() ? 0 : it->second) + elapsed;
    if (streak >= threshold_)
      retire.insert(e);
    else
      streaks[e] = streak;
  }
  absent_streak_ = std::move(streaks);
  return retire;
}

std::string RetirementTracker::serialize() const {
  std::ostringstream os;
  os << "threshold," << threshold_ << '\n';
  os << "last_day," << (last_day_ ? format_day(*last_day_) : "-") << '\n';
  for (const auto& [e, s] : absent_streak_) os << e << ',' << s << '\n';
  return os.str();
}

RetirementTracker RetirementTracker::deserialize(const std::string& content) {
  RetirementTracker t;
  std::size_t row = 0;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, ',');
    if (f.size() != 2) throw ParseError("retirement state", line, "expected key,value");
    if (row == 0)
      t.threshold_ = int(parse_int(f[1], "threshold"));
    else if (row == 1)
      t.last_day_ = f[1] == "-" ? std::nullopt : std::optional<Day>(parse_day(f[1]));
    else
      t.absent_streak_[f[0]] = int(parse_int(f[1], "streak"));
    ++row;
  });
  return t;
}

}  // namespace compkg::kgraph
