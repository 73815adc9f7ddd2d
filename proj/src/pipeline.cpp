#include "compkg/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <set>
#include <sstream>

#include "compkg/http_backend.hpp"
#include "compkg/ingest.hpp"
#include "compkg/kgraph.hpp"
#include "compkg/trigraph.hpp"

namespace compkg::pipeline {

namespace fs = std::filesystem;

std::uint64_t PipelineConfig::require_seed() const {
  if (!seed) throw UsageError("a seed is required: set 'seed' in the config or pass --seed");
  return *seed;
}

// ---------------------------------------------------------------------------
// Config

namespace {

using Setter = std::function<void(PipelineConfig&, const std::string&, const fs::path&)>;

template <typename T>
T as_int(const std::string& key, const std::string& v) {
  try {
    const auto x = parse_int(v, key);
    if (x < 0) throw UsageError("config '" + key + "' must be non-negative");
    return T(x);
  } catch (const DataError& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

double as_double(const std::string& key, const std::string& v) {
  try {
    return parse_double(v, key);
  } catch (const DataError& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw UsageError("config '" + key + "' expects a boolean, got '" + v + "'");
}

fs::path as_path(const std::string& v, const fs::path& base) {
  fs::path p(v);
  return p.is_absolute() ? p : base / p;
}

std::int64_t as_time(const std::string& key, const std::string& v) {
  if (v.size() == 10 && v[4] == '-') {
    try {
      return parse_day(v) * kSecondsPerDay;
    } catch (const DataError& e) {
      throw UsageError(std::string("config: ") + e.what());
    }
  }
  return as_int<std::int64_t>(key, v);
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> m = [] {
    std::map<std::string, Setter> s;
#define COMPKG_INT(key, field) \
  s[key] = [](PipelineConfig& c, const std::string& v, const fs::path&) { c.field = as_int<decltype(c.field)>(key, v); }
#define COMPKG_DBL(key, field) \
  s[key] = [](PipelineConfig& c, const std::string& v, const fs::path&) { c.field = as_double(key, v); }
#define COMPKG_PATH(key, field) \
  s[key] = [](PipelineConfig& c, const std::string& v, const fs::path& b) { c.field = as_path(v, b); }
#define COMPKG_STR(key, field) \
  s[key] = [](PipelineConfig& c, const std::string& v, const fs::path&) { c.field = v; }
    s["seed"] = [](PipelineConfig& c, const std::string& v, const fs::path&) {
      c.seed = as_int<std::uint64_t>("seed", v);
    };
    COMPKG_PATH("out_dir", out_dir);
    COMPKG_PATH("corpus.items", items);
    COMPKG_PATH("corpus.bills", bills);
    COMPKG_PATH("corpus.logs", logs);
    COMPKG_PATH("corpus.dict", dict);
    COMPKG_PATH("corpus.truth", truth);
    COMPKG_INT("corpus.feature_dim", feature_dim);
    COMPKG_DBL("pairgen.q_extreme", thresholds.q_extreme);
    COMPKG_DBL("pairgen.q_popular", thresholds.q_popular);
    COMPKG_STR("oracle.backend", backend);
    COMPKG_STR("oracle.endpoint", client.endpoint);
    COMPKG_STR("oracle.model_id", client.model_id);
    COMPKG_STR("oracle.api_key", client.api_key);
    COMPKG_DBL("oracle.timeout_seconds", client.timeout_seconds);
    COMPKG_INT("oracle.max_retries", client.max_retries);
    COMPKG_INT("oracle.max_in_flight", client.max_in_flight);
    COMPKG_INT("oracle.batch_size", oracle_batch);
    s["oracle.backoff_ms"] = [](PipelineConfig& c, const std::string& v, const fs::path&) {
      c.client.base_backoff = std::chrono::milliseconds(as_int<std::int64_t>("oracle.backoff_ms", v));
    };
    s["oracle.issued_at"] = [](PipelineConfig& c, const std::string& v, const fs::path&) {
      c.issued_at = as_time("oracle.issued_at", v);
    };
    COMPKG_INT("eei.dim", eei.dim);
    COMPKG_DBL("eei.tau", eei.tau);
    COMPKG_DBL("eei.lambda_cl", eei.lambda_cl);
    COMPKG_DBL("eei.lambda_l2", eei.lambda_l2);
    COMPKG_DBL("eei.learning_rate", eei.learning_rate);
    COMPKG_INT("eei.epochs", eei.epochs);
    COMPKG_INT("eei.batch_size", eei.batch_size);
    s["eei.sigma_inside"] = [](PipelineConfig& c, const std::string& v, const fs::path&) {
      c.eei.sigma_inside = as_bool("eei.sigma_inside", v);
    };
    COMPKG_INT("window_days", window_days);
    COMPKG_INT("recall.k", recall_k);
    COMPKG_INT("recall.window_days", recall_window_days);
    COMPKG_INT("ranker.hidden", ranker.hidden);
    COMPKG_INT("ranker.epochs", ranker.epochs);
    COMPKG_DBL("ranker.learning_rate", ranker.learning_rate);
    COMPKG_INT("ranker.batch_size", ranker.batch_size);
    COMPKG_DBL("ranker.l2", ranker.l2);
    COMPKG_DBL("eval.holdout_fraction", holdout_fraction);
    COMPKG_INT("eval.followup_seconds", followup_seconds);
    COMPKG_INT("eval.arm_exposures", arm_exposures);
    COMPKG_INT("eval.cvr_pairs", cvr_pairs);
    COMPKG_PATH("eval.arm_log", arm_log);
    COMPKG_PATH("update.verdicts", update_verdicts);
    COMPKG_PATH("update.explanations", update_explanations);
    COMPKG_PATH("update.dict", update_dict);
    s["update.date"] = [](PipelineConfig& c, const std::string& v, const fs::path&) {
      try {
        c.update_date = parse_day(v);
      } catch (const DataError& e) {
        throw UsageError(std::string("config: ") + e.what());
      }
    };
    COMPKG_INT("update.retire_after_days", retire_after_days);
    COMPKG_PATH("report.annotations", annotations);
    COMPKG_INT("synth.entities", synth.entities);
    COMPKG_DBL("synth.head_fraction", synth.head_fraction);
    COMPKG_DBL("synth.head_share", synth.head_share);
    COMPKG_DBL("synth.tail_exponent", synth.tail_exponent);
    COMPKG_INT("synth.users", synth.users);
    COMPKG_INT("synth.items_per_entity", synth.items_per_entity);
    COMPKG_INT("synth.unmatched_items", synth.unmatched_items);
    COMPKG_INT("synth.feature_dim", synth.feature_dim);
    COMPKG_INT("synth.days", synth.days);
    COMPKG_INT("synth.sessions_per_user", synth.sessions_per_user);
    COMPKG_INT("synth.complementary_exposures", synth.complementary_exposures);
    COMPKG_INT("synth.random_exposures", synth.random_exposures);
    COMPKG_DBL("synth.click_noise", synth.click_noise);
    COMPKG_DBL("synth.conversion_rate", synth.conversion_rate);
    COMPKG_INT("synth.min_out_degree", synth.min_out_degree);
    COMPKG_INT("synth.max_out_degree", synth.max_out_degree);
    COMPKG_DBL("synth.core_fraction", synth.core_fraction);
#undef COMPKG_INT
#undef COMPKG_DBL
#undef COMPKG_PATH
#undef COMPKG_STR
    return s;
  }();
  return m;
}

}  // namespace

PipelineConfig parse_config(const std::string& content, const fs::path& base_dir) {
  PipelineConfig c;
  c.out_dir = base_dir;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    const auto eq = text.find('=');
    if (eq == std::string_view::npos)
      throw UsageError("config line " + std::to_string(line) + ": expected key = value");
    const std::string key(trim(text.substr(0, eq)));
    const std::string value(trim(text.substr(eq + 1)));
    auto it = setters().find(key);
    if (it == setters().end())
      throw UsageError("config line " + std::to_string(line) + ": unknown key '" + key + "'");
    it->second(c, value, base_dir);
  });
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
  auto c = parse_config(read_file(path), fs::absolute(path).parent_path());
  apply_environment(c);
  return c;
}

void apply_environment(PipelineConfig& c) {
  if (const char* key = std::getenv("COMPKG_API_KEY"); key && *key) c.client.api_key = key;
}

// ---------------------------------------------------------------------------
// Lock

OutputLock::OutputLock(const fs::path& out_dir) : path_(out_dir / ".lock") {
  fs::create_directories(out_dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST)
      throw UsageError("output directory " + out_dir.string() +
                       " is locked by another run (remove " + path_.string() + " if stale)");
    throw DataError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// Stage report

std::string StageReport::format() const {
  std::ostringstream os;
  os << "stage " << stage << '\n';
  for (const auto& [f, h] : inputs) os << "input " << f << ' ' << h << '\n';
  for (const auto& [f, h] : outputs) os << "output " << f << ' ' << h << '\n';
  for (const auto& [k, v] : counts) os << "count " << k << ' ' << v << '\n';
  return os.str();
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"synth", "extract", "pairs", "infer", "graph",
                                                 "update", "train", "recall", "rank", "eval",
                                                 "report"};
  return names;
}

namespace {

// Artifact names.
constexpr const char* kEntities = "entities.tsv";
constexpr const char* kItemEntities = "item_entities.tsv";
constexpr const char* kBillEntities = "bill_entities.tsv";
constexpr const char* kPairs = "pairs.csv";
constexpr const char* kBudget = "pair_budget.txt";
constexpr const char* kVerdicts = "verdicts.csv";
constexpr const char* kExplanations = "explanations.tsv";
constexpr const char* kVerdictCache = "verdict_cache.tsv";
constexpr const char* kGraph = "graph.kg";
constexpr const char* kRetirement = "retirement.state";
constexpr const char* kModel = "model.eei";
constexpr const char* kLossTrace = "loss_trace.csv";
constexpr const char* kWeightedGraph = "graph_weighted.kg";
constexpr const char* kSplit = "split.txt";
constexpr const char* kRecall = "recall.csv";
constexpr const char* kPopularity = "popularity.csv";
constexpr const char* kRankerEei = "ranker_with_eei.txt";
constexpr const char* kRankerBase = "ranker_base.txt";
constexpr const char* kScores = "scores.csv";
constexpr const char* kRanked = "ranked.csv";
constexpr const char* kAuc = "auc.csv";
constexpr const char* kHitRate = "hit_rate.csv";
constexpr const char* kCvr = "cvr_matrix.csv";
constexpr const char* kArmLog = "arm_log.csv";
constexpr const char* kLlmScores = "llm_scores.csv";
constexpr const char* kReportTxt = "report.txt";

std::string hash_of(const std::string& content) { return hex64(fnv1a64(content)); }

class Stage {
 public:
  Stage(std::string name, const PipelineConfig& cfg) : cfg_(cfg) { report_.stage = std::move(name); }

  const PipelineConfig& cfg() const { return cfg_; }
  fs::path out(const char* file) const { return cfg_.out_dir / file; }

  /// Reads a prerequisite produced by `producer`.
  std::string need(const char* file, const char* producer) {
    const auto p = out(file);
    if (!fs::exists(p))
      throw DataError("missing " + p.string() + ": run stage '" + producer + "' first");
    auto content = read_file(p);
    report_.inputs.emplace_back(file, hash_of(content));
    return content;
  }
  std::string need_external(const fs::path& p, const char* what) {
    if (p.empty()) throw UsageError(std::string("config does not set ") + what);
    if (!fs::exists(p)) throw DataError(std::string(what) + " not found: " + p.string());
    auto content = read_file(p);
    report_.inputs.emplace_back(p.filename().string(), hash_of(content));
    return content;
  }
  void write(const char* file, const std::string& content) {
    write_file_atomic(out(file), content);
    report_.outputs.emplace_back(file, hash_of(content));
  }
  template <typename T>
  void count(const std::string& key, const T& v) {
    std::ostringstream os;
    os << v;
    report_.counts.emplace_back(key, os.str());
  }
  StageReport finish() {
    write_file_atomic(cfg_.out_dir / (report_.stage + ".report"), report_.format());
    return report_;
  }

 private:
  const PipelineConfig& cfg_;
  StageReport report_;
};

/// Corpus with the entity assignments of the extract stage applied.
struct Context {
  ingest::EntityDict dict;
  std::vector<ingest::Item> items;
  std::vector<ingest::Bill> bills;
  ingest::InteractionLog log;
};

ingest::Corpus load_raw(Stage& s) {
  const auto& c = s.cfg();
  auto dict = ingest::parse_dict(s.need_external(c.dict, "corpus.dict"), c.dict.string());
  auto items = ingest::parse_items(s.need_external(c.items, "corpus.items"), c.feature_dim, c.items.string());
  auto bills = ingest::parse_bills(s.need_external(c.bills, "corpus.bills"), c.bills.string());
  auto log = ingest::parse_log(s.need_external(c.logs, "corpus.logs"), c.logs.string());
  ingest::check_references(items, log);
  ingest::Corpus corpus;
  corpus.dict = std::move(dict);
  corpus.items = std::move(items);
  corpus.bills = std::move(bills);
  corpus.log = std::move(log);
  return corpus;
}

Context load_context(Stage& s) {
  auto raw = load_raw(s);
  Context ctx;
  ctx.dict = ingest::parse_dict(s.need(kEntities, "extract"), kEntities);
  const auto item_rows = s.need(kItemEntities, "extract");
  const auto bill_rows = s.need(kBillEntities, "extract");
  std::map<ItemId, std::optional<EntityId>> assigned;
  for_each_record(item_rows, [&](std::size_t line, std::string_view text) {
    auto f = split(text, '\t');
    if (f.size() != 2) throw ParseError(kItemEntities, line, "expected item_id, entity");
    assigned[f[0]] = f[1] == "-" ? std::nullopt : std::optional<EntityId>(f[1]);
  });
  ctx.items = std::move(raw.items);
  for (auto& it : ctx.items) {
    auto a = assigned.find(it.id);
    if (a == assigned.end())
      throw DataError("item '" + it.id + "' missing from " + std::string(kItemEntities) +
                      ": run stage 'extract' again");
    it.entity = a->second;
  }
  ctx.bills = std::move(raw.bills);
  std::size_t row = 0;
  for_each_record(bill_rows, [&](std::size_t line, std::string_view text) {
    auto f = split(text, '\t');
    if (f.size() != 3 || row >= ctx.bills.size())
      throw ParseError(kBillEntities, line, "does not match the bills file: run stage 'extract' again");
    auto& b = ctx.bills[row++];
    b.entities.clear();
    if (!f[2].empty())
      for (auto& e : split(f[2], '|')) b.entities.push_back(e);
  });
  if (row != ctx.bills.size())
    throw DataError(std::string(kBillEntities) + " does not match the bills file: run stage 'extract' again");
  ctx.log = std::move(raw.log);
  return ctx;
}

struct Split {
  std::int64_t cutoff = 0;
  std::int64_t first = 0, last = 0;
};

Split time_split(const ingest::InteractionLog& log, double holdout) {
  if (log.rows.empty()) throw DataError("interaction log is empty");
  if (!(holdout > 0.0 && holdout < 1.0)) throw UsageError("eval.holdout_fraction must lie in (0,1)");
  Split s;
  s.first = s.last = log.rows.front().timestamp;
  for (const auto& r : log.rows) {
    s.first = std::min(s.first, r.timestamp);
    s.last = std::max(s.last, r.timestamp);
  }
  s.cutoff = s.first + std::int64_t(double(s.last - s.first) * (1.0 - holdout));
  return s;
}

Split read_split(Stage& s) {
  Split sp;
  const auto text = s.need(kSplit, "train");
  for_each_record(text, [&](std::size_t line, std::string_view t) {
    auto f = split(t, ' ');
    if (f.size() != 2) throw ParseError(kSplit, line, "expected key value");
    const auto v = parse_int(f[1], f[0]);
    if (f[0] == "cutoff") sp.cutoff = v;
    if (f[0] == "first") sp.first = v;
    if (f[0] == "last") sp.last = v;
  });
  return sp;
}

ingest::InteractionLog rows_until(const ingest::InteractionLog& log, std::int64_t until) {
  ingest::InteractionLog out;
  for (const auto& r : log.rows)
    if (r.timestamp <= until) out.rows.push_back(r);
  return out;
}

std::shared_ptr<oracle::Backend> make_backend(Stage& s) {
  const auto& c = s.cfg();
  if (c.backend == "stub") {
    auto truth = synth::parse_truth(s.need_external(c.truth, "corpus.truth"), c.truth.string());
    return std::make_shared<oracle::StubBackend>(truth.stub_table());
  }
  if (c.backend == "http") {
    if (c.client.endpoint.empty()) throw UsageError("oracle.endpoint is required for the http backend");
    return std::make_shared<oracle::HttpBackend>(c.client.endpoint, c.client.api_key);
  }
  throw UsageError("unknown oracle.backend '" + c.backend + "' (expected stub or http)");
}

// ---------------------------------------------------------------------------
// Stages

void stage_synth(Stage& s) {
  auto spec = s.cfg().synth;
  spec.seed = sub_seed(s.cfg().require_seed(), "synth");
  const auto corpus = synth::generate_synthetic(spec);
  const fs::path dir = s.cfg().out_dir / "corpus";
  synth::write_corpus(corpus, dir);
  for (const char* f : {"items.tsv", "bills.tsv", "logs.csv", "dict.tsv", "truth.tsv"})
    s.count(std::string("hash.corpus/") + f, hash_of(read_file(dir / f)));
  std::ostringstream conf;
  conf << "# generated corpus\n"
       << "seed = " << s.cfg().require_seed() << '\n'
       << "out_dir = .\n"
       << "corpus.items = corpus/items.tsv\n"
       << "corpus.bills = corpus/bills.tsv\n"
       << "corpus.logs = corpus/logs.csv\n"
       << "corpus.dict = corpus/dict.tsv\n"
       << "corpus.truth = corpus/truth.tsv\n";
  s.write("pipeline.conf", conf.str());
  s.count("entities", corpus.dict.size());
  s.count("items", corpus.items.size());
  s.count("bills", corpus.bills.size());
  s.count("interactions", corpus.log.rows.size());
  s.count("planted_edges", corpus.truth.edges.size());
  s.count("head_event_share", format_double(synth::head_event_share(corpus)));
}

void stage_extract(Stage& s) {
  auto raw = load_raw(s);
  ingest::assign_item_entities(raw.items, raw.dict);
  ingest::extract_bill_entities(raw.bills, raw.dict);
  std::size_t skipped = 0;
  auto dict = ingest::attribute_popularity(raw.dict, raw.items, raw.log, &skipped);
  s.write(kEntities, ingest::format_dict(dict));
  std::ostringstream items, bills;
  std::size_t assigned = 0;
  for (const auto& it : raw.items) {
    items << it.id << '\t' << (it.entity ? *it.entity : "-") << '\n';
    assigned += it.entity.has_value();
  }
  std::size_t bill_hits = 0;
  for (const auto& b : raw.bills) {
    bills << b.user << '\t' << b.timestamp << '\t';
    for (std::size_t i = 0; i < b.entities.size(); ++i) bills << (i ? "|" : "") << b.entities[i];
    bills << '\n';
    bill_hits += b.entities.size();
  }
  s.write(kItemEntities, items.str());
  s.write(kBillEntities, bills.str());
  s.count("entities", dict.size());
  s.count("items", raw.items.size());
  s.count("items_assigned", assigned);
  s.count("items_unassigned", raw.items.size() - assigned);
  s.count("bills", raw.bills.size());
  s.count("bill_entity_mentions", bill_hits);
  s.count("interactions", raw.log.rows.size());
  s.count("interactions_on_unassigned", skipped);
}

void stage_pairs(Stage& s) {
  const auto dict = ingest::parse_dict(s.need(kEntities, "extract"), kEntities);
  const auto tiers = pairgen::tier_entities(pairgen::rank_entities(dict), s.cfg().thresholds);
  const auto pairs = pairgen::generate_pairs(tiers);
  const auto budget = pairgen::pair_budget_report(pairs, tiers);
  s.write(kPairs, pairgen::format_pairs(pairs));
  s.write(kBudget, pairgen::format_budget_report(budget));
  s.count("entities", tiers.size());
  s.count("extremely_popular", tiers.extremely_popular.size());
  s.count("popular", tiers.popular.size());
  s.count("unpopular", tiers.unpopular.size());
  s.count("pairs", pairs.size());
}

void stage_infer(Stage& s) {
  const auto dict = ingest::parse_dict(s.need(kEntities, "extract"), kEntities);
  const auto tagged = pairgen::parse_pairs(s.need(kPairs, "pairs"), kPairs);
  std::vector<pairgen::EntityPair> pairs;
  for (const auto& t : tagged) pairs.push_back(t.pair);
  auto name_of = [&](const EntityId& id) {
    const auto* e = dict.find(id);
    if (!e) throw DataError("pair names unknown entity '" + id + "'");
    return e->canonical_name;
  };
  std::int64_t issued_at = 0;
  if (s.cfg().issued_at) {
    issued_at = *s.cfg().issued_at;
  } else {
    auto log = ingest::parse_log(s.need_external(s.cfg().logs, "corpus.logs"), s.cfg().logs.string());
    for (const auto& r : log.rows) issued_at = std::max(issued_at, r.timestamp);
  }
  oracle::VerdictCache cache;
  if (fs::exists(s.out(kVerdictCache))) cache = oracle::VerdictCache::deserialize(read_file(s.out(kVerdictCache)));
  oracle::OracleClient client(make_backend(s), s.cfg().client);
  oracle::InferStats stats;
  const auto verdicts = oracle::infer_verdicts(client, oracle::default_template(), pairs, name_of,
                                               issued_at, s.cfg().oracle_batch, &cache, &stats);
  const auto store = oracle::format_verdicts(verdicts);
  s.write(kVerdicts, store.rows);
  s.write(kExplanations, store.explanations);
  write_file_atomic(s.out(kVerdictCache), cache.serialize());
  std::size_t yes = 0;
  for (const auto& v : verdicts) yes += v.verdict == oracle::Verdict::Yes;
  s.count("pairs", stats.pairs);
  s.count("verdicts_yes", yes);
  s.count("verdicts_no", verdicts.size() - yes);
}

void stage_graph(Stage& s) {
  const auto dict = ingest::parse_dict(s.need(kEntities, "extract"), kEntities);
  const auto rows = s.need(kVerdicts, "infer");
  const auto expl = s.need(kExplanations, "infer");
  const auto verdicts = oracle::parse_verdict_store(rows, expl);
  std::set<EntityId> nodes;
  for (const auto& e : dict.entries()) nodes.insert(e.id);
  const auto g = kgraph::upsert_edges(kgraph::ComplementaryGraph(nodes), verdicts);
  s.write(kGraph, kgraph::serialize(g));
  s.count("nodes", g.nodes().size());
  s.count("edges", g.edge_count());
}

void stage_update(Stage& s) {
  const auto& c = s.cfg();
  if (!c.update_date) throw UsageError("update needs update.date (YYYY-MM-DD)");
  auto graph = kgraph::deserialize(s.need(kGraph, "graph"));
  kgraph::RetirementTracker tracker(c.retire_after_days);
  if (fs::exists(s.out(kRetirement)))
    tracker = kgraph::RetirementTracker::deserialize(read_file(s.out(kRetirement)));
  std::set<EntityId> present = graph.nodes();
  if (!c.update_dict.empty()) {
    present.clear();
    const auto today = ingest::parse_dict(s.need_external(c.update_dict, "update.dict"), c.update_dict.string());
    for (const auto& e : today.entries()) present.insert(e.id);
  }
  const auto retired = tracker.observe(*c.update_date, graph.nodes(), present);
  std::size_t added = 0;
  for (const auto& e : present)
    if (!graph.has_node(e) && !retired.count(e)) {
      graph.add_node(e);
      ++added;
    }
  std::vector<oracle::OracleVerdict> daily;
  if (!c.update_verdicts.empty()) {
    const auto rows = s.need_external(c.update_verdicts, "update.verdicts");
    const auto expl = c.update_explanations.empty()
                          ? std::string()
                          : s.need_external(c.update_explanations, "update.explanations");
    daily = oracle::parse_verdict_store(rows, expl);
  }
  const auto next = kgraph::incremental_update(graph, daily, retired);
  s.write(kGraph, kgraph::serialize(next));
  s.write(kRetirement, tracker.serialize());
  s.count("nodes_added", added);
  s.count("nodes_retired", retired.size());
  s.count("verdicts", daily.size());
  s.count("nodes", next.nodes().size());
  s.count("edges", next.edge_count());
}

struct Trained {
  eei::Scorer scorer;
  kgraph::ComplementaryGraph graph;
};

void stage_train(Stage& s) {
  const auto& c = s.cfg();
  const auto ctx = load_context(s);
  const auto graph = kgraph::deserialize(s.need(kGraph, "graph"));
  const auto tsplit = time_split(ctx.log, c.holdout_fraction);
  const auto train_log = rows_until(ctx.log, tsplit.cutoff);
  std::vector<ingest::Bill> train_bills;
  for (const auto& b : ctx.bills)
    if (b.timestamp <= tsplit.cutoff) train_bills.push_back(b);
  const auto tri = eei::build_trigraph(train_log, ctx.items, train_bills, graph, c.window_days, tsplit.cutoff);
  const ingest::BillHistory history(ctx.bills);
  const auto seed = c.require_seed();
  const auto samples = eei::build_samples(tri, train_log, history, c.window_days,
                                          sub_seed(seed, "samples"), 4.0, tsplit.cutoff);
  auto hp = c.eei;
  hp.seed = sub_seed(seed, "train");
  auto model = eei::EeiModel::initialize(tri, hp);
  const auto result = eei::train(model, tri, samples);
  const auto table = eei::compute_entity_table(model, tri);
  s.write(kModel, eei::serialize_model(model, table, tri.entities()));
  s.write(kLossTrace, eei::format_loss_trace(result.loss_trace));

  const eei::Scorer scorer(model, table, tri.entities());
  std::map<ItemId, std::size_t> item_index;
  kgraph::ItemIndex by_entity;
  for (std::size_t i = 0; i < tri.num_items(); ++i) {
    item_index[tri.items()[i]] = i;
    by_entity[tri.entities()[tri.entity_of_item(i)]].push_back(tri.items()[i]);
  }
  auto raw = [&](const EntityId& e1, const ItemId& item) {
    return scorer.score(e1, tri.item_features(item_index.at(item)));
  };
  s.write(kWeightedGraph, kgraph::serialize(kgraph::apply_feedback_weights(graph, raw, by_entity)));
  std::ostringstream sp;
  sp << "cutoff " << tsplit.cutoff << "\nfirst " << tsplit.first << "\nlast " << tsplit.last << '\n';
  s.write(kSplit, sp.str());
  std::size_t pos = 0;
  for (const auto& x : samples) pos += x.label > 0.5;
  s.count("nodes", tri.num_nodes());
  s.count("samples", samples.size());
  s.count("positives", pos);
  s.count("epochs", hp.epochs);
  s.count("loss_initial", format_double(result.loss_trace.front()));
  s.count("loss_final", format_double(result.loss_trace.back()));
}

struct Query {
  UserId user;
  std::int64_t as_of = 0;
  std::vector<EntityId> trigger;  // entities of the bill at as_of
};

std::vector<Query> test_queries(const Context& ctx, const Split& tsplit) {
  std::vector<Query> out;
  std::set<std::pair<UserId, std::int64_t>> seen;
  for (const auto& b : ctx.bills) {
    if (b.timestamp <= tsplit.cutoff || b.entities.empty()) continue;
    if (!seen.insert({b.user, b.timestamp}).second) continue;
    out.push_back({b.user, b.timestamp, b.entities});
  }
  return out;
}

void stage_recall(Stage& s) {
  const auto& c = s.cfg();
  const auto ctx = load_context(s);
  const auto scorer = eei::deserialize_model(s.need(kModel, "train"));
  const auto graph = kgraph::deserialize(s.need(kGraph, "graph"));
  const auto tsplit = read_split(s);
  const serve::ItemCatalog catalog(scorer, ctx.items);
  const ingest::BillHistory history(ctx.bills);
  std::ostringstream os;
  os << "user_id,item_id,e1,e2,score,as_of\n";
  std::size_t rows = 0, empty = 0;
  const auto queries = test_queries(ctx, tsplit);
  for (const auto& q : queries) {
    const auto seq = history.sequence(q.user, c.recall_window_days, q.as_of);
    const auto cands = serve::complementary_recall(seq, graph, scorer, catalog, c.recall_k);
    empty += cands.empty();
    for (const auto& x : cands) {
      os << q.user << ',' << x.item << ',' << x.e1 << ',' << x.e2 << ',' << format_double(x.score)
         << ',' << q.as_of << '\n';
      ++rows;
    }
  }
  s.write(kRecall, os.str());
  const auto pop = serve::popularity_ranking(ctx.log, tsplit.cutoff);
  std::ostringstream ps;
  ps << "rank,item_id\n";
  for (std::size_t i = 0; i < std::min(pop.size(), c.recall_k); ++i) ps << i + 1 << ',' << pop[i] << '\n';
  s.write(kPopularity, ps.str());
  s.count("queries", queries.size());
  s.count("queries_without_candidates", empty);
  s.count("candidates", rows);
}

struct RecallList {
  Query query;
  std::vector<ItemId> items;
};

std::vector<RecallList> read_recall(const std::string& text, const std::vector<Query>& queries) {
  std::map<std::pair<UserId, std::int64_t>, std::vector<ItemId>> by_query;
  bool header = true;
  for_each_record(text, [&](std::size_t line, std::string_view t) {
    if (header) {
      header = false;
      return;
    }
    auto f = split(t, ',');
    if (f.size() != 6) throw ParseError(kRecall, line, "expected 6 fields");
    by_query[{f[0], parse_int(f[5], "as_of")}].push_back(f[1]);
  });
  std::vector<RecallList> out;
  for (const auto& q : queries) {
    auto it = by_query.find({q.user, q.as_of});
    out.push_back({q, it == by_query.end() ? std::vector<ItemId>{} : it->second});
  }
  return out;
}

std::vector<ItemId> read_popularity(const std::string& text) {
  std::vector<ItemId> out;
  bool header = true;
  for_each_record(text, [&](std::size_t line, std::string_view t) {
    if (header) {
      header = false;
      return;
    }
    auto f = split(t, ',');
    if (f.size() != 2) throw ParseError(kPopularity, line, "expected rank,item_id");
    out.push_back(f[1]);
  });
  return out;
}

void stage_rank(Stage& s) {
  const auto& c = s.cfg();
  const auto ctx = load_context(s);
  const auto scorer = eei::deserialize_model(s.need(kModel, "train"));
  const auto graph = kgraph::deserialize(s.need(kGraph, "graph"));
  const auto tsplit = read_split(s);
  const auto recall = read_recall(s.need(kRecall, "recall"), test_queries(ctx, tsplit));
  const serve::ItemCatalog catalog(scorer, ctx.items);
  const ingest::BillHistory history(ctx.bills);
  std::map<ItemId, const std::vector<double>*> base;
  for (const auto& it : ctx.items) base[it.id] = &it.features;

  auto enrich = [&](const UserId& user, const ItemId& item, std::int64_t ts) {
    const auto seq = history.sequence(user, c.window_days, ts);
    return serve::enrich_sample(*base.at(item), seq, item, graph, scorer, catalog);
  };
  std::vector<std::vector<double>> train_eei, train_base;
  std::vector<double> train_labels;
  std::vector<const ingest::Interaction*> test_rows;
  std::vector<serve::EnrichedSample> test_samples;
  for (const auto& r : ctx.log.rows) {
    auto e = enrich(r.user, r.item, r.timestamp);
    if (r.timestamp <= tsplit.cutoff) {
      train_eei.push_back(serve::ranker_features(e, serve::FeatureSet::WithEei));
      train_base.push_back(serve::ranker_features(e, serve::FeatureSet::Base));
      train_labels.push_back(r.clicked ? 1.0 : 0.0);
    } else {
      test_rows.push_back(&r);
      test_samples.push_back(std::move(e));
    }
  }
  auto rc = c.ranker;
  rc.seed = sub_seed(c.require_seed(), "rank");
  const auto with_eei = serve::FineRanker::fit(train_eei, train_labels, serve::FeatureSet::WithEei, rc);
  const auto baseline = serve::FineRanker::fit(train_base, train_labels, serve::FeatureSet::Base, rc);
  s.write(kRankerEei, with_eei.serialize());
  s.write(kRankerBase, baseline.serialize());

  std::ostringstream sc;
  sc << "user_id,item_id,timestamp,label,score_with_eei,score_base\n";
  for (std::size_t i = 0; i < test_rows.size(); ++i) {
    const auto& r = *test_rows[i];
    sc << r.user << ',' << r.item << ',' << r.timestamp << ',' << int(r.clicked) << ','
       << format_double(with_eei.predict(test_samples[i])) << ','
       << format_double(baseline.predict(test_samples[i])) << '\n';
  }
  s.write(kScores, sc.str());

  std::ostringstream rk;
  rk << "user_id,as_of,rank,item_id,score\n";
  for (const auto& l : recall) {
    std::vector<serve::EnrichedSample> feats;
    for (const auto& item : l.items) feats.push_back(enrich(l.query.user, item, l.query.as_of));
    const auto ranked = serve::fine_rank(l.items, feats, with_eei);
    for (std::size_t i = 0; i < ranked.items.size(); ++i)
      rk << l.query.user << ',' << l.query.as_of << ',' << i + 1 << ',' << ranked.items[i] << ','
         << format_double(ranked.scores[i]) << '\n';
  }
  s.write(kRanked, rk.str());
  s.count("train_rows", train_labels.size());
  s.count("test_rows", test_rows.size());
  s.count("with_eei_inputs", with_eei.input_dim());
  s.count("base_inputs", baseline.input_dim());
}

std::vector<RecallList> read_ranked(const std::string& text, const std::vector<Query>& queries) {
  std::map<std::pair<UserId, std::int64_t>, std::vector<ItemId>> by_query;
  bool header = true;
  for_each_record(text, [&](std::size_t line, std::string_view t) {
    if (header) {
      header = false;
      return;
    }
    auto f = split(t, ',');
    if (f.size() != 5) throw ParseError(kRanked, line, "expected 5 fields");
    by_query[{f[0], parse_int(f[1], "as_of")}].push_back(f[3]);
  });
  std::vector<RecallList> out;
  for (const auto& q : queries) {
    auto it = by_query.find({q.user, q.as_of});
    out.push_back({q, it == by_query.end() ? std::vector<ItemId>{} : it->second});
  }
  return out;
}

void stage_eval(Stage& s) {
  const auto& c = s.cfg();
  const auto ctx = load_context(s);
  const auto tsplit = read_split(s);
  const auto queries = test_queries(ctx, tsplit);
  const auto recall = read_recall(s.need(kRecall, "recall"), queries);
  const auto popularity = read_popularity(s.need(kPopularity, "recall"));
  const auto ranked = read_ranked(s.need(kRanked, "rank"), queries);
  const auto scores_text = s.need(kScores, "rank");
  const auto graph = kgraph::deserialize(s.need(kGraph, "graph"));

  EvalArtifacts art;
  // AUC of both ranker variants on held-out exposures.
  std::vector<double> labels, with_eei, base;
  bool header = true;
  for_each_record(scores_text, [&](std::size_t line, std::string_view t) {
    if (header) {
      header = false;
      return;
    }
    auto f = split(t, ',');
    if (f.size() != 6) throw ParseError(kScores, line, "expected 6 fields");
    labels.push_back(parse_double(f[3], "label"));
    with_eei.push_back(parse_double(f[4], "score"));
    base.push_back(parse_double(f[5], "score"));
  });
  std::size_t pos = 0;
  for (double l : labels) pos += l > 0.5;
  for (auto [name, v] : {std::pair{"with_eei", &with_eei}, std::pair{"base", &base}}) {
    AucRow row{name, std::nullopt, pos, labels.size() - pos};
    if (pos > 0 && pos < labels.size()) row.auc = serve::auc(*v, labels);
    art.auc.push_back(row);
  }

  // Hit rate: targets are the items clicked within the follow-up horizon.
  std::map<UserId, std::vector<const ingest::Interaction*>> clicks_by_user;
  for (const auto& r : ctx.log.rows)
    if (r.clicked && r.timestamp > tsplit.cutoff) clicks_by_user[r.user].push_back(&r);
  std::vector<std::set<ItemId>> targets;
  for (const auto& q : queries) {
    std::set<ItemId> t;
    for (const auto* r : clicks_by_user[q.user])
      if (r->timestamp > q.as_of && r->timestamp <= q.as_of + c.followup_seconds) t.insert(r->item);
    targets.push_back(std::move(t));
  }
  std::vector<std::vector<ItemId>> comp_lists, pop_lists(queries.size(), popularity);
  for (const auto& l : recall) comp_lists.push_back(l.items);
  const auto hc = serve::hit_rate(comp_lists, targets, c.recall_k);
  const auto hp = serve::hit_rate(pop_lists, targets, c.recall_k);
  art.hits.push_back({"complementary", c.recall_k, hc.queries, hc.hits});
  art.hits.push_back({"popularity", c.recall_k, hp.queries, hp.hits});

  // CVR matrix from a tagged arm log, or simulated from the ground truth.
  std::vector<serve::ArmExposure> exposures;
  if (!c.arm_log.empty()) {
    exposures = serve::parse_arm_exposures(s.need_external(c.arm_log, "eval.arm_log"), c.arm_log.string());
  } else if (!c.truth.empty() && fs::exists(c.truth)) {
    const auto truth = synth::parse_truth(s.need_external(c.truth, "corpus.truth"), c.truth.string());
    std::map<ItemId, EntityId> entity_of;
    for (const auto& it : ctx.items)
      if (it.entity) entity_of[it.id] = *it.entity;
    std::mt19937_64 rng(sub_seed(c.require_seed(), "arms"));
    auto show = [&](serve::Arm arm, const EntityId& trigger, const std::vector<ItemId>& list) {
      std::size_t shown = 0;
      for (const auto& item : list) {
        if (shown == c.arm_exposures) break;
        auto e = entity_of.find(item);
        if (e == entity_of.end()) continue;
        ++shown;
        const bool click = uniform01(rng) < truth.click_probability(trigger, e->second, item);
        const bool conv = click && uniform01(rng) < truth.conversion_rate;
        exposures.push_back({arm, trigger, e->second, conv});
      }
    };
    for (std::size_t q = 0; q < queries.size(); ++q) {
      const auto& trigger = queries[q].trigger.front();
      show(serve::Arm::Baseline, trigger, popularity);
      std::vector<ItemId> exp = ranked[q].items;
      exp.insert(exp.end(), popularity.begin(), popularity.end());
      show(serve::Arm::Experiment, trigger, exp);
    }
    s.write(kArmLog, serve::format_arm_exposures(exposures));
  }
  std::vector<pairgen::EntityPair> edges;
  for (const auto& [a, succ] : graph.adjacency())
    for (const auto& [b, _] : succ) edges.push_back({a, b});
  std::mt19937_64 prng(sub_seed(c.require_seed(), "cvr-universe"));
  const std::size_t n = std::min(c.cvr_pairs, edges.size());
  for (std::size_t i = 0; i < n; ++i)
    std::swap(edges[i], edges[i + uniform_below(prng, edges.size() - i)]);
  edges.resize(n);
  std::sort(edges.begin(), edges.end());
  if (!exposures.empty()) art.cvr = serve::cvr_matrix(exposures, edges);

  auto files = emit_reports(art);
  for (const char* f : {kAuc, kHitRate, kCvr}) s.write(f, files.at(f));
  s.count("test_exposures", labels.size());
  s.count("queries", queries.size());
  s.count("arm_exposures", exposures.size());
}

void stage_report(Stage& s) {
  const auto& c = s.cfg();
  EvalArtifacts art;
  art.auc = parse_auc_table(s.need(kAuc, "eval"));
  art.hits = parse_hit_table(s.need(kHitRate, "eval"));
  art.cvr = parse_cvr_matrix(s.need(kCvr, "eval"));
  if (!c.annotations.empty())
    art.annotations = oracle::parse_annotation_table(s.need_external(c.annotations, "report.annotations"),
                                                     c.annotations.string());
  for (const auto& stage : stage_names()) {
    const auto p = c.out_dir / (stage + ".report");
    if (stage == "report" || !fs::exists(p)) continue;
    for_each_record(read_file(p), [&](std::size_t, std::string_view t) {
      auto f = split(t, ' ');
      if (f.size() == 3 && f[0] == "output") art.stage_hashes.emplace_back(stage + "/" + f[1], f[2]);
    });
  }
  auto files = emit_reports(art);
  s.write(kLlmScores, files.at(kLlmScores));
  s.write(kReportTxt, files.at(kReportTxt));
  s.count("auc_rows", art.auc.size());
  s.count("cvr_cells", art.cvr.size());
  s.count("annotated_models", art.annotations.size());
}

}  // namespace

StageReport run_stage(const std::string& name, const PipelineConfig& config) {
  static const std::map<std::string, void (*)(Stage&)> table = {
      {"synth", stage_synth},   {"extract", stage_extract}, {"pairs", stage_pairs},
      {"infer", stage_infer},   {"graph", stage_graph},     {"update", stage_update},
      {"train", stage_train},   {"recall", stage_recall},   {"rank", stage_rank},
      {"eval", stage_eval},     {"report", stage_report}};
  auto it = table.find(name);
  if (it == table.end()) throw UsageError("unknown stage '" + name + "'");
  if (config.out_dir.empty()) throw UsageError("no output directory: set out_dir or pass --out-dir");
  config.require_seed();
  OutputLock lock(config.out_dir);
  Stage stage(name, config);
  it->second(stage);
  return stage.finish();
}

// ---------------------------------------------------------------------------
// Reports

namespace {

constexpr const char* kNoData = "# no data\n";

std::string fmt_ratio(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::map<std::string, std::string> emit_reports(const EvalArtifacts& a) {
  std::map<std::string, std::string> files;
  std::ostringstream auc, hits, llm, txt;

  auc << "variant,auc,positives,negatives\n";
  if (a.auc.empty()) auc << kNoData;
  for (const auto& r : a.auc)
    auc << r.variant << ',' << (r.auc ? format_double(*r.auc) : "absent") << ',' << r.positives << ','
        << r.negatives << '\n';

  hits << "route,k,queries,hits,hit_rate\n";
  if (a.hits.empty()) hits << kNoData;
  for (const auto& h : a.hits)
    hits << h.route << ',' << h.k << ',' << h.queries << ',' << h.hits << ','
         << format_double(h.queries ? double(h.hits) / double(h.queries) : 0.0) << '\n';

  std::string cvr = serve::format_cvr_matrix(a.cvr);
  if (a.cvr.empty()) cvr += kNoData;

  llm << "model,l1,l2,l3,l4,l5,total,mean\n";
  if (a.annotations.empty()) llm << kNoData;
  std::vector<std::pair<std::string, double>> means;
  for (const auto& m : a.annotations) {
    llm << m.model;
    for (auto v : m.counts.levels) llm << ',' << v;
    const double mean = oracle::mean_annotation_score(m.counts);
    means.emplace_back(m.model, mean);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", mean);
    llm << ',' << m.counts.total() << ',' << buf << '\n';
  }

  txt << "evaluation summary\n\n";
  txt << "ranker auc (held-out exposures)\n";
  if (a.auc.empty()) txt << "  no data\n";
  for (const auto& r : a.auc)
    txt << "  " << r.variant << ": " << (r.auc ? fmt_ratio(*r.auc) : "absent") << "  (" << r.positives
        << " pos / " << r.negatives << " neg)\n";
  txt << "\nrecall hit rate\n";
  if (a.hits.empty()) txt << "  no data\n";
  for (const auto& h : a.hits)
    txt << "  " << h.route << "@" << h.k << ": " << h.hits << "/" << h.queries << " = "
        << fmt_ratio(h.queries ? double(h.hits) / double(h.queries) : 0.0) << '\n';
  txt << "\ncvr delta matrix\n";
  if (a.cvr.empty()) {
    txt << "  no data\n";
  } else {
    std::size_t present = 0;
    double sum = 0.0;
    for (const auto& c : a.cvr)
      if (c.delta) {
        ++present;
        sum += *c.delta;
      }
    txt << "  cells: " << a.cvr.size() << ", present: " << present
        << ", absent: " << a.cvr.size() - present << '\n';
    if (present) txt << "  mean delta over present cells: " << fmt_ratio(sum / double(present)) << '\n';
  }
  txt << "\nllm annotation scores\n";
  if (means.empty()) txt << "  no data\n";
  for (const auto& [m, v] : means) txt << "  " << m << ": " << fmt_ratio(v) << '\n';
  txt << "\nstage outputs\n";
  if (a.stage_hashes.empty()) txt << "  no data\n";
  for (const auto& [f, h] : a.stage_hashes) txt << "  " << f << " " << h << '\n';

  files[kAuc] = auc.str();
  files[kHitRate] = hits.str();
  files[kCvr] = cvr;
  files[kLlmScores] = llm.str();
  files[kReportTxt] = txt.str();
  return files;
}

namespace {

template <typename Fn>
void data_rows(const std::string& content, const char* source, std::size_t fields, Fn&& fn) {
  bool header = true;
  for_each_record(content, [&](std::size_t line, std::string_view t) {
    if (header) {
      header = false;
      return;
    }
    auto f = split(t, ',');
    if (f.size() != fields)
      throw ParseError(source, line, "expected " + std::to_string(fields) + " fields");
    fn(f);
  });
}

}  // namespace

std::vector<AucRow> parse_auc_table(const std::string& content) {
  std::vector<AucRow> out;
  data_rows(content, kAuc, 4, [&](const std::vector<std::string>& f) {
    AucRow r{f[0], std::nullopt, std::size_t(parse_int(f[2], "positives")),
             std::size_t(parse_int(f[3], "negatives"))};
    if (f[1] != "absent") r.auc = parse_double(f[1], "auc");
    out.push_back(r);
  });
  return out;
}

std::vector<HitRow> parse_hit_table(const std::string& content) {
  std::vector<HitRow> out;
  data_rows(content, kHitRate, 5, [&](const std::vector<std::string>& f) {
    out.push_back({f[0], std::size_t(parse_int(f[1], "k")), std::size_t(parse_int(f[2], "queries")),
                   std::size_t(parse_int(f[3], "hits"))});
  });
  return out;
}

std::vector<serve::CvrCell> parse_cvr_matrix(const std::string& content) {
  std::vector<serve::CvrCell> out;
  data_rows(content, kCvr, 3, [&](const std::vector<std::string>& f) {
    serve::CvrCell c;
    c.e1 = f[0];
    c.e2 = f[1];
    if (f[2] != "absent") c.delta = parse_double(f[2], "delta");
    out.push_back(std::move(c));
  });
  return out;
}

}  // namespace compkg::pipeline
