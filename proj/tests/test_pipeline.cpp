#include <doctest.h>

#include <cstdlib>
#include <map>

#include "compkg/kgraph.hpp"
#include "compkg/pipeline.hpp"
#include "support.hpp"

using namespace compkg;
using namespace compkg::pipeline;
namespace fs = std::filesystem;

namespace {

const char* kSmallSynth =
    "synth.entities = 20\n"
    "synth.users = 60\n"
    "synth.items_per_entity = 5\n"
    "synth.unmatched_items = 2\n";

const char* kFastTraining =
    "eei.epochs = 2\n"
    "eei.dim = 8\n"
    "ranker.epochs = 2\n"
    "ranker.hidden = 8\n";

const std::vector<std::string> kMainStages = {"extract", "pairs", "infer", "graph", "train",
                                              "recall",  "rank",  "eval",  "report"};

PipelineConfig generated_config(const fs::path& dir, std::uint64_t seed) {
  auto c = parse_config(kSmallSynth, dir);
  c.seed = seed;
  run_stage("synth", c);
  auto p = parse_config(read_file(dir / "pipeline.conf") + kFastTraining, dir);
  return p;
}

// Every artifact in the directory keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

void run_all(const fs::path& dir, std::uint64_t seed) {
  const auto c = generated_config(dir, seed);
  for (const auto& s : kMainStages) run_stage(s, c);
}

}  // namespace

TEST_CASE("config parsing") {
  const auto c = parse_config(
      "# comment\n"
      "seed = 42\n"
      "corpus.items = data/items.tsv\n"
      "corpus.dict = /abs/dict.tsv\n"
      "oracle.backend = http\n"
      "oracle.backoff_ms = 250\n"
      "eei.sigma_inside = false\n"
      "eei.tau = 0.5\n"
      "update.date = 2024-03-02\n"
      "oracle.issued_at = 2024-03-02\n",
      "/base");
  CHECK(c.seed == 42u);
  CHECK(c.out_dir == fs::path("/base"));
  CHECK(c.items == fs::path("/base/data/items.tsv"));
  CHECK(c.dict == fs::path("/abs/dict.tsv"));
  CHECK(c.backend == "http");
  CHECK(c.client.base_backoff == std::chrono::milliseconds(250));
  CHECK_FALSE(c.eei.sigma_inside);
  CHECK(c.eei.tau == 0.5);
  REQUIRE(c.update_date);
  CHECK(*c.update_date == parse_day("2024-03-02"));
  REQUIRE(c.issued_at);
  CHECK(*c.issued_at == *c.update_date * kSecondsPerDay);

  for (const char* bad : {"nonsense\n", "no.such.key = 1\n", "seed = abc\n", "eei.epochs = -3\n",
                          "eei.sigma_inside = maybe\n", "update.date = 2024-13-40\n", "eei.tau = x\n"})
    CHECK_THROWS_AS(parse_config(bad, "/base"), UsageError);
  CHECK_THROWS_AS(PipelineConfig{}.require_seed(), UsageError);
}

TEST_CASE("config file and environment override") {
  testing::TempDir dir;
  write_file_atomic(dir / "a.conf", "oracle.api_key = from-file\ncorpus.logs = logs.csv\n");
  ::unsetenv("COMPKG_API_KEY");
  auto c = load_config(dir / "a.conf");
  CHECK(c.client.api_key == "from-file");
  CHECK(c.logs == dir / "logs.csv");
  CHECK(c.out_dir == dir.path());
  ::setenv("COMPKG_API_KEY", "from-env", 1);
  c = load_config(dir / "a.conf");
  CHECK(c.client.api_key == "from-env");
  ::unsetenv("COMPKG_API_KEY");
  CHECK_THROWS_AS(load_config(dir / "missing.conf"), UsageError);
}

TEST_CASE("output lock excludes a second run") {
  testing::TempDir dir;
  auto c = parse_config(kSmallSynth, dir.path());
  c.seed = 1;
  {
    OutputLock held(dir.path());
    CHECK_THROWS_AS(OutputLock(dir.path()), UsageError);
    CHECK_THROWS_AS(run_stage("synth", c), UsageError);
  }
  CHECK_FALSE(fs::exists(dir / ".lock"));
  CHECK_NOTHROW(run_stage("synth", c));
  CHECK_FALSE(fs::exists(dir / ".lock"));
}

TEST_CASE("stage dispatch errors") {
  testing::TempDir dir;
  PipelineConfig c;
  c.out_dir = dir.path();
  c.seed = 3;
  CHECK_THROWS_AS(run_stage("bogus", c), UsageError);
  auto noseed = c;
  noseed.seed.reset();
  CHECK_THROWS_AS(run_stage("synth", noseed), UsageError);
  auto nodir = c;
  nodir.out_dir.clear();
  CHECK_THROWS_AS(run_stage("synth", nodir), UsageError);
  CHECK_THROWS_AS(run_stage("extract", c), UsageError);  // corpus paths unset

  const auto g = generated_config(dir.path(), 3);
  const std::vector<std::pair<std::string, std::string>> order = {
      {"pairs", "extract"}, {"infer", "pairs"}, {"graph", "infer"}, {"train", "graph"},
      {"recall", "train"},  {"rank", "recall"}, {"eval", "rank"},   {"report", "eval"}};
  for (const auto& [stage, first] : order) {
    try {
      run_stage(stage, g);
      FAIL("expected a missing prerequisite");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("'" + first + "'") != std::string::npos);
    }
    run_stage(first, g);
  }
  CHECK_NOTHROW(run_stage("report", g));
}

TEST_CASE("stage reports hash what was written") {
  testing::TempDir dir;
  const auto c = generated_config(dir.path(), 5);
  const auto r = run_stage("extract", c);
  CHECK(r.stage == "extract");
  CHECK_FALSE(r.outputs.empty());
  for (const auto& [file, hash] : r.outputs) CHECK(hash == hex64(fnv1a64(read_file(dir / file))));
  CHECK(read_file(dir / "extract.report") == r.format());
  const auto again = run_stage("pairs", c);
  bool saw = false;
  for (const auto& [file, hash] : again.inputs)
    for (const auto& [f2, h2] : r.outputs)
      if (file == f2) {
        saw = true;
        CHECK(hash == h2);
      }
  CHECK(saw);
}

TEST_CASE("full run is reproducible and deterministic per seed") {
  testing::TempDir a, b, c;
  run_all(a.path(), 11);
  run_all(b.path(), 11);
  run_all(c.path(), 12);
  const auto sa = snapshot(a.path()), sb = snapshot(b.path()), sc = snapshot(c.path());
  CHECK(sa == sb);
  CHECK(sa.at("report.txt") != sc.at("report.txt"));

  const auto auc = parse_auc_table(sa.at("auc.csv"));
  REQUIRE(auc.size() == 2);
  for (const auto& r : auc) {
    REQUIRE(r.auc);
    CHECK(*r.auc >= 0.0);
    CHECK(*r.auc <= 1.0);
  }
  const auto hits = parse_hit_table(sa.at("hit_rate.csv"));
  REQUIRE(hits.size() == 2);
  for (const auto& h : hits) CHECK(h.hits <= h.queries);
  CHECK(sa.at("llm_scores.csv").find("# no data") != std::string::npos);
  CHECK(sa.at("report.txt").find("stage outputs") != std::string::npos);
}

TEST_CASE("daily update folds in verdicts and retires absent entities") {
  testing::TempDir dir;
  auto c = generated_config(dir.path(), 7);
  for (const auto& s : {"extract", "pairs", "infer", "graph"}) run_stage(s, c);
  const auto before = kgraph::load(dir / "graph.kg");
  const auto nodes = std::vector<EntityId>(before.nodes().begin(), before.nodes().end());
  REQUIRE(nodes.size() >= 3);
  REQUIRE(before.latest_date());
  const Day day = *before.latest_date() + 1;

  // A verdict adding a fresh edge between two entities that lack one.
  std::optional<std::pair<EntityId, EntityId>> fresh;
  for (const auto& a : nodes)
    for (const auto& b : nodes)
      if (!fresh && a != b && !before.edge(a, b)) fresh = {a, b};
  REQUIRE(fresh);
  const std::vector<oracle::OracleVerdict> verdicts = {
      {{fresh->first, fresh->second}, oracle::Verdict::Yes, "they pair", "m", day * kSecondsPerDay + 5}};
  const auto store = oracle::format_verdicts(verdicts);
  write_file_atomic(dir / "day.csv", store.rows);
  write_file_atomic(dir / "day.tsv", store.explanations);
  c.update_verdicts = dir / "day.csv";
  c.update_explanations = dir / "day.tsv";
  c.update_date = day;
  c.retire_after_days = 1;
  run_stage("update", c);
  const auto after = kgraph::load(dir / "graph.kg");
  CHECK(after.edge(fresh->first, fresh->second));
  CHECK(after.edge_count() == before.edge_count() + 1);

  // A dictionary missing one entity retires it after the configured streak.
  const auto gone = fresh->first;
  std::string dict;
  for_each_record(read_file(c.dict), [&](std::size_t, std::string_view line) {
    if (!line.starts_with(gone + "\t")) dict += std::string(line) + "\n";
  });
  REQUIRE(ingest::parse_dict(dict).size() + 1 == ingest::parse_dict(read_file(c.dict)).size());
  write_file_atomic(dir / "today_dict.tsv", dict);
  c.update_verdicts.clear();
  c.update_explanations.clear();
  c.update_dict = dir / "today_dict.tsv";
  c.update_date = day + 1;
  run_stage("update", c);
  const auto retired = kgraph::load(dir / "graph.kg");
  CHECK_FALSE(retired.has_node(gone));
  for (const auto& [a, succ] : retired.adjacency())
    for (const auto& [b, _] : succ) {
      CHECK(a != gone);
      CHECK(b != gone);
    }
  c.update_date.reset();
  CHECK_THROWS_AS(run_stage("update", c), UsageError);
}

TEST_CASE("reports mark empty sections") {
  const auto files = emit_reports({});
  for (const char* f : {"auc.csv", "hit_rate.csv", "cvr_matrix.csv", "llm_scores.csv"})
    CHECK(files.at(f).find("# no data") != std::string::npos);
  CHECK(parse_auc_table(files.at("auc.csv")).empty());
  CHECK(parse_hit_table(files.at("hit_rate.csv")).empty());
  CHECK(parse_cvr_matrix(files.at("cvr_matrix.csv")).empty());
}

TEST_CASE("report tables round-trip") {
  EvalArtifacts a;
  a.auc = {{"with_eei", 0.625, 3, 5}, {"base", std::nullopt, 0, 8}};
  a.hits = {{"complementary", 50, 10, 7}, {"popularity", 50, 10, 2}};
  serve::CvrCell present, absent;
  present.e1 = "A";
  present.e2 = "B";
  present.delta = -0.125;
  absent.e1 = "A";
  absent.e2 = "C";
  a.cvr = {present, absent};
  const auto files = emit_reports(a);
  const auto auc = parse_auc_table(files.at("auc.csv"));
  REQUIRE(auc.size() == 2);
  CHECK(auc[0].variant == "with_eei");
  CHECK(auc[0].auc == 0.625);
  CHECK(auc[0].positives == 3);
  CHECK_FALSE(auc[1].auc.has_value());
  const auto hits = parse_hit_table(files.at("hit_rate.csv"));
  REQUIRE(hits.size() == 2);
  CHECK(hits[1].route == "popularity");
  CHECK(hits[1].hits == 2);
  const auto cvr = parse_cvr_matrix(files.at("cvr_matrix.csv"));
  REQUIRE(cvr.size() == 2);
  CHECK(cvr[0].delta == -0.125);
  CHECK_FALSE(cvr[1].delta.has_value());
  CHECK(files.at("report.txt").find("complementary@50: 7/10 = 0.7000") != std::string::npos);
}

TEST_CASE("annotation fixture yields the expected model means") {
  testing::TempDir dir;
  for (const auto& [f, content] : emit_reports({}))
    if (f != "report.txt" && f != "llm_scores.csv") write_file_atomic(dir / f, content);
  PipelineConfig c;
  c.out_dir = dir.path();
  c.seed = 1;
  c.annotations = fs::path(COMPKG_FIXTURES) / "annotations.csv";
  run_stage("report", c);
  const auto scores = read_file(dir / "llm_scores.csv");
  CHECK(scores.find("chatglm2,191,40,145,242,382,1000,3.584") != std::string::npos);
  CHECK(scores.find("chatgpt35,171,26,145,263,395,1000,3.685") != std::string::npos);
  CHECK(scores.find("claude2,109,36,127,146,582,1000,4.056") != std::string::npos);
}
