#include "compkg/oracle.hpp"

#include <algorithm>
#include <exception>
#include <sstream>
#include <thread>

namespace compkg::oracle {

char verdict_char(Verdict v) { return v == Verdict::Yes ? 'Y' : 'N'; }

Verdict parse_verdict_char(std::string_view s) {
  s = trim(s);
  if (s == "Y") return Verdict::Yes;
  if (s == "N") return Verdict::No;
  throw DataError("verdict must be Y or N, got '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Prompt

void PromptTemplate::validate() const {
  if (trim(input_format).empty()) throw DataError("prompt template: empty input-format section");
  if (trim(task).empty()) throw DataError("prompt template: empty task section");
  if (trim(output_format).empty()) throw DataError("prompt template: empty output-format section");
  bool has_y = false, has_n = false;
  for (const auto& ex : examples) {
    if (trim(ex.first).empty() || trim(ex.second).empty() || trim(ex.reason).empty())
      throw DataError("prompt template: incomplete few-shot example");
    (ex.verdict == Verdict::Yes ? has_y : has_n) = true;
  }
  if (!has_y || !has_n)
    throw DataError("prompt template: few-shot examples need at least one Y and one N");
}

std::uint64_t PromptTemplate::hash() const {
  std::uint64_t h = fnv1a64(input_format);
  h = fnv1a64("\x1f" + task, h);
  for (const auto& ex : examples)
    h = fnv1a64("\x1e" + ex.first + "\x1f" + ex.second + "\x1f" + verdict_char(ex.verdict) +
                    "\x1f" + ex.reason,
                h);
  return fnv1a64("\x1f" + output_format, h);
}

PromptTemplate default_template() {
  PromptTemplate t;
  t.input_format =
      "Each input line holds two entities written as \"A -> B\". Every entity names a "
      "real-world concept such as a product category.";
  t.task =
      "For each line, decide whether a person who has just purchased entity A is likely to "
      "purchase entity B shortly afterwards.";
  t.examples = {
      {"bread", "milk", Verdict::Yes,
       "There is a complementary relationship between bread and milk, as they form a popular "
       "breakfast combination."},
      {"phone", "milk", Verdict::No,
       "There is no complementary relationship between a phone and milk, as they are "
       "unrelated."},
  };
  t.output_format =
      "Write one answer block per input line, separated by a blank line. Start the block with "
      "the line number and the pair. Briefly describe the purposes of both entities, state "
      "whether a complementary relationship exists between them, and explain why in detail. "
      "End the block with a line \"Answer: Y\" or \"Answer: N\".";
  return t;
}

namespace {

void check_name(const std::string& name) {
  if (trim(name).empty() || name.find('\n') != std::string::npos ||
      name.find("->") != std::string::npos)
    throw DataError("entity name '" + name + "' cannot be placed on a prompt line");
}

}  // namespace

std::string build_prompt(const PromptTemplate& tmpl, std::span<const NamedPair> batch,
                         std::size_t max_batch) {
  tmpl.validate();
  if (batch.empty()) throw UsageError("build_prompt: empty batch");
  if (batch.size() > max_batch)
    throw UsageError("build_prompt: batch of " + std::to_string(batch.size()) +
                     " exceeds limit " + std::to_string(max_batch));
  std::ostringstream os;
  os << "## Input format\n" << tmpl.input_format << "\n\n";
  os << "## Task\n" << tmpl.task << "\n\n";
  os << "## Examples\n";
  for (const auto& ex : tmpl.examples)
    os << ex.first << " -> " << ex.second << ": " << verdict_char(ex.verdict) << ". " << ex.reason
       << '\n';
  os << "\n## Output format\n" << tmpl.output_format << "\n\n";
  os << "## Input\n";
  for (std::size_t i = 0; i < batch.size(); ++i) {
    check_name(batch[i].first);
    check_name(batch[i].second);
    os << (i + 1) << ". " << batch[i].first << " -> " << batch[i].second << '\n';
  }
  return os.str();
}

std::vector<NamedPair> prompt_pairs(const std::string& prompt) {
  std::vector<NamedPair> out;
  const auto at = prompt.rfind("## Input\n");
  if (at == std::string::npos) return out;
  for (const auto& raw : split(std::string_view(prompt).substr(at + 9), '\n')) {
    auto line = trim(raw);
    auto dot = line.find(". ");
    auto arrow = line.find(" -> ");
    if (dot == std::string_view::npos || arrow == std::string_view::npos || arrow < dot) continue;
    out.push_back({std::string(trim(line.substr(dot + 2, arrow - dot - 2))),
                   std::string(trim(line.substr(arrow + 4)))});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

struct Token {
  char value;
  std::size_t offset;
};

// Standalone uppercase Y / N tokens of one line.
std::vector<Token> verdict_tokens(std::string_view line, std::size_t base) {
  std::vector<Token> out;
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (std::size_t i = 0; i < line.size(); ++i) {
    if ((line[i] == 'Y' || line[i] == 'N') && (i == 0 || !is_word(line[i - 1])) &&
        (i + 1 == line.size() || !is_word(line[i + 1])))
      out.push_back({line[i], base + i});
  }
  return out;
}

std::vector<std::string> split_blocks(const std::string& raw) {
  std::vector<std::string> blocks;
  std::string cur;
  for (const auto& line : split(raw, '\n')) {
    if (trim(line).empty()) {
      if (!trim(cur).empty()) blocks.push_back(cur);
      cur.clear();
    } else {
      cur += line;
      cur += '\n';
    }
  }
  if (!trim(cur).empty()) blocks.push_back(cur);
  return blocks;
}

Answer parse_block(const std::string& block) {
  std::optional<std::vector<Token>> last_line_tokens;
  std::size_t base = 0;
  for (const auto& line : split(block, '\n')) {
    auto toks = verdict_tokens(line, base);
    if (!toks.empty()) last_line_tokens = std::move(toks);
    base += line.size() + 1;
  }
  if (!last_line_tokens) throw MalformedVerdict(block, "no Y/N token");
  const auto& toks = *last_line_tokens;
  const bool mixed = std::any_of(toks.begin(), toks.end(),
                                 [&](const Token& t) { return t.value != toks.front().value; });
  if (mixed) throw MalformedVerdict(block, "final answer line holds both Y and N");
  const Token final_token = toks.back();
  Answer a;
  a.verdict = final_token.value == 'Y' ? Verdict::Yes : Verdict::No;
  std::string expl = block.substr(0, final_token.offset) + block.substr(final_token.offset + 1);
  a.explanation = std::string(trim(expl));
  if (a.verdict == Verdict::Yes && a.explanation.empty())
    throw MalformedVerdict(block, "Y verdict without explanation");
  return a;
}

}  // namespace

std::vector<Answer> parse_answers(const std::string& raw, std::size_t expected) {
  if (expected == 0) throw UsageError("parse_answers: no expected pairs");
  const auto blocks = split_blocks(raw);
  if (blocks.size() != expected)
    throw DataError("response has " + std::to_string(blocks.size()) + " answer blocks, expected " +
                    std::to_string(expected));
  std::vector<Answer> out;
  out.reserve(blocks.size());
  for (const auto& b : blocks) out.push_back(parse_block(b));
  return out;
}

std::vector<OracleVerdict> parse_verdicts(const std::string& raw,
                                          std::span<const pairgen::EntityPair> expected_pairs,
                                          const std::string& model_id, std::int64_t issued_at) {
  auto answers = parse_answers(raw, expected_pairs.size());
  std::vector<OracleVerdict> out;
  out.reserve(answers.size());
  for (std::size_t i = 0; i < answers.size(); ++i)
    out.push_back(OracleVerdict{expected_pairs[i], answers[i].verdict,
                                std::move(answers[i].explanation), model_id, issued_at});
  return out;
}

std::string format_answer_block(std::size_t index, const NamedPair& pair, Verdict v,
                                const std::string& explanation) {
  std::ostringstream os;
  os << index << ". " << pair.first << " -> " << pair.second << '\n';
  os << "Purposes: " << pair.first << " and " << pair.second << " serve everyday needs.\n";
  os << "Complementary: " << (v == Verdict::Yes ? "yes" : "no") << ". " << explanation << '\n';
  os << "Answer: " << verdict_char(v) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Stub backend

StubBackend::StubBackend(Table yes_pairs) : table_(std::move(yes_pairs)) {}

void StubBackend::fail_next(std::size_t n, std::function<void()> thrower) {
  std::lock_guard lock(mu_);
  pending_failures_ = n;
  thrower_ = std::move(thrower);
}

void StubBackend::set_raw_override(
    std::function<std::optional<std::string>(const std::string&)> fn) {
  std::lock_guard lock(mu_);
  raw_override_ = std::move(fn);
}

void StubBackend::corrupt_pair(const NamedPair& pair) {
  std::lock_guard lock(mu_);
  corrupted_.emplace_back(pair.first, pair.second);
}

std::string StubBackend::complete(const std::string& /*model_id*/, const std::string& prompt,
                                  std::chrono::milliseconds /*timeout*/) {
  ++calls_;
  std::function<void()> thrower;
  std::function<std::optional<std::string>(const std::string&)> override_fn;
  std::vector<std::pair<std::string, std::string>> corrupted;
  {
    std::lock_guard lock(mu_);
    if (pending_failures_ > 0) {
      --pending_failures_;
      thrower = thrower_;
    }
    override_fn = raw_override_;
    corrupted = corrupted_;
  }
  if (thrower) thrower();
  if (override_fn)
    if (auto raw = override_fn(prompt)) return *raw;

  std::ostringstream os;
  const auto pairs = prompt_pairs(prompt);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto key = std::make_pair(pairs[i].first, pairs[i].second);
    if (i) os << '\n';
    if (std::find(corrupted.begin(), corrupted.end(), key) != corrupted.end()) {
      os << (i + 1) << ". " << pairs[i].first << " -> " << pairs[i].second
         << "\nI cannot decide this one.\n";
      continue;
    }
    auto it = table_.find(key);
    if (it != table_.end())
      os << format_answer_block(i + 1, pairs[i], Verdict::Yes, it->second);
    else
      os << format_answer_block(i + 1, pairs[i], Verdict::No,
                                "No purchase of " + pairs[i].second + " typically follows " +
                                    pairs[i].first + ".");
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Client

OracleClient::OracleClient(std::shared_ptr<Backend> backend, ClientConfig config, Sleeper sleeper)
    : backend_(std::move(backend)), config_(std::move(config)), sleeper_(std::move(sleeper)) {
  if (!backend_) throw UsageError("oracle client needs a backend");
  if (config_.max_retries < 0 || config_.max_in_flight < 1 || config_.timeout_seconds <= 0)
    throw UsageError("oracle client: invalid retry/in-flight/timeout settings");
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::string OracleClient::query(const std::string& prompt) {
  const std::string key = config_.model_id + '\x1f' + prompt;
  {
    std::shared_lock lock(cache_mu_);
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      ++cache_hits_;
      return it->second;
    }
  }
  const auto timeout = std::chrono::milliseconds(
      static_cast<std::int64_t>(config_.timeout_seconds * 1000.0));
  for (int attempt = 0;; ++attempt) {
    try {
      ++attempts_;
      std::string raw = backend_->complete(config_.model_id, prompt, timeout);
      std::unique_lock lock(cache_mu_);
      cache_.emplace(key, raw);
      return raw;
    } catch (const BackendError&) {
      if (attempt >= config_.max_retries) throw;
      sleeper_(config_.base_backoff * (1LL << std::min(attempt, 20)));
    }
  }
}

std::string query_backend(OracleClient& client, const std::string& prompt) {
  return client.query(prompt);
}

// ---------------------------------------------------------------------------
// Verdict cache

std::string VerdictCache::key(const std::string& model_id, std::uint64_t template_hash,
                              const pairgen::EntityPair& pair) {
  return model_id + '\t' + hex64(template_hash) + '\t' + pair.first + '\t' + pair.second;
}

std::optional<VerdictCache::Entry> VerdictCache::get(const std::string& model_id,
                                                     std::uint64_t template_hash,
                                                     const pairgen::EntityPair& pair) const {
  std::shared_lock lock(mu_);
  auto it = entries_.find(key(model_id, template_hash, pair));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void VerdictCache::put(const std::string& model_id, std::uint64_t template_hash,
                       const pairgen::EntityPair& pair, Entry entry) {
  std::unique_lock lock(mu_);
  entries_[key(model_id, template_hash, pair)] = std::move(entry);
}

std::size_t VerdictCache::size() const {
  std::shared_lock lock(mu_);
  return entries_.size();
}

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out += s[i];
      continue;
    }
    switch (s[++i]) {
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      default: out += s[i];
    }
  }
  return out;
}

}  // namespace

std::string VerdictCache::serialize() const {
  std::shared_lock lock(mu_);
  std::ostringstream os;
  for (const auto& [k, e] : entries_)
    os << k << '\t' << verdict_char(e.verdict) << '\t' << escape(e.explanation) << '\n';
  return os.str();
}

VerdictCache VerdictCache::deserialize(const std::string& content) {
  VerdictCache c;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, '\t');
    if (f.size() != 6) throw ParseError("verdict cache", line, "expected 6 fields");
    c.entries_[f[0] + '\t' + f[1] + '\t' + f[2] + '\t' + f[3]] =
        Entry{parse_verdict_char(f[4]), unescape(f[5])};
  });
  return c;
}

// ---------------------------------------------------------------------------
// Inference

std::vector<OracleVerdict> infer_verdicts(OracleClient& client, const PromptTemplate& tmpl,
                                          std::span<const pairgen::EntityPair> pairs,
                                          const std::function<std::string(const EntityId&)>& name_of,
                                          std::int64_t issued_at, std::size_t batch_size,
                                          VerdictCache* cache, InferStats* stats) {
  tmpl.validate();
  if (batch_size == 0) throw UsageError("batch size must be positive");
  const auto& model_id = client.config().model_id;
  const auto tmpl_hash = tmpl.hash();

  std::vector<std::optional<Answer>> answers(pairs.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (cache)
      if (auto hit = cache->get(model_id, tmpl_hash, pairs[i])) {
        answers[i] = Answer{hit->verdict, hit->explanation};
        continue;
      }
    todo.push_back(i);
  }

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < todo.size(); s += batch_size)
    batches.emplace_back(todo.begin() + std::ptrdiff_t(s),
                         todo.begin() + std::ptrdiff_t(std::min(todo.size(), s + batch_size)));

  std::atomic<std::size_t> prompts{0}, bisections{0};
  std::function<std::vector<Answer>(std::span<const std::size_t>)> judge =
      [&](std::span<const std::size_t> idx) -> std::vector<Answer> {
    std::vector<NamedPair> named;
    for (auto i : idx) named.push_back({name_of(pairs[i].first), name_of(pairs[i].second)});
    ++prompts;
    const auto raw = client.query(build_prompt(tmpl, named, batch_size));
    try {
      return parse_answers(raw, idx.size());
    } catch (const DataError&) {
      if (idx.size() == 1) throw;
      ++bisections;
      const auto mid = idx.size() / 2;
      auto left = judge(idx.subspan(0, mid));
      auto right = judge(idx.subspan(mid));
      left.insert(left.end(), std::make_move_iterator(right.begin()),
                  std::make_move_iterator(right.end()));
      return left;
    }
  };

  std::vector<std::exception_ptr> errors(batches.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t b; (b = next++) < batches.size();) {
      try {
        auto got = judge(batches[b]);
        for (std::size_t k = 0; k < got.size(); ++k) answers[batches[b][k]] = std::move(got[k]);
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
  };
  const std::size_t threads =
      std::min<std::size_t>(std::size_t(client.config().max_in_flight), batches.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  // lowest failing batch wins so the surfaced error does not depend on timing
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<OracleVerdict> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto& a = *answers[i];
    if (cache) cache->put(model_id, tmpl_hash, pairs[i], {a.verdict, a.explanation});
    out.push_back(OracleVerdict{pairs[i], a.verdict, a.explanation, model_id, issued_at});
  }
  if (stats) {
    stats->pairs = pairs.size();
    stats->cached = pairs.size() - todo.size();
    stats->prompts = prompts.load();
    stats->bisections = bisections.load();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Verdict store

std::string explanation_ref(const std::string& explanation) {
  return hex64(fnv1a64(explanation));
}

VerdictStore format_verdicts(std::span<const OracleVerdict> verdicts) {
  std::ostringstream rows, expl;
  std::map<std::string, const std::string*> refs;
  for (const auto& v : verdicts) {
    const auto ref = explanation_ref(v.explanation);
    refs.emplace(ref, &v.explanation);
    rows << v.pair.first << ',' << v.pair.second << ',' << verdict_char(v.verdict) << ','
         << v.model_id << ',' << v.issued_at << ',' << ref << '\n';
  }
  for (const auto& [ref, text] : refs) expl << ref << '\t' << escape(*text) << '\n';
  return {rows.str(), expl.str()};
}

std::vector<OracleVerdict> parse_verdict_store(const std::string& rows,
                                               const std::string& explanations) {
  std::unordered_map<std::string, std::string> texts;
  for_each_record(explanations, [&](std::size_t line, std::string_view text) {
    auto tab = text.find('\t');
    if (tab == std::string_view::npos) throw ParseError("explanations", line, "missing tab");
    texts[std::string(text.substr(0, tab))] = unescape(text.substr(tab + 1));
  });
  std::vector<OracleVerdict> out;
  for_each_record(rows, [&](std::size_t line, std::string_view text) {
    auto f = split(text, ',');
    if (f.size() != 6) throw ParseError("verdicts", line, "expected 6 fields");
    OracleVerdict v;
    v.pair = {std::string(trim(f[0])), std::string(trim(f[1]))};
    try {
      v.verdict = parse_verdict_char(f[2]);
      v.issued_at = parse_int(f[4], "issued_at");
    } catch (const DataError& e) {
      throw ParseError("verdicts", line, e.what());
    }
    v.model_id = std::string(trim(f[3]));
    auto it = texts.find(std::string(trim(f[5])));
    if (it == texts.end()) throw ParseError("verdicts", line, "unknown explanation ref");
    v.explanation = it->second;
    out.push_back(std::move(v));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Annotation

std::vector<OracleVerdict> sample_for_annotation(std::span<const OracleVerdict> verdicts,
                                                 std::size_t n, std::uint64_t seed) {
  if (n > verdicts.size())
    throw UsageError("sample of " + std::to_string(n) + " requested from " +
                     std::to_string(verdicts.size()) + " verdicts");
  std::vector<std::size_t> idx(verdicts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + uniform_below(rng, idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  std::vector<OracleVerdict> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(verdicts[idx[i]]);
  return out;
}

std::int64_t AnnotationCounts::total() const {
  std::int64_t t = 0;
  for (auto c : levels) t += c;
  return t;
}

double mean_annotation_score(const AnnotationCounts& counts) {
  std::int64_t weighted = 0;
  for (std::size_t k = 0; k < counts.levels.size(); ++k) {
    if (counts.levels[k] < 0) throw DataError("negative annotation count");
    weighted += std::int64_t(k + 1) * counts.levels[k];
  }
  const auto total = counts.total();
  if (total == 0) throw DataError("mean annotation score of an empty annotation set");
  return double(weighted) / double(total);
}

std::vector<ModelAnnotation> parse_annotation_table(const std::string& content,
                                                    const std::string& source) {
  std::vector<ModelAnnotation> out;
  for_each_record(content, [&](std::size_t line, std::string_view text) {
    auto f = split(text, ',');
    if (f.size() != 6) throw ParseError(source, line, "expected model,l1,l2,l3,l4,l5");
    if (trim(f[0]) == "model") return;  // header row
    ModelAnnotation m;
    m.model = std::string(trim(f[0]));
    try {
      for (std::size_t k = 0; k < 5; ++k) m.counts.levels[k] = parse_int(f[k + 1], "count");
    } catch (const DataError& e) {
      throw ParseError(source, line, e.what());
    }
    out.push_back(std::move(m));
  });
  return out;
}

}  // namespace compkg::oracle
