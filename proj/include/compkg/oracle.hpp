#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "compkg/common.hpp"
#include "compkg/pairgen.hpp"

namespace compkg::oracle {

enum class Verdict { Yes, No };
char verdict_char(Verdict v);
Verdict parse_verdict_char(std::string_view s);

struct FewShotExample {
  std::string first;
  std::string second;
  Verdict verdict;
  std::string reason;
};

struct PromptTemplate {
  std::string input_format;
  std::string task;
  std::vector<FewShotExample> examples;
  std::string output_format;

  /// Throws DataError on an empty section or missing Y/N exemplar.
  void validate() const;
  std::uint64_t hash() const;
};

PromptTemplate default_template();

/// Display names of an ordered pair as they appear in the prompt.
struct NamedPair {
  std::string first;
  std::string second;
};

constexpr std::size_t kDefaultBatchSize = 20;

/// Sections in order, then a numbered "A -> B" line per pair.
std::string build_prompt(const PromptTemplate& tmpl, std::span<const NamedPair> batch,
                         std::size_t max_batch = kDefaultBatchSize);

/// Pair lines recovered from the input section of a prompt built above.
std::vector<NamedPair> prompt_pairs(const std::string& prompt);

struct OracleVerdict {
  pairgen::EntityPair pair;
  Verdict verdict = Verdict::No;
  std::string explanation;
  std::string model_id;
  std::int64_t issued_at = 0;
  bool operator==(const OracleVerdict&) const = default;
};

/// An answer block without a usable final Y/N token.
class MalformedVerdict : public DataError {
 public:
  MalformedVerdict(std::string block, const std::string& why)
      : DataError("malformed verdict (" + why + "): " + block), block_(std::move(block)) {}
  const std::string& block() const { return block_; }

 private:
  std::string block_;
};

struct Answer {
  Verdict verdict;
  std::string explanation;
};

/// Splits `raw` into blank-line separated blocks; the last Y/N token of each
/// block decides it. Throws MalformedVerdict or DataError (count mismatch).
std::vector<Answer> parse_answers(const std::string& raw, std::size_t expected);

std::vector<OracleVerdict> parse_verdicts(const std::string& raw,
                                          std::span<const pairgen::EntityPair> expected_pairs,
                                          const std::string& model_id, std::int64_t issued_at);

/// Renders one answer block in the layout the output-format section asks for.
std::string format_answer_block(std::size_t index, const NamedPair& pair, Verdict v,
                                const std::string& explanation);

// ---------------------------------------------------------------------------
// Backends

class TimeoutError : public BackendError {
 public:
  using BackendError::BackendError;
};
class TransportError : public BackendError {
 public:
  using BackendError::BackendError;
};
class RateLimitError : public BackendError {
 public:
  using BackendError::BackendError;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string complete(const std::string& model_id, const std::string& prompt,
                               std::chrono::milliseconds timeout) = 0;
};

/// Deterministic backend answering from an ordered truth table of display
/// names. Pairs absent from the table are answered N.
class StubBackend : public Backend {
 public:
  using Table = std::map<std::pair<std::string, std::string>, std::string>;  // -> Y reason

  explicit StubBackend(Table yes_pairs);

  std::string complete(const std::string& model_id, const std::string& prompt,
                       std::chrono::milliseconds timeout) override;

  // Fault injection for tests.
  void fail_next(std::size_t n, std::function<void()> thrower);
  void set_raw_override(std::function<std::optional<std::string>(const std::string& prompt)> fn);
  void corrupt_pair(const NamedPair& pair);

  std::size_t calls() const { return calls_.load(); }

 private:
  Table table_;
  std::mutex mu_;
  std::size_t pending_failures_ = 0;
  std::function<void()> thrower_;
  std::function<std::optional<std::string>(const std::string&)> raw_override_;
  std::vector<std::pair<std::string, std::string>> corrupted_;
  std::atomic<std::size_t> calls_{0};
};

struct ClientConfig {
  std::string endpoint;
  std::string model_id = "stub";
  std::string api_key;
  double timeout_seconds = 30.0;
  int max_retries = 3;
  int max_in_flight = 4;
  std::chrono::milliseconds base_backoff{200};
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// Backend wrapper with bounded retries, exponential backoff and a
/// (model_id, prompt) response cache. Safe to share between threads.
class OracleClient {
 public:
  OracleClient(std::shared_ptr<Backend> backend, ClientConfig config, Sleeper sleeper = {});

  const ClientConfig& config() const { return config_; }
  std::string query(const std::string& prompt);
  std::size_t cache_hits() const { return cache_hits_.load(); }
  std::size_t backend_attempts() const { return attempts_.load(); }

 private:
  std::shared_ptr<Backend> backend_;
  ClientConfig config_;
  Sleeper sleeper_;
  mutable std::shared_mutex cache_mu_;
  std::unordered_map<std::string, std::string> cache_;
  std::atomic<std::size_t> cache_hits_{0};
  std::atomic<std::size_t> attempts_{0};
};

std::string query_backend(OracleClient& client, const std::string& prompt);

/// Pair-level verdict cache keyed by (model_id, template hash, ordered pair).
class VerdictCache {
 public:
  struct Entry {
    Verdict verdict;
    std::string explanation;
  };
  VerdictCache() = default;
  VerdictCache(const VerdictCache& o) : entries_(o.snapshot()) {}
  VerdictCache& operator=(const VerdictCache& o) {
    auto copy = o.snapshot();
    std::unique_lock lock(mu_);
    entries_ = std::move(copy);
    return *this;
  }

  std::optional<Entry> get(const std::string& model_id, std::uint64_t template_hash,
                           const pairgen::EntityPair& pair) const;
  void put(const std::string& model_id, std::uint64_t template_hash,
           const pairgen::EntityPair& pair, Entry entry);
  std::size_t size() const;

  std::string serialize() const;
  static VerdictCache deserialize(const std::string& content);

 private:
  static std::string key(const std::string& model_id, std::uint64_t template_hash,
                         const pairgen::EntityPair& pair);
  std::map<std::string, Entry> snapshot() const {
    std::shared_lock lock(mu_);
    return entries_;
  }
  mutable std::shared_mutex mu_;
  std::map<std::string, Entry> entries_;
};

struct InferStats {
  std::size_t pairs = 0;
  std::size_t cached = 0;
  std::size_t prompts = 0;
  std::size_t bisections = 0;
};

/// Judges every pair: cached pairs are reused, the rest go out in batches of
/// `batch_size` with up to max_in_flight concurrent prompts. A malformed
/// response is retried by bisecting the batch down to single pairs before the
/// error surfaces. Output order follows `pairs` regardless of completion order.
std::vector<OracleVerdict> infer_verdicts(OracleClient& client, const PromptTemplate& tmpl,
                                          std::span<const pairgen::EntityPair> pairs,
                                          const std::function<std::string(const EntityId&)>& name_of,
                                          std::int64_t issued_at, std::size_t batch_size,
                                          VerdictCache* cache = nullptr, InferStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Verdict store

struct VerdictStore {
  std::string rows;          // first,second,verdict,model_id,issued_at,explanation_ref
  std::string explanations;  // explanation_ref \t escaped text
};

std::string explanation_ref(const std::string& explanation);
VerdictStore format_verdicts(std::span<const OracleVerdict> verdicts);
std::vector<OracleVerdict> parse_verdict_store(const std::string& rows,
                                               const std::string& explanations);

// ---------------------------------------------------------------------------
// Annotation

/// Uniform sample without replacement (partial Fisher-Yates), reproducible by seed.
std::vector<OracleVerdict> sample_for_annotation(std::span<const OracleVerdict> verdicts,
                                                 std::size_t n, std::uint64_t seed);

/// Manual judgment counts per level 1 (completely unrelated) .. 5 (completely related).
struct AnnotationCounts {
  std::array<std::int64_t, 5> levels{};
  std::int64_t total() const;
};

double mean_annotation_score(const AnnotationCounts& counts);

struct ModelAnnotation {
  std::string model;
  AnnotationCounts counts;
};

/// Rows "model,l1,l2,l3,l4,l5".
std::vector<ModelAnnotation> parse_annotation_table(const std::string& content,
                                                    const std::string& source = "annotations");

}  // namespace compkg::oracle
