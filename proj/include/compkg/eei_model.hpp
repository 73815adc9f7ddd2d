#pragma once

#include <climits>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "compkg/common.hpp"
#include "compkg/ingest.hpp"
#include "compkg/trigraph.hpp"

namespace compkg::eei {

enum class Activation { Elu, Identity };

struct Hyperparams {
  std::size_t dim = 16;
  double tau = 0.2;
  double lambda_cl = 0.1;
  double lambda_l2 = 1e-4;
  double learning_rate = 0.05;
  int epochs = 200;
  std::size_t batch_size = 256;  // 0 = full batch
  std::uint64_t seed = 1;
  Activation activation = Activation::Elu;
  /// true: sum of per-neighbour σ(α W1 h_j); false: σ of the attention-weighted sum.
  bool sigma_inside = true;
  double leaky_slope = 0.2;

  void validate() const;
};

struct Block {
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Offsets of every trainable block inside one flat parameter vector.
struct ParamLayout {
  Block embeddings;   // nodes x d
  Block view1_w1;     // d x d, row-major
  Block view1_w2;     // 2d: [applied to W1 h_center | applied to W1 h_neighbour]
  Block view2_w1;
  Block view2_w2;
  Block fuse_first;   // d, gate query of the substitutable view
  Block fuse_second;  // d, gate query of the complementary view
  Block mix;          // 2 logits, softmax -> (w_first, w_second)
  Block tower_in_w;   // d x feature_dim
  Block tower_in_b;   // d
  Block tower_out_w;  // d x d
  Block tower_out_b;  // d
  std::size_t total = 0;

  static ParamLayout make(std::size_t nodes, std::size_t dim, std::size_t feature_dim);
  std::vector<std::pair<std::string, Block>> named_blocks() const;
};

class EeiModel {
 public:
  /// All-zero parameters.
  EeiModel(Hyperparams hp, std::size_t nodes, std::size_t feature_dim);

  /// Seeded initialisation: embeddings uniform in [-1/sqrt(d), 1/sqrt(d)],
  /// weight matrices scaled to unit variance gain, gates and biases zero.
  static EeiModel initialize(const TriGraph& graph, const Hyperparams& hp);

  const Hyperparams& hyper() const { return hp_; }
  Hyperparams& hyper() { return hp_; }
  std::size_t dim() const { return hp_.dim; }
  std::size_t nodes() const { return nodes_; }
  std::size_t feature_dim() const { return feature_dim_; }
  const ParamLayout& layout() const { return layout_; }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::span<double> block(const Block& b) { return {params_.data() + b.offset, b.size}; }
  std::span<const double> block(const Block& b) const { return {params_.data() + b.offset, b.size}; }

 private:
  Hyperparams hp_;
  std::size_t nodes_;
  std::size_t feature_dim_;
  ParamLayout layout_;
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Building blocks. Embedding matrices are row-major (rows x d).

struct GatParams {
  std::span<const double> w1;  // d x d
  std::span<const double> w2;  // 2d
};

struct AggregateResult {
  std::vector<double> out;
  std::vector<double> alpha;  // attention per neighbour, sums to 1
  bool empty = false;         // no neighbours: zero output
};

/// One attention aggregation of `neighbors` into `center`.
AggregateResult gat_aggregate(std::span<const double> h, std::size_t dim, std::size_t center,
                              std::span<const std::size_t> neighbors, GatParams params,
                              const Hyperparams& hp);

struct FuseResult {
  std::vector<double> out;
  double beta = 0.5;  // weight of v_a
};

/// Scored two-way gate: beta = softmax(q.v_a, q.v_b)_a, out = beta v_a + (1-beta) v_b.
/// An absent side is skipped and the present side passes through unchanged.
FuseResult fuse_views(std::span<const double> v_a, std::span<const double> v_b,
                      std::span<const double> query, bool a_present = true, bool b_present = true);

/// (w_first, w_second) from the two mix logits.
std::pair<double, double> mix_weights(std::span<const double> logits);

/// w_first z_f + w_second z_s; the weights must sum to 1.
std::vector<double> entity_representation(std::span<const double> z_first,
                                          std::span<const double> z_second,
                                          std::pair<double, double> weights);

/// Σ_i -log softmax_j(cos(zf_i, zs_j)/τ)_i over `rows` matched rows.
/// Optional gradients w.r.t. both inputs. Throws DataError on a zero-norm row.
double infonce_loss(std::span<const double> z_first, std::span<const double> z_second,
                    std::size_t rows, std::size_t dim, double tau,
                    std::vector<double>* grad_first = nullptr,
                    std::vector<double>* grad_second = nullptr);

enum class MetaPath { MP1, MP2 };
const std::vector<std::size_t>& expand_metapath(const TriGraph& graph, std::size_t entity,
                                                MetaPath which);

struct ViewResult {
  std::vector<double> z;
  bool empty = false;  // both sides had no neighbours
};

ViewResult substitutable_view(const EeiModel& model, const TriGraph& graph, std::size_t entity);
ViewResult complementary_view(const EeiModel& model, const TriGraph& graph, std::size_t entity);

/// Item tower: out = Wo σ(Wi x + bi) + bo.
std::vector<double> item_tower(const EeiModel& model, std::span<const double> features);

/// Entity views and representations for every entity of the graph.
struct EntityTable {
  std::size_t dim = 0;
  std::size_t entities = 0;
  std::vector<double> z_first, z_second, repr;
  std::vector<char> first_empty, second_empty;

  std::span<const double> representation(std::size_t e) const {
    return {repr.data() + e * dim, dim};
  }
  bool operator==(const EntityTable&) const = default;
};

/// OpenMP over entities; each entity writes only its own rows.
EntityTable compute_entity_table(const EeiModel& model, const TriGraph& graph);
/// Single-threaded reference.
EntityTable compute_entity_table_serial(const EeiModel& model, const TriGraph& graph);

/// dot(representation(entity), item_tower(features of item)).
double score(const EeiModel& model, const TriGraph& graph, std::size_t entity, std::size_t item);

// ---------------------------------------------------------------------------
// Training

struct EeiSample {
  std::size_t bill_entity = 0;  // local entity index
  std::size_t item = 0;         // local item index
  double label = 0.0;
  bool operator==(const EeiSample&) const = default;
};

/// Exposure samples: every log row (timestamp <= until) on an item of e2
/// becomes (e1, item, clicked) for each distinct entity e1 of the user's bill
/// window with e1 -> e2 in the graph. Random unconnected (e1, item) negatives
/// top the set up to `negative_ratio` negatives per positive.
std::vector<EeiSample> build_samples(const TriGraph& graph, const ingest::InteractionLog& log,
                                     const ingest::BillHistory& bills, int window_days,
                                     std::uint64_t seed, double negative_ratio = 4.0,
                                     std::int64_t until = INT64_MAX);

struct LossBreakdown {
  double main = 0.0;
  double contrastive = 0.0;
  double l2 = 0.0;
  double total = 0.0;
  std::size_t contrastive_entities = 0;
};

/// Test hooks that corrupt the backward pass.
enum class GradientMutation { None, DropAttentionCentering, ScaleByOnePointOne };

/// main BCE + λ1·InfoNCE + λ2·||Θ||². InfoNCE runs over entities whose two
/// views are both non-empty and is skipped when λ1 = 0. `grad`, when given,
/// is resized to the parameter count and filled with dℒ/dΘ.
LossBreakdown total_loss(const EeiModel& model, const TriGraph& graph,
                         std::span<const EeiSample> batch, std::vector<double>* grad = nullptr,
                         GradientMutation mutation = GradientMutation::None);

class TrainingDiverged : public DataError {
 public:
  TrainingDiverged(const std::string& what, std::vector<double> trace)
      : DataError(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

struct TrainResult {
  std::vector<double> loss_trace;  // [0] = before training, [k] = after epoch k
};

/// Minibatch SGD with a fixed learning rate; batch order reshuffled per epoch
/// from the model seed. Deterministic and single-threaded.
TrainResult train(EeiModel& model, const TriGraph& graph, std::span<const EeiSample> samples);

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
};

/// Central differences on `samples` parameters: at least one per block, the
/// rest uniformly at random. Relative error |a - n| / max(1e-8, |a| + |n|).
GradientCheckReport gradient_check(const EeiModel& model, const TriGraph& graph,
                                   std::span<const EeiSample> batch, double epsilon,
                                   std::size_t samples, std::uint64_t seed,
                                   GradientMutation mutation = GradientMutation::None);

std::string format_loss_trace(const std::vector<double>& trace);

// ---------------------------------------------------------------------------
// Artifact

/// Scores (bill entity, item features) pairs from a trained model and its
/// entity table. Immutable, safe to share between threads.
class Scorer {
 public:
  Scorer(EeiModel model, EntityTable table, std::vector<EntityId> entities);

  const EeiModel& model() const { return model_; }
  const EntityTable& table() const { return table_; }
  const std::vector<EntityId>& entities() const { return entities_; }
  std::optional<std::size_t> find_entity(const EntityId& id) const;

  /// Throws DataError for an unknown entity.
  double score(const EntityId& entity, std::span<const double> features) const;
  double score(std::size_t entity, std::span<const double> item_embedding) const;
  std::vector<double> item_embedding(std::span<const double> features) const;
  std::span<const double> entity_embedding(const EntityId& entity) const;

 private:
  EeiModel model_;
  EntityTable table_;
  std::vector<EntityId> entities_;
  std::unordered_map<EntityId, std::size_t> index_;
};

constexpr int kModelFormatVersion = 1;

/// Text artifact: header (version, dims, hyperparameters, seed), entity ids,
/// then each parameter block and the entity table as dense rows.
std::string serialize_model(const EeiModel& model, const EntityTable& table,
                            const std::vector<EntityId>& entities);
Scorer deserialize_model(const std::string& content);

}  // namespace compkg::eei
