#include "compkg/kernels.hpp"

#include <omp.h>

#include "compkg/common.hpp"

namespace compkg::kernels {

namespace {

std::vector<double> embed(const eei::EeiModel& model, std::span<const double> features,
                          std::size_t rows, bool parallel) {
  const std::size_t f = model.feature_dim(), d = model.dim();
  if (features.size() != rows * f) throw DataError("feature matrix does not match row count");
  std::vector<double> out(rows * d);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t r = 0; r < std::ptrdiff_t(rows); ++r) {
    const auto y = eei::item_tower(model, features.subspan(std::size_t(r) * f, f));
    std::copy(y.begin(), y.end(), out.begin() + r * std::ptrdiff_t(d));
  }
  return out;
}

std::vector<double> scores(std::span<const double> ent, std::size_t ne, std::span<const double> it,
                           std::size_t ni, std::size_t d, bool parallel) {
  if (ent.size() != ne * d || it.size() != ni * d)
    throw DataError("score_matrix: input shapes do not match");
  std::vector<double> out(ne * ni);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t e = 0; e < std::ptrdiff_t(ne); ++e) {
    const double* a = ent.data() + std::size_t(e) * d;
    for (std::size_t i = 0; i < ni; ++i) {
      const double* b = it.data() + i * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += a[c] * b[c];
      out[std::size_t(e) * ni + i] = s;
    }
  }
  return out;
}

}  // namespace

std::vector<double> item_embeddings(const eei::EeiModel& model, std::span<const double> features,
                                    std::size_t rows) {
  return embed(model, features, rows, true);
}
std::vector<double> item_embeddings_serial(const eei::EeiModel& model,
                                           std::span<const double> features, std::size_t rows) {
  return embed(model, features, rows, false);
}

std::vector<double> score_matrix(std::span<const double> entities, std::size_t n_entities,
                                 std::span<const double> items, std::size_t n_items, std::size_t d) {
  return scores(entities, n_entities, items, n_items, d, true);
}
std::vector<double> score_matrix_serial(std::span<const double> entities, std::size_t n_entities,
                                        std::span<const double> items, std::size_t n_items,
                                        std::size_t d) {
  return scores(entities, n_entities, items, n_items, d, false);
}

}  // namespace compkg::kernels
