#pragma once

#include <span>
#include <vector>

#include "compkg/eei_model.hpp"

namespace compkg::kernels {

/// Row-major matrix of item tower outputs, one row of width d per feature row.
std::vector<double> item_embeddings(const eei::EeiModel& model, std::span<const double> features,
                                    std::size_t rows);
std::vector<double> item_embeddings_serial(const eei::EeiModel& model,
                                           std::span<const double> features, std::size_t rows);

/// scores[e * items + i] = dot(entity row e, item row i).
std::vector<double> score_matrix(std::span<const double> entities, std::size_t n_entities,
                                 std::span<const double> items, std::size_t n_items, std::size_t d);
std::vector<double> score_matrix_serial(std::span<const double> entities, std::size_t n_entities,
                                        std::span<const double> items, std::size_t n_items,
                                        std::size_t d);

}  // namespace compkg::kernels
