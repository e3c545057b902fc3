#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "diffclip/autodiff.hpp"
#include "diffclip/errors.hpp"
#include "diffclip/ops.hpp"

namespace diffclip {

/// N×N logits S_ij = u_i·v_j / τ, and the τ that produced them.
struct SimilarityMatrix {
  Var values;
  double temperature = 1.0;
};

namespace detail {

inline void require_unit_rows(const Tensor& t, const char* which) {
  const std::size_t n = t.rows(), e = t.cols();
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < e; ++c) ss += t[r * e + c] * t[r * e + c];
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-6) {
      throw NumericError(std::string("similarity_matrix: row ") + std::to_string(r) + " of " + which +
                         " is not unit norm");
    }
  }
}

inline void require_pair(const Var& u, const Var& v) {
  require_matrix(u, "similarity_matrix");
  require_matrix(v, "similarity_matrix");
  if (u.shape() != v.shape()) {
    throw DimensionError("similarity_matrix: embeddings " + shape_str(u.shape()) + " and " + shape_str(v.shape()) +
                         " differ");
  }
  require_unit_rows(u.value(), "u");
  require_unit_rows(v.value(), "v");
}

}  // namespace detail

inline SimilarityMatrix similarity_matrix(Var u, Var v, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("similarity_matrix: temperature must be positive");
  detail::require_pair(u, v);
  return {scale(matmul_nt(u, v), 1.0 / tau), tau};
}

/// Learnable-temperature form: τ = exp(-logit_scale).
inline SimilarityMatrix similarity_matrix_learned(Var u, Var v, Var logit_scale) {
  detail::require_pair(u, v);
  Var inv_tau = exp(logit_scale);
  return {scale_by(matmul_nt(u, v), inv_tau), 1.0 / inv_tau.value()[0]};
}

/// ½ (row-wise CE with diagonal targets + column-wise CE with diagonal targets).
inline Var clip_loss(Var logits) {
  detail::require_matrix(logits, "clip_loss");
  const std::size_t n = logits.shape()[0];
  if (logits.shape()[1] != n) throw DimensionError("clip_loss: logits " + shape_str(logits.shape()) + " not square");
  std::vector<std::size_t> diag(n);
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  Var text_to_image = cross_entropy_rows(logits, diag);
  Var image_to_text = cross_entropy_rows(transpose(logits), diag);
  return scale(add(text_to_image, image_to_text), 0.5);
}

inline Var clip_loss(const SimilarityMatrix& s) { return clip_loss(s.values); }

}  // namespace diffclip
