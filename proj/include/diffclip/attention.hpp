#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "diffclip/autodiff.hpp"
#include "diffclip/errors.hpp"
#include "diffclip/ops.hpp"
#include "diffclip/tensor.hpp"

namespace diffclip {

enum class AttentionVariant { standard, differential };

/// Whether a differential layer keeps one set of λ vectors for all heads or one per head.
enum class LambdaSharing { per_layer, per_head };

struct LambdaInit {
  enum class Mode { constant, dynamic };
  Mode mode = Mode::constant;
  double value = 0.8;

  static LambdaInit constant(double v) { return {Mode::constant, v}; }
  static LambdaInit dynamic() { return {Mode::dynamic, 0.0}; }
  friend bool operator==(const LambdaInit&, const LambdaInit&) = default;
};

/// Per-layer λ_init schedule 0.8 - 0.6·exp(-0.3·l), with 1-based layer index l.
inline double lambda_init_schedule(std::size_t layer) {
  if (layer < 1) throw ConfigError("lambda_init_schedule: layer index is 1-based, got 0");
  return 0.8 - 0.6 * std::exp(-0.3 * static_cast<double>(layer));
}

struct AttentionConfig {
  std::size_t model_dim = 0;
  std::size_t num_heads = 1;
  AttentionVariant variant = AttentionVariant::standard;
  LambdaInit lambda_init{};
  std::size_t layer_index = 1;  // 1-based
  LambdaSharing lambda_sharing = LambdaSharing::per_layer;
  // Head-wise RMS norm scaled by (1 - λ_init) after the subtraction. Off by default.
  bool head_norm = false;

  std::size_t head_dim() const { return model_dim / num_heads; }
  std::size_t lambda_dim() const { return head_dim() / 2; }

  /// Number of LambdaParams sets the layer owns.
  std::size_t lambda_groups() const {
    if (variant == AttentionVariant::standard) return 0;
    return lambda_sharing == LambdaSharing::per_head ? num_heads : 1;
  }

  double resolved_lambda_init() const {
    return lambda_init.mode == LambdaInit::Mode::dynamic ? lambda_init_schedule(layer_index) : lambda_init.value;
  }

  void validate() const {
    if (model_dim == 0 || num_heads == 0) throw ConfigError("attention: model_dim and num_heads must be positive");
    if (model_dim % num_heads != 0) {
      throw ConfigError("attention: model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (layer_index < 1) throw ConfigError("attention: layer_index is 1-based");
    if (variant == AttentionVariant::differential) {
      if (head_dim() % 2 != 0) {
        throw ConfigError("attention: differential variant needs an even head dim, got " + std::to_string(head_dim()));
      }
      if (!std::isfinite(resolved_lambda_init())) throw ConfigError("attention: lambda_init must be finite");
    }
  }

  /// Non-fatal policy notes (e.g. λ_init outside (0, 1)).
  std::vector<std::string> warnings() const {
    std::vector<std::string> out;
    if (variant == AttentionVariant::differential && lambda_init.mode == LambdaInit::Mode::constant &&
        !(lambda_init.value > 0.0 && lambda_init.value < 1.0)) {
      out.push_back("lambda_init " + std::to_string(lambda_init.value) + " is outside (0, 1)");
    }
    return out;
  }
};

struct LambdaParams {
  Tensor q1, k1, q2, k2;  // each of length d_h/2
  double lambda_init = 0.8;
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  // d×d, identical layout for both variants
  std::vector<LambdaParams> lambdas;
};

struct LambdaVars {
  Var q1, k1, q2, k2;
  double lambda_init = 0.8;
};

struct AttentionVars {
  Var wq, wk, wv, wo;
  std::vector<LambdaVars> lambdas;
};

inline AttentionVars bind(Tape& tape, const AttentionWeights& w, bool trainable) {
  AttentionVars v{tape.leaf(w.wq, trainable), tape.leaf(w.wk, trainable), tape.leaf(w.wv, trainable),
                  tape.leaf(w.wo, trainable), {}};
  for (const auto& p : w.lambdas) {
    v.lambdas.push_back({tape.leaf(p.q1, trainable), tape.leaf(p.k1, trainable), tape.leaf(p.q2, trainable),
                         tape.leaf(p.k2, trainable), p.lambda_init});
  }
  return v;
}

// ---------------------------------------------------------------------------
// λ = exp(<λq1, λk1>) - exp(<λq2, λk2>) + λ_init

inline constexpr double kLambdaExpLimit = 700.0;

namespace detail {
inline void check_lambda_exponent(double v) {
  if (!std::isfinite(v) || v > kLambdaExpLimit) {
    throw NumericError("compute_lambda: exponent " + std::to_string(v) + " exceeds overflow guard");
  }
}
inline void check_lambda_shapes(const Shape& a, const Shape& b, const Shape& c, const Shape& d) {
  if (a != b || a != c || a != d) throw DimensionError("compute_lambda: λ vectors differ in shape");
}
}  // namespace detail

inline double compute_lambda(const LambdaParams& p) {
  detail::check_lambda_shapes(p.q1.shape(), p.k1.shape(), p.q2.shape(), p.k2.shape());
  double d1 = 0.0, d2 = 0.0;
  for (std::size_t i = 0; i < p.q1.size(); ++i) {
    d1 += p.q1[i] * p.k1[i];
    d2 += p.q2[i] * p.k2[i];
  }
  detail::check_lambda_exponent(d1);
  detail::check_lambda_exponent(d2);
  return std::exp(d1) - std::exp(d2) + p.lambda_init;
}

inline Var compute_lambda(const LambdaVars& p) {
  detail::check_lambda_shapes(p.q1.shape(), p.k1.shape(), p.q2.shape(), p.k2.shape());
  Var d1 = dot(p.q1, p.k1);
  Var d2 = dot(p.q2, p.k2);
  detail::check_lambda_exponent(d1.value()[0]);
  detail::check_lambda_exponent(d2.value()[0]);
  Var init = p.q1.tape().constant(Tensor::scalar(p.lambda_init));
  return add(sub(exp(d1), exp(d2)), init);
}

// ---------------------------------------------------------------------------
// Single heads

/// softmax(Q Kᵀ / sqrt(scale_dim)) V. Writes the attention matrix to `weights_out` if given.
inline Var attention_head(Var q, Var k, Var v, bool causal, Tensor* weights_out = nullptr) {
  if (q.shape()[1] != k.shape()[1] || k.shape()[0] != v.shape()[0]) {
    throw DimensionError("attention_head: incompatible Q/K/V " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  }
  Var scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.shape()[1])));
  Var a = causal ? causal_softmax(scores) : softmax(scores, 1);
  if (weights_out) *weights_out = a.value();
  return matmul(a, v);
}

/// (A₁ - λA₂) V with A_i = softmax(Q_i K_iᵀ / sqrt(d_h/2)); Q/K halves are d_h/2 wide, V is d_h wide.
/// Writes the effective weight matrix A₁ - λA₂ to `effective_out` if given.
inline Var diff_attention_head(Var q1, Var q2, Var k1, Var k2, Var v, Var lambda, bool causal,
                               Tensor* effective_out = nullptr) {
  const std::size_t half = q1.shape()[1];
  if (q2.shape()[1] != half || k1.shape()[1] != half || k2.shape()[1] != half) {
    throw DimensionError("diff_attention_head: Q/K halves differ in width");
  }
  if (v.shape()[1] != 2 * half) {
    throw DimensionError("diff_attention_head: V width " + std::to_string(v.shape()[1]) + " is not twice the half width " +
                         std::to_string(half));
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(half));
  Var s1 = scale(matmul_nt(q1, k1), inv);
  Var s2 = scale(matmul_nt(q2, k2), inv);
  Var a1 = causal ? causal_softmax(s1) : softmax(s1, 1);
  Var a2 = causal ? causal_softmax(s2) : softmax(s2, 1);
  Var effective = sub(a1, scale_by(a2, lambda));
  if (effective_out) *effective_out = effective.value();
  return matmul(effective, v);
}

// ---------------------------------------------------------------------------
// Multi-head

/// Effective per-head attention matrices captured during a forward pass, ordered
/// sequence-major then head. For the differential variant these are A₁ - λA₂.
struct AttentionTrace {
  std::size_t num_heads = 0;
  std::vector<Tensor> weights;
  std::vector<double> lambdas;  // per head (empty for standard)
};

namespace detail {

// Row softmax in place; with `causal`, entries (r, c > r) become exactly 0.
inline void softmax_rows_inplace(RowMatrix& s, bool causal) {
  const Eigen::Index n = s.rows(), m = s.cols();
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::Index last = causal ? std::min(r, m - 1) : m - 1;
    double mx = s(r, 0);
    for (Eigen::Index c = 1; c <= last; ++c) mx = std::max(mx, s(r, c));
    double z = 0.0;
    for (Eigen::Index c = 0; c <= last; ++c) z += (s(r, c) = std::exp(s(r, c) - mx));
    for (Eigen::Index c = 0; c <= last; ++c) s(r, c) /= z;
    for (Eigen::Index c = last + 1; c < m; ++c) s(r, c) = 0.0;
  }
}

// d(softmax)ᵀ applied to `g` given probabilities `a`: a ⊙ (g - rowsum(g ⊙ a)).
inline RowMatrix softmax_rows_backward(const RowMatrix& a, const RowMatrix& g) {
  const Eigen::VectorXd dots = (g.array() * a.array()).rowwise().sum();
  RowMatrix out = g;
  out.colwise() -= dots;
  return (out.array() * a.array()).matrix();
}

}  // namespace detail

/// Attention core for every sequence and head of a stacked (S·T)×d projection, as one
/// tape node: heads are written side by side in the output, as in [head₁ ‖ … ‖ head_h].
/// `lambdas` holds one scalar Var per λ group (empty for the standard variant).
inline Var fused_attention(Var q, Var k, Var v, std::span<const Var> lambdas, std::size_t seq_len,
                           std::size_t num_heads, bool differential, bool causal, AttentionTrace* trace = nullptr) {
  using detail::RowMatrix;
  const Tensor& qv = q.value();
  const std::size_t rows = qv.rows(), d = qv.cols();
  if (k.shape() != q.shape() || v.shape() != q.shape()) throw DimensionError("fused_attention: Q/K/V shapes differ");
  if (seq_len == 0 || rows % seq_len != 0 || num_heads == 0 || d % num_heads != 0) {
    throw DimensionError("fused_attention: bad layout " + shape_str(q.shape()));
  }
  const std::size_t dh = d / num_heads;
  if (differential && (dh % 2 != 0 || lambdas.empty())) throw DimensionError("fused_attention: differential layout");
  const std::size_t n_seq = rows / seq_len;
  const std::size_t width = differential ? dh / 2 : dh;
  const double inv = 1.0 / std::sqrt(static_cast<double>(width));
  const auto group_of = [n = lambdas.size()](std::size_t head) { return n == 1 ? std::size_t{0} : head; };
  std::vector<double> lam(num_heads, 0.0);
  for (std::size_t i = 0; differential && i < num_heads; ++i) lam[i] = lambdas[group_of(i)].value()[0];

  const auto Q = detail::as_matrix(qv);
  const auto K = detail::as_matrix(k.value());
  const auto V = detail::as_matrix(v.value());
  Tensor out(Shape{rows, d});
  auto O = detail::as_matrix(out);
  const auto T = static_cast<Eigen::Index>(seq_len);
  const auto W = static_cast<Eigen::Index>(width);
  const auto DH = static_cast<Eigen::Index>(dh);
  // Saved probabilities, (seq, head)-major; two per head for the differential variant.
  std::vector<RowMatrix> probs;
  probs.reserve(n_seq * num_heads * (differential ? 2 : 1));
  if (trace) {
    trace->num_heads = num_heads;
    trace->lambdas.assign(differential ? lam.begin() : lam.end(), lam.end());
  }
  for (std::size_t s = 0; s < n_seq; ++s) {
    const auto r0 = static_cast<Eigen::Index>(s * seq_len);
    for (std::size_t i = 0; i < num_heads; ++i) {
      const auto c0 = static_cast<Eigen::Index>(i * dh);
      RowMatrix a1 = Q.block(r0, c0, T, W) * K.block(r0, c0, T, W).transpose() * inv;
      detail::softmax_rows_inplace(a1, causal);
      if (differential) {
        RowMatrix a2 = Q.block(r0, c0 + W, T, W) * K.block(r0, c0 + W, T, W).transpose() * inv;
        detail::softmax_rows_inplace(a2, causal);
        const RowMatrix e = a1 - lam[i] * a2;
        O.block(r0, c0, T, DH).noalias() = e * V.block(r0, c0, T, DH);
        if (trace) trace->weights.emplace_back(Shape{seq_len, seq_len}, std::vector<double>(e.data(), e.data() + e.size()));
        probs.push_back(std::move(a1));
        probs.push_back(std::move(a2));
      } else {
        O.block(r0, c0, T, DH).noalias() = a1 * V.block(r0, c0, T, DH);
        if (trace) trace->weights.emplace_back(Shape{seq_len, seq_len}, std::vector<double>(a1.data(), a1.data() + a1.size()));
        probs.push_back(std::move(a1));
      }
    }
  }

  std::vector<Var> inputs = {q, k, v};
  inputs.insert(inputs.end(), lambdas.begin(), lambdas.end());
  std::vector<std::size_t> lambda_ids;
  for (const Var& l : lambdas) lambda_ids.push_back(l.id());
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().emit(
      differential ? "fused_diff_attention" : "fused_attention", std::move(out), inputs,
      [=, probs = std::move(probs), lam = std::move(lam), lambda_ids = std::move(lambda_ids)](Tape& t, const Tensor& g) {
        const auto G = detail::as_matrix(g);
        const auto Q = detail::as_matrix(t.value(iq));
        const auto K = detail::as_matrix(t.value(ik));
        const auto V = detail::as_matrix(t.value(iv));
        const bool need_q = t.requires_grad(iq), need_k = t.requires_grad(ik), need_v = t.requires_grad(iv);
        Tensor* gq = need_q ? &t.grad_buffer(iq) : nullptr;
        Tensor* gk = need_k ? &t.grad_buffer(ik) : nullptr;
        Tensor* gv = need_v ? &t.grad_buffer(iv) : nullptr;
        std::vector<double> glam(lambda_ids.size(), 0.0);
        std::size_t p = 0;
        for (std::size_t s = 0; s < n_seq; ++s) {
          const auto r0 = static_cast<Eigen::Index>(s * seq_len);
          for (std::size_t i = 0; i < num_heads; ++i) {
            const auto c0 = static_cast<Eigen::Index>(i * dh);
            const auto go = G.block(r0, c0, T, DH);
            const RowMatrix& a1 = probs[p++];
            const RowMatrix* a2 = differential ? &probs[p++] : nullptr;
            const RowMatrix ge = go * V.block(r0, c0, T, DH).transpose();
            if (gv) {
              if (differential) {
                detail::as_matrix(*gv).block(r0, c0, T, DH).noalias() += (a1 - lam[i] * *a2).transpose() * go;
              } else {
                detail::as_matrix(*gv).block(r0, c0, T, DH).noalias() += a1.transpose() * go;
              }
            }
            const RowMatrix gs1 = detail::softmax_rows_backward(a1, ge) * inv;
            if (gq) detail::as_matrix(*gq).block(r0, c0, T, W).noalias() += gs1 * K.block(r0, c0, T, W);
            if (gk) detail::as_matrix(*gk).block(r0, c0, T, W).noalias() += gs1.transpose() * Q.block(r0, c0, T, W);
            if (differential) {
              glam[group_of(i)] -= (ge.array() * a2->array()).sum();
              const RowMatrix gs2 = detail::softmax_rows_backward(*a2, ge) * (-lam[i] * inv);
              if (gq) detail::as_matrix(*gq).block(r0, c0 + W, T, W).noalias() += gs2 * K.block(r0, c0 + W, T, W);
              if (gk) detail::as_matrix(*gk).block(r0, c0 + W, T, W).noalias() += gs2.transpose() * Q.block(r0, c0 + W, T, W);
            }
          }
        }
        for (std::size_t j = 0; j < lambda_ids.size(); ++j) {
          if (t.requires_grad(lambda_ids[j])) t.grad_buffer(lambda_ids[j])[0] += glam[j];
        }
      });
}

/// How multi_head_attention evaluates the per-head core.
enum class AttentionPath {
  fused,     // one tape node for all sequences and heads
  composed,  // per-head graph of elementary ops (reference path)
};

/// Multi-head attention over a stack of `x.rows() / seq_len` sequences of length `seq_len`.
/// Projections are applied to the whole stack at once; attention runs per sequence.
inline Var multi_head_attention(Var x, std::size_t seq_len, const AttentionVars& w, const AttentionConfig& cfg,
                                bool causal, AttentionTrace* trace = nullptr,
                                AttentionPath path = AttentionPath::fused) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  if (x.shape().size() != 2 || x.shape()[1] != d) {
    throw DimensionError("multi_head_attention: input " + shape_str(x.shape()) + " does not have width " +
                         std::to_string(d));
  }
  if (seq_len == 0 || x.shape()[0] % seq_len != 0) {
    throw DimensionError("multi_head_attention: " + std::to_string(x.shape()[0]) +
                         " rows are not a multiple of sequence length " + std::to_string(seq_len));
  }
  const bool diff = cfg.variant == AttentionVariant::differential;
  if (w.lambdas.size() != cfg.lambda_groups()) {
    throw ConfigError("multi_head_attention: expected " + std::to_string(cfg.lambda_groups()) + " λ sets, got " +
                      std::to_string(w.lambdas.size()));
  }
  const std::size_t h = cfg.num_heads;
  const std::size_t dh = cfg.head_dim();
  const std::size_t n_seq = x.shape()[0] / seq_len;

  Var q = matmul(x, w.wq);
  Var k = matmul(x, w.wk);
  Var v = matmul(x, w.wv);

  std::vector<Var> lambdas;
  for (const auto& p : w.lambdas) lambdas.push_back(compute_lambda(p));

  if (path == AttentionPath::fused && !cfg.head_norm) {
    return matmul(fused_attention(q, k, v, lambdas, seq_len, h, diff, causal, trace), w.wo);
  }

  if (trace) {
    trace->num_heads = h;
    trace->lambdas.clear();
    for (std::size_t i = 0; diff && i < h; ++i) trace->lambdas.push_back(lambdas[lambdas.size() == 1 ? 0 : i].value()[0]);
  }
  std::vector<Var> sequences;
  sequences.reserve(n_seq);
  std::vector<Var> heads(h);
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t r0 = s * seq_len;
    for (std::size_t i = 0; i < h; ++i) {
      const std::size_t c0 = i * dh;
      Var vi = block(v, r0, seq_len, c0, dh);
      Tensor captured;
      Tensor* cap = trace ? &captured : nullptr;
      if (diff) {
        const std::size_t half = dh / 2;
        Var lam = lambdas[lambdas.size() == 1 ? 0 : i];
        Var out = diff_attention_head(block(q, r0, seq_len, c0, half), block(q, r0, seq_len, c0 + half, half),
                                      block(k, r0, seq_len, c0, half), block(k, r0, seq_len, c0 + half, half), vi,
                                      lam, causal, cap);
        if (cfg.head_norm) out = scale(rms_norm(out), 1.0 - cfg.resolved_lambda_init());
        heads[i] = out;
      } else {
        heads[i] = attention_head(block(q, r0, seq_len, c0, dh), block(k, r0, seq_len, c0, dh), vi, causal, cap);
      }
      if (trace) trace->weights.push_back(std::move(captured));
    }
    sequences.push_back(h == 1 ? heads[0] : concat(std::span<const Var>(heads), 1));
  }
  Var merged = n_seq == 1 ? sequences[0] : concat(std::span<const Var>(sequences), 0);
  return matmul(merged, w.wo);
}

/// Standard MHA over one sequence X (N×d).
inline Var standard_mha(Var x, const AttentionVars& w, const AttentionConfig& cfg, bool causal = false,
                        AttentionTrace* trace = nullptr) {
  if (cfg.variant != AttentionVariant::standard) throw ConfigError("standard_mha: config variant is differential");
  return multi_head_attention(x, x.shape()[0], w, cfg, causal, trace);
}

/// Differential MHA over one sequence X (N×d). λ is recomputed from the λ vectors on every call.
inline Var diff_mha(Var x, const AttentionVars& w, const AttentionConfig& cfg, bool causal = false,
                    AttentionTrace* trace = nullptr) {
  if (cfg.variant != AttentionVariant::differential) throw ConfigError("diff_mha: config variant is standard");
  return multi_head_attention(x, x.shape()[0], w, cfg, causal, trace);
}

}  // namespace diffclip
