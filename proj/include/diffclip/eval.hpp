#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "diffclip/data_synth.hpp"
#include "diffclip/encoders.hpp"
#include "diffclip/errors.hpp"
#include "diffclip/ops.hpp"
#include "diffclip/random.hpp"

namespace diffclip {

/// Anything that maps image stacks and token rows to L2-normalised embedding rows.
template <class M>
concept EmbeddingModel = requires(const M& m, const Tensor& images, const TokenBatch& tokens) {
  { m.embed_images(images) } -> std::convertible_to<Tensor>;
  { m.embed_texts(tokens) } -> std::convertible_to<Tensor>;
};

namespace detail {

/// Runs fn(begin, end) over fixed-size chunks of [0, n) on up to `threads` workers.
/// Chunk boundaries do not depend on the thread count.
template <class Fn>
void for_chunks(std::size_t n, std::size_t chunk, std::size_t threads, Fn fn) {
  const std::size_t chunks = (n + chunk - 1) / chunk;
  const auto run = [&](std::size_t worker, std::size_t stride) {
    for (std::size_t c = worker; c < chunks; c += stride) fn(c * chunk, std::min(n, (c + 1) * chunk));
  };
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) return run(0, 1);
  std::vector<std::jthread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        run(t, threads);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  pool.clear();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t end) {
  Shape s = t.shape();
  const std::size_t per = t.size() / s[0];
  s[0] = end - begin;
  return Tensor(s, std::vector<double>(t.data().begin() + begin * per, t.data().begin() + end * per));
}

}  // namespace detail

/// Embeds with frozen ModelWeights, splitting inputs into chunks that may run in parallel.
class ClipEmbedder {
 public:
  explicit ClipEmbedder(const ModelWeights& w, std::size_t threads = 1, std::size_t chunk = 64)
      : weights_(w), threads_(std::max<std::size_t>(1, threads)), chunk_(std::max<std::size_t>(1, chunk)) {}

  Tensor embed_images(const Tensor& images) const {
    const std::size_t n = images.extent(0);
    Tensor out(Shape{n, weights_.config().embed_dim});
    detail::for_chunks(n, chunk_, threads_, [&](std::size_t b, std::size_t e) {
      const Tensor part = encode_images(weights_, detail::rows_of(images, b, e));
      std::copy(part.data().begin(), part.data().end(), out.data().begin() + b * out.cols());
    });
    return out;
  }

  Tensor embed_texts(const TokenBatch& tokens) const {
    Tensor out(Shape{tokens.count, weights_.config().embed_dim});
    detail::for_chunks(tokens.count, chunk_, threads_, [&](std::size_t b, std::size_t e) {
      TokenBatch part;
      for (std::size_t i = b; i < e; ++i) part.append(tokens.row(i));
      const Tensor emb = encode_texts(weights_, part);
      std::copy(emb.data().begin(), emb.data().end(), out.data().begin() + b * out.cols());
    });
    return out;
  }

  const ModelWeights& weights() const { return weights_; }

 private:
  const ModelWeights& weights_;
  std::size_t threads_;
  std::size_t chunk_;
};

/// Row-wise L2 normalisation of a value matrix.
inline Tensor normalize_rows(Tensor t) {
  const std::size_t n = t.rows(), e = t.cols();
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < e; ++c) ss += t.at(r, c) * t.at(r, c);
    if (!(ss > 0.0)) throw NumericError("normalize_rows: row " + std::to_string(r) + " has zero norm");
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t c = 0; c < e; ++c) t.at(r, c) *= inv;
  }
  return t;
}

/// a·bᵀ for value matrices.
inline Tensor similarity_scores(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw DimensionError("similarity_scores: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(Shape{a.rows(), b.rows()});
  detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b).transpose();
  return out;
}

/// Lowest index of the row maximum.
inline std::size_t argmax_row(const Tensor& s, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < s.cols(); ++c)
    if (s.at(r, c) > s.at(r, best)) best = c;
  return best;
}

// ---------------------------------------------------------------------------
// Zero-shot classification

struct ZeroShotResult {
  std::vector<std::size_t> predictions;
  double accuracy = 0.0;
};

/// Class embedding = normalised mean of its normalised prompt embeddings.
template <EmbeddingModel M>
Tensor class_embeddings(const M& model, const std::vector<std::vector<std::string>>& prompts, const Vocabulary& vocab,
                        std::size_t context_len) {
  if (prompts.size() < 2) throw ConfigError("zero-shot: need at least 2 classes");
  TokenBatch all;
  for (const auto& cls : prompts) {
    if (cls.empty()) throw ConfigError("zero-shot: empty prompt list");
    for (const auto& p : cls) all.append(tokenize(p, vocab, context_len));
  }
  const Tensor emb = normalize_rows(model.embed_texts(all));
  Tensor out(Shape{prompts.size(), emb.cols()}, 0.0);
  std::size_t row = 0;
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    for (std::size_t j = 0; j < prompts[k].size(); ++j, ++row)
      for (std::size_t c = 0; c < emb.cols(); ++c) out.at(k, c) += emb.at(row, c);
  }
  return normalize_rows(std::move(out));
}

/// Cosine-argmax of each image over the class embeddings.
inline ZeroShotResult zero_shot_from_embeddings(const Tensor& image_emb, const Tensor& class_emb,
                                                std::span<const std::size_t> labels) {
  if (class_emb.rows() < 2) throw ConfigError("zero-shot: need at least 2 classes");
  if (labels.size() != image_emb.rows()) throw DimensionError("zero-shot: label count does not match images");
  const Tensor s = similarity_scores(image_emb, class_emb);
  ZeroShotResult r;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    r.predictions.push_back(argmax_row(s, i));
    hits += r.predictions.back() == labels[i];
  }
  r.accuracy = s.rows() ? static_cast<double>(hits) / static_cast<double>(s.rows()) : 0.0;
  return r;
}

template <EmbeddingModel M>
ZeroShotResult zero_shot_classify(const M& model, const Tensor& images,
                                  const std::vector<std::vector<std::string>>& prompts, const Vocabulary& vocab,
                                  std::size_t context_len, std::span<const std::size_t> labels) {
  const Tensor cls = class_embeddings(model, prompts, vocab, context_len);
  return zero_shot_from_embeddings(normalize_rows(model.embed_images(images)), cls, labels);
}

/// Prompt ensembles for the 20 (shape, color) classes.
inline std::vector<std::vector<std::string>> synthetic_class_prompts() {
  std::vector<std::vector<std::string>> out;
  for (std::size_t p = 0; p < kNumPairs; ++p) out.push_back(class_prompts(p));
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval

struct RecallResult {
  std::vector<std::size_t> ks;
  std::vector<double> image_to_text;
  std::vector<double> text_to_image;
};

/// 0-based rank of column `truth` in row `r`; ties go to the lower index.
inline std::size_t rank_of(const Tensor& s, std::size_t r, std::size_t truth) {
  const double t = s.at(r, truth);
  std::size_t rank = 0;
  for (std::size_t c = 0; c < s.cols(); ++c) {
    const double v = s.at(r, c);
    if (v > t || (v == t && c < truth)) ++rank;
  }
  return rank;
}

/// Recall@K in both directions for paired embeddings (row i of each is a pair).
inline RecallResult retrieval_recall(const Tensor& image_emb, const Tensor& text_emb, std::vector<std::size_t> ks) {
  if (image_emb.shape() != text_emb.shape()) throw DimensionError("retrieval_recall: embedding shapes differ");
  const std::size_t n = image_emb.rows();
  for (std::size_t k : ks) {
    if (k == 0 || k > n) {
      throw ConfigError("retrieval_recall: K=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
  }
  const Tensor s = similarity_scores(image_emb, text_emb);
  const Tensor st = similarity_scores(text_emb, image_emb);
  RecallResult r{ks, std::vector<double>(ks.size(), 0.0), std::vector<double>(ks.size(), 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ri = rank_of(s, i, i), rt = rank_of(st, i, i);
    for (std::size_t j = 0; j < ks.size(); ++j) {
      r.image_to_text[j] += ri < ks[j];
      r.text_to_image[j] += rt < ks[j];
    }
  }
  for (std::size_t j = 0; j < ks.size(); ++j) {
    r.image_to_text[j] /= static_cast<double>(n);
    r.text_to_image[j] /= static_cast<double>(n);
  }
  return r;
}

template <EmbeddingModel M>
RecallResult retrieval_recall(const M& model, const Tensor& images, const TokenBatch& tokens, std::vector<std::size_t> ks) {
  return retrieval_recall(normalize_rows(model.embed_images(images)), normalize_rows(model.embed_texts(tokens)),
                          std::move(ks));
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeConfig {
  std::size_t iterations = 300;
  double lr = 1.0;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
};

struct LinearProbe {
  Tensor weight;  // e×K
  Tensor bias;    // K

  std::vector<std::size_t> predict(const Tensor& features) const {
    if (features.rank() != 2 || features.cols() != weight.rows()) {
      throw DimensionError("linear_probe: features " + shape_str(features.shape()) + " do not match the probe");
    }
    Tensor logits(Shape{features.rows(), weight.cols()});
    auto l = detail::as_matrix(logits);
    l.noalias() = detail::as_matrix(features) * detail::as_matrix(weight);
    for (std::size_t r = 0; r < logits.rows(); ++r)
      for (std::size_t c = 0; c < logits.cols(); ++c) logits.at(r, c) += bias[c];
    std::vector<std::size_t> out;
    for (std::size_t r = 0; r < logits.rows(); ++r) out.push_back(argmax_row(logits, r));
    return out;
  }
};

/// Multinomial logistic regression by full-batch gradient descent from zero weights.
inline LinearProbe fit_linear_probe(const Tensor& features, std::span<const std::size_t> labels,
                                    std::size_t num_classes, const ProbeConfig& cfg = {}) {
  if (features.rank() != 2 || labels.size() != features.rows() || labels.empty()) {
    throw DimensionError("linear_probe: features " + shape_str(features.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (num_classes < 2) throw ConfigError("linear_probe: need at least 2 classes");
  std::vector<bool> seen(num_classes, false);
  for (std::size_t y : labels) {
    if (y >= num_classes) throw ConfigError("linear_probe: label " + std::to_string(y) + " outside [0, K)");
    seen[y] = true;
  }
  for (std::size_t k = 0; k < num_classes; ++k)
    if (!seen[k]) throw ConfigError("linear_probe: class " + std::to_string(k) + " absent from the training split");
  LinearProbe p{Tensor(Shape{features.cols(), num_classes}, 0.0), Tensor(Shape{num_classes}, 0.0)};
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Tape tape;
    Var x = tape.constant(features);
    Var w = tape.parameter(p.weight);
    Var b = tape.parameter(p.bias);
    Var loss = cross_entropy_rows(add_row(matmul(x, w), b), labels);
    if (cfg.l2 > 0.0) loss = add(loss, scale(sum(mul(w, w)), cfg.l2));
    tape.backward(loss);
    detail::add_into(p.weight, w.grad(), -cfg.lr);
    detail::add_into(p.bias, b.grad(), -cfg.lr);
  }
  return p;
}

inline double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw DimensionError("accuracy: size mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Rows kept for a k-shot probe: `shots` per class, chosen by a seeded shuffle.
inline std::vector<std::size_t> few_shot_rows(std::span<const std::size_t> labels, std::size_t num_classes,
                                              std::size_t shots, std::uint64_t seed) {
  if (shots == 0) throw ConfigError("few-shot: shots must be positive");
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> taken(num_classes, 0), out;
  for (std::size_t i : order) {
    if (labels[i] >= num_classes) throw ConfigError("few-shot: label outside [0, K)");
    if (taken[labels[i]] < shots) {
      ++taken[labels[i]];
      out.push_back(i);
    }
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (taken[k] < shots) {
      throw ConfigError("few-shot: class " + std::to_string(k) + " has " + std::to_string(taken[k]) + " examples, " +
                        std::to_string(shots) + " requested");
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Held-out accuracy of a probe trained on (train_x, train_y), optionally restricted to `shots` per class.
inline double linear_probe(const Tensor& train_x, std::span<const std::size_t> train_y, const Tensor& test_x,
                           std::span<const std::size_t> test_y, std::size_t num_classes,
                           std::optional<std::size_t> shots = std::nullopt, const ProbeConfig& cfg = {}) {
  if (!shots) return accuracy(fit_linear_probe(train_x, train_y, num_classes, cfg).predict(test_x), test_y);
  const auto rows = few_shot_rows(train_y, num_classes, *shots, cfg.seed);
  Tensor x(Shape{rows.size(), train_x.cols()});
  std::vector<std::size_t> y;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (std::size_t c = 0; c < train_x.cols(); ++c) x.at(k, c) = train_x.at(rows[k], c);
    y.push_back(train_y[rows[k]]);
  }
  return accuracy(fit_linear_probe(x, y, num_classes, cfg).predict(test_x), test_y);
}

}  // namespace diffclip
