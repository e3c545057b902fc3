#pragma once

#include <cmath>

#include "support.hpp"

// Constructed models and balanced image sets for the evaluation protocols.

namespace diffclip::testing {

inline Tensor one_hot_rows(std::span<const std::size_t> cls, std::size_t k) {
  Tensor t(Shape{cls.size(), k}, 0.0);
  for (std::size_t i = 0; i < cls.size(); ++i) t.at(i, cls[i]) = 1.0;
  return t;
}

// Emits the one-hot of the (shape, colour) class: images carry it in their first pixel,
// captions through their colour and shape words.
struct RiggedModel {
  Vocabulary vocab = Vocabulary::synthetic();

  Tensor embed_images(const Tensor& images) const {
    const std::size_t n = images.extent(0), per = images.size() / n;
    std::vector<std::size_t> cls(n);
    for (std::size_t i = 0; i < n; ++i) cls[i] = static_cast<std::size_t>(std::lround(images[i * per] * 100.0));
    return one_hot_rows(cls, kNumPairs);
  }

  Tensor embed_texts(const TokenBatch& tokens) const {
    std::vector<std::size_t> cls(tokens.count);
    for (std::size_t i = 0; i < tokens.count; ++i) {
      std::size_t shape = 0, color = 0;
      for (std::size_t id : tokens.row(i)) {
        for (std::size_t s = 0; s < kShapes.size(); ++s)
          if (vocab.token(id) == kShapes[s]) shape = s;
        for (std::size_t c = 0; c < kColors.size(); ++c)
          if (vocab.token(id) == kColors[c]) color = c;
      }
      cls[i] = shape * kColors.size() + color;
    }
    return one_hot_rows(cls, kNumPairs);
  }
};

static_assert(EmbeddingModel<RiggedModel>);
static_assert(EmbeddingModel<ClipEmbedder>);

// Balanced set: `per_class` rendered images of every (shape, colour) pair.
struct BalancedSet {
  Tensor images;
  std::vector<std::size_t> labels;
};

inline BalancedSet balanced_images(std::size_t per_class, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  BalancedSet b;
  b.images = Tensor(Shape{kNumPairs * per_class, 3, side, side});
  const std::size_t per = 3 * side * side;
  for (std::size_t p = 0; p < kNumPairs; ++p)
    for (std::size_t j = 0; j < per_class; ++j) {
      SampleSpec s = sample_spec(rng);
      s.shape = p / kColors.size();
      s.color = p % kColors.size();
      const Tensor img = render(s, rng(), side);
      const std::size_t row = b.labels.size();
      std::copy(img.data().begin(), img.data().end(), b.images.data().begin() + row * per);
      b.labels.push_back(p);
    }
  return b;
}

inline double three_sigma(double p, std::size_t n) { return 3.0 * std::sqrt(p * (1 - p) / double(n)); }

}  // namespace diffclip::testing
