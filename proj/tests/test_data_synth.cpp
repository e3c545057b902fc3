#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace diffclip;
using namespace diffclip::testing;

namespace {

SampleSpec spec_of(std::size_t shape, std::size_t color, std::size_t size, std::size_t position, double noise) {
  SampleSpec s;
  s.shape = shape;
  s.color = color;
  s.size = size;
  s.position = position;
  s.noise = noise;
  return s;
}

double pixel(const Tensor& img, std::size_t ch, std::size_t y, std::size_t x) {
  const std::size_t side = img.extent(1);
  return img[(ch * side + y) * side + x];
}

std::string detokenize(std::span<const std::size_t> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t id : ids) {
    if (id == kEotId) break;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Render, NoiselessWhiteSquareFillsItsRectangle) {
  // Large centred square on 32×32: centre 16, half-width 6.
  const Tensor img = render(spec_of(1, 4, 1, 4, 0.0), 0);
  ASSERT_EQ(img.shape(), (Shape{3, 32, 32}));
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const bool inside = x >= 10 && x <= 22 && y >= 10 && y <= 22;
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(pixel(img, ch, y, x), inside ? 1.0 : 0.0) << y << "," << x;
    }
}

TEST(Render, SmallSquareAtTopIsShiftedUp) {
  const Tensor img = render(spec_of(1, 0, 0, 0, 0.0), 3);
  // centre (16, 8), half-width 4
  EXPECT_EQ(pixel(img, 0, 4, 12), 1.0);
  EXPECT_EQ(pixel(img, 0, 12, 20), 1.0);
  EXPECT_EQ(pixel(img, 0, 13, 16), 0.0);
  EXPECT_EQ(pixel(img, 0, 3, 16), 0.0);
  EXPECT_EQ(pixel(img, 1, 8, 16), 0.0);
}

TEST(Render, DeterministicAndInRange) {
  for (std::size_t shape = 0; shape < kShapes.size(); ++shape) {
    const SampleSpec s = spec_of(shape, 2, 1, 3, 0.3);
    const Tensor a = render(s, 17), b = render(s, 17);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, render(s, 18));
    for (double v : a.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Render, ColourChangeTouchesOnlyShapePixels) {
  for (std::size_t shape = 0; shape < kShapes.size(); ++shape) {
    const SampleSpec red = spec_of(shape, 0, 1, 2, 0.25), blue = spec_of(shape, 2, 1, 2, 0.25);
    const Tensor a = render(red, 5), b = render(blue, 5);
    std::size_t changed = 0;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const bool on = covers(red, 32, long(x), long(y));
        for (std::size_t ch = 0; ch < 3; ++ch) {
          if (on) {
            EXPECT_EQ(pixel(a, ch, y, x), kColorRgb[0][ch]);
            EXPECT_EQ(pixel(b, ch, y, x), kColorRgb[2][ch]);
          } else {
            EXPECT_EQ(pixel(a, ch, y, x), pixel(b, ch, y, x));
          }
        }
        changed += on;
      }
    EXPECT_GT(changed, 10u) << kShapes[shape];
  }
}

TEST(Render, RejectsInvalidSpec) {
  EXPECT_THROW(render(spec_of(4, 0, 0, 0, 0.0), 0), ConfigError);
  EXPECT_THROW(render(spec_of(0, 0, 0, 0, 0.5), 0), ConfigError);
}

TEST(Caption, FollowsTemplate) {
  EXPECT_EQ(caption(spec_of(0, 0, 0, 0, 0.0)), "a small red circle at the top");
  EXPECT_EQ(caption(spec_of(3, 4, 1, 4, 0.1)), "a large white cross at the center");
}

TEST(Tokenize, ConstructiveExample) {
  const Vocabulary v = Vocabulary::synthetic();
  const auto ids = tokenize("a red circle", v, 8);
  const std::vector<std::size_t> expected = {v.id("a"), v.id("red"), v.id("circle"), kEotId, kPadId, kPadId, kPadId, kPadId};
  EXPECT_EQ(ids, expected);
  EXPECT_EQ(tokenize("A RED Circle", v, 8), expected);
  EXPECT_EQ(v.token(0), "<pad>");
  EXPECT_EQ(v.token(1), "<eot>");
}

TEST(Tokenize, RoundTripsEveryCaption) {
  const Vocabulary v = Vocabulary::synthetic();
  for (std::size_t k = 0; k < kNumSpecs; ++k) {
    SampleSpec s = spec_of(k / 50, (k / 10) % 5, (k / 5) % 2, k % 5, 0.0);
    const std::string c = caption(s);
    const auto ids = tokenize(c, v, 16);
    EXPECT_EQ(std::count(ids.begin(), ids.end(), kEotId), 1);
    EXPECT_EQ(detokenize(ids, v), c);
  }
}

TEST(Tokenize, Errors) {
  const Vocabulary v = Vocabulary::synthetic();
  EXPECT_THROW(tokenize("a purple circle", v, 8), ConfigError);
  // 7 words need a context of 8.
  EXPECT_NO_THROW(tokenize("a small red circle at the top", v, 8));
  EXPECT_THROW(tokenize("a small red circle at the top", v, 7), DimensionError);
}

TEST(Vocabulary, SaveLoadAndValidation) {
  const auto dir = temp_dir("vocab");
  const Vocabulary v = Vocabulary::synthetic();
  v.save(dir / "vocab.txt");
  EXPECT_EQ(Vocabulary::load(dir / "vocab.txt").tokens(), v.tokens());
  EXPECT_THROW(Vocabulary({"a", "b"}), ConfigError);
  EXPECT_THROW(Vocabulary({"<pad>", "<eot>", "a", "a"}), ConfigError);
  EXPECT_THROW(Vocabulary::load(dir / "missing.txt"), IoError);
}

TEST(SplitPlan, TestPairsAreHeldOutWholeAndKeepEveryAttributeInTrain) {
  for (std::uint64_t seed : {0u, 1u, 2u, 99u}) {
    const SplitPlan plan = plan_splits(SplitFractions{}, seed);
    EXPECT_EQ(plan.heldout_pairs.size(), 2u);
    std::set<std::size_t> train_shapes, train_colors;
    for (std::size_t p = 0; p < kNumPairs; ++p) {
      if (plan.heldout_pairs.count(p)) continue;
      train_shapes.insert(p / kColors.size());
      train_colors.insert(p % kColors.size());
    }
    EXPECT_EQ(train_shapes.size(), kShapes.size());
    EXPECT_EQ(train_colors.size(), kColors.size());
    for (std::size_t k : plan.val_combinations) EXPECT_FALSE(plan.heldout_pairs.count(k / 10));
  }
  EXPECT_THROW(plan_splits(SplitFractions{0.5, 0.1, 0.1}, 0), ConfigError);
}

TEST(BuildCorpus, ManifestDeterminismAndSplitDisjointness) {
  const auto a = temp_dir("corpus_a"), b = temp_dir("corpus_b"), c = temp_dir("corpus_c");
  const Dataset ds = build_corpus(100, SplitFractions{}, 7, a);
  build_corpus(100, SplitFractions{}, 7, b);
  build_corpus(100, SplitFractions{}, 8, c);

  const std::string manifest = slurp(a / "manifest.tsv");
  EXPECT_EQ(std::count(manifest.begin(), manifest.end(), '\n'), 101);
  EXPECT_EQ(file_hash(a / "manifest.tsv"), file_hash(b / "manifest.tsv"));
  EXPECT_NE(file_hash(a / "manifest.tsv"), file_hash(c / "manifest.tsv"));
  for (const auto& e : ds.entries) EXPECT_EQ(slurp(a / e.image_file), slurp(b / e.image_file));
  EXPECT_EQ(slurp(a / "vocab.txt"), slurp(b / "vocab.txt"));

  std::set<std::size_t> train_pairs, test_pairs, train_combos, val_combos;
  for (const auto& e : ds.entries) {
    if (e.split == Split::train) train_pairs.insert(e.spec.pair()), train_combos.insert(e.spec.combination());
    if (e.split == Split::test) test_pairs.insert(e.spec.pair());
    if (e.split == Split::val) val_combos.insert(e.spec.combination());
    EXPECT_NO_THROW(tokenize(e.caption, ds.vocab, 16));
    EXPECT_EQ(e.caption, caption(e.spec));
  }
  EXPECT_FALSE(test_pairs.empty());
  for (std::size_t p : test_pairs) EXPECT_FALSE(train_pairs.count(p));
  for (std::size_t k : val_combos) EXPECT_FALSE(train_combos.count(k));
}

TEST(BuildCorpus, LoadMatchesWhatWasBuilt) {
  const auto dir = temp_dir("corpus_load");
  const Dataset built = build_corpus(20, SplitFractions{}, 3, dir, 16);
  const Dataset loaded = load_dataset(dir);
  ASSERT_EQ(loaded.entries.size(), 20u);
  EXPECT_EQ(loaded.image_size, 16u);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(loaded.entries[i].spec, built.entries[i].spec);
    EXPECT_EQ(loaded.entries[i].split, built.entries[i].split);
    EXPECT_EQ(loaded.image(i), render(built.entries[i].spec, mix_seed(3, i), 16));
  }
  const std::vector<std::size_t> idx = {4, 2};
  const Tensor stacked = loaded.images(idx);
  EXPECT_EQ(stacked.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(stacked[0], loaded.image(4)[0]);
  EXPECT_THROW(build_corpus(9, SplitFractions{}, 0, dir), ConfigError);
  EXPECT_THROW(load_dataset(dir / "nope"), IoError);
}

TEST(BuildCorpus, AttributeFrequenciesWithinThreeSigma) {
  const std::size_t n = 10 * kNumSpecs;
  Rng rng(0);
  std::array<std::array<std::size_t, 5>, 4> counts{};
  for (std::size_t i = 0; i < n; ++i) {
    const SampleSpec s = sample_spec(rng);
    ++counts[0][s.shape];
    ++counts[1][s.color];
    ++counts[2][s.size];
    ++counts[3][s.position];
  }
  const std::array<std::size_t, 4> k = {kShapes.size(), kColors.size(), kSizes.size(), kPositions.size()};
  for (std::size_t a = 0; a < 4; ++a) {
    const double p = 1.0 / double(k[a]);
    const double sigma = std::sqrt(double(n) * p * (1 - p));
    for (std::size_t v = 0; v < k[a]; ++v) EXPECT_LE(std::abs(double(counts[a][v]) - double(n) * p), 3 * sigma);
  }
}
