#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <numeric>
#include <span>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "diffclip/errors.hpp"
#include "diffclip/kv.hpp"
#include "diffclip/random.hpp"
#include "diffclip/tensor.hpp"
#include "diffclip/tokens.hpp"

// Procedural image-caption corpus: one coloured shape over a noisy background,
// captioned "a {size} {color} {shape} at the {position}".

namespace diffclip {

inline constexpr std::array<std::string_view, 4> kShapes = {"circle", "square", "triangle", "cross"};
inline constexpr std::array<std::string_view, 5> kColors = {"red", "green", "blue", "yellow", "white"};
inline constexpr std::array<std::string_view, 2> kSizes = {"small", "large"};
inline constexpr std::array<std::string_view, 5> kPositions = {"top", "bottom", "left", "right", "center"};
inline constexpr std::array<std::array<double, 3>, 5> kColorRgb = {{
    {1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {1.0, 1.0, 0.0}, {1.0, 1.0, 1.0}}};
inline constexpr double kMaxNoise = 0.3;
inline constexpr std::size_t kNumPairs = kShapes.size() * kColors.size();
inline constexpr std::size_t kNumSpecs = kNumPairs * kSizes.size() * kPositions.size();

struct SampleSpec {
  std::size_t shape = 0;
  std::size_t color = 0;
  std::size_t size = 0;
  std::size_t position = 0;
  double noise = 0.0;

  /// (shape, color) class index in [0, 20).
  std::size_t pair() const { return shape * kColors.size() + color; }
  /// Full attribute combination index in [0, 200), ignoring noise.
  std::size_t combination() const { return (pair() * kSizes.size() + size) * kPositions.size() + position; }

  void validate() const {
    if (shape >= kShapes.size() || color >= kColors.size() || size >= kSizes.size() || position >= kPositions.size()) {
      throw ConfigError("SampleSpec: attribute index out of range");
    }
    if (!(noise >= 0.0 && noise <= kMaxNoise)) throw ConfigError("SampleSpec: noise amplitude outside [0, 0.3]");
  }
  friend bool operator==(const SampleSpec&, const SampleSpec&) = default;
};

inline std::string caption(const SampleSpec& s) {
  std::string out = "a ";
  out += kSizes[s.size];
  out += ' ';
  out += kColors[s.color];
  out += ' ';
  out += kShapes[s.shape];
  out += " at the ";
  out += kPositions[s.position];
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

struct ShapeGeometry {
  long cx = 0, cy = 0, half = 0;
};

inline ShapeGeometry shape_geometry(const SampleSpec& s, std::size_t side) {
  const long c = static_cast<long>(side / 2), off = static_cast<long>(side / 4);
  static constexpr std::array<std::array<int, 2>, 5> dir = {{{0, -1}, {0, 1}, {-1, 0}, {1, 0}, {0, 0}}};
  const long half = s.size == 0 ? static_cast<long>(side / 8) : static_cast<long>(3 * side / 16);
  return {c + dir[s.position][0] * off, c + dir[s.position][1] * off, std::max(1L, half)};
}

/// Whether pixel (x, y) is covered by the spec's shape (integer geometry, no anti-aliasing).
inline bool covers(const SampleSpec& s, std::size_t side, long x, long y) {
  const auto g = shape_geometry(s, side);
  const long dx = x - g.cx, dy = y - g.cy, r = g.half;
  switch (s.shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= r && std::abs(dy) <= r;
    case 2: return dy >= -r && dy <= r && 2 * std::abs(dx) <= dy + r;
    case 3: {
      const long t = std::max(1L, r / 3);
      return (std::abs(dx) <= t && std::abs(dy) <= r) || (std::abs(dy) <= t && std::abs(dx) <= r);
    }
  }
  return false;
}

/// 3×side×side image in [0, 1]. Background is amplitude·U(0,1) per pixel and channel,
/// drawn for every pixel before the shape is painted, so the noise field depends only on the seed.
inline Tensor render(const SampleSpec& spec, std::uint64_t seed, std::size_t side = 32) {
  spec.validate();
  Tensor img(Shape{3, side, side});
  Rng rng(seed);
  for (double& v : img.data()) v = spec.noise * uniform01(rng);
  const auto& rgb = kColorRgb[spec.color];
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      if (!covers(spec, side, static_cast<long>(x), static_cast<long>(y))) continue;
      for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * side + y) * side + x] = rgb[ch];
    }
  for (double& v : img.data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenisation

class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2 || tokens_[kPadId] != "<pad>" || tokens_[kEotId] != "<eot>") {
      throw ConfigError("vocabulary must start with <pad>, <eot>");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], i).second) throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }

  /// Fixed vocabulary covering the caption template.
  static Vocabulary synthetic() {
    std::vector<std::string> t = {"<pad>", "<eot>", "a", "at", "the"};
    for (auto w : kSizes) t.emplace_back(w);
    for (auto w : kColors) t.emplace_back(w);
    for (auto w : kShapes) t.emplace_back(w);
    for (auto w : kPositions) t.emplace_back(w);
    return Vocabulary(std::move(t));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool contains(const std::string& w) const { return ids_.count(w) != 0; }
  std::size_t id(const std::string& w) const {
    const auto it = ids_.find(w);
    if (it == ids_.end()) throw ConfigError("unknown word '" + w + "'");
    return it->second;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    for (const auto& t : tokens_) os << t << '\n';
  }
  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::vector<std::string> t;
    for (std::string line; std::getline(is, line);) t.push_back(line);
    return Vocabulary(std::move(t));
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

/// Lowercase, split on whitespace, map to ids, append EOT, pad to `context_len`.
inline std::vector<std::size_t> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t context_len) {
  std::vector<std::size_t> ids;
  std::istringstream is{std::string(text)};
  for (std::string w; is >> w;) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    ids.push_back(vocab.id(w));
  }
  if (ids.size() + 1 > context_len) {
    throw DimensionError("caption of " + std::to_string(ids.size()) + " words overflows context " +
                         std::to_string(context_len));
  }
  ids.push_back(kEotId);
  ids.resize(context_len, kPadId);
  return ids;
}

inline TokenBatch tokenize_all(const std::vector<std::string>& texts, const Vocabulary& vocab, std::size_t context_len) {
  TokenBatch b;
  b.context = context_len;
  for (const auto& t : texts) b.append(tokenize(t, vocab, context_len));
  return b;
}

// ---------------------------------------------------------------------------
// Corpus

enum class Split { train, val, test };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw IoError("unknown split '" + s + "'");
}

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetEntry {
  std::size_t id = 0;
  std::string caption;
  SampleSpec spec;
  Split split = Split::train;
  std::string image_file;
};

/// Which split each attribute combination belongs to. Test takes whole (shape, color)
/// pairs, never a shape's or color's last pair; val takes whole combinations from the rest.
struct SplitPlan {
  std::set<std::size_t> heldout_pairs;
  std::set<std::size_t> val_combinations;

  Split assign(const SampleSpec& s) const {
    if (heldout_pairs.count(s.pair())) return Split::test;
    if (val_combinations.count(s.combination())) return Split::val;
    return Split::train;
  }
};

inline SplitPlan plan_splits(const SplitFractions& f, std::uint64_t seed) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  SplitPlan plan;
  Rng rng(mix_seed(seed, 0xC0FFEE));
  std::vector<std::size_t> pairs(kNumPairs);
  std::iota(pairs.begin(), pairs.end(), std::size_t{0});
  std::shuffle(pairs.begin(), pairs.end(), rng);
  std::size_t want = static_cast<std::size_t>(std::lround(f.test * static_cast<double>(kNumPairs)));
  if (f.test > 0.0) want = std::max<std::size_t>(want, 1);
  std::array<std::size_t, kShapes.size()> shape_left{};
  std::array<std::size_t, kColors.size()> color_left{};
  shape_left.fill(kColors.size());
  color_left.fill(kShapes.size());
  for (std::size_t p : pairs) {
    if (plan.heldout_pairs.size() >= want) break;
    const std::size_t s = p / kColors.size(), c = p % kColors.size();
    if (shape_left[s] <= 1 || color_left[c] <= 1) continue;
    plan.heldout_pairs.insert(p);
    --shape_left[s];
    --color_left[c];
  }
  std::vector<std::size_t> combos;
  for (std::size_t k = 0; k < kNumSpecs; ++k) {
    if (!plan.heldout_pairs.count(k / (kSizes.size() * kPositions.size()))) combos.push_back(k);
  }
  std::shuffle(combos.begin(), combos.end(), rng);
  const double rest = f.train + f.val;
  const std::size_t n_val =
      rest > 0.0 ? static_cast<std::size_t>(std::lround(f.val / rest * static_cast<double>(combos.size()))) : 0;
  plan.val_combinations.insert(combos.begin(), combos.begin() + static_cast<std::ptrdiff_t>(std::min(n_val, combos.size())));
  return plan;
}

inline SampleSpec sample_spec(Rng& rng) {
  SampleSpec s;
  s.shape = std::uniform_int_distribution<std::size_t>(0, kShapes.size() - 1)(rng);
  s.color = std::uniform_int_distribution<std::size_t>(0, kColors.size() - 1)(rng);
  s.size = std::uniform_int_distribution<std::size_t>(0, kSizes.size() - 1)(rng);
  s.position = std::uniform_int_distribution<std::size_t>(0, kPositions.size() - 1)(rng);
  s.noise = kMaxNoise * uniform01(rng);
  return s;
}

inline constexpr std::string_view kManifestHeader = "id\tcaption\tshape\tcolor\tsize\tposition\tnoise\tsplit\timage";

struct Dataset {
  std::filesystem::path root;
  std::size_t image_size = 32;
  std::vector<DatasetEntry> entries;
  Vocabulary vocab = Vocabulary::synthetic();

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].split == s) out.push_back(i);
    return out;
  }
  Tensor image(std::size_t index) const { return load_tensor(root / entries.at(index).image_file); }

  /// Stacks the listed images into N×3×H×W.
  Tensor images(std::span<const std::size_t> idx) const {
    const std::size_t per = 3 * image_size * image_size;
    Tensor out(Shape{idx.size(), 3, image_size, image_size});
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Tensor t = image(idx[k]);
      if (t.size() != per) throw IoError("image " + entries[idx[k]].image_file + " has shape " + shape_str(t.shape()));
      std::copy(t.data().begin(), t.data().end(), out.data().begin() + k * per);
    }
    return out;
  }
};

inline std::string manifest_line(const DatasetEntry& e) {
  std::ostringstream os;
  os << e.id << '\t' << e.caption << '\t' << kShapes[e.spec.shape] << '\t' << kColors[e.spec.color] << '\t'
     << kSizes[e.spec.size] << '\t' << kPositions[e.spec.position] << '\t' << format_double(e.spec.noise) << '\t'
     << split_name(e.split) << '\t' << e.image_file;
  return os.str();
}

/// Samples `n` specs uniformly, renders them, and writes images/, manifest.tsv and vocab.txt under `out`.
inline Dataset build_corpus(std::size_t n, const SplitFractions& fractions, std::uint64_t seed,
                            const std::filesystem::path& out, std::size_t image_size = 32) {
  if (n < 10) throw ConfigError("build_corpus: need at least 10 samples");
  const SplitPlan plan = plan_splits(fractions, seed);
  std::error_code ec;
  std::filesystem::create_directories(out / "images", ec);
  if (ec) throw IoError("cannot create " + (out / "images").string() + ": " + ec.message());
  Dataset ds;
  ds.root = out;
  ds.image_size = image_size;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    DatasetEntry e;
    e.id = i;
    e.spec = sample_spec(rng);
    e.caption = caption(e.spec);
    e.split = plan.assign(e.spec);
    char name[48];
    std::snprintf(name, sizeof name, "images/%06zu.dtns", i);
    e.image_file = name;
    save_tensor(out / e.image_file, render(e.spec, mix_seed(seed, i), image_size));
    ds.entries.push_back(std::move(e));
  }
  std::ofstream os(out / "manifest.tsv", std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write manifest");
  os << kManifestHeader << '\n';
  for (const auto& e : ds.entries) os << manifest_line(e) << '\n';
  os.close();
  ds.vocab.save(out / "vocab.txt");
  return ds;
}

namespace detail {
template <std::size_t N>
std::size_t attribute_index(const std::array<std::string_view, N>& names, const std::string& v) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == v) return i;
  throw IoError("manifest: unknown attribute value '" + v + "'");
}
}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& root) {
  std::ifstream is(root / "manifest.tsv", std::ios::binary);
  if (!is) throw IoError("cannot open " + (root / "manifest.tsv").string());
  Dataset ds;
  ds.root = root;
  ds.vocab = Vocabulary::load(root / "vocab.txt");
  std::string line;
  if (!std::getline(is, line) || line != kManifestHeader) throw IoError("manifest header mismatch");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, '\t');) f.push_back(cell);
    if (f.size() != 9) throw IoError("manifest row with " + std::to_string(f.size()) + " fields");
    DatasetEntry e;
    e.id = static_cast<std::size_t>(parse_uint("id", f[0]));
    e.caption = f[1];
    e.spec.shape = detail::attribute_index(kShapes, f[2]);
    e.spec.color = detail::attribute_index(kColors, f[3]);
    e.spec.size = detail::attribute_index(kSizes, f[4]);
    e.spec.position = detail::attribute_index(kPositions, f[5]);
    e.spec.noise = parse_double("noise", f[6]);
    e.split = parse_split(f[7]);
    e.image_file = f[8];
    ds.entries.push_back(std::move(e));
  }
  if (ds.entries.empty()) throw IoError("manifest has no entries");
  ds.image_size = load_tensor(root / ds.entries[0].image_file).extent(1);
  return ds;
}

/// Prompt ensemble for the (shape, color) class `pair`: the caption template over every size and position.
inline std::vector<std::string> class_prompts(std::size_t pair) {
  std::vector<std::string> out;
  SampleSpec s;
  s.shape = pair / kColors.size();
  s.color = pair % kColors.size();
  for (s.size = 0; s.size < kSizes.size(); ++s.size)
    for (s.position = 0; s.position < kPositions.size(); ++s.position) out.push_back(caption(s));
  return out;
}

inline std::string pair_name(std::size_t pair) {
  return std::string(kColors[pair % kColors.size()]) + " " + std::string(kShapes[pair / kColors.size()]);
}

}  // namespace diffclip
