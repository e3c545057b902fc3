#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "diffclip/data_synth.hpp"
#include "diffclip/encoders.hpp"
#include "diffclip/errors.hpp"
#include "diffclip/kv.hpp"

namespace diffclip {

/// side×side grid of values in [0, 1], row-major.
struct Heatmap {
  std::size_t side = 0;
  std::vector<double> values;

  double at(std::size_t row, std::size_t col) const { return values.at(row * side + col); }
};

/// Combines class-token attention over patches (one row per head, clamped at 0 and averaged)
/// with per-patch cosine similarity mapped to [0, 1], then normalises by the maximum.
/// A map with no positive mass becomes all ones.
inline Heatmap combine_heatmap(const std::vector<std::vector<double>>& head_rows, const std::vector<double>& cosine) {
  if (head_rows.empty()) throw DimensionError("heatmap: no attention heads");
  const std::size_t n = cosine.size();
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
  if (n == 0 || side * side != n) throw DimensionError("heatmap: " + std::to_string(n) + " patches is not a square grid");
  Heatmap h{side, std::vector<double>(n, 0.0)};
  for (const auto& row : head_rows) {
    if (row.size() != n) throw DimensionError("heatmap: attention row width does not match patches");
    for (std::size_t j = 0; j < n; ++j) h.values[j] += std::max(row[j], 0.0) / static_cast<double>(head_rows.size());
  }
  double mx = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    h.values[j] *= 0.5 * (1.0 + std::clamp(cosine[j], -1.0, 1.0));
    mx = std::max(mx, h.values[j]);
  }
  for (double& v : h.values) v = mx > 0.0 ? v / mx : 1.0;
  return h;
}

/// Heatmap for `image` (C×H×W) and a caption query, from the final vision layer.
inline Heatmap attention_map(const ModelWeights& w, const Tensor& image, const std::string& query, const Vocabulary& vocab) {
  const EncoderConfig& enc = w.config().vision;
  TokenBatch tokens;
  tokens.append(tokenize(query, vocab, w.config().text.context_length));
  const Tensor text = encode_texts(w, tokens);

  Tape tape(false);
  BoundModel m(tape, w, false);
  AttentionTrace trace;
  Var hidden;
  EncodeOptions opts;
  opts.final_attention = &trace;
  opts.final_hidden = &hidden;
  encode_image(m, image, opts);

  const std::size_t np = enc.num_patches();
  std::vector<std::vector<double>> rows;
  for (std::size_t hd = 0; hd < trace.num_heads; ++hd) {
    const Tensor& a = trace.weights.at(hd);  // first (only) sequence
    std::vector<double> r(np);
    for (std::size_t j = 0; j < np; ++j) r[j] = a.at(0, j + 1);
    rows.push_back(std::move(r));
  }
  // Patch tokens go through the class token's final norm and projection.
  std::vector<std::size_t> patch_rows(np);
  for (std::size_t j = 0; j < np; ++j) patch_rows[j] = j + 1;
  Var p = gather_rows(hidden, patch_rows);
  p = layer_norm(p, m.param("vision.ln_final.g"), m.param("vision.ln_final.b"));
  const Tensor proj = matmul(p, m.param("vision.proj")).value();
  std::vector<double> cosine(np);
  const std::size_t e = proj.cols();
  for (std::size_t j = 0; j < np; ++j) {
    double dot_v = 0.0, nn = 0.0;
    for (std::size_t c = 0; c < e; ++c) {
      dot_v += proj.at(j, c) * text[c];
      nn += proj.at(j, c) * proj.at(j, c);
    }
    cosine[j] = nn > 0.0 ? dot_v / std::sqrt(nn) : 0.0;
  }
  return combine_heatmap(rows, cosine);
}

inline void write_pgm(const std::filesystem::path& path, const Heatmap& h) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << h.side << ' ' << h.side << "\n255\n";
  for (double v : h.values) os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  if (!os) throw IoError("failed writing " + path.string());
}

inline void write_csv(const std::filesystem::path& path, const Heatmap& h) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (std::size_t r = 0; r < h.side; ++r) {
    for (std::size_t c = 0; c < h.side; ++c) os << (c ? "," : "") << format_double(h.at(r, c));
    os << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace diffclip
