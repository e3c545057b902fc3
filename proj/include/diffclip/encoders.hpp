#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "diffclip/attention.hpp"
#include "diffclip/autodiff.hpp"
#include "diffclip/errors.hpp"
#include "diffclip/kv.hpp"
#include "diffclip/ops.hpp"
#include "diffclip/random.hpp"
#include "diffclip/tensor.hpp"
#include "diffclip/tokens.hpp"

namespace diffclip {

enum class Tower { vision, text };

/// Named model variants: baseline, differential in both towers, dynamic λ_init, vision-only differential.
enum class ModelVariant { clip, diffclip, diffclip_star, diffclip_dagger };

inline std::string variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::clip: return "clip";
    case ModelVariant::diffclip: return "diffclip";
    case ModelVariant::diffclip_star: return "diffclip-star";
    case ModelVariant::diffclip_dagger: return "diffclip-dagger";
  }
  return "?";
}

inline ModelVariant parse_variant(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  for (auto v : {ModelVariant::clip, ModelVariant::diffclip, ModelVariant::diffclip_star, ModelVariant::diffclip_dagger}) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown variant '" + s + "' (expected clip|diffclip|diffclip-star|diffclip-dagger)");
}

struct EncoderConfig {
  Tower tower = Tower::vision;
  std::size_t depth = 4;
  std::size_t model_dim = 128;
  std::size_t num_heads = 4;
  double mlp_ratio = 2.0;
  AttentionVariant attention_variant = AttentionVariant::standard;
  LambdaInit lambda_init{};
  LambdaSharing lambda_sharing = LambdaSharing::per_layer;
  bool head_norm = false;
  // vision
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  // text
  std::size_t vocab_size = 0;
  std::size_t context_length = 16;

  std::string prefix() const { return tower == Tower::vision ? "vision" : "text"; }
  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  /// Tokens per sequence: class token + patches, or the text context.
  std::size_t seq_len() const { return tower == Tower::vision ? num_patches() + 1 : context_length; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(model_dim))); }

  AttentionConfig attention(std::size_t layer) const {
    return AttentionConfig{model_dim, num_heads, attention_variant, lambda_init, layer, lambda_sharing, head_norm};
  }

  void validate() const {
    if (depth == 0) throw ConfigError(prefix() + ": depth must be positive");
    if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw ConfigError(prefix() + ": mlp_ratio must be positive");
    for (std::size_t l = 1; l <= depth; ++l) attention(l).validate();
    if (tower == Tower::vision) {
      if (channels == 0 || patch_size == 0 || image_size == 0) throw ConfigError("vision: image geometry must be positive");
      if (image_size % patch_size != 0) {
        throw ConfigError("vision: image side " + std::to_string(image_size) + " not divisible by patch " +
                          std::to_string(patch_size));
      }
    } else {
      if (context_length < 2) throw ConfigError("text: context length must be at least 2");
      if (vocab_size < 2) throw ConfigError("text: vocab must hold at least PAD and EOT");
    }
  }
};

struct ModelConfig {
  EncoderConfig vision;
  EncoderConfig text{.tower = Tower::text};
  std::size_t embed_dim = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (vision.tower != Tower::vision || text.tower != Tower::text) throw ConfigError("model: tower kinds swapped");
    vision.validate();
    text.validate();
    if (embed_dim == 0) throw ConfigError("model: embed_dim must be positive");
  }
};

// ---------------------------------------------------------------------------
// Presets

inline EncoderConfig toy_vision_config() { return EncoderConfig{}; }

inline EncoderConfig toy_text_config(std::size_t vocab_size) {
  EncoderConfig c;
  c.tower = Tower::text;
  c.vocab_size = vocab_size;
  c.context_length = 16;
  return c;
}

/// ViT-B/16 image tower (224², patch 16, d=768, 12 layers, 12 heads). Audit only.
inline EncoderConfig b16_vision_config() {
  EncoderConfig c;
  c.depth = 12;
  c.model_dim = 768;
  c.num_heads = 12;
  c.mlp_ratio = 4.0;
  c.image_size = 224;
  c.patch_size = 16;
  return c;
}

/// CLIP-B/16 text tower (d=512, 12 layers, 8 heads, context 77, BPE vocab 49408). Audit only.
inline EncoderConfig b16_text_config() {
  EncoderConfig c;
  c.tower = Tower::text;
  c.depth = 12;
  c.model_dim = 512;
  c.num_heads = 8;
  c.mlp_ratio = 4.0;
  c.vocab_size = 49408;
  c.context_length = 77;
  return c;
}

inline void apply_variant(ModelConfig& cfg, ModelVariant v, double lambda_init = 0.8) {
  const auto set = [&](EncoderConfig& e, bool differential, LambdaInit init) {
    e.attention_variant = differential ? AttentionVariant::differential : AttentionVariant::standard;
    e.lambda_init = init;
  };
  const LambdaInit constant = LambdaInit::constant(lambda_init);
  switch (v) {
    case ModelVariant::clip:
      set(cfg.vision, false, constant);
      set(cfg.text, false, constant);
      break;
    case ModelVariant::diffclip:
      set(cfg.vision, true, constant);
      set(cfg.text, true, constant);
      break;
    case ModelVariant::diffclip_star:
      set(cfg.vision, true, LambdaInit::dynamic());
      set(cfg.text, true, LambdaInit::dynamic());
      break;
    case ModelVariant::diffclip_dagger:
      set(cfg.vision, true, constant);
      set(cfg.text, false, constant);
      break;
  }
}

inline ModelConfig toy_model_config(std::size_t vocab_size, ModelVariant v = ModelVariant::clip) {
  ModelConfig c{toy_vision_config(), toy_text_config(vocab_size), 64, 0};
  apply_variant(c, v);
  return c;
}

/// Training-size model: the toy geometry at half width (d=64, 4 layers, 4 heads, embed 64).
inline ModelConfig desk_model_config(std::size_t vocab_size, ModelVariant v = ModelVariant::clip) {
  ModelConfig c = toy_model_config(vocab_size, v);
  c.vision.model_dim = 64;
  c.text.model_dim = 64;
  return c;
}

inline ModelConfig b16_model_config(ModelVariant v = ModelVariant::clip) {
  ModelConfig c{b16_vision_config(), b16_text_config(), 512, 0};
  apply_variant(c, v);
  return c;
}

// ---------------------------------------------------------------------------
// Parameter enumeration

enum class ParamInit { normal, zeros, ones, logit_scale };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamInit init = ParamInit::normal;
  bool decay = false;  // matrices take weight decay; vectors (biases, gains, λ, scale) do not
  std::size_t numel() const { return shape_numel(shape); }
};

inline constexpr double kInitStd = 0.02;
inline const double kLogitScaleInit = std::log(1.0 / 0.07);
inline const double kLogitScaleMax = std::log(100.0);  // τ >= 0.01

inline std::string layer_prefix(const EncoderConfig& enc, std::size_t layer) {
  return enc.prefix() + ".layer" + std::to_string(layer) + ".";
}

inline std::vector<std::string> lambda_names(const EncoderConfig& enc, std::size_t layer, std::size_t group) {
  std::string base = layer_prefix(enc, layer) + "attn.";
  if (enc.lambda_sharing == LambdaSharing::per_head) base += "head" + std::to_string(group) + ".";
  return {base + "lq1", base + "lk1", base + "lq2", base + "lk2"};
}

inline void append_tower_specs(std::vector<ParamSpec>& out, const EncoderConfig& enc, std::size_t embed_dim) {
  const std::string p = enc.prefix() + ".";
  const std::size_t d = enc.model_dim;
  const auto mat = [&](std::string name, std::size_t r, std::size_t c) {
    out.push_back({std::move(name), Shape{r, c}, ParamInit::normal, true});
  };
  const auto vec = [&](std::string name, std::size_t n, ParamInit init) {
    out.push_back({std::move(name), Shape{n}, init, false});
  };
  if (enc.tower == Tower::vision) {
    mat(p + "patch.w", enc.patch_dim(), d);
    vec(p + "patch.b", d, ParamInit::zeros);
    mat(p + "cls", 1, d);
    mat(p + "pos", enc.seq_len(), d);
  } else {
    mat(p + "token_embed", enc.vocab_size, d);
    mat(p + "pos", enc.context_length, d);
  }
  for (std::size_t l = 1; l <= enc.depth; ++l) {
    const std::string lp = layer_prefix(enc, l);
    vec(lp + "ln1.g", d, ParamInit::ones);
    vec(lp + "ln1.b", d, ParamInit::zeros);
    mat(lp + "attn.wq", d, d);
    mat(lp + "attn.wk", d, d);
    mat(lp + "attn.wv", d, d);
    mat(lp + "attn.wo", d, d);
    const AttentionConfig ac = enc.attention(l);
    for (std::size_t g = 0; g < ac.lambda_groups(); ++g) {
      for (auto& n : lambda_names(enc, l, g)) vec(std::move(n), ac.lambda_dim(), ParamInit::zeros);
    }
    vec(lp + "ln2.g", d, ParamInit::ones);
    vec(lp + "ln2.b", d, ParamInit::zeros);
    mat(lp + "mlp.w1", d, enc.mlp_hidden());
    vec(lp + "mlp.b1", enc.mlp_hidden(), ParamInit::zeros);
    mat(lp + "mlp.w2", enc.mlp_hidden(), d);
    vec(lp + "mlp.b2", d, ParamInit::zeros);
  }
  vec(p + "ln_final.g", d, ParamInit::ones);
  vec(p + "ln_final.b", d, ParamInit::zeros);
  mat(p + "proj", d, embed_dim);
}

/// Every named parameter of the dual encoder, in checkpoint order. Allocation-free,
/// so it is usable for B/16 shapes.
inline std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  append_tower_specs(out, cfg.vision, cfg.embed_dim);
  append_tower_specs(out, cfg.text, cfg.embed_dim);
  out.push_back({"logit_scale", Shape{1}, ParamInit::logit_scale, false});
  return out;
}

class ModelWeights {
 public:
  ModelWeights() = default;
  ModelWeights(ModelConfig cfg, std::vector<ParamSpec> specs, std::vector<Tensor> tensors)
      : config_(std::move(cfg)), specs_(std::move(specs)), tensors_(std::move(tensors)) {
    if (specs_.size() != tensors_.size()) throw DimensionError("ModelWeights: spec/tensor count mismatch");
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      if (tensors_[i].shape() != specs_[i].shape) {
        throw DimensionError("ModelWeights: " + specs_[i].name + " has shape " + shape_str(tensors_[i].shape()) +
                             ", expected " + shape_str(specs_[i].shape));
      }
      if (!index_.emplace(specs_[i].name, i).second) throw ConfigError("ModelWeights: duplicate name " + specs_[i].name);
    }
  }

  const ModelConfig& config() const { return config_; }
  std::size_t size() const { return tensors_.size(); }
  const ParamSpec& spec(std::size_t i) const { return specs_.at(i); }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  const Tensor& tensor(std::size_t i) const { return tensors_.at(i); }
  Tensor& tensor(std::size_t i) { return tensors_.at(i); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const { return tensors_[index_of(name)]; }
  Tensor& at(const std::string& name) { return tensors_[index_of(name)]; }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  friend bool operator==(const ModelWeights& a, const ModelWeights& b) {
    if (a.specs_.size() != b.specs_.size()) return false;
    for (std::size_t i = 0; i < a.specs_.size(); ++i) {
      if (a.specs_[i].name != b.specs_[i].name || !(a.tensors_[i] == b.tensors_[i])) return false;
    }
    return true;
  }

 private:
  ModelConfig config_;
  std::vector<ParamSpec> specs_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Deterministic initialisation: truncated normal (σ = 0.02) matrices, zero biases and λ
/// vectors (so λ starts at λ_init exactly), unit gains, logit scale ln(1/0.07).
/// Each parameter draws from its own stream seeded by (seed, index).
inline ModelWeights build_model(const ModelConfig& cfg) {
  auto specs = parameter_specs(cfg);
  std::vector<Tensor> tensors;
  tensors.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const ParamSpec& s = specs[i];
    Tensor t(s.shape);
    switch (s.init) {
      case ParamInit::normal: {
        Rng rng(mix_seed(cfg.seed, i));
        for (double& v : t.data()) v = truncated_normal(rng, kInitStd);
        break;
      }
      case ParamInit::zeros: break;
      case ParamInit::ones: t.fill(1.0); break;
      case ParamInit::logit_scale: t.fill(kLogitScaleInit); break;
    }
    tensors.push_back(std::move(t));
  }
  return ModelWeights(cfg, std::move(specs), std::move(tensors));
}

inline ModelWeights build_model(const EncoderConfig& image_cfg, const EncoderConfig& text_cfg, std::size_t embed_dim,
                                std::uint64_t seed) {
  return build_model(ModelConfig{image_cfg, text_cfg, embed_dim, seed});
}

/// λ parameters of one attention layer as values.
inline std::vector<LambdaParams> lambda_params(const ModelWeights& w, const EncoderConfig& enc, std::size_t layer) {
  const AttentionConfig ac = enc.attention(layer);
  std::vector<LambdaParams> out;
  for (std::size_t g = 0; g < ac.lambda_groups(); ++g) {
    const auto n = lambda_names(enc, layer, g);
    out.push_back({w.at(n[0]), w.at(n[1]), w.at(n[2]), w.at(n[3]), ac.resolved_lambda_init()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binding weights onto a tape

/// Binds parameters of a ModelWeights onto a Tape on first use.
class BoundModel {
 public:
  BoundModel(Tape& tape, const ModelWeights& w, bool trainable) : tape_(tape), weights_(w), trainable_(trainable) {}

  Var param(const std::string& name) {
    const std::size_t i = weights_.index_of(name);
    if (const auto it = cache_.find(i); it != cache_.end()) return it->second;
    Var v = tape_.leaf(weights_.tensor(i), trainable_);
    cache_.emplace(i, v);
    bound_.emplace_back(i, v);
    return v;
  }

  AttentionVars attention(const EncoderConfig& enc, std::size_t layer) {
    const std::string lp = layer_prefix(enc, layer) + "attn.";
    AttentionVars a{param(lp + "wq"), param(lp + "wk"), param(lp + "wv"), param(lp + "wo"), {}};
    const AttentionConfig ac = enc.attention(layer);
    for (std::size_t g = 0; g < ac.lambda_groups(); ++g) {
      const auto n = lambda_names(enc, layer, g);
      a.lambdas.push_back({param(n[0]), param(n[1]), param(n[2]), param(n[3]), ac.resolved_lambda_init()});
    }
    return a;
  }

  Tape& tape() { return tape_; }
  const ModelWeights& weights() const { return weights_; }
  /// (parameter index, Var) for every parameter bound so far, in binding order.
  const std::vector<std::pair<std::size_t, Var>>& bound() const { return bound_; }

 private:
  Tape& tape_;
  const ModelWeights& weights_;
  bool trainable_;
  std::unordered_map<std::size_t, Var> cache_;
  std::vector<std::pair<std::size_t, Var>> bound_;
};

// ---------------------------------------------------------------------------
// Forward passes

/// C×H×W image to (H/p · W/p) × (C·p²) patches, raster order; each patch is its C×p×p block flattened row-major.
inline Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) throw DimensionError("patchify: expected C×H×W, got " + shape_str(image.shape()));
  const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: image " + shape_str(image.shape()) + " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t ph = h / patch, pw = w / patch, pd = c * patch * patch;
  Tensor out(Shape{ph * pw, pd});
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px) {
      double* dst = &out.data()[(py * pw + px) * pd];
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            *dst++ = image[(ch * h + py * patch + y) * w + px * patch + x];
    }
  return out;
}

/// Extra inputs/outputs for instrumenting an encoder pass.
struct EncodeOptions {
  double feature_scale = 1.0;                // multiplies features right before L2 normalisation
  AttentionTrace* final_attention = nullptr;  // receives the last layer's per-head weights
  Var* final_hidden = nullptr;                // receives the last block's output, (N·T)×d
};

inline Var transformer_block(BoundModel& m, const EncoderConfig& enc, std::size_t layer, Var x, bool causal,
                             AttentionTrace* trace) {
  const std::string lp = layer_prefix(enc, layer);
  Var a = layer_norm(x, m.param(lp + "ln1.g"), m.param(lp + "ln1.b"));
  x = add(x, multi_head_attention(a, enc.seq_len(), m.attention(enc, layer), enc.attention(layer), causal, trace));
  Var f = layer_norm(x, m.param(lp + "ln2.g"), m.param(lp + "ln2.b"));
  f = gelu(add_row(matmul(f, m.param(lp + "mlp.w1")), m.param(lp + "mlp.b1")));
  f = add_row(matmul(f, m.param(lp + "mlp.w2")), m.param(lp + "mlp.b2"));
  return add(x, f);
}

namespace detail {

inline Var run_tower(BoundModel& m, const EncoderConfig& enc, Var x, bool causal, std::span<const std::size_t> pool_rows,
                     const EncodeOptions& opts) {
  for (std::size_t l = 1; l <= enc.depth; ++l) {
    x = transformer_block(m, enc, l, x, causal, l == enc.depth ? opts.final_attention : nullptr);
  }
  if (opts.final_hidden) *opts.final_hidden = x;
  const std::string p = enc.prefix() + ".";
  Var pooled = gather_rows(x, pool_rows);
  pooled = layer_norm(pooled, m.param(p + "ln_final.g"), m.param(p + "ln_final.b"));
  Var feats = matmul(pooled, m.param(p + "proj"));
  if (opts.feature_scale != 1.0) feats = scale(feats, opts.feature_scale);
  return l2_normalize(feats, 1);
}

inline std::vector<std::size_t> tiled_positions(std::size_t count, std::size_t seq_len) {
  std::vector<std::size_t> idx(count * seq_len);
  for (std::size_t b = 0; b < count; ++b)
    for (std::size_t t = 0; t < seq_len; ++t) idx[b * seq_len + t] = t;
  return idx;
}

}  // namespace detail

/// Image embeddings u = f(I)/‖f(I)‖ for a stack of images N×C×H×W (or a single C×H×W).
inline Var encode_image(BoundModel& m, const Tensor& images, const EncodeOptions& opts = {}) {
  const EncoderConfig& enc = m.weights().config().vision;
  const Shape& s = images.shape();
  const bool single = s.size() == 3;
  if (!(single || s.size() == 4)) throw DimensionError("encode_image: expected N×C×H×W, got " + shape_str(s));
  const std::size_t n = single ? 1 : s[0];
  const Shape img{enc.channels, enc.image_size, enc.image_size};
  if (!std::equal(img.begin(), img.end(), s.end() - 3)) {
    throw DimensionError("encode_image: image shape " + shape_str(s) + " does not match config " + shape_str(img));
  }
  const std::size_t per_image = shape_numel(img);
  const std::size_t np = enc.num_patches(), pd = enc.patch_dim();
  Tensor patches(Shape{n * np, pd});
  for (std::size_t b = 0; b < n; ++b) {
    Tensor one(img, std::vector<double>(images.data().begin() + b * per_image, images.data().begin() + (b + 1) * per_image));
    Tensor p = patchify(one, enc.patch_size);
    std::copy(p.data().begin(), p.data().end(), patches.data().begin() + b * np * pd);
  }
  Tape& tape = m.tape();
  const std::string p = "vision.";
  Var emb = add_row(matmul(tape.constant(std::move(patches)), m.param(p + "patch.w")), m.param(p + "patch.b"));
  // Row 0 of the table is the class token; patch rows follow.
  Var table = concat({m.param(p + "cls"), emb}, 0);
  const std::size_t seq = enc.seq_len();
  std::vector<std::size_t> order(n * seq);
  std::vector<std::size_t> pool(n);
  for (std::size_t b = 0; b < n; ++b) {
    order[b * seq] = 0;
    for (std::size_t t = 1; t < seq; ++t) order[b * seq + t] = 1 + b * np + (t - 1);
    pool[b] = b * seq;
  }
  Var x = add(gather_rows(table, order), gather_rows(m.param(p + "pos"), detail::tiled_positions(n, seq)));
  return detail::run_tower(m, enc, x, false, pool, opts);
}

/// Position of the first EOT in a token row; throws if absent.
inline std::size_t eot_position(std::span<const std::size_t> row) {
  const auto it = std::find(row.begin(), row.end(), kEotId);
  if (it == row.end()) throw ConfigError("token row has no EOT");
  return static_cast<std::size_t>(it - row.begin());
}

/// Text embeddings v = g(T)/‖g(T)‖, pooled at each row's EOT under a causal mask.
inline Var encode_text(BoundModel& m, const TokenBatch& tokens, const EncodeOptions& opts = {}) {
  const EncoderConfig& enc = m.weights().config().text;
  if (tokens.count == 0) throw DimensionError("encode_text: empty batch");
  if (tokens.context != enc.context_length) {
    throw DimensionError("encode_text: context " + std::to_string(tokens.context) + " does not match config " +
                         std::to_string(enc.context_length));
  }
  for (std::size_t id : tokens.ids) {
    if (id >= enc.vocab_size) throw ConfigError("encode_text: token id " + std::to_string(id) + " outside vocabulary");
  }
  const std::size_t n = tokens.count, seq = enc.context_length;
  std::vector<std::size_t> pool(n);
  for (std::size_t b = 0; b < n; ++b) pool[b] = b * seq + eot_position(tokens.row(b));
  const std::string p = "text.";
  Var x = add(gather_rows(m.param(p + "token_embed"), tokens.ids),
              gather_rows(m.param(p + "pos"), detail::tiled_positions(n, seq)));
  return detail::run_tower(m, enc, x, true, pool, opts);
}

/// Value-only conveniences (no gradient recording).
inline Tensor encode_images(const ModelWeights& w, const Tensor& images) {
  Tape tape(false);
  BoundModel m(tape, w, false);
  return encode_image(m, images).value();
}

inline Tensor encode_texts(const ModelWeights& w, const TokenBatch& tokens) {
  Tape tape(false);
  BoundModel m(tape, w, false);
  return encode_text(m, tokens).value();
}

// ---------------------------------------------------------------------------
// Config text and checkpoints

inline std::string lambda_init_str(const LambdaInit& li) {
  return li.mode == LambdaInit::Mode::dynamic ? "dynamic" : format_double(li.value);
}

inline LambdaInit parse_lambda_init(const std::string& key, const std::string& s) {
  return s == "dynamic" ? LambdaInit::dynamic() : LambdaInit::constant(parse_double(key, s));
}

inline void encoder_to_kv(const EncoderConfig& e, KeyValues& kv) {
  const std::string p = e.prefix() + ".";
  kv[p + "depth"] = std::to_string(e.depth);
  kv[p + "dim"] = std::to_string(e.model_dim);
  kv[p + "heads"] = std::to_string(e.num_heads);
  kv[p + "mlp_ratio"] = format_double(e.mlp_ratio);
  kv[p + "attention"] = e.attention_variant == AttentionVariant::differential ? "differential" : "standard";
  kv[p + "lambda_init"] = lambda_init_str(e.lambda_init);
  kv[p + "lambda_sharing"] = e.lambda_sharing == LambdaSharing::per_head ? "per_head" : "per_layer";
  kv[p + "head_norm"] = e.head_norm ? "true" : "false";
  if (e.tower == Tower::vision) {
    kv[p + "channels"] = std::to_string(e.channels);
    kv[p + "image_size"] = std::to_string(e.image_size);
    kv[p + "patch_size"] = std::to_string(e.patch_size);
  } else {
    kv[p + "vocab_size"] = std::to_string(e.vocab_size);
    kv[p + "context_length"] = std::to_string(e.context_length);
  }
}

inline KeyValues model_config_to_kv(const ModelConfig& c) {
  KeyValues kv;
  encoder_to_kv(c.vision, kv);
  encoder_to_kv(c.text, kv);
  kv["embed_dim"] = std::to_string(c.embed_dim);
  kv["seed"] = std::to_string(c.seed);
  return kv;
}

/// Applies one model key; returns false if the key is not a model key.
inline bool apply_model_key(ModelConfig& c, const std::string& key, const std::string& value) {
  if (key == "embed_dim") return c.embed_dim = parse_uint(key, value), true;
  if (key == "seed") return c.seed = parse_uint(key, value), true;
  const auto dot_pos = key.find('.');
  if (dot_pos == std::string::npos) return false;
  const std::string tower = key.substr(0, dot_pos), field = key.substr(dot_pos + 1);
  EncoderConfig* e = tower == "vision" ? &c.vision : tower == "text" ? &c.text : nullptr;
  if (!e) return false;
  if (field == "depth") e->depth = parse_uint(key, value);
  else if (field == "dim") e->model_dim = parse_uint(key, value);
  else if (field == "heads") e->num_heads = parse_uint(key, value);
  else if (field == "mlp_ratio") e->mlp_ratio = parse_double(key, value);
  else if (field == "attention") {
    if (value == "differential") e->attention_variant = AttentionVariant::differential;
    else if (value == "standard") e->attention_variant = AttentionVariant::standard;
    else throw ConfigError(key + ": expected standard|differential, got '" + value + "'");
  } else if (field == "lambda_init") e->lambda_init = parse_lambda_init(key, value);
  else if (field == "lambda_sharing") {
    if (value == "per_head") e->lambda_sharing = LambdaSharing::per_head;
    else if (value == "per_layer") e->lambda_sharing = LambdaSharing::per_layer;
    else throw ConfigError(key + ": expected per_layer|per_head, got '" + value + "'");
  } else if (field == "head_norm") e->head_norm = parse_bool(key, value);
  else if (tower == "vision" && field == "channels") e->channels = parse_uint(key, value);
  else if (tower == "vision" && field == "image_size") e->image_size = parse_uint(key, value);
  else if (tower == "vision" && field == "patch_size") e->patch_size = parse_uint(key, value);
  else if (tower == "text" && field == "vocab_size") e->vocab_size = parse_uint(key, value);
  else if (tower == "text" && field == "context_length") e->context_length = parse_uint(key, value);
  else return false;
  return true;
}

inline ModelConfig model_config_from_kv(const KeyValues& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv) {
    if (!apply_model_key(c, k, v)) throw ConfigError("unknown model config key '" + k + "'");
  }
  c.validate();
  return c;
}

inline constexpr char kCheckpointMagic[8] = {'D', 'F', 'C', 'L', 'I', 'P', '0', '1'};
inline const std::string kConfigEntry = "__config__";

/// "DFCLIP01", u32 entry count, then per entry u16 name length, UTF-8 name, DTNS record.
/// The first entry carries the model config text, one byte per element.
inline void write_checkpoint(std::ostream& os, const ModelWeights& w) {
  os.write(kCheckpointMagic, 8);
  detail::put_le(os, w.size() + 1, 4);
  const auto entry = [&](const std::string& name, const Tensor& t) {
    if (name.size() > 0xFFFF) throw IoError("checkpoint entry name too long");
    detail::put_le(os, name.size(), 2);
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  };
  const std::string meta = format_key_values(model_config_to_kv(w.config()));
  std::vector<double> bytes(meta.begin(), meta.end());
  for (auto& b : bytes) b = static_cast<unsigned char>(static_cast<char>(b));
  const Shape meta_shape{bytes.size()};
  entry(kConfigEntry, Tensor(meta_shape, std::move(bytes)));
  for (std::size_t i = 0; i < w.size(); ++i) entry(w.spec(i).name, w.tensor(i));
  if (!os) throw IoError("failed writing checkpoint");
}

inline ModelWeights read_checkpoint(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || !std::equal(magic, magic + 8, kCheckpointMagic)) throw IoError("bad checkpoint magic");
  const auto count = static_cast<std::size_t>(detail::get_le(is, 4));
  std::vector<std::pair<std::string, Tensor>> entries;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name(static_cast<std::size_t>(detail::get_le(is, 2)), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (!is) throw IoError("truncated checkpoint entry name");
    entries.emplace_back(std::move(name), read_tensor(is));
  }
  if (entries.empty() || entries[0].first != kConfigEntry) throw IoError("checkpoint lacks config entry");
  std::string meta;
  for (double b : entries[0].second.data()) meta.push_back(static_cast<char>(static_cast<unsigned char>(b)));
  const ModelConfig cfg = model_config_from_kv(parse_key_values(meta));
  auto specs = parameter_specs(cfg);
  if (entries.size() != specs.size() + 1) throw IoError("checkpoint entry count does not match its config");
  std::vector<Tensor> tensors;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (entries[i + 1].first != specs[i].name) {
      throw IoError("checkpoint entry '" + entries[i + 1].first + "' where '" + specs[i].name + "' was expected");
    }
    tensors.push_back(std::move(entries[i + 1].second));
  }
  return ModelWeights(cfg, std::move(specs), std::move(tensors));
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelWeights& w) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, w);
}

inline ModelWeights load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace diffclip
