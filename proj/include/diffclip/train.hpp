#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "diffclip/data_synth.hpp"
#include "diffclip/encoders.hpp"
#include "diffclip/errors.hpp"
#include "diffclip/objective.hpp"
#include "diffclip/optim.hpp"
#include "diffclip/random.hpp"

namespace diffclip {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 5e-4;
  double weight_decay = 0.5;
  double warmup_epochs = 1.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  ModelVariant variant = ModelVariant::clip;
  std::filesystem::path checkpoint;  // empty: not written
  std::filesystem::path metrics;     // empty: not written
  bool nan_check = false;

  void validate() const {
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
    if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
    if (warmup_epochs < 0.0) throw ConfigError("train: warmup_epochs must be non-negative");
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
  }
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double tau = 0.0;
};

struct TrainResult {
  ModelWeights weights;
  std::vector<StepRecord> steps;
  std::vector<double> epoch_losses;  // mean step loss per epoch
  double probe_loss_initial = 0.0;
  double probe_loss_final = 0.0;
  double seconds = 0.0;
};

inline std::string metrics_line(const StepRecord& r) {
  return std::to_string(r.step) + '\t' + std::to_string(r.epoch) + '\t' + format_double(r.loss) + '\t' +
         format_double(r.lr) + '\t' + format_double(r.tau);
}

/// Images and token rows of one dataset split, held in memory.
struct PairedSet {
  Tensor images;  // N×C×H×W
  TokenBatch tokens;
  std::vector<std::size_t> entry;  // dataset entry index per row

  std::size_t size() const { return entry.size(); }

  Tensor image_batch(std::span<const std::size_t> rows) const {
    const Shape& s = images.shape();
    const std::size_t per = s[1] * s[2] * s[3];
    Tensor out(Shape{rows.size(), s[1], s[2], s[3]});
    for (std::size_t k = 0; k < rows.size(); ++k) {
      std::copy_n(images.data().begin() + rows[k] * per, per, out.data().begin() + k * per);
    }
    return out;
  }

  TokenBatch token_batch(std::span<const std::size_t> rows) const {
    TokenBatch b;
    for (std::size_t r : rows) b.append(tokens.row(r));
    return b;
  }
};

inline PairedSet load_split(const Dataset& ds, Split split, std::size_t context_len) {
  PairedSet p;
  p.entry = ds.indices(split);
  if (p.entry.empty()) throw ConfigError("dataset has no " + split_name(split) + " samples");
  p.images = ds.images(p.entry);
  for (std::size_t i : p.entry) p.tokens.append(tokenize(ds.entries[i].caption, ds.vocab, context_len));
  return p;
}

namespace detail {

struct LossPass {
  double loss = 0.0;
  double tau = 0.0;
};

/// Forward (and, with `grads`, backward) of the contrastive loss on one batch.
/// `grads` receives one gradient per parameter, in parameter order.
inline LossPass batch_loss(const ModelWeights& w, const Tensor& images, const TokenBatch& tokens, bool nan_check,
                           std::vector<Tensor>* grads) {
  Tape tape(grads != nullptr);
  tape.set_nan_check(nan_check);
  BoundModel m(tape, w, grads != nullptr);
  Var u = encode_image(m, images);
  Var v = encode_text(m, tokens);
  const SimilarityMatrix s = similarity_matrix_learned(u, v, m.param("logit_scale"));
  Var loss = clip_loss(s);
  LossPass out{loss.value()[0], s.temperature};
  if (!std::isfinite(out.loss) || !grads) return out;
  tape.backward(loss);
  grads->assign(w.size(), Tensor());
  for (std::size_t i = 0; i < w.size(); ++i) (*grads)[i] = Tensor(w.spec(i).shape, 0.0);
  for (const auto& [index, var] : m.bound()) (*grads)[index] = var.grad();
  return out;
}

}  // namespace detail

/// Contrastive loss of `w` on a batch, without recording gradients.
inline double evaluate_loss(const ModelWeights& w, const Tensor& images, const TokenBatch& tokens) {
  return detail::batch_loss(w, images, tokens, false, nullptr).loss;
}

/// The fixed probe batch: the first `batch_size` training rows.
inline std::vector<std::size_t> probe_rows(const PairedSet& train, std::size_t batch_size) {
  std::vector<std::size_t> rows(std::min(batch_size, train.size()));
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

/// AdamW with warmup then cosine decay on the training split. Single-threaded and
/// deterministic in (model config, train config, dataset).
inline TrainResult train(const TrainConfig& cfg, const ModelConfig& model_cfg, const PairedSet& data) {
  cfg.validate();
  model_cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t steps_per_epoch = data.size() / cfg.batch_size;
  if (steps_per_epoch == 0) {
    throw ConfigError("train: " + std::to_string(data.size()) + " training samples is fewer than one batch of " +
                      std::to_string(cfg.batch_size));
  }
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const auto warmup_steps =
      static_cast<std::size_t>(std::llround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch)));

  std::ofstream log;
  if (!cfg.metrics.empty()) {
    log.open(cfg.metrics, std::ios::binary | std::ios::trunc);
    if (!log) throw IoError("cannot open metrics log " + cfg.metrics.string());
  }

  TrainResult result;
  result.weights = build_model(model_cfg);
  ModelWeights& w = result.weights;
  const auto probe = probe_rows(data, cfg.batch_size);
  const Tensor probe_images = data.image_batch(probe);
  const TokenBatch probe_tokens = data.token_batch(probe);
  try {
    result.probe_loss_initial = evaluate_loss(w, probe_images, probe_tokens);
  } catch (const NumericError&) {
    result.probe_loss_initial = std::numeric_limits<double>::quiet_NaN();
  }

  AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<bool> decay(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) decay[i] = w.spec(i).decay;
  const std::size_t scale_index = w.index_of("logit_scale");

  std::vector<std::size_t> order(data.size());
  std::vector<Tensor> grads;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::span<const std::size_t> rows(order.data() + b * cfg.batch_size, cfg.batch_size);
      const std::string where = "step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + ")";
      detail::LossPass pass;
      try {
        pass = detail::batch_loss(w, data.image_batch(rows), data.token_batch(rows), cfg.nan_check, &grads);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at " + where);
      }
      if (!std::isfinite(pass.loss)) throw NumericError("non-finite loss at " + where);
      const double lr = lr_at(step, warmup_steps, total_steps, cfg.lr);
      std::vector<Tensor*> gp, pp;
      std::vector<const Tensor*> gc;
      for (std::size_t i = 0; i < w.size(); ++i) {
        gp.push_back(&grads[i]);
        gc.push_back(&grads[i]);
        pp.push_back(&w.tensor(i));
      }
      clip_global_norm(gp, cfg.grad_clip);
      opt.step(pp, gc, lr, decay);
      double& ls = w.tensor(scale_index)[0];
      ls = std::clamp(ls, 0.0, kLogitScaleMax);

      const StepRecord rec{step, epoch, pass.loss, lr, pass.tau};
      result.steps.push_back(rec);
      if (log) log << metrics_line(rec) << '\n';
      epoch_sum += pass.loss;
    }
    result.epoch_losses.push_back(epoch_sum / static_cast<double>(steps_per_epoch));
    if (log) log.flush();
  }
  result.probe_loss_final = evaluate_loss(w, probe_images, probe_tokens);
  if (!cfg.checkpoint.empty()) save_checkpoint(cfg.checkpoint, w);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace diffclip
