#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "diffclip/errors.hpp"
#include "diffclip/tensor.hpp"

namespace diffclip {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// First and second moments for one parameter tensor.
struct AdamState {
  Tensor m, v;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
      throw ConfigError("AdamW: betas must lie in [0, 1)");
    }
    if (!(cfg.eps > 0.0)) throw ConfigError("AdamW: eps must be positive");
    if (cfg.weight_decay < 0.0) throw ConfigError("AdamW: weight decay must be non-negative");
  }

  const AdamWConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }
  const std::vector<AdamState>& state() const { return state_; }

  /// One update of every `params[i]` with `grads[i]`. `decay[i]` selects which tensors take
  /// weight decay; an empty mask decays all of them.
  void step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, double lr,
            const std::vector<bool>& decay = {}) {
    if (grads.size() != params.size()) throw DimensionError("AdamW: params and grads differ in count");
    if (!decay.empty() && decay.size() != params.size()) throw DimensionError("AdamW: decay mask size mismatch");
    if (state_.empty()) {
      for (const Tensor* p : params) state_.push_back({Tensor(p->shape(), 0.0), Tensor(p->shape(), 0.0)});
    }
    if (state_.size() != params.size()) throw DimensionError("AdamW: parameter count changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      AdamState& s = state_[i];
      if (g.shape() != p.shape() || s.m.shape() != p.shape()) {
        throw DimensionError("AdamW: shape mismatch at parameter " + std::to_string(i) + ": " + shape_str(p.shape()) +
                             " vs grad " + shape_str(g.shape()));
      }
      const double shrink = (decay.empty() || decay[i]) ? 1.0 - lr * cfg_.weight_decay : 1.0;
      auto pd = p.data();
      auto gd = g.data();
      auto md = s.m.data();
      auto vd = s.v.data();
      for (std::size_t j = 0; j < pd.size(); ++j) {
        md[j] = cfg_.beta1 * md[j] + (1.0 - cfg_.beta1) * gd[j];
        vd[j] = cfg_.beta2 * vd[j] + (1.0 - cfg_.beta2) * gd[j] * gd[j];
        pd[j] *= shrink;
        pd[j] -= lr * (md[j] / bc1) / (std::sqrt(vd[j] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<AdamState> state_;
  std::size_t t_ = 0;
};

/// Linear warmup over `warmup_steps` to `base_lr`, then cosine decay to 0 at `total_steps`.
inline double lr_at(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base_lr) {
  if (total_steps == 0) throw ConfigError("lr_at: total_steps must be positive");
  if (step < warmup_steps) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

inline double global_norm(const std::vector<const Tensor*>& grads) {
  double ss = 0.0;
  for (const Tensor* g : grads)
    for (double x : g->data()) ss += x * x;
  return std::sqrt(ss);
}

/// Scales every gradient by min(1, max_norm / ‖g‖). Returns the norm before clipping.
inline double clip_global_norm(std::vector<Tensor*>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
  std::vector<const Tensor*> view(grads.begin(), grads.end());
  const double norm = global_norm(view);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (Tensor* g : grads)
      for (double& x : g->data()) x *= k;
  }
  return norm;
}

}  // namespace diffclip
