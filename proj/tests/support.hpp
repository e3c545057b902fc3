#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "diffclip/diffclip.hpp"

namespace diffclip::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data()) v = d(rng);
  return t;
}

/// Random rows of unit L2 norm.
inline Tensor random_unit_rows(std::size_t n, std::size_t e, Rng& rng) {
  Tensor t = random_tensor(Shape{n, e}, rng);
  return normalize_rows(std::move(t));
}

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

inline double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value()[0];
}

/// Largest relative error between reverse-mode gradients and central differences over all inputs.
inline double gradient_error(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-5) {
  Tape tape;
  tape.set_nan_check(true);
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  Var loss = f(tape, vars);
  tape.backward(loss);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = vars[k].grad();
    Tensor numeric(inputs[k].shape(), 0.0);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x = inputs[k][i];
      inputs[k][i] = x + h;
      const double up = evaluate(f, inputs);
      inputs[k][i] = x - h;
      const double down = evaluate(f, inputs);
      inputs[k][i] = x;
      numeric[i] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

/// Reduces any tensor-valued op to a scalar with fixed random weights so every output entry matters.
inline Var weighted_sum(Var out, std::uint64_t seed = 99) {
  Rng rng(seed);
  Var w = out.tape().constant(random_tensor(out.shape(), rng));
  return sum(mul(out, w));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("diffclip_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Small model shapes for fast end-to-end checks.
inline ModelConfig tiny_model_config(ModelVariant v = ModelVariant::diffclip, std::size_t depth = 2, std::size_t dim = 16) {
  ModelConfig c = toy_model_config(Vocabulary::synthetic().size(), v);
  for (EncoderConfig* e : {&c.vision, &c.text}) {
    e->depth = depth;
    e->model_dim = dim;
    e->num_heads = 2;
  }
  c.vision.image_size = 8;
  c.vision.patch_size = 4;
  c.text.context_length = 8;
  c.embed_dim = 8;
  return c;
}

}  // namespace diffclip::testing
