#include <gtest/gtest.h>

#include <algorithm>

#include "oracles.hpp"
#include "support.hpp"

using namespace diffclip;
using namespace diffclip::testing;

namespace {

AttentionConfig config(std::size_t d, std::size_t h, AttentionVariant v,
                       LambdaSharing sharing = LambdaSharing::per_head) {
  AttentionConfig c;
  c.model_dim = d;
  c.num_heads = h;
  c.variant = v;
  c.lambda_sharing = sharing;
  return c;
}

AttentionWeights random_weights(const AttentionConfig& c, Rng& rng, double lambda_scale = 0.3) {
  const std::size_t d = c.model_dim;
  AttentionWeights w{random_tensor(Shape{d, d}, rng), random_tensor(Shape{d, d}, rng), random_tensor(Shape{d, d}, rng),
                     random_tensor(Shape{d, d}, rng), {}};
  for (std::size_t g = 0; g < c.lambda_groups(); ++g) {
    const Shape s{c.lambda_dim()};
    w.lambdas.push_back({random_tensor(s, rng, -lambda_scale, lambda_scale), random_tensor(s, rng, -lambda_scale, lambda_scale),
                         random_tensor(s, rng, -lambda_scale, lambda_scale), random_tensor(s, rng, -lambda_scale, lambda_scale),
                         c.resolved_lambda_init()});
  }
  return w;
}

std::vector<double> lambdas_of(const AttentionWeights& w) {
  std::vector<double> out;
  for (const auto& p : w.lambdas) out.push_back(compute_lambda(p));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// λ

TEST(Lambda, ZeroVectorsGiveLambdaInit) {
  const Tensor z(Shape{4}, 0.0);
  EXPECT_EQ(compute_lambda(LambdaParams{z, z, z, z, 0.8}), 0.8);
  EXPECT_EQ(compute_lambda(LambdaParams{z, z, z, z, 0.35}), 0.35);
}

TEST(Lambda, ClosedFormWithLnTwo) {
  const Tensor q1 = Tensor::vector({std::log(2.0), 0.0}), k1 = Tensor::vector({1.0, 5.0});
  const Tensor z(Shape{2}, 0.0);
  EXPECT_NEAR(compute_lambda(LambdaParams{q1, k1, z, z, 0.8}), 1.8, 1e-15);
}

TEST(Lambda, OverflowGuardAndShapeChecks) {
  const Tensor big(Shape{2}, 20.0), one(Shape{2}, 1.0), z(Shape{2}, 0.0);
  EXPECT_THROW(compute_lambda(LambdaParams{big, big, z, z, 0.8}), NumericError);  // dot = 800
  EXPECT_THROW(compute_lambda(LambdaParams{z, z, big, big, 0.8}), NumericError);
  EXPECT_NO_THROW(compute_lambda(LambdaParams{big, one, z, z, 0.8}));  // dot = 40
  EXPECT_THROW(compute_lambda(LambdaParams{Tensor(Shape{3}, 0.0), z, z, z, 0.8}), DimensionError);
  Tape tape;
  EXPECT_THROW(compute_lambda(LambdaVars{tape.parameter(big), tape.parameter(big), tape.parameter(z), tape.parameter(z), 0.8}),
               NumericError);
}

TEST(Lambda, PermutationCovariant) {
  Rng rng(11);
  const Tensor q1 = random_tensor(Shape{6}, rng), k1 = random_tensor(Shape{6}, rng);
  const Tensor q2 = random_tensor(Shape{6}, rng), k2 = random_tensor(Shape{6}, rng);
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor pq(Shape{6}), pk(Shape{6});
  for (std::size_t i = 0; i < 6; ++i) {
    pq[i] = q1[perm[i]];
    pk[i] = k1[perm[i]];
  }
  EXPECT_NEAR(compute_lambda(LambdaParams{q1, k1, q2, k2, 0.8}), compute_lambda(LambdaParams{pq, pk, q2, k2, 0.8}), 1e-14);
}

TEST(Lambda, TapeVersionMatchesValueAndGradient) {
  Rng rng(12);
  std::vector<Tensor> in;
  for (int i = 0; i < 4; ++i) in.push_back(random_tensor(Shape{3}, rng));
  const LambdaParams p{in[0], in[1], in[2], in[3], 0.8};
  Tape tape;
  const LambdaVars lv{tape.parameter(in[0]), tape.parameter(in[1]), tape.parameter(in[2]), tape.parameter(in[3]), 0.8};
  EXPECT_NEAR(compute_lambda(lv).value()[0], compute_lambda(p), 1e-15);
  const ScalarFn f = [](Tape&, const std::vector<Var>& v) { return compute_lambda(LambdaVars{v[0], v[1], v[2], v[3], 0.8}); };
  EXPECT_LT(gradient_error(f, in), 1e-5);
}

TEST(LambdaSchedule, ClosedFormAndLimits) {
  EXPECT_NEAR(lambda_init_schedule(1), 0.8 - 0.6 * std::exp(-0.3), 1e-15);
  EXPECT_NEAR(lambda_init_schedule(1), 0.35551, 1e-5);
  EXPECT_NEAR(lambda_init_schedule(12), 0.78360, 1e-5);
  EXPECT_NEAR(lambda_init_schedule(1000), 0.8, 1e-15);
  EXPECT_THROW(lambda_init_schedule(0), ConfigError);
  for (std::size_t l = 1; l < 24; ++l) EXPECT_LT(lambda_init_schedule(l), lambda_init_schedule(l + 1));
}

// ---------------------------------------------------------------------------
// Config

TEST(AttentionConfigTest, Validation) {
  EXPECT_THROW(config(10, 3, AttentionVariant::standard).validate(), ConfigError);
  EXPECT_THROW(config(6, 2, AttentionVariant::differential).validate(), ConfigError);  // d_h = 3
  EXPECT_NO_THROW(config(6, 2, AttentionVariant::standard).validate());
  AttentionConfig c = config(8, 2, AttentionVariant::differential);
  c.layer_index = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.layer_index = 3;
  c.lambda_init = LambdaInit::dynamic();
  EXPECT_DOUBLE_EQ(c.resolved_lambda_init(), lambda_init_schedule(3));
  c.lambda_init = LambdaInit::constant(1.5);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.warnings().size(), 1u);
  c.lambda_init = LambdaInit::constant(std::nan(""));
  EXPECT_THROW(c.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Heads

TEST(DiffHead, MatchesBruteForceOracle) {
  Rng rng(13);
  for (bool causal : {false, true}) {
    const std::size_t n = 3, half = 2;
    const Tensor q1 = random_tensor(Shape{n, half}, rng), q2 = random_tensor(Shape{n, half}, rng);
    const Tensor k1 = random_tensor(Shape{n, half}, rng), k2 = random_tensor(Shape{n, half}, rng);
    const Tensor v = random_tensor(Shape{n, 2 * half}, rng);
    const double lambda = 0.63;
    Tape tape(false);
    const Tensor out = diff_attention_head(tape.constant(q1), tape.constant(q2), tape.constant(k1), tape.constant(k2),
                                           tape.constant(v), tape.constant(Tensor::scalar(lambda)), causal)
                           .value();
    EXPECT_LE(max_abs_diff(out, oracle::diff_head(q1, q2, k1, k2, v, lambda, causal)), 1e-10);
  }
}

TEST(DiffHead, LambdaZeroIsStandardHalfWidthAttention) {
  Rng rng(14);
  const Tensor q1 = random_tensor(Shape{4, 3}, rng), q2 = random_tensor(Shape{4, 3}, rng);
  const Tensor k1 = random_tensor(Shape{4, 3}, rng), k2 = random_tensor(Shape{4, 3}, rng);
  const Tensor v = random_tensor(Shape{4, 6}, rng);
  Tape tape(false);
  const Tensor d = diff_attention_head(tape.constant(q1), tape.constant(q2), tape.constant(k1), tape.constant(k2),
                                       tape.constant(v), tape.constant(Tensor::scalar(0.0)), false)
                       .value();
  const Tensor s = attention_head(tape.constant(q1), tape.constant(k1), tape.constant(v), false).value();
  EXPECT_LE(max_abs_diff(d, s), 1e-12);
}

TEST(DiffHead, IdenticalHalvesScaleByOneMinusLambda) {
  Rng rng(15);
  const Tensor q = random_tensor(Shape{5, 2}, rng), k = random_tensor(Shape{5, 2}, rng), v = random_tensor(Shape{5, 4}, rng);
  Tape tape(false);
  Var qv = tape.constant(q), kv = tape.constant(k);
  const Tensor d = diff_attention_head(qv, qv, kv, kv, tape.constant(v), tape.constant(Tensor::scalar(0.3)), false).value();
  const Tensor s = attention_head(qv, kv, tape.constant(v), false).value();
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(d[i], 0.7 * s[i], 1e-12);
}

TEST(DiffHead, EffectiveRowsSumToOneMinusLambda) {
  Rng rng(16);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + trial % 6;
    const double lambda = std::uniform_real_distribution<double>(-1.0, 2.0)(rng);
    Tape tape(false);
    Tensor eff;
    diff_attention_head(tape.constant(random_tensor(Shape{n, 2}, rng, -4, 4)), tape.constant(random_tensor(Shape{n, 2}, rng, -4, 4)),
                        tape.constant(random_tensor(Shape{n, 2}, rng, -4, 4)), tape.constant(random_tensor(Shape{n, 2}, rng, -4, 4)),
                        tape.constant(random_tensor(Shape{n, 4}, rng)), tape.constant(Tensor::scalar(lambda)), trial % 2 == 1,
                        &eff);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += eff.at(i, j);
      EXPECT_NEAR(s, 1.0 - lambda, 1e-9);
    }
  }
}

TEST(DiffHead, RejectsMismatchedWidths) {
  Tape tape(false);
  const Var a = tape.constant(Tensor(Shape{3, 2})), b = tape.constant(Tensor(Shape{3, 3}));
  const Var lam = tape.constant(Tensor::scalar(0.5));
  EXPECT_THROW(diff_attention_head(a, b, a, a, tape.constant(Tensor(Shape{3, 4})), lam, false), DimensionError);
  EXPECT_THROW(diff_attention_head(a, a, a, a, tape.constant(Tensor(Shape{3, 3})), lam, false), DimensionError);
}

// ---------------------------------------------------------------------------
// Multi-head

TEST(StandardMha, MatchesBruteForceOracle) {
  Rng rng(17);
  const AttentionConfig c = config(8, 2, AttentionVariant::standard);
  const AttentionWeights w = random_weights(c, rng);
  const Tensor x = random_tensor(Shape{4, 8}, rng);
  for (bool causal : {false, true}) {
    Tape tape(false);
    const Tensor out = standard_mha(tape.constant(x), bind(tape, w, false), c, causal).value();
    EXPECT_LE(max_abs_diff(out, oracle::mha(x, w.wq, w.wk, w.wv, w.wo, 2, {}, causal)), 1e-10);
  }
}

TEST(StandardMha, SingleTokenAndZeroValues) {
  Rng rng(18);
  const AttentionConfig c = config(8, 2, AttentionVariant::standard);
  AttentionWeights w = random_weights(c, rng);
  const Tensor x = random_tensor(Shape{1, 8}, rng);
  Tape tape(false);
  const Tensor out = standard_mha(tape.constant(x), bind(tape, w, false), c).value();
  EXPECT_LE(max_abs_diff(out, oracle::matmul(oracle::matmul(x, w.wv), w.wo)), 1e-12);
  w.wv = Tensor(Shape{8, 8}, 0.0);
  const Tensor zero = standard_mha(tape.constant(random_tensor(Shape{5, 8}, rng)), bind(tape, w, false), c).value();
  EXPECT_EQ(zero, Tensor(Shape{5, 8}, 0.0));
}

TEST(StandardMha, VariantMismatch) {
  Rng rng(19);
  const AttentionConfig c = config(8, 2, AttentionVariant::differential);
  const AttentionWeights w = random_weights(c, rng);
  Tape tape(false);
  const Var x = tape.constant(random_tensor(Shape{3, 8}, rng));
  EXPECT_THROW(standard_mha(x, bind(tape, w, false), c), ConfigError);
  EXPECT_THROW(diff_mha(x, bind(tape, w, false), config(8, 2, AttentionVariant::standard)), ConfigError);
  EXPECT_THROW(diff_mha(tape.constant(Tensor(Shape{3, 6})), bind(tape, w, false), c), DimensionError);
}

TEST(DiffMha, MatchesBruteForceOracleForBothSharingModes) {
  Rng rng(20);
  for (auto sharing : {LambdaSharing::per_head, LambdaSharing::per_layer}) {
    const AttentionConfig c = config(8, 2, AttentionVariant::differential, sharing);
    const AttentionWeights w = random_weights(c, rng);
    const Tensor x = random_tensor(Shape{4, 8}, rng);
    for (bool causal : {false, true}) {
      Tape tape(false);
      const Tensor out = diff_mha(tape.constant(x), bind(tape, w, false), c, causal).value();
      EXPECT_LE(max_abs_diff(out, oracle::mha(x, w.wq, w.wk, w.wv, w.wo, 2, lambdas_of(w), causal)), 1e-10);
    }
  }
}

TEST(DiffMha, SingleHeadIsHeadPlusOutputProjection) {
  Rng rng(21);
  const AttentionConfig c = config(4, 1, AttentionVariant::differential);
  const AttentionWeights w = random_weights(c, rng);
  const Tensor x = random_tensor(Shape{3, 4}, rng);
  Tape tape(false);
  const Tensor q = oracle::matmul(x, w.wq), k = oracle::matmul(x, w.wk), v = oracle::matmul(x, w.wv);
  Var head = diff_attention_head(tape.constant(oracle::columns(q, 0, 2)), tape.constant(oracle::columns(q, 2, 2)),
                                 tape.constant(oracle::columns(k, 0, 2)), tape.constant(oracle::columns(k, 2, 2)),
                                 tape.constant(v), tape.constant(Tensor::scalar(compute_lambda(w.lambdas[0]))), false);
  const Tensor expect = matmul(head, tape.constant(w.wo)).value();
  EXPECT_LE(max_abs_diff(diff_mha(tape.constant(x), bind(tape, w, false), c).value(), expect), 1e-12);
}

TEST(DiffMha, OutputShapeLaw) {
  Rng rng(22);
  for (auto [n, d, h] : {std::tuple{1, 4, 1}, {2, 8, 2}, {5, 12, 3}, {7, 16, 4}, {3, 16, 8}}) {
    const AttentionConfig c = config(d, h, AttentionVariant::differential);
    Tape tape(false);
    const Var out = diff_mha(tape.constant(random_tensor(Shape{std::size_t(n), std::size_t(d)}, rng)),
                             bind(tape, random_weights(c, rng), false), c);
    EXPECT_EQ(out.shape(), (Shape{std::size_t(n), std::size_t(d)}));
  }
}

TEST(DiffMha, LambdaZeroEqualsStandardMhaOnFirstHalves) {
  Rng rng(23);
  const std::size_t d = 8, h = 2, dh = 4, half = 2;
  AttentionConfig c = config(d, h, AttentionVariant::differential);
  c.lambda_init = LambdaInit::constant(0.0);
  AttentionWeights w = random_weights(c, rng);
  for (auto& p : w.lambdas) p = {Tensor(Shape{half}, 0.0), Tensor(Shape{half}, 0.0), Tensor(Shape{half}, 0.0), Tensor(Shape{half}, 0.0), 0.0};
  const Tensor x = random_tensor(Shape{5, d}, rng);
  Tape tape(false);
  const Tensor diff = diff_mha(tape.constant(x), bind(tape, w, false), c).value();

  // Standard attention on each head's first Q/K halves (scale √(d_h/2)) with full-width values.
  const Tensor q = oracle::matmul(x, w.wq), k = oracle::matmul(x, w.wk), v = oracle::matmul(x, w.wv);
  std::vector<Var> heads;
  for (std::size_t i = 0; i < h; ++i) {
    heads.push_back(attention_head(tape.constant(oracle::columns(q, i * dh, half)),
                                   tape.constant(oracle::columns(k, i * dh, half)),
                                   tape.constant(oracle::columns(v, i * dh, dh)), false));
  }
  const Tensor standard = matmul(concat(std::span<const Var>(heads), 1), tape.constant(w.wo)).value();
  EXPECT_LE(max_abs_diff(diff, standard), 1e-12);
}

TEST(DiffMha, CausalOutputIgnoresFutureTokens) {
  Rng rng(24);
  for (auto variant : {AttentionVariant::standard, AttentionVariant::differential}) {
    const AttentionConfig c = config(8, 2, variant);
    const AttentionWeights w = random_weights(c, rng);
    Tensor x = random_tensor(Shape{6, 8}, rng);
    Tape tape(false);
    const Tensor before = multi_head_attention(tape.constant(x), 6, bind(tape, w, false), c, true).value();
    for (std::size_t c0 = 0; c0 < 8; ++c0) x.at(4, c0) += 3.0, x.at(5, c0) -= 2.0;
    const Tensor after = multi_head_attention(tape.constant(x), 6, bind(tape, w, false), c, true).value();
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c0 = 0; c0 < 8; ++c0) EXPECT_EQ(before.at(r, c0), after.at(r, c0));
    EXPECT_GT(max_abs_diff(before, after), 1e-6);
  }
}

TEST(DiffMha, GradientOfLambdaQ1MatchesFiniteDifferences) {
  Rng rng(25);
  const AttentionConfig c = config(8, 2, AttentionVariant::differential);
  const AttentionWeights w = random_weights(c, rng);
  const Tensor x = random_tensor(Shape{4, 8}, rng);
  const ScalarFn f = [&](Tape& tape, const std::vector<Var>& v) {
    AttentionVars a = bind(tape, w, false);
    a.lambdas[1].q1 = v[0];
    return sum(diff_mha(tape.constant(x), a, c));
  };
  EXPECT_LT(gradient_error(f, {w.lambdas[1].q1}), 1e-5);
}

TEST(DiffMha, EveryParameterGradientMatchesFiniteDifferences) {
  Rng rng(26);
  for (auto sharing : {LambdaSharing::per_head, LambdaSharing::per_layer}) {
    const AttentionConfig c = config(8, 2, AttentionVariant::differential, sharing);
    const AttentionWeights w = random_weights(c, rng);
    std::vector<Tensor> in{random_tensor(Shape{4, 8}, rng), w.wq, w.wk, w.wv, w.wo};
    for (const auto& p : w.lambdas) in.insert(in.end(), {p.q1, p.k1, p.q2, p.k2});
    for (bool causal : {false, true}) {
      const ScalarFn f = [&](Tape&, const std::vector<Var>& v) {
        AttentionVars a{v[1], v[2], v[3], v[4], {}};
        for (std::size_t g = 0; g < w.lambdas.size(); ++g) {
          a.lambdas.push_back({v[5 + 4 * g], v[6 + 4 * g], v[7 + 4 * g], v[8 + 4 * g], 0.8});
        }
        return weighted_sum(diff_mha(v[0], a, c, causal));
      };
      EXPECT_LT(gradient_error(f, in), 1e-5);
    }
  }
}

// The fused kernel and the composed per-head graph must agree in value and gradient.
TEST(FusedAttention, MatchesComposedPath) {
  Rng rng(27);
  for (auto variant : {AttentionVariant::standard, AttentionVariant::differential}) {
    for (auto sharing : {LambdaSharing::per_head, LambdaSharing::per_layer}) {
      const AttentionConfig c = config(8, 2, variant, sharing);
      const AttentionWeights w = random_weights(c, rng);
      const Tensor x = random_tensor(Shape{9, 8}, rng);  // three sequences of length 3
      for (bool causal : {false, true}) {
        std::vector<Tensor> values, grads;
        for (auto path : {AttentionPath::fused, AttentionPath::composed}) {
          Tape tape;
          AttentionVars a = bind(tape, w, true);
          AttentionTrace trace;
          Var xv = tape.parameter(x);
          Var out = multi_head_attention(xv, 3, a, c, causal, &trace, path);
          values.push_back(out.value());
          ASSERT_EQ(trace.weights.size(), 6u);
          values.push_back(trace.weights[4]);
          tape.backward(weighted_sum(out));
          grads.insert(grads.end(), {xv.grad(), a.wq.grad(), a.wk.grad(), a.wv.grad(), a.wo.grad()});
          for (const auto& l : a.lambdas) grads.insert(grads.end(), {l.q1.grad(), l.k1.grad(), l.q2.grad(), l.k2.grad()});
        }
        EXPECT_LE(max_abs_diff(values[0], values[2]), 1e-12);
        EXPECT_LE(max_abs_diff(values[1], values[3]), 1e-12);
        const std::size_t half = grads.size() / 2;
        for (std::size_t i = 0; i < half; ++i) EXPECT_LE(max_abs_diff(grads[i], grads[half + i]), 1e-11) << i;
      }
    }
  }
}

TEST(FusedAttention, GradientMatchesFiniteDifferences) {
  Rng rng(28);
  const Tensor q = random_tensor(Shape{6, 8}, rng), k = random_tensor(Shape{6, 8}, rng), v = random_tensor(Shape{6, 8}, rng);
  for (bool causal : {false, true}) {
    const ScalarFn diff = [&](Tape&, const std::vector<Var>& in) {
      const std::vector<Var> lam{in[3], in[4]};
      return weighted_sum(fused_attention(in[0], in[1], in[2], lam, 3, 2, true, causal));
    };
    EXPECT_LT(gradient_error(diff, {q, k, v, Tensor::scalar(0.7), Tensor::scalar(0.2)}), 1e-5);
    const ScalarFn standard = [&](Tape&, const std::vector<Var>& in) {
      return weighted_sum(fused_attention(in[0], in[1], in[2], {}, 2, 4, false, causal));
    };
    EXPECT_LT(gradient_error(standard, {q, k, v}), 1e-5);
  }
}

TEST(HeadNorm, ScalesNormalisedHeadsByOneMinusLambdaInit) {
  Rng rng(29);
  AttentionConfig c = config(8, 2, AttentionVariant::differential);
  c.head_norm = true;
  const AttentionWeights w = random_weights(c, rng);
  const Tensor x = random_tensor(Shape{3, 8}, rng);
  Tape tape(false);
  const Tensor with = diff_mha(tape.constant(x), bind(tape, w, false), c).value();
  c.head_norm = false;
  const Tensor without = diff_mha(tape.constant(x), bind(tape, w, false), c).value();
  EXPECT_GT(max_abs_diff(with, without), 1e-6);
}
