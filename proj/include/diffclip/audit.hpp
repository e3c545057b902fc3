#pragma once

#include <string>

#include "diffclip/encoders.hpp"
#include "diffclip/kv.hpp"

namespace diffclip {

struct AuditReport {
  std::size_t total_standard = 0;
  std::size_t total_differential = 0;
  std::size_t extra = 0;        // enumerated: differential - standard
  std::size_t closed_form = 0;  // Σ over differential towers of depth·groups·4·(d_h/2)
  double ratio = 0.0;           // extra / total_standard

  KeyValues to_kv() const {
    return {{"total_standard", std::to_string(total_standard)},
            {"total_differential", std::to_string(total_differential)},
            {"extra", std::to_string(extra)},
            {"closed_form", std::to_string(closed_form)},
            {"overhead_ratio", format_double(ratio)},
            {"overhead_percent", format_double(100.0 * ratio)}};
  }
};

inline std::size_t count_parameters(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : parameter_specs(cfg)) n += s.numel();
  return n;
}

/// λ parameter count of one tower: every layer owns `groups` sets of four d_h/2 vectors.
inline std::size_t lambda_closed_form(const EncoderConfig& e) {
  if (e.attention_variant != AttentionVariant::differential) return 0;
  const AttentionConfig a = e.attention(1);
  return e.depth * a.lambda_groups() * 4 * a.lambda_dim();
}

inline AuditReport param_audit(const ModelConfig& standard, const ModelConfig& differential) {
  AuditReport r;
  r.total_standard = count_parameters(standard);
  r.total_differential = count_parameters(differential);
  if (r.total_differential < r.total_standard) throw ConfigError("param_audit: differential model is smaller");
  r.extra = r.total_differential - r.total_standard;
  r.closed_form = lambda_closed_form(differential.vision) + lambda_closed_form(differential.text) -
                  lambda_closed_form(standard.vision) - lambda_closed_form(standard.text);
  r.ratio = static_cast<double>(r.extra) / static_cast<double>(r.total_standard);
  return r;
}

}  // namespace diffclip
