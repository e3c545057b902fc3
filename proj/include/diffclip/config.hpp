#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "diffclip/data_synth.hpp"
#include "diffclip/encoders.hpp"
#include "diffclip/errors.hpp"
#include "diffclip/kv.hpp"
#include "diffclip/train.hpp"

namespace diffclip {

/// Everything a training run needs: model shape, optimiser recipe and paths.
/// Resolution order is fixed (preset, then variant, then explicit model keys), so the
/// order of keys in a file or on the command line does not matter.
struct RunConfig {
  std::string preset = "desk";
  double lambda_init = 0.8;
  TrainConfig train;
  ModelConfig model;
  std::filesystem::path dataset;

  KeyValues to_kv() const {
    KeyValues kv = model_config_to_kv(model);
    kv["preset"] = preset;
    kv["variant"] = variant_name(train.variant);
    kv["lambda_init"] = format_double(lambda_init);
    kv["epochs"] = std::to_string(train.epochs);
    kv["batch_size"] = std::to_string(train.batch_size);
    kv["lr"] = format_double(train.lr);
    kv["weight_decay"] = format_double(train.weight_decay);
    kv["warmup_epochs"] = format_double(train.warmup_epochs);
    kv["grad_clip"] = format_double(train.grad_clip);
    kv["nan_check"] = train.nan_check ? "true" : "false";
    kv["checkpoint"] = train.checkpoint.string();
    kv["metrics"] = train.metrics.string();
    kv["dataset"] = dataset.string();
    return kv;
  }
};

inline ModelConfig preset_model_config(const std::string& name, std::size_t vocab_size) {
  if (name == "desk") return desk_model_config(vocab_size);
  if (name == "toy") return toy_model_config(vocab_size);
  if (name == "b16") return b16_model_config();
  throw ConfigError("unknown preset '" + name + "' (expected desk|toy|b16)");
}

namespace detail {

inline bool is_run_key(const std::string& k) {
  static const char* keys[] = {"preset",     "variant", "lambda_init", "epochs",    "batch_size", "lr",
                               "weight_decay", "warmup_epochs", "grad_clip", "nan_check", "checkpoint", "metrics",
                               "dataset"};
  for (const char* key : keys)
    if (k == key) return true;
  return false;
}

inline bool is_model_key(const std::string& k, const std::string& v) {
  ModelConfig probe;
  return apply_model_key(probe, k, v);
}

}  // namespace detail

/// Merges config-file text with `key=value` overrides (overrides win) and resolves a RunConfig.
/// Unknown keys in the file are reported with their line number.
inline RunConfig resolve_run_config(std::string_view file_text, const std::vector<std::string>& overrides,
                                    std::size_t vocab_size = Vocabulary::synthetic().size()) {
  KeyValues kv;
  const auto accept = [&](const std::string& where, const std::string& k, const std::string& v) {
    if (!detail::is_run_key(k)) {
      bool model_key = false;
      try {
        model_key = detail::is_model_key(k, v);
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
      if (!model_key) throw ConfigError(where + ": unknown key '" + k + "'");
    }
    kv[k] = v;
  };
  parse_key_values(file_text, [&](std::string k, std::string v, std::size_t line) {
    accept("line " + std::to_string(line), k, v);
  });
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "': expected key=value");
    accept("override '" + o + "'", std::string(trim(o.substr(0, eq))), std::string(trim(o.substr(eq + 1))));
  }

  RunConfig rc;
  const auto get = [&](const char* k) -> const std::string* {
    const auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (auto v = get("preset")) rc.preset = *v;
  if (auto v = get("variant")) rc.train.variant = parse_variant(*v);
  if (auto v = get("lambda_init")) rc.lambda_init = parse_double("lambda_init", *v);
  if (auto v = get("epochs")) rc.train.epochs = parse_uint("epochs", *v);
  if (auto v = get("batch_size")) rc.train.batch_size = parse_uint("batch_size", *v);
  if (auto v = get("lr")) rc.train.lr = parse_double("lr", *v);
  if (auto v = get("weight_decay")) rc.train.weight_decay = parse_double("weight_decay", *v);
  if (auto v = get("warmup_epochs")) rc.train.warmup_epochs = parse_double("warmup_epochs", *v);
  if (auto v = get("grad_clip")) rc.train.grad_clip = parse_double("grad_clip", *v);
  if (auto v = get("nan_check")) rc.train.nan_check = parse_bool("nan_check", *v);
  if (auto v = get("checkpoint")) rc.train.checkpoint = *v;
  if (auto v = get("metrics")) rc.train.metrics = *v;
  if (auto v = get("dataset")) rc.dataset = *v;

  rc.model = preset_model_config(rc.preset, vocab_size);
  apply_variant(rc.model, rc.train.variant, rc.lambda_init);
  for (const auto& [k, v] : kv) {
    if (!detail::is_run_key(k)) apply_model_key(rc.model, k, v);
  }
  rc.train.seed = rc.model.seed;
  rc.train.validate();
  rc.model.validate();
  return rc;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace diffclip
