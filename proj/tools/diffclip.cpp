// diffclip: corpus generation, training, evaluation, parameter audit and attention maps.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <map>
#include <set>

#include "diffclip/diffclip.hpp"

namespace fs = std::filesystem;
using namespace diffclip;

namespace {

enum ExitCode { kOk = 0, kIo = 2, kConfig = 3, kNumeric = 4 };

void print_config(const std::string& command, const KeyValues& kv) {
  std::cout << "# " << command << '\n' << format_key_values(kv) << std::flush;
}

std::size_t eval_threads() {
  const char* env = std::getenv("DIFFATTN_THREADS");
  if (!env || !*env) return 1;
  const auto n = parse_uint("DIFFATTN_THREADS", env);
  if (n == 0) throw ConfigError("DIFFATTN_THREADS must be positive");
  return n;
}

void write_report(const fs::path& path, const KeyValues& kv) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << format_key_values(kv);
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<std::size_t> pair_labels(const Dataset& ds, const PairedSet& set) {
  std::vector<std::size_t> out;
  for (std::size_t i : set.entry) out.push_back(ds.entries[i].spec.pair());
  return out;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::size_t n = 4000;
  std::uint64_t seed = 0;
  std::string out;
  double val = 0.1, test = 0.1;
  std::size_t image_size = 32;
};

int cmd_gen_data(const GenDataArgs& a) {
  const SplitFractions f{1.0 - a.val - a.test, a.val, a.test};
  print_config("gen-data", {{"n", std::to_string(a.n)},
                            {"seed", std::to_string(a.seed)},
                            {"out", a.out},
                            {"val", format_double(a.val)},
                            {"test", format_double(a.test)},
                            {"image_size", std::to_string(a.image_size)}});
  const Dataset ds = build_corpus(a.n, f, a.seed, a.out, a.image_size);
  std::cout << "wrote " << ds.entries.size() << " samples (train " << ds.indices(Split::train).size() << ", val "
            << ds.indices(Split::val).size() << ", test " << ds.indices(Split::test).size() << ") to " << a.out
            << "\nmanifest_hash=" << file_hash(fs::path(a.out) / "manifest.tsv") << '\n';
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string variant, dataset, checkpoint, metrics;
};

int cmd_train(const TrainArgs& a) {
  std::vector<std::string> ov = a.overrides;
  if (!a.variant.empty()) ov.push_back("variant=" + a.variant);
  if (!a.dataset.empty()) ov.push_back("dataset=" + a.dataset);
  if (!a.checkpoint.empty()) ov.push_back("checkpoint=" + a.checkpoint);
  if (!a.metrics.empty()) ov.push_back("metrics=" + a.metrics);
  const std::string text = a.config.empty() ? std::string() : read_text_file(a.config);
  const fs::path dataset = resolve_run_config(text, ov).dataset;
  if (dataset.empty()) throw ConfigError("train: no dataset given (--dataset or dataset=)");
  const Dataset ds = load_dataset(dataset);
  // Resolved again so the text tower's vocabulary defaults to the corpus vocabulary.
  const RunConfig rc = resolve_run_config(text, ov, ds.vocab.size());
  if (rc.train.checkpoint.empty()) throw ConfigError("train: no checkpoint path given (--checkpoint or checkpoint=)");
  if (ds.vocab.size() > rc.model.text.vocab_size) {
    throw ConfigError("text.vocab_size " + std::to_string(rc.model.text.vocab_size) + " is smaller than the corpus vocabulary " +
                      std::to_string(ds.vocab.size()));
  }
  print_config("train", rc.to_kv());
  const PairedSet data = load_split(ds, Split::train, rc.model.text.context_length);
  const TrainResult r = train(rc.train, rc.model, data);
  for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) {
    std::cout << "epoch " << e << " loss " << format_double(r.epoch_losses[e]) << '\n';
  }
  std::cout << "probe_loss_initial=" << format_double(r.probe_loss_initial) << '\n'
            << "probe_loss_final=" << format_double(r.probe_loss_final) << '\n'
            << "final_loss=" << format_double(r.steps.back().loss) << '\n'
            << "seconds=" << format_double(r.seconds) << '\n'
            << "checkpoint_hash=" << file_hash(rc.train.checkpoint) << '\n';
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, dataset, task, split = "test", out;
  std::string image_embeddings, text_embeddings;
  std::vector<std::size_t> ks{1, 5};
  std::vector<std::size_t> shots{1, 5};
};

int cmd_eval(const EvalArgs& a) {
  static const std::set<std::string> tasks{"zeroshot", "retrieval", "probe", "fewshot"};
  if (!tasks.count(a.task)) throw ConfigError("unknown task '" + a.task + "' (expected zeroshot|retrieval|probe|fewshot)");
  if (a.split != "train" && a.split != "val" && a.split != "test") {
    throw ConfigError("unknown split '" + a.split + "' (expected train|val|test)");
  }
  const bool from_files = !a.image_embeddings.empty() || !a.text_embeddings.empty();
  const std::size_t threads = eval_threads();
  KeyValues cfg{{"task", a.task}, {"split", a.split}, {"out", a.out}, {"threads", std::to_string(threads)}};
  if (from_files) {
    cfg["image_embeddings"] = a.image_embeddings;
    cfg["text_embeddings"] = a.text_embeddings;
  } else {
    cfg["checkpoint"] = a.checkpoint;
    cfg["dataset"] = a.dataset;
  }
  print_config("eval", cfg);
  const auto t0 = std::chrono::steady_clock::now();
  KeyValues report{{"task", a.task}};

  const auto add_recall = [&](const RecallResult& r, std::size_t n) {
    report["pairs"] = std::to_string(n);
    for (std::size_t j = 0; j < r.ks.size(); ++j) {
      report["recall@" + std::to_string(r.ks[j]) + ".image_to_text"] = format_double(r.image_to_text[j]);
      report["recall@" + std::to_string(r.ks[j]) + ".text_to_image"] = format_double(r.text_to_image[j]);
    }
  };

  if (from_files) {
    if (a.task != "retrieval") throw ConfigError("embedding files are only accepted by --task retrieval");
    if (a.image_embeddings.empty() || a.text_embeddings.empty()) {
      throw ConfigError("--image-embeddings and --text-embeddings go together");
    }
    const Tensor u = normalize_rows(load_tensor(a.image_embeddings));
    const Tensor v = normalize_rows(load_tensor(a.text_embeddings));
    add_recall(retrieval_recall(u, v, a.ks), u.rows());
  } else {
    if (a.checkpoint.empty() || a.dataset.empty()) throw ConfigError("eval needs --checkpoint and --dataset");
    const ModelWeights w = load_checkpoint(a.checkpoint);
    const Dataset ds = load_dataset(a.dataset);
    const std::size_t ctx = w.config().text.context_length;
    const ClipEmbedder model(w, threads);
    ModelConfig standard = w.config();
    apply_variant(standard, ModelVariant::clip);
    const AuditReport audit = param_audit(standard, w.config());
    report["params.total"] = std::to_string(audit.total_differential);
    report["params.extra"] = std::to_string(audit.extra);
    report["params.overhead_ratio"] = format_double(audit.ratio);

    if (a.task == "zeroshot" || a.task == "retrieval") {
      const PairedSet set = load_split(ds, parse_split(a.split), ctx);
      report["split"] = a.split;
      if (a.task == "zeroshot") {
        const auto labels = pair_labels(ds, set);
        const auto z = zero_shot_classify(model, set.images, synthetic_class_prompts(), ds.vocab, ctx, labels);
        report["samples"] = std::to_string(set.size());
        report["classes"] = std::to_string(kNumPairs);
        report["zeroshot.accuracy"] = format_double(z.accuracy);
      } else {
        add_recall(retrieval_recall(model, set.images, set.tokens, a.ks), set.size());
      }
    } else {
      // Probes train on the train split and score the val split; classes are the
      // (shape, color) pairs seen in training.
      const PairedSet tr = load_split(ds, Split::train, ctx);
      const PairedSet va = load_split(ds, Split::val, ctx);
      std::map<std::size_t, std::size_t> remap;
      for (std::size_t p : pair_labels(ds, tr)) remap.emplace(p, remap.size());
      const auto relabel = [&](const std::vector<std::size_t>& pairs) {
        std::vector<std::size_t> out;
        for (std::size_t p : pairs) {
          const auto it = remap.find(p);
          if (it == remap.end()) throw ConfigError("probe: class " + pair_name(p) + " absent from the train split");
          out.push_back(it->second);
        }
        return out;
      };
      const auto ytr = relabel(pair_labels(ds, tr));
      const auto yva = relabel(pair_labels(ds, va));
      const Tensor xtr = model.embed_images(tr.images);
      const Tensor xva = model.embed_images(va.images);
      report["split"] = "val";
      report["classes"] = std::to_string(remap.size());
      if (a.task == "probe") {
        report["probe.accuracy"] = format_double(linear_probe(xtr, ytr, xva, yva, remap.size()));
      } else {
        for (std::size_t k : a.shots) {
          report["fewshot." + std::to_string(k) + ".accuracy"] =
              format_double(linear_probe(xtr, ytr, xva, yva, remap.size(), k));
        }
      }
    }
  }
  report["seconds"] = format_double(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  write_report(a.out, report);
  std::cout << format_key_values(report);
  return kOk;
}

struct AuditArgs {
  std::string shape = "b16", out, lambda_sharing = "per_layer";
};

int cmd_audit(const AuditArgs& a) {
  const std::size_t vocab = Vocabulary::synthetic().size();
  ModelConfig standard = a.shape == "b16"    ? b16_model_config()
                         : a.shape == "toy"  ? toy_model_config(vocab)
                         : a.shape == "desk" ? desk_model_config(vocab)
                                             : throw ConfigError("unknown shape '" + a.shape + "' (expected toy|b16|desk)");
  ModelConfig differential = standard;
  apply_variant(differential, ModelVariant::diffclip);
  const std::string s = a.lambda_sharing;
  if (s != "per_layer" && s != "per_head") throw ConfigError("lambda_sharing: expected per_layer|per_head, got '" + s + "'");
  apply_model_key(differential, "vision.lambda_sharing", s);
  apply_model_key(differential, "text.lambda_sharing", s);
  print_config("audit", {{"shape", a.shape}, {"lambda_sharing", s}, {"out", a.out}});
  const auto t0 = std::chrono::steady_clock::now();
  KeyValues report = param_audit(standard, differential).to_kv();
  report["shape"] = a.shape;
  report["lambda_sharing"] = s;
  report["seconds"] = format_double(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  if (!a.out.empty()) write_report(a.out, report);
  std::cout << format_key_values(report);
  return kOk;
}

struct AttnMapArgs {
  std::string checkpoint, dataset, query, out;
  std::size_t image_id = 0;
};

int cmd_attn_map(const AttnMapArgs& a) {
  print_config("attn-map", {{"checkpoint", a.checkpoint},
                            {"dataset", a.dataset},
                            {"image_id", std::to_string(a.image_id)},
                            {"query", a.query},
                            {"out", a.out}});
  const ModelWeights w = load_checkpoint(a.checkpoint);
  const Dataset ds = load_dataset(a.dataset);
  std::size_t index = ds.entries.size();
  for (std::size_t i = 0; i < ds.entries.size(); ++i)
    if (ds.entries[i].id == a.image_id) index = i;
  if (index == ds.entries.size()) throw ConfigError("no image with id " + std::to_string(a.image_id));
  const Heatmap h = attention_map(w, ds.image(index), a.query, ds.vocab);
  const fs::path pgm = a.out + ".pgm", csv = a.out + ".csv";
  write_pgm(pgm, h);
  write_csv(csv, h);
  std::cout << "caption=" << ds.entries[index].caption << "\nwrote " << pgm.string() << " and " << csv.string() << '\n';
  return kOk;
}

int fail(int code, const std::string& message) {
  std::cerr << "ERROR " << code << ": " << message << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DiffCLIP: CLIP with differential attention"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Render a synthetic image-caption corpus");
  g->add_option("--n", gen.n, "Number of samples");
  g->add_option("--seed", gen.seed, "Corpus seed");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--val", gen.val, "Validation fraction");
  g->add_option("--test", gen.test, "Held-out (shape, color) fraction");
  g->add_option("--image-size", gen.image_size, "Image side in pixels");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model on a corpus");
  t->add_option("--config", tr.config, "key=value config file");
  t->add_option("--set", tr.overrides, "key=value override (repeatable)");
  t->add_option("--variant", tr.variant, "clip|diffclip|diffclip-star|diffclip-dagger");
  t->add_option("--dataset", tr.dataset, "Corpus directory");
  t->add_option("--checkpoint", tr.checkpoint, "Checkpoint output path");
  t->add_option("--metrics", tr.metrics, "Per-step metrics log path");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  e->add_option("--dataset", ev.dataset, "Corpus directory");
  e->add_option("--task", ev.task, "zeroshot|retrieval|probe|fewshot")->required();
  e->add_option("--split", ev.split, "Split for zeroshot/retrieval");
  e->add_option("--out", ev.out, "Report file")->required();
  e->add_option("--ks", ev.ks, "Recall cut-offs")->delimiter(',');
  e->add_option("--shots", ev.shots, "Few-shot sizes")->delimiter(',');
  e->add_option("--image-embeddings", ev.image_embeddings, "Precomputed image embeddings (tensor file)");
  e->add_option("--text-embeddings", ev.text_embeddings, "Precomputed text embeddings (tensor file)");

  AuditArgs au;
  auto* a = app.add_subcommand("audit", "Count parameters of standard vs differential models");
  a->add_option("--shape", au.shape, "toy|b16|desk");
  a->add_option("--lambda-sharing", au.lambda_sharing, "per_layer|per_head");
  a->add_option("--out", au.out, "Report file");

  AttnMapArgs am;
  auto* m = app.add_subcommand("attn-map", "Export a text-conditioned attention heatmap");
  m->add_option("--checkpoint", am.checkpoint, "Checkpoint file")->required();
  m->add_option("--dataset", am.dataset, "Corpus directory")->required();
  m->add_option("--image-id", am.image_id, "Sample id")->required();
  m->add_option("--query", am.query, "Caption query")->required();
  m->add_option("--out", am.out, "Output path prefix (writes .pgm and .csv)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    return fail(kConfig, err.what());
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*a) return cmd_audit(au);
    if (*m) return cmd_attn_map(am);
  } catch (const IoError& err) {
    return fail(kIo, err.what());
  } catch (const NumericError& err) {
    return fail(kNumeric, err.what());
  } catch (const ConfigError& err) {
    return fail(kConfig, err.what());
  } catch (const DimensionError& err) {
    return fail(kConfig, err.what());
  }
  return kOk;
}
