// SPDX-License-Identifier: Apache-2.0
// eavl: command-line surface for data generation, training, evaluation,
// gradient checks, ablations and tensor dumps.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "eavl/checkpoint.hpp"
#include "eavl/errors.hpp"
#include "eavl/gradcheck_suite.hpp"
#include "eavl/training.hpp"

namespace fs = std::filesystem;
using namespace eavl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitThreshold = 3;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_gen_data(const std::string& manifest, const std::string& out_dir) {
  const DatasetSpec spec = read_manifest(manifest);
  const fs::path dir = out_dir.empty() ? fs::path(manifest).parent_path() / spec.name : fs::path(out_dir);
  const std::vector<Sample> samples = generate_dataset(spec);
  write_dataset(dir, spec, samples);
  std::cout << "wrote " << samples.size() << " samples to " << dir.string() << "\n";
  return kExitOk;
}

template <typename T>
int train_impl(const TrainConfig& config, const fs::path& out, const std::string& resume) {
  fs::create_directories(out);
  std::vector<Sample> train = load_train_split(config);
  std::vector<Sample> eval = load_eval_split(config);
  std::optional<Trainer<T>> trainer;
  std::ios::openmode mode = std::ios::out;
  if (resume.empty()) {
    trainer.emplace(config, std::move(train), std::move(eval));
  } else {
    Checkpoint<T> ck = load_checkpoint<T>(resume);
    ck.config.steps = config.steps;
    trainer.emplace(ck, std::move(train), std::move(eval));
    mode |= std::ios::app;
  }
  std::ofstream log(out / "metrics.jsonl", mode);
  if (!log) throw ConfigError("cannot write " + (out / "metrics.jsonl").string());
  trainer->run(&log);
  save_checkpoint(out / "checkpoint.eavc", trainer->checkpoint());
  std::cout << "trained " << trainer->completed_steps() << " steps; checkpoint " << (out / "checkpoint.eavc").string()
            << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out, const std::string& resume) {
  const TrainConfig config = TrainConfig::from_file(KeyValueFile::load(config_path));
  return config.precision == io::Precision::f64 ? train_impl<double>(config, out, resume)
                                                : train_impl<float>(config, out, resume);
}

template <typename T>
std::vector<Sample> split_samples(const Checkpoint<T>& ck, const std::string& split) {
  if (split == "train") return load_train_split(ck.config);
  if (split == "eval") {
    std::vector<Sample> s = load_eval_split(ck.config);
    if (s.empty()) throw ConfigError("the checkpoint's config has no eval split; pass a dataset directory");
    return s;
  }
  return read_dataset(split);
}

template <typename T>
int eval_impl(const std::string& checkpoint, const std::string& split, double min_miou) {
  const Checkpoint<T> ck = load_checkpoint<T>(checkpoint);
  const EavlModel<T> model = ck.restore_model();
  const EvalReport r = evaluate(model, split_samples(ck, split));
  std::cout << eval_json(r) << "\n";
  if (r.mean_iou < min_miou) {
    std::cerr << "mean IoU " << r.mean_iou << " is below the required " << min_miou << "\n";
    return kExitThreshold;
  }
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, double min_miou) {
  return checkpoint_precision(checkpoint) == io::Precision::f64 ? eval_impl<double>(checkpoint, split, min_miou)
                                                                : eval_impl<float>(checkpoint, split, min_miou);
}

int cmd_gradcheck(std::size_t max_entries, bool probe_unused, double eps) {
  GradSuiteOptions options;
  options.check.eps = eps;
  options.check.max_entries_per_param = max_entries;
  options.include_unused_probe = probe_unused;
  const auto results = run_gradcheck_suite(options);
  bool ok = true;
  std::printf("%-26s %12s %10s %9s %6s  %s\n", "block", "max_rel_err", "threshold", "entries", "kinks", "status");
  for (const GradBlockResult& r : results) {
    std::printf("%-26s %12.3e %10.0e %9zu %6zu  %s\n", r.block.c_str(), r.report.max_rel_error, r.threshold,
                r.report.entries_checked, r.report.kink_skipped, r.passed() ? "ok" : "FAIL");
    if (!r.passed()) {
      std::printf("  worst: %s[%zu] analytic %.10e numeric %.10e\n", r.report.worst_parameter.c_str(),
                  r.report.worst_index, r.report.worst_analytic, r.report.worst_numeric);
    }
    for (const std::string& name : r.report.zero_gradient) {
      std::printf("  warning: %s has an all-zero gradient\n", name.c_str());
    }
    ok = ok && r.passed();
  }
  return ok ? kExitOk : kExitThreshold;
}

template <typename T>
int ablate_impl(const TrainConfig& config, const std::vector<AblationVariant>& variants,
                const std::vector<std::uint64_t>& seeds, const std::string& out) {
  const auto rows = run_ablation<T>(config, variants, seeds, &std::cerr);
  const std::string table = format_ablation_table(rows);
  std::cout << table;
  if (!out.empty()) std::ofstream(out) << table;
  return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& variants_text, const std::string& seeds_text,
               const std::string& out) {
  const TrainConfig config = TrainConfig::from_file(KeyValueFile::load(config_path));
  std::vector<AblationVariant> variants;
  for (const std::string& v : split_list(variants_text)) variants.push_back(parse_variant(v));
  std::vector<std::uint64_t> seeds;
  for (const std::string& s : split_list(seeds_text)) seeds.push_back(std::stoull(s));
  if (variants.empty() || seeds.empty()) throw ConfigError("--variants and --seeds must not be empty");
  return config.precision == io::Precision::f64 ? ablate_impl<double>(config, variants, seeds, out)
                                                : ablate_impl<float>(config, variants, seeds, out);
}

template <typename T>
Tensor<float> sigmoid_map(const Tensor<T>& logits) {
  Tensor<float> out(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<float>(1.0 / (1.0 + std::exp(-double(logits[i]))));
  return out;
}

template <typename T>
int dump_impl(const std::string& checkpoint, const std::string& split, std::size_t index, const fs::path& out,
              bool attention) {
  const Checkpoint<T> ck = load_checkpoint<T>(checkpoint);
  const EavlModel<T> model = ck.restore_model();
  const std::vector<Sample> samples = split_samples(ck, split);
  if (index >= samples.size()) {
    throw ConfigError("sample " + std::to_string(index) + " is out of range (split holds " +
                      std::to_string(samples.size()) + ")");
  }
  const Sample& s = samples[index];
  fs::create_directories(out);
  Tape<T> tape;
  ForwardOptions options;
  options.keep_cross_attention = attention;
  const TokenSequence tokens = tokenize(s.expression, Vocabulary::synthetic(), model.config().max_tokens);
  const ForwardResult<T> r = model.forward(tape, s.image.cast<T>(), tokens, options);
  std::ofstream(out / "expression.txt") << s.expression << "\n";
  if (attention) {
    io::save_tensor(out / "query_attention.eavt", r.queries.attention.value());
    for (std::size_t i = 0; i < r.cross_attention.size(); ++i) {
      io::save_tensor(out / ("cross_attention_" + std::to_string(i) + ".eavt"), r.cross_attention[i]);
    }
    std::cout << "wrote query attention and " << r.cross_attention.size() << " cross-attention maps to "
              << out.string() << "\n";
    return kExitOk;
  }
  const Tensor<T>& masks = r.bundle.masks.value();
  const std::size_t n = masks.dim(0), h = masks.dim(1), w = masks.dim(2);
  io::save_tensor(out / "masks.eavt", masks);
  io::save_tensor(out / "scores.eavt", r.bundle.scores.value());
  io::save_tensor(out / "prediction.eavt", r.bundle.prediction.value());
  for (std::size_t q = 0; q < n; ++q) {
    Tensor<T> one({h, w});
    std::copy(masks.ptr() + q * h * w, masks.ptr() + (q + 1) * h * w, one.ptr());
    write_pgm(out / ("mask_" + std::to_string(q) + ".pgm"), sigmoid_map(one));
  }
  write_pgm(out / "prediction.pgm", sigmoid_map(r.bundle.prediction.value()));
  write_pgm(out / "prediction_binary.pgm", binarize_prediction(r.bundle.prediction.value(), s.gt_mask.dim(0), s.gt_mask.dim(1)));
  write_pgm(out / "ground_truth.pgm", s.gt_mask);
  write_ppm(out / "image.ppm", s.image);
  std::cout << "wrote " << n << " masks for \"" << s.expression << "\" to " << out.string() << "\n";
  return kExitOk;
}

int cmd_dump(const std::string& checkpoint, const std::string& split, std::size_t index, const std::string& out,
             bool attention) {
  return checkpoint_precision(checkpoint) == io::Precision::f64
             ? dump_impl<double>(checkpoint, split, index, out, attention)
             : dump_impl<float>(checkpoint, split, index, out, attention);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring segmentation with query-based dynamic kernels"};
  app.require_subcommand(1);

  std::string manifest, gen_out, train_out = "run", ablate_out, masks_out = "dump", attn_out = "attention", config, resume, checkpoint, split = "train", variants = "full", seeds = "1,2,3";
  double min_miou = 0.0, eps = 1e-5;
  std::size_t sample = 0, max_entries = 0;
  bool probe_unused = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic split from a MANIFEST");
  gen->add_option("--manifest", manifest, "Split manifest (key = value)")->required();
  gen->add_option("--out", gen_out, "Output directory (default: <manifest dir>/<split.name>)");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "Training config (key = value)")->required();
  train->add_option("--out", train_out, "Run directory for metrics.jsonl and checkpoint.eavc")->capture_default_str();
  train->add_option("--resume", resume, "Continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", split, "train, eval, or a dataset directory")->default_val("train");
  eval->add_option("--min-miou", min_miou, "Exit with status 3 when mean IoU is lower");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks on the tiny model");
  grad->add_option("--max-entries", max_entries, "Entries probed per parameter (0 = all)");
  grad->add_option("--eps", eps, "Central-difference step")->default_val(1e-5);
  grad->add_flag("--probe-unused", probe_unused, "Include a block with an unused parameter");

  auto* ablate = app.add_subcommand("ablate", "Train and compare head variants");
  ablate->add_option("--config", config, "Base training config")->required();
  ablate->add_option("--variants", variants, "Comma list of <mode>[:nq=<N>]")->required();
  ablate->add_option("--seeds", seeds, "Comma list of seeds")->default_val("1,2,3");
  ablate->add_option("--out", ablate_out, "Also write the table here");

  auto* masks = app.add_subcommand("dump-masks", "Write per-query masks, scores and the prediction");
  masks->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  masks->add_option("--sample", sample, "Sample index")->required();
  masks->add_option("--split", split, "train, eval, or a dataset directory")->default_val("train");
  masks->add_option("--out", masks_out, "Output directory")->capture_default_str();

  auto* attn = app.add_subcommand("dump-attention", "Write query and decoder cross-attention maps");
  attn->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  attn->add_option("--sample", sample, "Sample index")->default_val(0);
  attn->add_option("--split", split, "train, eval, or a dataset directory")->default_val("train");
  attn->add_option("--out", attn_out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(manifest, gen_out);
    if (*train) return cmd_train(config, train_out, resume);
    if (*eval) return cmd_eval(checkpoint, split, min_miou);
    if (*grad) return cmd_gradcheck(max_entries, probe_unused, eps);
    if (*ablate) return cmd_ablate(config, variants, seeds, ablate_out);
    if (*masks) return cmd_dump(checkpoint, split, sample, masks_out, false);
    if (*attn) return cmd_dump(checkpoint, split, sample, attn_out, true);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
