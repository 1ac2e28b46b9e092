// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, exit status 3 when any
// criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "eavl/checkpoint.hpp"
#include "eavl/gradcheck_suite.hpp"
#include "eavl/training.hpp"

using namespace eavl;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

template <typename T>
Tensor<T> uniform(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

std::string random_expression(std::mt19937_64& rng, std::size_t max_words) {
  const Vocabulary& vocab = Vocabulary::synthetic();
  std::uniform_int_distribution<std::size_t> count(0, max_words);
  std::uniform_int_distribution<std::size_t> word(Vocabulary::kPad + 1, vocab.size() - 1);
  std::string s;
  for (std::size_t n = count(rng); n > 0; --n) s += (s.empty() ? "" : " ") + vocab.word(word(rng));
  return s;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const std::vector<GradBlockResult> blocks = run_gradcheck_suite();
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_block, failed;
  for (const GradBlockResult& b : blocks) {
    if (b.report.max_rel_error >= worst) {
      worst = b.report.max_rel_error;
      worst_block = b.block;
    }
    if (b.report.max_rel_error >= 1e-4) failed += " " + b.block;
  }
  Outcome o;
  o.passed = failed.empty() && elapsed < 120.0 && !blocks.empty();
  o.detail = std::to_string(blocks.size()) + " blocks, worst " + fmt(worst) + " (" + worst_block + "), " +
             fmt(elapsed, 3) + " s";
  if (!failed.empty()) o.detail += ", over threshold:" + failed;
  return o;
}

template <typename T>
Tensor<T> dynamic_conv_oracle(const Tensor<T>& fp, const Tensor<T>& w, T bias) {
  const long h = static_cast<long>(fp.dim(0)), wd = static_cast<long>(fp.dim(1));
  const long cp = static_cast<long>(fp.dim(2));
  Tensor<T> out({fp.dim(0), fp.dim(1)});
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < wd; ++x) {
      T acc = bias;
      for (long ky = 0; ky < 3; ++ky)
        for (long kx = 0; kx < 3; ++kx) {
          const long sy = y + ky - 1, sx = x + kx - 1;
          if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
          for (long c = 0; c < cp; ++c) acc += fp[(sy * wd + sx) * cp + c] * w[(ky * 3 + kx) * cp + c];
        }
      out[y * wd + x] = acc;
    }
  return out;
}

template <typename T>
double dynamic_conv_cases(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> side(1, 12);
  const std::size_t widths[] = {2, 4, 8, 16, 32, 64};
  double worst = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    ModelConfig c = ModelConfig::tiny();
    c.width = widths[i % 6];
    c.heads = 1;
    ParameterStore<T> store;
    Rng init(seed + i);
    const VisionLanguageAligner<T> aligner(store, c, init);
    const std::size_t cp = c.proj_channels(), h = side(rng), w = side(rng);
    const Tensor<T> fp = uniform<T>({h, w, cp}, rng);
    const Tensor<T> weights = uniform<T>({3, 3, cp, 1}, rng);
    const Tensor<T> bias = uniform<T>({1}, rng);
    Tape<T> tape;
    DynamicKernel<T> kernel{tape.constant(weights), tape.constant(bias), 0};
    const Tensor<T> got = aligner.apply_dynamic_kernel(tape, tape.constant(fp), kernel).value();
    const Tensor<T> want = dynamic_conv_oracle(fp, weights, bias[0]);
    if (got.shape() != want.shape()) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, static_cast<double>(max_abs_diff(got, want)));
  }
  return worst;
}

Outcome dynamic_conv() {
  const double f = dynamic_conv_cases<float>(120, 100);
  const double d = dynamic_conv_cases<double>(120, 200);
  return {f <= 1e-6 && d == 0.0, "120 cases per precision, max abs float " + fmt(f) + ", double " + fmt(d)};
}

Outcome kernel_bookkeeping() {
  std::mt19937_64 rng(3);
  const std::size_t widths[] = {8, 16, 64};
  std::size_t checked = 0, bad = 0;
  for (std::size_t trial = 0; trial < 30; ++trial) {
    const std::size_t width = widths[rng() % 3];
    ModelConfig c = ModelConfig::tiny();
    c.width = width;
    c.num_queries = 1 + rng() % 4;
    ParameterStore<float> store;
    Rng init(trial);
    const VisionLanguageAligner<float> aligner(store, c, init);
    const std::size_t expect = 9 * aligner.proj_channels() + 1;
    const Parameter<float>& gen = store.get("aligner.kernel_gen.bias");
    bad += gen.value.size() != expect;
    Tape<float> tape;
    const Tensor<float> queries = uniform<float>({c.num_queries, width}, rng);
    for (std::size_t n = 0; n < c.num_queries; ++n) {
      Tensor<float> q({width});
      std::copy_n(queries.data().begin() + static_cast<long>(n * width), width, q.data().begin());
      const DynamicKernel<float> k = aligner.kernel_from_query(tape, tape.constant(q), n);
      bad += k.scalar_count() != expect;
      bad += k.weights.shape() != Shape{3, 3, aligner.proj_channels(), 1};
      bad += k.bias.value().size() != 1;
      bad += serialize_kernel(k).size() != expect;
      ++checked;
    }
  }
  return {bad == 0, std::to_string(checked) + " kernels over widths 8/16/64, " + std::to_string(bad) + " mismatches"};
}

Outcome normalisation() {
  std::mt19937_64 rng(4);
  const Mode modes[] = {Mode::full, Mode::no_fvg, Mode::no_estimator};
  const std::size_t query_counts[] = {1, 2, 3, 5, 8};
  double row_err = 0.0, score_err = 0.0;
  std::size_t pad_nonzero = 0, inputs = 0, rows = 0;
  for (std::size_t group = 0; group < 10; ++group) {
    ModelConfig c = ModelConfig::tiny();
    c.max_tokens = 17;
    c.mode = modes[group % 3];
    c.num_queries = query_counts[group % 5];
    c.init_seed = group;
    const EavlModel<float> model(c);
    for (std::size_t i = 0; i < 100; ++i, ++inputs) {
      const Tensor<float> image = uniform<float>({16, 16, 3}, rng, 0.0, 1.0);
      const TokenSequence tokens = tokenize(random_expression(rng, 20), Vocabulary::synthetic(), c.max_tokens);
      const std::vector<bool> valid = tokens.valid();
      Tape<float> tape;
      const ForwardResult<float> f = model.forward(tape, image, tokens);
      const Tensor<float> a = f.queries.attention.value();
      const std::size_t len = a.dim(1);
      for (std::size_t n = 0; n < a.dim(0); ++n, ++rows) {
        double sum = 0.0;
        for (std::size_t l = 0; l < len; ++l) {
          const float v = a[n * len + l];
          sum += v;
          if (!valid[l] && v != 0.0f) ++pad_nonzero;
        }
        row_err = std::max(row_err, std::abs(sum - 1.0));
      }
      if (c.mode != Mode::no_estimator) {
        double sum = 0.0;
        for (float s : f.bundle.scores.value().data()) sum += s;
        score_err = std::max(score_err, std::abs(sum - 1.0));
      }
    }
  }
  return {row_err <= 1e-6 && score_err <= 1e-6 && pad_nonzero == 0,
          std::to_string(inputs) + " inputs, " + std::to_string(rows) + " rows, max |row sum - 1| " + fmt(row_err) +
              ", max |score sum - 1| " + fmt(score_err) + ", nonzero PAD weights " + std::to_string(pad_nonzero)};
}

template <typename T>
std::pair<bool, double> single_query(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  bool scores_exact = true;
  double worst = 0.0;
  for (std::size_t i = 0; i < 25; ++i) {
    ModelConfig c = ModelConfig::tiny();
    c.num_queries = 1;
    c.init_seed = seed + i;
    const EavlModel<T> model(c);
    Tape<T> tape;
    const ForwardResult<T> f = model.forward(tape, uniform<T>({16, 16, 3}, rng, 0.0, 1.0),
                                             tokenize(random_expression(rng, 6), Vocabulary::synthetic(), c.max_tokens));
    const Tensor<T> s = f.bundle.scores.value();
    scores_exact = scores_exact && s.size() == 1 && s[0] == T(1);
    const Tensor<T> masks = f.bundle.masks.value();
    worst = std::max(worst, static_cast<double>(max_abs_diff(f.bundle.prediction.value(),
                                                                masks.reshaped(f.bundle.prediction.shape()))));
  }
  return {scores_exact, worst};
}

Outcome degeneracy() {
  const auto [sf, df] = single_query<float>(50);
  const auto [sd, dd] = single_query<double>(80);
  return {sf && sd && df <= 1e-7 && dd <= 1e-7,
          std::string("S_q == [1] ") + (sf && sd ? "in every case" : "violated") + ", max |y - mask| float " + fmt(df) +
              ", double " + fmt(dd)};
}

Outcome permutation() {
  std::mt19937_64 rng(6);
  ModelConfig c = ModelConfig::desk();
  c.init_seed = 6;
  const EavlModel<float> model(c);
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const Tensor<float> image = uniform<float>({64, 64, 3}, rng, 0.0, 1.0);
    const TokenSequence tokens = tokenize(random_expression(rng, 12), Vocabulary::synthetic(), c.max_tokens);
    std::vector<std::size_t> order(c.num_queries);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    ForwardOptions opt;
    opt.query_order = &order;
    Tape<float> tape;
    const Tensor<float> a = model.forward(tape, image, tokens).bundle.prediction.value();
    const Tensor<float> b = model.forward(tape, image, tokens, opt).bundle.prediction.value();
    double scale = 0.0;
    for (float v : a.data()) scale = std::max(scale, static_cast<double>(std::abs(v)));
    worst = std::max(worst, static_cast<double>(max_abs_diff(a, b)) / std::max(scale, 1e-30));
  }
  return {worst <= 1e-5, "20 trials on the desk model, max relative difference " + fmt(worst)};
}

Outcome overfit() {
  TrainConfig c;
  c.model = ModelConfig::desk();
  c.steps = 5000;
  c.seed = 1;
  c.adam.lr = 3e-4;
  c.train_data.count = 64;
  c.eval_data.count = 0;
  const std::vector<Sample> train = load_train_split(c);
  const auto t0 = Clock::now();
  Trainer<float> trainer(c, train);
  double best = 0.0, last_loss = 0.0;
  std::size_t reached_at = 0;
  bool out_of_time = false;
  while (trainer.completed_steps() < c.steps) {
    last_loss = trainer.step().loss;
    const std::size_t s = trainer.completed_steps();
    if (s % 500 == 0 || s == c.steps) {
      const double miou = trainer.evaluate_split(false).mean_iou;
      std::cerr << "  overfit step " << s << " loss " << fmt(last_loss) << " train mIoU " << fmt(miou) << " ("
                << fmt(seconds_since(t0), 4) << " s)\n";
      best = std::max(best, miou);
      if (miou >= 0.85) {
        reached_at = s;
        break;
      }
    }
    if (seconds_since(t0) > 1800.0) {
      out_of_time = true;
      break;
    }
  }
  const double elapsed = seconds_since(t0);
  Outcome o;
  o.passed = reached_at > 0 && elapsed < 1800.0;
  o.detail = "best train mIoU " + fmt(best) + " after " + std::to_string(trainer.completed_steps()) + " steps, loss " +
             fmt(last_loss) + ", " + fmt(elapsed, 4) + " s";
  if (out_of_time) o.detail += ", stopped at the 30 min limit";
  return o;
}

// Scaled-down benchmark shared by the trend criteria.
TrainConfig trend_config() {
  TrainConfig c;
  c.model = ModelConfig::desk();
  c.model.width = 32;
  c.model.text_width = 32;
  c.model.num_queries = 4;
  c.model.backbone = {8, 16, 32, 32};
  c.model.image_height = 32;
  c.model.image_width = 32;
  c.steps = 1500;
  c.batch_size = 8;
  c.train_data.count = 256;
  c.train_data.seed = 1;
  c.train_data.grammar = GrammarConfig::for_image(32, 32);
  c.eval_data = c.train_data;
  c.eval_data.name = "eval";
  c.eval_data.seed = 777;
  c.eval_data.count = 128;
  return c;
}

std::map<Mode, double> trend_medians;

void run_trends() {
  if (!trend_medians.empty()) return;
  const std::vector<AblationVariant> variants = {
      {Mode::full, 0}, {Mode::fixed_kernel, 0}, {Mode::no_estimator, 0}, {Mode::no_fvg, 0}};
  const std::vector<AblationRow> rows = run_ablation<float>(trend_config(), variants, {1, 2, 3}, &std::cerr);
  std::cerr << format_ablation_table(rows);
  for (const AblationRow& r : rows) trend_medians[r.variant.mode] = r.median.mean_iou;
}

Outcome trend_fixed_kernel() {
  run_trends();
  const double full = trend_medians.at(Mode::full), fixed = trend_medians.at(Mode::fixed_kernel);
  return {full >= fixed, "median held-out mIoU full " + fmt(full) + ", fixed_kernel " + fmt(fixed) + ", gap " +
                             fmt(100.0 * (full - fixed), 3) + " points"};
}

Outcome trend_components() {
  run_trends();
  const double full = trend_medians.at(Mode::full);
  const double ne = trend_medians.at(Mode::no_estimator), nf = trend_medians.at(Mode::no_fvg);
  return {full >= ne && full >= nf,
          "median held-out mIoU full " + fmt(full) + ", no_estimator " + fmt(ne) + ", no_fvg " + fmt(nf)};
}

// Brute-force metric oracles.
Tensor<float> rect(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t bh, std::size_t bw) {
  Tensor<float> m({h, w});
  for (std::size_t y = y0; y < y0 + bh; ++y)
    for (std::size_t x = x0; x < x0 + bw; ++x) m.at(y, x) = 1.0f;
  return m;
}

double iou_oracle(const Tensor<float>& p, const Tensor<float>& g) {
  std::size_t i = 0, u = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    i += p[k] > 0.5f && g[k] > 0.5f;
    u += p[k] > 0.5f || g[k] > 0.5f;
  }
  return u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
}

double bilinear_at(const Tensor<double>& x, double sy, double sx) {
  const double h = static_cast<double>(x.dim(0)), w = static_cast<double>(x.dim(1));
  sy = std::clamp(sy, 0.0, h - 1);
  sx = std::clamp(sx, 0.0, w - 1);
  const std::size_t y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, x.dim(0) - 1), x1 = std::min(x0 + 1, x.dim(1) - 1);
  const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
  return (1 - fy) * ((1 - fx) * x.at(y0, x0) + fx * x.at(y0, x1)) + fy * ((1 - fx) * x.at(y1, x0) + fx * x.at(y1, x1));
}

Outcome metrics() {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  const Tensor<float> a = rect(20, 20, 0, 0, 10, 10), strip = rect(20, 20, 0, 5, 10, 10);
  expect(iou(a, strip) == 1.0 / 3.0, "5x10 strip overlap");
  expect(iou(a, a) == 1.0, "identical masks");
  expect(iou(a, rect(20, 20, 10, 10, 10, 10)) == 0.0, "disjoint masks");
  expect(iou(Tensor<float>({20, 20}), Tensor<float>({20, 20})) == 1.0, "both empty");

  std::mt19937_64 rng(10);
  for (std::size_t i = 0; i < 200; ++i) {
    const Tensor<float> p = uniform<float>({9, 13}, rng, 0.0, 1.0), g = uniform<float>({9, 13}, rng, 0.0, 1.0);
    if (iou(p, g) != iou_oracle(p, g)) {
      failures.push_back("random iou case " + std::to_string(i));
      break;
    }
  }

  std::vector<double> thresholds;
  const EvalReport single = summarize({IouCounts{3, 4}});
  for (const auto& [k, v] : single.precision_at) thresholds.push_back(k);
  expect(thresholds == std::vector<double>{0.5, 0.6, 0.7, 0.8, 0.9}, "threshold set");
  std::vector<IouCounts> ladder;
  for (std::size_t i = 0; i <= 20; ++i) ladder.push_back({i, 20});
  const EvalReport st = summarize(ladder);
  for (double x : {0.5, 0.6, 0.7, 0.8, 0.9}) {
    double above = 0;
    for (std::size_t i = 0; i <= 20; ++i) above += static_cast<double>(i) / 20.0 > x;
    expect(st.precision_at.at(x) == above / 21.0, "staircase at " + fmt(x));
  }
  expect(summarize({IouCounts{1, 2}}).precision_at.at(0.5) == 0.0, "IoU equal to the threshold");

  ModelConfig c = ModelConfig::tiny();
  c.image_height = c.image_width = 32;
  const EavlModel<double> model(c);
  DatasetSpec spec;
  spec.seed = 21;
  spec.count = 10;
  spec.grammar = GrammarConfig::for_image(32, 32);
  const std::vector<Sample> data = generate_dataset(spec);
  const EvalReport r = evaluate(model, data);
  std::size_t inter = 0, uni = 0;
  std::vector<double> per;
  for (const Sample& s : data) {
    const Tensor<double> logits = predict(model, s);
    const double ry = static_cast<double>(logits.dim(0)) / 32.0, rx = static_cast<double>(logits.dim(1)) / 32.0;
    std::size_t i = 0, u = 0;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const bool p = bilinear_at(logits, (static_cast<double>(y) + 0.5) * ry - 0.5,
                                   (static_cast<double>(x) + 0.5) * rx - 0.5) > 0.0;
        const bool g = s.gt_mask.at(y, x) > 0.5f;
        i += p && g;
        u += p || g;
      }
    inter += i;
    uni += u;
    per.push_back(u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u));
  }
  const double mean = std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
  expect(r.per_image_iou == per, "evaluate per-image IoU");
  expect(std::abs(r.mean_iou - mean) < 1e-12, "evaluate mean IoU");
  expect(std::abs(r.overall_iou - static_cast<double>(inter) / static_cast<double>(uni)) < 1e-12,
         "evaluate overall IoU");
  for (double x : {0.5, 0.6, 0.7, 0.8, 0.9}) {
    double above = 0;
    for (double v : per) above += v > x;
    expect(r.precision_at.at(x) == above / static_cast<double>(per.size()), "evaluate Pr@" + fmt(x));
  }

  std::string detail = "handcrafted IoU, Pr@X staircase and evaluate oracle";
  if (!failures.empty()) {
    detail += "; failed:";
    for (const std::string& f : failures) detail += " [" + f + "]";
  }
  return {failures.empty(), detail};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Outcome determinism(const std::string& cli, const fs::path& work) {
  TrainConfig c;
  c.model = ModelConfig::tiny();
  c.model.max_tokens = 17;
  c.steps = 40;
  c.batch_size = 4;
  c.seed = 5;
  c.eval_every = 10;
  c.log_every = 5;
  c.train_data.count = 16;
  c.train_data.grammar = GrammarConfig::for_image(16, 16);
  c.eval_data = c.train_data;
  c.eval_data.name = "eval";
  c.eval_data.seed = 2;
  c.eval_data.count = 8;
  fs::remove_all(work);
  fs::create_directories(work);
  c.dump_dir = (work / "dump").string();
  c.to_file().save(work / "run.cfg");

  std::string log_a, log_b;
  if (!cli.empty()) {
    for (const char* run : {"a", "b"}) {
      const std::string cmd = "\"" + cli + "\" train --config \"" + (work / "run.cfg").string() + "\" --out \"" +
                              (work / run).string() + "\" > \"" + (work / run).string() + ".stdout\" 2>&1";
      if (std::system(cmd.c_str()) != 0) return {false, "train command failed: " + cmd};
    }
    log_a = slurp(work / "a" / "metrics.jsonl");
    log_b = slurp(work / "b" / "metrics.jsonl");
  } else {
    for (const char* run : {"a", "b"}) {
      const TrainConfig rc = TrainConfig::from_file(KeyValueFile::load(work / "run.cfg"));
      Trainer<float> t(rc, load_train_split(rc), load_eval_split(rc));
      std::ostringstream log;
      t.run(&log);
      fs::create_directories(work / run);
      save_checkpoint(work / run / "checkpoint.eavc", t.checkpoint());
      (std::string(run) == "a" ? log_a : log_b) = log.str();
    }
  }
  const bool logs_equal = !log_a.empty() && log_a == log_b;

  const fs::path ck_path = work / "a" / "checkpoint.eavc";
  const Checkpoint<float> ck = load_checkpoint<float>(ck_path);
  save_checkpoint(work / "resaved.eavc", ck);
  const bool bytes_equal = slurp(ck_path) == slurp(work / "resaved.eavc");

  Trainer<float> in_process(c, load_train_split(c));
  while (in_process.completed_steps() < c.steps) in_process.step();
  const Checkpoint<float> reference = in_process.checkpoint();
  bool state_equal = ck.step == reference.step && ck.rng_state == reference.rng_state &&
                     ck.order == reference.order && ck.cursor == reference.cursor &&
                     ck.adam_steps == reference.adam_steps && ck.params.size() == reference.params.size();
  for (std::size_t i = 0; state_equal && i < ck.params.size(); ++i) {
    state_equal = ck.params[i].value == reference.params[i].value && ck.adam_m[i] == reference.adam_m[i] &&
                  ck.adam_v[i] == reference.adam_v[i];
  }

  const EavlModel<float> restored = ck.restore_model();
  bool forward_equal = true;
  for (const Sample& s : load_eval_split(c)) forward_equal = forward_equal && predict(restored, s) == predict(in_process.model(), s);

  Outcome o;
  o.passed = logs_equal && bytes_equal && state_equal && forward_equal;
  o.detail = std::string(cli.empty() ? "in-process" : "CLI") + " runs: logs " + (logs_equal ? "identical" : "differ") +
             " (" + std::to_string(log_a.size()) + " bytes), checkpoint re-save " +
             (bytes_equal ? "byte-identical" : "differs") + ", state " + (state_equal ? "exact" : "differs") +
             ", forward " + (forward_equal ? "exact" : "differs");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Acceptance criteria");
  std::string only, cli, report, workdir = (fs::temp_directory_path() / "eavl_acceptance").string();
  app.add_option("--only", only, "Comma list of criterion numbers to run (default: all)");
  app.add_option("--cli", cli, "Path to the eavl executable used for the determinism runs");
  app.add_option("--report", report, "Write results as JSON");
  app.add_option("--workdir", workdir, "Scratch directory");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream ss(only);
    for (std::string item; std::getline(ss, item, ',');) selected.insert(std::stoi(item));
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"dynamic-conv oracle", dynamic_conv},
      {"kernel bookkeeping", kernel_bookkeeping},
      {"normalisation invariants", normalisation},
      {"single-query degeneracy", degeneracy},
      {"query permutation invariance", permutation},
      {"desk overfit", overfit},
      {"full vs fixed_kernel trend", trend_fixed_kernel},
      {"full vs no_estimator / no_fvg trend", trend_components},
      {"metric oracles", metrics},
      {"determinism and checkpoint round trip", [&] { return determinism(cli, workdir); }},
  };

  nlohmann::ordered_json results = nlohmann::json::array();
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << "  [" << id << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
    results.push_back({{"criterion", id},
                       {"name", criteria[i].first},
                       {"passed", o.passed},
                       {"detail", o.detail},
                       {"seconds", seconds_since(t0)}});
  }
  if (!report.empty()) std::ofstream(report) << results.dump(2) << "\n";
  return failed == 0 ? 0 : 3;
}
