// SPDX-License-Identifier: Apache-2.0
#include "eavl/gradcheck_suite.hpp"

#include <random>

#include "eavl/metrics.hpp"
#include "eavl/model.hpp"

namespace eavl {

namespace {

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Fixed random projection of several outputs onto one scalar.
Var<double> probe(Tape<double>& tape, std::initializer_list<Var<double>> outputs, std::uint64_t seed) {
  Rng rng(seed);
  Var<double> total = tape.constant(Tensor<double>::scalar(0.0));
  for (const Var<double>& v : outputs) total = ops::add(total, ops::weighted_sum(v, random_tensor(v.shape(), rng)));
  return total;
}

/// Moves every parameter off its initial value so that zero biases do not sit
/// exactly on a ReLU kink.
void jitter(ParameterStore<double>& store, Rng& rng) {
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (double& v : store[i].value.data()) v += u(rng);
  }
}

std::vector<Parameter<double>*> with_prefix(ParameterStore<double>& store, const std::string& prefix) {
  std::vector<Parameter<double>*> out;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (prefix.empty() || store[i].name.rfind(prefix, 0) == 0) out.push_back(&store[i]);
  }
  return out;
}

}  // namespace

std::vector<GradBlockResult> run_gradcheck_suite(const GradSuiteOptions& options, const ModelConfig& config) {
  std::vector<GradBlockResult> results;
  Rng data_rng(options.input_seed);
  const std::uint64_t ps = options.check.seed;
  const Vocabulary vocab = Vocabulary::synthetic();
  const TokenSequence tokens = tokenize("red circle on the left", vocab, config.max_tokens);
  const Tensor<double> image = random_tensor({config.image_height, config.image_width, 3}, data_rng, 0.0, 1.0);
  const std::size_t c = config.width, h3 = config.grid_height(), w3 = config.grid_width();

  {
    ParameterStore<double> store;
    Rng rng(1);
    Linear<double> lin(store, "stub", 5, 3, rng);
    const Tensor<double> x = random_tensor({4, 5}, data_rng);
    GradBlockResult r{"linear_stub", {}, 1e-9};
    r.report = grad_check([&](Tape<double>& t) { return lin(t, t.constant(x)); }, with_prefix(store, ""), options.check);
    results.push_back(r);
    if (options.include_unused_probe) {
      store.add("stub.unused", random_tensor({2}, data_rng));
      GradBlockResult u{"unused_parameter_probe", {}, 1e-9};
      u.report = grad_check([&](Tape<double>& t) { return lin(t, t.constant(x)); }, with_prefix(store, ""),
                            options.check);
      results.push_back(u);
    }
  }

  EavlModel<double> model(config);
  ParameterStore<double>& store = model.parameters();
  jitter(store, data_rng);

  const Tensor<double> v2t = random_tensor({2 * h3, 2 * w3, c}, data_rng);
  const Tensor<double> v3t = random_tensor({h3, w3, c}, data_rng);
  const Tensor<double> v4t = random_tensor({h3 / 2, w3 / 2, c}, data_rng);
  const Tensor<double> vgt = random_tensor({c}, data_rng);
  const Tensor<double> ftt = random_tensor({config.max_tokens, c}, data_rng);
  const Tensor<double> tgt = random_tensor({config.text_width}, data_rng);
  auto image_features = [&](Tape<double>& t) {
    return ImageFeatures<double>{t.constant(v2t), t.constant(v3t), t.constant(v4t), t.constant(vgt)};
  };
  auto text_features = [&](Tape<double>& t) { return TextFeatures<double>{t.constant(ftt), t.constant(tgt)}; };

  auto run = [&](const std::string& name, const std::string& prefix, const GradCheckFn& f) {
    GradBlockResult r{name, {}, 1e-4};
    r.report = grad_check(f, with_prefix(store, prefix), options.check);
    results.push_back(r);
  };

  run("text_encoder", "text.", [&](Tape<double>& t) {
    const TextFeatures<double> f = model.text_encoder().encode(t, tokens);
    return probe(t, {f.tokens, f.global}, ps);
  });
  run("image_encoder", "image.", [&](Tape<double>& t) {
    const ImageFeatures<double> f = model.image_encoder().encode(t, image);
    return probe(t, {f.v2, f.v3, f.v4, f.global}, ps);
  });
  run("fusion_neck", "neck.", [&](Tape<double>& t) {
    const FusedFeatures<double> f = model.neck().forward(t, image_features(t), t.constant(tgt));
    return probe(t, {f.tokens}, ps);
  });
  run("query_generator", "qgen.", [&](Tape<double>& t) {
    const QuerySet<double> q = model.query_generator().forward(t, image_features(t), text_features(t), tokens.valid());
    return probe(t, {q.queries, q.attention}, ps);
  });

  const Tensor<double> fvt = random_tensor({h3 * w3, c}, data_rng);
  const Tensor<double> fq = random_tensor({config.num_queries, c}, data_rng);
  run("decoder", "decoder.", [&](Tape<double>& t) {
    return probe(t, {model.decoder().decode(t, t.constant(fvt), t.constant(fq), h3, w3)}, ps);
  });

  const Tensor<double> fs = random_tensor({h3, w3, c}, data_rng);
  run("aligner", "aligner.", [&](Tape<double>& t) {
    const VisionLanguageAligner<double>& a = model.aligner();
    Var<double> fp = a.project_fp(t, t.constant(fs));
    Var<double> queries = t.constant(fq);
    std::vector<Var<double>> masks;
    for (std::size_t n = 0; n < config.num_queries; ++n) {
      masks.push_back(a.apply_dynamic_kernel(t, fp, a.kernel_from_query(t, ops::row(queries, n), n)));
    }
    Var<double> stacked = ops::reshape(ops::stack_rows<double>(masks), {config.num_queries, fp.dim(0), fp.dim(1)});
    Var<double> scores = a.score_queries(t, queries);
    return probe(t, {a.aggregate(t, stacked, scores), scores}, ps);
  });

  Tensor<float> gt({config.mask_height(), config.mask_width()}, 0.0f);
  for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = (data_rng() % 3 == 0) ? 1.0f : 0.0f;
  for (Mode mode : {Mode::full, Mode::fixed_kernel, Mode::no_estimator, Mode::no_fvg}) {
    ModelConfig mc = config;
    mc.mode = mode;
    EavlModel<double> m(mc);
    jitter(m.parameters(), data_rng);
    GradBlockResult r{"end_to_end:" + to_string(mode), {}, 1e-4};
    r.report = grad_check(
        [&](Tape<double>& t) {
          const ForwardResult<double> f = m.forward(t, image, tokens);
          return bce_loss(f.bundle.prediction, gt);
        },
        with_prefix(m.parameters(), ""), options.check);
    results.push_back(r);
  }
  return results;
}

}  // namespace eavl
