// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "eavl/gradcheck.hpp"
#include "eavl/query_generator.hpp"
#include "test_util.hpp"

using namespace eavl;
using namespace eavl::testing;

namespace {

struct Pyramid {
  Tensor<double> v2, v3, v4, global, text_global;
};

Pyramid random_pyramid(const ModelConfig& c, std::mt19937_64& rng) {
  const std::size_t h3 = c.grid_height(), w3 = c.grid_width();
  return {random_tensor<double>({2 * h3, 2 * w3, c.width}, rng), random_tensor<double>({h3, w3, c.width}, rng),
          random_tensor<double>({h3 / 2, w3 / 2, c.width}, rng), random_tensor<double>({c.width}, rng),
          random_tensor<double>({c.text_width}, rng)};
}

ImageFeatures<double> on_tape(Tape<double>& t, const Pyramid& p) {
  return {t.constant(p.v2), t.constant(p.v3), t.constant(p.v4), t.constant(p.global)};
}

Tensor<double> mul_rows(Tensor<double> x, const Tensor<double>& v) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] *= v[i % v.size()];
  return x;
}

Tensor<double> as_row(const Tensor<double>& v) { return v.reshaped({1, v.size()}); }

struct NeckOracle {
  Tensor<double> m4, fused, integrated;
};

/// Step-by-step reference for the fusion neck built from plain loops.
NeckOracle neck_oracle(const ParameterStore<double>& s, const std::string& n, const Pyramid& p, bool gated) {
  Tensor<double> vis = relu_oracle(conv_oracle(p.v4, s, n + ".v4"));
  if (gated) vis = mul_rows(vis, relu_oracle(linear_oracle(as_row(p.text_global), s, n + ".tg")));
  NeckOracle o;
  o.m4 = formula_upsample(vis);
  const Tensor<double> a = relu_oracle(conv_oracle(o.m4, s, n + ".m4"));
  const Tensor<double> b = relu_oracle(conv_oracle(p.v3, s, n + ".v3"));
  const Tensor<double> m3 = concat_oracle({&a, &b});
  const Tensor<double> c = relu_oracle(conv_oracle(m3, s, n + ".m3"));
  const Tensor<double> d = relu_oracle(conv_oracle(avgpool_oracle(p.v2), s, n + ".v2"));
  const Tensor<double> m2 = concat_oracle({&c, &d});
  o.fused = conv_oracle(concat_oracle({&m2, &m3, &o.m4}), s, n + ".aggregate");
  const Tensor<double> coords = coord_features<double>(o.fused.dim(0), o.fused.dim(1));
  o.integrated = conv_oracle(concat_oracle({&o.fused, &coords}), s, n + ".integrate");
  return o;
}

ModelConfig neck_config() {
  ModelConfig c = small_config();
  c.width = 6;
  c.text_width = 5;
  c.heads = 1;
  c.image_height = 32;
  c.image_width = 48;
  return c;
}

}  // namespace

TEST_SUITE("coordinates") {
  TEST_CASE("corners, centre and a 4x4 table") {
    const Tensor<double> c = coord_features<double>(3, 5);
    CHECK(c.at(0, 0, 0) == -1.0);
    CHECK(c.at(0, 0, 1) == -1.0);
    CHECK(c.at(1, 2, 0) == 0.0);
    CHECK(c.at(1, 2, 1) == 0.0);
    CHECK(c.at(2, 4, 0) == 1.0);
    const Tensor<double> t = coord_features<double>(4, 4);
    const double lin[4] = {-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0};
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        CHECK(t.at(y, x, 0) == doctest::Approx(lin[x]).epsilon(1e-15));
        CHECK(t.at(y, x, 1) == doctest::Approx(lin[y]).epsilon(1e-15));
      }
    CHECK(coord_features<double>(1, 1)[0] == 0.0);
    CHECK_THROWS_AS(coord_features<double>(0, 2), DimensionError);
  }
}

TEST_SUITE("fusion neck") {
  TEST_CASE("stage-4 gate") {
    const ModelConfig c = neck_config();
    ParameterStore<double> s;
    Rng rng(1);
    FusionNeck<double> neck(s, "neck", c, rng, true);
    std::mt19937_64 data(2);
    const Pyramid p = random_pyramid(c, data);

    s.get("neck.tg.weight").value.fill(0.0);
    s.get("neck.tg.bias").value.fill(0.0);
    Tape<double> t;
    const Tensor<double> zero = neck.fuse_stage4(t, t.constant(p.v4), t.constant(p.text_global)).value();
    CHECK(zero == Tensor<double>(zero.shape()));

    s.get("neck.tg.bias").value.fill(1.0);
    const Tensor<double> open = neck.fuse_stage4(t, t.constant(p.v4), t.constant(p.text_global)).value();
    CHECK(max_abs_diff(open, formula_upsample(relu_oracle(conv_oracle(p.v4, s, "neck.v4")))) < 1e-14);
    CHECK_THROWS_AS(neck.fuse_stage4(t, t.constant(p.v4), std::nullopt), ConfigError);
  }

  TEST_CASE("zeroing the gate removes the stage-4 contribution") {
    const ModelConfig c = neck_config();
    ParameterStore<double> s;
    Rng rng(3);
    FusionNeck<double> neck(s, "neck", c, rng, true);
    std::mt19937_64 data(4);
    const Pyramid p = random_pyramid(c, data);
    s.get("neck.tg.weight").value.fill(0.0);
    s.get("neck.tg.bias").value.fill(-1.0);
    Tape<double> t;
    const Tensor<double> gated = neck.forward(t, on_tape(t, p), t.constant(p.text_global)).fused.value();
    Pyramid q = p;
    for (double& v : q.v4.data()) v *= -3.0;
    const Tensor<double> other = neck.forward(t, on_tape(t, q), t.constant(p.text_global)).fused.value();
    CHECK(gated == other);
  }

  TEST_CASE("random case matches the compositional oracle") {
    const ModelConfig c = neck_config();
    std::mt19937_64 data(5);
    for (bool gated : {true, false}) {
      ParameterStore<double> s;
      Rng rng(6);
      FusionNeck<double> neck(s, "neck", c, rng, gated);
      const Pyramid p = random_pyramid(c, data);
      Tape<double> t;
      const FusedFeatures<double> f = neck.forward(
          t, on_tape(t, p), gated ? std::optional<Var<double>>(t.constant(p.text_global)) : std::nullopt);
      const NeckOracle o = neck_oracle(s, "neck", p, gated);
      CHECK(max_abs_diff(f.stage4.value(), o.m4) < 1e-13);
      CHECK(max_abs_diff(f.fused.value(), o.fused) < 1e-13);
      CHECK(max_abs_diff(f.integrated.value(), o.integrated) < 1e-13);
      CHECK(f.tokens.shape() == Shape{c.token_count(), c.width});
    }
  }

  TEST_CASE("zero finer maps leave only the stage-4 path") {
    const ModelConfig c = neck_config();
    ParameterStore<double> s;
    Rng rng(7);
    FusionNeck<double> neck(s, "neck", c, rng, true);
    std::mt19937_64 data(8);
    Pyramid p = random_pyramid(c, data);
    p.v2.fill(0.0);
    p.v3.fill(0.0);
    Tape<double> t;
    const Tensor<double> fused = neck.forward(t, on_tape(t, p), t.constant(p.text_global)).fused.value();
    CHECK(max_abs_diff(fused, neck_oracle(s, "neck", p, true).fused) < 1e-13);
    Pyramid q = p;
    for (double& v : q.v4.data()) v += 0.5;
    CHECK(max_abs_diff(fused, neck.forward(t, on_tape(t, q), t.constant(p.text_global)).fused.value()) > 0.0);
  }

  TEST_CASE("flatten keeps row-major order") {
    ModelConfig c = neck_config();
    ParameterStore<double> s;
    Rng rng(9);
    FusionNeck<double> neck(s, "neck", c, rng, true);
    std::mt19937_64 data(10);
    Tape<double> t;
    const auto [inte, tokens] = neck.build_fvt(t, t.constant(random_tensor<double>({2, 2, c.width}, data)));
    const Tensor<double> iv = inte.value(), tv = tokens.value();
    CHECK(tv.shape() == Shape{4, c.width});
    for (std::size_t j = 0; j < c.width; ++j) {
      CHECK(tv.at(2, j) == iv.at(1, 0, j));
      CHECK(tv.at(1, j) == iv.at(0, 1, j));
    }
  }

  TEST_CASE("spatial mismatch") {
    const ModelConfig c = neck_config();
    ParameterStore<double> s;
    Rng rng(11);
    FusionNeck<double> neck(s, "neck", c, rng, true);
    Tape<double> t;
    CHECK_THROWS_AS(neck.fuse_multiscale(t, t.constant(Tensor<double>({4, 6, c.width})),
                                         t.constant(Tensor<double>({4, 6, c.width})),
                                         t.constant(Tensor<double>({4, 6, c.width}))),
                    DimensionError);
  }

  TEST_CASE("gradients") {
    const ModelConfig c = small_config();
    ParameterStore<double> s;
    Rng rng(12);
    FusionNeck<double> neck(s, "neck", c, rng, true);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (Parameter<double>* p : all_parameters(s))
      for (double& v : p->value.data()) v += u(rng);
    std::mt19937_64 data(13);
    const Pyramid p = random_pyramid(c, data);
    const GradCheckReport r = grad_check(
        [&](Tape<double>& t) { return neck.forward(t, on_tape(t, p), t.constant(p.text_global)).tokens; },
        all_parameters(s));
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_SUITE("query generator") {
  TEST_CASE("dense vision shape and oracle") {
    for (std::size_t nq : {1u, 3u}) {
      ModelConfig c = neck_config();
      c.num_queries = nq;
      ParameterStore<double> s;
      Rng rng(14);
      QueryGenerator<double> q(s, c, rng);
      std::mt19937_64 data(15);
      const Pyramid p = random_pyramid(c, data);
      Tape<double> t;
      const Tensor<double> dense = q.dense_vision(t, on_tape(t, p)).value();
      CHECK(dense.shape() == Shape{nq, c.token_count()});
      Tensor<double> x = neck_oracle(s, "qgen.neck", p, false).integrated;
      x = relu_oracle(conv_oracle(x, s, "qgen.reduce1"));
      x = relu_oracle(conv_oracle(x, s, "qgen.reduce2"));
      x = conv_oracle(x, s, "qgen.reduce3");
      for (std::size_t n = 0; n < nq; ++n)
        for (std::size_t i = 0; i < c.token_count(); ++i) CHECK(dense.at(n, i) == doctest::Approx(x[i * nq + n]).epsilon(1e-12));
    }
  }

  TEST_CASE("language-global gate") {
    const ModelConfig c = neck_config();
    ParameterStore<double> s;
    Rng rng(16);
    QueryGenerator<double> q(s, c, rng);
    std::mt19937_64 data(17);
    const Tensor<double> words = random_tensor<double>({c.max_tokens, c.width}, data);
    const Tensor<double> global = random_tensor<double>({c.width}, data);
    Tape<double> t;
    const Tensor<double> out = q.fuse_language_global(t, t.constant(words), t.constant(global)).value();
    const Tensor<double> ref = mul_rows(relu_oracle(linear_oracle(words, s, "qgen.text")),
                                        relu_oracle(linear_oracle(as_row(global), s, "qgen.vision_global")));
    CHECK(max_abs_diff(out, ref) < 1e-14);

    s.get("qgen.vision_global.weight").value.fill(0.0);
    s.get("qgen.vision_global.bias").value.fill(0.0);
    const Tensor<double> closed = q.fuse_language_global(t, t.constant(words), t.constant(global)).value();
    CHECK(closed == Tensor<double>(closed.shape()));
    s.get("qgen.vision_global.bias").value.fill(1.0);
    CHECK(q.fuse_language_global(t, t.constant(words), t.constant(global)).value() ==
          relu_oracle(linear_oracle(words, s, "qgen.text")));
  }

  TEST_CASE("attention map") {
    const ModelConfig c = neck_config();
    ParameterStore<double> s;
    Rng rng(18);
    QueryGenerator<double> q(s, c, rng);
    std::mt19937_64 data(19);
    const std::size_t nq = c.num_queries, l = c.max_tokens;
    const std::vector<bool> valid = tokenize("red circle", Vocabulary::synthetic(), l).valid();
    const Tensor<double> dense = random_tensor<double>({nq, c.token_count()}, data);

    SUBCASE("identical words attend uniformly") {
      Tensor<double> words({l, c.width});
      const Tensor<double> row = random_tensor<double>({c.width}, data);
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < c.width; ++j) words.at(i, j) = row[j];
      Tape<double> t;
      const Tensor<double> a = q.attention_map(t, t.constant(dense), t.constant(words), valid).value();
      for (std::size_t n = 0; n < nq; ++n)
        for (std::size_t i = 0; i < l; ++i) CHECK(a.at(n, i) == doctest::Approx(valid[i] ? 0.25 : 0.0).epsilon(1e-14));
    }

    SUBCASE("dominant word wins") {
      Tensor<double>& wp = s.get("qgen.word_proj.weight").value;
      wp.fill(0.0);
      for (std::size_t j = 0; j < c.width; ++j) wp.at(j, j) = 1.0;
      s.get("qgen.word_proj.bias").value.fill(0.0);
      s.get("qgen.dense_proj.weight").value.fill(0.0);
      s.get("qgen.dense_proj.bias").value.fill(1.0);
      Tensor<double> words = random_tensor<double>({l, c.width}, data, 0.0, 0.5);
      for (std::size_t j = 0; j < c.width; ++j) words.at(2, j) = 2.0;
      for (std::size_t j = 0; j < c.width; ++j) words.at(6, j) = 9.0;  // PAD row stays excluded
      Tape<double> t;
      const Tensor<double> a = q.attention_map(t, t.constant(dense), t.constant(words), valid).value();
      for (std::size_t n = 0; n < nq; ++n) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < l; ++i)
          if (a.at(n, i) > a.at(n, best)) best = i;
        CHECK(best == 2);
        CHECK(a.at(n, 6) == 0.0);
      }
    }

    SUBCASE("random case matches the oracle") {
      const Tensor<double> words = random_tensor<double>({l, c.width}, data);
      Tape<double> t;
      const Tensor<double> a = q.attention_map(t, t.constant(dense), t.constant(words), valid).value();
      const Tensor<double> d = relu_oracle(linear_oracle(dense, s, "qgen.dense_proj"));
      const Tensor<double> w = relu_oracle(linear_oracle(words, s, "qgen.word_proj"));
      Tensor<double> logits({nq, l});
      for (std::size_t n = 0; n < nq; ++n)
        for (std::size_t i = 0; i < l; ++i)
          for (std::size_t j = 0; j < c.width; ++j) logits.at(n, i) += d.at(n, j) * w.at(i, j);
      CHECK(max_abs_diff(a, masked_softmax_oracle(logits, valid)) < 1e-14);
    }
  }

  TEST_CASE("queries select and average projected words") {
    const ModelConfig c = neck_config();
    ParameterStore<double> s;
    Rng rng(20);
    QueryGenerator<double> q(s, c, rng);
    std::mt19937_64 data(21);
    const std::size_t l = c.max_tokens;
    const Tensor<double> words = random_tensor<double>({l, c.width}, data);
    const Tensor<double> proj = relu_oracle(linear_oracle(words, s, "qgen.value_proj"));
    Tensor<double> a({2, l});
    a.at(0, 3) = 1.0;
    for (std::size_t i = 0; i < 4; ++i) a.at(1, i) = 0.25;
    Tape<double> t;
    const Tensor<double> fq = q.make_queries(t, t.constant(a), t.constant(words)).value();
    for (std::size_t j = 0; j < c.width; ++j) {
      CHECK(fq.at(0, j) == proj.at(3, j));
      CHECK(fq.at(1, j) == doctest::Approx((proj.at(0, j) + proj.at(1, j) + proj.at(2, j) + proj.at(3, j)) / 4).epsilon(1e-14));
    }
  }

  TEST_CASE("module gradients and a single query") {
    for (std::size_t nq : {1u, 2u}) {
      ModelConfig c = small_config();
      c.num_queries = nq;
      ParameterStore<double> s;
      Rng rng(22);
      QueryGenerator<double> q(s, c, rng);
      std::uniform_real_distribution<double> u(-0.05, 0.05);
      for (Parameter<double>* p : all_parameters(s))
        for (double& v : p->value.data()) v += u(rng);
      std::mt19937_64 data(23);
      const Pyramid p = random_pyramid(c, data);
      const Tensor<double> words = random_tensor<double>({c.max_tokens, c.width}, data);
      const std::vector<bool> valid = tokenize("blue", Vocabulary::synthetic(), c.max_tokens).valid();
      {
        Tape<double> t;
        const QuerySet<double> qs =
            q.forward(t, on_tape(t, p), {t.constant(words), t.constant(p.text_global)}, valid);
        CHECK(qs.queries.shape() == Shape{nq, c.width});
        CHECK(qs.attention.shape() == Shape{nq, c.max_tokens});
      }
      GradCheckOptions o;
      o.max_entries_per_param = 16;
      const GradCheckReport r = grad_check(
          [&](Tape<double>& t) {
            return q.forward(t, on_tape(t, p), {t.constant(words), t.constant(p.text_global)}, valid).queries;
          },
          all_parameters(s), o);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}
