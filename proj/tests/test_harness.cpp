// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"

#include "eavl/checkpoint.hpp"
#include "test_util.hpp"

using namespace eavl;
using namespace eavl::testing;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_train(std::size_t steps = 6, std::uint64_t seed = 3) {
  TrainConfig c;
  c.model = small_config();
  c.steps = steps;
  c.batch_size = 2;
  c.seed = seed;
  c.train_data.seed = 11;
  c.train_data.count = 5;
  c.train_data.grammar = GrammarConfig::for_image(16, 16);
  c.eval_data = c.train_data;
  c.eval_data.name = "eval";
  c.eval_data.seed = 12;
  c.eval_data.count = 3;
  c.eval_every = 3;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("eavl_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

template <typename T>
void check_same_parameters(const ParameterStore<T>& a, const ParameterStore<T>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].value == b[i].value);
  }
}

}  // namespace

TEST_SUITE("schedule and optimiser") {
  TEST_CASE("polynomial decay") {
    CHECK(poly_lr(3e-4, 0, 1000, 0.9) == 3e-4);
    CHECK(poly_lr(3e-4, 500, 1000, 0.9) == doctest::Approx(3e-4 * std::pow(0.5, 0.9)).epsilon(1e-15));
    CHECK(poly_lr(3e-4, 1000, 1000, 0.9) == 0.0);
    CHECK(poly_lr(3e-4, 1200, 1000, 0.9) == 0.0);
  }

  TEST_CASE("Adam matches the update formula") {
    ParameterStore<double> s;
    Parameter<double>& p = s.add("w", Tensor<double>({2}, {0.5, -1.0}));
    Adam<double> adam(s);
    AdamConfig c;
    double m[2] = {0, 0}, v[2] = {0, 0}, w[2] = {0.5, -1.0};
    const double grads[3][2] = {{0.2, -3.0}, {-0.1, 1.0}, {0.4, 0.0}};
    for (int t = 1; t <= 3; ++t) {
      p.grad = Tensor<double>({2}, {grads[t - 1][0], grads[t - 1][1]});
      adam.update(s, 1e-2, c);
      for (int k = 0; k < 2; ++k) {
        m[k] = 0.9 * m[k] + 0.1 * grads[t - 1][k];
        v[k] = 0.999 * v[k] + 0.001 * grads[t - 1][k] * grads[t - 1][k];
        const double mh = m[k] / (1 - std::pow(0.9, t)), vh = v[k] / (1 - std::pow(0.999, t));
        w[k] -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
        CHECK(p.value[k] == doctest::Approx(w[k]).epsilon(1e-12));
      }
    }
    CHECK(adam.steps() == 3);
  }
}

TEST_SUITE("config files") {
  TEST_CASE("parsing rules") {
    const KeyValueFile f = KeyValueFile::parse("# comment\nmodel.width = 32\n\n train.lr=0.001  # trailing\n");
    CHECK(f.get_size("model.width", 0) == 32);
    CHECK(f.get_double("train.lr", 0) == 0.001);
    CHECK(f.get_string("missing", "x") == "x");
    CHECK_THROWS_AS(KeyValueFile::parse("a = 1\na = 2\n"), ConfigError);
    CHECK_THROWS_AS(KeyValueFile::parse("no equals sign\n"), ConfigError);
    CHECK_THROWS_AS(KeyValueFile::parse("a = x\n").get_size("a", 0), ConfigError);
    CHECK(KeyValueFile::parse(f.serialize()).entries() == f.entries());
  }

  TEST_CASE("unknown keys are rejected") {
    CHECK_THROWS_AS(TrainConfig::from_file(KeyValueFile::parse("train.stpes = 10\n")), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_file(KeyValueFile::parse("model.mode = sideways\n")), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_file(KeyValueFile::parse("train.lr = -1\n")), ConfigError);
  }

  TEST_CASE("train config round trip") {
    TrainConfig c = tiny_train();
    c.model.mode = Mode::no_fvg;
    c.model.kernel_activation = KernelActivation::identity;
    c.adam.lr = 1.25e-4;
    c.target_sampling = TargetSampling::area;
    const TrainConfig back = TrainConfig::from_file(KeyValueFile::parse(c.to_file().serialize()));
    CHECK(back.to_file().serialize() == c.to_file().serialize());
    CHECK(back.model.mode == Mode::no_fvg);
    CHECK(back.adam.lr == 1.25e-4);
    CHECK(back.train_data.count == 5);
    CHECK(back.eval_data.seed == 12);
    CHECK(back.target_sampling == TargetSampling::area);
    CHECK(back.model.backbone == c.model.backbone);
  }

  TEST_CASE("desk defaults") {
    const TrainConfig c = TrainConfig::from_file(KeyValueFile::parse(""));
    CHECK(c.model.width == 64);
    CHECK(c.model.num_queries == 8);
    CHECK(c.model.image_height == 64);
    CHECK(c.adam.lr == 3e-4);
    CHECK(c.adam.power == 0.9);
    CHECK(c.target_sampling == TargetSampling::nearest);
  }
}

TEST_SUITE("training") {
  TEST_CASE("checkpoint before any step equals initialisation") {
    const TrainConfig c = tiny_train();
    Trainer<float> tr(c, load_train_split(c));
    const Checkpoint<float> ck = tr.checkpoint();
    ModelConfig mc = c.model;
    mc.init_seed = c.seed;
    const EavlModel<float> fresh(mc);
    check_same_parameters(ck.restore_model().parameters(), fresh.parameters());
    CHECK(ck.step == 0);
    for (const Tensor<float>& m : ck.adam_m) CHECK(m == Tensor<float>(m.shape()));
  }

  TEST_CASE("resuming reproduces the next steps bit for bit") {
    const fs::path dir = scratch("resume");
    const TrainConfig c = tiny_train(6);
    Trainer<float> a(c, load_train_split(c));
    std::vector<double> losses;
    for (int i = 0; i < 3; ++i) a.step();
    save_checkpoint(dir / "mid.eavc", a.checkpoint());
    for (int i = 0; i < 3; ++i) losses.push_back(a.step().loss);

    Trainer<float> b(load_checkpoint<float>(dir / "mid.eavc"), load_train_split(c));
    CHECK(b.completed_steps() == 3);
    for (int i = 0; i < 3; ++i) {
      const StepRecord r = b.step();
      CHECK(r.loss == losses[i]);
      CHECK(r.step == 4 + static_cast<std::size_t>(i));
    }
    check_same_parameters(a.model().parameters(), b.model().parameters());
  }

  TEST_CASE("metrics logs are byte-identical across runs") {
    const TrainConfig c = tiny_train(6);
    std::ostringstream l1, l2;
    Trainer<float>(c, load_train_split(c), load_eval_split(c)).run(&l1);
    Trainer<float>(c, load_train_split(c), load_eval_split(c)).run(&l2);
    const std::string log = l1.str();
    CHECK(log == l2.str());
    CHECK(std::count(log.begin(), log.end(), '\n') == 6);
    CHECK(log.find("\"metrics\"") != std::string::npos);
    TrainConfig other = c;
    other.seed = 4;
    std::ostringstream l3;
    Trainer<float>(other, load_train_split(other), load_eval_split(other)).run(&l3);
    CHECK(l3.str() != l1.str());
  }

  TEST_CASE("desk-config loss falls on a fixed batch") {
    constexpr std::size_t kSteps = 50;
    std::vector<std::vector<double>> curves;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      TrainConfig c;
      c.model = ModelConfig::desk();
      c.steps = kSteps;
      c.batch_size = 4;
      c.seed = seed;
      c.train_data.count = 4;
      Trainer<float> tr(c, load_train_split(c));
      std::vector<double> l;
      for (std::size_t i = 0; i < kSteps; ++i) l.push_back(tr.step().loss);
      curves.push_back(l);
    }
    std::vector<double> median(kSteps);
    for (std::size_t i = 0; i < kSteps; ++i) {
      std::vector<double> at = {curves[0][i], curves[1][i], curves[2][i]};
      std::sort(at.begin(), at.end());
      median[i] = at[1];
    }
    // Adam's first updates overshoot, so single steps may rise; ten-step means must not.
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t w = 0; w < kSteps; w += 10) {
      const double mean = std::accumulate(median.begin() + static_cast<long>(w),
                                          median.begin() + static_cast<long>(w + 10), 0.0) / 10.0;
      CHECK(mean < prev);
      prev = mean;
    }
    CHECK(median.back() < 0.5 * median.front());
  }

  TEST_CASE("precision must match the trainer") {
    TrainConfig c = tiny_train();
    c.precision = io::Precision::f64;
    CHECK_THROWS_AS(Trainer<float>(c, load_train_split(c)), ConfigError);
    Trainer<double> d(c, load_train_split(c));
    CHECK(std::isfinite(d.step().loss));
  }

  TEST_CASE("non-finite loss aborts with a dump") {
    const fs::path dir = scratch("nan");
    TrainConfig c = tiny_train();
    c.dump_dir = (dir / "dump").string();
    c.batch_size = 5;
    std::vector<Sample> train = load_train_split(c);
    for (float& v : train[2].gt_mask.data()) v = std::numeric_limits<float>::quiet_NaN();
    Trainer<float> tr(c, train);
    CHECK_THROWS_AS(tr.step(), NumericalError);
    CHECK(fs::exists(dir / "dump" / "batch.json"));
    CHECK(read_file(dir / "dump" / "batch.json").find("\"loss\"") != std::string::npos);
  }
}

TEST_SUITE("checkpoint files") {
  TEST_CASE("round trip preserves state and forward outputs") {
    const fs::path dir = scratch("ckpt");
    const TrainConfig c = tiny_train(4);
    Trainer<float> tr(c, load_train_split(c));
    tr.step();
    tr.step();
    const Checkpoint<float> ck = tr.checkpoint();
    save_checkpoint(dir / "a.eavc", ck);
    const Checkpoint<float> back = load_checkpoint<float>(dir / "a.eavc");
    CHECK(back.step == 2);
    CHECK(back.rng_state == ck.rng_state);
    CHECK(back.order == ck.order);
    CHECK(back.cursor == ck.cursor);
    CHECK(back.adam_steps == 2);
    CHECK(back.config.to_file().serialize() == ck.config.to_file().serialize());
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      CHECK(back.params[i].value == ck.params[i].value);
      CHECK(back.adam_m[i] == ck.adam_m[i]);
      CHECK(back.adam_v[i] == ck.adam_v[i]);
    }
    const Sample& s = tr.train_samples()[0];
    CHECK(predict(back.restore_model(), s) == predict(tr.model(), s));
    CHECK(checkpoint_precision(dir / "a.eavc") == io::Precision::f32);
  }

  TEST_CASE("damaged and mismatched files are rejected") {
    const fs::path dir = scratch("bad");
    const TrainConfig c = tiny_train(4);
    Trainer<float> tr(c, load_train_split(c));
    save_checkpoint(dir / "a.eavc", tr.checkpoint());
    const std::string bytes = read_file(dir / "a.eavc");

    std::ofstream(dir / "short.eavc", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "short.eavc"), FormatError);

    std::string v2 = bytes;
    v2[4] = 2;
    std::ofstream(dir / "v2.eavc", std::ios::binary) << v2;
    try {
      load_checkpoint<float>(dir / "v2.eavc");
      FAIL("version 2 accepted");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("version 2") != std::string::npos);
      CHECK(msg.find("version 1") != std::string::npos);
    }

    try {
      load_checkpoint<double>(dir / "a.eavc");
      FAIL("precision mismatch accepted");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("f32") != std::string::npos);
    }

    std::ofstream(dir / "junk.eavc", std::ios::binary) << "JUNK" << bytes.substr(4);
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "junk.eavc"), FormatError);
  }
}

TEST_SUITE("ablation") {
  TEST_CASE("variant labels") {
    const AblationVariant v = parse_variant("no_fvg:nq=4");
    CHECK(v.mode == Mode::no_fvg);
    CHECK(v.num_queries == 4);
    CHECK(parse_variant(v.label()).num_queries == 4);
    CHECK(parse_variant("fixed_kernel").num_queries == 0);
    CHECK_THROWS_AS(parse_variant("full:nq=x"), ConfigError);
    CHECK_THROWS_AS(parse_variant("everything"), ConfigError);
  }

  TEST_CASE("a single variant equals a plain training and evaluation run") {
    TrainConfig c = tiny_train(4);
    c.eval_every = 0;
    const std::vector<AblationRow> rows = run_ablation<float>(c, {AblationVariant{}}, {c.seed});
    REQUIRE(rows.size() == 1);
    Trainer<float> tr(c, load_train_split(c), load_eval_split(c));
    tr.run(nullptr);
    const EvalReport plain = tr.evaluate_split(true);
    CHECK(rows[0].per_seed.size() == 1);
    CHECK(rows[0].median.mean_iou == plain.mean_iou);
    CHECK(rows[0].median.overall_iou == plain.overall_iou);
    CHECK(rows[0].median.precision_at == plain.precision_at);
    CHECK(format_ablation_table(rows).find("full") != std::string::npos);
  }

  TEST_CASE("median across seeds") {
    EvalReport a, b, c;
    a.mean_iou = 0.1;
    b.mean_iou = 0.7;
    c.mean_iou = 0.4;
    a.overall_iou = 0.9;
    b.overall_iou = 0.2;
    c.overall_iou = 0.3;
    for (EvalReport* r : {&a, &b, &c})
      for (double x : kPrecisionThresholds) r->precision_at[x] = 0.0;
    const EvalReport m = median_report({a, b, c});
    CHECK(m.mean_iou == 0.4);
    CHECK(m.overall_iou == 0.3);
  }
}
