// SPDX-License-Identifier: Apache-2.0
#include "eavl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "eavl/checkpoint.hpp"
#include "eavl/errors.hpp"

namespace eavl {

double poly_lr(double lr0, std::size_t step, std::size_t total, double power) {
  if (total == 0 || step >= total) return 0.0;
  return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  model.validate();
  if (!(adam.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("train.eps must be positive");
  if (!(adam.power > 0.0)) throw ConfigError("train.power must be positive");
  if (steps == 0) throw ConfigError("train.steps must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (log_every == 0) throw ConfigError("train.log_every must be positive");
  if (train_dir.empty() && train_data.count == 0) throw ConfigError("data.train.count must be positive");
  train_data.grammar.validate();
}

namespace {

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

io::Precision parse_precision(const std::string& s) {
  if (s == "f32") return io::Precision::f32;
  if (s == "f64") return io::Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

}  // namespace

TrainConfig TrainConfig::from_file(const KeyValueFile& f) {
  TrainConfig c;
  c.model = read_model_config(f);
  c.adam.lr = f.get_double("train.lr", c.adam.lr);
  c.adam.beta1 = f.get_double("train.beta1", c.adam.beta1);
  c.adam.beta2 = f.get_double("train.beta2", c.adam.beta2);
  c.adam.eps = f.get_double("train.eps", c.adam.eps);
  c.adam.power = f.get_double("train.power", c.adam.power);
  c.adam.total_steps = f.get_size("train.total_steps", c.adam.total_steps);
  c.batch_size = f.get_size("train.batch_size", c.batch_size);
  c.steps = f.get_size("train.steps", c.steps);
  c.seed = f.get_u64("train.seed", c.seed);
  c.precision = parse_precision(f.get_string("train.precision", "f32"));
  c.eval_every = f.get_size("train.eval_every", c.eval_every);
  c.log_every = f.get_size("train.log_every", c.log_every);
  c.target_sampling = parse_target_sampling(f.get_string("train.target_sampling", to_string(c.target_sampling)));
  c.dump_dir = f.get_string("train.dump_dir", c.dump_dir);

  GrammarConfig grammar = GrammarConfig::for_image(c.model.image_height, c.model.image_width);
  read_grammar_config(f, grammar);
  c.train_data.name = "train";
  c.train_data.seed = f.get_u64("data.train.seed", 1);
  c.train_data.count = f.get_size("data.train.count", 64);
  c.train_data.grammar = grammar;
  c.eval_data.name = "eval";
  c.eval_data.seed = f.get_u64("data.eval.seed", 2);
  c.eval_data.count = f.get_size("data.eval.count", 0);
  c.eval_data.grammar = grammar;
  c.train_dir = f.get_string("data.train.dir", "");
  c.eval_dir = f.get_string("data.eval.dir", "");
  if (auto unused = f.unused_keys(); !unused.empty()) {
    std::string list;
    for (const auto& k : unused) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError("unknown config keys: " + list);
  }
  c.validate();
  return c;
}

KeyValueFile TrainConfig::to_file() const {
  KeyValueFile f;
  write_model_config(model, f);
  f.set("train.lr", fmt_double(adam.lr));
  f.set("train.beta1", fmt_double(adam.beta1));
  f.set("train.beta2", fmt_double(adam.beta2));
  f.set("train.eps", fmt_double(adam.eps));
  f.set("train.power", fmt_double(adam.power));
  f.set("train.total_steps", std::to_string(adam.total_steps));
  f.set("train.batch_size", std::to_string(batch_size));
  f.set("train.steps", std::to_string(steps));
  f.set("train.seed", std::to_string(seed));
  f.set("train.precision", io::to_string(precision));
  f.set("train.eval_every", std::to_string(eval_every));
  f.set("train.log_every", std::to_string(log_every));
  f.set("train.target_sampling", to_string(target_sampling));
  f.set("train.dump_dir", dump_dir);
  write_grammar_config(train_data.grammar, f);
  f.set("data.train.seed", std::to_string(train_data.seed));
  f.set("data.train.count", std::to_string(train_data.count));
  f.set("data.eval.seed", std::to_string(eval_data.seed));
  f.set("data.eval.count", std::to_string(eval_data.count));
  if (!train_dir.empty()) f.set("data.train.dir", train_dir);
  if (!eval_dir.empty()) f.set("data.eval.dir", eval_dir);
  return f;
}

std::vector<Sample> load_train_split(const TrainConfig& c) {
  return c.train_dir.empty() ? generate_dataset(c.train_data) : read_dataset(c.train_dir);
}

std::vector<Sample> load_eval_split(const TrainConfig& c) {
  if (!c.eval_dir.empty()) return read_dataset(c.eval_dir);
  if (c.eval_data.count == 0) return {};
  return generate_dataset(c.eval_data);
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
Adam<T>::Adam(const ParameterStore<T>& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.emplace_back(store[i].value.shape(), T{0});
    v_.emplace_back(store[i].value.shape(), T{0});
  }
}

template <typename T>
void Adam<T>::update(ParameterStore<T>& store, double lr, const AdamConfig& c) {
  if (m_.size() != store.size()) throw ConfigError("optimizer state does not match the parameter list");
  ++t_;
  const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T step = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter<T>& p = store[i];
    T* w = p.value.ptr();
    const T* g = p.grad.ptr();
    T* m = m_[i].ptr();
    T* v = v_[i].ptr();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      m[k] = b1 * m[k] + (T{1} - b1) * g[k];
      v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      w[k] -= step * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

ModelConfig seeded_model(const TrainConfig& c) {
  ModelConfig m = c.model;
  m.init_seed = c.seed;
  return m;
}

constexpr std::uint64_t kOrderStream = 0x5851F42D4C957F2DULL;

}  // namespace

template <typename T>
Trainer<T>::Trainer(const TrainConfig& config, std::vector<Sample> train, std::vector<Sample> eval)
    : config_(config),
      train_(std::move(train)),
      eval_(std::move(eval)),
      model_(seeded_model(config)),
      adam_(model_.parameters()),
      rng_(config.seed ^ kOrderStream) {
  config_.validate();
  if (io::precision_of<T>() != config_.precision) {
    throw ConfigError(std::string("trainer precision ") + io::to_string(io::precision_of<T>()) +
                      " does not match train.precision " + io::to_string(config_.precision));
  }
  if (train_.empty()) throw ConfigError("training split is empty");
}

template <typename T>
Trainer<T>::Trainer(const Checkpoint<T>& ck, std::vector<Sample> train, std::vector<Sample> eval)
    : Trainer(ck.config, std::move(train), std::move(eval)) {
  ParameterStore<T>& store = model_.parameters();
  if (ck.params.size() != store.size()) throw FormatError("checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (ck.params[i].name != store[i].name || ck.params[i].value.shape() != store[i].value.shape()) {
      throw FormatError("checkpoint parameter " + ck.params[i].name + " does not match model parameter " +
                        store[i].name);
    }
    store[i].value = ck.params[i].value;
  }
  adam_.first_moments() = ck.adam_m;
  adam_.second_moments() = ck.adam_v;
  adam_.set_steps(ck.adam_steps);
  step_ = ck.step;
  std::istringstream(ck.rng_state) >> rng_;
  order_ = ck.order;
  cursor_ = ck.cursor;
  for (std::size_t idx : order_) {
    if (idx >= train_.size()) throw FormatError("checkpoint data order refers to a missing sample");
  }
}

template <typename T>
std::size_t Trainer<T>::next_index() {
  if (cursor_ >= order_.size()) {
    order_.resize(train_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
    cursor_ = 0;
  }
  return order_[cursor_++];
}

template <typename T>
StepRecord Trainer<T>::step() {
  static const Vocabulary vocab = Vocabulary::synthetic();
  ParameterStore<T>& store = model_.parameters();
  const double lr = poly_lr(config_.adam.lr, step_, config_.decay_steps(), config_.adam.power);
  store.zero_grad();

  std::vector<std::size_t> batch(config_.batch_size);
  for (std::size_t& b : batch) b = next_index();

  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = train_[batch[i]];
    Tape<T> tape;
    const TokenSequence tokens = tokenize(s.expression, vocab, config_.model.max_tokens);
    const ForwardResult<T> r = model_.forward(tape, s.image.cast<T>(), tokens);
    Var<T> loss = bce_loss(r.bundle.prediction, s.gt_mask, config_.target_sampling);
    const double value = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(value)) dump_and_abort(batch, i, value, r.bundle.prediction.value(), lr);
    tape.backward(loss);
    total += value;
  }

  const T inv = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (T& g : store[i].grad.data()) g *= inv;
  }
  adam_.update(store, lr, config_.adam);
  ++step_;
  return {step_, total / static_cast<double>(batch.size()), lr};
}

template <typename T>
void Trainer<T>::dump_and_abort(const std::vector<std::size_t>& batch, std::size_t bad, double loss,
                                const Tensor<T>& logits, double lr) {
  namespace fs = std::filesystem;
  const fs::path dir(config_.dump_dir);
  std::string where = dir.string();
  try {
    fs::create_directories(dir);
    nlohmann::ordered_json j;
    j["step"] = step_;
    j["lr"] = lr;
    j["loss"] = std::isnan(loss) ? "nan" : (loss > 0 ? "inf" : "-inf");
    j["offending_position"] = bad;
    j["batch"] = nlohmann::json::array();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Sample& s = train_[batch[i]];
      j["batch"].push_back({{"index", batch[i]}, {"seed", s.seed}, {"expression", s.expression}});
      io::save_tensor(dir / ("image_" + std::to_string(i) + ".eavt"), s.image);
      io::save_tensor(dir / ("mask_" + std::to_string(i) + ".eavt"), s.gt_mask);
    }
    io::save_tensor(dir / "logits.eavt", logits);
    std::ofstream(dir / "batch.json") << j.dump(2) << "\n";
  } catch (const std::exception& e) {
    where = "(dump failed: " + std::string(e.what()) + ")";
  }
  throw NumericalError("non-finite loss at step " + std::to_string(step_ + 1) + " on sample " +
                       std::to_string(batch[bad]) + "; batch dumped to " + where);
}

std::string eval_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["overall_iou"] = r.overall_iou;
  j["mean_iou"] = r.mean_iou;
  for (const auto& [x, v] : r.precision_at) {
    std::ostringstream key;
    key << "pr@" << x;
    j[key.str()] = v;
  }
  j["samples"] = r.sample_count;
  return j.dump();
}

template <typename T>
EvalReport Trainer<T>::evaluate_split(bool held_out) const {
  return evaluate(model_, held_out && !eval_.empty() ? eval_ : train_);
}

template <typename T>
void Trainer<T>::run(std::ostream* log) {
  while (step_ < config_.steps) {
    const StepRecord rec = step();
    const bool last = step_ == config_.steps;
    const bool eval_due = !eval_.empty() && (last || (config_.eval_every > 0 && step_ % config_.eval_every == 0));
    if (log == nullptr || !(last || eval_due || step_ % config_.log_every == 0)) continue;
    nlohmann::ordered_json j;
    j["step"] = rec.step;
    j["loss"] = rec.loss;
    j["lr"] = rec.lr;
    if (eval_due) j["metrics"] = nlohmann::json::parse(eval_json(evaluate_split(true)));
    *log << j.dump() << "\n";
    log->flush();
  }
}

template <typename T>
Checkpoint<T> Trainer<T>::checkpoint() const {
  Checkpoint<T> ck;
  ck.config = config_;
  ck.step = step_;
  std::ostringstream rng;
  rng << rng_;
  ck.rng_state = rng.str();
  ck.order = order_;
  ck.cursor = cursor_;
  ck.adam_steps = adam_.steps();
  const ParameterStore<T>& store = model_.parameters();
  for (std::size_t i = 0; i < store.size(); ++i) ck.params.push_back({store[i].name, store[i].value});
  ck.adam_m = adam_.first_moments();
  ck.adam_v = adam_.second_moments();
  return ck;
}

// ---------------------------------------------------------------------------
// Ablations

std::string AblationVariant::label() const {
  return num_queries == 0 ? to_string(mode) : to_string(mode) + ":nq=" + std::to_string(num_queries);
}

AblationVariant parse_variant(const std::string& text) {
  AblationVariant v;
  const auto colon = text.find(':');
  v.mode = parse_mode(text.substr(0, colon));
  if (colon != std::string::npos) {
    const std::string rest = text.substr(colon + 1);
    const std::string prefix = "nq=";
    if (rest.rfind(prefix, 0) != 0) throw ConfigError("variant '" + text + "': expected <mode>[:nq=<N>]");
    try {
      std::size_t used = 0;
      v.num_queries = std::stoul(rest.substr(prefix.size()), &used);
      if (used != rest.size() - prefix.size() || v.num_queries == 0) throw std::invalid_argument(rest);
    } catch (const std::exception&) {
      throw ConfigError("variant '" + text + "': bad query count");
    }
  }
  return v;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

EvalReport median_report(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("median_report: no reports");
  EvalReport m;
  m.sample_count = reports.front().sample_count;
  std::vector<double> overall, mean;
  for (const EvalReport& r : reports) {
    overall.push_back(r.overall_iou);
    mean.push_back(r.mean_iou);
  }
  m.overall_iou = median(overall);
  m.mean_iou = median(mean);
  for (double x : kPrecisionThresholds) {
    std::vector<double> pr;
    for (const EvalReport& r : reports) pr.push_back(r.precision_at.at(x));
    m.precision_at[x] = median(pr);
  }
  return m;
}

template <typename T>
std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::vector<AblationVariant>& variants,
                                      const std::vector<std::uint64_t>& seeds, std::ostream* progress) {
  if (variants.empty() || seeds.empty()) throw ConfigError("ablation needs at least one variant and one seed");
  const std::vector<Sample> train = load_train_split(base);
  const std::vector<Sample> eval = load_eval_split(base);
  std::vector<AblationRow> rows;
  for (const AblationVariant& v : variants) {
    AblationRow row;
    row.variant = v;
    row.seeds = seeds;
    for (std::uint64_t seed : seeds) {
      TrainConfig c = base;
      c.model.mode = v.mode;
      if (v.num_queries != 0) c.model.num_queries = v.num_queries;
      c.seed = seed;
      c.precision = io::precision_of<T>();
      Trainer<T> trainer(c, train, eval);
      trainer.run(nullptr);
      row.per_seed.push_back(trainer.evaluate_split(true));
      if (progress != nullptr) {
        *progress << v.label() << " seed " << seed << " " << eval_json(row.per_seed.back()) << "\n";
        progress->flush();
      }
    }
    row.median = median_report(row.per_seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %8s %8s %7s %7s %7s %7s %7s\n", "variant", "oIoU", "mIoU", "Pr@0.5",
                "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9");
  out << line;
  auto emit = [&](const std::string& label, const EvalReport& r) {
    std::snprintf(line, sizeof line, "%-22s %8.2f %8.2f %7.1f %7.1f %7.1f %7.1f %7.1f\n", label.c_str(),
                  100 * r.overall_iou, 100 * r.mean_iou, 100 * r.precision_at.at(0.5), 100 * r.precision_at.at(0.6),
                  100 * r.precision_at.at(0.7), 100 * r.precision_at.at(0.8), 100 * r.precision_at.at(0.9));
    out << line;
  };
  for (const AblationRow& row : rows) {
    emit(row.variant.label() + " (median)", row.median);
    for (std::size_t i = 0; i < row.per_seed.size(); ++i) {
      emit("  seed " + std::to_string(row.seeds[i]), row.per_seed[i]);
    }
  }
  return out.str();
}

template class Adam<float>;
template class Adam<double>;
template class Trainer<float>;
template class Trainer<double>;
template std::vector<AblationRow> run_ablation<float>(const TrainConfig&, const std::vector<AblationVariant>&,
                                                      const std::vector<std::uint64_t>&, std::ostream*);
template std::vector<AblationRow> run_ablation<double>(const TrainConfig&, const std::vector<AblationVariant>&,
                                                       const std::vector<std::uint64_t>&, std::ostream*);

}  // namespace eavl
