// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "eavl/config.hpp"
#include "eavl/data.hpp"
#include "eavl/metrics.hpp"
#include "eavl/model.hpp"
#include "eavl/tensor_io.hpp"

namespace eavl {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double power = 0.9;           // polynomial decay exponent
  std::size_t total_steps = 0;  // decay horizon; 0 means TrainConfig::steps
};

/// lr0 * (1 - step / total)^power, clamped to 0 past `total`.
double poly_lr(double lr0, std::size_t step, std::size_t total, double power);

struct TrainConfig {
  ModelConfig model;
  AdamConfig adam;
  std::size_t batch_size = 8;
  std::size_t steps = 1000;
  std::uint64_t seed = 0;  // model initialisation and data order
  io::Precision precision = io::Precision::f32;
  TargetSampling target_sampling = TargetSampling::nearest;

  DatasetSpec train_data;
  DatasetSpec eval_data;         // count 0 disables held-out evaluation
  std::string train_dir;         // when set, samples are read from disk instead
  std::string eval_dir;
  std::size_t eval_every = 0;    // 0: only after the last step
  std::size_t log_every = 1;
  std::string dump_dir = "nan_dump";

  void validate() const;
  std::size_t decay_steps() const { return adam.total_steps == 0 ? steps : adam.total_steps; }

  static TrainConfig from_file(const KeyValueFile& file);
  KeyValueFile to_file() const;
};

/// Adam with bias correction; one moment pair per parameter.
template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(const ParameterStore<T>& store);

  void update(ParameterStore<T>& store, double lr, const AdamConfig& config);

  std::uint64_t steps() const { return t_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

struct StepRecord {
  std::size_t step = 0;  // number of completed updates
  double loss = 0.0;     // batch mean
  double lr = 0.0;       // rate used for this update
};

template <typename T>
struct Checkpoint;

/// Single-writer training loop with seeded data order.
template <typename T>
class Trainer {
 public:
  Trainer(const TrainConfig& config, std::vector<Sample> train, std::vector<Sample> eval = {});
  Trainer(const Checkpoint<T>& checkpoint, std::vector<Sample> train, std::vector<Sample> eval = {});

  /// One forward/backward/update over the next batch. Throws NumericalError
  /// (after writing a dump of the batch) when a loss is not finite.
  StepRecord step();

  /// Steps until config.steps, writing one JSON record per logged step.
  void run(std::ostream* log);

  EvalReport evaluate_split(bool held_out) const;

  const TrainConfig& config() const { return config_; }
  EavlModel<T>& model() { return model_; }
  const EavlModel<T>& model() const { return model_; }
  std::size_t completed_steps() const { return step_; }
  const std::vector<Sample>& train_samples() const { return train_; }

  Checkpoint<T> checkpoint() const;

 private:
  std::size_t next_index();
  [[noreturn]] void dump_and_abort(const std::vector<std::size_t>& batch, std::size_t bad, double loss,
                                   const Tensor<T>& logits, double lr);

  TrainConfig config_;
  std::vector<Sample> train_, eval_;
  EavlModel<T> model_;
  Adam<T> adam_;
  std::size_t step_ = 0;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

std::string eval_json(const EvalReport& report);

/// Loads or generates the splits named by the config.
std::vector<Sample> load_train_split(const TrainConfig& config);
std::vector<Sample> load_eval_split(const TrainConfig& config);

// ---------------------------------------------------------------------------
// Ablations

struct AblationVariant {
  Mode mode = Mode::full;
  std::size_t num_queries = 0;  // 0 keeps the base value
  std::string label() const;
};

AblationVariant parse_variant(const std::string& text);

struct AblationRow {
  AblationVariant variant;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalReport> per_seed;
  EvalReport median;  // element-wise median across seeds
};

/// Trains every variant once per seed on identical data and reports
/// held-out metrics (training-set metrics when no held-out split is configured).
template <typename T>
std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::vector<AblationVariant>& variants,
                                      const std::vector<std::uint64_t>& seeds, std::ostream* progress = nullptr);

std::string format_ablation_table(const std::vector<AblationRow>& rows);
EvalReport median_report(const std::vector<EvalReport>& reports);

}  // namespace eavl
