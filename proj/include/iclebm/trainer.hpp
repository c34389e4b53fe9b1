#pragma once
// Contrastive-divergence training: lower the energy of real data, raise the
// energy of freshly sampled negatives, with an optional magnitude regularizer
// that pins the otherwise-unidentified energy scale.

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iclebm/common.hpp"
#include "iclebm/gmm.hpp"
#include "iclebm/model.hpp"
#include "iclebm/sampler.hpp"

namespace iclebm {

struct TrainConfig {
  i64 batch_size = 32;
  i64 seq_len = 32;
  i64 num_steps = 20000;
  i64 num_confab = 1;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 1.0;
  double energy_reg = 0.1;  // lambda; 0 disables
  u64 seed = 0;
  LangevinConfig langevin;
  i64 checkpoint_every = 1000;  // 0 disables periodic checkpoints
  i64 log_every = 50;

  void validate(int dim) const;
};

struct TrainMetrics {
  i64 step = 0;
  double loss = 0.0;
  double mean_real_energy = 0.0;
  double mean_confab_energy = 0.0;
  double energy_gap = 0.0;  // mean_real_energy - mean_confab_energy
  double grad_norm = 0.0;   // global norm before clipping
  double wall_ms = 0.0;
};

// mean over (batch, confab, position) of E+ - E- plus
// reg * (mean(E+^2) + mean(E-^2)). confab is [B, num_confab, T] C-order.
double cd_loss(const Eigen::MatrixXd& real_energies, const std::vector<double>& confab_energies, i64 num_confab,
               double reg);

struct AdamState {
  Eigen::VectorXd m, v;
  i64 t = 0;
  explicit AdamState(i64 n) : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)) {}
};

// Filled on request by training_step for instrumented tests.
struct StepTrace {
  Eigen::MatrixXd real_energies;        // [B, T]
  std::vector<double> confab_energies;  // [B, C, T]
  Eigen::VectorXd clipped_grad;         // gradient handed to Adam
};

class StepFailure : public std::runtime_error {
 public:
  StepFailure(i64 step, const std::string& msg)
      : std::runtime_error("training step " + std::to_string(step) + ": " + msg), step_(step) {}
  i64 step() const { return step_; }

 private:
  i64 step_;
};

class TrainAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One CD step: negatives, energies, loss, clipped gradient, Adam update.
// Throws StepFailure (theta unchanged) when the loss or gradient is non-finite.
TrainMetrics training_step(EnergyModel& model, AdamState& adam, const SequenceBatch& batch, const TrainConfig& cfg,
                           i64 step_index, StepTrace* trace = nullptr);

struct TrainResult {
  std::string final_checkpoint;
  std::string metrics_path;
  i64 steps_completed = 0;
};

// Full loop on freshly generated batches; writes metrics.csv and checkpoints
// under out_dir. Aborts (final checkpoint flushed) after 10 consecutive
// failed steps.
TrainResult train(const TaskPrior& prior, const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const std::string& out_dir);

}  // namespace iclebm
