#pragma once
// Synthetic mixture-of-Gaussians tasks: the pretraining distribution,
// i.i.d. sequence draws from sampled tasks, and an exact log-density oracle.

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iclebm/common.hpp"

namespace iclebm {

struct TaskPrior {
  int num_components = 3;
  int dim = 2;
  std::vector<Interval> mean_box = {{-4.0, 4.0}};       // broadcast per axis
  Interval cov_scale_range = {0.3, 1.0};                // isotropic std range
  // Mixing proportions are fixed uniform (1/K each).

  void validate() const;
  std::vector<Interval> mean_box_per_axis() const { return box_for_dim(mean_box, dim); }
};

struct GaussianMixtureTask {
  Eigen::MatrixXd means;       // K x d
  Eigen::VectorXd cov_scales;  // K, isotropic std per component
  Eigen::VectorXd weights;     // K, nonnegative, sums to 1

  int num_components() const { return static_cast<int>(means.rows()); }
  int dim() const { return static_cast<int>(means.cols()); }
  void validate() const;
};

// [batch, seq_len, dim] with C-order strides.
struct SequenceBatch {
  i64 batch = 0;
  i64 seq_len = 0;
  i64 dim = 0;
  std::vector<double> values;
  std::vector<i64> task_ids;

  SequenceBatch() = default;
  SequenceBatch(i64 b, i64 t, i64 d)
      : batch(b), seq_len(t), dim(d), values(static_cast<size_t>(b * t * d), 0.0), task_ids(static_cast<size_t>(b), 0) {}

  double& at(i64 b, i64 t, i64 d) { return values[static_cast<size_t>((b * seq_len + t) * dim + d)]; }
  double at(i64 b, i64 t, i64 d) const { return values[static_cast<size_t>((b * seq_len + t) * dim + d)]; }
  const double* row(i64 b) const { return values.data() + b * seq_len * dim; }
  void validate() const;
};

// Draws a task from the prior: means uniform in mean_box, stds uniform in
// cov_scale_range, weights uniform.
GaussianMixtureTask sample_task(const TaskPrior& prior, u64 seed);

// [seq_len * dim] row-major i.i.d. draws from the mixture.
std::vector<double> sample_sequence(const GaussianMixtureTask& task, i64 seq_len, u64 seed);

// log sum_k w_k N(x; mu_k, s_k^2 I), stable via log-sum-exp.
double true_log_density(const GaussianMixtureTask& task, const double* x);

struct BatchResult {
  SequenceBatch batch;
  std::vector<GaussianMixtureTask> tasks;  // one fresh task per row
};

// Row r uses task seed derive(seed, {kTaskTag, r}) and sequence seed
// derive(seed, {kSeqTag, r}); see gmm.cpp for the tag constants.
BatchResult make_batch(const TaskPrior& prior, i64 batch, i64 seq_len, u64 seed);

// Sub-seed derivations used by make_batch, exposed so callers can reproduce
// individual rows.
u64 batch_row_task_seed(u64 seed, i64 row);
u64 batch_row_sequence_seed(u64 seed, i64 row);

// One task per line: "K d mean_1 .. mean_Kd scale_1 .. scale_K w_1 .. w_K".
std::string format_task(const GaussianMixtureTask& task);
GaussianMixtureTask parse_task(const std::string& line);
void save_tasks(const std::string& path, const std::vector<GaussianMixtureTask>& tasks);
std::vector<GaussianMixtureTask> load_tasks(const std::string& path);

// CSV with header "task_id,seq_idx,x0,x1,...".
void export_batch_csv(const std::string& path, const SequenceBatch& batch);

}  // namespace iclebm
