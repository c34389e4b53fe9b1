#pragma once
// Langevin MCMC: confabulated negatives for every sequence position during
// training, and conditional sampling from a trained model. Chains are
// embarrassingly parallel; the noise of chain (b, c, n) at step t is a pure
// function of (seed, b, c, n, t), so results are independent of scheduling.

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iclebm/common.hpp"
#include "iclebm/model.hpp"

namespace iclebm {

struct LangevinConfig {
  double step_size = 3.16;
  double noise_scale = 0.01;
  int num_steps = 15;
  std::vector<Interval> init_box = {{-6.0, 6.0}};    // broadcast per axis
  std::vector<Interval> clamp_box = {{-10.0, 10.0}};

  void validate(int dim) const;
};

// [batch, num_confab, seq_len, dim]; position-n replacements only, the real
// prefixes are never part of this structure.
struct NegativeSet {
  i64 batch = 0, num_confab = 0, seq_len = 0, dim = 0;
  std::vector<double> values;

  double at(i64 b, i64 c, i64 n, i64 d) const {
    return values[static_cast<size_t>(((b * num_confab + c) * seq_len + n) * dim + d)];
  }
};

// Energy gradient for a fixed set of chains; x and g are [num_chains, dim].
class EnergyGradFn {
 public:
  virtual ~EnergyGradFn() = default;
  virtual i64 num_chains() const = 0;
  virtual int dim() const = 0;
  virtual void grad(const double* x, double* g) = 0;
};

struct ChainTag {
  u64 b = 0, c = 0, n = 0;
};

u64 chain_init_seed(u64 seed, const ChainTag& tag);
u64 chain_noise_seed(u64 seed, const ChainTag& tag, int step);

// count points i.i.d. uniform on init_box. [count, dim]
std::vector<double> sample_initial(const LangevinConfig& cfg, i64 count, int dim, u64 seed);

// clamp(x - step_size * grad + noise), noise ~ N(0, noise_scale^2 I) drawn
// sequentially from Stream(seed). Rejects non-finite gradients.
std::vector<double> langevin_step(const std::vector<double>& x, const std::vector<double>& grad, int dim,
                                  const LangevinConfig& cfg, u64 seed);

// Runs cfg.num_steps updates on x ([R, dim], in place). tags[r] names chain r
// for noise derivation. If trajectory is non-null it receives R*dim doubles
// per snapshot: the initial state, then one snapshot per step.
void run_chains(EnergyGradFn& fn, const LangevinConfig& cfg, u64 seed, const std::vector<ChainTag>& tags,
                std::vector<double>& x, std::vector<double>* trajectory = nullptr);

// Fig-2-style negatives: chain (b, c, n) starts uniform on init_box and walks
// the energy of [real_b[0..n-1], x] at position n. Batched over all positions
// with a two-block masked pass; theta receives no gradient.
NegativeSet sample_negatives(const EnergyModel& model, const SequenceBatch& real, i64 num_confab,
                             const LangevinConfig& cfg, u64 seed);

// num_samples independent chains at position context_len, conditioned on
// context [context_len, dim]. Returns [num_samples, dim].
Eigen::MatrixXd sample_conditional(const EnergyModel& model, const double* context, i64 context_len,
                                   i64 num_samples, const LangevinConfig& cfg, u64 seed,
                                   std::vector<double>* trajectory = nullptr);

// CSV "chain,x0,..." of final states, or "chain,step,x0,..." for trajectories.
void export_samples_csv(const std::string& path, const Eigen::MatrixXd& samples);
void export_trajectory_csv(const std::string& path, const std::vector<double>& trajectory, i64 num_chains, int dim);

}  // namespace iclebm
