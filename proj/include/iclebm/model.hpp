#pragma once
// Causal GPT-style transformer that maps a sequence of d-dimensional points to
// one scalar energy per position, with exact reverse-mode gradients for both
// parameters and inputs.
//
// The masked-pass machinery generalizes the causal mask: slot q may attend to
// keys [0, kend[q]) plus itself, and carries an explicit positional-embedding
// id. Two patterns beyond plain causal attention are used throughout:
//   * two_block(T): [real sequence | per-position replacements]. Slot T+n sees
//     the real prefix 0..n-1 plus itself, so its energy equals the energy of
//     the (n+1)-length sequence [real_0..real_{n-1}, replacement_n] at its
//     last position. One forward evaluates all positions' replacements.
//   * prefix_fan(N, M): [shared context | M independent continuations], each
//     continuation attending to the full context plus itself.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iclebm/common.hpp"
#include "iclebm/gmm.hpp"

namespace iclebm {

enum class Precision { kFloat64 = 0, kFloat32 = 1 };

struct ModelConfig {
  int num_layers = 6;
  int num_heads = 8;
  int d_model = 128;
  int d_ff = 0;  // 0 selects 4 * d_model
  int input_dim = 2;
  int max_seq_len = 64;
  Precision precision = Precision::kFloat64;

  int effective_d_ff() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  void validate() const;
};

struct ParamDef {
  std::string name;
  std::vector<i64> dims;  // Eigen map shape {rows[, cols]}; column-major on disk
  i64 offset = 0;
  i64 size = 0;
};

struct MaskSpec {
  std::vector<int> kend;    // slot q attends to keys [0, kend[q]) plus itself; kend[q] <= q
  std::vector<int> pos_id;  // positional-embedding index per slot

  static MaskSpec causal(int seq_len);
  static MaskSpec two_block(int seq_len);
  static MaskSpec prefix_fan(int prefix_len, int fan);

  int slots() const { return static_cast<int>(kend.size()); }
  void validate(int max_seq_len) const;
};

// One retained forward pass; reusable across calls with the same model.
// Not thread-safe; create one per thread of control.
class Pass {
 public:
  virtual ~Pass() = default;

  // values: [rows, slots, dim] C-order; energies_out: [rows, slots].
  virtual void forward(const double* values, i64 rows, const MaskSpec& mask, double* energies_out) = 0;

  // cotangent: [rows, slots] for the energies of the retained forward.
  // input_grads (may be null): overwritten with [rows, slots, dim].
  // param_grads (may be null): accumulated into, checkpoint order, length num_params.
  virtual void backward(const double* cotangent, double* input_grads, double* param_grads) = 0;
};

class EnergyModel {
 public:
  EnergyModel(const ModelConfig& config, u64 seed);
  EnergyModel(const EnergyModel& other);
  EnergyModel& operator=(const EnergyModel& other);
  EnergyModel(EnergyModel&&) noexcept;
  EnergyModel& operator=(EnergyModel&&) noexcept;
  ~EnergyModel();

  const ModelConfig& config() const;
  const std::vector<ParamDef>& param_defs() const;
  i64 num_params() const;

  std::vector<double> params() const;
  void set_params(const std::vector<double>& theta);
  void add_to_params(const double* delta);  // theta += delta, length num_params
  u64 params_checksum() const;

  // energies[b][t] under the strict causal mask. [B, T]
  Eigen::MatrixXd forward_energies(const SequenceBatch& batch) const;

  // d energies[., position] / d values[., position]; position is zero-based. [B, dim]
  Eigen::MatrixXd input_gradient(const SequenceBatch& batch, int position) const;

  // d sum(cotangent * energies) / d theta, flattened in checkpoint order.
  std::vector<double> parameter_gradient(const SequenceBatch& batch, const Eigen::MatrixXd& cotangent) const;

  void save(const std::string& path) const;
  static EnergyModel load(const std::string& path);

  std::unique_ptr<Pass> new_pass() const;

 private:
  struct Impl;
  explicit EnergyModel(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

// Closed-form parameter count for a config; must equal num_params().
i64 parameter_count(const ModelConfig& config);

}  // namespace iclebm
