#pragma once
// Quantitative views of learned energy landscapes: grid reconstruction,
// grid-estimated partition functions, rank-correlation agreement with the
// exact task density, sharpening across context lengths, and sample quality.
//
// Rank correlation is the right agreement metric here: the Boltzmann form
// determines the energy only up to an additive constant, and Spearman's rho
// is invariant under any strictly increasing transform.

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iclebm/common.hpp"
#include "iclebm/gmm.hpp"
#include "iclebm/model.hpp"

namespace iclebm {

// Cell-centered rectangular grid.
struct GridSpec {
  Interval x{-6.0, 6.0};
  Interval y{-6.0, 6.0};
  int nx = 64;
  int ny = 64;

  double cell_w() const { return x.width() / nx; }
  double cell_h() const { return y.width() / ny; }
  double cell_area() const { return cell_w() * cell_h(); }
  double x_center(int i) const { return x.lo + (i + 0.5) * cell_w(); }
  double y_center(int j) const { return y.lo + (j + 0.5) * cell_h(); }
  void validate() const;
};

struct EnergyGrid {
  GridSpec spec;
  Eigen::MatrixXd values;  // nx x ny; values(i, j) at (x_center(i), y_center(j))
};

EnergyGrid eval_on_grid(const GridSpec& spec, const std::function<double(double, double)>& f);

// Conditional energies E(grid point | context) at position context_len.
// Model parameters are untouched.
EnergyGrid energy_landscape(const EnergyModel& model, const double* context, i64 context_len, const GridSpec& spec);

// log sum exp(-values) + log(cell area): midpoint estimate of log Z.
double grid_log_partition(const EnergyGrid& grid);

// -values - grid_log_partition(grid); exp(result) * cell_area sums to 1.
Eigen::MatrixXd grid_log_density(const EnergyGrid& grid);

// Spearman rank correlation with average-rank tie handling. Throws
// std::domain_error when either argument has zero rank variance.
double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

// spearman_rho(grid energies, -true log density on the same grid).
double agreement_with_task(const EnergyGrid& grid, const GaussianMixtureTask& task);
double landscape_agreement(const EnergyModel& model, const GaussianMixtureTask& task, const double* context,
                           i64 context_len, const GridSpec& spec);

struct SharpeningReport {
  i64 task_id = 0;
  std::vector<i64> context_lengths;
  std::vector<double> spearman_rho;
};

// Agreement on nested prefixes of full_context, one value per entry of
// lengths (ascending, max <= full_len).
SharpeningReport sharpening_curve(const EnergyModel& model, const GaussianMixtureTask& task,
                                  const double* full_context, i64 full_len, const std::vector<i64>& lengths,
                                  const GridSpec& spec, i64 task_id = 0);

// mean true log density of samples minus mean true log density of
// num_reference uniform draws from init_box; positive means the sampler found
// higher-probability regions than its initialization.
double sample_quality(const double* samples, i64 num_samples, const GaussianMixtureTask& task, i64 num_reference,
                      const std::vector<Interval>& init_box, u64 seed);

void export_grid_csv(const std::string& path, const EnergyGrid& grid);
// 8-bit binary PGM, min-max normalized per grid, top row = highest y.
void export_grid_pgm(const std::string& path, const EnergyGrid& grid);
void export_report_csv(const std::string& path, const std::vector<SharpeningReport>& reports);

}  // namespace iclebm
