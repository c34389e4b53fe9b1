#include "iclebm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "iclebm/rng.hpp"

namespace iclebm {

namespace {

constexpr i64 kGridChunk = 256;
constexpr u64 kReferenceTag = 0x72656665ULL;  // "refe"

// Average ranks (1-based) with ties sharing their mean rank.
std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

void GridSpec::validate() const {
  check_arg(nx >= 2 && ny >= 2, "grid: resolution must be >= 2 per axis");
  check_arg(x.lo < x.hi && y.lo < y.hi, "grid: bounds must be ordered");
}

EnergyGrid eval_on_grid(const GridSpec& spec, const std::function<double(double, double)>& f) {
  spec.validate();
  EnergyGrid grid;
  grid.spec = spec;
  grid.values.resize(spec.nx, spec.ny);
  for (int i = 0; i < spec.nx; ++i)
    for (int j = 0; j < spec.ny; ++j) grid.values(i, j) = f(spec.x_center(i), spec.y_center(j));
  return grid;
}

EnergyGrid energy_landscape(const EnergyModel& model, const double* context, i64 context_len, const GridSpec& spec) {
  spec.validate();
  check_arg(context_len >= 0, "energy_landscape: context_len must be >= 0");
  const ModelConfig& cfg = model.config();
  check_arg(cfg.input_dim == 2, "energy_landscape: requires a 2-d model");
  check_arg(context_len + 1 <= cfg.max_seq_len, "energy_landscape: context too long for model max_seq_len");
  for (i64 i = 0; i < context_len * 2; ++i)
    check_arg(std::isfinite(context[i]), "energy_landscape: context must be finite");

  EnergyGrid grid;
  grid.spec = spec;
  grid.values.resize(spec.nx, spec.ny);

  const i64 total = static_cast<i64>(spec.nx) * spec.ny;
  auto pass = model.new_pass();
  std::unique_ptr<Pass> tail_pass;
  std::vector<double> values, energies;
  for (i64 at = 0; at < total; at += kGridChunk) {
    const i64 m = std::min<i64>(kGridChunk, total - at);
    const i64 slots = context_len + m;
    values.assign(static_cast<size_t>(slots * 2), 0.0);
    std::copy(context, context + context_len * 2, values.begin());
    for (i64 k = 0; k < m; ++k) {
      const i64 cell = at + k;
      const int i = static_cast<int>(cell / spec.ny);
      const int j = static_cast<int>(cell % spec.ny);
      values[static_cast<size_t>((context_len + k) * 2 + 0)] = spec.x_center(i);
      values[static_cast<size_t>((context_len + k) * 2 + 1)] = spec.y_center(j);
    }
    energies.resize(static_cast<size_t>(slots));
    auto& p = (m == kGridChunk) ? pass : (tail_pass ? tail_pass : (tail_pass = model.new_pass()));
    p->forward(values.data(), 1, MaskSpec::prefix_fan(static_cast<int>(context_len), static_cast<int>(m)),
               energies.data());
    for (i64 k = 0; k < m; ++k) {
      const i64 cell = at + k;
      grid.values(static_cast<int>(cell / spec.ny), static_cast<int>(cell % spec.ny)) =
          energies[static_cast<size_t>(context_len + k)];
    }
  }
  return grid;
}

double grid_log_partition(const EnergyGrid& grid) {
  grid.spec.validate();
  check_arg(grid.values.rows() == grid.spec.nx && grid.values.cols() == grid.spec.ny, "grid: value shape mismatch");
  check_arg(grid.values.allFinite(), "grid: values must be finite");
  const double m = (-grid.values).maxCoeff();
  double acc = 0.0;
  for (int i = 0; i < grid.spec.nx; ++i)
    for (int j = 0; j < grid.spec.ny; ++j) acc += std::exp(-grid.values(i, j) - m);
  return m + std::log(acc) + std::log(grid.spec.cell_area());
}

Eigen::MatrixXd grid_log_density(const EnergyGrid& grid) {
  const double log_z = grid_log_partition(grid);
  return (-grid.values).array() - log_z;
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  check_arg(a.size() == b.size(), "spearman_rho: length mismatch");
  check_arg(a.size() >= 3, "spearman_rho: need at least 3 points");
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double da = ra[i] - ma, db = rb[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw std::domain_error("spearman_rho: zero rank variance, correlation undefined");
  return sab / std::sqrt(saa * sbb);
}

double agreement_with_task(const EnergyGrid& grid, const GaussianMixtureTask& task) {
  grid.spec.validate();
  check_arg(task.dim() == 2, "agreement_with_task: requires a 2-d task");
  std::vector<double> energies, neg_log_density;
  energies.reserve(static_cast<size_t>(grid.spec.nx) * grid.spec.ny);
  neg_log_density.reserve(energies.capacity());
  for (int i = 0; i < grid.spec.nx; ++i)
    for (int j = 0; j < grid.spec.ny; ++j) {
      energies.push_back(grid.values(i, j));
      const double x[2] = {grid.spec.x_center(i), grid.spec.y_center(j)};
      neg_log_density.push_back(-true_log_density(task, x));
    }
  return spearman_rho(energies, neg_log_density);
}

double landscape_agreement(const EnergyModel& model, const GaussianMixtureTask& task, const double* context,
                           i64 context_len, const GridSpec& spec) {
  return agreement_with_task(energy_landscape(model, context, context_len, spec), task);
}

SharpeningReport sharpening_curve(const EnergyModel& model, const GaussianMixtureTask& task,
                                  const double* full_context, i64 full_len, const std::vector<i64>& lengths,
                                  const GridSpec& spec, i64 task_id) {
  check_arg(!lengths.empty(), "sharpening_curve: lengths must be nonempty");
  for (size_t i = 0; i < lengths.size(); ++i) {
    check_arg(lengths[i] >= 0 && lengths[i] <= full_len, "sharpening_curve: lengths must lie in [0, full_len]");
    if (i > 0) check_arg(lengths[i] > lengths[i - 1], "sharpening_curve: lengths must be ascending");
  }
  SharpeningReport report;
  report.task_id = task_id;
  report.context_lengths = lengths;
  for (i64 n : lengths) report.spearman_rho.push_back(landscape_agreement(model, task, full_context, n, spec));
  return report;
}

double sample_quality(const double* samples, i64 num_samples, const GaussianMixtureTask& task, i64 num_reference,
                      const std::vector<Interval>& init_box, u64 seed) {
  check_arg(num_samples >= 1, "sample_quality: need at least one sample");
  check_arg(num_reference >= 1, "sample_quality: need at least one reference draw");
  const int d = task.dim();
  const auto box = box_for_dim(init_box, d);

  double mean_model = 0.0;
  for (i64 i = 0; i < num_samples; ++i) mean_model += true_log_density(task, samples + i * d);
  mean_model /= static_cast<double>(num_samples);

  rng::Stream s(rng::derive(seed, {kReferenceTag}));
  std::vector<double> x(static_cast<size_t>(d));
  double mean_ref = 0.0;
  for (i64 i = 0; i < num_reference; ++i) {
    for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] = s.next_uniform(box[j].lo, box[j].hi);
    mean_ref += true_log_density(task, x.data());
  }
  mean_ref /= static_cast<double>(num_reference);
  return mean_model - mean_ref;
}

void export_grid_csv(const std::string& path, const EnergyGrid& grid) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "x,y,energy\n";
  char buf[128];
  for (int i = 0; i < grid.spec.nx; ++i)
    for (int j = 0; j < grid.spec.ny; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", grid.spec.x_center(i), grid.spec.y_center(j),
                    grid.values(i, j));
      out << buf << '\n';
    }
  if (!out) throw IoError("write failed: " + path);
}

void export_grid_pgm(const std::string& path, const EnergyGrid& grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const double lo = grid.values.minCoeff();
  const double hi = grid.values.maxCoeff();
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  out << "P5\n" << grid.spec.nx << " " << grid.spec.ny << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(grid.spec.nx));
  for (int j = grid.spec.ny - 1; j >= 0; --j) {  // top row = highest y
    for (int i = 0; i < grid.spec.nx; ++i)
      row[static_cast<size_t>(i)] = static_cast<unsigned char>(std::lround((grid.values(i, j) - lo) * scale));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write failed: " + path);
}

void export_report_csv(const std::string& path, const std::vector<SharpeningReport>& reports) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "task_id,context_length,spearman_rho\n";
  char buf[64];
  for (const auto& r : reports)
    for (size_t i = 0; i < r.context_lengths.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", r.spearman_rho[i]);
      out << r.task_id << ',' << r.context_lengths[i] << ',' << buf << '\n';
    }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace iclebm
