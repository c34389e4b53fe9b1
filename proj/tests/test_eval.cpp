#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "iclebm/eval.hpp"
#include "iclebm/rng.hpp"
#include "iclebm/sampler.hpp"

using namespace iclebm;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 4;
  cfg.d_model = 16;
  cfg.input_dim = 2;
  cfg.max_seq_len = 8;
  return cfg;
}

GaussianMixtureTask single_gaussian(double mx, double my, double scale) {
  GaussianMixtureTask task;
  task.means.resize(1, 2);
  task.means << mx, my;
  task.cov_scales = Eigen::VectorXd::Constant(1, scale);
  task.weights = Eigen::VectorXd::Constant(1, 1.0);
  return task;
}

double quadratic(double x, double y) { return 0.5 * (x * x + y * y); }

}  // namespace

TEST_CASE("eval_on_grid: shape and stub values") {
  GridSpec spec;
  spec.nx = 64;
  spec.ny = 64;
  const EnergyGrid grid = eval_on_grid(spec, quadratic);
  CHECK(grid.values.rows() == 64);
  CHECK(grid.values.cols() == 64);
  for (int i = 0; i < 64; i += 13)
    for (int j = 0; j < 64; j += 13)
      CHECK(std::abs(grid.values(i, j) - quadratic(spec.x_center(i), spec.y_center(j))) <= 1e-12);

  GridSpec bad;
  bad.nx = 1;
  CHECK_THROWS_AS(eval_on_grid(bad, quadratic), std::invalid_argument);
}

TEST_CASE("grid_log_partition: constant, Gaussian, shift, resolution convergence") {
  GridSpec spec;
  spec.x = {-3.0, 5.0};
  spec.y = {-2.0, 2.0};
  spec.nx = 32;
  spec.ny = 16;
  const double area = 8.0 * 4.0;
  EnergyGrid constant = eval_on_grid(spec, [](double, double) { return 1.75; });
  CHECK(grid_log_partition(constant) == doctest::Approx(std::log(area) - 1.75).epsilon(1e-12));

  GridSpec wide;
  wide.x = {-8.0, 8.0};
  wide.y = {-8.0, 8.0};
  wide.nx = 256;
  wide.ny = 256;
  const EnergyGrid gaussian = eval_on_grid(wide, quadratic);
  CHECK(std::abs(grid_log_partition(gaussian) - std::log(2.0 * M_PI)) < 1e-3);

  EnergyGrid shifted = gaussian;
  shifted.values.array() += 7.25;
  CHECK(std::abs(grid_log_partition(shifted) - (grid_log_partition(gaussian) - 7.25)) <= 1e-12);

  GridSpec doubled = wide;
  doubled.nx = 512;
  doubled.ny = 512;
  const EnergyGrid fine = eval_on_grid(doubled, quadratic);
  CHECK(std::abs(grid_log_partition(fine) - grid_log_partition(gaussian)) < 1e-3);
}

TEST_CASE("grid_log_density: exact normalization, uniform case, Gaussian stub") {
  GridSpec spec;
  spec.x = {-8.0, 8.0};
  spec.y = {-8.0, 8.0};
  spec.nx = 128;
  spec.ny = 128;
  const EnergyGrid grid = eval_on_grid(spec, quadratic);
  const Eigen::MatrixXd logdens = grid_log_density(grid);
  double total = 0.0;
  for (int i = 0; i < spec.nx; ++i)
    for (int j = 0; j < spec.ny; ++j) total += std::exp(logdens(i, j));
  total *= grid.spec.cell_area();
  CHECK(std::abs(total - 1.0) <= 1e-12);

  // interior cells match the standard normal log density
  const GaussianMixtureTask normal = single_gaussian(0.0, 0.0, 1.0);
  for (int i = 40; i < 90; i += 7)
    for (int j = 40; j < 90; j += 7) {
      const double x[2] = {spec.x_center(i), spec.y_center(j)};
      CHECK(std::abs(logdens(i, j) - true_log_density(normal, x)) < 1e-3);
    }

  EnergyGrid flat = grid;
  flat.values.setConstant(3.0);
  const Eigen::MatrixXd uniform = grid_log_density(flat);
  CHECK(uniform(3, 5) == doctest::Approx(-std::log(16.0 * 16.0)).epsilon(1e-12));
}

TEST_CASE("spearman_rho: spec examples and tie handling") {
  const std::vector<double> a{1.0, 2.0, 3.0, 4.0};
  std::vector<double> b;
  for (double v : a) b.push_back(2.0 * v + 3.0);
  CHECK(spearman_rho(a, b) == doctest::Approx(1.0).epsilon(1e-15));
  for (size_t i = 0; i < b.size(); ++i) b[i] = -a[i];
  CHECK(spearman_rho(a, b) == doctest::Approx(-1.0).epsilon(1e-15));

  // hand-computed: 1 - 6 * sum d^2 / (n (n^2-1)) with d = (0, 1, -1, 0)
  CHECK(spearman_rho({1.0, 2.0, 3.0, 4.0}, {1.0, 3.0, 2.0, 4.0}) == doctest::Approx(0.8).epsilon(1e-15));

  CHECK_THROWS_AS(spearman_rho({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}), std::domain_error);
  CHECK_THROWS_AS(spearman_rho({1.0, 2.0}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(spearman_rho({1.0, 2.0, 3.0}, {1.0, 2.0}), std::invalid_argument);

  // average-rank ties: exchanging tied elements changes nothing
  const std::vector<double> t1{1.0, 2.0, 2.0, 3.0, 5.0};
  const std::vector<double> t2{4.0, 7.0, 7.0, 7.0, 9.0};
  CHECK(std::isfinite(spearman_rho(t1, t2)));
  CHECK(spearman_rho(t1, t2) == spearman_rho(t2, t1));
}

TEST_CASE("spearman_rho is invariant under strictly increasing transforms") {
  rng::Stream s(3);
  std::vector<double> a, b;
  for (int i = 0; i < 200; ++i) {
    a.push_back(s.next_uniform(-5.0, 5.0));
    b.push_back(s.next_uniform(-5.0, 5.0));
  }
  const double base = spearman_rho(a, b);
  std::vector<double> ta, tb;
  for (double v : a) ta.push_back(std::exp(0.3 * v));
  for (double v : b) tb.push_back(std::atan(v) * 7.0 - 2.0);
  CHECK(spearman_rho(ta, tb) == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("agreement_with_task: rigged stubs hit +1 and -1") {
  const GaussianMixtureTask task = sample_task(TaskPrior{}, 17);
  GridSpec spec;
  spec.nx = 32;
  spec.ny = 32;
  const EnergyGrid perfect = eval_on_grid(spec, [&](double x, double y) {
    const double p[2] = {x, y};
    return -true_log_density(task, p) + 12.5;  // energy = -log p up to a constant
  });
  CHECK(agreement_with_task(perfect, task) == doctest::Approx(1.0).epsilon(1e-15));

  const EnergyGrid inverted = eval_on_grid(spec, [&](double x, double y) {
    const double p[2] = {x, y};
    return true_log_density(task, p);
  });
  CHECK(agreement_with_task(inverted, task) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("energy_landscape: matches per-point forwards, leaves parameters alone") {
  const EnergyModel model(tiny_config(), 23);
  const u64 checksum = model.params_checksum();
  rng::Stream s(5);
  std::vector<double> context(3 * 2);
  for (double& v : context) v = s.next_uniform(-2.0, 2.0);

  GridSpec spec;
  spec.nx = 24;
  spec.ny = 24;  // 576 cells crosses the 256-cell chunk boundary twice
  const EnergyGrid grid = energy_landscape(model, context.data(), 3, spec);
  CHECK(model.params_checksum() == checksum);

  for (int i = 0; i < spec.nx; i += 5)
    for (int j = 0; j < spec.ny; j += 5) {
      SequenceBatch seq(1, 4, 2);
      for (int t = 0; t < 3; ++t)
        for (int d = 0; d < 2; ++d) seq.at(0, t, d) = context[static_cast<size_t>(t * 2 + d)];
      seq.at(0, 3, 0) = spec.x_center(i);
      seq.at(0, 3, 1) = spec.y_center(j);
      const double direct = model.forward_energies(seq)(0, 3);
      CHECK(std::abs(grid.values(i, j) - direct) <= 1e-12 * std::max(1.0, std::abs(direct)));
    }

  // empty context evaluates the unconditional position-1 energy
  const EnergyGrid unconditional = energy_landscape(model, nullptr, 0, spec);
  CHECK(unconditional.values.allFinite());

  std::vector<double> long_context(8 * 2, 0.0);
  CHECK_THROWS_AS(energy_landscape(model, long_context.data(), 8, spec), std::invalid_argument);
}

TEST_CASE("sharpening_curve: shapes, and a context-blind model is flat") {
  const GaussianMixtureTask task = sample_task(TaskPrior{}, 3);
  const std::vector<double> context = sample_sequence(task, 6, 4);
  GridSpec spec;
  spec.nx = 16;
  spec.ny = 16;

  const EnergyModel model(tiny_config(), 29);
  const SharpeningReport report = sharpening_curve(model, task, context.data(), 6, {1, 2}, spec, 7);
  CHECK(report.task_id == 7);
  CHECK(report.context_lengths == std::vector<i64>{1, 2});
  CHECK(report.spearman_rho.size() == 2);
  for (double r : report.spearman_rho) {
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
  }

  CHECK_THROWS_AS(sharpening_curve(model, task, context.data(), 6, {2, 1}, spec), std::invalid_argument);
  CHECK_THROWS_AS(sharpening_curve(model, task, context.data(), 6, {2, 7}, spec), std::invalid_argument);

  // blind the model to its context: no attention output, no positional signal
  EnergyModel blind(tiny_config(), 31);
  std::vector<double> theta = blind.params();
  for (const ParamDef& def : blind.param_defs())
    if (def.name.find("attn.") != std::string::npos || def.name == "pos_emb")
      for (i64 i = 0; i < def.size; ++i) theta[static_cast<size_t>(def.offset + i)] = 0.0;
  blind.set_params(theta);
  const SharpeningReport flat = sharpening_curve(blind, task, context.data(), 6, {1, 3, 5}, spec);
  CHECK(std::abs(flat.spearman_rho[0] - flat.spearman_rho[1]) <= 1e-12);
  CHECK(std::abs(flat.spearman_rho[1] - flat.spearman_rho[2]) <= 1e-12);
}

TEST_CASE("sample_quality: mode beats uniform, null case, analytic degenerate gap") {
  const std::vector<Interval> box{{-6.0, 6.0}};

  const GaussianMixtureTask task = sample_task(TaskPrior{}, 41);
  std::vector<double> at_mode(10 * 2);
  for (int i = 0; i < 10; ++i) {
    at_mode[static_cast<size_t>(2 * i)] = task.means(0, 0);
    at_mode[static_cast<size_t>(2 * i + 1)] = task.means(0, 1);
  }
  CHECK(sample_quality(at_mode.data(), 10, task, 4000, box, 1) > 0.0);

  // samples that are themselves init draws: zero in expectation
  {
    const GaussianMixtureTask t = single_gaussian(0.5, -0.5, 1.0);
    LangevinConfig lc;
    const std::vector<double> fake = sample_initial(lc, 1000, 2, 77);
    const double q = sample_quality(fake.data(), 1000, t, 20000, box, 33);
    double mean = 0.0, sq = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const double ld = true_log_density(t, fake.data() + 2 * i);
      mean += ld;
      sq += ld * ld;
    }
    mean /= 1000.0;
    const double se = std::sqrt((sq / 1000.0 - mean * mean) / 1000.0);
    CHECK(std::abs(q) < 3.0 * se);
  }

  // one tight component with samples at its mean: the gap has a closed form
  {
    const double sigma = 0.05, mx = 1.0, my = -2.0;
    const GaussianMixtureTask t = single_gaussian(mx, my, sigma);
    std::vector<double> at_mean{mx, my};
    const double q = sample_quality(at_mean.data(), 1, t, 200000, box, 5);
    // E_uniform[ ||x - mu||^2 ] per axis: width^2/12 + (mid - mu)^2
    const double ex = 144.0 / 12.0 + mx * mx;
    const double ey = 144.0 / 12.0 + my * my;
    const double analytic = (ex + ey) / (2.0 * sigma * sigma);
    CHECK(std::abs(q - analytic) < 0.05 * analytic);
  }
}

TEST_CASE("grid and report exports") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "iclebm_eval_test";
  fs::create_directories(dir);

  GridSpec spec;
  spec.nx = 8;
  spec.ny = 4;
  const EnergyGrid grid = eval_on_grid(spec, quadratic);

  const std::string csv = (dir / "grid.csv").string();
  export_grid_csv(csv, grid);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "x,y,energy");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 32);

  const std::string pgm = (dir / "grid.pgm").string();
  export_grid_pgm(pgm, grid);
  std::ifstream img(pgm, std::ios::binary);
  std::string magic, dims, maxval;
  std::getline(img, magic);
  std::getline(img, dims);
  std::getline(img, maxval);
  CHECK(magic == "P5");
  CHECK(dims == "8 4");
  CHECK(maxval == "255");
  std::vector<unsigned char> pixels(32);
  img.read(reinterpret_cast<char*>(pixels.data()), 32);
  CHECK(img.gcount() == 32);
  unsigned char lo = 255, hi = 0;
  for (unsigned char p : pixels) {
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
  CHECK(lo == 0);    // min-max normalized
  CHECK(hi == 255);

  SharpeningReport rep;
  rep.task_id = 3;
  rep.context_lengths = {2, 8};
  rep.spearman_rho = {0.25, 0.75};
  const std::string report_csv = (dir / "report.csv").string();
  export_report_csv(report_csv, {rep});
  std::ifstream rin(report_csv);
  std::getline(rin, header);
  CHECK(header == "task_id,context_length,spearman_rho");
  std::getline(rin, line);
  CHECK(line == "3,2,0.25");
  std::getline(rin, line);
  CHECK(line == "3,8,0.75");
}
