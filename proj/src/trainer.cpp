#include "iclebm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "iclebm/rng.hpp"

namespace iclebm {

namespace {

constexpr u64 kModelInitTag = 0x6d696e69ULL;  // "mini"
constexpr u64 kBatchTag = 0x62617463ULL;      // "batc"
constexpr u64 kSamplerTag = 0x73616d70ULL;    // "samp"
constexpr int kMaxConsecutiveFailures = 10;

std::string checkpoint_name(i64 step) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "checkpoint_%06lld.iclebm", static_cast<long long>(step));
  return buf;
}

void write_metrics_row(std::ofstream& out, const TrainMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f", static_cast<long long>(m.step), m.loss,
                m.mean_real_energy, m.mean_confab_energy, m.energy_gap, m.grad_norm, m.wall_ms);
  out << buf << '\n';
  out.flush();
}

}  // namespace

void TrainConfig::validate(int dim) const {
  check_arg(batch_size >= 1, "train.batch_size must be >= 1");
  check_arg(seq_len >= 1, "train.seq_len must be >= 1");
  check_arg(num_steps >= 0, "train.num_steps must be >= 0");
  check_arg(num_confab >= 1, "train.num_confab must be >= 1");
  check_arg(learning_rate >= 0.0 && std::isfinite(learning_rate), "train.learning_rate must be >= 0");
  check_arg(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "train.adam_beta1 must lie in [0, 1)");
  check_arg(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "train.adam_beta2 must lie in [0, 1)");
  check_arg(adam_eps > 0.0, "train.adam_eps must be > 0");
  check_arg(grad_clip_norm > 0.0, "train.grad_clip_norm must be > 0");
  check_arg(energy_reg >= 0.0, "train.energy_reg must be >= 0");
  check_arg(checkpoint_every >= 0, "train.checkpoint_every must be >= 0");
  check_arg(log_every >= 1, "train.log_every must be >= 1");
  langevin.validate(dim);
}

double cd_loss(const Eigen::MatrixXd& real_energies, const std::vector<double>& confab_energies, i64 num_confab,
               double reg) {
  const i64 b = real_energies.rows();
  const i64 t = real_energies.cols();
  check_arg(num_confab >= 1, "cd_loss: num_confab must be >= 1");
  check_arg(static_cast<i64>(confab_energies.size()) == b * num_confab * t,
            "cd_loss: confab energies not broadcast-compatible with real energies");
  check_arg(real_energies.allFinite(), "cd_loss: non-finite real energy");
  for (double e : confab_energies) check_arg(std::isfinite(e), "cd_loss: non-finite confabulated energy");

  double diff = 0.0, real_sq = 0.0, confab_sq = 0.0;
  for (i64 bi = 0; bi < b; ++bi)
    for (i64 ti = 0; ti < t; ++ti) real_sq += real_energies(bi, ti) * real_energies(bi, ti);
  for (i64 bi = 0; bi < b; ++bi)
    for (i64 c = 0; c < num_confab; ++c)
      for (i64 ti = 0; ti < t; ++ti) {
        const double e = confab_energies[static_cast<size_t>((bi * num_confab + c) * t + ti)];
        diff += real_energies(bi, ti) - e;
        confab_sq += e * e;
      }
  const double n_real = static_cast<double>(b * t);
  const double n_confab = static_cast<double>(b * num_confab * t);
  return diff / n_confab + reg * (real_sq / n_real + confab_sq / n_confab);
}

TrainMetrics training_step(EnergyModel& model, AdamState& adam, const SequenceBatch& batch, const TrainConfig& cfg,
                           i64 step_index, StepTrace* trace) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate(static_cast<int>(batch.dim));
  check_arg(batch.batch == cfg.batch_size && batch.seq_len == cfg.seq_len,
            "training_step: batch shape does not match config");
  check_arg(adam.m.size() == model.num_params(), "training_step: optimizer state size mismatch");

  const i64 B = batch.batch, T = batch.seq_len, C = cfg.num_confab, d = batch.dim;
  const i64 rows = B * C, slots = 2 * T;

  // Confabulated negatives; no parameter gradients flow through the sampler.
  // A non-finite gradient inside the chains is an exploding model, so it
  // fails the step rather than the run.
  NegativeSet neg;
  try {
    neg = sample_negatives(model, batch, C, cfg.langevin, rng::derive(cfg.seed, {kSamplerTag, static_cast<u64>(step_index)}));
  } catch (const std::runtime_error& e) {
    throw StepFailure(step_index, e.what());
  }

  // One two-block pass yields real energies (block 1 of the c=0 rows, which is
  // exactly the causal forward) and every confabulated energy (block 2).
  std::vector<double> values(static_cast<size_t>(rows * slots * d));
  for (i64 b = 0; b < B; ++b)
    for (i64 c = 0; c < C; ++c) {
      double* row = values.data() + (b * C + c) * slots * d;
      std::memcpy(row, batch.row(b), static_cast<size_t>(T * d) * sizeof(double));
      std::memcpy(row + T * d, neg.values.data() + (b * C + c) * T * d, static_cast<size_t>(T * d) * sizeof(double));
    }
  auto pass = model.new_pass();
  std::vector<double> energies(static_cast<size_t>(rows * slots));
  pass->forward(values.data(), rows, MaskSpec::two_block(static_cast<int>(T)), energies.data());

  Eigen::MatrixXd real_E(B, T);
  std::vector<double> confab_E(static_cast<size_t>(B * C * T));
  for (i64 b = 0; b < B; ++b) {
    for (i64 t = 0; t < T; ++t) real_E(b, t) = energies[static_cast<size_t>((b * C) * slots + t)];
    for (i64 c = 0; c < C; ++c)
      for (i64 n = 0; n < T; ++n)
        confab_E[static_cast<size_t>((b * C + c) * T + n)] = energies[static_cast<size_t>((b * C + c) * slots + T + n)];
  }

  double loss = 0.0;
  try {
    loss = cd_loss(real_E, confab_E, C, cfg.energy_reg);
  } catch (const std::invalid_argument& e) {
    throw StepFailure(step_index, e.what());
  }
  if (!std::isfinite(loss)) throw StepFailure(step_index, "non-finite loss");

  // d loss / d E+ and d E-; the real term appears once per confab chain in the
  // diff mean, so its cotangent lives on the c=0 rows only.
  const double n_real = static_cast<double>(B * T);
  const double n_confab = static_cast<double>(B * C * T);
  std::vector<double> cot(static_cast<size_t>(rows * slots), 0.0);
  for (i64 b = 0; b < B; ++b) {
    for (i64 t = 0; t < T; ++t)
      cot[static_cast<size_t>((b * C) * slots + t)] = 1.0 / n_real + 2.0 * cfg.energy_reg * real_E(b, t) / n_real;
    for (i64 c = 0; c < C; ++c)
      for (i64 n = 0; n < T; ++n)
        cot[static_cast<size_t>((b * C + c) * slots + T + n)] =
            -1.0 / n_confab + 2.0 * cfg.energy_reg * confab_E[static_cast<size_t>((b * C + c) * T + n)] / n_confab;
  }
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(model.num_params());
  pass->backward(cot.data(), nullptr, grad.data());

  const double grad_norm = grad.norm();
  if (!std::isfinite(grad_norm)) throw StepFailure(step_index, "non-finite parameter gradient");
  if (grad_norm > cfg.grad_clip_norm) grad *= cfg.grad_clip_norm / grad_norm;

  adam.t += 1;
  adam.m = cfg.adam_beta1 * adam.m + (1.0 - cfg.adam_beta1) * grad;
  adam.v = cfg.adam_beta2 * adam.v.array().matrix() + (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(adam.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(adam.t));
  Eigen::VectorXd delta =
      (-cfg.learning_rate) * (adam.m / bc1).cwiseQuotient(((adam.v / bc2).cwiseSqrt().array() + cfg.adam_eps).matrix());
  model.add_to_params(delta.data());

  if (trace != nullptr) {
    trace->real_energies = real_E;
    trace->confab_energies = confab_E;
    trace->clipped_grad = grad;
  }

  TrainMetrics m;
  m.step = step_index;
  m.loss = loss;
  m.mean_real_energy = real_E.mean();
  double confab_sum = 0.0;
  for (double e : confab_E) confab_sum += e;
  m.mean_confab_energy = confab_sum / n_confab;
  m.energy_gap = m.mean_real_energy - m.mean_confab_energy;
  m.grad_norm = grad_norm;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

TrainResult train(const TaskPrior& prior, const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const std::string& out_dir) {
  prior.validate();
  model_cfg.validate();
  cfg.validate(prior.dim);
  check_arg(prior.dim == model_cfg.input_dim, "train: prior.dim must equal model.input_dim");
  check_arg(cfg.seq_len <= model_cfg.max_seq_len, "train: train.seq_len exceeds model.max_seq_len");

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  EnergyModel model(model_cfg, rng::derive(cfg.seed, {kModelInitTag}));
  AdamState adam(model.num_params());

  TrainResult result;
  result.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  const std::string initial_path = (fs::path(out_dir) / checkpoint_name(0)).string();
  const std::string final_path = (fs::path(out_dir) / "checkpoint_final.iclebm").string();

  model.save(initial_path);
  std::ofstream metrics(result.metrics_path);
  if (!metrics) throw IoError("cannot open for writing: " + result.metrics_path);
  metrics << "step,loss,mean_real_energy,mean_confab_energy,energy_gap,grad_norm,wall_ms\n";
  metrics.flush();

  int consecutive_failures = 0;
  for (i64 step = 1; step <= cfg.num_steps; ++step) {
    const BatchResult br = make_batch(prior, cfg.batch_size, cfg.seq_len, rng::derive(cfg.seed, {kBatchTag, static_cast<u64>(step)}));
    try {
      const TrainMetrics m = training_step(model, adam, br.batch, cfg, step);
      consecutive_failures = 0;
      result.steps_completed = step;
      if (step % cfg.log_every == 0 || step == cfg.num_steps) write_metrics_row(metrics, m);
      if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
        model.save((fs::path(out_dir) / checkpoint_name(step)).string());
    } catch (const StepFailure& f) {
      std::cerr << "iclebm: " << f.what() << " (skipping update)\n";
      if (++consecutive_failures >= kMaxConsecutiveFailures) {
        model.save(final_path);
        throw TrainAborted("training aborted after " + std::to_string(consecutive_failures) +
                           " consecutive failed steps; final checkpoint flushed to " + final_path);
      }
    }
  }

  if (cfg.num_steps == 0) {
    result.final_checkpoint = initial_path;  // an empty loop emits only the initial checkpoint
    return result;
  }
  model.save(final_path);
  result.final_checkpoint = final_path;
  return result;
}

}  // namespace iclebm
