#include "iclebm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "iclebm/rng.hpp"

namespace iclebm {

namespace {

constexpr u64 kInitTag = 0x696e6974ULL;   // "init"
constexpr u64 kNoiseTag = 0x6e6f6973ULL;  // "nois"
constexpr i64 kFanChunk = 256;

// Gradients of per-position energies for the training assembly
// [real block | replacement block] (see MaskSpec::two_block).
class NegativesGradFn final : public EnergyGradFn {
 public:
  NegativesGradFn(const EnergyModel& model, const SequenceBatch& real, i64 num_confab)
      : pass_(model.new_pass()),
        rows_(real.batch * num_confab),
        seq_len_(real.seq_len),
        dim_(static_cast<int>(real.dim)),
        mask_(MaskSpec::two_block(static_cast<int>(real.seq_len))) {
    const i64 slots = 2 * seq_len_;
    values_.assign(static_cast<size_t>(rows_ * slots * dim_), 0.0);
    for (i64 b = 0; b < real.batch; ++b)
      for (i64 c = 0; c < num_confab; ++c)
        std::memcpy(values_.data() + ((b * num_confab + c) * slots) * dim_, real.row(b),
                    static_cast<size_t>(seq_len_ * dim_) * sizeof(double));
    cot_.assign(static_cast<size_t>(rows_ * slots), 0.0);
    for (i64 r = 0; r < rows_; ++r)
      for (i64 n = 0; n < seq_len_; ++n) cot_[static_cast<size_t>(r * slots + seq_len_ + n)] = 1.0;
    energies_.resize(static_cast<size_t>(rows_ * slots));
    input_grads_.resize(values_.size());
  }

  i64 num_chains() const override { return rows_ * seq_len_; }
  int dim() const override { return dim_; }

  void grad(const double* x, double* g) override {
    const i64 slots = 2 * seq_len_;
    for (i64 r = 0; r < rows_; ++r)
      std::memcpy(values_.data() + (r * slots + seq_len_) * dim_, x + r * seq_len_ * dim_,
                  static_cast<size_t>(seq_len_ * dim_) * sizeof(double));
    pass_->forward(values_.data(), rows_, mask_, energies_.data());
    pass_->backward(cot_.data(), input_grads_.data(), nullptr);
    for (i64 r = 0; r < rows_; ++r)
      std::memcpy(g + r * seq_len_ * dim_, input_grads_.data() + (r * slots + seq_len_) * dim_,
                  static_cast<size_t>(seq_len_ * dim_) * sizeof(double));
  }

 private:
  std::unique_ptr<Pass> pass_;
  i64 rows_, seq_len_;
  int dim_;
  MaskSpec mask_;
  std::vector<double> values_, cot_, energies_, input_grads_;
};

// Gradients for independent continuations of one shared context, chunked so
// attention workspaces stay small.
class ConditionalGradFn final : public EnergyGradFn {
 public:
  ConditionalGradFn(const EnergyModel& model, const double* context, i64 context_len, i64 num_chains)
      : model_(model), context_len_(context_len), num_chains_(num_chains), dim_(model.config().input_dim) {
    context_.assign(context, context + context_len * dim_);
  }

  i64 num_chains() const override { return num_chains_; }
  int dim() const override { return dim_; }

  void grad(const double* x, double* g) override {
    for (i64 at = 0; at < num_chains_; at += kFanChunk) {
      const i64 m = std::min<i64>(kFanChunk, num_chains_ - at);
      run_chunk(x + at * dim_, g + at * dim_, m);
    }
  }

 private:
  void run_chunk(const double* x, double* g, i64 m) {
    const i64 slots = context_len_ + m;
    std::vector<double> values(static_cast<size_t>(slots * dim_));
    std::memcpy(values.data(), context_.data(), context_.size() * sizeof(double));
    std::memcpy(values.data() + context_len_ * dim_, x, static_cast<size_t>(m * dim_) * sizeof(double));
    std::vector<double> energies(static_cast<size_t>(slots));
    std::vector<double> cot(static_cast<size_t>(slots), 0.0);
    std::fill(cot.begin() + context_len_, cot.end(), 1.0);
    std::vector<double> input_grads(values.size());
    auto& pass = m == kFanChunk ? main_pass_ : tail_pass_;
    if (!pass) pass = model_.new_pass();
    pass->forward(values.data(), 1, MaskSpec::prefix_fan(static_cast<int>(context_len_), static_cast<int>(m)),
                  energies.data());
    pass->backward(cot.data(), input_grads.data(), nullptr);
    std::memcpy(g, input_grads.data() + context_len_ * dim_, static_cast<size_t>(m * dim_) * sizeof(double));
  }

  const EnergyModel& model_;
  i64 context_len_, num_chains_;
  int dim_;
  std::vector<double> context_;
  std::unique_ptr<Pass> main_pass_, tail_pass_;
};

[[noreturn]] void throw_nonfinite(const ChainTag& tag, int step) {
  throw std::runtime_error("langevin: non-finite energy gradient at (b=" + std::to_string(tag.b) +
                           ", c=" + std::to_string(tag.c) + ", n=" + std::to_string(tag.n) +
                           ", t=" + std::to_string(step) + "); the energy model is exploding");
}

}  // namespace

void LangevinConfig::validate(int dim) const {
  // The spec's no-op-chain examples use step_size 0, so 0 is admitted here.
  check_arg(step_size >= 0.0 && std::isfinite(step_size), "langevin.step_size must be >= 0");
  check_arg(noise_scale >= 0.0 && std::isfinite(noise_scale), "langevin.noise_scale must be >= 0");
  check_arg(num_steps >= 1, "langevin.num_steps must be >= 1");
  const auto init = box_for_dim(init_box, dim);
  const auto clamp = box_for_dim(clamp_box, dim);
  for (int j = 0; j < dim; ++j) {
    check_arg(init[j].lo < init[j].hi, "langevin.init_box: lower bound must be < upper bound");
    check_arg(clamp[j].contains(init[j]), "langevin.init_box must lie inside langevin.clamp_box");
  }
}

u64 chain_init_seed(u64 seed, const ChainTag& tag) { return rng::derive(seed, {kInitTag, tag.b, tag.c, tag.n}); }

u64 chain_noise_seed(u64 seed, const ChainTag& tag, int step) {
  return rng::derive(seed, {kNoiseTag, tag.b, tag.c, tag.n, static_cast<u64>(step)});
}

std::vector<double> sample_initial(const LangevinConfig& cfg, i64 count, int dim, u64 seed) {
  cfg.validate(dim);
  check_arg(count >= 1, "sample_initial: count must be >= 1");
  const auto box = box_for_dim(cfg.init_box, dim);
  rng::Stream s(seed);
  std::vector<double> out(static_cast<size_t>(count * dim));
  for (i64 i = 0; i < count; ++i)
    for (int j = 0; j < dim; ++j) out[static_cast<size_t>(i * dim + j)] = s.next_uniform(box[j].lo, box[j].hi);
  return out;
}

std::vector<double> langevin_step(const std::vector<double>& x, const std::vector<double>& grad, int dim,
                                  const LangevinConfig& cfg, u64 seed) {
  cfg.validate(dim);
  check_arg(x.size() == grad.size() && !x.empty(), "langevin_step: x and grad must have equal nonzero size");
  check_arg(x.size() % static_cast<size_t>(dim) == 0, "langevin_step: size must be a multiple of dim");
  for (double v : x) check_arg(std::isfinite(v), "langevin_step: x must be finite");
  for (double v : grad)
    if (!std::isfinite(v))
      throw std::runtime_error("langevin_step: non-finite gradient; the energy model is exploding");

  const auto clamp = box_for_dim(cfg.clamp_box, dim);
  rng::Stream s(seed);
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const int j = static_cast<int>(i % static_cast<size_t>(dim));
    const double v = x[i] - cfg.step_size * grad[i] + cfg.noise_scale * s.next_normal();
    out[i] = std::clamp(v, clamp[j].lo, clamp[j].hi);
  }
  return out;
}

void run_chains(EnergyGradFn& fn, const LangevinConfig& cfg, u64 seed, const std::vector<ChainTag>& tags,
                std::vector<double>& x, std::vector<double>* trajectory) {
  const int dim = fn.dim();
  const i64 chains = fn.num_chains();
  cfg.validate(dim);
  check_arg(static_cast<i64>(tags.size()) == chains, "run_chains: one tag per chain");
  check_arg(static_cast<i64>(x.size()) == chains * dim, "run_chains: state size mismatch");

  const auto clamp = box_for_dim(cfg.clamp_box, dim);
  std::vector<double> g(x.size());
  if (trajectory) trajectory->insert(trajectory->end(), x.begin(), x.end());
  for (int t = 0; t < cfg.num_steps; ++t) {
    fn.grad(x.data(), g.data());
    for (i64 r = 0; r < chains; ++r) {
      for (int j = 0; j < dim; ++j)
        if (!std::isfinite(g[static_cast<size_t>(r * dim + j)])) throw_nonfinite(tags[static_cast<size_t>(r)], t);
      rng::Stream ns(chain_noise_seed(seed, tags[static_cast<size_t>(r)], t));
      for (int j = 0; j < dim; ++j) {
        const size_t i = static_cast<size_t>(r * dim + j);
        const double v = x[i] - cfg.step_size * g[i] + cfg.noise_scale * ns.next_normal();
        x[i] = std::clamp(v, clamp[j].lo, clamp[j].hi);
      }
    }
    if (trajectory) trajectory->insert(trajectory->end(), x.begin(), x.end());
  }
}

NegativeSet sample_negatives(const EnergyModel& model, const SequenceBatch& real, i64 num_confab,
                             const LangevinConfig& cfg, u64 seed) {
  real.validate();
  check_arg(num_confab >= 1, "sample_negatives: num_confab must be >= 1");
  const ModelConfig& mc = model.config();
  check_arg(real.dim == mc.input_dim, "sample_negatives: dim axis does not match model input_dim");
  check_arg(real.seq_len <= mc.max_seq_len, "sample_negatives: seq_len axis exceeds model max_seq_len");
  const int dim = static_cast<int>(real.dim);
  cfg.validate(dim);

  const i64 chains = real.batch * num_confab * real.seq_len;
  std::vector<ChainTag> tags(static_cast<size_t>(chains));
  std::vector<double> x(static_cast<size_t>(chains * dim));
  const auto box = box_for_dim(cfg.init_box, dim);
  for (i64 b = 0; b < real.batch; ++b)
    for (i64 c = 0; c < num_confab; ++c)
      for (i64 n = 0; n < real.seq_len; ++n) {
        const i64 r = (b * num_confab + c) * real.seq_len + n;
        const ChainTag tag{static_cast<u64>(b), static_cast<u64>(c), static_cast<u64>(n)};
        tags[static_cast<size_t>(r)] = tag;
        rng::Stream is(chain_init_seed(seed, tag));
        for (int j = 0; j < dim; ++j) x[static_cast<size_t>(r * dim + j)] = is.next_uniform(box[j].lo, box[j].hi);
      }

  NegativesGradFn fn(model, real, num_confab);
  run_chains(fn, cfg, seed, tags, x);

  NegativeSet out;
  out.batch = real.batch;
  out.num_confab = num_confab;
  out.seq_len = real.seq_len;
  out.dim = dim;
  out.values = std::move(x);  // chain order is exactly [b][c][n][d]
  return out;
}

Eigen::MatrixXd sample_conditional(const EnergyModel& model, const double* context, i64 context_len,
                                   i64 num_samples, const LangevinConfig& cfg, u64 seed,
                                   std::vector<double>* trajectory) {
  check_arg(context_len >= 0, "sample_conditional: context_len must be >= 0");
  check_arg(num_samples >= 1, "sample_conditional: num_samples must be >= 1");
  const ModelConfig& mc = model.config();
  check_arg(context_len + 1 <= mc.max_seq_len, "sample_conditional: context too long for model max_seq_len");
  const int dim = mc.input_dim;
  cfg.validate(dim);
  for (i64 i = 0; i < context_len * dim; ++i)
    check_arg(std::isfinite(context[i]), "sample_conditional: context must be finite");

  std::vector<ChainTag> tags(static_cast<size_t>(num_samples));
  std::vector<double> x(static_cast<size_t>(num_samples * dim));
  const auto box = box_for_dim(cfg.init_box, dim);
  for (i64 s = 0; s < num_samples; ++s) {
    const ChainTag tag{static_cast<u64>(s), 0, static_cast<u64>(context_len)};
    tags[static_cast<size_t>(s)] = tag;
    rng::Stream is(chain_init_seed(seed, tag));
    for (int j = 0; j < dim; ++j) x[static_cast<size_t>(s * dim + j)] = is.next_uniform(box[j].lo, box[j].hi);
  }

  ConditionalGradFn fn(model, context, context_len, num_samples);
  run_chains(fn, cfg, seed, tags, x, trajectory);

  Eigen::MatrixXd out(num_samples, dim);
  for (i64 s = 0; s < num_samples; ++s)
    for (int j = 0; j < dim; ++j) out(s, j) = x[static_cast<size_t>(s * dim + j)];
  return out;
}

void export_samples_csv(const std::string& path, const Eigen::MatrixXd& samples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "chain";
  for (i64 j = 0; j < samples.cols(); ++j) out << ",x" << j;
  out << '\n';
  char buf[40];
  for (i64 s = 0; s < samples.rows(); ++s) {
    out << s;
    for (i64 j = 0; j < samples.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", samples(s, j));
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

void export_trajectory_csv(const std::string& path, const std::vector<double>& trajectory, i64 num_chains, int dim) {
  check_arg(num_chains >= 1 && dim >= 1, "export_trajectory_csv: bad shape");
  const size_t per = static_cast<size_t>(num_chains * dim);
  check_arg(per != 0 && trajectory.size() % per == 0, "export_trajectory_csv: trajectory size mismatch");
  const size_t steps = trajectory.size() / per;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "chain,step";
  for (int j = 0; j < dim; ++j) out << ",x" << j;
  out << '\n';
  char buf[40];
  for (i64 s = 0; s < num_chains; ++s)
    for (size_t t = 0; t < steps; ++t) {
      out << s << ',' << t;
      for (int j = 0; j < dim; ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", trajectory[t * per + static_cast<size_t>(s * dim + j)]);
        out << ',' << buf;
      }
      out << '\n';
    }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace iclebm
