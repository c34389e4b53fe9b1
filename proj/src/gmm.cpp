#include "iclebm/gmm.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "iclebm/rng.hpp"

namespace iclebm {

namespace {

constexpr u64 kTaskTag = 0x7461736bULL;  // "task"
constexpr u64 kSeqTag = 0x73657175ULL;   // "sequ"
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

std::vector<Interval> box_for_dim(const std::vector<Interval>& box, int dim) {
  check_arg(dim >= 1, "box_for_dim: dim must be >= 1");
  if (box.size() == static_cast<size_t>(dim)) return box;
  check_arg(box.size() == 1, "box must have one interval or one per axis");
  return std::vector<Interval>(static_cast<size_t>(dim), box[0]);
}

void TaskPrior::validate() const {
  check_arg(num_components >= 1, "prior.num_components must be >= 1");
  check_arg(dim >= 1, "prior.dim must be >= 1");
  for (const Interval& iv : mean_box_per_axis())
    check_arg(iv.lo < iv.hi, "prior.mean_box: lower bound must be < upper bound");
  check_arg(cov_scale_range.lo > 0.0 && cov_scale_range.hi >= cov_scale_range.lo,
            "prior.cov_scale_range must be strictly positive and ordered");
}

void GaussianMixtureTask::validate() const {
  const int k = num_components();
  check_arg(k >= 1, "task: at least one component");
  check_arg(cov_scales.size() == k && weights.size() == k, "task: shape mismatch across fields");
  check_arg((cov_scales.array() > 0.0).all(), "task: cov_scales must be > 0");
  check_arg((weights.array() >= 0.0).all(), "task: weights must be nonnegative");
  check_arg(std::abs(weights.sum() - 1.0) <= 1e-12, "task: weights must sum to 1");
}

void SequenceBatch::validate() const {
  check_arg(batch >= 1 && seq_len >= 1 && dim >= 1, "batch: all dimensions must be >= 1");
  check_arg(values.size() == static_cast<size_t>(batch * seq_len * dim), "batch: value buffer size mismatch");
  for (double v : values) check_arg(std::isfinite(v), "batch: values must be finite");
}

GaussianMixtureTask sample_task(const TaskPrior& prior, u64 seed) {
  prior.validate();
  rng::Stream s(seed);
  const int k = prior.num_components;
  const int d = prior.dim;
  const auto box = prior.mean_box_per_axis();

  GaussianMixtureTask task;
  task.means.resize(k, d);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j) task.means(i, j) = s.next_uniform(box[j].lo, box[j].hi);
  task.cov_scales.resize(k);
  for (int i = 0; i < k; ++i) task.cov_scales(i) = s.next_uniform(prior.cov_scale_range.lo, prior.cov_scale_range.hi);
  task.weights = Eigen::VectorXd::Constant(k, 1.0 / k);
  return task;
}

std::vector<double> sample_sequence(const GaussianMixtureTask& task, i64 seq_len, u64 seed) {
  task.validate();
  check_arg(seq_len >= 1, "sample_sequence: seq_len must be >= 1");
  rng::Stream s(seed);
  const int k = task.num_components();
  const int d = task.dim();

  std::vector<double> out(static_cast<size_t>(seq_len * d));
  for (i64 t = 0; t < seq_len; ++t) {
    // inverse-CDF component draw
    const double u = s.next_uniform();
    int comp = k - 1;
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
      acc += task.weights(i);
      if (u < acc) {
        comp = i;
        break;
      }
    }
    const double scale = task.cov_scales(comp);
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(t * d + j)] = task.means(comp, j) + scale * s.next_normal();
  }
  return out;
}

double true_log_density(const GaussianMixtureTask& task, const double* x) {
  const int k = task.num_components();
  const int d = task.dim();
  for (int j = 0; j < d; ++j) check_arg(std::isfinite(x[j]), "true_log_density: x must be finite");

  double max_term = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd terms(k);
  for (int i = 0; i < k; ++i) {
    const double s2 = task.cov_scales(i) * task.cov_scales(i);
    double sq = 0.0;
    for (int j = 0; j < d; ++j) {
      const double diff = x[j] - task.means(i, j);
      sq += diff * diff;
    }
    const double w = task.weights(i);
    const double logw = w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity();
    terms(i) = logw - 0.5 * d * (kLog2Pi + std::log(s2)) - 0.5 * sq / s2;
    max_term = std::max(max_term, terms(i));
  }
  if (!std::isfinite(max_term)) return -std::numeric_limits<double>::infinity();
  double acc = 0.0;
  for (int i = 0; i < k; ++i) acc += std::exp(terms(i) - max_term);
  return max_term + std::log(acc);
}

u64 batch_row_task_seed(u64 seed, i64 row) { return rng::derive(seed, {kTaskTag, static_cast<u64>(row)}); }
u64 batch_row_sequence_seed(u64 seed, i64 row) { return rng::derive(seed, {kSeqTag, static_cast<u64>(row)}); }

BatchResult make_batch(const TaskPrior& prior, i64 batch, i64 seq_len, u64 seed) {
  check_arg(batch >= 1, "make_batch: batch must be >= 1");
  BatchResult result;
  result.batch = SequenceBatch(batch, seq_len, prior.dim);
  result.tasks.reserve(static_cast<size_t>(batch));
  for (i64 b = 0; b < batch; ++b) {
    result.tasks.push_back(sample_task(prior, batch_row_task_seed(seed, b)));
    const std::vector<double> seq = sample_sequence(result.tasks.back(), seq_len, batch_row_sequence_seed(seed, b));
    std::copy(seq.begin(), seq.end(), result.batch.values.begin() + b * seq_len * prior.dim);
    result.batch.task_ids[static_cast<size_t>(b)] = b;
  }
  return result;
}

std::string format_task(const GaussianMixtureTask& task) {
  task.validate();
  const int k = task.num_components();
  const int d = task.dim();
  std::string line = std::to_string(k) + " " + std::to_string(d);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j) {
      line += ' ';
      append_double(line, task.means(i, j));
    }
  for (int i = 0; i < k; ++i) {
    line += ' ';
    append_double(line, task.cov_scales(i));
  }
  for (int i = 0; i < k; ++i) {
    line += ' ';
    append_double(line, task.weights(i));
  }
  return line;
}

GaussianMixtureTask parse_task(const std::string& line) {
  std::istringstream in(line);
  int k = 0, d = 0;
  if (!(in >> k >> d) || k < 1 || d < 1) throw FormatError("task record: bad K or d in '" + line + "'");
  GaussianMixtureTask task;
  task.means.resize(k, d);
  task.cov_scales.resize(k);
  task.weights.resize(k);
  auto read = [&](double& v, const char* what) {
    if (!(in >> v)) throw FormatError(std::string("task record: missing ") + what);
  };
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j) read(task.means(i, j), "mean");
  for (int i = 0; i < k; ++i) read(task.cov_scales(i), "scale");
  for (int i = 0; i < k; ++i) read(task.weights(i), "weight");
  std::string extra;
  if (in >> extra) throw FormatError("task record: trailing fields");
  task.validate();
  return task;
}

void save_tasks(const std::string& path, const std::vector<GaussianMixtureTask>& tasks) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& t : tasks) out << format_task(t) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

std::vector<GaussianMixtureTask> load_tasks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<GaussianMixtureTask> tasks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    tasks.push_back(parse_task(line));
  }
  return tasks;
}

void export_batch_csv(const std::string& path, const SequenceBatch& batch) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "task_id,seq_idx";
  for (i64 j = 0; j < batch.dim; ++j) out << ",x" << j;
  out << '\n';
  char buf[40];
  for (i64 b = 0; b < batch.batch; ++b)
    for (i64 t = 0; t < batch.seq_len; ++t) {
      out << batch.task_ids[static_cast<size_t>(b)] << ',' << t;
      for (i64 j = 0; j < batch.dim; ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", batch.at(b, t, j));
        out << ',' << buf;
      }
      out << '\n';
    }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace iclebm
