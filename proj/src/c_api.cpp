#include "iclebm/iclebm.h"

#include <cstring>
#include <filesystem>
#include <string>

#include "iclebm/common.hpp"
#include "iclebm/config.hpp"
#include "iclebm/eval.hpp"
#include "iclebm/gmm.hpp"
#include "iclebm/model.hpp"
#include "iclebm/rng.hpp"
#include "iclebm/sampler.hpp"
#include "iclebm/threading.hpp"
#include "iclebm/trainer.hpp"
#include "iclebm/version.hpp"

struct iclebm_config_s {
  iclebm::RunConfig cfg;
};
struct iclebm_model_s {
  iclebm::EnergyModel model;
};
struct iclebm_tasks_s {
  std::vector<iclebm::GaussianMixtureTask> tasks;
};

namespace {

thread_local std::string g_last_error;

constexpr iclebm::u64 kContextTag = 0x636f6e74ULL;  // "cont"

void clear_error() { g_last_error.clear(); }

iclebm_status_t fail(iclebm_status_t code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

template <typename F>
iclebm_status_t guarded(F&& body) {
  clear_error();
  try {
    return body();
  } catch (const iclebm::ConfigError& e) {
    return fail(ICLEBM_ERR_CONFIG, e.what());
  } catch (const iclebm::FormatError& e) {
    return fail(ICLEBM_ERR_FORMAT, e.what());
  } catch (const iclebm::IoError& e) {
    return fail(ICLEBM_ERR_IO, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(ICLEBM_ERR_INVALID_ARGUMENT, e.what());
  } catch (const std::exception& e) {
    return fail(ICLEBM_ERR_RUNTIME, e.what());
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

iclebm_status_t require(bool ok, const char* msg) {
  return ok ? ICLEBM_OK : fail(ICLEBM_ERR_INVALID_ARGUMENT, msg);
}

}  // namespace

extern "C" {

const char* iclebm_version(void) { return iclebm::version_string(); }

const char* iclebm_status_name(iclebm_status_t status) {
  switch (status) {
    case ICLEBM_OK:
      return "ok";
    case ICLEBM_ERR_INVALID_ARGUMENT:
      return "invalid argument";
    case ICLEBM_ERR_CONFIG:
      return "config error";
    case ICLEBM_ERR_IO:
      return "io error";
    case ICLEBM_ERR_FORMAT:
      return "format error";
    case ICLEBM_ERR_RUNTIME:
      return "runtime error";
  }
  return "unknown";
}

const char* iclebm_last_error(void) { return g_last_error.c_str(); }

void iclebm_string_free(char* s) { delete[] s; }

void iclebm_set_num_threads(int n) { iclebm::set_num_threads(n); }
int iclebm_num_threads(void) { return iclebm::num_threads(); }

iclebm_status_t iclebm_config_create(iclebm_config_t** out) {
  if (auto st = require(out != nullptr, "config_create: out is null"); st != ICLEBM_OK) return st;
  return guarded([&] {
    *out = new iclebm_config_s{iclebm::default_config()};
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_config_load(const char* path, iclebm_config_t** out) {
  if (auto st = require(path != nullptr && out != nullptr, "config_load: null argument"); st != ICLEBM_OK) return st;
  return guarded([&] {
    *out = new iclebm_config_s{iclebm::load_config_file(path)};
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_config_set(iclebm_config_t* cfg, const char* key, const char* value) {
  if (auto st = require(cfg != nullptr && key != nullptr && value != nullptr, "config_set: null argument");
      st != ICLEBM_OK)
    return st;
  return guarded([&] {
    iclebm::apply_override(cfg->cfg, key, value);
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_config_get(const iclebm_config_t* cfg, const char* key, char** out_value) {
  if (auto st = require(cfg != nullptr && key != nullptr && out_value != nullptr, "config_get: null argument");
      st != ICLEBM_OK)
    return st;
  return guarded([&]() -> iclebm_status_t {
    const std::string dump = iclebm::dump_config(cfg->cfg);
    const std::string needle = std::string(key) + " = ";
    size_t at = dump.find(needle);
    if (at == std::string::npos || (at != 0 && dump[at - 1] != '\n'))
      throw iclebm::ConfigError(key, 0, std::string("unknown config key '") + key + "'");
    const size_t end = dump.find('\n', at);
    *out_value = dup_string(dump.substr(at + needle.size(), end - at - needle.size()));
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_config_validate(const iclebm_config_t* cfg) {
  if (auto st = require(cfg != nullptr, "config_validate: cfg is null"); st != ICLEBM_OK) return st;
  return guarded([&] {
    try {
      cfg->cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw iclebm::ConfigError("", 0, e.what());
    }
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_config_dump(const iclebm_config_t* cfg, char** out_text) {
  if (auto st = require(cfg != nullptr && out_text != nullptr, "config_dump: null argument"); st != ICLEBM_OK)
    return st;
  return guarded([&] {
    *out_text = dup_string(iclebm::dump_config(cfg->cfg));
    return ICLEBM_OK;
  });
}

void iclebm_config_free(iclebm_config_t* cfg) { delete cfg; }

iclebm_status_t iclebm_model_create(const iclebm_config_t* cfg, uint64_t seed, iclebm_model_t** out) {
  if (auto st = require(cfg != nullptr && out != nullptr, "model_create: null argument"); st != ICLEBM_OK) return st;
  return guarded([&] {
    *out = new iclebm_model_s{iclebm::EnergyModel(cfg->cfg.model, seed)};
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_model_load(const char* path, iclebm_model_t** out) {
  if (auto st = require(path != nullptr && out != nullptr, "model_load: null argument"); st != ICLEBM_OK) return st;
  return guarded([&] {
    *out = new iclebm_model_s{iclebm::EnergyModel::load(path)};
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_model_save(const iclebm_model_t* model, const char* path) {
  if (auto st = require(model != nullptr && path != nullptr, "model_save: null argument"); st != ICLEBM_OK) return st;
  return guarded([&] {
    model->model.save(path);
    return ICLEBM_OK;
  });
}

int64_t iclebm_model_num_params(const iclebm_model_t* model) { return model == nullptr ? -1 : model->model.num_params(); }
int32_t iclebm_model_input_dim(const iclebm_model_t* model) {
  return model == nullptr ? -1 : model->model.config().input_dim;
}
int32_t iclebm_model_max_seq_len(const iclebm_model_t* model) {
  return model == nullptr ? -1 : model->model.config().max_seq_len;
}

iclebm_status_t iclebm_model_energies(const iclebm_model_t* model, const double* values, int64_t batch,
                                      int64_t seq_len, int64_t dim, double* energies_out) {
  if (auto st = require(model != nullptr && values != nullptr && energies_out != nullptr, "model_energies: null argument");
      st != ICLEBM_OK)
    return st;
  return guarded([&] {
    iclebm::SequenceBatch b(batch, seq_len, dim);
    std::memcpy(b.values.data(), values, b.values.size() * sizeof(double));
    const Eigen::MatrixXd e = model->model.forward_energies(b);
    for (int64_t i = 0; i < batch; ++i)
      for (int64_t t = 0; t < seq_len; ++t) energies_out[i * seq_len + t] = e(i, t);
    return ICLEBM_OK;
  });
}

void iclebm_model_free(iclebm_model_t* model) { delete model; }

iclebm_status_t iclebm_tasks_generate(const iclebm_config_t* cfg, int64_t count, uint64_t seed, iclebm_tasks_t** out) {
  if (auto st = require(cfg != nullptr && out != nullptr, "tasks_generate: null argument"); st != ICLEBM_OK) return st;
  return guarded([&] {
    iclebm::check_arg(count >= 1, "tasks_generate: count must be >= 1");
    auto tasks = std::make_unique<iclebm_tasks_s>();
    tasks->tasks.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i)
      tasks->tasks.push_back(iclebm::sample_task(cfg->cfg.prior, iclebm::batch_row_task_seed(seed, i)));
    *out = tasks.release();
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_tasks_load(const char* path, iclebm_tasks_t** out) {
  if (auto st = require(path != nullptr && out != nullptr, "tasks_load: null argument"); st != ICLEBM_OK) return st;
  return guarded([&] {
    *out = new iclebm_tasks_s{iclebm::load_tasks(path)};
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_tasks_save(const iclebm_tasks_t* tasks, const char* path) {
  if (auto st = require(tasks != nullptr && path != nullptr, "tasks_save: null argument"); st != ICLEBM_OK) return st;
  return guarded([&] {
    iclebm::save_tasks(path, tasks->tasks);
    return ICLEBM_OK;
  });
}

int64_t iclebm_tasks_count(const iclebm_tasks_t* tasks) {
  return tasks == nullptr ? -1 : static_cast<int64_t>(tasks->tasks.size());
}

void iclebm_tasks_free(iclebm_tasks_t* tasks) { delete tasks; }

iclebm_status_t iclebm_train(const iclebm_config_t* cfg, const char* out_dir, char** final_checkpoint_out) {
  if (auto st = require(cfg != nullptr && out_dir != nullptr, "train: null argument"); st != ICLEBM_OK) return st;
  return guarded([&] {
    try {
      cfg->cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw iclebm::ConfigError("", 0, e.what());
    }
    const iclebm::TrainResult r = iclebm::train(cfg->cfg.prior, cfg->cfg.model, cfg->cfg.train, out_dir);
    if (final_checkpoint_out != nullptr) *final_checkpoint_out = dup_string(r.final_checkpoint);
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_landscape_report(const iclebm_config_t* cfg, const char* checkpoint_path, const char* task_path,
                                        const int64_t* lengths, int64_t num_lengths, uint64_t seed,
                                        const char* out_dir) {
  if (auto st = require(cfg != nullptr && checkpoint_path != nullptr && task_path != nullptr && lengths != nullptr &&
                            out_dir != nullptr,
                        "landscape_report: null argument");
      st != ICLEBM_OK)
    return st;
  return guarded([&] {
    iclebm::check_arg(num_lengths >= 1, "landscape_report: need at least one context length");
    const iclebm::EnergyModel model = iclebm::EnergyModel::load(checkpoint_path);
    const auto tasks = iclebm::load_tasks(task_path);
    iclebm::check_arg(!tasks.empty(), "landscape_report: task file is empty");
    std::vector<iclebm::i64> lens(lengths, lengths + num_lengths);
    const iclebm::i64 max_len = *std::max_element(lens.begin(), lens.end());
    // reject before any compute
    iclebm::check_arg(max_len + 1 <= model.config().max_seq_len,
                      "landscape_report: context length exceeds model max_seq_len - 1");

    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const iclebm::GridSpec grid = cfg->cfg.eval.landscape_grid();
    std::vector<iclebm::SharpeningReport> reports;
    for (size_t ti = 0; ti < tasks.size(); ++ti) {
      const std::vector<double> context =
          iclebm::sample_sequence(tasks[ti], max_len, iclebm::rng::derive(seed, {kContextTag, static_cast<iclebm::u64>(ti)}));
      iclebm::SharpeningReport rep;
      rep.task_id = static_cast<iclebm::i64>(ti);
      for (iclebm::i64 n : lens) {
        const iclebm::EnergyGrid g = iclebm::energy_landscape(model, context.data(), n, grid);
        rep.context_lengths.push_back(n);
        rep.spearman_rho.push_back(iclebm::agreement_with_task(g, tasks[ti]));
        const std::string stem =
            (fs::path(out_dir) / ("landscape_task" + std::to_string(ti) + "_n" + std::to_string(n))).string();
        iclebm::export_grid_csv(stem + ".csv", g);
        iclebm::export_grid_pgm(stem + ".pgm", g);
      }
      reports.push_back(std::move(rep));
    }
    iclebm::export_report_csv((fs::path(out_dir) / "sharpening_report.csv").string(), reports);
    return ICLEBM_OK;
  });
}

iclebm_status_t iclebm_sample(const iclebm_config_t* cfg, const char* checkpoint_path, const double* context,
                              int64_t context_len, int64_t dim, int64_t num_samples, uint64_t seed,
                              double* samples_out, double* trajectory_out) {
  if (auto st = require(cfg != nullptr && checkpoint_path != nullptr && samples_out != nullptr &&
                            (context != nullptr || context_len == 0),
                        "sample: null argument");
      st != ICLEBM_OK)
    return st;
  return guarded([&] {
    const iclebm::EnergyModel model = iclebm::EnergyModel::load(checkpoint_path);
    iclebm::check_arg(dim == model.config().input_dim, "sample: context dim does not match model input_dim");
    std::vector<double> trajectory;
    const Eigen::MatrixXd samples =
        iclebm::sample_conditional(model, context, context_len, num_samples, cfg->cfg.train.langevin, seed,
                                   trajectory_out != nullptr ? &trajectory : nullptr);
    for (int64_t s = 0; s < num_samples; ++s)
      for (int64_t j = 0; j < dim; ++j) samples_out[s * dim + j] = samples(s, j);
    if (trajectory_out != nullptr) std::memcpy(trajectory_out, trajectory.data(), trajectory.size() * sizeof(double));
    return ICLEBM_OK;
  });
}

}  // extern "C"
