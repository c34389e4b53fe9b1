// iclebm-cli: task generation, training, landscape evaluation, and
// conditional sampling over the libiclebm C API.

#include <cinttypes>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iclebm/iclebm.h"
#include "json.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CliError {
  int code;
  std::string message;
};

struct ConfigHandle {
  iclebm_config_t* ptr = nullptr;
  ~ConfigHandle() { iclebm_config_free(ptr); }
};

void check(iclebm_status_t status, const std::string& what) {
  if (status == ICLEBM_OK) return;
  const int code =
      (status == ICLEBM_ERR_CONFIG || status == ICLEBM_ERR_INVALID_ARGUMENT) ? kExitConfig : kExitRuntime;
  throw CliError{code, what + ": " + iclebm_last_error()};
}

std::string now_utc() {
  char buf[64];
  const std::time_t t = std::time(nullptr);
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

void write_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CliError{kExitRuntime, "cannot write " + tmp};
    out << content;
  }
  std::filesystem::rename(tmp, path);
}

// Written at run start (finished_at null) and finalized at the end; the
// config snapshot is the merged effective config.
class Manifest {
 public:
  Manifest(std::string path, const std::string& command, uint64_t seed, const iclebm_config_t* cfg)
      : path_(std::move(path)) {
    char* dump = nullptr;
    check(iclebm_config_dump(cfg, &dump), "config dump");
    json_["command"] = command;
    json_["seed"] = seed;
    json_["code_version"] = iclebm_version();
    json_["threads"] = iclebm_num_threads();
    json_["config"] = std::string(dump);
    json_["started_at"] = now_utc();
    json_["finished_at"] = nullptr;
    json_["artifacts"] = nlohmann::json::array();
    iclebm_string_free(dump);
    flush();
  }

  void add_artifact(const std::string& p) { json_["artifacts"].push_back(p); }

  void finalize() {
    json_["finished_at"] = now_utc();
    flush();
  }

 private:
  void flush() { write_atomic(path_, json_.dump(2) + "\n"); }

  std::string path_;
  nlohmann::json json_;
};

ConfigHandle make_config(const std::string& config_path, const std::vector<std::string>& sets, bool seed_set,
                         uint64_t seed) {
  ConfigHandle cfg;
  if (config_path.empty()) {
    check(iclebm_config_create(&cfg.ptr), "config");
  } else {
    check(iclebm_config_load(config_path.c_str(), &cfg.ptr), "config load");
  }
  for (const std::string& kv : sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw CliError{kExitConfig, "--set expects KEY=VALUE, got '" + kv + "'"};
    check(iclebm_config_set(cfg.ptr, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()), "config override");
  }
  if (seed_set)
    check(iclebm_config_set(cfg.ptr, "train.seed", std::to_string(seed).c_str()), "seed override");
  check(iclebm_config_validate(cfg.ptr), "config validation");
  return cfg;
}

// [N, dim] context points; the first line may be a header.
std::vector<double> parse_context_csv(const std::string& path, int dim) {
  std::ifstream in(path);
  if (!in) throw CliError{kExitRuntime, "cannot open context CSV: " + path};
  std::vector<double> values;
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<double> fields;
    int col = 0;
    bool header = false;
    while (std::getline(ss, field, ',')) {
      ++col;
      try {
        size_t pos = 0;
        const double v = std::stod(field, &pos);
        if (pos != field.size()) throw std::invalid_argument(field);
        fields.push_back(v);
      } catch (const std::exception&) {
        if (row == 1 && col == 1) {
          header = true;  // tolerate a header line
          break;
        }
        throw CliError{kExitConfig, "context CSV row " + std::to_string(row) + ", column " + std::to_string(col) +
                                        ": '" + field + "' is not a number"};
      }
    }
    if (header) continue;
    if (static_cast<int>(fields.size()) != dim)
      throw CliError{kExitConfig, "context CSV row " + std::to_string(row) + ": expected " + std::to_string(dim) +
                                      " columns, found " + std::to_string(fields.size())};
    values.insert(values.end(), fields.begin(), fields.end());
  }
  return values;
}

void write_samples_csv(const std::string& path, const std::vector<double>& samples, int64_t num_samples, int dim) {
  std::ofstream out(path);
  if (!out) throw CliError{kExitRuntime, "cannot write " + path};
  out << "chain";
  for (int j = 0; j < dim; ++j) out << ",x" << j;
  out << '\n';
  char buf[40];
  for (int64_t s = 0; s < num_samples; ++s) {
    out << s;
    for (int j = 0; j < dim; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", samples[static_cast<size_t>(s * dim + j)]);
      out << ',' << buf;
    }
    out << '\n';
  }
}

void write_trajectory_csv(const std::string& path, const std::vector<double>& traj, int64_t num_samples, int dim,
                          int num_steps) {
  std::ofstream out(path);
  if (!out) throw CliError{kExitRuntime, "cannot write " + path};
  out << "chain,step";
  for (int j = 0; j < dim; ++j) out << ",x" << j;
  out << '\n';
  char buf[40];
  const size_t per = static_cast<size_t>(num_samples * dim);
  for (int64_t s = 0; s < num_samples; ++s)
    for (int t = 0; t <= num_steps; ++t) {
      out << s << ',' << t;
      for (int j = 0; j < dim; ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g",
                      traj[static_cast<size_t>(t) * per + static_cast<size_t>(s * dim + j)]);
        out << ',' << buf;
      }
      out << '\n';
    }
}

int config_int(const iclebm_config_t* cfg, const char* key) {
  char* v = nullptr;
  check(iclebm_config_get(cfg, key, &v), "config get");
  const int out = std::atoi(v);
  iclebm_string_free(v);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context energy-function models: train, evaluate, sample"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> sets;
  int threads = 0;
  app.add_option("--config", config_path, "Config file (defaults built in)");
  app.add_option("--seed", seed, "Run seed (overrides train.seed)")->each([&](const std::string&) { seed_set = true; });
  app.add_option("--set", sets, "Override a config key, KEY=VALUE (repeatable)");
  app.add_option("--threads", threads, "Worker thread count (default: machine)");

  auto* gen = app.add_subcommand("gen-tasks", "Sample mixture tasks from the prior and write a task file");
  gen->fallthrough();
  std::string gen_out;
  int64_t gen_n = 16;
  gen->add_option("--out", gen_out, "Output task file")->required();
  gen->add_option("--n", gen_n, "Number of tasks");

  auto* train = app.add_subcommand("train", "Run contrastive-divergence training");
  train->fallthrough();
  std::string train_out;
  bool dry_run = false;
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_flag("--dry-run", dry_run, "Validate config, print the parameter count, exit");

  auto* landscape = app.add_subcommand("landscape", "Energy-landscape grids and a sharpening report");
  landscape->fallthrough();
  std::string ls_checkpoint, ls_tasks, ls_lengths = "2,8,32", ls_out;
  landscape->add_option("--checkpoint", ls_checkpoint, "Model checkpoint")->required();
  landscape->add_option("--tasks", ls_tasks, "Task file from gen-tasks")->required();
  landscape->add_option("--lengths", ls_lengths, "Comma-separated context lengths");
  landscape->add_option("--out", ls_out, "Output directory")->required();

  auto* sample = app.add_subcommand("sample", "Sample the learned conditional with Langevin chains");
  sample->fallthrough();
  std::string sm_checkpoint, sm_context, sm_out;
  int64_t sm_num = 64;
  bool sm_traj = false;
  double sm_step_size = -1.0, sm_noise = -1.0;
  int sm_steps = -1;
  sample->add_option("--checkpoint", sm_checkpoint, "Model checkpoint")->required();
  sample->add_option("--context", sm_context, "Context CSV ([N, dim] rows)")->required();
  sample->add_option("--out", sm_out, "Output samples CSV")->required();
  sample->add_option("--num-samples", sm_num, "Chains to run");
  sample->add_option("--step-size", sm_step_size, "Langevin step size override");
  sample->add_option("--noise-scale", sm_noise, "Langevin noise scale override");
  sample->add_option("--steps", sm_steps, "Langevin step count override");
  sample->add_flag("--trajectory", sm_traj, "Also write the full chain trajectory CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (threads > 0) iclebm_set_num_threads(threads);

    if (*sample) {
      char buf[64];
      if (sm_step_size >= 0.0) {
        std::snprintf(buf, sizeof(buf), "langevin.step_size=%.17g", sm_step_size);
        sets.push_back(buf);
      }
      if (sm_noise >= 0.0) {
        std::snprintf(buf, sizeof(buf), "langevin.noise_scale=%.17g", sm_noise);
        sets.push_back(buf);
      }
      if (sm_steps >= 0) sets.push_back("langevin.num_steps=" + std::to_string(sm_steps));
    }
    ConfigHandle cfg = make_config(config_path, sets, seed_set, seed);

    if (*gen) {
      Manifest manifest(gen_out + ".manifest.json", "gen-tasks", seed, cfg.ptr);
      iclebm_tasks_t* tasks = nullptr;
      check(iclebm_tasks_generate(cfg.ptr, gen_n, seed, &tasks), "task generation");
      const iclebm_status_t st = iclebm_tasks_save(tasks, gen_out.c_str());
      iclebm_tasks_free(tasks);
      check(st, "task save");
      manifest.add_artifact(gen_out);
      manifest.finalize();
      std::printf("wrote %" PRId64 " tasks to %s\n", gen_n, gen_out.c_str());
    } else if (*train) {
      if (dry_run) {
        iclebm_model_t* model = nullptr;
        check(iclebm_model_create(cfg.ptr, seed, &model), "model init");
        std::printf("config ok; parameter count %" PRId64 "\n", iclebm_model_num_params(model));
        iclebm_model_free(model);
        return kExitOk;
      }
      std::filesystem::create_directories(train_out);
      Manifest manifest((std::filesystem::path(train_out) / "run_manifest.json").string(), "train", seed, cfg.ptr);
      char* final_ckpt = nullptr;
      check(iclebm_train(cfg.ptr, train_out.c_str(), &final_ckpt), "training");
      manifest.add_artifact((std::filesystem::path(train_out) / "metrics.csv").string());
      manifest.add_artifact(final_ckpt);
      manifest.finalize();
      std::printf("training complete; final checkpoint %s\n", final_ckpt);
      iclebm_string_free(final_ckpt);
    } else if (*landscape) {
      std::vector<int64_t> lengths;
      std::stringstream ss(ls_lengths);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        try {
          lengths.push_back(std::stoll(tok));
        } catch (const std::exception&) {
          throw CliError{kExitConfig, "--lengths: '" + tok + "' is not an integer"};
        }
      }
      std::filesystem::create_directories(ls_out);
      Manifest manifest((std::filesystem::path(ls_out) / "run_manifest.json").string(), "landscape", seed, cfg.ptr);
      check(iclebm_landscape_report(cfg.ptr, ls_checkpoint.c_str(), ls_tasks.c_str(), lengths.data(),
                                    static_cast<int64_t>(lengths.size()), seed, ls_out.c_str()),
            "landscape report");
      manifest.add_artifact((std::filesystem::path(ls_out) / "sharpening_report.csv").string());
      manifest.finalize();
      std::printf("landscape report written to %s\n", ls_out.c_str());
    } else if (*sample) {
      iclebm_model_t* model = nullptr;
      check(iclebm_model_load(sm_checkpoint.c_str(), &model), "checkpoint load");
      const int dim = iclebm_model_input_dim(model);
      iclebm_model_free(model);

      const std::vector<double> context = parse_context_csv(sm_context, dim);
      const int64_t context_len = static_cast<int64_t>(context.size()) / dim;
      const int num_steps = config_int(cfg.ptr, "langevin.num_steps");

      Manifest manifest(sm_out + ".manifest.json", "sample", seed, cfg.ptr);
      std::vector<double> samples(static_cast<size_t>(sm_num * dim));
      std::vector<double> trajectory;
      if (sm_traj) trajectory.resize(static_cast<size_t>(num_steps + 1) * static_cast<size_t>(sm_num * dim));
      check(iclebm_sample(cfg.ptr, sm_checkpoint.c_str(), context.empty() ? nullptr : context.data(), context_len,
                          dim, sm_num, seed, samples.data(), sm_traj ? trajectory.data() : nullptr),
            "sampling");
      write_samples_csv(sm_out, samples, sm_num, dim);
      manifest.add_artifact(sm_out);
      if (sm_traj) {
        const std::string traj_path = sm_out + ".trajectory.csv";
        write_trajectory_csv(traj_path, trajectory, sm_num, dim, num_steps);
        manifest.add_artifact(traj_path);
      }
      manifest.finalize();
      std::printf("wrote %" PRId64 " samples to %s\n", sm_num, sm_out.c_str());
    }
  } catch (const CliError& e) {
    std::cerr << "iclebm-cli: " << e.message << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "iclebm-cli: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
