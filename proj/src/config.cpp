#include "iclebm/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace iclebm {

namespace {

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& v) {
  size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("expected a real number, got '" + v + "'");
  }
  if (trim(v.substr(pos)) != "") throw std::invalid_argument("trailing characters after number in '" + v + "'");
  return out;
}

i64 parse_i64(const std::string& v) {
  size_t pos = 0;
  long long out;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("expected an integer, got '" + v + "'");
  }
  if (trim(v.substr(pos)) != "") throw std::invalid_argument("trailing characters after integer in '" + v + "'");
  return out;
}

int parse_int(const std::string& v) { return static_cast<int>(parse_i64(v)); }

u64 parse_u64(const std::string& v) {
  size_t pos = 0;
  unsigned long long out;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("expected an unsigned integer, got '" + v + "'");
  }
  if (trim(v.substr(pos)) != "") throw std::invalid_argument("trailing characters after integer in '" + v + "'");
  return out;
}

// "lo hi" or "lo0 hi0 lo1 hi1 ..." (commas allowed as separators)
std::vector<Interval> parse_intervals(const std::string& v) {
  std::string cleaned = v;
  for (char& c : cleaned)
    if (c == ',') c = ' ';
  std::istringstream in(cleaned);
  std::vector<double> nums;
  double x;
  while (in >> x) nums.push_back(x);
  if (nums.empty() || nums.size() % 2 != 0)
    throw std::invalid_argument("expected an even number of reals (lo hi pairs), got '" + v + "'");
  std::vector<Interval> out;
  for (size_t i = 0; i < nums.size(); i += 2) out.push_back({nums[i], nums[i + 1]});
  return out;
}

std::string fmt_intervals(const std::vector<Interval>& ivs) {
  std::string out;
  for (size_t i = 0; i < ivs.size(); ++i) {
    if (i) out += ' ';
    out += fmt_double(ivs[i].lo) + ' ' + fmt_double(ivs[i].hi);
  }
  return out;
}

struct KeyHandler {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<std::pair<std::string, KeyHandler>>& key_table() {
  static const std::vector<std::pair<std::string, KeyHandler>> table = {
      {"prior.num_components",
       {[](const RunConfig& c) { return std::to_string(c.prior.num_components); },
        [](RunConfig& c, const std::string& v) { c.prior.num_components = parse_int(v); }}},
      {"prior.dim",
       {[](const RunConfig& c) { return std::to_string(c.prior.dim); },
        [](RunConfig& c, const std::string& v) { c.prior.dim = parse_int(v); }}},
      {"prior.mean_box",
       {[](const RunConfig& c) { return fmt_intervals(c.prior.mean_box); },
        [](RunConfig& c, const std::string& v) { c.prior.mean_box = parse_intervals(v); }}},
      {"prior.cov_scale_range",
       {[](const RunConfig& c) { return fmt_intervals({c.prior.cov_scale_range}); },
        [](RunConfig& c, const std::string& v) {
          const auto ivs = parse_intervals(v);
          if (ivs.size() != 1) throw std::invalid_argument("expected a single interval");
          c.prior.cov_scale_range = ivs[0];
        }}},
      {"prior.weights_mode",
       {[](const RunConfig&) { return std::string("fixed-uniform"); },
        [](RunConfig&, const std::string& v) {
          if (trim(v) != "fixed-uniform") throw std::invalid_argument("the only supported weights mode is 'fixed-uniform'");
        }}},
      {"model.num_layers",
       {[](const RunConfig& c) { return std::to_string(c.model.num_layers); },
        [](RunConfig& c, const std::string& v) { c.model.num_layers = parse_int(v); }}},
      {"model.num_heads",
       {[](const RunConfig& c) { return std::to_string(c.model.num_heads); },
        [](RunConfig& c, const std::string& v) { c.model.num_heads = parse_int(v); }}},
      {"model.d_model",
       {[](const RunConfig& c) { return std::to_string(c.model.d_model); },
        [](RunConfig& c, const std::string& v) { c.model.d_model = parse_int(v); }}},
      {"model.d_ff",
       {[](const RunConfig& c) { return std::to_string(c.model.d_ff); },
        [](RunConfig& c, const std::string& v) { c.model.d_ff = parse_int(v); }}},
      {"model.input_dim",
       {[](const RunConfig& c) { return std::to_string(c.model.input_dim); },
        [](RunConfig& c, const std::string& v) { c.model.input_dim = parse_int(v); }}},
      {"model.max_seq_len",
       {[](const RunConfig& c) { return std::to_string(c.model.max_seq_len); },
        [](RunConfig& c, const std::string& v) { c.model.max_seq_len = parse_int(v); }}},
      {"model.activation",
       {[](const RunConfig&) { return std::string("gelu"); },
        [](RunConfig&, const std::string& v) {
          if (trim(v) != "gelu") throw std::invalid_argument("the only supported activation is 'gelu'");
        }}},
      {"model.precision",
       {[](const RunConfig& c) {
          return std::string(c.model.precision == Precision::kFloat64 ? "float64" : "float32");
        },
        [](RunConfig& c, const std::string& v) {
          const std::string t = trim(v);
          if (t == "float64")
            c.model.precision = Precision::kFloat64;
          else if (t == "float32")
            c.model.precision = Precision::kFloat32;
          else
            throw std::invalid_argument("precision must be 'float64' or 'float32'");
        }}},
      {"langevin.step_size",
       {[](const RunConfig& c) { return fmt_double(c.train.langevin.step_size); },
        [](RunConfig& c, const std::string& v) { c.train.langevin.step_size = parse_double(v); }}},
      {"langevin.noise_scale",
       {[](const RunConfig& c) { return fmt_double(c.train.langevin.noise_scale); },
        [](RunConfig& c, const std::string& v) { c.train.langevin.noise_scale = parse_double(v); }}},
      {"langevin.num_steps",
       {[](const RunConfig& c) { return std::to_string(c.train.langevin.num_steps); },
        [](RunConfig& c, const std::string& v) { c.train.langevin.num_steps = parse_int(v); }}},
      {"langevin.init_box",
       {[](const RunConfig& c) { return fmt_intervals(c.train.langevin.init_box); },
        [](RunConfig& c, const std::string& v) { c.train.langevin.init_box = parse_intervals(v); }}},
      {"langevin.clamp_box",
       {[](const RunConfig& c) { return fmt_intervals(c.train.langevin.clamp_box); },
        [](RunConfig& c, const std::string& v) { c.train.langevin.clamp_box = parse_intervals(v); }}},
      {"train.batch_size",
       {[](const RunConfig& c) { return std::to_string(c.train.batch_size); },
        [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_i64(v); }}},
      {"train.seq_len",
       {[](const RunConfig& c) { return std::to_string(c.train.seq_len); },
        [](RunConfig& c, const std::string& v) { c.train.seq_len = parse_i64(v); }}},
      {"train.num_steps",
       {[](const RunConfig& c) { return std::to_string(c.train.num_steps); },
        [](RunConfig& c, const std::string& v) { c.train.num_steps = parse_i64(v); }}},
      {"train.num_confab",
       {[](const RunConfig& c) { return std::to_string(c.train.num_confab); },
        [](RunConfig& c, const std::string& v) { c.train.num_confab = parse_i64(v); }}},
      {"train.learning_rate",
       {[](const RunConfig& c) { return fmt_double(c.train.learning_rate); },
        [](RunConfig& c, const std::string& v) { c.train.learning_rate = parse_double(v); }}},
      {"train.adam_beta1",
       {[](const RunConfig& c) { return fmt_double(c.train.adam_beta1); },
        [](RunConfig& c, const std::string& v) { c.train.adam_beta1 = parse_double(v); }}},
      {"train.adam_beta2",
       {[](const RunConfig& c) { return fmt_double(c.train.adam_beta2); },
        [](RunConfig& c, const std::string& v) { c.train.adam_beta2 = parse_double(v); }}},
      {"train.adam_eps",
       {[](const RunConfig& c) { return fmt_double(c.train.adam_eps); },
        [](RunConfig& c, const std::string& v) { c.train.adam_eps = parse_double(v); }}},
      {"train.grad_clip_norm",
       {[](const RunConfig& c) { return fmt_double(c.train.grad_clip_norm); },
        [](RunConfig& c, const std::string& v) { c.train.grad_clip_norm = parse_double(v); }}},
      {"train.energy_reg",
       {[](const RunConfig& c) { return fmt_double(c.train.energy_reg); },
        [](RunConfig& c, const std::string& v) { c.train.energy_reg = parse_double(v); }}},
      {"train.seed",
       {[](const RunConfig& c) { return std::to_string(c.train.seed); },
        [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64(v); }}},
      {"train.checkpoint_every",
       {[](const RunConfig& c) { return std::to_string(c.train.checkpoint_every); },
        [](RunConfig& c, const std::string& v) { c.train.checkpoint_every = parse_i64(v); }}},
      {"train.log_every",
       {[](const RunConfig& c) { return std::to_string(c.train.log_every); },
        [](RunConfig& c, const std::string& v) { c.train.log_every = parse_i64(v); }}},
      {"eval.grid_box",
       {[](const RunConfig& c) { return fmt_intervals({c.eval.grid_box}); },
        [](RunConfig& c, const std::string& v) {
          const auto ivs = parse_intervals(v);
          if (ivs.size() != 1) throw std::invalid_argument("expected a single interval");
          c.eval.grid_box = ivs[0];
        }}},
      {"eval.landscape_resolution",
       {[](const RunConfig& c) { return std::to_string(c.eval.landscape_resolution); },
        [](RunConfig& c, const std::string& v) { c.eval.landscape_resolution = parse_int(v); }}},
      {"eval.partition_resolution",
       {[](const RunConfig& c) { return std::to_string(c.eval.partition_resolution); },
        [](RunConfig& c, const std::string& v) { c.eval.partition_resolution = parse_int(v); }}},
  };
  return table;
}

const KeyHandler* find_key(const std::string& key) {
  for (const auto& [k, h] : key_table())
    if (k == key) return &h;
  return nullptr;
}

void apply_line(RunConfig& cfg, const std::string& raw, int line_no) {
  std::string line = raw;
  const size_t hash = line.find('#');
  if (hash != std::string::npos) line = line.substr(0, hash);
  line = trim(line);
  if (line.empty()) return;
  const size_t eq = line.find('=');
  if (eq == std::string::npos)
    throw ConfigError("", line_no, "line " + std::to_string(line_no) + ": expected 'key = value'");
  const std::string key = trim(line.substr(0, eq));
  const std::string value = trim(line.substr(eq + 1));
  const KeyHandler* h = find_key(key);
  if (h == nullptr)
    throw ConfigError(key, line_no, "line " + std::to_string(line_no) + ": unknown config key '" + key + "'");
  try {
    h->set(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, line_no, "line " + std::to_string(line_no) + ", key '" + key + "': " + e.what());
  }
}

}  // namespace

void EvalSettings::validate() const {
  check_arg(grid_box.lo < grid_box.hi, "eval.grid_box must be ordered");
  check_arg(landscape_resolution >= 2, "eval.landscape_resolution must be >= 2");
  check_arg(partition_resolution >= 2, "eval.partition_resolution must be >= 2");
}

void RunConfig::validate() const {
  prior.validate();
  model.validate();
  train.validate(prior.dim);
  eval.validate();
  check_arg(prior.dim == model.input_dim, "prior.dim must equal model.input_dim");
  check_arg(train.seq_len <= model.max_seq_len, "train.seq_len must not exceed model.max_seq_len");
}

RunConfig default_config() { return RunConfig{}; }

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  RunConfig cfg = default_config();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) apply_line(cfg, line, ++line_no);
  return cfg;
}

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) apply_line(cfg, line, ++line_no);
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  const KeyHandler* h = find_key(trim(key));
  if (h == nullptr) throw ConfigError(key, 0, "unknown config key '" + trim(key) + "'");
  try {
    h->set(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, 0, "key '" + trim(key) + "': " + e.what());
  }
}

std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, h] : key_table()) {
    out += key;
    out += " = ";
    out += h.get(cfg);
    out += '\n';
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, h] : key_table()) keys.push_back(k);
  return keys;
}

}  // namespace iclebm
