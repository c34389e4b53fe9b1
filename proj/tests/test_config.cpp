#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "iclebm/config.hpp"

using namespace iclebm;

TEST_CASE("defaults carry the documented values") {
  const RunConfig cfg = default_config();
  CHECK(cfg.prior.num_components == 3);
  CHECK(cfg.prior.dim == 2);
  CHECK(cfg.prior.mean_box.size() == 1);
  CHECK(cfg.prior.mean_box[0].lo == -4.0);
  CHECK(cfg.prior.mean_box[0].hi == 4.0);
  CHECK(cfg.prior.cov_scale_range.lo == 0.3);
  CHECK(cfg.prior.cov_scale_range.hi == 1.0);
  CHECK(cfg.model.num_layers == 6);
  CHECK(cfg.model.num_heads == 8);
  CHECK(cfg.model.d_model == 128);
  CHECK(cfg.model.effective_d_ff() == 512);
  CHECK(cfg.model.max_seq_len == 64);
  CHECK(cfg.model.precision == Precision::kFloat64);
  CHECK(cfg.train.langevin.step_size == 3.16);
  CHECK(cfg.train.langevin.noise_scale == 0.01);
  CHECK(cfg.train.langevin.num_steps == 15);
  CHECK(cfg.train.langevin.init_box[0].lo == -6.0);
  CHECK(cfg.train.langevin.clamp_box[0].hi == 10.0);
  CHECK(cfg.train.batch_size == 32);
  CHECK(cfg.train.seq_len == 32);
  CHECK(cfg.train.num_steps == 20000);
  CHECK(cfg.train.num_confab == 1);
  CHECK(cfg.train.learning_rate == 1e-4);
  CHECK(cfg.train.adam_beta1 == 0.9);
  CHECK(cfg.train.adam_beta2 == 0.999);
  CHECK(cfg.train.grad_clip_norm == 1.0);
  CHECK(cfg.train.energy_reg == 0.1);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("dump round-trips to an identical effective config") {
  RunConfig cfg = default_config();
  apply_override(cfg, "model.d_model", "48");
  apply_override(cfg, "model.num_heads", "6");
  apply_override(cfg, "prior.mean_box", "-3 3 -2 2");
  apply_override(cfg, "train.seed", "12345");
  apply_override(cfg, "model.precision", "float32");
  const std::string dumped = dump_config(cfg);

  RunConfig back = default_config();
  apply_config_text(back, dumped);
  CHECK(dump_config(back) == dumped);
  CHECK(back.model.d_model == 48);
  CHECK(back.prior.mean_box.size() == 2);
  CHECK(back.prior.mean_box[1].hi == 2.0);
  CHECK(back.model.precision == Precision::kFloat32);
}

TEST_CASE("config file: comments, blank lines, precedence") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "iclebm_config_test";
  fs::create_directories(dir);
  const std::string path = (dir / "run.cfg").string();
  {
    std::ofstream out(path);
    out << "# desk-scale run\n\n";
    out << "train.batch_size = 8   # small\n";
    out << "langevin.step_size = 0.5\n";
  }
  RunConfig cfg = load_config_file(path);
  CHECK(cfg.train.batch_size == 8);
  CHECK(cfg.train.langevin.step_size == 0.5);
  CHECK(cfg.train.seq_len == 32);  // untouched default

  apply_override(cfg, "train.batch_size", "16");  // override beats file
  CHECK(cfg.train.batch_size == 16);

  CHECK_THROWS_AS(load_config_file((dir / "missing.cfg").string()), IoError);
}

TEST_CASE("errors name the offending key and line") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "iclebm_config_test";
  fs::create_directories(dir);
  const std::string path = (dir / "bad.cfg").string();
  {
    std::ofstream out(path);
    out << "train.batch_size = 8\n";
    out << "trian.batch_size = 8\n";  // typo on line 2
  }
  try {
    load_config_file(path);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "trian.batch_size");
    CHECK(e.line() == 2);
    CHECK(std::string(e.what()).find("trian.batch_size") != std::string::npos);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  {
    std::ofstream out(path);
    out << "train.batch_size eight\n";  // no '='
  }
  CHECK_THROWS_AS(load_config_file(path), ConfigError);

  {
    std::ofstream out(path);
    out << "train.batch_size = eight\n";
  }
  try {
    load_config_file(path);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "train.batch_size");
    CHECK(e.line() == 1);
  }

  RunConfig fresh = default_config();
  CHECK_THROWS_AS(apply_override(fresh, "nope", "1"), ConfigError);
}

TEST_CASE("enumerated keys accept only their documented values") {
  RunConfig cfg = default_config();
  CHECK_NOTHROW(apply_override(cfg, "prior.weights_mode", "fixed-uniform"));
  CHECK_THROWS_AS(apply_override(cfg, "prior.weights_mode", "dirichlet"), ConfigError);
  CHECK_NOTHROW(apply_override(cfg, "model.activation", "gelu"));
  CHECK_THROWS_AS(apply_override(cfg, "model.activation", "relu"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "model.precision", "float16"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "prior.mean_box", "1 2 3"), ConfigError);  // odd count
}

TEST_CASE("validation enforces cross-field invariants") {
  RunConfig cfg = default_config();
  apply_override(cfg, "prior.dim", "3");
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // must match model.input_dim

  cfg = default_config();
  apply_override(cfg, "train.seq_len", "65");
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // exceeds max_seq_len

  cfg = default_config();
  apply_override(cfg, "langevin.init_box", "-20 20");
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // escapes the clamp box

  cfg = default_config();
  apply_override(cfg, "model.d_model", "12");
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // head divisibility
}

TEST_CASE("config_keys lists every key exactly once") {
  const std::vector<std::string> keys = config_keys();
  CHECK(keys.size() == 34);  // 5 prior + 8 model + 5 langevin + 13 train + 3 eval
  for (size_t i = 0; i < keys.size(); ++i)
    for (size_t j = i + 1; j < keys.size(); ++j) CHECK(keys[i] != keys[j]);
}
