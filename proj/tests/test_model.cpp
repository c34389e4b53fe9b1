#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "iclebm/gmm.hpp"
#include "iclebm/model.hpp"
#include "iclebm/rng.hpp"

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

SequenceBatch random_batch(i64 b, i64 t, i64 d, u64 seed) {
  SequenceBatch batch(b, t, d);
  rng::Stream s(seed);
  for (double& v : batch.values) v = s.next_uniform(-3.0, 3.0);
  return batch;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST_CASE("parameter count matches the closed form and the frozen default") {
  const ModelConfig def;
  const EnergyModel model(def, 0);
  CHECK(model.num_params() == parameter_count(def));
  // by hand for (6 layers, 8 heads, 128 d_model, 512 d_ff, 2 in, 64 max):
  // 384 + 8192 + 6*198272 + 256 + 129
  CHECK(model.num_params() == 1198593);

  const EnergyModel tiny(tiny_config(), 0);
  CHECK(tiny.num_params() == parameter_count(tiny_config()));
  i64 from_defs = 0;
  for (const auto& def_ : tiny.param_defs()) from_defs += def_.size;
  CHECK(tiny.num_params() == from_defs);
}

TEST_CASE("init: deterministic, scaled truncated weights, unit gains, zero biases") {
  const EnergyModel a(tiny_config(), 42);
  const EnergyModel b(tiny_config(), 42);
  CHECK(a.params() == b.params());
  CHECK(a.params_checksum() == b.params_checksum());
  const EnergyModel c(tiny_config(), 43);
  CHECK(a.params() != c.params());

  const std::vector<double> theta = a.params();
  for (const ParamDef& def : a.param_defs()) {
    for (i64 i = 0; i < def.size; ++i) {
      const double v = theta[static_cast<size_t>(def.offset + i)];
      if (def.name.ends_with(".gain")) {
        CHECK(v == 1.0);
      } else if (def.name.ends_with(".weight") || def.name == "pos_emb") {
        CHECK(std::abs(v) <= 0.04);  // 2 sigma at scale 0.02
      } else {
        CHECK(v == 0.0);
      }
    }
  }
}

TEST_CASE("config invariants are enforced") {
  ModelConfig bad = tiny_config();
  bad.d_model = 12;
  bad.num_heads = 8;
  CHECK_THROWS_AS(EnergyModel(bad, 0), std::invalid_argument);
  bad = tiny_config();
  bad.max_seq_len = 0;
  CHECK_THROWS_AS(EnergyModel(bad, 0), std::invalid_argument);
}

TEST_CASE("forward_energies: shape contract and shape rejection") {
  const EnergyModel model(tiny_config(), 1);
  const SequenceBatch batch = random_batch(4, 8, 2, 5);
  const Eigen::MatrixXd e = model.forward_energies(batch);
  CHECK(e.rows() == 4);
  CHECK(e.cols() == 8);
  CHECK(e.allFinite());

  CHECK_THROWS_WITH_AS(model.forward_energies(random_batch(2, 9, 2, 5)), doctest::Contains("seq_len axis"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(model.forward_energies(random_batch(2, 4, 3, 5)), doctest::Contains("dim axis"),
                       std::invalid_argument);
}

TEST_CASE("causality: perturbing the future never moves an energy") {
  const EnergyModel model(tiny_config(), 2);
  rng::Stream s(99);
  for (int trial = 0; trial < 20; ++trial) {
    SequenceBatch batch = random_batch(3, 8, 2, 100 + trial);
    const Eigen::MatrixXd before = model.forward_energies(batch);
    const int n = static_cast<int>(s.next_u64() % 7);                // probe position
    const int m = n + 1 + static_cast<int>(s.next_u64() % static_cast<u64>(7 - n));  // strictly future
    const int b = static_cast<int>(s.next_u64() % 3);
    batch.at(b, m, 0) += 10.0 * (s.next_uniform() - 0.5);
    batch.at(b, m, 1) -= 3.0 * s.next_uniform();
    const Eigen::MatrixXd after = model.forward_energies(batch);
    for (int p = 0; p <= n; ++p) CHECK(std::abs(after(b, p) - before(b, p)) <= 1e-12 * std::abs(before(b, p)));
  }
}

TEST_CASE("determinism and batch independence") {
  const EnergyModel model(tiny_config(), 3);
  const SequenceBatch batch = random_batch(4, 6, 2, 7);
  const Eigen::MatrixXd e1 = model.forward_energies(batch);
  const Eigen::MatrixXd e2 = model.forward_energies(batch);
  CHECK(e1 == e2);

  // replace every other row; row 1's energies must not move
  SequenceBatch other = random_batch(4, 6, 2, 8);
  for (i64 t = 0; t < 6; ++t)
    for (i64 j = 0; j < 2; ++j) other.at(1, t, j) = batch.at(1, t, j);
  const Eigen::MatrixXd e3 = model.forward_energies(other);
  for (i64 t = 0; t < 6; ++t) CHECK(std::abs(e3(1, t) - e1(1, t)) <= 1e-12 * std::abs(e1(1, t)));
}

TEST_CASE("golden regression: frozen seed-0 energies on a frozen seed-0 batch") {
  static const double kGolden[2][8] = {
#include "golden_energies.inc"
  };
  const EnergyModel model(ModelConfig{}, 0);
  const SequenceBatch batch = make_batch(TaskPrior{}, 2, 8, 0).batch;
  const Eigen::MatrixXd e = model.forward_energies(batch);
  for (int b = 0; b < 2; ++b)
    for (int t = 0; t < 8; ++t) CHECK(rel_err(e(b, t), kGolden[b][t]) <= 1e-10);
}

TEST_CASE("input_gradient matches central finite differences") {
  const double h = 1e-4;
  int checked = 0, ok = 0;
  for (u64 seed : {11ull, 12ull, 13ull}) {
    const EnergyModel model(tiny_config(), seed);
    SequenceBatch batch = random_batch(2, 5, 2, seed * 31);
    for (int pos : {0, 2, 4}) {
      const Eigen::MatrixXd g = model.input_gradient(batch, pos);
      for (i64 b = 0; b < 2; ++b)
        for (i64 j = 0; j < 2; ++j) {
          const double orig = batch.at(b, pos, j);
          batch.at(b, pos, j) = orig + h;
          const double ep = model.forward_energies(batch)(b, pos);
          batch.at(b, pos, j) = orig - h;
          const double em = model.forward_energies(batch)(b, pos);
          batch.at(b, pos, j) = orig;
          const double fd = (ep - em) / (2.0 * h);
          ++checked;
          if (rel_err(g(b, j), fd) <= 1e-4) ++ok;
        }
    }
  }
  CHECK(ok == checked);
}

TEST_CASE("input_gradient: no flow from the future, zero for a constant head") {
  const EnergyModel model(tiny_config(), 21);
  const SequenceBatch batch = random_batch(2, 6, 2, 3);

  // full input-gradient via a raw pass; positions after the probe are exactly zero
  auto pass = model.new_pass();
  std::vector<double> energies(2 * 6), cot(2 * 6, 0.0), grads(2 * 6 * 2);
  pass->forward(batch.values.data(), 2, MaskSpec::causal(6), energies.data());
  const int probe = 3;
  cot[0 * 6 + probe] = 1.0;
  cot[1 * 6 + probe] = 1.0;
  pass->backward(cot.data(), grads.data(), nullptr);
  for (i64 b = 0; b < 2; ++b)
    for (i64 t = probe + 1; t < 6; ++t)
      for (i64 j = 0; j < 2; ++j) CHECK(grads[static_cast<size_t>((b * 6 + t) * 2 + j)] == 0.0);

  // zero the energy head: every input gradient vanishes
  EnergyModel flat = model;
  std::vector<double> theta = flat.params();
  for (const ParamDef& def : flat.param_defs())
    if (def.name == "head.weight" || def.name == "head.bias")
      for (i64 i = 0; i < def.size; ++i) theta[static_cast<size_t>(def.offset + i)] = 0.0;
  flat.set_params(theta);
  const Eigen::MatrixXd g = flat.input_gradient(batch, 2);
  CHECK(g.cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(model.input_gradient(batch, 6), std::invalid_argument);
  CHECK_THROWS_AS(model.input_gradient(batch, -1), std::invalid_argument);
}

TEST_CASE("parameter_gradient matches central finite differences on sampled coordinates") {
  const double h = 1e-4;
  int checked = 0, ok = 0;
  for (u64 seed : {31ull, 32ull, 33ull}) {
    EnergyModel model(tiny_config(), seed);
    const SequenceBatch batch = random_batch(2, 5, 2, seed);
    Eigen::MatrixXd cot(2, 5);
    rng::Stream cs(seed * 7);
    for (i64 b = 0; b < 2; ++b)
      for (i64 t = 0; t < 5; ++t) cot(b, t) = cs.next_uniform(-1.0, 1.0);

    const std::vector<double> analytic = model.parameter_gradient(batch, cot);
    auto loss = [&](const EnergyModel& m) {
      const Eigen::MatrixXd e = m.forward_energies(batch);
      return (e.array() * cot.array()).sum();
    };
    const std::vector<double> theta = model.params();
    rng::Stream ps(seed * 13);
    for (int trial = 0; trial < 50; ++trial) {
      const i64 k = static_cast<i64>(ps.next_u64() % static_cast<u64>(model.num_params()));
      EnergyModel probe = model;
      std::vector<double> tp = theta;
      tp[static_cast<size_t>(k)] = theta[static_cast<size_t>(k)] + h;
      probe.set_params(tp);
      const double lp = loss(probe);
      tp[static_cast<size_t>(k)] = theta[static_cast<size_t>(k)] - h;
      probe.set_params(tp);
      const double lm = loss(probe);
      const double fd = (lp - lm) / (2.0 * h);
      ++checked;
      if (rel_err(analytic[static_cast<size_t>(k)], fd) <= 1e-4) ++ok;
    }
  }
  // finite differences on single coordinates admit the odd ill-conditioned case
  CHECK(static_cast<double>(ok) >= 0.95 * checked);
}

TEST_CASE("parameter_gradient: zero cotangent, additivity over sub-batches") {
  const EnergyModel model(tiny_config(), 41);
  const SequenceBatch batch = random_batch(4, 5, 2, 17);

  const std::vector<double> zero = model.parameter_gradient(batch, Eigen::MatrixXd::Zero(4, 5));
  for (double g : zero) CHECK(g == 0.0);

  CHECK_THROWS_AS(model.parameter_gradient(batch, Eigen::MatrixXd::Ones(4, 4)), std::invalid_argument);

  SequenceBatch first(2, 5, 2), second(2, 5, 2);
  std::copy(batch.values.begin(), batch.values.begin() + 20, first.values.begin());
  std::copy(batch.values.begin() + 20, batch.values.end(), second.values.begin());
  const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(2, 5);
  const std::vector<double> ga = model.parameter_gradient(first, ones);
  const std::vector<double> gb = model.parameter_gradient(second, ones);
  const std::vector<double> gall = model.parameter_gradient(batch, Eigen::MatrixXd::Ones(4, 5));
  double max_err = 0.0;
  for (size_t i = 0; i < gall.size(); ++i) max_err = std::max(max_err, std::abs(gall[i] - (ga[i] + gb[i])));
  CHECK(max_err <= 1e-10);
}

TEST_CASE("masked passes agree with their sequential definitions") {
  const EnergyModel model(tiny_config(), 51);
  const SequenceBatch real = random_batch(3, 6, 2, 23);
  const SequenceBatch repl = random_batch(3, 6, 2, 24);

  // two_block: the energy of slot T+n equals the causal energy of
  // [real_0..real_{n-1}, repl_n] at its last position
  const int T = 6;
  std::vector<double> values(static_cast<size_t>(3 * 2 * T * 2));
  for (i64 b = 0; b < 3; ++b) {
    std::memcpy(values.data() + b * 2 * T * 2, real.row(b), sizeof(double) * 2 * T);
    std::memcpy(values.data() + (b * 2 * T + T) * 2, repl.row(b), sizeof(double) * 2 * T);
  }
  auto pass = model.new_pass();
  std::vector<double> energies(static_cast<size_t>(3 * 2 * T));
  pass->forward(values.data(), 3, MaskSpec::two_block(T), energies.data());

  for (i64 b = 0; b < 3; ++b)
    for (int n = 0; n < T; ++n) {
      SequenceBatch prefix(1, n + 1, 2);
      for (int t = 0; t < n; ++t)
        for (int j = 0; j < 2; ++j) prefix.at(0, t, j) = real.at(b, t, j);
      prefix.at(0, n, 0) = repl.at(b, n, 0);
      prefix.at(0, n, 1) = repl.at(b, n, 1);
      const double sequential = model.forward_energies(prefix)(0, n);
      const double batched = energies[static_cast<size_t>(b * 2 * T + T + n)];
      CHECK(rel_err(batched, sequential) <= 1e-12);
      // block 1 reproduces the plain causal energies
      const double causal = model.forward_energies(real)(b, n);
      CHECK(rel_err(energies[static_cast<size_t>(b * 2 * T + n)], causal) <= 1e-12);
    }

  // prefix_fan: each fan slot equals appending that point to the context
  const int N = 4, fan = 5;
  std::vector<double> fan_values(static_cast<size_t>((N + fan) * 2));
  std::memcpy(fan_values.data(), real.row(0), sizeof(double) * 2 * N);
  rng::Stream fs(77);
  for (int k = 0; k < fan * 2; ++k) fan_values[static_cast<size_t>(N * 2 + k)] = fs.next_uniform(-2.0, 2.0);
  std::vector<double> fan_energies(static_cast<size_t>(N + fan));
  auto fan_pass = model.new_pass();
  fan_pass->forward(fan_values.data(), 1, MaskSpec::prefix_fan(N, fan), fan_energies.data());
  for (int k = 0; k < fan; ++k) {
    SequenceBatch seq(1, N + 1, 2);
    std::memcpy(seq.values.data(), real.row(0), sizeof(double) * 2 * N);
    seq.at(0, N, 0) = fan_values[static_cast<size_t>((N + k) * 2)];
    seq.at(0, N, 1) = fan_values[static_cast<size_t>((N + k) * 2 + 1)];
    const double sequential = model.forward_energies(seq)(0, N);
    CHECK(rel_err(fan_energies[static_cast<size_t>(N + k)], sequential) <= 1e-12);
  }
}

TEST_CASE("checkpoint round-trip is bit-exact and failures are distinct") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "iclebm_model_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.iclebm").string();

  ModelConfig cfg = tiny_config();
  cfg.d_model = 64;
  cfg.num_heads = 4;
  const EnergyModel model(cfg, 7);
  model.save(path);
  const EnergyModel back = EnergyModel::load(path);
  CHECK(back.config().d_model == 64);
  CHECK(back.params_checksum() == model.params_checksum());
  const SequenceBatch batch = random_batch(2, 4, 2, 5);
  CHECK(model.forward_energies(batch) == back.forward_energies(batch));

  // corrupted magic -> format/version error
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXXXX", 6);
  }
  CHECK_THROWS_WITH_AS(EnergyModel::load(path), doctest::Contains("magic"), FormatError);

  // truncated file
  model.save(path);
  fs::resize_file(path, fs::file_size(path) / 2);
  CHECK_THROWS_WITH_AS(EnergyModel::load(path), doctest::Contains("truncated"), FormatError);

  // parameter-shape disagreement with the declared config
  model.save(path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(6 + 4);  // past magic + version: first config int (num_layers)
    const std::int32_t wrong = 3;
    f.write(reinterpret_cast<const char*>(&wrong), sizeof(wrong));
  }
  CHECK_THROWS_AS(EnergyModel::load(path), FormatError);

  CHECK_THROWS_AS(EnergyModel::load((dir / "missing.iclebm").string()), IoError);
}

TEST_CASE("float32 path: forward tracks float64, checkpoints round-trip") {
  ModelConfig cfg32 = tiny_config();
  cfg32.precision = Precision::kFloat32;
  const EnergyModel m64(tiny_config(), 9);
  EnergyModel m32(cfg32, 9);
  m32.set_params(m64.params());  // same weights, reduced storage

  const SequenceBatch batch = random_batch(3, 6, 2, 31);
  const Eigen::MatrixXd e64 = m64.forward_energies(batch);
  const Eigen::MatrixXd e32 = m32.forward_energies(batch);
  for (i64 b = 0; b < 3; ++b)
    for (i64 t = 0; t < 6; ++t) CHECK(std::abs(e64(b, t) - e32(b, t)) <= 1e-3 * std::max(1.0, std::abs(e64(b, t))));

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "iclebm_model_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model32.iclebm").string();
  m32.save(path);
  const EnergyModel back = EnergyModel::load(path);
  CHECK(back.config().precision == Precision::kFloat32);
  CHECK(back.forward_energies(batch) == m32.forward_energies(batch));
}
