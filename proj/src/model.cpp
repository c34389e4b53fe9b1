#include "iclebm/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <variant>

#include "iclebm/rng.hpp"
#include "iclebm/threading.hpp"

namespace iclebm {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitScale = 0.02;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994606;
constexpr char kMagic[6] = {'I', 'C', 'L', 'E', 'B', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

struct LayerOffsets {
  i64 ln1_g, ln1_b, qkv_w, qkv_b, ao_w, ao_b, ln2_g, ln2_b, mi_w, mi_b, mo_w, mo_b;
};

struct Layout {
  i64 in_w = 0, in_b = 0, pos = 0;
  std::vector<LayerOffsets> layers;
  i64 lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0;
  i64 total = 0;
  std::vector<ParamDef> defs;

  static Layout build(const ModelConfig& cfg) {
    Layout out;
    i64 at = 0;
    auto add = [&](const std::string& name, std::vector<i64> dims) {
      i64 size = 1;
      for (i64 d : dims) size *= d;
      out.defs.push_back({name, std::move(dims), at, size});
      const i64 off = at;
      at += size;
      return off;
    };
    const i64 D = cfg.d_model, F = cfg.effective_d_ff(), in = cfg.input_dim, T = cfg.max_seq_len;
    out.in_w = add("in_proj.weight", {D, in});
    out.in_b = add("in_proj.bias", {D});
    out.pos = add("pos_emb", {D, T});
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerOffsets lo;
      lo.ln1_g = add(p + "ln1.gain", {D});
      lo.ln1_b = add(p + "ln1.bias", {D});
      lo.qkv_w = add(p + "attn.qkv.weight", {3 * D, D});
      lo.qkv_b = add(p + "attn.qkv.bias", {3 * D});
      lo.ao_w = add(p + "attn.out.weight", {D, D});
      lo.ao_b = add(p + "attn.out.bias", {D});
      lo.ln2_g = add(p + "ln2.gain", {D});
      lo.ln2_b = add(p + "ln2.bias", {D});
      lo.mi_w = add(p + "mlp.in.weight", {F, D});
      lo.mi_b = add(p + "mlp.in.bias", {F});
      lo.mo_w = add(p + "mlp.out.weight", {D, F});
      lo.mo_b = add(p + "mlp.out.bias", {D});
      out.layers.push_back(lo);
    }
    out.lnf_g = add("ln_f.gain", {D});
    out.lnf_b = add("ln_f.bias", {D});
    out.head_w = add("head.weight", {1, D});
    out.head_b = add("head.bias", {1});
    out.total = at;
    return out;
  }
};

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Vector<S, Eigen::Dynamic>;
template <typename S>
using CMap = Eigen::Map<const MatX<S>>;
template <typename S>
using MMap = Eigen::Map<MatX<S>>;
template <typename S>
using CVMap = Eigen::Map<const VecX<S>>;
template <typename S>
using MVMap = Eigen::Map<VecX<S>>;

// Workspace: activations are [feature, rows*slots] column-major; the column of
// batch row r, slot t is r*slots + t.
template <typename S>
struct Ws {
  i64 rows = 0;
  int slots = 0;
  MaskSpec mask;

  MatX<S> u, x0;
  struct Layer {
    MatX<S> ln1_y;
    VecX<S> ln1_mu, ln1_rs;
    MatX<S> qkv;
    std::vector<MatX<S>> probs;  // rows*heads entries, [slots, slots]; P(i,j) = weight of key j for query i
    MatX<S> att, res1, ln2_y;
    VecX<S> ln2_mu, ln2_rs;
    MatX<S> h_pre, h_act, res2;
  };
  std::vector<Layer> layers;
  MatX<S> lnf_y;
  VecX<S> lnf_mu, lnf_rs;

  // backward scratch
  MatX<S> d_res, d_branch, d_qkv, d_att, d_h, d_x, d_u;
  std::vector<MatX<S>> d_score;  // per chunk

  const MatX<S>& layer_input(int l) const { return l == 0 ? x0 : layers[l - 1].res2; }
};

template <typename S>
struct Net {
  ModelConfig cfg;
  Layout layout;
  VecX<S> theta;

  CMap<S> mat(i64 off, i64 r, i64 c) const { return CMap<S>(theta.data() + off, r, c); }
  CVMap<S> vec(i64 off, i64 n) const { return CVMap<S>(theta.data() + off, n); }
};

// y = W x + b over deterministic column chunks
template <typename S>
void linear_forward(const CMap<S>& W, const CVMap<S>& b, const MatX<S>& x, MatX<S>& y) {
  y.resize(W.rows(), x.cols());
  parallel_chunks(x.cols(), [&](i64 c0, i64 c1, int) {
    auto yc = y.middleCols(c0, c1 - c0);
    yc.noalias() = W * x.middleCols(c0, c1 - c0);
    yc.colwise() += b;
  });
}

// dx = W^T dy over deterministic column chunks
template <typename S>
void linear_backward_input(const CMap<S>& W, const MatX<S>& dy, MatX<S>& dx) {
  dx.resize(W.cols(), dy.cols());
  parallel_chunks(dy.cols(), [&](i64 c0, i64 c1, int) {
    dx.middleCols(c0, c1 - c0).noalias() = W.transpose() * dy.middleCols(c0, c1 - c0);
  });
}

// dW += dy x^T, db += rowsum(dy)
template <typename S>
void linear_accum_grads(S* pg, i64 w_off, i64 b_off, const MatX<S>& dy, const MatX<S>& x) {
  MMap<S>(pg + w_off, dy.rows(), x.rows()).noalias() += dy * x.transpose();
  MVMap<S>(pg + b_off, dy.rows()).noalias() += dy.rowwise().sum();
}

template <typename S>
void layernorm_forward(const MatX<S>& x, const CVMap<S>& g, const CVMap<S>& b, MatX<S>& y, VecX<S>& mu, VecX<S>& rs) {
  const i64 n = x.cols();
  const i64 d = x.rows();
  y.resize(d, n);
  mu.resize(n);
  rs.resize(n);
  const S inv_d = S(1) / S(d);
  parallel_chunks(n, [&](i64 c0, i64 c1, int) {
    for (i64 c = c0; c < c1; ++c) {
      const S m = x.col(c).sum() * inv_d;
      const S var = (x.col(c).array() - m).square().sum() * inv_d;
      const S r = S(1) / std::sqrt(var + S(kLnEps));
      mu(c) = m;
      rs(c) = r;
      y.col(c).array() = ((x.col(c).array() - m) * r) * g.array() + b.array();
    }
  });
}

// dx (overwritten) from dy; optionally accumulates gain/bias grads.
template <typename S>
void layernorm_backward(const MatX<S>& x, const VecX<S>& mu, const VecX<S>& rs, const CVMap<S>& g, const MatX<S>& dy,
                        MatX<S>& dx, S* pg, i64 g_off, i64 b_off) {
  const i64 n = x.cols();
  const i64 d = x.rows();
  dx.resize(d, n);
  const S inv_d = S(1) / S(d);
  parallel_chunks(n, [&](i64 c0, i64 c1, int) {
    VecX<S> xhat(d), dxhat(d);
    for (i64 c = c0; c < c1; ++c) {
      xhat = (x.col(c).array() - mu(c)) * rs(c);
      dxhat = dy.col(c).cwiseProduct(g);
      const S m1 = dxhat.sum() * inv_d;
      const S m2 = dxhat.cwiseProduct(xhat).sum() * inv_d;
      dx.col(c) = rs(c) * (dxhat.array() - m1 - xhat.array() * m2);
    }
  });
  if (pg != nullptr) {
    MVMap<S> dg(pg + g_off, d);
    MVMap<S> db(pg + b_off, d);
    for (i64 c = 0; c < n; ++c) {
      dg.array() += dy.col(c).array() * ((x.col(c).array() - mu(c)) * rs(c));
      db += dy.col(c);
    }
  }
}

template <typename S>
void gelu_forward(const MatX<S>& x, MatX<S>& y) {
  y.resize(x.rows(), x.cols());
  const i64 r = x.rows();
  parallel_chunks(x.cols(), [&](i64 c0, i64 c1, int) {
    for (i64 c = c0; c < c1; ++c)
      for (i64 i = 0; i < r; ++i) {
        const S v = x(i, c);
        y(i, c) = S(0.5) * v * (S(1) + std::erf(v * S(M_SQRT1_2)));
      }
  });
}

// d *= gelu'(x), in place
template <typename S>
void gelu_backward(const MatX<S>& x, MatX<S>& d) {
  const i64 r = x.rows();
  parallel_chunks(x.cols(), [&](i64 c0, i64 c1, int) {
    for (i64 c = c0; c < c1; ++c)
      for (i64 i = 0; i < r; ++i) {
        const S v = x(i, c);
        const S cdf = S(0.5) * (S(1) + std::erf(v * S(M_SQRT1_2)));
        const S pdf = S(kInvSqrt2Pi) * std::exp(S(-0.5) * v * v);
        d(i, c) *= cdf + v * pdf;
      }
  });
}

// Attention over the mask: query i sees keys [0, kend[i]) plus itself.
template <typename S>
void attention_forward(const Net<S>& net, Ws<S>& ws, typename Ws<S>::Layer& lw) {
  const int D = net.cfg.d_model, H = net.cfg.num_heads, HS = D / H;
  const int slots = ws.slots;
  const S scale = S(1) / std::sqrt(S(HS));
  const auto& kend = ws.mask.kend;
  lw.att.resize(D, ws.rows * slots);
  parallel_chunks(ws.rows * H, [&](i64 a0, i64 a1, int) {
    for (i64 rh = a0; rh < a1; ++rh) {
      const i64 r = rh / H;
      const int h = static_cast<int>(rh % H);
      auto Q = lw.qkv.block(h * HS, r * slots, HS, slots);
      auto K = lw.qkv.block(D + h * HS, r * slots, HS, slots);
      auto V = lw.qkv.block(2 * D + h * HS, r * slots, HS, slots);
      MatX<S>& P = lw.probs[static_cast<size_t>(rh)];
      P.resize(slots, slots);
      P.noalias() = (Q.transpose() * K) * scale;  // raw scores; masked entries are overwritten below
      for (int i = 0; i < slots; ++i) {
        const int ke = kend[static_cast<size_t>(i)];
        S m = P(i, i);
        for (int j = 0; j < ke; ++j) m = std::max(m, P(i, j));
        S sum = S(0);
        for (int j = 0; j < ke; ++j) {
          const S e = std::exp(P(i, j) - m);
          P(i, j) = e;
          sum += e;
        }
        const S self_e = std::exp(P(i, i) - m);
        sum += self_e;
        const S inv = S(1) / sum;
        for (int j = 0; j < ke; ++j) P(i, j) *= inv;
        for (int j = ke; j < slots; ++j) P(i, j) = S(0);
        P(i, i) = self_e * inv;
      }
      lw.att.block(h * HS, r * slots, HS, slots).noalias() = V * P.transpose();
    }
  });
}

template <typename S>
void attention_backward(const Net<S>& net, Ws<S>& ws, typename Ws<S>::Layer& lw, const MatX<S>& d_att, MatX<S>& d_qkv) {
  const int D = net.cfg.d_model, H = net.cfg.num_heads, HS = D / H;
  const int slots = ws.slots;
  const S scale = S(1) / std::sqrt(S(HS));
  const auto& kend = ws.mask.kend;
  d_qkv.resize(3 * D, ws.rows * slots);
  if (ws.d_score.size() < static_cast<size_t>(max_chunks())) ws.d_score.resize(static_cast<size_t>(max_chunks()));
  parallel_chunks(ws.rows * H, [&](i64 a0, i64 a1, int chunk) {
    MatX<S>& dS = ws.d_score[static_cast<size_t>(chunk)];
    dS.resize(slots, slots);
    for (i64 rh = a0; rh < a1; ++rh) {
      const i64 r = rh / H;
      const int h = static_cast<int>(rh % H);
      auto Q = lw.qkv.block(h * HS, r * slots, HS, slots);
      auto K = lw.qkv.block(D + h * HS, r * slots, HS, slots);
      auto V = lw.qkv.block(2 * D + h * HS, r * slots, HS, slots);
      const MatX<S>& P = lw.probs[static_cast<size_t>(rh)];
      auto dOut = d_att.block(h * HS, r * slots, HS, slots);

      dS.noalias() = dOut.transpose() * V;  // dP; masked entries ignored below
      for (int i = 0; i < slots; ++i) {
        const int ke = kend[static_cast<size_t>(i)];
        S dot = dS(i, i) * P(i, i);
        for (int j = 0; j < ke; ++j) dot += dS(i, j) * P(i, j);
        for (int j = 0; j < ke; ++j) dS(i, j) = P(i, j) * (dS(i, j) - dot);
        const S self = P(i, i) * (dS(i, i) - dot);
        for (int j = ke; j < slots; ++j) dS(i, j) = S(0);
        dS(i, i) = self;
      }
      d_qkv.block(2 * D + h * HS, r * slots, HS, slots).noalias() = dOut * P;            // dV
      d_qkv.block(h * HS, r * slots, HS, slots).noalias() = (K * dS.transpose()) * scale;  // dQ
      d_qkv.block(D + h * HS, r * slots, HS, slots).noalias() = (Q * dS) * scale;          // dK
    }
  });
}

template <typename S>
void forward_pass(const Net<S>& net, const double* values, i64 rows, const MaskSpec& mask, Ws<S>& ws,
                  double* energies_out) {
  const ModelConfig& cfg = net.cfg;
  const Layout& L = net.layout;
  const int slots = mask.slots();
  const i64 n = rows * slots;
  const int D = cfg.d_model, F = cfg.effective_d_ff(), in = cfg.input_dim;

  ws.rows = rows;
  ws.slots = slots;
  ws.mask = mask;
  ws.layers.resize(static_cast<size_t>(cfg.num_layers));

  ws.u.resize(in, n);
  for (i64 r = 0; r < rows; ++r)
    for (int t = 0; t < slots; ++t)
      for (int j = 0; j < in; ++j) ws.u(j, r * slots + t) = static_cast<S>(values[(r * slots + t) * in + j]);

  linear_forward(net.mat(L.in_w, D, in), net.vec(L.in_b, D), ws.u, ws.x0);
  const auto pos = net.mat(L.pos, D, cfg.max_seq_len);
  parallel_chunks(n, [&](i64 c0, i64 c1, int) {
    for (i64 c = c0; c < c1; ++c) ws.x0.col(c) += pos.col(mask.pos_id[static_cast<size_t>(c % slots)]);
  });

  for (int l = 0; l < cfg.num_layers; ++l) {
    auto& lw = ws.layers[static_cast<size_t>(l)];
    const LayerOffsets& lo = L.layers[static_cast<size_t>(l)];
    const MatX<S>& x_in = ws.layer_input(l);
    lw.probs.resize(static_cast<size_t>(rows * cfg.num_heads));

    layernorm_forward(x_in, net.vec(lo.ln1_g, D), net.vec(lo.ln1_b, D), lw.ln1_y, lw.ln1_mu, lw.ln1_rs);
    linear_forward(net.mat(lo.qkv_w, 3 * D, D), net.vec(lo.qkv_b, 3 * D), lw.ln1_y, lw.qkv);
    attention_forward(net, ws, lw);
    linear_forward(net.mat(lo.ao_w, D, D), net.vec(lo.ao_b, D), lw.att, lw.res1);
    lw.res1 += x_in;

    layernorm_forward(lw.res1, net.vec(lo.ln2_g, D), net.vec(lo.ln2_b, D), lw.ln2_y, lw.ln2_mu, lw.ln2_rs);
    linear_forward(net.mat(lo.mi_w, F, D), net.vec(lo.mi_b, F), lw.ln2_y, lw.h_pre);
    gelu_forward(lw.h_pre, lw.h_act);
    linear_forward(net.mat(lo.mo_w, D, F), net.vec(lo.mo_b, D), lw.h_act, lw.res2);
    lw.res2 += lw.res1;
  }

  const MatX<S>& last = cfg.num_layers == 0 ? ws.x0 : ws.layers.back().res2;
  layernorm_forward(last, net.vec(L.lnf_g, D), net.vec(L.lnf_b, D), ws.lnf_y, ws.lnf_mu, ws.lnf_rs);

  const auto hw = net.vec(L.head_w, D);
  const S hb = net.theta(L.head_b);
  parallel_chunks(n, [&](i64 c0, i64 c1, int) {
    for (i64 c = c0; c < c1; ++c) energies_out[c] = static_cast<double>(hw.dot(ws.lnf_y.col(c)) + hb);
  });
}

template <typename S>
void backward_pass(const Net<S>& net, Ws<S>& ws, const double* cotangent, double* input_grads, S* pg) {
  const ModelConfig& cfg = net.cfg;
  const Layout& L = net.layout;
  const int slots = ws.slots;
  const i64 rows = ws.rows;
  const i64 n = rows * slots;
  const int D = cfg.d_model, F = cfg.effective_d_ff(), in = cfg.input_dim;

  // head
  ws.d_branch.resize(D, n);
  const auto hw = net.vec(L.head_w, D);
  parallel_chunks(n, [&](i64 c0, i64 c1, int) {
    for (i64 c = c0; c < c1; ++c) ws.d_branch.col(c) = hw * static_cast<S>(cotangent[c]);
  });
  if (pg != nullptr) {
    MMap<S> dhw(pg + L.head_w, 1, D);
    S db = S(0);
    for (i64 c = 0; c < n; ++c) {
      const S ct = static_cast<S>(cotangent[c]);
      dhw.noalias() += ct * ws.lnf_y.col(c).transpose();
      db += ct;
    }
    pg[L.head_b] += db;
  }

  const MatX<S>& last = cfg.num_layers == 0 ? ws.x0 : ws.layers.back().res2;
  layernorm_backward(last, ws.lnf_mu, ws.lnf_rs, net.vec(L.lnf_g, D), ws.d_branch, ws.d_res, pg, L.lnf_g, L.lnf_b);

  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    auto& lw = ws.layers[static_cast<size_t>(l)];
    const LayerOffsets& lo = L.layers[static_cast<size_t>(l)];
    const MatX<S>& x_in = ws.layer_input(l);

    // mlp branch: res2 = res1 + Wmo h_act + bmo
    linear_backward_input(net.mat(lo.mo_w, D, F), ws.d_res, ws.d_h);
    if (pg != nullptr) linear_accum_grads(pg, lo.mo_w, lo.mo_b, ws.d_res, lw.h_act);
    gelu_backward(lw.h_pre, ws.d_h);
    linear_backward_input(net.mat(lo.mi_w, F, D), ws.d_h, ws.d_branch);
    if (pg != nullptr) linear_accum_grads(pg, lo.mi_w, lo.mi_b, ws.d_h, lw.ln2_y);
    layernorm_backward(lw.res1, lw.ln2_mu, lw.ln2_rs, net.vec(lo.ln2_g, D), ws.d_branch, ws.d_x, pg, lo.ln2_g, lo.ln2_b);
    ws.d_res += ws.d_x;  // residual path

    // attention branch: res1 = x_in + Wao att + bao
    linear_backward_input(net.mat(lo.ao_w, D, D), ws.d_res, ws.d_att);
    if (pg != nullptr) linear_accum_grads(pg, lo.ao_w, lo.ao_b, ws.d_res, lw.att);
    attention_backward(net, ws, lw, ws.d_att, ws.d_qkv);
    linear_backward_input(net.mat(lo.qkv_w, 3 * D, D), ws.d_qkv, ws.d_branch);
    if (pg != nullptr) linear_accum_grads(pg, lo.qkv_w, lo.qkv_b, ws.d_qkv, lw.ln1_y);
    layernorm_backward(x_in, lw.ln1_mu, lw.ln1_rs, net.vec(lo.ln1_g, D), ws.d_branch, ws.d_x, pg, lo.ln1_g, lo.ln1_b);
    ws.d_res += ws.d_x;
  }

  // d_res now holds the gradient on x0
  if (pg != nullptr) {
    MMap<S> dpos(pg + L.pos, D, cfg.max_seq_len);
    for (i64 c = 0; c < n; ++c) dpos.col(ws.mask.pos_id[static_cast<size_t>(c % slots)]) += ws.d_res.col(c);
    linear_accum_grads(pg, L.in_w, L.in_b, ws.d_res, ws.u);
  }
  if (input_grads != nullptr) {
    linear_backward_input(net.mat(L.in_w, D, in), ws.d_res, ws.d_u);
    for (i64 c = 0; c < n; ++c)
      for (int j = 0; j < in; ++j) input_grads[c * in + j] = static_cast<double>(ws.d_u(j, c));
  }
}

template <typename S>
class PassT final : public Pass {
 public:
  explicit PassT(const Net<S>* net) : net_(net) {}

  void forward(const double* values, i64 rows, const MaskSpec& mask, double* energies_out) override {
    mask.validate(net_->cfg.max_seq_len);
    check_arg(rows >= 1, "forward: rows must be >= 1");
    forward_pass(*net_, values, rows, mask, ws_, energies_out);
    have_forward_ = true;
  }

  void backward(const double* cotangent, double* input_grads, double* param_grads) override {
    check_arg(have_forward_, "backward requires a prior forward on this pass");
    if (param_grads == nullptr) {
      backward_pass<S>(*net_, ws_, cotangent, input_grads, static_cast<S*>(nullptr));
      return;
    }
    if constexpr (std::is_same_v<S, double>) {
      backward_pass<S>(*net_, ws_, cotangent, input_grads, param_grads);
    } else {
      if (pg_scratch_.size() != net_->layout.total) pg_scratch_.resize(net_->layout.total);
      pg_scratch_.setZero();
      backward_pass<S>(*net_, ws_, cotangent, input_grads, pg_scratch_.data());
      for (i64 i = 0; i < net_->layout.total; ++i) param_grads[i] += static_cast<double>(pg_scratch_(i));
    }
  }

 private:
  const Net<S>* net_;
  Ws<S> ws_;
  VecX<S> pg_scratch_;
  bool have_forward_ = false;
};

u64 fnv1a(const void* data, size_t len, u64 h = 1469598103934665603ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::istream& in, T& v, const char* what) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("truncated checkpoint while reading ") + what);
}

}  // namespace

void ModelConfig::validate() const {
  check_arg(num_layers >= 1, "model.num_layers must be >= 1");
  check_arg(num_heads >= 1, "model.num_heads must be >= 1");
  check_arg(d_model >= 1, "model.d_model must be >= 1");
  check_arg(d_model % num_heads == 0, "model.d_model must be divisible by model.num_heads");
  check_arg(d_ff >= 0, "model.d_ff must be >= 0 (0 selects 4*d_model)");
  check_arg(input_dim >= 1, "model.input_dim must be >= 1");
  check_arg(max_seq_len >= 1, "model.max_seq_len must be >= 1");
}

MaskSpec MaskSpec::causal(int seq_len) {
  MaskSpec m;
  m.kend.resize(static_cast<size_t>(seq_len));
  m.pos_id.resize(static_cast<size_t>(seq_len));
  for (int q = 0; q < seq_len; ++q) {
    m.kend[static_cast<size_t>(q)] = q;
    m.pos_id[static_cast<size_t>(q)] = q;
  }
  return m;
}

MaskSpec MaskSpec::two_block(int seq_len) {
  MaskSpec m = causal(seq_len);
  m.kend.resize(static_cast<size_t>(2 * seq_len));
  m.pos_id.resize(static_cast<size_t>(2 * seq_len));
  for (int q = 0; q < seq_len; ++q) {
    m.kend[static_cast<size_t>(seq_len + q)] = q;  // the real prefix only
    m.pos_id[static_cast<size_t>(seq_len + q)] = q;
  }
  return m;
}

MaskSpec MaskSpec::prefix_fan(int prefix_len, int fan) {
  MaskSpec m = causal(prefix_len);
  m.kend.resize(static_cast<size_t>(prefix_len + fan));
  m.pos_id.resize(static_cast<size_t>(prefix_len + fan));
  for (int q = 0; q < fan; ++q) {
    m.kend[static_cast<size_t>(prefix_len + q)] = prefix_len;
    m.pos_id[static_cast<size_t>(prefix_len + q)] = prefix_len;
  }
  return m;
}

void MaskSpec::validate(int max_seq_len) const {
  check_arg(!kend.empty() && kend.size() == pos_id.size(), "mask: empty or inconsistent");
  for (size_t q = 0; q < kend.size(); ++q) {
    check_arg(kend[q] >= 0 && kend[q] <= static_cast<int>(q), "mask: kend must lie in [0, slot]");
    check_arg(pos_id[q] >= 0 && pos_id[q] < max_seq_len, "mask: positional id exceeds max_seq_len");
  }
}

struct EnergyModel::Impl {
  std::variant<Net<double>, Net<float>> net;

  template <typename S>
  static std::unique_ptr<Impl> make(const ModelConfig& cfg) {
    auto impl = std::make_unique<Impl>();
    Net<S> n;
    n.cfg = cfg;
    n.layout = Layout::build(cfg);
    n.theta = VecX<S>::Zero(n.layout.total);
    impl->net = std::move(n);
    return impl;
  }

  const ModelConfig& cfg() const {
    return std::visit([](const auto& n) -> const ModelConfig& { return n.cfg; }, net);
  }
  const Layout& layout() const {
    return std::visit([](const auto& n) -> const Layout& { return n.layout; }, net);
  }
};

EnergyModel::EnergyModel(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

EnergyModel::EnergyModel(const ModelConfig& config, u64 seed) {
  config.validate();
  impl_ = config.precision == Precision::kFloat64 ? Impl::make<double>(config) : Impl::make<float>(config);

  // Scaled truncated-normal weights; layernorm gains 1; all biases zero.
  rng::Stream s(seed);
  const Layout& L = impl_->layout();
  std::vector<double> init(static_cast<size_t>(L.total), 0.0);
  for (const ParamDef& def : L.defs) {
    const bool is_weight = def.name == "pos_emb" || def.name.ends_with(".weight");
    const bool is_gain = def.name.ends_with(".gain");
    for (i64 i = 0; i < def.size; ++i) {
      if (is_weight)
        init[static_cast<size_t>(def.offset + i)] = kInitScale * s.next_normal_trunc2();
      else if (is_gain)
        init[static_cast<size_t>(def.offset + i)] = 1.0;
    }
  }
  set_params(init);
}

EnergyModel::EnergyModel(const EnergyModel& other) : impl_(std::make_unique<Impl>(*other.impl_)) {}
EnergyModel& EnergyModel::operator=(const EnergyModel& other) {
  if (this != &other) impl_ = std::make_unique<Impl>(*other.impl_);
  return *this;
}
EnergyModel::EnergyModel(EnergyModel&&) noexcept = default;
EnergyModel& EnergyModel::operator=(EnergyModel&&) noexcept = default;
EnergyModel::~EnergyModel() = default;

const ModelConfig& EnergyModel::config() const { return impl_->cfg(); }
const std::vector<ParamDef>& EnergyModel::param_defs() const { return impl_->layout().defs; }
i64 EnergyModel::num_params() const { return impl_->layout().total; }

std::vector<double> EnergyModel::params() const {
  return std::visit(
      [](const auto& n) {
        std::vector<double> out(static_cast<size_t>(n.layout.total));
        for (i64 i = 0; i < n.layout.total; ++i) out[static_cast<size_t>(i)] = static_cast<double>(n.theta(i));
        return out;
      },
      impl_->net);
}

void EnergyModel::set_params(const std::vector<double>& theta) {
  check_arg(static_cast<i64>(theta.size()) == num_params(), "set_params: length mismatch");
  std::visit(
      [&](auto& n) {
        using S = typename std::decay_t<decltype(n.theta)>::Scalar;
        for (i64 i = 0; i < n.layout.total; ++i) n.theta(i) = static_cast<S>(theta[static_cast<size_t>(i)]);
      },
      impl_->net);
}

void EnergyModel::add_to_params(const double* delta) {
  std::visit(
      [&](auto& n) {
        using S = typename std::decay_t<decltype(n.theta)>::Scalar;
        for (i64 i = 0; i < n.layout.total; ++i) n.theta(i) += static_cast<S>(delta[i]);
      },
      impl_->net);
}

u64 EnergyModel::params_checksum() const {
  return std::visit(
      [](const auto& n) { return fnv1a(n.theta.data(), static_cast<size_t>(n.layout.total) * sizeof(n.theta(0))); },
      impl_->net);
}

std::unique_ptr<Pass> EnergyModel::new_pass() const {
  return std::visit(
      [](const auto& n) -> std::unique_ptr<Pass> {
        using S = typename std::decay_t<decltype(n.theta)>::Scalar;
        return std::make_unique<PassT<S>>(&n);
      },
      impl_->net);
}

Eigen::MatrixXd EnergyModel::forward_energies(const SequenceBatch& batch) const {
  batch.validate();
  const ModelConfig& cfg = config();
  check_arg(batch.seq_len <= cfg.max_seq_len, "forward_energies: seq_len axis exceeds model max_seq_len");
  check_arg(batch.dim == cfg.input_dim, "forward_energies: dim axis does not match model input_dim");
  auto pass = new_pass();
  std::vector<double> energies(static_cast<size_t>(batch.batch * batch.seq_len));
  pass->forward(batch.values.data(), batch.batch, MaskSpec::causal(static_cast<int>(batch.seq_len)), energies.data());
  Eigen::MatrixXd out(batch.batch, batch.seq_len);
  for (i64 b = 0; b < batch.batch; ++b)
    for (i64 t = 0; t < batch.seq_len; ++t) out(b, t) = energies[static_cast<size_t>(b * batch.seq_len + t)];
  return out;
}

Eigen::MatrixXd EnergyModel::input_gradient(const SequenceBatch& batch, int position) const {
  batch.validate();
  check_arg(position >= 0 && position < batch.seq_len, "input_gradient: position out of range");
  const ModelConfig& cfg = config();
  check_arg(batch.seq_len <= cfg.max_seq_len, "input_gradient: seq_len axis exceeds model max_seq_len");
  check_arg(batch.dim == cfg.input_dim, "input_gradient: dim axis does not match model input_dim");

  auto pass = new_pass();
  const i64 n = batch.batch * batch.seq_len;
  std::vector<double> energies(static_cast<size_t>(n));
  pass->forward(batch.values.data(), batch.batch, MaskSpec::causal(static_cast<int>(batch.seq_len)), energies.data());
  std::vector<double> cot(static_cast<size_t>(n), 0.0);
  for (i64 b = 0; b < batch.batch; ++b) cot[static_cast<size_t>(b * batch.seq_len + position)] = 1.0;
  std::vector<double> grads(static_cast<size_t>(n * batch.dim));
  pass->backward(cot.data(), grads.data(), nullptr);

  Eigen::MatrixXd out(batch.batch, batch.dim);
  for (i64 b = 0; b < batch.batch; ++b)
    for (i64 j = 0; j < batch.dim; ++j) out(b, j) = grads[static_cast<size_t>((b * batch.seq_len + position) * batch.dim + j)];
  return out;
}

std::vector<double> EnergyModel::parameter_gradient(const SequenceBatch& batch, const Eigen::MatrixXd& cotangent) const {
  batch.validate();
  check_arg(cotangent.rows() == batch.batch && cotangent.cols() == batch.seq_len,
            "parameter_gradient: cotangent shape must match energies [batch, seq_len]");
  auto pass = new_pass();
  const i64 n = batch.batch * batch.seq_len;
  std::vector<double> energies(static_cast<size_t>(n));
  pass->forward(batch.values.data(), batch.batch, MaskSpec::causal(static_cast<int>(batch.seq_len)), energies.data());
  std::vector<double> cot(static_cast<size_t>(n));
  for (i64 b = 0; b < batch.batch; ++b)
    for (i64 t = 0; t < batch.seq_len; ++t) cot[static_cast<size_t>(b * batch.seq_len + t)] = cotangent(b, t);
  std::vector<double> grads(static_cast<size_t>(num_params()), 0.0);
  pass->backward(cot.data(), nullptr, grads.data());
  return grads;
}

void EnergyModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  const ModelConfig& cfg = config();
  out.write(kMagic, sizeof(kMagic));
  write_raw(out, kFormatVersion);
  const std::int32_t ints[8] = {cfg.num_layers,  cfg.num_heads,   cfg.d_model,
                                cfg.effective_d_ff(), cfg.input_dim, cfg.max_seq_len,
                                static_cast<std::int32_t>(cfg.precision), 0 /* activation: gelu */};
  out.write(reinterpret_cast<const char*>(ints), sizeof(ints));
  const auto& defs = param_defs();
  write_raw(out, static_cast<u64>(defs.size()));
  std::visit(
      [&](const auto& n) {
        using S = typename std::decay_t<decltype(n.theta)>::Scalar;
        for (const ParamDef& def : defs) {
          write_raw(out, static_cast<std::uint32_t>(def.name.size()));
          out.write(def.name.data(), static_cast<std::streamsize>(def.name.size()));
          write_raw(out, static_cast<std::uint32_t>(def.dims.size()));
          for (i64 d : def.dims) write_raw(out, static_cast<u64>(d));
          out.write(reinterpret_cast<const char*>(n.theta.data() + def.offset),
                    static_cast<std::streamsize>(def.size * sizeof(S)));
        }
      },
      impl_->net);
  if (!out) throw IoError("checkpoint write failed: " + path);
}

EnergyModel EnergyModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[6];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not an ICLEBM checkpoint (bad magic): " + path);
  std::uint32_t version = 0;
  read_raw(in, version, "format version");
  if (version != kFormatVersion)
    throw FormatError("unsupported checkpoint format version " + std::to_string(version));
  std::int32_t ints[8];
  in.read(reinterpret_cast<char*>(ints), sizeof(ints));
  if (!in) throw FormatError("truncated checkpoint while reading config");
  ModelConfig cfg;
  cfg.num_layers = ints[0];
  cfg.num_heads = ints[1];
  cfg.d_model = ints[2];
  cfg.d_ff = ints[3];
  cfg.input_dim = ints[4];
  cfg.max_seq_len = ints[5];
  if (ints[6] != 0 && ints[6] != 1) throw FormatError("checkpoint declares unknown precision");
  cfg.precision = static_cast<Precision>(ints[6]);
  if (ints[7] != 0) throw FormatError("checkpoint declares unknown activation");
  cfg.validate();

  auto impl = cfg.precision == Precision::kFloat64 ? Impl::make<double>(cfg) : Impl::make<float>(cfg);
  const Layout& layout = impl->layout();
  u64 num_arrays = 0;
  read_raw(in, num_arrays, "array count");
  if (num_arrays != layout.defs.size())
    throw FormatError("checkpoint parameter-set disagreement: expected " + std::to_string(layout.defs.size()) +
                      " arrays, file has " + std::to_string(num_arrays));
  std::visit(
      [&](auto& n) {
        using S = typename std::decay_t<decltype(n.theta)>::Scalar;
        for (const ParamDef& def : layout.defs) {
          std::uint32_t name_len = 0;
          read_raw(in, name_len, "parameter name length");
          std::string name(name_len, '\0');
          in.read(name.data(), name_len);
          if (!in) throw FormatError("truncated checkpoint while reading parameter name");
          if (name != def.name)
            throw FormatError("checkpoint parameter order disagreement: expected '" + def.name + "', found '" + name + "'");
          std::uint32_t ndim = 0;
          read_raw(in, ndim, "parameter rank");
          if (ndim != def.dims.size()) throw FormatError("parameter '" + name + "' rank disagreement");
          for (size_t k = 0; k < def.dims.size(); ++k) {
            u64 d = 0;
            read_raw(in, d, "parameter dims");
            if (static_cast<i64>(d) != def.dims[k])
              throw FormatError("parameter '" + name + "' shape disagreement with checkpoint config");
          }
          in.read(reinterpret_cast<char*>(n.theta.data() + def.offset),
                  static_cast<std::streamsize>(def.size * sizeof(S)));
          if (!in) throw FormatError("truncated checkpoint while reading parameter '" + name + "'");
        }
      },
      impl->net);
  in.peek();
  if (!in.eof()) throw FormatError("checkpoint has trailing bytes: " + path);
  return EnergyModel(std::move(impl));
}

i64 parameter_count(const ModelConfig& cfg) {
  const i64 D = cfg.d_model, F = cfg.effective_d_ff(), in = cfg.input_dim, T = cfg.max_seq_len;
  const i64 per_layer = 4 * D * D + 2 * D * F + 9 * D + F;
  return (D * in + D) + T * D + cfg.num_layers * per_layer + 2 * D + (D + 1);
}

}  // namespace iclebm
