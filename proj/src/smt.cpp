#include "neoward/smt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "neoward/common.hpp"

namespace neoward::smt {

namespace {

// y = a w^T for a (n x p), w (q x p)
Matrix matmul_t(const Matrix& a, const Matrix& w) {
  Matrix y(a.rows, w.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double* yr = y.row(i);
    for (std::size_t o = 0; o < w.rows; ++o) {
      const double* wr = w.row(o);
      double acc = 0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * wr[k];
      yr[o] = acc;
    }
  }
  return y;
}

// da += dy w ; dw += dy^T a
void matmul_t_back(const Matrix& a, const Matrix& w, const Matrix& dy, Matrix* da, Matrix* dw) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    const double* dyr = dy.row(i);
    for (std::size_t o = 0; o < w.rows; ++o) {
      const double g = dyr[o];
      if (g == 0) continue;
      const double* wr = w.row(o);
      if (da) {
        double* dar = da->row(i);
        for (std::size_t k = 0; k < a.cols; ++k) dar[k] += g * wr[k];
      }
      if (dw) {
        double* dwr = dw->row(o);
        for (std::size_t k = 0; k < a.cols; ++k) dwr[k] += g * ar[k];
      }
    }
  }
}

void softmax_inplace(std::span<double> x) {
  double m = -INFINITY;
  for (double v : x) m = std::max(m, v);
  double sum = 0;
  for (double& v : x) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : x) v /= sum;
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

std::span<const double> row_span(const Matrix& m, std::size_t r) { return {m.row(r), m.cols}; }

// Key lists per query for the clipped pattern, as CSR arrays.
struct Pattern {
  std::vector<long> offsets;
  std::vector<std::size_t> start;   // n + 1
  std::vector<std::size_t> key;     // per edge
  std::vector<std::size_t> offset;  // per edge: index into offsets
};

Pattern build_pattern(std::size_t n) {
  Pattern p;
  p.offsets = attention_offsets(n);
  p.start.reserve(n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    p.start.push_back(p.key.size());
    for (std::size_t oi = 0; oi < p.offsets.size(); ++oi) {
      const long j = static_cast<long>(i) + p.offsets[oi];
      if (j < 0 || j >= static_cast<long>(n)) continue;
      p.key.push_back(static_cast<std::size_t>(j));
      p.offset.push_back(oi);
    }
  }
  p.start.push_back(p.key.size());
  return p;
}

struct AttentionCache {
  Pattern pattern;
  std::vector<double> alpha;        // heads x edges
  std::vector<double> bias_table;   // heads x offsets
};

Matrix attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, const Matrix& u,
                         const Matrix& vb, const Matrix& omega, AttentionCache& cache) {
  const std::size_t n = q.rows, d = q.cols, dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  cache.pattern = build_pattern(n);
  const auto& pat = cache.pattern;
  const std::size_t edges = pat.key.size(), no = pat.offsets.size();
  cache.alpha.assign(heads * edges, 0.0);
  cache.bias_table.assign(heads * no, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t oi = 0; oi < no; ++oi)
      cache.bias_table[h * no + oi] = relative_bias(-pat.offsets[oi], row_span(u, h), row_span(vb, h), row_span(omega, 0));

  Matrix z(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    double* alpha = cache.alpha.data() + h * edges;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t e0 = pat.start[i], e1 = pat.start[i + 1];
      for (std::size_t e = e0; e < e1; ++e)
        alpha[e] = dot(q.row(i) + c0, k.row(pat.key[e]) + c0, dh) * inv + cache.bias_table[h * no + pat.offset[e]];
      softmax_inplace({alpha + e0, e1 - e0});
      double* zr = z.row(i) + c0;
      for (std::size_t e = e0; e < e1; ++e) {
        const double* vr = v.row(pat.key[e]) + c0;
        for (std::size_t c = 0; c < dh; ++c) zr[c] += alpha[e] * vr[c];
      }
    }
  }
  return z;
}

struct ParamGrad;

struct Cache {
  Matrix patch;  // n x 9
  Matrix e, q, k, v, z, r;
  AttentionCache attn;
  std::vector<double> beta;
  std::vector<double> s, e1, e2, fused;
  std::vector<double> gamma_w;
  std::array<double, 3> logits{};
};

Matrix make_patch(const Matrix& x) {
  const std::size_t n = x.rows, m = x.cols;
  Matrix p(n, 9);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t t = 0; t < n; ++t) {
    for (int a = -1; a <= 1; ++a) {
      const long tt = static_cast<long>(t) + a;
      if (tt < 0 || tt >= static_cast<long>(n)) continue;
      const double* xr = x.row(static_cast<std::size_t>(tt));
      for (int b = -1; b <= 1; ++b) {
        double acc = 0;
        for (std::size_t mm = 0; mm < m; ++mm) {
          const long c = static_cast<long>(mm) + b;
          if (c >= 0 && c < static_cast<long>(m)) acc += xr[c];
        }
        p(t, static_cast<std::size_t>(3 * (a + 1) + (b + 1))) = acc * inv_m;
      }
    }
  }
  return p;
}

std::vector<double> project(const Matrix& w, const Matrix& b, std::span<const double> x) {
  std::vector<double> y(w.rows);
  for (std::size_t o = 0; o < w.rows; ++o) y[o] = b.data[o] + dot(w.row(o), x.data(), w.cols);
  return y;
}

void forward(const Model& model, const Example& ex, Cache& c) {
  const auto& p = model.params;
  const std::size_t d = model.config.d_model;
  const double invd = 1.0 / std::sqrt(static_cast<double>(d));
  if (ex.window.cols != kModalities) throw Error(ErrorCode::kInvalidArgument, "window must have 4 modality columns");
  if (ex.window.rows < 3) throw Error(ErrorCode::kInvalidArgument, "window needs at least 3 rows");
  if (ex.statics.size() != p.ws.cols || ex.semistatics.size() != p.wss.cols)
    throw Error(ErrorCode::kInvalidArgument, "static feature width does not match the model");

  c.patch = make_patch(ex.window);
  c.e = matmul_t(c.patch, p.conv_w);
  for (std::size_t t = 0; t < c.e.rows; ++t)
    for (std::size_t j = 0; j < d; ++j) c.e(t, j) += p.conv_b.data[j];
  c.q = matmul_t(c.e, p.wq);
  c.k = matmul_t(c.e, p.wk);
  c.v = matmul_t(c.e, p.wv);
  c.z = attention_forward(c.q, c.k, c.v, model.config.heads, p.u, p.v, p.omega, c.attn);
  c.r = matmul_t(c.z, p.wo);
  for (std::size_t i = 0; i < c.r.data.size(); ++i) c.r.data[i] += c.e.data[i];

  const std::size_t n = c.r.rows;
  c.beta.assign(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) c.beta[t] = dot(p.q1.data.data(), c.r.row(t), d) * invd;
  softmax_inplace(c.beta);
  c.s.assign(d, 0.0);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j) c.s[j] += c.beta[t] * c.r(t, j);

  c.e1 = project(p.ws, p.bs, ex.statics);
  c.e2 = project(p.wss, p.bss, ex.semistatics);
  c.fused = attend_sources({c.s, c.e1, c.e2}, p.q2.data, p.c.data, &c.gamma_w);
  for (std::size_t o = 0; o < kClasses; ++o) c.logits[o] = p.bc.data[o] + dot(p.wc.row(o), c.fused.data(), d);
}

// dL/dlogits for the focal loss at tau = 1.
std::array<double, 3> focal_grad_logits(const std::array<double, 3>& probs, int y, double gamma, double alpha) {
  std::array<double, 3> g{};
  const double py = probs[static_cast<std::size_t>(y)];
  if (py < kProbFloor) return g;  // clamped: locally constant
  const double lp = std::log(py);
  double dl_dp = -alpha * std::pow(1.0 - py, gamma) / py;
  if (gamma != 0.0 && py < 1.0) dl_dp += alpha * gamma * std::pow(1.0 - py, gamma - 1.0) * lp;
  for (std::size_t j = 0; j < kClasses; ++j)
    g[j] = dl_dp * py * ((static_cast<int>(j) == y ? 1.0 : 0.0) - probs[j]);
  return g;
}

void backward(const Model& model, const Example& ex, const Cache& c, const std::array<double, 3>& dlogits,
              Params& g) {
  const auto& p = model.params;
  const std::size_t d = model.config.d_model, n = c.r.rows, heads = model.config.heads, dh = d / heads;
  const double invd = 1.0 / std::sqrt(static_cast<double>(d));

  // classifier
  std::vector<double> dfused(d, 0.0);
  for (std::size_t o = 0; o < kClasses; ++o) {
    g.bc.data[o] += dlogits[o];
    for (std::size_t j = 0; j < d; ++j) {
      g.wc(o, j) += dlogits[o] * c.fused[j];
      dfused[j] += dlogits[o] * p.wc(o, j);
    }
  }

  // stage 2
  const std::array<const std::vector<double>*, 3> src{&c.s, &c.e1, &c.e2};
  std::array<std::vector<double>, 3> dsrc;
  std::array<double, 3> dgw{};
  for (std::size_t j = 0; j < 3; ++j) {
    dgw[j] = dot(dfused.data(), src[j]->data(), d);
    dsrc[j].assign(d, 0.0);
    for (std::size_t t = 0; t < d; ++t) dsrc[j][t] = c.gamma_w[j] * dfused[t];
  }
  double sum = 0;
  for (std::size_t j = 0; j < 3; ++j) sum += c.gamma_w[j] * dgw[j];
  for (std::size_t j = 0; j < 3; ++j) {
    const double dg = c.gamma_w[j] * (dgw[j] - sum);
    g.c.data[j] += dg;
    for (std::size_t t = 0; t < d; ++t) {
      g.q2.data[t] += dg * invd * (*src[j])[t];
      dsrc[j][t] += dg * invd * p.q2.data[t];
    }
  }
  for (std::size_t o = 0; o < d; ++o) {
    g.bs.data[o] += dsrc[1][o];
    for (std::size_t i = 0; i < p.ws.cols; ++i) g.ws(o, i) += dsrc[1][o] * ex.statics[i];
    g.bss.data[o] += dsrc[2][o];
    for (std::size_t i = 0; i < p.wss.cols; ++i) g.wss(o, i) += dsrc[2][o] * ex.semistatics[i];
  }

  // stage 1
  const auto& ds = dsrc[0];
  Matrix dr(n, d);
  std::vector<double> dbeta(n);
  double bsum = 0;
  for (std::size_t t = 0; t < n; ++t) {
    dbeta[t] = dot(ds.data(), c.r.row(t), d);
    bsum += c.beta[t] * dbeta[t];
    for (std::size_t j = 0; j < d; ++j) dr(t, j) = c.beta[t] * ds[j];
  }
  for (std::size_t t = 0; t < n; ++t) {
    const double da = c.beta[t] * (dbeta[t] - bsum) * invd;
    for (std::size_t j = 0; j < d; ++j) {
      g.q1.data[j] += da * c.r(t, j);
      dr(t, j) += da * p.q1.data[j];
    }
  }

  // residual + output projection
  Matrix de = dr;
  Matrix dz(n, d);
  matmul_t_back(c.z, p.wo, dr, &dz, &g.wo);

  // attention
  Matrix dq(n, d), dk(n, d), dv(n, d);
  const auto& pat = c.attn.pattern;
  const std::size_t edges = pat.key.size(), no = pat.offsets.size();
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> gbias(heads * no, 0.0);
  std::vector<double> dalpha;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    const double* alpha = c.attn.alpha.data() + h * edges;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t e0 = pat.start[i], e1 = pat.start[i + 1];
      const double* dzr = dz.row(i) + c0;
      dalpha.assign(e1 - e0, 0.0);
      double acc = 0;
      for (std::size_t e = e0; e < e1; ++e) {
        const std::size_t j = pat.key[e];
        dalpha[e - e0] = dot(dzr, c.v.row(j) + c0, dh);
        acc += alpha[e] * dalpha[e - e0];
        double* dvr = dv.row(j) + c0;
        for (std::size_t t = 0; t < dh; ++t) dvr[t] += alpha[e] * dzr[t];
      }
      for (std::size_t e = e0; e < e1; ++e) {
        const std::size_t j = pat.key[e];
        const double dsc = alpha[e] * (dalpha[e - e0] - acc);
        gbias[h * no + pat.offset[e]] += dsc;
        const double* qr = c.q.row(i) + c0;
        const double* kr = c.k.row(j) + c0;
        double* dqr = dq.row(i) + c0;
        double* dkr = dk.row(j) + c0;
        for (std::size_t t = 0; t < dh; ++t) {
          dqr[t] += dsc * inv * kr[t];
          dkr[t] += dsc * inv * qr[t];
        }
      }
    }
  }
  const std::size_t kf = p.omega.cols;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t oi = 0; oi < no; ++oi) {
      const double gb = gbias[h * no + oi];
      if (gb == 0) continue;
      const double delta = static_cast<double>(-pat.offsets[oi]);
      for (std::size_t k = 0; k < kf; ++k) {
        const double w = p.omega.data[k];
        const double sn = std::sin(w * delta), cs = std::cos(w * delta);
        g.u(h, k) += gb * sn;
        g.v(h, k) += gb * cs;
        g.omega.data[k] += gb * delta * (p.u(h, k) * cs - p.v(h, k) * sn);
      }
    }
  }
  matmul_t_back(c.e, p.wq, dq, &de, &g.wq);
  matmul_t_back(c.e, p.wk, dk, &de, &g.wk);
  matmul_t_back(c.e, p.wv, dv, &de, &g.wv);

  // conv
  matmul_t_back(c.patch, p.conv_w, de, nullptr, &g.conv_w);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j) g.conv_b.data[j] += de(t, j);
}

void check_shapes(const Params& a, const Params& b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (ta[i]->rows != tb[i]->rows || ta[i]->cols != tb[i]->cols)
      throw Error(ErrorCode::kInvalidArgument, std::string("gradient shape mismatch for ") + Params::names()[i]);
}

int argmax3(const std::array<double, 3>& x) {
  int best = 0;
  for (int i = 1; i < 3; ++i)
    if (x[static_cast<std::size_t>(i)] > x[static_cast<std::size_t>(best)]) best = i;
  return best;
}

}  // namespace

std::string_view risk_class_name(RiskClass c) {
  switch (c) {
    case RiskClass::kLow: return "low";
    case RiskClass::kModerate: return "moderate";
    case RiskClass::kHigh: return "high";
  }
  return "?";
}

std::optional<RiskClass> parse_risk_class(std::string_view name) {
  if (name == "low") return RiskClass::kLow;
  if (name == "moderate") return RiskClass::kModerate;
  if (name == "high") return RiskClass::kHigh;
  return std::nullopt;
}

void ModelConfig::validate() const {
  if (window < 8) throw Error(ErrorCode::kInvalidArgument, "window must be >= 8");
  if (d_model == 0 || heads == 0 || d_model % heads != 0)
    throw Error(ErrorCode::kInvalidArgument, "d_model must be a positive multiple of heads");
  if (freqs == 0) throw Error(ErrorCode::kInvalidArgument, "freqs must be >= 1");
  if (static_dim == 0 || semistatic_dim == 0) throw Error(ErrorCode::kInvalidArgument, "feature dims must be >= 1");
}

std::array<Matrix*, Params::kTensorCount> Params::tensors() {
  return {&conv_w, &conv_b, &wq, &wk, &wv, &wo, &u, &v, &omega, &q1, &ws, &bs, &wss, &bss, &q2, &c, &wc, &bc};
}

std::array<const Matrix*, Params::kTensorCount> Params::tensors() const {
  return {&conv_w, &conv_b, &wq, &wk, &wv, &wo, &u, &v, &omega, &q1, &ws, &bs, &wss, &bss, &q2, &c, &wc, &bc};
}

const std::array<const char*, Params::kTensorCount>& Params::names() {
  static const std::array<const char*, kTensorCount> n{"conv_w", "conv_b", "wq", "wk", "wv", "wo",
                                                       "u",      "v",      "omega", "q1", "ws", "bs",
                                                       "wss",    "bss",    "q2", "c",  "wc", "bc"};
  return n;
}

std::size_t Params::size() const {
  std::size_t total = 0;
  for (const auto* t : tensors()) total += t->data.size();
  return total;
}

Params zero_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  Params p;
  p.conv_w = Matrix(d, 9);
  p.conv_b = Matrix(1, d);
  p.wq = Matrix(d, d);
  p.wk = Matrix(d, d);
  p.wv = Matrix(d, d);
  p.wo = Matrix(d, d);
  p.u = Matrix(cfg.heads, cfg.freqs);
  p.v = Matrix(cfg.heads, cfg.freqs);
  p.omega = Matrix(1, cfg.freqs);
  p.q1 = Matrix(1, d);
  p.ws = Matrix(d, cfg.static_dim);
  p.bs = Matrix(1, d);
  p.wss = Matrix(d, cfg.semistatic_dim);
  p.bss = Matrix(1, d);
  p.q2 = Matrix(1, d);
  p.c = Matrix(1, 3);
  p.wc = Matrix(kClasses, d);
  p.bc = Matrix(1, kClasses);
  return p;
}

Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Params p = zero_params(cfg);
  SeededRng rng(seed);
  auto fill = [&](Matrix& m, double scale) {
    for (auto& x : m.data) x = scale * rng.gaussian();
  };
  const double d = static_cast<double>(cfg.d_model);
  fill(p.conv_w, 0.5);
  fill(p.wq, 1.0 / std::sqrt(d));
  fill(p.wk, 1.0 / std::sqrt(d));
  fill(p.wv, 1.0 / std::sqrt(d));
  fill(p.wo, 1.0 / std::sqrt(d));
  fill(p.u, 0.1);
  fill(p.v, 0.1);
  for (std::size_t k = 0; k < cfg.freqs; ++k) p.omega.data[k] = std::numbers::pi / std::ldexp(1.0, static_cast<int>(k));
  fill(p.q1, 1.0 / std::sqrt(d));
  fill(p.ws, 1.0 / std::sqrt(static_cast<double>(cfg.static_dim)));
  fill(p.wss, 1.0 / std::sqrt(static_cast<double>(cfg.semistatic_dim)));
  fill(p.q2, 1.0 / std::sqrt(d));
  fill(p.wc, 1.0 / std::sqrt(d));
  return p;
}

Matrix embed_window(const Matrix& window, const Params& params) {
  if (window.rows < 3) throw Error(ErrorCode::kInvalidArgument, "window needs at least 3 rows for the 3x3 kernel");
  Matrix e = matmul_t(make_patch(window), params.conv_w);
  for (std::size_t t = 0; t < e.rows; ++t)
    for (std::size_t j = 0; j < e.cols; ++j) e(t, j) += params.conv_b.data[j];
  return e;
}

double relative_bias(long delta, std::span<const double> u, std::span<const double> v, std::span<const double> omega) {
  double b = 0;
  const double dd = static_cast<double>(delta);
  for (std::size_t k = 0; k < omega.size(); ++k) b += u[k] * std::sin(omega[k] * dd) + v[k] * std::cos(omega[k] * dd);
  return b;
}

std::vector<long> attention_offsets(std::size_t n) {
  if (n < 2) return {0};
  const int top = static_cast<int>(std::floor(std::log2(static_cast<double>(n))));
  std::vector<long> out;
  for (int k = top - 1; k >= 0; --k) out.push_back(-(1L << k));
  out.push_back(0);
  for (int k = 0; k < top; ++k) out.push_back(1L << k);
  return out;
}

std::size_t sparse_edge_count(std::size_t n) {
  std::size_t total = 0;
  for (long off : attention_offsets(n)) {
    const std::size_t a = static_cast<std::size_t>(off < 0 ? -off : off);
    if (a < n) total += n - a;
  }
  return total;
}

Matrix sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, const Matrix& u,
                        const Matrix& vbias, const Matrix& omega, std::size_t* edges) {
  if (heads == 0 || q.cols % heads != 0 || k.rows != q.rows || v.rows != q.rows || k.cols != q.cols || v.cols != q.cols)
    throw Error(ErrorCode::kInvalidArgument, "inconsistent attention shapes");
  if (u.rows != heads || vbias.rows != heads || u.cols != omega.cols || vbias.cols != omega.cols)
    throw Error(ErrorCode::kInvalidArgument, "bias parameters do not match heads/frequencies");
  AttentionCache cache;
  auto z = attention_forward(q, k, v, heads, u, vbias, omega, cache);
  if (edges) *edges = cache.pattern.key.size();
  return z;
}

std::vector<double> attend_sources(const std::vector<std::vector<double>>& sources, std::span<const double> q2,
                                   std::span<const double> bias, std::vector<double>* weights) {
  if (sources.empty() || bias.size() != sources.size())
    throw Error(ErrorCode::kInvalidArgument, "one bias per source required");
  const std::size_t d = q2.size();
  const double invd = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> w(sources.size());
  for (std::size_t j = 0; j < sources.size(); ++j) w[j] = dot(q2.data(), sources[j].data(), d) * invd + bias[j];
  softmax_inplace(w);
  std::vector<double> out(d, 0.0);
  for (std::size_t j = 0; j < sources.size(); ++j)
    for (std::size_t t = 0; t < d; ++t) out[t] += w[j] * sources[j][t];
  if (weights) *weights = std::move(w);
  return out;
}

FusionResult fuse(const Matrix& seq, std::span<const double> statics, std::span<const double> semistatics,
                  const Params& p) {
  const std::size_t n = seq.rows, d = seq.cols;
  const double invd = 1.0 / std::sqrt(static_cast<double>(d));
  FusionResult r;
  r.stage1_weights.resize(n);
  for (std::size_t t = 0; t < n; ++t) r.stage1_weights[t] = dot(p.q1.data.data(), seq.row(t), d) * invd;
  softmax_inplace(r.stage1_weights);
  r.summary.assign(d, 0.0);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j) r.summary[j] += r.stage1_weights[t] * seq(t, j);
  std::vector<double> w;
  r.fused = attend_sources({r.summary, project(p.ws, p.bs, statics), project(p.wss, p.bss, semistatics)}, p.q2.data,
                           p.c.data, &w);
  std::copy(w.begin(), w.end(), r.stage2_weights.begin());
  return r;
}

std::array<double, 3> softmax3(const std::array<double, 3>& logits, double tau) {
  if (!(tau > 0)) throw Error(ErrorCode::kInvalidArgument, "temperature must be > 0");
  std::array<double, 3> p{logits[0] / tau, logits[1] / tau, logits[2] / tau};
  softmax_inplace(p);
  return p;
}

RiskScore classify(std::span<const double> fused, const Params& params, double tau) {
  std::array<double, 3> z{};
  for (std::size_t o = 0; o < kClasses; ++o) z[o] = params.bc.data[o] + dot(params.wc.row(o), fused.data(), fused.size());
  auto p = softmax3(z, tau);
  return {p[0], p[1], p[2]};
}

std::array<double, 3> forward_logits(const Model& model, const Example& example) {
  Cache c;
  forward(model, example, c);
  return c.logits;
}

RiskScore predict(const Model& model, const Example& example) {
  auto p = softmax3(forward_logits(model, example), model.tau);
  return {p[0], p[1], p[2]};
}

double focal_loss(std::span<const double> probs, int label, double gamma, double alpha) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size())
    throw Error(ErrorCode::kInvalidArgument, "label out of range");
  if (gamma < 0 || alpha < 0) throw Error(ErrorCode::kInvalidArgument, "gamma and alpha must be >= 0");
  const double p = std::max(probs[static_cast<std::size_t>(label)], kProbFloor);
  return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
}

std::array<double, 3> class_weights(std::span<const int> labels) {
  std::array<std::size_t, 3> counts{};
  for (int y : labels) {
    if (y < 0 || y > 2) throw Error(ErrorCode::kInvalidArgument, "label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  const auto present = std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; });
  if (present < 2) throw Error(ErrorCode::kInvalidArgument, "class weights need at least two classes");
  std::array<double, 3> alpha{};
  const double n = static_cast<double>(labels.size());
  for (std::size_t c = 0; c < 3; ++c) alpha[c] = counts[c] ? n / (3.0 * static_cast<double>(counts[c])) : 0.0;
  return alpha;
}

double loss_and_grad(const Model& model, std::span<const Example> batch, double gamma,
                     const std::array<double, 3>& alpha, Params* grad) {
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty batch");
  if (grad) check_shapes(model.params, *grad);
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0;
  Cache c;
  for (const auto& ex : batch) {
    forward(model, ex, c);
    const auto probs = softmax3(c.logits);
    const double a = alpha[static_cast<std::size_t>(ex.label)];
    total += focal_loss(probs, ex.label, gamma, a);
    if (grad) {
      auto g = focal_grad_logits(probs, ex.label, gamma, a);
      for (auto& x : g) x *= scale;
      backward(model, ex, c, g, *grad);
    }
  }
  return total * scale;
}

double accuracy(const Model& model, std::span<const Example> set) {
  if (set.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& ex : set)
    if (argmax3(forward_logits(model, ex)) == ex.label) ++ok;
  return static_cast<double>(ok) / static_cast<double>(set.size());
}

TrainReport train(Model& model, std::span<const Example> train_set, std::span<const Example> val_set,
                  const TrainConfig& config) {
  model.config.validate();
  if (train_set.empty()) throw Error(ErrorCode::kInvalidArgument, "empty training set");
  if (!(config.lr > 0)) throw Error(ErrorCode::kInvalidArgument, "learning rate must be > 0");
  std::vector<int> labels;
  for (const auto& ex : train_set) labels.push_back(ex.label);
  TrainReport report;
  report.alpha = class_weights(labels);
  model.params = init_params(model.config, config.seed);
  model.tau = 1.0;

  auto record = [&](std::size_t step, double train_loss) {
    TrainPoint pt;
    pt.step = step;
    pt.train_loss = train_loss;
    pt.train_acc = accuracy(model, train_set);
    if (!val_set.empty()) {
      pt.val_loss = loss_and_grad(model, val_set, config.gamma, report.alpha, nullptr);
      pt.val_acc = accuracy(model, val_set);
    }
    report.history.push_back(pt);
  };

  Params grad = zero_params(model.config);
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (auto* t : grad.tensors()) std::fill(t->data.begin(), t->data.end(), 0.0);
    const double loss = loss_and_grad(model, train_set, config.gamma, report.alpha, &grad);
    report.step_loss.push_back(loss);
    if (config.eval_every && step % config.eval_every == 0) record(step, loss);
    auto ps = model.params.tensors();
    auto gs = grad.tensors();
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (std::size_t j = 0; j < ps[i]->data.size(); ++j) ps[i]->data[j] -= config.lr * gs[i]->data[j];
  }
  record(config.steps, loss_and_grad(model, train_set, config.gamma, report.alpha, nullptr));
  return report;
}

std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "k must be >= 2");
  if (labels.size() < k) throw Error(ErrorCode::kInvalidArgument, "fewer examples than folds");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  SeededRng rng(seed);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t next = 0;
  for (auto& [label, idx] : by_class) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    // continue the round-robin across classes so fold sizes stay balanced
    for (auto i : idx) folds[next++ % k].push_back(i);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

double nll(std::span<const std::array<double, 3>> logits, std::span<const int> labels, double tau) {
  if (logits.size() != labels.size() || logits.empty())
    throw Error(ErrorCode::kInvalidArgument, "logits and labels must be non-empty and aligned");
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto p = softmax3(logits[i], tau);
    total -= std::log(std::max(p[static_cast<std::size_t>(labels[i])], kProbFloor));
  }
  return total / static_cast<double>(logits.size());
}

double ece(std::span<const std::array<double, 3>> probs, std::span<const int> labels, std::size_t bins) {
  if (probs.size() != labels.size() || probs.empty())
    throw Error(ErrorCode::kInvalidArgument, "probs and labels must be non-empty and aligned");
  if (bins == 0) throw Error(ErrorCode::kInvalidArgument, "bins must be >= 1");
  std::vector<double> conf(bins, 0.0), acc(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const int pred = argmax3(probs[i]);
    const double c = probs[i][static_cast<std::size_t>(pred)];
    const auto b = std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)));
    conf[b] += c;
    acc[b] += pred == labels[i] ? 1.0 : 0.0;
    ++count[b];
  }
  double e = 0;
  for (std::size_t b = 0; b < bins; ++b)
    if (count[b]) e += std::abs(acc[b] - conf[b]);
  return e / static_cast<double>(probs.size());
}

CalibrationResult calibrate(std::span<const std::array<double, 3>> logits, std::span<const int> labels) {
  auto probs_at = [&](double tau) {
    std::vector<std::array<double, 3>> out;
    out.reserve(logits.size());
    for (const auto& z : logits) out.push_back(softmax3(z, tau));
    return out;
  };
  CalibrationResult r;
  r.nll_before = nll(logits, labels, 1.0);
  r.ece_before = ece(probs_at(1.0), labels);

  auto f = [&](double x) { return nll(logits, labels, std::exp(x)); };
  double lo = std::log(0.02), hi = std::log(50.0);
  const double phi = (std::sqrt(5.0) - 1) / 2;
  double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
  double fa = f(a), fb = f(b);
  for (int it = 0; it < 200 && hi - lo > 1e-10; ++it) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - phi * (hi - lo);
      fa = f(a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + phi * (hi - lo);
      fb = f(b);
    }
  }
  r.fitted_tau = std::exp((lo + hi) / 2);
  const double ece_fit = ece(probs_at(r.fitted_tau), labels);
  r.tau = ece_fit <= r.ece_before ? r.fitted_tau : 1.0;
  r.nll_after = nll(logits, labels, r.tau);
  r.ece_after = r.tau == 1.0 ? r.ece_before : ece_fit;
  return r;
}

GradcheckReport gradcheck(const ModelConfig& config, std::uint64_t seed, double step, double floor) {
  Model model;
  model.config = config;
  model.params = init_params(config, seed);
  SeededRng rng(seed ^ 0xA5A5A5A5ULL);
  // push every tensor off its init so biases and queries carry signal
  for (auto* t : model.params.tensors())
    for (auto& x : t->data) x += 0.3 * rng.gaussian();

  std::vector<Example> batch;
  for (int y = 0; y < 3; ++y) {
    Example ex;
    ex.window = Matrix(config.window, kModalities);
    for (auto& x : ex.window.data) x = rng.gaussian();
    ex.statics.resize(config.static_dim);
    ex.semistatics.resize(config.semistatic_dim);
    for (auto& x : ex.statics) x = rng.gaussian();
    for (auto& x : ex.semistatics) x = rng.gaussian();
    ex.label = y;
    batch.push_back(std::move(ex));
  }
  const std::array<double, 3> alpha{0.7, 1.3, 1.1};
  const double gamma = 2.0;

  Params grad = zero_params(config);
  loss_and_grad(model, batch, gamma, alpha, &grad);

  GradcheckReport report;
  auto ps = model.params.tensors();
  auto gs = grad.tensors();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    GradcheckEntry entry;
    entry.tensor = Params::names()[i];
    for (std::size_t j = 0; j < ps[i]->data.size(); ++j) {
      double& x = ps[i]->data[j];
      const double saved = x;
      x = saved + step;
      const double up = loss_and_grad(model, batch, gamma, alpha, nullptr);
      x = saved - step;
      const double down = loss_and_grad(model, batch, gamma, alpha, nullptr);
      x = saved;
      const double fd = (up - down) / (2 * step);
      const double an = gs[i]->data[j];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), floor});
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      entry.max_abs_grad = std::max(entry.max_abs_grad, std::abs(an));
      ++report.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.tensors.push_back(entry);
  }
  return report;
}

// ---- data --------------------------------------------------------------------

RiskClass label_window(const std::vector<std::array<double, kModalities>>& rows) {
  std::size_t low_spo2_severe = 0, low_rr = 0, low_hr = 0, low_temp = 0, low_spo2 = 0;
  for (const auto& r : rows) {
    if (r[1] < 85.0) ++low_spo2_severe;
    if (r[2] < 15.0) ++low_rr;
    if (r[0] < 100.0) ++low_hr;
    if (r[3] < 36.0) ++low_temp;
    if (r[1] < 90.0) ++low_spo2;
  }
  if (low_spo2_severe >= 20 || low_rr >= 15) return RiskClass::kHigh;
  if (low_hr >= 20 || low_temp >= 30 || low_spo2 >= 20) return RiskClass::kModerate;
  return RiskClass::kLow;
}

std::vector<RawWindow> generate_dataset(std::size_t count, std::size_t window, std::uint64_t seed,
                                        std::size_t semistatic_dim) {
  if (window < 8) throw Error(ErrorCode::kInvalidArgument, "window must be >= 8");
  std::vector<RawWindow> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SeededRng rng(splitmix64(seed * 0x100000001B3ULL + i));
    Scenario sc;
    sc.name = "dataset";
    sc.duration_s = static_cast<double>(window) + 1;
    sc.seed = seed + i;
    sc.hr = Curve::constant(rng.uniform(130, 160));
    sc.spo2 = Curve::constant(rng.uniform(95, 99));
    sc.rr = Curve::constant(rng.uniform(35, 55));
    sc.temp = Curve::constant(rng.uniform(36.5, 37.2));
    const double w = static_cast<double>(window);
    const double onset = rng.uniform(0, 0.6 * w);
    switch (i % 5) {
      case 0: break;
      case 1: sc.events.push_back({EventKind::kBradycardia, onset, rng.uniform(40, 0.5 * w), -rng.uniform(45, 65)}); break;
      case 2: sc.events.push_back({EventKind::kHypothermia, onset, rng.uniform(60, 0.5 * w), -rng.uniform(1.0, 1.6)}); break;
      case 3: sc.events.push_back({EventKind::kDesaturation, onset, rng.uniform(40, 0.5 * w), -rng.uniform(13, 20)}); break;
      case 4: sc.events.push_back({EventKind::kApnea, onset, rng.uniform(20, 60), -rng.uniform(32, 42)}); break;
    }
    RawWindow rw;
    rw.rows.reserve(window);
    const DeviceId dev = 1000 + i;
    for (std::size_t s = 0; s < window; ++s) {
      auto smp = generate_sample(sc, dev, sc.start_ms + static_cast<std::int64_t>(s) * 1000);
      rw.rows.push_back({smp.hr / 100.0, smp.spo2 / 100.0, smp.rr / 100.0, smp.temp / 100.0});
    }
    rw.label = label_window(rw.rows);
    rw.statics = {std::round(rng.uniform(18, 42) * 10) / 10, static_cast<double>(rng.below(4)),
                  std::round(rng.uniform(700, 4000))};
    rw.semistatics.resize(semistatic_dim);
    for (auto& x : rw.semistatics) x = std::round(rng.gaussian() * 1000) / 1000;
    out.push_back(std::move(rw));
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<RawWindow>& windows) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& w = windows[i];
    std::string text = fmt::format("label,{}\nstatic,{},{},{}\nsemistatic", risk_class_name(w.label), w.statics[0],
                                   w.statics[1], w.statics[2]);
    for (double x : w.semistatics) text += fmt::format(",{}", x);
    text += "\nhr,spo2,rr,temp\n";
    for (const auto& r : w.rows) text += fmt::format("{:.2f},{:.2f},{:.2f},{:.2f}\n", r[0], r[1], r[2], r[3]);
    const auto path = dir / fmt::format("window_{:06}.csv", i);
    write_file(path.string(), ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
}

namespace {

std::vector<double> parse_csv_numbers(const std::string& line, std::size_t skip, const std::string& where) {
  std::vector<double> out;
  std::stringstream ss(line);
  std::string cell;
  std::size_t idx = 0;
  while (std::getline(ss, cell, ',')) {
    if (idx++ < skip) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kDecode, where + ": bad number '" + cell + "'");
    }
  }
  return out;
}

}  // namespace

std::vector<RawWindow> read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::kNotFound, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RawWindow> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    const std::string where = f.filename().string();
    std::string line;
    RawWindow w;
    if (!std::getline(in, line) || line.rfind("label,", 0) != 0) throw Error(ErrorCode::kDecode, where + ": missing label");
    auto label = parse_risk_class(line.substr(6));
    if (!label) throw Error(ErrorCode::kDecode, where + ": unknown label");
    w.label = *label;
    if (!std::getline(in, line) || line.rfind("static,", 0) != 0) throw Error(ErrorCode::kDecode, where + ": missing static");
    auto st = parse_csv_numbers(line, 1, where);
    if (st.size() != 3) throw Error(ErrorCode::kDecode, where + ": static needs 3 values");
    std::copy(st.begin(), st.end(), w.statics.begin());
    if (!std::getline(in, line) || line.rfind("semistatic", 0) != 0)
      throw Error(ErrorCode::kDecode, where + ": missing semistatic");
    w.semistatics = parse_csv_numbers(line, 1, where);
    if (!std::getline(in, line)) throw Error(ErrorCode::kDecode, where + ": missing column header");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto v = parse_csv_numbers(line, 0, where);
      if (v.size() != kModalities) throw Error(ErrorCode::kDecode, where + ": rows need 4 values");
      w.rows.push_back({v[0], v[1], v[2], v[3]});
    }
    out.push_back(std::move(w));
  }
  return out;
}

Normalization fit_normalization(std::span<const RawWindow> windows) {
  Normalization n;
  std::array<double, kModalities> sum{}, sq{};
  double count = 0;
  for (const auto& w : windows)
    for (const auto& r : w.rows) {
      for (std::size_t m = 0; m < kModalities; ++m) {
        sum[m] += r[m];
        sq[m] += r[m] * r[m];
      }
      count += 1;
    }
  if (count < 2) return n;
  for (std::size_t m = 0; m < kModalities; ++m) {
    n.mean[m] = sum[m] / count;
    n.std[m] = std::max(1e-6, std::sqrt(std::max(0.0, sq[m] / count - n.mean[m] * n.mean[m])));
  }
  return n;
}

std::array<double, 3> normalize_statics(const std::array<double, 3>& raw) {
  return {(raw[0] - 30.0) / 7.0, (raw[1] - 1.5) / 1.2, (raw[2] - 2400.0) / 900.0};
}

Example to_example(const RawWindow& raw, const Normalization& norm) {
  Example ex;
  ex.window = Matrix(raw.rows.size(), kModalities);
  for (std::size_t t = 0; t < raw.rows.size(); ++t)
    for (std::size_t m = 0; m < kModalities; ++m) ex.window(t, m) = (raw.rows[t][m] - norm.mean[m]) / norm.std[m];
  const auto st = normalize_statics(raw.statics);
  ex.statics.assign(st.begin(), st.end());
  ex.semistatics = raw.semistatics;
  ex.label = static_cast<int>(raw.label);
  return ex;
}

// ---- model file ----------------------------------------------------------------

namespace {
constexpr std::array<std::uint8_t, 4> kModelMagic{'N', 'W', 'S', 'M'};
constexpr std::uint32_t kModelVersion = 1;
}  // namespace

Bytes serialize_model(const Model& model) {
  Bytes out;
  ByteWriter w(out);
  w.raw(kModelMagic);
  w.u32(kModelVersion);
  const auto& c = model.config;
  for (std::size_t v : {c.window, c.d_model, c.heads, c.freqs, c.static_dim, c.semistatic_dim})
    w.u32(static_cast<std::uint32_t>(v));
  for (double x : model.norm.mean) w.f64(x);
  for (double x : model.norm.std) w.f64(x);
  w.f64(model.tau);
  w.u32(Params::kTensorCount);
  for (const auto* t : model.params.tensors()) {
    w.u32(static_cast<std::uint32_t>(t->rows));
    w.u32(static_cast<std::uint32_t>(t->cols));
    for (double x : t->data) w.f64(x);
  }
  w.u32(crc32(out));
  return out;
}

Model deserialize_model(ByteView bytes) {
  if (bytes.size() < 8) throw Error(ErrorCode::kTruncated, "model file too short");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4));
  if (crc32(body) != tail.u32()) throw Error(ErrorCode::kBadCrc, "model checksum mismatch");
  ByteReader r(body);
  auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), kModelMagic.begin())) throw Error(ErrorCode::kBadMagic, "not a model file");
  if (r.u32() != kModelVersion) throw Error(ErrorCode::kBadVersion, "unsupported model version");
  Model m;
  m.config.window = r.u32();
  m.config.d_model = r.u32();
  m.config.heads = r.u32();
  m.config.freqs = r.u32();
  m.config.static_dim = r.u32();
  m.config.semistatic_dim = r.u32();
  m.config.validate();
  for (auto& x : m.norm.mean) x = r.f64();
  for (auto& x : m.norm.std) x = r.f64();
  m.tau = r.f64();
  if (!(m.tau > 0)) throw Error(ErrorCode::kDecode, "temperature must be > 0");
  if (r.u32() != Params::kTensorCount) throw Error(ErrorCode::kDecode, "unexpected tensor count");
  m.params = zero_params(m.config);
  for (auto* t : m.params.tensors()) {
    if (r.u32() != t->rows || r.u32() != t->cols) throw Error(ErrorCode::kDecode, "tensor shape does not match dims");
    for (auto& x : t->data) {
      x = r.f64();
      if (!std::isfinite(x)) throw Error(ErrorCode::kDecode, "non-finite parameter");
    }
  }
  if (!r.done()) throw Error(ErrorCode::kDecode, "trailing bytes in model file");
  return m;
}

void save_model(const Model& model, const std::string& path) { write_file(path, serialize_model(model)); }
Model load_model(const std::string& path) { return deserialize_model(read_file(path)); }

// ---- streaming ---------------------------------------------------------------

StreamInference::StreamInference(const Model& model, std::array<double, 3> statics, std::vector<double> semistatics)
    : model_(model), statics_(statics), semistatics_(std::move(semistatics)) {
  if (semistatics_.size() != model.config.semistatic_dim)
    throw Error(ErrorCode::kInvalidArgument, "semistatic width does not match the model");
}

void StreamInference::append(const std::array<double, kModalities>& row, bool stale) {
  rows_.push_back(row);
  stale_.push_back(stale);
  if (stale) ++stale_count_;
  while (rows_.size() > model_.config.window) {
    if (stale_.front()) --stale_count_;
    rows_.pop_front();
    stale_.pop_front();
  }
}

std::optional<StreamInference::Emission> StreamInference::push(const VitalSample& sample) {
  const std::int64_t sec = sample.t_ms >= 0 ? sample.t_ms / 1000 : (sample.t_ms - 999) / 1000;
  const std::array<double, kModalities> row{sample.hr / 100.0, sample.spo2 / 100.0, sample.rr / 100.0,
                                            sample.temp / 100.0};
  if (last_s_ && sec < *last_s_) return std::nullopt;  // late sample
  if (last_s_ && sec == *last_s_) {
    rows_.back() = row;
    last_row_ = row;
    return std::nullopt;
  }
  if (last_s_) {
    const std::int64_t gap = sec - *last_s_ - 1;
    const bool stale = gap > kMaxFillSeconds;
    const std::int64_t fill = std::min<std::int64_t>(gap, static_cast<std::int64_t>(model_.config.window));
    for (std::int64_t i = 0; i < fill; ++i) append(last_row_, stale);
  }
  append(row, false);
  last_row_ = row;
  last_s_ = sec;
  if (rows_.size() < model_.config.window || degraded()) return std::nullopt;

  RawWindow raw;
  raw.rows.assign(rows_.begin(), rows_.end());
  raw.statics = statics_;
  raw.semistatics = semistatics_;
  return Emission{sec, predict(model_, to_example(raw, model_.norm))};
}

}  // namespace neoward::smt
