#include "satpref/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace satpref::autodiff {

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Matrix value) {
  Node& n = nodes_.emplace_back();
  n.owned = std::move(value);
  return nodes_.size() - 1;
}

Var Tape::parameter(const Matrix& value) {
  Node& n = nodes_.emplace_back();
  n.external = &value;
  n.requires_grad = record_;
  return nodes_.size() - 1;
}

Var Tape::emit(Matrix value, bool requires_grad, Backward backward) {
  Node& n = nodes_.emplace_back();
  n.owned = std::move(value);
  n.requires_grad = record_ && requires_grad;
  const Var id = nodes_.size() - 1;
  if (n.requires_grad) ops_.push_back({id, std::move(backward)});
  return id;
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_[v];
  return n.external ? *n.external : n.owned;
}

Matrix& Tape::grad(Var v) {
  Node& n = nodes_[v];
  if (!n.grad_ready) {
    const Matrix& val = n.external ? *n.external : n.owned;
    n.grad = Matrix(val.rows, val.cols);
    n.grad_ready = true;
  }
  return n.grad;
}

void Tape::backward() {
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    if (!nodes_[it->self].grad_ready) continue;  // output unused downstream
    it->backward(*this, it->self);
  }
}

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

void gemm_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t m = a.rows, k = a.cols, n = b.cols;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data.data() + i * n;
    const double* arow = a.data.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_acc(const Matrix& dc, const Matrix& b, Matrix& da) {
  const std::size_t m = dc.rows, n = dc.cols, k = b.rows;
  for (std::size_t i = 0; i < m; ++i) {
    const double* drow = dc.data.data() + i * n;
    double* arow = da.data.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b.data.data() + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += drow[j] * brow[j];
      arow[p] += s;
    }
  }
}

void gemm_tn_acc(const Matrix& a, const Matrix& dc, Matrix& db) {
  const std::size_t m = a.rows, k = a.cols, n = dc.cols;
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data.data() + i * k;
    const double* drow = dc.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* brow = db.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) brow[j] += av * drow[j];
    }
  }
}

void row_vec_mat_acc(std::span<const double> x, const Matrix& w, std::span<double> out) {
  const std::size_t n = w.cols;
  for (std::size_t p = 0; p < w.rows; ++p) {
    const double xv = x[p];
    if (xv == 0.0) continue;
    const double* wrow = w.data.data() + p * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += xv * wrow[j];
  }
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void log_softmax_row(std::span<const double> x, std::span<double> out) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] - lse;
}

void attend_row(std::span<const double> q, const Matrix& kv, std::size_t key_offset, std::size_t value_offset,
                std::size_t head_dim, std::size_t last, double scale, std::span<double> probs,
                std::span<double> out) {
  double mx = -INFINITY;
  for (std::size_t j = 0; j <= last; ++j) {
    const double* krow = kv.data.data() + j * kv.cols + key_offset;
    double s = 0.0;
    for (std::size_t c = 0; c < head_dim; ++c) s += q[c] * krow[c];
    s *= scale;
    probs[j] = s;
    mx = std::max(mx, s);
  }
  double z = 0.0;
  for (std::size_t j = 0; j <= last; ++j) {
    probs[j] = std::exp(probs[j] - mx);
    z += probs[j];
  }
  for (std::size_t j = 0; j <= last; ++j) probs[j] /= z;
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t j = 0; j <= last; ++j) {
    const double* vrow = kv.data.data() + j * kv.cols + value_offset;
    const double p = probs[j];
    for (std::size_t c = 0; c < head_dim; ++c) out[c] += p * vrow[c];
  }
}

void layer_norm_row(std::span<const double> x, std::span<const double> gain, std::span<const double> bias,
                    double eps, std::span<double> out, double* mean_out, double* rstd_out) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + eps);
  for (std::size_t j = 0; j < n; ++j) out[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Ops

namespace {

void require(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + msg);
}

std::string shape(const Matrix& m) { return std::to_string(m.rows) + "x" + std::to_string(m.cols); }

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  require(A.cols == B.rows, "matmul", shape(A) + " * " + shape(B));
  Matrix C(A.rows, B.cols);
  kernels::gemm_acc(A, B, C);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.emit(std::move(C), rg, [a, b](Tape& t, Var self) {
    const Matrix& dC = t.grad(self);
    if (t.requires_grad(a)) kernels::gemm_nt_acc(dC, t.value(b), t.grad(a));
    if (t.requires_grad(b)) kernels::gemm_tn_acc(t.value(a), dC, t.grad(b));
  });
}

Var add(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  require(A.same_shape(B), "add", shape(A) + " + " + shape(B));
  Matrix C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.emit(std::move(C), rg, [a, b](Tape& t, Var self) {
    const Matrix& dC = t.grad(self);
    for (Var p : {a, b}) {
      if (!t.requires_grad(p)) continue;
      Matrix& g = t.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += dC.data[i];
    }
  });
}

Var add_row(Tape& t, Var x, Var bias) {
  const Matrix& X = t.value(x);
  const Matrix& B = t.value(bias);
  require(B.rows == 1 && B.cols == X.cols, "add_row", shape(X) + " + " + shape(B));
  Matrix Y = X;
  for (std::size_t i = 0; i < Y.rows; ++i) {
    for (std::size_t j = 0; j < Y.cols; ++j) Y(i, j) += B.data[j];
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(bias);
  return t.emit(std::move(Y), rg, [x, bias](Tape& t, Var self) {
    const Matrix& dY = t.grad(self);
    if (t.requires_grad(x)) {
      Matrix& g = t.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += dY.data[i];
    }
    if (t.requires_grad(bias)) {
      Matrix& g = t.grad(bias);
      for (std::size_t i = 0; i < dY.rows; ++i) {
        for (std::size_t j = 0; j < dY.cols; ++j) g.data[j] += dY(i, j);
      }
    }
  });
}

Var gelu(Tape& t, Var x) {
  const Matrix& X = t.value(x);
  Matrix Y(X.rows, X.cols);
  for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = kernels::gelu(X.data[i]);
  return t.emit(std::move(Y), t.requires_grad(x), [x](Tape& t, Var self) {
    const Matrix& dY = t.grad(self);
    const Matrix& X = t.value(x);
    Matrix& g = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += dY.data[i] * kernels::gelu_grad(X.data[i]);
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Matrix& X = t.value(x);
  const Matrix& G = t.value(gain);
  const Matrix& B = t.value(bias);
  require(G.rows == 1 && G.cols == X.cols && B.same_shape(G), "layer_norm", shape(X) + " with " + shape(G));
  Matrix Y(X.rows, X.cols);
  std::vector<double> rstd(X.rows), mean(X.rows);
  for (std::size_t i = 0; i < X.rows; ++i) {
    kernels::layer_norm_row(X.row(i), G.row(0), B.row(0), eps, Y.row(i), &mean[i], &rstd[i]);
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
  return t.emit(std::move(Y), rg,
                [x, gain, bias, mean = std::move(mean), rstd = std::move(rstd)](Tape& t, Var self) {
                  const Matrix& dY = t.grad(self);
                  const Matrix& X = t.value(x);
                  const Matrix& G = t.value(gain);
                  const std::size_t n = X.cols;
                  std::vector<double> xhat(n), dxhat(n);
                  for (std::size_t i = 0; i < X.rows; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      xhat[j] = (X(i, j) - mean[i]) * rstd[i];
                      dxhat[j] = dY(i, j) * G.data[j];
                      m1 += dxhat[j];
                      m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= static_cast<double>(n);
                    m2 /= static_cast<double>(n);
                    if (t.requires_grad(x)) {
                      Matrix& gx = t.grad(x);
                      for (std::size_t j = 0; j < n; ++j) gx(i, j) += rstd[i] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                    if (t.requires_grad(gain)) {
                      Matrix& gg = t.grad(gain);
                      for (std::size_t j = 0; j < n; ++j) gg.data[j] += dY(i, j) * xhat[j];
                    }
                    if (t.requires_grad(bias)) {
                      Matrix& gb = t.grad(bias);
                      for (std::size_t j = 0; j < n; ++j) gb.data[j] += dY(i, j);
                    }
                  }
                });
}

Var log_softmax(Tape& t, Var x) {
  const Matrix& X = t.value(x);
  Matrix Y(X.rows, X.cols);
  for (std::size_t i = 0; i < X.rows; ++i) kernels::log_softmax_row(X.row(i), Y.row(i));
  return t.emit(std::move(Y), t.requires_grad(x), [x](Tape& t, Var self) {
    const Matrix& dY = t.grad(self);
    const Matrix& Y = t.value(self);
    Matrix& g = t.grad(x);
    for (std::size_t i = 0; i < Y.rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < Y.cols; ++j) s += dY(i, j);
      if (s == 0.0) {
        for (std::size_t j = 0; j < Y.cols; ++j) g(i, j) += dY(i, j);
        continue;
      }
      for (std::size_t j = 0; j < Y.cols; ++j) g(i, j) += dY(i, j) - std::exp(Y(i, j)) * s;
    }
  });
}

Var gather_rows(Tape& t, Var table, std::span<const int> rows) {
  const Matrix& W = t.value(table);
  Matrix Y(rows.size(), W.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && static_cast<std::size_t>(rows[i]) < W.rows, "gather_rows",
            "row " + std::to_string(rows[i]) + " outside table of " + std::to_string(W.rows));
    std::copy_n(W.row(static_cast<std::size_t>(rows[i])).data(), W.cols, Y.row(i).data());
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return t.emit(std::move(Y), t.requires_grad(table), [table, idx = std::move(idx)](Tape& t, Var self) {
    const Matrix& dY = t.grad(self);
    Matrix& g = t.grad(table);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = g.row(static_cast<std::size_t>(idx[i]));
      auto src = dY.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

Var causal_attention(Tape& t, Var qkv, std::size_t heads) {
  const Matrix& QKV = t.value(qkv);
  require(QKV.cols % 3 == 0, "causal_attention", "packed width " + std::to_string(QKV.cols));
  const std::size_t d = QKV.cols / 3;
  require(heads > 0 && d % heads == 0, "causal_attention", "width not divisible by heads");
  const std::size_t hd = d / heads;
  const std::size_t T = QKV.rows;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix out(T, d);
  // probs[h] is T x T, lower triangle used.
  std::vector<Matrix> probs(heads, Matrix(T, T));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < T; ++i) {
      auto q = QKV.row(i).subspan(h * hd, hd);
      kernels::attend_row(q, QKV, d + h * hd, 2 * d + h * hd, hd, i, scale, probs[h].row(i).subspan(0, i + 1),
                          out.row(i).subspan(h * hd, hd));
    }
  }
  return t.emit(std::move(out), t.requires_grad(qkv),
                [qkv, heads, hd, d, scale, probs = std::move(probs)](Tape& t, Var self) {
                  const Matrix& dOut = t.grad(self);
                  const Matrix& QKV = t.value(qkv);
                  Matrix& g = t.grad(qkv);
                  const std::size_t T = QKV.rows;
                  std::vector<double> dp(T);
                  for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
                    for (std::size_t i = 0; i < T; ++i) {
                      const double* dout = dOut.data.data() + i * dOut.cols + h * hd;
                      const double* p = probs[h].data.data() + i * T;
                      double weighted = 0.0;
                      for (std::size_t j = 0; j <= i; ++j) {
                        const double* v = QKV.data.data() + j * QKV.cols + vo;
                        double s = 0.0;
                        for (std::size_t c = 0; c < hd; ++c) s += dout[c] * v[c];
                        dp[j] = s;
                        weighted += p[j] * s;
                        double* gv = g.data.data() + j * g.cols + vo;
                        for (std::size_t c = 0; c < hd; ++c) gv[c] += p[j] * dout[c];
                      }
                      const double* q = QKV.data.data() + i * QKV.cols + qo;
                      double* gq = g.data.data() + i * g.cols + qo;
                      for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = p[j] * (dp[j] - weighted) * scale;
                        if (ds == 0.0) continue;
                        const double* k = QKV.data.data() + j * QKV.cols + ko;
                        double* gk = g.data.data() + j * g.cols + ko;
                        for (std::size_t c = 0; c < hd; ++c) {
                          gq[c] += ds * k[c];
                          gk[c] += ds * q[c];
                        }
                      }
                    }
                  }
                });
}

}  // namespace satpref::autodiff
