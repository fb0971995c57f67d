#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "satpref/matrix.hpp"

// Minimal reverse-mode differentiation over dense matrix ops.
namespace satpref::autodiff {

using Var = std::size_t;

class Tape {
 public:
  using Backward = std::function<void(Tape&, Var self)>;

  explicit Tape(bool record = true) : record_(record) {}

  // Leaf that never receives a gradient.
  Var constant(Matrix value);
  // Leaf backed by caller-owned storage; gradients accumulate into grad(v).
  // `value` must outlive the tape.
  Var parameter(const Matrix& value);
  // Result of an op. `backward` reads grad(self) and accumulates into parents.
  Var emit(Matrix value, bool requires_grad, Backward backward);

  const Matrix& value(Var v) const;
  Matrix& grad(Var v);  // zero-filled on first access
  bool has_grad(Var v) const { return nodes_[v].grad_ready; }
  bool requires_grad(Var v) const { return record_ && nodes_[v].requires_grad; }
  bool recording() const { return record_; }

  // Runs recorded ops newest-first. Seed output gradients with grad() first.
  void backward();

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    bool grad_ready = false;
  };
  struct Op {
    Var self;
    Backward backward;
  };
  bool record_;
  std::deque<Node> nodes_;
  std::vector<Op> ops_;
};

// Dense kernels shared by the tape ops and the incremental decoder.
namespace kernels {
void gemm_acc(const Matrix& a, const Matrix& b, Matrix& c);          // c += a * b
void gemm_nt_acc(const Matrix& dc, const Matrix& b, Matrix& da);     // da += dc * b^T
void gemm_tn_acc(const Matrix& a, const Matrix& dc, Matrix& db);     // db += a^T * dc
void row_vec_mat_acc(std::span<const double> x, const Matrix& w, std::span<double> out);  // out += x * w
double gelu(double x);
double gelu_grad(double x);
void log_softmax_row(std::span<const double> x, std::span<double> out);
// One causal attention head for a single query row against keys/values
// 0..last; `probs` receives the attention weights (length last+1).
void attend_row(std::span<const double> q, const Matrix& kv, std::size_t key_offset, std::size_t value_offset,
                std::size_t head_dim, std::size_t last, double scale, std::span<double> probs,
                std::span<double> out);
void layer_norm_row(std::span<const double> x, std::span<const double> gain, std::span<const double> bias,
                    double eps, std::span<double> out, double* mean_out, double* rstd_out);
}  // namespace kernels

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var add_row(Tape& t, Var x, Var bias);  // bias is 1 x cols, broadcast over rows
Var gelu(Tape& t, Var x);
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps);
Var log_softmax(Tape& t, Var x);
Var gather_rows(Tape& t, Var table, std::span<const int> rows);
// Multi-head causal self-attention over packed [Q | K | V] columns.
Var causal_attention(Tape& t, Var qkv, std::size_t heads);

}  // namespace satpref::autodiff
