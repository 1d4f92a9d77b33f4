#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "corfsep/tensor.hpp"

namespace corfsep::nn {

// Reverse-mode tape node. Ops allocate nodes; backward() walks the DAG in
// reverse topological order. Interior gradients live only as long as the
// graph; leaf gradients accumulate until zeroed by the optimizer.
class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Tensor value;
  Tensor grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  // Reads this->grad / parent values, accumulates into parent grads.
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.rows != value.rows || grad.cols != value.cols) grad = Tensor::zeros(value.rows, value.cols);
  }
  void zero_grad() { grad = Tensor::zeros(value.rows, value.cols); }
};

// Thread-local switch; when off, ops compute values but record no tape.
struct GradMode {
  static bool enabled();
  static void set(bool on);
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }

 private:
  bool prev_;
};

Var make_leaf(Tensor v, bool requires_grad);
Var constant(Tensor v);

// elementwise on equal shapes
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
// affine with plain doubles
Var scale(const Var& a, double s);
Var add_const(const Var& a, double c);

Var matmul(const Var& a, const Var& b);

// broadcast a 1xC row across rows of an RxC matrix
Var add_rowvec(const Var& x, const Var& r);
Var mul_rowvec(const Var& x, const Var& r);
// broadcast a 1x1 scalar Var over every element
Var add_bscalar(const Var& x, const Var& s);
Var mul_bscalar(const Var& x, const Var& s);

Var relu(const Var& x);
Var prelu(const Var& x, const Var& slope_row);
Var sigmoid(const Var& x);
Var tanh_(const Var& x);
Var sqrt_(const Var& x);
Var log_(const Var& x);
Var reciprocal(const Var& x);

Var sum_all(const Var& x);   // -> 1x1
Var sum_rows(const Var& x);  // -> 1xC (sum over rows)
Var max_rows(const Var& x);  // -> 1xC (max over rows)

Var slice_cols(const Var& x, int c0, int c1);
Var concat_cols(const Var& a, const Var& b);

// Row reindexing. idx[i] in [-1, x.rows): -1 yields a zero row.
Var gather_rows(const Var& x, std::vector<int> idx);
// out[dest[i]] += x.row(i); dest[i] == -1 drops a row. Overlaps accumulate.
Var scatter_add_rows(const Var& x, std::vector<int> dest, int out_rows);
// Assembles a matrix from parts; parts[p].row(b) lands at dest[p][b].
Var stack_rows(const std::vector<Var>& parts, const std::vector<std::vector<int>>& dest, int out_rows);
// out.row(i) scaled by s[i] (constant per-row factors)
Var rows_scale(const Var& x, std::vector<double> s);

// Element reindexing from a 1xL row: out(i,j) = x[idx[i*cols+j]], -1 -> 0.
Var gather_elems(const Var& x, std::vector<int> idx, int out_rows, int out_cols);
// Overlap-add back to a 1xL row: out[idx[i*cols+j]] += x(i,j), -1 dropped.
Var scatter_add_elems(const Var& x, std::vector<int> idx, int out_len);

void backward(const Var& loss);

// Detaches every interior node reachable from root. Long graphs form deep
// shared_ptr chains whose recursive destruction can exhaust the stack.
void release_graph(const Var& root);

}  // namespace corfsep::nn
