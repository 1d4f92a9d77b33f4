#include "corfsep/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

namespace corfsep::nn {

namespace {

thread_local bool g_grad_enabled = true;

using ERow = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const ERow>;
using MMap = Eigen::Map<ERow>;

CMap emap(const Tensor& t) { return CMap(t.d.data(), t.rows, t.cols); }
MMap emap(Tensor& t) { return MMap(t.d.data(), t.rows, t.cols); }

Var make_node(Tensor v, std::vector<Var> parents, std::function<void(Node&)> bp) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  if (g_grad_enabled) {
    bool req = false;
    for (const auto& p : parents) req = req || p->requires_grad;
    if (req) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backprop = std::move(bp);
    }
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value)) fail(Errc::shape_mismatch, std::string(op) + ": shape mismatch");
}

void accumulate(Node& parent, const Tensor& g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  for (size_t i = 0; i < g.d.size(); ++i) parent.grad.d[i] += g.d[i];
}

}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

Var make_leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  if (requires_grad) n->zero_grad();
  return n;
}

Var constant(Tensor v) { return make_leaf(std::move(v), false); }

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (size_t i = 0; i < out.d.size(); ++i) out.d[i] += b->value.d[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (size_t i = 0; i < out.d.size(); ++i) out.d[i] -= b->value.d[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    Node& b_ = *self.parents[1];
    if (b_.requires_grad) {
      b_.ensure_grad();
      for (size_t i = 0; i < self.grad.d.size(); ++i) b_.grad.d[i] -= self.grad.d[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (size_t i = 0; i < out.d.size(); ++i) out.d[i] *= b->value.d[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& a_ = *self.parents[0];
    Node& b_ = *self.parents[1];
    if (a_.requires_grad) {
      a_.ensure_grad();
      for (size_t i = 0; i < self.grad.d.size(); ++i) a_.grad.d[i] += self.grad.d[i] * b_.value.d[i];
    }
    if (b_.requires_grad) {
      b_.ensure_grad();
      for (size_t i = 0; i < self.grad.d.size(); ++i) b_.grad.d[i] += self.grad.d[i] * a_.value.d[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (auto& v : out.d) v *= s;
  return make_node(std::move(out), {a}, [s](Node& self) {
    Node& a_ = *self.parents[0];
    if (!a_.requires_grad) return;
    a_.ensure_grad();
    for (size_t i = 0; i < self.grad.d.size(); ++i) a_.grad.d[i] += s * self.grad.d[i];
  });
}

Var add_const(const Var& a, double c) {
  Tensor out = a->value;
  for (auto& v : out.d) v += c;
  return make_node(std::move(out), {a}, [](Node& self) { accumulate(*self.parents[0], self.grad); });
}

Var matmul(const Var& a, const Var& b) {
  if (a->value.cols != b->value.rows) fail(Errc::shape_mismatch, "matmul: inner dims disagree");
  Tensor out(a->value.rows, b->value.cols);
  emap(out).noalias() = emap(a->value) * emap(b->value);
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& a_ = *self.parents[0];
    Node& b_ = *self.parents[1];
    if (a_.requires_grad) {
      a_.ensure_grad();
      emap(a_.grad).noalias() += emap(self.grad) * emap(b_.value).transpose();
    }
    if (b_.requires_grad) {
      b_.ensure_grad();
      emap(b_.grad).noalias() += emap(a_.value).transpose() * emap(self.grad);
    }
  });
}

Var add_rowvec(const Var& x, const Var& r) {
  if (r->value.rows != 1 || r->value.cols != x->value.cols) fail(Errc::shape_mismatch, "add_rowvec");
  Tensor out = x->value;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out.at(i, j) += r->value.d[static_cast<size_t>(j)];
  return make_node(std::move(out), {x, r}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    Node& r_ = *self.parents[1];
    if (r_.requires_grad) {
      r_.ensure_grad();
      for (int i = 0; i < self.grad.rows; ++i)
        for (int j = 0; j < self.grad.cols; ++j) r_.grad.d[static_cast<size_t>(j)] += self.grad.at(i, j);
    }
  });
}

Var mul_rowvec(const Var& x, const Var& r) {
  if (r->value.rows != 1 || r->value.cols != x->value.cols) fail(Errc::shape_mismatch, "mul_rowvec");
  Tensor out = x->value;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out.at(i, j) *= r->value.d[static_cast<size_t>(j)];
  return make_node(std::move(out), {x, r}, [](Node& self) {
    Node& x_ = *self.parents[0];
    Node& r_ = *self.parents[1];
    if (x_.requires_grad) {
      x_.ensure_grad();
      for (int i = 0; i < self.grad.rows; ++i)
        for (int j = 0; j < self.grad.cols; ++j) x_.grad.at(i, j) += self.grad.at(i, j) * r_.value.d[static_cast<size_t>(j)];
    }
    if (r_.requires_grad) {
      r_.ensure_grad();
      for (int i = 0; i < self.grad.rows; ++i)
        for (int j = 0; j < self.grad.cols; ++j) r_.grad.d[static_cast<size_t>(j)] += self.grad.at(i, j) * x_.value.at(i, j);
    }
  });
}

Var add_bscalar(const Var& x, const Var& s) {
  if (s->value.numel() != 1) fail(Errc::shape_mismatch, "add_bscalar: scalar must be 1x1");
  Tensor out = x->value;
  const double sv = s->value.d[0];
  for (auto& v : out.d) v += sv;
  return make_node(std::move(out), {x, s}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    Node& s_ = *self.parents[1];
    if (s_.requires_grad) {
      s_.ensure_grad();
      double g = 0.0;
      for (double v : self.grad.d) g += v;
      s_.grad.d[0] += g;
    }
  });
}

Var mul_bscalar(const Var& x, const Var& s) {
  if (s->value.numel() != 1) fail(Errc::shape_mismatch, "mul_bscalar: scalar must be 1x1");
  Tensor out = x->value;
  const double sv = s->value.d[0];
  for (auto& v : out.d) v *= sv;
  return make_node(std::move(out), {x, s}, [](Node& self) {
    Node& x_ = *self.parents[0];
    Node& s_ = *self.parents[1];
    if (x_.requires_grad) {
      x_.ensure_grad();
      const double sv = s_.value.d[0];
      for (size_t i = 0; i < self.grad.d.size(); ++i) x_.grad.d[i] += sv * self.grad.d[i];
    }
    if (s_.requires_grad) {
      s_.ensure_grad();
      double g = 0.0;
      for (size_t i = 0; i < self.grad.d.size(); ++i) g += self.grad.d[i] * x_.value.d[i];
      s_.grad.d[0] += g;
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.d) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t i = 0; i < self.grad.d.size(); ++i)
      if (x_.value.d[i] > 0.0) x_.grad.d[i] += self.grad.d[i];
  });
}

Var prelu(const Var& x, const Var& slope_row) {
  if (slope_row->value.rows != 1 || slope_row->value.cols != x->value.cols) fail(Errc::shape_mismatch, "prelu");
  Tensor out = x->value;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) {
      double v = out.at(i, j);
      if (v < 0.0) out.at(i, j) = v * slope_row->value.d[static_cast<size_t>(j)];
    }
  return make_node(std::move(out), {x, slope_row}, [](Node& self) {
    Node& x_ = *self.parents[0];
    Node& a_ = *self.parents[1];
    if (x_.requires_grad) {
      x_.ensure_grad();
      for (int i = 0; i < self.grad.rows; ++i)
        for (int j = 0; j < self.grad.cols; ++j) {
          const double xv = x_.value.at(i, j);
          x_.grad.at(i, j) += self.grad.at(i, j) * (xv > 0.0 ? 1.0 : a_.value.d[static_cast<size_t>(j)]);
        }
    }
    if (a_.requires_grad) {
      a_.ensure_grad();
      for (int i = 0; i < self.grad.rows; ++i)
        for (int j = 0; j < self.grad.cols; ++j) {
          const double xv = x_.value.at(i, j);
          if (xv <= 0.0) a_.grad.d[static_cast<size_t>(j)] += self.grad.at(i, j) * xv;
        }
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.d) v = 1.0 / (1.0 + std::exp(-v));
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t i = 0; i < self.grad.d.size(); ++i) {
      const double y = self.value.d[i];
      x_.grad.d[i] += self.grad.d[i] * y * (1.0 - y);
    }
  });
}

Var tanh_(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.d) v = std::tanh(v);
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t i = 0; i < self.grad.d.size(); ++i) {
      const double y = self.value.d[i];
      x_.grad.d[i] += self.grad.d[i] * (1.0 - y * y);
    }
  });
}

Var sqrt_(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.d) v = std::sqrt(v);
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t i = 0; i < self.grad.d.size(); ++i) x_.grad.d[i] += self.grad.d[i] * 0.5 / self.value.d[i];
  });
}

Var log_(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.d) v = std::log(v);
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t i = 0; i < self.grad.d.size(); ++i) x_.grad.d[i] += self.grad.d[i] / x_.value.d[i];
  });
}

Var reciprocal(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.d) v = 1.0 / v;
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t i = 0; i < self.grad.d.size(); ++i) {
      const double y = self.value.d[i];
      x_.grad.d[i] -= self.grad.d[i] * y * y;
    }
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x->value.d) s += v;
  return make_node(Tensor::scalar(s), {x}, [](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    const double g = self.grad.d[0];
    for (auto& v : x_.grad.d) v += g;
  });
}

Var sum_rows(const Var& x) {
  Tensor out(1, x->value.cols);
  for (int i = 0; i < x->value.rows; ++i)
    for (int j = 0; j < x->value.cols; ++j) out.d[static_cast<size_t>(j)] += x->value.at(i, j);
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (int i = 0; i < x_.grad.rows; ++i)
      for (int j = 0; j < x_.grad.cols; ++j) x_.grad.at(i, j) += self.grad.d[static_cast<size_t>(j)];
  });
}

Var max_rows(const Var& x) {
  if (x->value.rows < 1) fail(Errc::empty_input, "max_rows of empty matrix");
  Tensor out(1, x->value.cols);
  std::vector<int> arg(static_cast<size_t>(x->value.cols), 0);
  for (int j = 0; j < x->value.cols; ++j) {
    double best = x->value.at(0, j);
    for (int i = 1; i < x->value.rows; ++i)
      if (x->value.at(i, j) > best) {
        best = x->value.at(i, j);
        arg[static_cast<size_t>(j)] = i;
      }
    out.d[static_cast<size_t>(j)] = best;
  }
  return make_node(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (int j = 0; j < self.grad.cols; ++j) x_.grad.at(arg[static_cast<size_t>(j)], j) += self.grad.d[static_cast<size_t>(j)];
  });
}

Var slice_cols(const Var& x, int c0, int c1) {
  if (c0 < 0 || c1 > x->value.cols || c0 >= c1) fail(Errc::shape_mismatch, "slice_cols bounds");
  Tensor out(x->value.rows, c1 - c0);
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out.at(i, j) = x->value.at(i, c0 + j);
  return make_node(std::move(out), {x}, [c0](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (int i = 0; i < self.grad.rows; ++i)
      for (int j = 0; j < self.grad.cols; ++j) x_.grad.at(i, c0 + j) += self.grad.at(i, j);
  });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a->value.rows != b->value.rows) fail(Errc::shape_mismatch, "concat_cols rows disagree");
  Tensor out(a->value.rows, a->value.cols + b->value.cols);
  for (int i = 0; i < out.rows; ++i) {
    for (int j = 0; j < a->value.cols; ++j) out.at(i, j) = a->value.at(i, j);
    for (int j = 0; j < b->value.cols; ++j) out.at(i, a->value.cols + j) = b->value.at(i, j);
  }
  const int ac = a->value.cols;
  return make_node(std::move(out), {a, b}, [ac](Node& self) {
    Node& a_ = *self.parents[0];
    Node& b_ = *self.parents[1];
    if (a_.requires_grad) {
      a_.ensure_grad();
      for (int i = 0; i < self.grad.rows; ++i)
        for (int j = 0; j < ac; ++j) a_.grad.at(i, j) += self.grad.at(i, j);
    }
    if (b_.requires_grad) {
      b_.ensure_grad();
      for (int i = 0; i < self.grad.rows; ++i)
        for (int j = 0; j < b_.grad.cols; ++j) b_.grad.at(i, j) += self.grad.at(i, ac + j);
    }
  });
}

Var gather_rows(const Var& x, std::vector<int> idx) {
  Tensor out(static_cast<int>(idx.size()), x->value.cols);
  for (size_t i = 0; i < idx.size(); ++i) {
    const int src = idx[i];
    if (src < 0) continue;
    if (src >= x->value.rows) fail(Errc::shape_mismatch, "gather_rows index out of range");
    for (int j = 0; j < out.cols; ++j) out.at(static_cast<int>(i), j) = x->value.at(src, j);
  }
  return make_node(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t i = 0; i < idx.size(); ++i) {
      const int dst = idx[i];
      if (dst < 0) continue;
      for (int j = 0; j < self.grad.cols; ++j) x_.grad.at(dst, j) += self.grad.at(static_cast<int>(i), j);
    }
  });
}

Var scatter_add_rows(const Var& x, std::vector<int> dest, int out_rows) {
  if (dest.size() != static_cast<size_t>(x->value.rows)) fail(Errc::shape_mismatch, "scatter_add_rows index size");
  Tensor out(out_rows, x->value.cols);
  for (size_t i = 0; i < dest.size(); ++i) {
    const int dst = dest[i];
    if (dst < 0) continue;
    if (dst >= out_rows) fail(Errc::shape_mismatch, "scatter_add_rows index out of range");
    for (int j = 0; j < out.cols; ++j) out.at(dst, j) += x->value.at(static_cast<int>(i), j);
  }
  return make_node(std::move(out), {x}, [dest = std::move(dest)](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t i = 0; i < dest.size(); ++i) {
      const int src = dest[i];
      if (src < 0) continue;
      for (int j = 0; j < self.grad.cols; ++j) x_.grad.at(static_cast<int>(i), j) += self.grad.at(src, j);
    }
  });
}

Var stack_rows(const std::vector<Var>& parts, const std::vector<std::vector<int>>& dest, int out_rows) {
  if (parts.empty() || parts.size() != dest.size()) fail(Errc::shape_mismatch, "stack_rows arity");
  const int cols = parts[0]->value.cols;
  Tensor out(out_rows, cols);
  for (size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p]->value;
    if (v.cols != cols || dest[p].size() != static_cast<size_t>(v.rows)) fail(Errc::shape_mismatch, "stack_rows part shape");
    for (size_t b = 0; b < dest[p].size(); ++b) {
      const int dst = dest[p][b];
      if (dst < 0 || dst >= out_rows) fail(Errc::shape_mismatch, "stack_rows index out of range");
      for (int j = 0; j < cols; ++j) out.at(dst, j) += v.at(static_cast<int>(b), j);
    }
  }
  std::vector<Var> ps = parts;
  return make_node(std::move(out), std::move(ps), [dest](Node& self) {
    for (size_t p = 0; p < self.parents.size(); ++p) {
      Node& part = *self.parents[p];
      if (!part.requires_grad) continue;
      part.ensure_grad();
      for (size_t b = 0; b < dest[p].size(); ++b) {
        const int src = dest[p][b];
        for (int j = 0; j < self.grad.cols; ++j) part.grad.at(static_cast<int>(b), j) += self.grad.at(src, j);
      }
    }
  });
}

Var rows_scale(const Var& x, std::vector<double> s) {
  if (s.size() != static_cast<size_t>(x->value.rows)) fail(Errc::shape_mismatch, "rows_scale size");
  Tensor out = x->value;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out.at(i, j) *= s[static_cast<size_t>(i)];
  return make_node(std::move(out), {x}, [s = std::move(s)](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (int i = 0; i < self.grad.rows; ++i)
      for (int j = 0; j < self.grad.cols; ++j) x_.grad.at(i, j) += self.grad.at(i, j) * s[static_cast<size_t>(i)];
  });
}

Var gather_elems(const Var& x, std::vector<int> idx, int out_rows, int out_cols) {
  if (x->value.rows != 1) fail(Errc::shape_mismatch, "gather_elems expects a 1xL source");
  if (idx.size() != static_cast<size_t>(out_rows) * out_cols) fail(Errc::shape_mismatch, "gather_elems index size");
  Tensor out(out_rows, out_cols);
  for (size_t k = 0; k < idx.size(); ++k) {
    const int src = idx[k];
    if (src < 0) continue;
    if (src >= x->value.cols) fail(Errc::shape_mismatch, "gather_elems index out of range");
    out.d[k] = x->value.d[static_cast<size_t>(src)];
  }
  return make_node(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t k = 0; k < idx.size(); ++k) {
      const int dst = idx[k];
      if (dst >= 0) x_.grad.d[static_cast<size_t>(dst)] += self.grad.d[k];
    }
  });
}

Var scatter_add_elems(const Var& x, std::vector<int> idx, int out_len) {
  if (idx.size() != x->value.d.size()) fail(Errc::shape_mismatch, "scatter_add_elems index size");
  Tensor out(1, out_len);
  for (size_t k = 0; k < idx.size(); ++k) {
    const int dst = idx[k];
    if (dst < 0) continue;
    if (dst >= out_len) fail(Errc::shape_mismatch, "scatter_add_elems index out of range");
    out.d[static_cast<size_t>(dst)] += x->value.d[k];
  }
  return make_node(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Node& x_ = *self.parents[0];
    if (!x_.requires_grad) return;
    x_.ensure_grad();
    for (size_t k = 0; k < idx.size(); ++k) {
      const int src = idx[k];
      if (src >= 0) x_.grad.d[k] += self.grad.d[static_cast<size_t>(src)];
    }
  });
}

void backward(const Var& loss) {
  if (loss->value.numel() != 1) fail(Errc::shape_mismatch, "backward expects a scalar loss");
  if (!loss->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    Node* n = top.first;
    if (top.second < n->parents.size()) {
      Node* p = n->parents[top.second].get();
      ++top.second;
      if (p->requires_grad && !p->parents.empty() && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->grad.d[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    n->ensure_grad();
    if (n->backprop) n->backprop(*n);
  }
}

void release_graph(const Var& root) {
  if (!root) return;
  std::vector<Var> pending;
  pending.reserve(64);
  std::vector<Var> parents = std::move(root->parents);
  root->parents.clear();
  root->backprop = nullptr;
  for (auto& p : parents) pending.push_back(std::move(p));
  while (!pending.empty()) {
    Var n = std::move(pending.back());
    pending.pop_back();
    if (!n) continue;
    for (auto& p : n->parents) pending.push_back(std::move(p));
    n->parents.clear();
    n->backprop = nullptr;
  }
}

}  // namespace corfsep::nn
