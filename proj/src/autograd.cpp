#include "stvg/autograd.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "stvg/kernels.hpp"

namespace stvg::ag {
namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_error(const char* op, const Node& a, const Node& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch [" + std::to_string(a.rows) +
                              "," + std::to_string(a.cols) + "] vs [" + std::to_string(b.rows) +
                              "," + std::to_string(b.cols) + "]");
}

Var make_node(int rows, int cols, std::initializer_list<Var> parents) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        n->requires_grad = true;
        break;
      }
    }
    if (n->requires_grad) n->parents.assign(parents.begin(), parents.end());
  }
  return n;
}

Var make_node_v(int rows, int cols, const std::vector<Var>& parents) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        n->requires_grad = true;
        break;
      }
    }
    if (n->requires_grad) n->parents = parents;
  }
  return n;
}

// Gradient buffer of parent i, or nullptr when it does not need one.
double* pgrad(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  if (!p || !p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(int rows, int cols, std::vector<double> values) {
  if (values.size() != static_cast<std::size_t>(rows) * cols)
    throw std::invalid_argument("constant: value count does not match shape");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(values);
  return n;
}

Var zeros(int rows, int cols) {
  return constant(rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0));
}

Var parameter(int rows, int cols, std::vector<double> values) {
  Var n = constant(rows, cols, std::move(values));
  n->requires_grad = true;
  return n;
}

void backward(const Var& root) {
  if (root->size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a->cols != b->rows) shape_error("matmul", *a, *b);
  const int n = a->rows, k = a->cols, m = b->cols;
  Var out = make_node(n, m, {a, b});
  kernels::active().gemm_nn(a->value.data(), b->value.data(), out->value.data(), n, k, m);
  if (out->requires_grad) {
    out->backward_fn = [n, k, m](Node& self) {
      const auto& K = kernels::active();
      const Node& A = *self.parents[0];
      const Node& B = *self.parents[1];
      if (double* ga = pgrad(self, 0)) K.gemm_nt(self.grad.data(), B.value.data(), ga, n, m, k);
      if (double* gb = pgrad(self, 1)) K.gemm_tn(A.value.data(), self.grad.data(), gb, n, k, m);
    };
  }
  return out;
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x->cols != w->rows) shape_error("linear", *x, *w);
  if (b && (b->rows != 1 || b->cols != w->cols)) shape_error("linear(bias)", *w, *b);
  const int n = x->rows, k = x->cols, m = w->cols;
  Var out = make_node(n, m, {x, w, b});
  if (b) {
    for (int i = 0; i < n; ++i) std::copy(b->value.begin(), b->value.end(), out->row(i));
  }
  kernels::active().gemm_nn(x->value.data(), w->value.data(), out->value.data(), n, k, m);
  if (out->requires_grad) {
    out->backward_fn = [n, k, m](Node& self) {
      const auto& K = kernels::active();
      const Node& X = *self.parents[0];
      const Node& W = *self.parents[1];
      if (double* gx = pgrad(self, 0)) K.gemm_nt(self.grad.data(), W.value.data(), gx, n, m, k);
      if (double* gw = pgrad(self, 1)) K.gemm_tn(X.value.data(), self.grad.data(), gw, n, k, m);
      if (self.parents[2]) {
        if (double* gb = pgrad(self, 2)) {
          for (int i = 0; i < n; ++i) K.axpy(1.0, self.grad.data() + std::size_t(i) * m, gb, m);
        }
      }
    };
  }
  return out;
}

Var transpose(const Var& a) {
  const int r = a->rows, c = a->cols;
  Var out = make_node(c, r, {a});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out->at(j, i) = a->at(i, j);
  if (out->requires_grad) {
    out->backward_fn = [r, c](Node& self) {
      if (double* ga = pgrad(self, 0))
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) ga[i * c + j] += self.grad[std::size_t(j) * r + i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  if (a->rows != b->rows || a->cols != b->cols) shape_error("add", *a, *b);
  Var out = make_node(a->rows, a->cols, {a, b});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] + b->value[i];
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      for (std::size_t p = 0; p < 2; ++p)
        if (double* g = pgrad(self, p))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

Var sub(const Var& a, const Var& b) {
  if (a->rows != b->rows || a->cols != b->cols) shape_error("sub", *a, *b);
  Var out = make_node(a->rows, a->cols, {a, b});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] - b->value[i];
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      if (double* g = pgrad(self, 1))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    };
  }
  return out;
}

Var mul(const Var& a, const Var& b) {
  if (a->rows != b->rows || a->cols != b->cols) shape_error("mul", *a, *b);
  Var out = make_node(a->rows, a->cols, {a, b});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] * b->value[i];
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      const Node& A = *self.parents[0];
      const Node& B = *self.parents[1];
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * B.value[i];
      if (double* g = pgrad(self, 1))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * A.value[i];
    };
  }
  return out;
}

Var scale(const Var& a, double s) {
  Var out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] * s;
  if (out->requires_grad) {
    out->backward_fn = [s](Node& self) {
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    };
  }
  return out;
}

Var add_row(const Var& a, const Var& row) {
  if (row->rows != 1 || row->cols != a->cols) shape_error("add_row", *a, *row);
  const int r = a->rows, c = a->cols;
  Var out = make_node(r, c, {a, row});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out->at(i, j) = a->at(i, j) + row->value[j];
  if (out->requires_grad) {
    out->backward_fn = [r, c](Node& self) {
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      if (double* g = pgrad(self, 1))
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) g[j] += self.grad[std::size_t(i) * c + j];
    };
  }
  return out;
}

Var relu(const Var& a) {
  Var out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = std::max(a->value[i], 0.0);
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      const Node& A = *self.parents[0];
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (A.value[i] > 0.0) g[i] += self.grad[i];
    };
  }
  return out;
}

Var sigmoid(const Var& a) {
  Var out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = 1.0 / (1.0 + std::exp(-a->value[i]));
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double s = self.value[i];
          g[i] += self.grad[i] * s * (1.0 - s);
        }
    };
  }
  return out;
}

Var inverse_sigmoid(const Var& a, double eps) {
  Var out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->size(); ++i) {
    const double x = std::clamp(a->value[i], 0.0, 1.0);
    const double x1 = std::max(x, eps);
    const double x2 = std::max(1.0 - x, eps);
    out->value[i] = std::log(x1 / x2);
  }
  if (out->requires_grad) {
    out->backward_fn = [eps](Node& self) {
      const Node& A = *self.parents[0];
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double x = A.value[i];
          if (x <= 0.0 || x >= 1.0) continue;
          double d = 0.0;
          if (x > eps) d += 1.0 / x;
          if (1.0 - x > eps) d += 1.0 / (1.0 - x);
          g[i] += self.grad[i] * d;
        }
    };
  }
  return out;
}

Var log_floor(const Var& a, double floor) {
  Var out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = std::log(std::max(a->value[i], floor));
  if (out->requires_grad) {
    out->backward_fn = [floor](Node& self) {
      const Node& A = *self.parents[0];
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (A.value[i] > floor) g[i] += self.grad[i] / A.value[i];
    };
  }
  return out;
}

Var abs(const Var& a) {
  Var out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = std::abs(a->value[i]);
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      const Node& A = *self.parents[0];
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (A.value[i] > 0.0) g[i] += self.grad[i];
          else if (A.value[i] < 0.0) g[i] -= self.grad[i];
        }
    };
  }
  return out;
}

Var clamp(const Var& a, double lo, double hi) {
  Var out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = std::clamp(a->value[i], lo, hi);
  if (out->requires_grad) {
    out->backward_fn = [lo, hi](Node& self) {
      const Node& A = *self.parents[0];
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (A.value[i] >= lo && A.value[i] <= hi) g[i] += self.grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------

Var sum(const Var& a) {
  Var out = make_node(1, 1, {a});
  double s = 0.0;
  for (double v : a->value) s += v;
  out->value[0] = s;
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      if (double* g = pgrad(self, 0)) {
        const std::size_t n = self.parents[0]->size();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
      }
    };
  }
  return out;
}

Var mean(const Var& a) {
  if (a->size() == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a->size()));
}

Var softmax_rows(const Var& a) {
  const int r = a->rows, c = a->cols;
  Var out = make_node(r, c, {a});
  for (int i = 0; i < r; ++i) {
    const double* x = a->row(i);
    double* y = out->row(i);
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (int j = 0; j < c; ++j) y[j] /= z;
  }
  if (out->requires_grad) {
    out->backward_fn = [r, c](Node& self) {
      if (double* g = pgrad(self, 0))
        for (int i = 0; i < r; ++i) {
          const double* y = self.row(i);
          const double* gy = self.grad.data() + std::size_t(i) * c;
          double dotv = 0.0;
          for (int j = 0; j < c; ++j) dotv += y[j] * gy[j];
          for (int j = 0; j < c; ++j) g[std::size_t(i) * c + j] += y[j] * (gy[j] - dotv);
        }
    };
  }
  return out;
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int r = x->rows, c = x->cols;
  if (gamma->size() != static_cast<std::size_t>(c) || beta->size() != static_cast<std::size_t>(c))
    shape_error("layer_norm", *x, *gamma);
  Var out = make_node(r, c, {x, gamma, beta});
  std::vector<double> xhat(static_cast<std::size_t>(r) * c);
  std::vector<double> inv_std(r);
  for (int i = 0; i < r; ++i) {
    const double* xi = x->row(i);
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xi[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= c;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) {
      const double h = (xi[j] - mu) * inv_std[i];
      xhat[std::size_t(i) * c + j] = h;
      out->at(i, j) = h * gamma->value[j] + beta->value[j];
    }
  }
  if (out->requires_grad) {
    out->backward_fn = [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
      const Node& G = *self.parents[1];
      double* gx = pgrad(self, 0);
      double* gg = pgrad(self, 1);
      double* gb = pgrad(self, 2);
      std::vector<double> dxhat(c);
      for (int i = 0; i < r; ++i) {
        const double* gy = self.grad.data() + std::size_t(i) * c;
        const double* h = xhat.data() + std::size_t(i) * c;
        double mean_d = 0.0, mean_dh = 0.0;
        for (int j = 0; j < c; ++j) {
          if (gg) gg[j] += gy[j] * h[j];
          if (gb) gb[j] += gy[j];
          dxhat[j] = gy[j] * G.value[j];
          mean_d += dxhat[j];
          mean_dh += dxhat[j] * h[j];
        }
        if (!gx) continue;
        mean_d /= c;
        mean_dh /= c;
        for (int j = 0; j < c; ++j)
          gx[std::size_t(i) * c + j] += inv_std[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
      }
    };
  }
  return out;
}

Var gather_rows(const Var& a, std::span<const int> rows) {
  const int c = a->cols;
  Var out = make_node(static_cast<int>(rows.size()), c, {a});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a->rows) throw std::out_of_range("gather_rows: index");
    std::copy_n(a->row(rows[i]), c, out->row(static_cast<int>(i)));
  }
  if (out->requires_grad) {
    out->backward_fn = [c, idx = std::vector<int>(rows.begin(), rows.end())](Node& self) {
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (int j = 0; j < c; ++j) g[std::size_t(idx[i]) * c + j] += self.grad[i * c + j];
    };
  }
  return out;
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int r = parts[0]->rows;
  int c = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    if (p->rows != r) shape_error("concat_cols", *parts[0], *p);
    offsets.push_back(c);
    c += p->cols;
  }
  Var out = make_node_v(r, c, std::vector<Var>(parts.begin(), parts.end()));
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (int i = 0; i < r; ++i) std::copy_n(parts[k]->row(i), parts[k]->cols, out->row(i) + offsets[k]);
  if (out->requires_grad) {
    out->backward_fn = [r, c, offsets](Node& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        double* g = pgrad(self, k);
        if (!g) continue;
        const int pc = self.parents[k]->cols;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < pc; ++j) g[std::size_t(i) * pc + j] += self.grad[std::size_t(i) * c + offsets[k] + j];
      }
    };
  }
  return out;
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int c = parts[0]->cols;
  int r = 0;
  for (const auto& p : parts) {
    if (p->cols != c) shape_error("concat_rows", *parts[0], *p);
    r += p->rows;
  }
  Var out = make_node_v(r, c, std::vector<Var>(parts.begin(), parts.end()));
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.begin(), p->value.end(), out->value.begin() + off);
    off += p->size();
  }
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        const std::size_t n = self.parents[k]->size();
        if (double* g = pgrad(self, k))
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
        off += n;
      }
    };
  }
  return out;
}

Var slice_cols(const Var& a, int begin, int end) {
  if (begin < 0 || end > a->cols || begin >= end) throw std::out_of_range("slice_cols");
  const int r = a->rows, c = a->cols, w = end - begin;
  Var out = make_node(r, w, {a});
  for (int i = 0; i < r; ++i) std::copy_n(a->row(i) + begin, w, out->row(i));
  if (out->requires_grad) {
    out->backward_fn = [r, c, w, begin](Node& self) {
      if (double* g = pgrad(self, 0))
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j) g[std::size_t(i) * c + begin + j] += self.grad[std::size_t(i) * w + j];
    };
  }
  return out;
}

Var slice_rows(const Var& a, int begin, int end) {
  if (begin < 0 || end > a->rows || begin >= end) throw std::out_of_range("slice_rows");
  const int c = a->cols;
  Var out = make_node(end - begin, c, {a});
  std::copy(a->value.begin() + std::size_t(begin) * c, a->value.begin() + std::size_t(end) * c,
            out->value.begin());
  if (out->requires_grad) {
    out->backward_fn = [begin, c](Node& self) {
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[std::size_t(begin) * c + i] += self.grad[i];
    };
  }
  return out;
}

Var reshape(const Var& a, int rows, int cols) {
  if (static_cast<std::size_t>(rows) * cols != a->size()) throw std::invalid_argument("reshape: size");
  Var out = make_node(rows, cols, {a});
  out->value = a->value;
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

Var group_mean_rows(const Var& a, int k) {
  if (k <= 0 || a->rows % k != 0) throw std::invalid_argument("group_mean_rows: rows not divisible");
  const int groups = a->rows / k, c = a->cols;
  Var out = make_node(groups, c, {a});
  const double inv = 1.0 / k;
  for (int gi = 0; gi < groups; ++gi)
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < c; ++j) out->at(gi, j) += a->at(gi * k + r, j) * inv;
  if (out->requires_grad) {
    out->backward_fn = [groups, k, c, inv](Node& self) {
      if (double* g = pgrad(self, 0))
        for (int gi = 0; gi < groups; ++gi)
          for (int r = 0; r < k; ++r)
            for (int j = 0; j < c; ++j)
              g[std::size_t(gi * k + r) * c + j] += self.grad[std::size_t(gi) * c + j] * inv;
    };
  }
  return out;
}

Var tile_rows(const Var& a, int times) {
  const std::size_t n = a->size();
  Var out = make_node(a->rows * times, a->cols, {a});
  for (int t = 0; t < times; ++t) std::copy(a->value.begin(), a->value.end(), out->value.begin() + t * n);
  if (out->requires_grad) {
    out->backward_fn = [times, n](Node& self) {
      if (double* g = pgrad(self, 0))
        for (int t = 0; t < times; ++t)
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[t * n + i];
    };
  }
  return out;
}

Var space_to_depth(const Var& a, int frames, int h, int w) {
  if (a->rows != frames * h * w) throw std::invalid_argument("space_to_depth: rows != frames*h*w");
  const int c = a->cols, oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw std::invalid_argument("space_to_depth: grid too small");
  Var out = make_node(frames * oh * ow, 4 * c, {a});
  auto src_row = [h, w](int f, int oy, int ox, int q) { return f * h * w + (2 * oy + q / 2) * w + 2 * ox + q % 2; };
  for (int f = 0; f < frames; ++f)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int q = 0; q < 4; ++q)
          std::copy_n(a->row(src_row(f, oy, ox, q)), c, out->row((f * oh + oy) * ow + ox) + q * c);
  if (out->requires_grad) {
    out->backward_fn = [frames, oh, ow, c, src_row](Node& self) {
      if (double* g = pgrad(self, 0))
        for (int f = 0; f < frames; ++f)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
              for (int q = 0; q < 4; ++q) {
                const std::size_t o = std::size_t((f * oh + oy) * ow + ox) * 4 * c + q * c;
                double* dst = g + std::size_t(src_row(f, oy, ox, q)) * c;
                for (int j = 0; j < c; ++j) dst[j] += self.grad[o + j];
              }
    };
  }
  return out;
}

Var detach(const Var& a) { return constant(a->rows, a->cols, a->value); }

Var custom_op(const Var& a, int rows, int cols, std::vector<double> value, VjpFn vjp) {
  if (value.size() != static_cast<std::size_t>(rows) * cols)
    throw std::invalid_argument("custom_op: value count does not match shape");
  Var out = make_node(rows, cols, {a});
  out->value = std::move(value);
  if (out->requires_grad) {
    out->backward_fn = [vjp = std::move(vjp)](Node& self) {
      if (double* g = pgrad(self, 0)) vjp(*self.parents[0], self, g);
    };
  }
  return out;
}

Var masked_row_max(const Var& a, std::span<const std::uint8_t> ignore_cols) {
  if (!ignore_cols.empty() && ignore_cols.size() != static_cast<std::size_t>(a->cols))
    throw std::invalid_argument("masked_row_max: mask size");
  std::vector<int> arg(a->rows, -1);
  std::vector<double> value(a->rows, 0.0);
  for (int r = 0; r < a->rows; ++r) {
    const double* row = a->row(r);
    for (int c = 0; c < a->cols; ++c) {
      if (!ignore_cols.empty() && ignore_cols[c]) continue;
      if (arg[r] < 0 || row[c] > row[arg[r]]) arg[r] = c;
    }
    if (arg[r] >= 0) value[r] = row[arg[r]];
  }
  const int cols = a->cols;
  return custom_op(a, a->rows, 1, std::move(value), [arg = std::move(arg), cols](const Node&, const Node& out, double* g) {
    for (std::size_t r = 0; r < arg.size(); ++r)
      if (arg[r] >= 0) g[r * cols + arg[r]] += out.grad[r];
  });
}

// ---------------------------------------------------------------------------

Var attention(const Var& q, const Var& k, const Var& v, int heads, const AttentionLayout& layout,
              AttentionProbs* probs_out) {
  const int d = q->cols;
  if (k->cols != d || v->cols != d) shape_error("attention", *q, *k);
  if (k->rows != v->rows) shape_error("attention(kv)", *k, *v);
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("attention: cols not divisible by heads");
  if (!layout.key_ignore.empty() && layout.key_ignore.size() != static_cast<std::size_t>(k->rows))
    throw std::invalid_argument("attention: key mask size");
  const int dk = d / heads;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dk));
  const auto& K = kernels::active();

  Var out = make_node(q->rows, d, {q, k, v});
  AttentionProbs probs(layout.groups.size(), std::vector<std::vector<double>>(heads));

  for (std::size_t g = 0; g < layout.groups.size(); ++g) {
    const auto& grp = layout.groups[g];
    const std::size_t nq = grp.query_rows.size(), nk = grp.key_rows.size();
    std::vector<std::uint8_t> ignore(nk, 0);
    if (!layout.key_ignore.empty())
      for (std::size_t j = 0; j < nk; ++j) ignore[j] = layout.key_ignore[grp.key_rows[j]];
    for (int h = 0; h < heads; ++h) {
      auto& P = probs[g][h];
      P.assign(nq * nk, 0.0);
      for (std::size_t i = 0; i < nq; ++i) {
        const double* qi = q->row(grp.query_rows[i]) + h * dk;
        double* p = P.data() + i * nk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < nk; ++j) {
          if (ignore[j]) continue;
          p[j] = K.dot(qi, k->row(grp.key_rows[j]) + h * dk, dk) * scale_f;
          mx = std::max(mx, p[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;  // all keys masked
        double z = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          if (ignore[j]) continue;
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        double* o = out->row(grp.query_rows[i]) + h * dk;
        for (std::size_t j = 0; j < nk; ++j) {
          if (ignore[j]) continue;
          p[j] /= z;
          K.axpy(p[j], v->row(grp.key_rows[j]) + h * dk, o, dk);
        }
      }
    }
  }

  if (out->requires_grad) {
    out->backward_fn = [layout, heads, dk, scale_f, probs](Node& self) {
      const auto& Kt = kernels::active();
      const Node& Q = *self.parents[0];
      const Node& Kn = *self.parents[1];
      const Node& V = *self.parents[2];
      double* gq = pgrad(self, 0);
      double* gk = pgrad(self, 1);
      double* gv = pgrad(self, 2);
      const int d = self.cols;
      std::vector<double> ds;
      for (std::size_t g = 0; g < layout.groups.size(); ++g) {
        const auto& grp = layout.groups[g];
        const std::size_t nq = grp.query_rows.size(), nk = grp.key_rows.size();
        ds.resize(nk);
        for (int h = 0; h < heads; ++h) {
          const auto& P = probs[g][h];
          for (std::size_t i = 0; i < nq; ++i) {
            const int qr = grp.query_rows[i];
            const double* go = self.grad.data() + std::size_t(qr) * d + h * dk;
            const double* p = P.data() + i * nk;
            double acc = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
              if (p[j] == 0.0) {
                ds[j] = 0.0;
                continue;
              }
              const int kr = grp.key_rows[j];
              if (gv) Kt.axpy(p[j], go, gv + std::size_t(kr) * d + h * dk, dk);
              ds[j] = Kt.dot(go, V.value.data() + std::size_t(kr) * d + h * dk, dk);
              acc += p[j] * ds[j];
            }
            for (std::size_t j = 0; j < nk; ++j) {
              if (p[j] == 0.0) continue;
              const double s = p[j] * (ds[j] - acc) * scale_f;
              const int kr = grp.key_rows[j];
              if (gq) Kt.axpy(s, Kn.value.data() + std::size_t(kr) * d + h * dk, gq + std::size_t(qr) * d + h * dk, dk);
              if (gk) Kt.axpy(s, Q.value.data() + std::size_t(qr) * d + h * dk, gk + std::size_t(kr) * d + h * dk, dk);
            }
          }
        }
      }
    };
  }
  if (probs_out) *probs_out = std::move(probs);
  return out;
}

AttentionLayout single_group(int num_queries, int num_keys) {
  AttentionLayout layout;
  AttentionGroup g;
  g.query_rows.resize(num_queries);
  g.key_rows.resize(num_keys);
  for (int i = 0; i < num_queries; ++i) g.query_rows[i] = i;
  for (int j = 0; j < num_keys; ++j) g.key_rows[j] = j;
  layout.groups.push_back(std::move(g));
  return layout;
}

AttentionLayout strided_groups(int outer, int inner) {
  AttentionLayout layout;
  layout.groups.resize(inner);
  for (int i = 0; i < inner; ++i) {
    auto& g = layout.groups[i];
    for (int o = 0; o < outer; ++o) g.query_rows.push_back(o * inner + i);
    g.key_rows = g.query_rows;
  }
  return layout;
}

AttentionLayout block_groups(int outer, int inner) { return paired_blocks(outer, inner, inner); }

AttentionLayout paired_blocks(int outer, int q_inner, int k_inner) {
  AttentionLayout layout;
  layout.groups.resize(outer);
  for (int o = 0; o < outer; ++o) {
    auto& g = layout.groups[o];
    for (int i = 0; i < q_inner; ++i) g.query_rows.push_back(o * q_inner + i);
    for (int j = 0; j < k_inner; ++j) g.key_rows.push_back(o * k_inner + j);
  }
  return layout;
}

}  // namespace stvg::ag
