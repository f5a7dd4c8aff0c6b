#pragma once

// Minimal tape-free reverse-mode autodiff over row-major 2-D double matrices.
//
// Every op returns a fresh node that keeps shared ownership of its inputs
// while gradients are being recorded. backward() walks the graph reachable
// from a scalar root in reverse topological order. With recording disabled
// (NoGradGuard) nodes keep no parents, so inference allocates no graph.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace stvg::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t size() const { return value.size(); }
  double& at(int r, int c) { return value[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return value[static_cast<std::size_t>(r) * cols + c]; }
  const double* row(int r) const { return value.data() + static_cast<std::size_t>(r) * cols; }
  double* row(int r) { return value.data() + static_cast<std::size_t>(r) * cols; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
  double scalar() const { return value.at(0); }
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(int rows, int cols, std::vector<double> values);
Var zeros(int rows, int cols);
// Leaf that accumulates gradient.
Var parameter(int rows, int cols, std::vector<double> values);

// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
void backward(const Var& root);

// ---- linear algebra --------------------------------------------------------
Var matmul(const Var& a, const Var& b);
// x[n,in] * w[in,out] + b[1,out]; bias may be null.
Var linear(const Var& x, const Var& w, const Var& b);
Var transpose(const Var& a);

// ---- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// a[r,c] + row[1,c] for every r.
Var add_row(const Var& a, const Var& row);
Var relu(const Var& a);
Var sigmoid(const Var& a);
// log(x / (1 - x)) with x clamped to [eps, 1 - eps].
Var inverse_sigmoid(const Var& a, double eps = 1e-5);
// log(max(x, floor)); gradient is zero where the floor is active.
Var log_floor(const Var& a, double floor);
Var abs(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// ---- reductions and layout -------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
// Softmax over the columns of each row.
Var softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var gather_rows(const Var& a, std::span<const int> rows);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, int begin, int end);
Var slice_rows(const Var& a, int begin, int end);
Var reshape(const Var& a, int rows, int cols);
// [groups * k, c] -> [groups, c], averaging consecutive blocks of k rows.
Var group_mean_rows(const Var& a, int k);
// [r, c] -> [times * r, c].
Var tile_rows(const Var& a, int times);
// [frames * h * w, c] row-major grids -> [frames * (h/2) * (w/2), 4c]; each
// output row holds one 2x2 block (top-left, top-right, bottom-left,
// bottom-right). Odd trailing rows/columns are dropped.
Var space_to_depth(const Var& a, int frames, int h, int w);
Var detach(const Var& a);
// [r, c] -> [r, 1]: per-row maximum over the columns not flagged in ignore_cols.
// Rows with every column ignored give 0.
Var masked_row_max(const Var& a, std::span<const std::uint8_t> ignore_cols);

// Single-input op with a caller-supplied value and vector-Jacobian product.
// vjp(input, output, input_grad) accumulates into input_grad using output.grad.
using VjpFn = std::function<void(const Node& in, const Node& out, double* in_grad)>;
Var custom_op(const Var& a, int rows, int cols, std::vector<double> value, VjpFn vjp);

// ---- attention -------------------------------------------------------------

// Partition of query rows into groups, each attending over its own key rows.
struct AttentionGroup {
  std::vector<int> query_rows;
  std::vector<int> key_rows;
};

struct AttentionLayout {
  std::vector<AttentionGroup> groups;
  // Per key row of K/V; true = ignore. Empty means nothing masked.
  std::vector<std::uint8_t> key_ignore;
};

// Post-softmax weights, one block per (group, head): probs[g][h] is a
// row-major |query_rows| x |key_rows| matrix.
using AttentionProbs = std::vector<std::vector<std::vector<double>>>;

// Multi-head scaled dot-product attention. Head h uses columns
// [h*dk, (h+1)*dk) of Q, K and V with dk = cols / heads. Masked keys get zero
// weight; a query with every key masked outputs zero.
Var attention(const Var& q, const Var& k, const Var& v, int heads, const AttentionLayout& layout,
              AttentionProbs* probs_out = nullptr);

// Layout helpers.
AttentionLayout single_group(int num_queries, int num_keys);
// Rows are laid out [outer, inner]. Each group is one inner index and spans the
// outer axis (e.g. temporal attention over frames at a fixed spatial index).
AttentionLayout strided_groups(int outer, int inner);
// Each group is one outer index over its contiguous block of inner rows.
AttentionLayout block_groups(int outer, int inner);
// Queries [outer, q_inner] attend to keys [outer, k_inner] of the same outer.
AttentionLayout paired_blocks(int outer, int q_inner, int k_inner);

}  // namespace stvg::ag
