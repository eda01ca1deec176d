#include "psep/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace psep::ad {

namespace {

thread_local Tape* g_tape = nullptr;

std::atomic<bool> g_backward_fault{false};

// Gradcheck support: relu/abs record how close their inputs came to the
// kink during an evaluation so unreliable coordinates can be skipped.
thread_local bool g_kink_tracking = false;
thread_local double g_kink_distance = 1e300;

void track_kink(double v) {
  if (g_kink_tracking) g_kink_distance = std::min(g_kink_distance, std::abs(v));
}

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->val = std::make_shared<std::vector<double>>(std::move(data));
  n->grad = std::make_shared<std::vector<double>>();
  n->requires_grad = requires_grad;
  return n;
}

bool recording(const NodePtr& out) { return g_tape != nullptr && out->requires_grad; }

// Output gradient of a node, or nullptr if nothing flowed into it.
const std::vector<double>* out_grad(const NodePtr& n) {
  return n->grad->empty() ? nullptr : n->grad.get();
}

void check_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got shape " +
                                shape_str(t.shape()));
}

void dgemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
           const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
           double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

Tensor unary_op(const Tensor& x, const char*, const std::function<double(double)>& fwd,
                const std::function<double(double, double)>& dfn) {
  const auto& xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto node = make_node(x.shape(), std::move(out), x.requires_grad());
  if (recording(node)) {
    NodePtr xn = x.node_ptr(), on = node;
    g_tape->record([xn, on, dfn]() {
      const auto* g = out_grad(on);
      if (!g || !xn->requires_grad) return;
      auto& gx = xn->ensure_grad();
      const auto& xv = *xn->val;
      const auto& yv = *on->val;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i] * dfn(xv[i], yv[i]);
    });
  }
  return Tensor(node);
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad->empty()) grad->assign(val->size(), 0.0);
  return *grad;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad->empty()) return std::vector<double>(node_->numel(), 0.0);
  return *node_->grad;
}

void Tensor::zero_grad() const { node_->grad->clear(); }

double Tensor::scalar() const {
  if (numel() != 1)
    throw std::invalid_argument("scalar: tensor has shape " + shape_str(shape()));
  return (*node_->val)[0];
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  loss.node()->ensure_grad()[0] = 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : prev_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = prev_; }

Tape* current_tape() { return g_tape; }

void set_backward_fault(bool enabled) { g_backward_fault.store(enabled); }

// ---- leaves ----

Tensor constant(Shape shape, std::vector<double> data) {
  return Tensor(make_node(std::move(shape), std::move(data), false));
}

Tensor constant(const Matrix& m) {
  return Tensor(make_node({m.rows(), m.cols()}, m.values(), false));
}

Tensor scalar_constant(double v) { return Tensor(make_node({1}, {v}, false)); }

Tensor param(Shape shape, std::vector<double> data) {
  return Tensor(make_node(std::move(shape), std::move(data), true));
}

Tensor zeros(Shape shape, bool requires_grad) {
  std::vector<double> data(numel(shape), 0.0);
  return Tensor(make_node(std::move(shape), std::move(data), requires_grad));
}

Matrix to_matrix(const Tensor& t) {
  check_2d(t, "to_matrix");
  Matrix m(t.shape()[0], t.shape()[1]);
  const auto& v = t.value();
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i];
  return m;
}

// ---- elementwise ----

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, int mode) {
  // mode: 0 add, 1 sub, 2 mul
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(av.size());
  switch (mode) {
    case 0: for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i]; break;
    case 1: for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i]; break;
    default: for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i]; break;
  }
  auto node = make_node(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  if (recording(node)) {
    NodePtr an = a.node_ptr(), bn = b.node_ptr(), on = node;
    g_tape->record([an, bn, on, mode]() {
      const auto* g = out_grad(on);
      if (!g) return;
      if (an->requires_grad) {
        auto& ga = an->ensure_grad();
        if (mode == 2) {
          const auto& bv = *bn->val;
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] * bv[i];
        } else {
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
        }
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        if (mode == 2) {
          const auto& av = *an->val;
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i] * av[i];
        } else if (mode == 1) {
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= (*g)[i];
        } else {
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i];
        }
      }
    });
  }
  return Tensor(node);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "add", 0); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "sub", 1); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "mul", 2); }

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.shape().empty() || b.shape().size() != 1 || x.shape().back() != b.shape()[0])
    throw std::invalid_argument("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(b.shape()));
  const std::size_t cols = b.shape()[0];
  const std::size_t rows = x.numel() / cols;
  const auto& xv = x.value();
  const auto& bv = b.value();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
  auto node = make_node(x.shape(), std::move(out), x.requires_grad() || b.requires_grad());
  if (recording(node)) {
    NodePtr xn = x.node_ptr(), bn = b.node_ptr(), on = node;
    g_tape->record([xn, bn, on, rows, cols]() {
      const auto* g = out_grad(on);
      if (!g) return;
      if (xn->requires_grad) {
        auto& gx = xn->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += (*g)[r * cols + c];
      }
    });
  }
  return Tensor(node);
}

Tensor scale(const Tensor& x, double s) {
  return unary_op(x, "scale", [s](double v) { return v * s; },
                  [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(x, "add_scalar", [s](double v) { return v + s; },
                  [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary_op(x, "tanh", [](double v) { return std::tanh(v); },
                  [](double, double y) {
                    double d = 1.0 - y * y;
                    if (g_backward_fault.load(std::memory_order_relaxed)) d *= 1.01;
                    return d;
                  });
}

Tensor relu(const Tensor& x) {
  return unary_op(x, "relu",
                  [](double v) {
                    track_kink(v);
                    return v > 0.0 ? v : 0.0;
                  },
                  [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary_op(x, "abs",
                  [](double v) {
                    track_kink(v);
                    return std::abs(v);
                  },
                  [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(x, "sqrt", [](double v) { return std::sqrt(v); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor reciprocal(const Tensor& x) {
  return unary_op(x, "reciprocal", [](double v) { return 1.0 / v; },
                  [](double, double y) { return -y * y; });
}

// ---- reductions / broadcasts ----

Tensor sum(const Tensor& x) {
  const auto& xv = x.value();
  double s = 0.0;
  for (double v : xv) s += v;
  auto node = make_node({1}, {s}, x.requires_grad());
  if (recording(node)) {
    NodePtr xn = x.node_ptr(), on = node;
    g_tape->record([xn, on]() {
      const auto* g = out_grad(on);
      if (!g || !xn->requires_grad) return;
      auto& gx = xn->ensure_grad();
      for (double& v : gx) v += (*g)[0];
    });
  }
  return Tensor(node);
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / double(x.numel())); }

Tensor rowsum(const Tensor& x) {
  check_2d(x, "rowsum");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const auto& xv = x.value();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += xv[r * cols + c];
  auto node = make_node({rows, 1}, std::move(out), x.requires_grad());
  if (recording(node)) {
    NodePtr xn = x.node_ptr(), on = node;
    g_tape->record([xn, on, rows, cols]() {
      const auto* g = out_grad(on);
      if (!g || !xn->requires_grad) return;
      auto& gx = xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += (*g)[r];
    });
  }
  return Tensor(node);
}

Tensor mul_colvec(const Tensor& x, const Tensor& v) {
  check_2d(x, "mul_colvec");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (v.numel() != rows)
    throw std::invalid_argument("mul_colvec: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(v.shape()));
  const auto& xv = x.value();
  const auto& vv = v.value();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * vv[r];
  auto node = make_node(x.shape(), std::move(out), x.requires_grad() || v.requires_grad());
  if (recording(node)) {
    NodePtr xn = x.node_ptr(), vn = v.node_ptr(), on = node;
    g_tape->record([xn, vn, on, rows, cols]() {
      const auto* g = out_grad(on);
      if (!g) return;
      if (xn->requires_grad) {
        auto& gx = xn->ensure_grad();
        const auto& vv = *vn->val;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += (*g)[r * cols + c] * vv[r];
      }
      if (vn->requires_grad) {
        auto& gv = vn->ensure_grad();
        const auto& xv = *xn->val;
        for (std::size_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < cols; ++c) s += (*g)[r * cols + c] * xv[r * cols + c];
          gv[r] += s;
        }
      }
    });
  }
  return Tensor(node);
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const std::size_t a0 = a.shape()[0], a1 = a.shape()[1];
  const std::size_t b0 = b.shape()[0], b1 = b.shape()[1];
  const std::size_t m = trans_a ? a1 : a0;
  const std::size_t k = trans_a ? a0 : a1;
  const std::size_t kb = trans_b ? b1 : b0;
  const std::size_t n = trans_b ? b0 : b1;
  if (k != kb)
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) +
                                (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                                (trans_b ? "^T" : ""));
  std::vector<double> out(m * n, 0.0);
  dgemm(trans_a, trans_b, m, n, k, 1.0, a.value().data(), a1, b.value().data(), b1, 0.0,
        out.data(), n);
  auto node = make_node({m, n}, std::move(out), a.requires_grad() || b.requires_grad());
  if (recording(node)) {
    NodePtr an = a.node_ptr(), bn = b.node_ptr(), on = node;
    g_tape->record([an, bn, on, trans_a, trans_b, m, n, k, a1, b1]() {
      const auto* g = out_grad(on);
      if (!g) return;
      const double* gc = g->data();
      if (an->requires_grad) {
        double* ga = an->ensure_grad().data();
        const double* bd = bn->val->data();
        if (!trans_a && !trans_b)       dgemm(false, true,  m, k, n, 1.0, gc, n, bd, b1, 1.0, ga, a1);
        else if (trans_a && !trans_b)   dgemm(false, true,  k, m, n, 1.0, bd, b1, gc, n, 1.0, ga, a1);
        else if (!trans_a && trans_b)   dgemm(false, false, m, k, n, 1.0, gc, n, bd, b1, 1.0, ga, a1);
        else                            dgemm(true,  true,  k, m, n, 1.0, bd, b1, gc, n, 1.0, ga, a1);
      }
      if (bn->requires_grad) {
        double* gb = bn->ensure_grad().data();
        const double* ad = an->val->data();
        if (!trans_a && !trans_b)       dgemm(true,  false, k, n, m, 1.0, ad, a1, gc, n, 1.0, gb, b1);
        else if (trans_a && !trans_b)   dgemm(false, false, k, n, m, 1.0, ad, a1, gc, n, 1.0, gb, b1);
        else if (!trans_a && trans_b)   dgemm(true,  false, n, k, m, 1.0, gc, n, ad, a1, 1.0, gb, b1);
        else                            dgemm(true,  true,  n, k, m, 1.0, gc, n, ad, a1, 1.0, gb, b1);
      }
    });
  }
  return Tensor(node);
}

// ---- layout ops ----

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts[0].shape()[0];
  std::size_t total_cols = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    check_2d(p, "concat_cols");
    if (p.shape()[0] != rows)
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(p.shape()));
    total_cols += p.shape()[1];
    needs_grad = needs_grad || p.requires_grad();
  }
  std::vector<double> out(rows * total_cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.shape()[1];
    const auto& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pc; ++c) out[r * total_cols + offset + c] = pv[r * pc + c];
    offset += pc;
  }
  auto node = make_node({rows, total_cols}, std::move(out), needs_grad);
  if (recording(node)) {
    std::vector<NodePtr> ins;
    ins.reserve(parts.size());
    for (const auto& p : parts) ins.push_back(p.node_ptr());
    NodePtr on = node;
    g_tape->record([ins, on, rows, total_cols]() {
      const auto* g = out_grad(on);
      if (!g) return;
      std::size_t offset = 0;
      for (const auto& in : ins) {
        const std::size_t pc = in->shape[1];
        if (in->requires_grad) {
          auto& gi = in->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c) gi[r * pc + c] += (*g)[r * total_cols + offset + c];
        }
        offset += pc;
      }
    });
  }
  return Tensor(node);
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  check_2d(x, "slice_cols");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (c0 >= c1 || c1 > cols)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for " + shape_str(x.shape()));
  const std::size_t w = c1 - c0;
  const auto& xv = x.value();
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = xv[r * cols + c0 + c];
  auto node = make_node({rows, w}, std::move(out), x.requires_grad());
  if (recording(node)) {
    NodePtr xn = x.node_ptr(), on = node;
    g_tape->record([xn, on, rows, cols, c0, w]() {
      const auto* g = out_grad(on);
      if (!g || !xn->requires_grad) return;
      auto& gx = xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) gx[r * cols + c0 + c] += (*g)[r * w + c];
    });
  }
  return Tensor(node);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->val = x.node()->val;    // aliased storage: gradients flow through the
  n->grad = x.node()->grad;  // shared buffers, no backward step needed
  n->requires_grad = x.requires_grad();
  return Tensor(n);
}

Tensor slice_batch(const Tensor& x, std::size_t b) {
  if (x.shape().size() != 3)
    throw std::invalid_argument("slice_batch: expected [T,B,C], got " + shape_str(x.shape()));
  const std::size_t t_len = x.shape()[0], batch = x.shape()[1], cols = x.shape()[2];
  if (b >= batch) throw std::invalid_argument("slice_batch: index out of range");
  const auto& xv = x.value();
  std::vector<double> out(t_len * cols);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t c = 0; c < cols; ++c) out[t * cols + c] = xv[(t * batch + b) * cols + c];
  auto node = make_node({t_len, cols}, std::move(out), x.requires_grad());
  if (recording(node)) {
    NodePtr xn = x.node_ptr(), on = node;
    g_tape->record([xn, on, t_len, batch, cols, b]() {
      const auto* g = out_grad(on);
      if (!g || !xn->requires_grad) return;
      auto& gx = xn->ensure_grad();
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t c = 0; c < cols; ++c) gx[(t * batch + b) * cols + c] += (*g)[t * cols + c];
    });
  }
  return Tensor(node);
}

Tensor stack_batch(const std::vector<Tensor>& items) {
  if (items.empty()) throw std::invalid_argument("stack_batch: no inputs");
  check_2d(items[0], "stack_batch");
  const std::size_t t_len = items[0].shape()[0], cols = items[0].shape()[1];
  const std::size_t k = items.size();
  bool needs_grad = false;
  for (const auto& it : items) {
    if (it.shape() != items[0].shape())
      throw std::invalid_argument("stack_batch: shape mismatch " + shape_str(it.shape()) +
                                  " vs " + shape_str(items[0].shape()));
    needs_grad = needs_grad || it.requires_grad();
  }
  std::vector<double> out(t_len * k * cols);
  for (std::size_t i = 0; i < k; ++i) {
    const auto& v = items[i].value();
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t c = 0; c < cols; ++c) out[(t * k + i) * cols + c] = v[t * cols + c];
  }
  auto node = make_node({t_len, k, cols}, std::move(out), needs_grad);
  if (recording(node)) {
    std::vector<NodePtr> ins;
    ins.reserve(k);
    for (const auto& it : items) ins.push_back(it.node_ptr());
    NodePtr on = node;
    g_tape->record([ins, on, t_len, k, cols]() {
      const auto* g = out_grad(on);
      if (!g) return;
      for (std::size_t i = 0; i < k; ++i) {
        if (!ins[i]->requires_grad) continue;
        auto& gi = ins[i]->ensure_grad();
        for (std::size_t t = 0; t < t_len; ++t)
          for (std::size_t c = 0; c < cols; ++c) gi[t * cols + c] += (*g)[(t * k + i) * cols + c];
      }
    });
  }
  return Tensor(node);
}

Tensor slice_batch_range(const Tensor& x, std::size_t b0, std::size_t b1) {
  if (x.shape().size() != 3)
    throw std::invalid_argument("slice_batch_range: expected [T,B,C], got " +
                                shape_str(x.shape()));
  const std::size_t t_len = x.shape()[0], batch = x.shape()[1], cols = x.shape()[2];
  if (b0 >= b1 || b1 > batch)
    throw std::invalid_argument("slice_batch_range: bad range [" + std::to_string(b0) + "," +
                                std::to_string(b1) + ") for " + shape_str(x.shape()));
  const std::size_t w = b1 - b0;
  const auto& xv = x.value();
  std::vector<double> out(t_len * w * cols);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t b = 0; b < w; ++b)
      for (std::size_t c = 0; c < cols; ++c)
        out[(t * w + b) * cols + c] = xv[(t * batch + b0 + b) * cols + c];
  auto node = make_node({t_len, w, cols}, std::move(out), x.requires_grad());
  if (recording(node)) {
    NodePtr xn = x.node_ptr(), on = node;
    g_tape->record([xn, on, t_len, batch, cols, b0, w]() {
      const auto* g = out_grad(on);
      if (!g || !xn->requires_grad) return;
      auto& gx = xn->ensure_grad();
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t b = 0; b < w; ++b)
          for (std::size_t c = 0; c < cols; ++c)
            gx[(t * batch + b0 + b) * cols + c] += (*g)[(t * w + b) * cols + c];
    });
  }
  return Tensor(node);
}

Tensor concat_batch(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_batch: no inputs");
  if (parts[0].shape().size() != 3)
    throw std::invalid_argument("concat_batch: expected [T,B,C], got " +
                                shape_str(parts[0].shape()));
  const std::size_t t_len = parts[0].shape()[0], cols = parts[0].shape()[2];
  std::size_t total_b = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p.shape().size() != 3 || p.shape()[0] != t_len || p.shape()[2] != cols)
      throw std::invalid_argument("concat_batch: shape mismatch " + shape_str(p.shape()) +
                                  " vs " + shape_str(parts[0].shape()));
    total_b += p.shape()[1];
    needs_grad = needs_grad || p.requires_grad();
  }
  std::vector<double> out(t_len * total_b * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pb = p.shape()[1];
    const auto& pv = p.value();
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t b = 0; b < pb; ++b)
        for (std::size_t c = 0; c < cols; ++c)
          out[(t * total_b + offset + b) * cols + c] = pv[(t * pb + b) * cols + c];
    offset += pb;
  }
  auto node = make_node({t_len, total_b, cols}, std::move(out), needs_grad);
  if (recording(node)) {
    std::vector<NodePtr> ins;
    ins.reserve(parts.size());
    for (const auto& p : parts) ins.push_back(p.node_ptr());
    NodePtr on = node;
    g_tape->record([ins, on, t_len, total_b, cols]() {
      const auto* g = out_grad(on);
      if (!g) return;
      std::size_t offset = 0;
      for (const auto& in : ins) {
        const std::size_t pb = in->shape[1];
        if (in->requires_grad) {
          auto& gi = in->ensure_grad();
          for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t b = 0; b < pb; ++b)
              for (std::size_t c = 0; c < cols; ++c)
                gi[(t * pb + b) * cols + c] += (*g)[(t * total_b + offset + b) * cols + c];
        }
        offset += pb;
      }
    });
  }
  return Tensor(node);
}

// ---- LSTM layer ----

namespace {

inline double sigmoid_v(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct LstmSaved {
  // Post-activation gates [T*B,4H] (i,f,g,o blocks) and cell states [T*B,H],
  // stored in physical frame order.
  std::vector<double> gates;
  std::vector<double> cells;
};

}  // namespace

Tensor lstm_seq(const Tensor& x, const Tensor& w_x, const Tensor& w_h, const Tensor& bias,
                bool reverse) {
  if (x.shape().size() != 3)
    throw std::invalid_argument("lstm_seq: expected [T,B,I] input, got " + shape_str(x.shape()));
  const std::size_t t_len = x.shape()[0], batch = x.shape()[1], in_dim = x.shape()[2];
  check_2d(w_x, "lstm_seq");
  check_2d(w_h, "lstm_seq");
  const std::size_t hidden = w_h.shape()[0];
  const std::size_t gates4 = 4 * hidden;
  if (w_x.shape()[0] != in_dim || w_x.shape()[1] != gates4 || w_h.shape()[1] != gates4 ||
      bias.numel() != gates4)
    throw std::invalid_argument("lstm_seq: weight shapes " + shape_str(w_x.shape()) + ", " +
                                shape_str(w_h.shape()) + ", " + shape_str(bias.shape()) +
                                " inconsistent with input " + shape_str(x.shape()));

  const std::size_t rows = t_len * batch;
  auto saved = std::make_shared<LstmSaved>();
  saved->gates.assign(rows * gates4, 0.0);
  saved->cells.assign(rows * hidden, 0.0);
  std::vector<double> h_seq(rows * hidden, 0.0);

  // Input projection for every frame at once, then the recurrence.
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < gates4; ++j) saved->gates[r * gates4 + j] = bv[j];
  dgemm(false, false, rows, gates4, in_dim, 1.0, x.value().data(), in_dim,
        w_x.value().data(), gates4, 1.0, saved->gates.data(), gates4);

  const double* whd = w_h.value().data();
  const double* h_prev = nullptr;
  for (std::size_t s = 0; s < t_len; ++s) {
    const std::size_t idx = reverse ? t_len - 1 - s : s;
    double* z = saved->gates.data() + idx * batch * gates4;
    double* c_t = saved->cells.data() + idx * batch * hidden;
    double* h_t = h_seq.data() + idx * batch * hidden;
    if (h_prev)
      dgemm(false, false, batch, gates4, hidden, 1.0, h_prev, hidden, whd, gates4, 1.0, z, gates4);
    const std::size_t idx_prev = reverse ? idx + 1 : idx - 1;
    const double* c_prev = s == 0 ? nullptr : saved->cells.data() + idx_prev * batch * hidden;
    for (std::size_t r = 0; r < batch; ++r) {
      double* zr = z + r * gates4;
      for (std::size_t j = 0; j < hidden; ++j) {
        const double ig = sigmoid_v(zr[j]);
        const double fg = sigmoid_v(zr[hidden + j]);
        const double gg = std::tanh(zr[2 * hidden + j]);
        const double og = sigmoid_v(zr[3 * hidden + j]);
        zr[j] = ig;
        zr[hidden + j] = fg;
        zr[2 * hidden + j] = gg;
        zr[3 * hidden + j] = og;
        const double cp = c_prev ? c_prev[r * hidden + j] : 0.0;
        const double ct = fg * cp + ig * gg;
        c_t[r * hidden + j] = ct;
        h_t[r * hidden + j] = og * std::tanh(ct);
      }
    }
    h_prev = h_t;
  }

  const bool needs_grad =
      x.requires_grad() || w_x.requires_grad() || w_h.requires_grad() || bias.requires_grad();
  auto node = make_node({t_len, batch, hidden}, std::move(h_seq), needs_grad);
  if (recording(node)) {
    NodePtr xn = x.node_ptr(), wxn = w_x.node_ptr(), whn = w_h.node_ptr(), bn = bias.node_ptr(),
            on = node;
    g_tape->record([xn, wxn, whn, bn, on, saved, t_len, batch, in_dim, hidden, gates4, reverse]() {
      const auto* g = out_grad(on);
      if (!g) return;
      const std::size_t rows = t_len * batch;
      const auto& h_seq = *on->val;
      const double* whd = whn->val->data();

      std::vector<double> dz_all(rows * gates4, 0.0);
      std::vector<double> dh(batch * hidden, 0.0), dc(batch * hidden, 0.0);
      std::vector<double> dh_next(batch * hidden);
      double* dwh = whn->requires_grad ? whn->ensure_grad().data() : nullptr;

      for (std::size_t s = t_len; s-- > 0;) {
        const std::size_t idx = reverse ? t_len - 1 - s : s;
        const std::size_t idx_prev = reverse ? idx + 1 : idx - 1;
        const double* gates = saved->gates.data() + idx * batch * gates4;
        const double* c_t = saved->cells.data() + idx * batch * hidden;
        const double* c_prev = s == 0 ? nullptr : saved->cells.data() + idx_prev * batch * hidden;
        const double* h_prev = s == 0 ? nullptr : h_seq.data() + idx_prev * batch * hidden;
        double* dz = dz_all.data() + idx * batch * gates4;

        for (std::size_t r = 0; r < batch; ++r) {
          const double* zr = gates + r * gates4;
          for (std::size_t j = 0; j < hidden; ++j) {
            const double ig = zr[j], fg = zr[hidden + j], gg = zr[2 * hidden + j],
                         og = zr[3 * hidden + j];
            const double tc = std::tanh(c_t[r * hidden + j]);
            const double dh_t = dh[r * hidden + j] + (*g)[(idx * batch + r) * hidden + j];
            double dc_t = dc[r * hidden + j] + dh_t * og * (1.0 - tc * tc);
            const double cp = c_prev ? c_prev[r * hidden + j] : 0.0;
            double* dzr = dz + r * gates4;
            dzr[j] = dc_t * gg * ig * (1.0 - ig);
            dzr[hidden + j] = dc_t * cp * fg * (1.0 - fg);
            dzr[2 * hidden + j] = dc_t * ig * (1.0 - gg * gg);
            dzr[3 * hidden + j] = dh_t * tc * og * (1.0 - og);
            dc[r * hidden + j] = dc_t * fg;
          }
        }
        if (s > 0) {
          // dh_{t-1} via W_h, dW_h via h_{t-1}
          dgemm(false, true, batch, hidden, gates4, 1.0, dz, gates4, whd, gates4, 0.0,
                dh_next.data(), hidden);
          std::swap(dh, dh_next);
          if (dwh)
            dgemm(true, false, hidden, gates4, batch, 1.0, h_prev, hidden, dz, gates4, 1.0, dwh,
                  gates4);
        }
      }

      if (xn->requires_grad)
        dgemm(false, true, rows, in_dim, gates4, 1.0, dz_all.data(), gates4, wxn->val->data(),
              gates4, 1.0, xn->ensure_grad().data(), in_dim);
      if (wxn->requires_grad)
        dgemm(true, false, in_dim, gates4, rows, 1.0, xn->val->data(), in_dim, dz_all.data(),
              gates4, 1.0, wxn->ensure_grad().data(), gates4);
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < gates4; ++j) gb[j] += dz_all[r * gates4 + j];
      }
    });
  }
  return Tensor(node);
}

// ---- backward / gradcheck ----

void backward(const Tensor& loss) {
  if (!g_tape) throw std::logic_error("backward: no active tape");
  g_tape->backward(loss);
}

GradcheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                          double h, double tol) {
  GradcheckReport report;
  if (!x.requires_grad())
    throw std::invalid_argument("gradcheck: x must require gradients");
  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(x);
    if (y.numel() != 1) throw std::invalid_argument("gradcheck: f must be scalar-valued");
    x.zero_grad();
    tape.backward(y);
    analytic = x.grad();
  }

  auto eval = [&f](const Tensor& x) {
    g_kink_distance = 1e300;
    g_kink_tracking = true;
    const double v = f(x).scalar();
    g_kink_tracking = false;
    return v;
  };

  auto& xv = x.mutable_value();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double saved = xv[i];
    xv[i] = saved + h;
    const double fp = eval(x);
    const double kink_p = g_kink_distance;
    xv[i] = saved - h;
    const double fm = eval(x);
    const double kink_m = g_kink_distance;
    xv[i] = saved;
    if (std::min(kink_p, kink_m) < 10.0 * h) {
      ++report.skipped_kinks;
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double rel =
        std::abs(analytic[i] - numeric) / std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    ++report.checked;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coordinate = "i=" + std::to_string(i) + " analytic=" +
                                std::to_string(analytic[i]) + " numeric=" + std::to_string(numeric);
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

}  // namespace psep::ad
