#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "psep/matrix.hpp"

namespace psep::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// One value in the computation graph. Value and gradient storage live behind
// shared pointers so reshape views can alias them.
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> val;
  std::shared_ptr<std::vector<double>> grad;  // kept empty until first use
  bool requires_grad = false;

  std::size_t numel() const { return val->size(); }
  // Resizes the (shared) gradient buffer to match the value, zero-filled.
  std::vector<double>& ensure_grad();
};

}  // namespace detail

// Lightweight handle to a graph node. Copy freely.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& value() const { return *node_->val; }
  // Handles share their node; in-place edits are const on the handle.
  std::vector<double>& mutable_value() const { return *node_->val; }

  // Gradient after backward(); zeros if this tensor never received one.
  std::vector<double> grad() const;
  void zero_grad() const;

  double scalar() const;  // requires numel() == 1

  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Records backward closures for one forward pass. Ops append to the active
// tape (see TapeScope); with no active tape they run forward-only, which is
// the inference path. A tape belongs to one logical thread.
class Tape {
 public:
  void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }
  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs recorded steps in reverse. The loss
  // must be scalar and must have been computed under this tape.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> steps_;
};

// Installs a tape as the active one for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* current_tape();

// ---- leaf construction ----

Tensor constant(Shape shape, std::vector<double> data);
Tensor constant(const Matrix& m);                        // shape {rows, cols}
Tensor scalar_constant(double v);
Tensor param(Shape shape, std::vector<double> data);     // requires_grad = true
Tensor zeros(Shape shape, bool requires_grad = false);

Matrix to_matrix(const Tensor& t);  // requires a 2-D tensor

// ---- primitives ----
// Shape mismatches throw std::invalid_argument naming the op and shapes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& b);   // [R,C] + [C], row broadcast
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

// 2-D matrix product with optional transposes (applied before multiplying).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);     // subgradient 0 at 0
Tensor abs(const Tensor& x);      // subgradient 0 at 0
Tensor sqrt(const Tensor& x);
Tensor reciprocal(const Tensor& x);

Tensor sum(const Tensor& x);      // -> scalar
Tensor mean(const Tensor& x);     // -> scalar
Tensor rowsum(const Tensor& x);   // [R,C] -> [R,1]
Tensor mul_colvec(const Tensor& x, const Tensor& v);  // [R,C] * [R,1], row scaling

Tensor concat_cols(const std::vector<Tensor>& parts);           // [R,Ci] -> [R,sum Ci]
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);

// Zero-copy view with a new shape (same element count).
Tensor reshape(const Tensor& x, Shape shape);

// [T,B,C] -> [T,C]: one batch lane. stack_batch is its inverse.
Tensor slice_batch(const Tensor& x, std::size_t b);
Tensor stack_batch(const std::vector<Tensor>& items);          // K x [T,C] -> [T,K,C]
Tensor slice_batch_range(const Tensor& x, std::size_t b0, std::size_t b1);  // [T,B,C] -> [T,b1-b0,C]
Tensor concat_batch(const std::vector<Tensor>& parts);         // [T,Bi,C] -> [T,sum Bi,C]

// Full unidirectional LSTM pass over a [T,B,I] sequence: one graph node for
// the whole layer. w_x is [I,4H], w_h is [H,4H], bias is [4H], gate order
// i, f, g, o. When reverse is set the recurrence runs from the last frame to
// the first. Output is [T,B,H]; initial h and c are zero.
Tensor lstm_seq(const Tensor& x, const Tensor& w_x, const Tensor& w_h, const Tensor& bias,
                bool reverse);

// ---- differentiation ----

// Populates gradients of all requires_grad leaves reachable from loss.
void backward(const Tensor& loss);

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  bool pass = false;
  std::string worst_coordinate;
};

// Compares the analytic gradient of f at x against central finite
// differences with step h. Coordinates whose +/-h evaluations pass within
// 10h of a relu/abs kink are skipped.
GradcheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                          double h = 1e-5, double tol = 1e-6);

// Test hook: deliberately corrupts one backward rule so a gradcheck run
// must fail. Used by the CLI self-check to prove failures are detectable.
void set_backward_fault(bool enabled);

}  // namespace psep::ad
