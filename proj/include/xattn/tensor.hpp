#pragma once

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copying it aliases the same buffer, clone()
// makes an independent copy. Operations record themselves on the active Tape
// (see TapeScope) only when at least one input requires a gradient, so
// frozen parameters and constant inputs never enter the autodiff graph.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xattn/error.hpp"

namespace xattn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  std::uint64_t id() const { return impl().id; }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl().data.size(); }

  std::span<const double> data() const { return impl().data; }
  std::span<double> mutable_data() { return impl().data; }
  double item() const;
  double operator[](std::size_t i) const { return impl().data[i]; }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool value) { impl().requires_grad = value; }

  bool has_grad() const { return !impl().grad.empty(); }
  /// Gradient buffer; empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return impl().grad; }
  /// Allocates a zero gradient buffer on first use.
  std::span<double> grad_buffer();
  void zero_grad();
  void drop_grad() { impl().grad.clear(); impl().grad.shrink_to_fit(); }

  /// Deep copy of shape and data. The copy has no gradient and keeps the
  /// requires_grad flag.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const noexcept {
    return impl_ == other.impl_;
  }
  bool bit_equal(const Tensor& other) const;

  TensorImpl& impl() const;
  const std::shared_ptr<TensorImpl>& handle() const noexcept { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_tensor(Shape shape, bool requires_grad);
};

Tensor make_tensor(Shape shape, bool requires_grad);

// ---------------------------------------------------------------------------
// Computation record
// ---------------------------------------------------------------------------

enum class OpKind {
  MatMul,
  Add,
  Mul,
  Scale,
  Transpose,
  Reshape,
  Embedding,
  Softmax,
  LayerNorm,
  Relu,
  CrossEntropy,
  Concat,
  Split,
  Dropout,
  Sum,
};

const char* op_name(OpKind op);
OpKind op_from_name(const std::string& name);

struct OpRecord {
  OpKind op;
  std::vector<std::uint64_t> inputs;
  std::uint64_t output;
  std::vector<std::shared_ptr<TensorImpl>> operands;
  std::shared_ptr<TensorImpl> result;
  std::function<void()> forward;   // recomputes output (and saved state)
  std::function<void()> backward;  // accumulates input grads from output grad
};

/// Ordered list of primitive-op applications. Entries are appended in
/// execution order, so every input id precedes the output that consumed it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  void record(OpRecord rec) { records_.push_back(std::move(rec)); }
  std::span<const OpRecord> records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every backward rule in reverse
  /// order. Gradients accumulate into existing buffers.
  void backward(const Tensor& loss);

  /// Re-executes the forward rules in order on the current input values.
  void replay();

  void clear() { records_.clear(); }

 private:
  std::vector<OpRecord> records_;
};

/// Makes a tape the recording target for the current thread while alive.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the current thread while alive.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

/// While alive, every relu forward folds the sign pattern of its input into
/// signature(), so a finite-difference probe can tell when a perturbation
/// moved some activation across the kink at zero.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;
  std::uint64_t signature() const { return signature_; }
  void fold(std::span<const double> x);

 private:
  KinkProbe* previous_;
  std::uint64_t signature_;
};

KinkProbe* active_kink_probe() noexcept;

/// Scales the input gradients produced by one op kind's backward rule.
/// Exists so gradient checks have a negative control; factor 1 disables it.
void set_backward_fault(OpKind op, double factor);
void clear_backward_fault();

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

/// a[..., m, k] · b[k, n], or batched a[B, m, k] · b[B, k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// a + b where b has a's shape or a trailing suffix of it (row broadcast).
Tensor add(const Tensor& a, const Tensor& b);
/// Elementwise product of equally shaped tensors.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Rows of table[V, d] selected by ids; result shape is lead ++ [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, Shape lead);
Tensor softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);
Tensor relu(const Tensor& x);
/// Mean label-smoothed negative log-likelihood over non-pad rows of
/// logits[T, V]. Rows whose target equals pad_id contribute nothing.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     double label_smoothing, int pad_id);
Tensor concat_last(const std::vector<Tensor>& parts);
std::vector<Tensor> split_last(const Tensor& x,
                               const std::vector<std::size_t>& sizes);
/// Inverted dropout. Identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);
Tensor sum(const Tensor& x);

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

struct FiniteDiffOptions {
  double h = 1e-4;
  double tol = 1e-4;
  std::size_t samples = 100;
  std::uint64_t seed = 0;
  /// Floor of the relative-error denominator. Central differences cannot
  /// resolve gradients below roughly eps * |loss| / h, so exactly-zero
  /// gradients would otherwise score as large relative errors.
  double denom_floor = 1e-6;
  /// Combines the h and h/2 central differences, cancelling the O(h^2)
  /// truncation term.
  bool richardson = true;
};

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // sampled coordinates whose +-h probe crossed a relu kink
  bool pass = false;
  // Coordinate with the largest relative error.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares analytic gradients of loss_fn() with respect to params against
/// central differences on randomly sampled coordinates. loss_fn must build
/// its graph from the current parameter values and be deterministic.
FiniteDiffReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                   std::vector<Tensor> params,
                                   const FiniteDiffOptions& options = {});

}  // namespace xattn
