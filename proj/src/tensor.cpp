#include "xattn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "xattn/hash.hpp"

namespace xattn {

namespace {

std::atomic<std::uint64_t> next_tensor_id{1};
thread_local Tape* current_tape = nullptr;
thread_local KinkProbe* current_probe = nullptr;

struct BackwardFault {
  bool active = false;
  OpKind op = OpKind::MatMul;
  double factor = 1.0;
};
BackwardFault fault;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor make_tensor(Shape shape, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  impl->id = next_tensor_id.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return make_tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape), requires_grad);
  std::fill(t.impl().data.begin(), t.impl().data.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  Tensor t = make_tensor(std::move(shape), requires_grad);
  t.impl().data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

TensorImpl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = impl().shape;
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

std::span<double> Tensor::grad_buffer() {
  auto& g = impl().grad;
  if (g.empty()) g.assign(impl().data.size(), 0.0);
  return g;
}

void Tensor::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t = make_tensor(shape(), requires_grad());
  t.impl().data = impl().data;
  return t;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape() != other.shape()) return false;
  const auto& a = impl().data;
  const auto& b = other.impl().data;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Embedding: return "embedding";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Relu: return "relu";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Concat: return "concat";
    case OpKind::Split: return "split";
    case OpKind::Dropout: return "dropout";
    case OpKind::Sum: return "sum";
  }
  return "?";
}

OpKind op_from_name(const std::string& name) {
  for (int i = 0; i <= static_cast<int>(OpKind::Sum); ++i) {
    auto op = static_cast<OpKind>(i);
    if (name == op_name(op)) return op;
  }
  throw ContractError("unknown op name '" + name + "'");
}

void set_backward_fault(OpKind op, double factor) {
  fault.active = factor != 1.0;
  fault.op = op;
  fault.factor = factor;
}

void clear_backward_fault() { fault = BackwardFault{}; }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;  // nothing trainable upstream
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->result->grad.empty()) continue;
    if (fault.active && it->op == fault.op) {
      std::vector<std::vector<double>> before;
      before.reserve(it->operands.size());
      for (auto& in : it->operands) {
        if (in->requires_grad && in->grad.empty()) in->grad.assign(in->data.size(), 0.0);
        before.push_back(in->grad);
      }
      it->backward();
      for (std::size_t i = 0; i < it->operands.size(); ++i) {
        auto& g = it->operands[i]->grad;
        for (std::size_t j = 0; j < g.size(); ++j) {
          g[j] = before[i][j] + fault.factor * (g[j] - before[i][j]);
        }
      }
    } else {
      it->backward();
    }
  }
}

void Tape::replay() {
  for (auto& rec : records_) rec.forward();
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(current_tape) { current_tape = nullptr; }
NoGradScope::~NoGradScope() { current_tape = previous_; }

Tape* active_tape() noexcept { return current_tape; }

// ---------------------------------------------------------------------------

KinkProbe::KinkProbe() : previous_(current_probe), signature_(kFnvOffset) { current_probe = this; }
KinkProbe::~KinkProbe() { current_probe = previous_; }
KinkProbe* active_kink_probe() noexcept { return current_probe; }

void KinkProbe::fold(std::span<const double> x) {
  std::uint64_t h = signature_;
  for (double v : x) {
    h ^= v > 0.0 ? 1u : 2u;
    h *= 0x100000001b3ULL;
  }
  signature_ = h;
}

FiniteDiffReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                   std::vector<Tensor> params,
                                   const FiniteDiffOptions& options) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.drop_grad();
  }
  std::uint64_t base_signature = 0;
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      KinkProbe probe;
      loss = loss_fn();
      base_signature = probe.signature();
    }
    tape.backward(loss);
  }
  auto probed = [&](double& slot, double value, bool& crossed) {
    slot = value;
    KinkProbe probe;
    const double l = loss_fn().item();
    crossed = crossed || probe.signature() != base_signature;
    return l;
  };

  struct Coord {
    std::size_t param;
    std::size_t index;
  };
  std::vector<Coord> all;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].numel(); ++i) all.push_back({p, i});
  }
  std::vector<Coord> picked;
  if (all.size() <= options.samples) {
    picked = all;
  } else {
    std::mt19937_64 rng(options.seed);
    std::sample(all.begin(), all.end(), std::back_inserter(picked), options.samples, rng);
  }

  FiniteDiffReport report;
  NoGradScope no_grad;
  for (const auto& c : picked) {
    Tensor& p = params[c.param];
    const double analytic = p.has_grad() ? p.grad()[c.index] : 0.0;
    double& slot = p.mutable_data()[c.index];
    const double saved = slot;
    bool crossed = false;
    const double h = options.h;
    const double up = probed(slot, saved + h, crossed);
    const double down = probed(slot, saved - h, crossed);
    double numeric = (up - down) / (2.0 * h);
    if (options.richardson) {
      const double up2 = probed(slot, saved + h / 2, crossed);
      const double down2 = probed(slot, saved - h / 2, crossed);
      numeric = (4.0 * (up2 - down2) / h - numeric) / 3.0;
    }
    slot = saved;
    if (crossed) {
      ++report.skipped_kinks;
      continue;
    }
    const double abs_err = std::abs(analytic - numeric);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), options.denom_floor});
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    if (abs_err / denom >= report.max_rel_err) {
      report.max_rel_err = abs_err / denom;
      report.worst_param = c.param;
      report.worst_index = c.index;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
    ++report.checked;
  }
  report.pass = report.checked > 0 && report.max_rel_err < options.tol;
  for (auto& p : params) p.drop_grad();
  return report;
}

}  // namespace xattn
