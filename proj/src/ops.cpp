// Primitive operations and their backward rules.
//
// Every op follows the same pattern: allocate the output, run a forward
// closure that (re)computes it from the operands, and, when an input needs a
// gradient and a tape is active, record the forward/backward closures.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "xattn/tensor.hpp"

namespace xattn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Impl = std::shared_ptr<TensorImpl>;

bool any_requires_grad(std::initializer_list<const Tensor*> xs) {
  for (const Tensor* x : xs) {
    if (x->requires_grad()) return true;
  }
  return false;
}

std::vector<double>& grad_of(const Impl& t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad;
}

template <class Fwd, class Bwd>
Tensor finish(OpKind op, Tensor out, std::vector<Impl> operands, Fwd&& fwd, Bwd&& bwd) {
  fwd();
  Tape* tape = active_tape();
  if (tape && out.requires_grad()) {
    OpRecord rec;
    rec.op = op;
    for (const auto& in : operands) rec.inputs.push_back(in->id);
    rec.output = out.id();
    rec.operands = std::move(operands);
    rec.result = out.handle();
    rec.forward = std::forward<Fwd>(fwd);
    rec.backward = std::forward<Bwd>(bwd);
    tape->record(std::move(rec));
  }
  return out;
}

std::size_t resolve_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul shape mismatch: " + shape_str(as) + " x " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();

  std::size_t batch = 1, m = 0, k = as.back(), n = bs.back();
  Shape out_shape;
  bool batched = false;
  if (bs.size() == 2) {
    if (bs[0] != k) throw mismatch();
    m = a.numel() / k;
    out_shape.assign(as.begin(), as.end() - 1);
    out_shape.push_back(n);
  } else if (as.size() == 3 && bs.size() == 3) {
    if (as[0] != bs[0] || bs[1] != k) throw mismatch();
    batched = true;
    batch = as[0];
    m = as[1];
    out_shape = {batch, m, n};
  } else {
    throw mismatch();
  }

  Tensor out = make_tensor(out_shape, any_requires_grad({&a, &b}));
  Impl ai = a.handle(), bi = b.handle(), oi = out.handle();
  const std::size_t b_stride = batched ? k * n : 0;

  auto fwd = [=] {
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatMap A(ai->data.data() + i * m * k, m, k);
      ConstMatMap B(bi->data.data() + i * b_stride, k, n);
      MatMap C(oi->data.data() + i * m * n, m, n);
      C.noalias() = A * B;
    }
  };
  auto bwd = [=] {
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatMap dC(oi->grad.data() + i * m * n, m, n);
      if (ai->requires_grad) {
        ConstMatMap B(bi->data.data() + i * b_stride, k, n);
        MatMap dA(grad_of(ai).data() + i * m * k, m, k);
        dA.noalias() += dC * B.transpose();
      }
      if (bi->requires_grad) {
        ConstMatMap A(ai->data.data() + i * m * k, m, k);
        MatMap dB(grad_of(bi).data() + i * b_stride, k, n);
        dB.noalias() += A.transpose() * dC;
      }
    }
  };
  return finish(OpKind::MatMul, out, {ai, bi}, fwd, bwd);
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    throw DimensionError("add shape mismatch: " + shape_str(as) + " + " + shape_str(bs));
  }
  Tensor out = make_tensor(as, any_requires_grad({&a, &b}));
  Impl ai = a.handle(), bi = b.handle(), oi = out.handle();
  const std::size_t inner = b.numel();
  const std::size_t reps = a.numel() / inner;

  auto fwd = [=] {
    const double* x = ai->data.data();
    const double* y = bi->data.data();
    double* z = oi->data.data();
    for (std::size_t r = 0; r < reps; ++r) {
      for (std::size_t j = 0; j < inner; ++j) z[r * inner + j] = x[r * inner + j] + y[j];
    }
  };
  auto bwd = [=] {
    const double* dz = oi->grad.data();
    if (ai->requires_grad) {
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += dz[i];
    }
    if (bi->requires_grad) {
      auto& gb = grad_of(bi);
      for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t j = 0; j < inner; ++j) gb[j] += dz[r * inner + j];
      }
    }
  };
  return finish(OpKind::Add, out, {ai, bi}, fwd, bwd);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch: " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  Tensor out = make_tensor(a.shape(), any_requires_grad({&a, &b}));
  Impl ai = a.handle(), bi = b.handle(), oi = out.handle();
  auto fwd = [=] {
    for (std::size_t i = 0; i < oi->data.size(); ++i) oi->data[i] = ai->data[i] * bi->data[i];
  };
  auto bwd = [=] {
    const auto& dz = oi->grad;
    if (ai->requires_grad) {
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < dz.size(); ++i) ga[i] += dz[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& gb = grad_of(bi);
      for (std::size_t i = 0; i < dz.size(); ++i) gb[i] += dz[i] * ai->data[i];
    }
  };
  return finish(OpKind::Mul, out, {ai, bi}, fwd, bwd);
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = make_tensor(a.shape(), a.requires_grad());
  Impl ai = a.handle(), oi = out.handle();
  auto fwd = [=] {
    for (std::size_t i = 0; i < oi->data.size(); ++i) oi->data[i] = ai->data[i] * factor;
  };
  auto bwd = [=] {
    auto& ga = grad_of(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i] * factor;
  };
  return finish(OpKind::Scale, out, {ai}, fwd, bwd);
}

Tensor transpose(const Tensor& a) {
  const Shape& as = a.shape();
  if (as.size() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(as));
  const std::size_t r = as[as.size() - 2], c = as.back();
  const std::size_t batch = a.numel() / (r * c);
  Shape out_shape = as;
  std::swap(out_shape[as.size() - 2], out_shape[as.size() - 1]);
  Tensor out = make_tensor(out_shape, a.requires_grad());
  Impl ai = a.handle(), oi = out.handle();
  auto fwd = [=] {
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMatMap X(ai->data.data() + b * r * c, r, c);
      MatMap Y(oi->data.data() + b * r * c, c, r);
      Y = X.transpose();
    }
  };
  auto bwd = [=] {
    auto& ga = grad_of(ai);
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMatMap dY(oi->grad.data() + b * r * c, c, r);
      MatMap dX(ga.data() + b * r * c, r, c);
      dX += dY.transpose();
    }
  };
  return finish(OpKind::Transpose, out, {ai}, fwd, bwd);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out = make_tensor(std::move(shape), a.requires_grad());
  Impl ai = a.handle(), oi = out.handle();
  auto fwd = [=] { oi->data = ai->data; };
  auto bwd = [=] {
    auto& ga = grad_of(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
  };
  return finish(OpKind::Reshape, out, {ai}, fwd, bwd);
}

Tensor embedding(const Tensor& table, std::span<const int> ids, Shape lead) {
  if (table.rank() != 2) {
    throw DimensionError("embedding table must be rank 2, got " + shape_str(table.shape()));
  }
  if (shape_numel(lead) != ids.size()) {
    throw DimensionError("embedding lead shape " + shape_str(lead) + " does not match " +
                         std::to_string(ids.size()) + " ids");
  }
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("embedding id " + std::to_string(id) + " outside [0, " +
                       std::to_string(rows) + ")");
    }
  }
  Shape out_shape = std::move(lead);
  out_shape.push_back(d);
  Tensor out = make_tensor(out_shape, table.requires_grad());
  Impl ti = table.handle(), oi = out.handle();
  std::vector<int> idx(ids.begin(), ids.end());
  auto fwd = [=] {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(ti->data.data() + static_cast<std::size_t>(idx[i]) * d, d,
                  oi->data.data() + i * d);
    }
  };
  auto bwd = [=] {
    auto& gt = grad_of(ti);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* g = gt.data() + static_cast<std::size_t>(idx[i]) * d;
      const double* dy = oi->grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) g[j] += dy[j];
    }
  };
  return finish(OpKind::Embedding, out, {ti}, fwd, bwd);
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = resolve_axis(axis, x.rank());
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];

  Tensor out = make_tensor(s, x.requires_grad());
  Impl xi = x.handle(), oi = out.handle();
  auto fwd = [=] {
    const double* in = xi->data.data();
    double* y = oi->data.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t c = 0; c < inner; ++c) {
        const std::size_t base = o * n * inner + c;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double e = std::exp(in[base + j * inner] - mx);
          y[base + j * inner] = e;
          total += e;
        }
        const double inv = 1.0 / total;
        for (std::size_t j = 0; j < n; ++j) y[base + j * inner] *= inv;
      }
    }
  };
  auto bwd = [=] {
    const double* y = oi->data.data();
    const double* dy = oi->grad.data();
    double* dx = grad_of(xi).data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t c = 0; c < inner; ++c) {
        const std::size_t base = o * n * inner + c;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t p = base + j * inner;
          dx[p] += y[p] * (dy[p] - dot);
        }
      }
    }
  };
  return finish(OpKind::Softmax, out, {xi}, fwd, bwd);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().empty() ? 0 : x.shape().back();
  if (d < 2) throw DimensionError("layer_norm needs a last axis of at least 2, got " + shape_str(x.shape()));
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm affine shapes " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match width " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  Tensor out = make_tensor(x.shape(), any_requires_grad({&x, &gain, &bias}));
  Impl xi = x.handle(), gi = gain.handle(), bi = bias.handle(), oi = out.handle();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);

  auto fwd = [=] {
    const double* in = xi->data.data();
    const double* g = gi->data.data();
    const double* b = bi->data.data();
    double* y = oi->data.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = in + r * d;
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += row[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= static_cast<double>(d);
      const double rs = 1.0 / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (std::size_t j = 0; j < d; ++j) {
        const double h = (row[j] - mean) * rs;
        (*xhat)[r * d + j] = h;
        y[r * d + j] = h * g[j] + b[j];
      }
    }
  };
  auto bwd = [=] {
    const double* dy = oi->grad.data();
    const double* g = gi->data.data();
    const std::vector<double>& h = *xhat;
    if (gi->requires_grad || bi->requires_grad) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          if (gi->requires_grad) grad_of(gi)[j] += dy[r * d + j] * h[r * d + j];
          if (bi->requires_grad) grad_of(bi)[j] += dy[r * d + j];
        }
      }
    }
    if (xi->requires_grad) {
      double* dx = grad_of(xi).data();
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = dy[r * d + j] * g[j];
          mean_dh += dh;
          mean_dh_h += dh * h[r * d + j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        const double rs = (*rstd)[r];
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = dy[r * d + j] * g[j];
          dx[r * d + j] += rs * (dh - mean_dh - h[r * d + j] * mean_dh_h);
        }
      }
    }
  };
  return finish(OpKind::LayerNorm, out, {xi, gi, bi}, fwd, bwd);
}

Tensor relu(const Tensor& x) {
  Tensor out = make_tensor(x.shape(), x.requires_grad());
  Impl xi = x.handle(), oi = out.handle();
  auto fwd = [=] {
    if (KinkProbe* probe = active_kink_probe()) probe->fold(xi->data);
    for (std::size_t i = 0; i < oi->data.size(); ++i) oi->data[i] = std::max(0.0, xi->data[i]);
  };
  auto bwd = [=] {
    auto& g = grad_of(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xi->data[i] > 0.0) g[i] += oi->grad[i];
    }
  };
  return finish(OpKind::Relu, out, {xi}, fwd, bwd);
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, double label_smoothing,
                     int pad_id) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy expects logits [T x V], got " + shape_str(logits.shape()));
  }
  const std::size_t rows = logits.dim(0), V = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy got " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ContractError("label smoothing must lie in [0, 1)");
  }
  for (int t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw IndexError("target id " + std::to_string(t) + " outside [0, " + std::to_string(V) + ")");
    }
  }
  Tensor out = make_tensor({}, logits.requires_grad());
  Impl li = logits.handle(), oi = out.handle();
  std::vector<int> tgt(targets.begin(), targets.end());
  std::size_t count = 0;
  for (int t : tgt) count += (t != pad_id);
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  const double eps = label_smoothing;

  auto fwd = [=] {
    double total = 0.0;
    const double* x = li->data.data();
    for (std::size_t r = 0; r < rows; ++r) {
      if (tgt[r] == pad_id) continue;
      const double* row = x + r * V;
      double mx = row[0];
      for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
      double se = 0.0;
      for (std::size_t j = 0; j < V; ++j) se += std::exp(row[j] - mx);
      const double lse = mx + std::log(se);
      double sum_logp = 0.0;
      for (std::size_t j = 0; j < V; ++j) {
        const double lp = row[j] - lse;
        sum_logp += lp;
        (*probs)[r * V + j] = std::exp(lp);
      }
      const double nll = -(row[tgt[r]] - lse);
      total += (1.0 - eps) * nll - eps * sum_logp / static_cast<double>(V);
    }
    oi->data[0] = count ? total / static_cast<double>(count) : 0.0;
  };
  auto bwd = [=] {
    if (!count) return;
    const double scale_factor = oi->grad[0] / static_cast<double>(count);
    auto& g = grad_of(li);
    const double uniform = eps / static_cast<double>(V);
    for (std::size_t r = 0; r < rows; ++r) {
      if (tgt[r] == pad_id) continue;
      for (std::size_t j = 0; j < V; ++j) {
        double q = uniform;
        if (static_cast<int>(j) == tgt[r]) q += 1.0 - eps;
        g[r * V + j] += scale_factor * ((*probs)[r * V + j] - q);
      }
    }
  };
  return finish(OpKind::CrossEntropy, out, {li}, fwd, bwd);
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw DimensionError("concat needs rank >= 1");
  Shape lead(first.begin(), first.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool needs_grad = false;
  std::vector<Impl> operands;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      throw DimensionError("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(s));
    }
    widths.push_back(s.back());
    total += s.back();
    needs_grad = needs_grad || p.requires_grad();
    operands.push_back(p.handle());
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out = make_tensor(out_shape, needs_grad);
  Impl oi = out.handle();
  const std::size_t rows = shape_numel(lead);

  auto fwd = [=] {
    std::size_t off = 0;
    for (std::size_t p = 0; p < operands.size(); ++p) {
      const std::size_t w = widths[p];
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(operands[p]->data.data() + r * w, w, oi->data.data() + r * total + off);
      }
      off += w;
    }
  };
  auto bwd = [=] {
    std::size_t off = 0;
    for (std::size_t p = 0; p < operands.size(); ++p) {
      const std::size_t w = widths[p];
      if (operands[p]->requires_grad) {
        auto& g = grad_of(operands[p]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < w; ++j) g[r * w + j] += oi->grad[r * total + off + j];
        }
      }
      off += w;
    }
  };
  return finish(OpKind::Concat, out, operands, fwd, bwd);
}

std::vector<Tensor> split_last(const Tensor& x, const std::vector<std::size_t>& sizes) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("split needs rank >= 1");
  const std::size_t width = s.back();
  std::size_t sum_sizes = 0;
  for (auto w : sizes) sum_sizes += w;
  if (sum_sizes != width) {
    throw DimensionError("split sizes do not add up to last extent of " + shape_str(s));
  }
  const std::size_t rows = x.numel() / width;
  std::vector<Tensor> pieces;
  std::size_t off = 0;
  for (auto w : sizes) {
    Shape ps = s;
    ps.back() = w;
    Tensor out = make_tensor(ps, x.requires_grad());
    Impl xi = x.handle(), oi = out.handle();
    auto fwd = [=] {
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(xi->data.data() + r * width + off, w, oi->data.data() + r * w);
      }
    };
    auto bwd = [=] {
      auto& g = grad_of(xi);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) g[r * width + off + j] += oi->grad[r * w + j];
      }
    };
    pieces.push_back(finish(OpKind::Split, out, {xi}, fwd, bwd));
    off += w;
  }
  return pieces;
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout rate must lie in [0, 1)");
  if (p == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  std::bernoulli_distribution keep(1.0 - p);
  const double kept = 1.0 / (1.0 - p);
  for (auto& m : *mask) m = keep(rng) ? kept : 0.0;
  Tensor out = make_tensor(x.shape(), x.requires_grad());
  Impl xi = x.handle(), oi = out.handle();
  auto fwd = [=] {
    for (std::size_t i = 0; i < oi->data.size(); ++i) oi->data[i] = xi->data[i] * (*mask)[i];
  };
  auto bwd = [=] {
    auto& g = grad_of(xi);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * (*mask)[i];
  };
  return finish(OpKind::Dropout, out, {xi}, fwd, bwd);
}

Tensor sum(const Tensor& x) {
  Tensor out = make_tensor({}, x.requires_grad());
  Impl xi = x.handle(), oi = out.handle();
  auto fwd = [=] {
    double total = 0.0;
    for (double v : xi->data) total += v;
    oi->data[0] = total;
  };
  auto bwd = [=] {
    auto& g = grad_of(xi);
    for (auto& v : g) v += oi->grad[0];
  };
  return finish(OpKind::Sum, out, {xi}, fwd, bwd);
}

}  // namespace xattn
