#include "xattn/gradcheck.hpp"

#include <functional>
#include <random>

#include "xattn/hash.hpp"
#include "xattn/model.hpp"
#include "xattn/train.hpp"

namespace xattn {

namespace {

class Inputs {
 public:
  explicit Inputs(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double std = 1.0) {
    std::normal_distribution<double> d(0.0, std);
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng_);
    return Tensor::from(std::move(shape), std::move(v));
  }

  // Values bounded away from zero, for ops with a kink there.
  Tensor away_from_zero(Shape shape) {
    Tensor t = normal(std::move(shape));
    for (auto& x : t.mutable_data()) x = x < 0 ? x - 0.1 : x + 0.1;
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

Tensor weighted(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

}  // namespace

std::vector<GradcheckCase> gradcheck_suite(const FiniteDiffOptions& options) {
  std::vector<GradcheckCase> out;
  Inputs in(mix_seed(options.seed, 0x67c));
  auto run = [&](const std::string& name, const std::function<Tensor()>& fn, std::vector<Tensor> params) {
    out.push_back({name, finite_diff_check(fn, std::move(params), options)});
  };

  {
    Tensor a = in.normal({6, 8}), b = in.normal({8, 7}), w = in.normal({6, 7});
    run("matmul", [=] { return weighted(matmul(a, b), w); }, {a, b});
  }
  {
    Tensor a = in.normal({3, 4, 5}), b = in.normal({3, 5, 4}), w = in.normal({3, 4, 4});
    run("matmul_batched", [=] { return weighted(matmul(a, b), w); }, {a, b});
  }
  {
    Tensor a = in.normal({10, 8}), b = in.normal({10, 8}), w = in.normal({10, 8});
    run("add", [=] { return weighted(add(a, b), w); }, {a, b});
  }
  {
    Tensor a = in.normal({3, 5, 8}), b = in.normal({8}), w = in.normal({3, 5, 8});
    run("add_broadcast", [=] { return weighted(add(a, b), w); }, {a, b});
  }
  {
    Tensor a = in.normal({10, 6}), b = in.normal({10, 6}), w = in.normal({10, 6});
    run("mul", [=] { return weighted(mul(a, b), w); }, {a, b});
  }
  {
    Tensor a = in.normal({12, 10}), w = in.normal({12, 10});
    run("scale", [=] { return weighted(scale(a, -1.7), w); }, {a});
  }
  {
    Tensor a = in.normal({2, 7, 8}), w = in.normal({2, 8, 7});
    run("transpose", [=] { return weighted(transpose(a), w); }, {a});
  }
  {
    Tensor a = in.normal({6, 20}), w = in.normal({4, 30});
    run("reshape", [=] { return weighted(reshape(a, {4, 30}), w); }, {a});
  }
  {
    Tensor table = in.normal({15, 8}), w = in.normal({3, 4, 8});
    const std::vector<int> ids{0, 3, 3, 7, 14, 1, 0, 2, 9, 9, 9, 5};
    run("embedding", [=] { return weighted(embedding(table, ids, {3, 4}), w); }, {table});
  }
  {
    Tensor a = in.normal({4, 5, 6}, 2.0), w = in.normal({4, 5, 6});
    run("softmax", [=] { return weighted(softmax(a), w); }, {a});
  }
  {
    Tensor x = in.normal({4, 6, 8}), g = in.normal({8}), b = in.normal({8}), w = in.normal({4, 6, 8});
    run("layer_norm", [=] { return weighted(layer_norm(x, g, b, 1e-5), w); }, {x, g, b});
  }
  {
    Tensor a = in.away_from_zero({10, 12}), w = in.normal({10, 12});
    run("relu", [=] { return weighted(relu(a), w); }, {a});
  }
  {
    Tensor logits = in.normal({14, 9});
    const std::vector<int> targets{1, 4, 0, 8, 2, 2, 7, 0, 5, 3, 6, 1, 0, 4};
    run("cross_entropy", [=] { return cross_entropy(logits, targets, 0.0, 0); }, {logits});
    run("cross_entropy_smoothed", [=] { return cross_entropy(logits, targets, 0.1, 0); }, {logits});
  }
  {
    Tensor a = in.normal({5, 6}), b = in.normal({5, 4}), c = in.normal({5, 10}), w = in.normal({5, 20});
    run("concat", [=] { return weighted(concat_last({a, b, c}), w); }, {a, b, c});
  }
  {
    Tensor a = in.normal({6, 18}), w0 = in.normal({6, 5}), w1 = in.normal({6, 13});
    run("split", [=] {
      auto parts = split_last(a, {5, 13});
      return add(weighted(parts[0], w0), weighted(parts[1], w1));
    }, {a});
  }
  {
    Tensor a = in.normal({10, 12}), w = in.normal({10, 12});
    run("dropout", [=] {
      std::mt19937_64 rng(99);
      return weighted(dropout(a, 0.3, rng), w);
    }, {a});
  }
  {
    Tensor a = in.normal({11, 10});
    run("sum", [=] { return sum(mul(a, a)); }, {a});
  }

  {
    ModelConfig mc;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.n_enc_layers = 1;
    mc.n_dec_layers = 1;
    mc.d_ff = 32;
    mc.max_len = 16;
    mc.src_vocab_size = 14;
    mc.tgt_vocab_size = 12;
    Model model = build_model(mc, mix_seed(options.seed, 0x30de1));
    const std::vector<std::vector<int>> src{{4, 5, 6, 7, 13}, {8, 9, 4}};
    const std::vector<std::vector<int>> tgt{{11, 10, 4, 5}, {6, 7, 8, 9, 10, 11}};
    std::vector<Tensor> params;
    for (auto& e : model.registry().entries()) params.push_back(e.tensor);
    FiniteDiffOptions model_opts = options;
    model_opts.samples = std::max<std::size_t>(options.samples, 200);
    out.push_back({"model_loss",
                   finite_diff_check([&] { return batch_loss(model, src, tgt, 0.0); }, params, model_opts)});
    for (auto& p : params) p.set_requires_grad(false);
  }
  return out;
}

}  // namespace xattn
