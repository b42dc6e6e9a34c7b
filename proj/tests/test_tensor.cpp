#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "xattn/gradcheck.hpp"
#include "xattn/tensor.hpp"

using namespace xattn;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, bool rg = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor::from(std::move(shape), std::move(v), rg);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Matmul, HandExample) {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {0, 1, 1, 0});
  EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{2, 1, 4, 3}));
}

TEST(Matmul, IdentityAndZero) {
  Tensor a = randn({3, 4}, 1);
  Tensor eye = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 4 + i] = 1.0;
  EXPECT_TRUE(matmul(a, eye).bit_equal(a));
  const Tensor z = matmul(a, Tensor::zeros({4, 5}));
  for (double x : z.data()) EXPECT_EQ(x, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x5"), std::string::npos) << msg;
  }
}

TEST(Softmax, Values) {
  Tensor s = softmax(Tensor::from({3}, {1, 2, 3}));
  EXPECT_NEAR(s[0], 0.090030573170380457998, 1e-15);
  EXPECT_NEAR(s[1], 0.24472847105479765247, 1e-15);
  EXPECT_NEAR(s[2], 0.66524095577482188953, 1e-15);
  Tensor h = softmax(Tensor::from({2}, {0, 0}));
  EXPECT_EQ(h[0], 0.5);
  EXPECT_EQ(h[1], 0.5);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Tensor x = randn({5, 7}, 2);
  Tensor shifted = x.clone();
  for (auto& v : shifted.mutable_data()) v += 123.25;
  Tensor a = softmax(x), b = softmax(shifted);
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      sum += a[r * 7 + c];
      EXPECT_NEAR(a[r * 7 + c], b[r * 7 + c], 1e-12);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(LayerNorm, Values) {
  Tensor one = Tensor::full({3}, 1.0), zero = Tensor::zeros({3});
  Tensor y = layer_norm(Tensor::from({3}, {1, 2, 4}), one, zero, 1e-5);
  EXPECT_NEAR(y[0], -1.0690415314502974744, 1e-12);
  EXPECT_NEAR(y[1], -0.26726038286257436859, 1e-12);
  EXPECT_NEAR(y[2], 1.336301914312871843, 1e-12);

  Tensor two = layer_norm(Tensor::from({2}, {1, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-12);
  EXPECT_NEAR(two[0], -1.0, 1e-9);
  EXPECT_NEAR(two[1], 1.0, 1e-9);

  Tensor c = layer_norm(Tensor::full({4}, 7.0), Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-5);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, SliceMoments) {
  const std::size_t d = 16;
  Tensor y = layer_norm(randn({6, d}, 3), Tensor::full({d}, 1.0), Tensor::zeros({d}), 1e-5);
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += y[r * d + c];
    mean /= d;
    for (std::size_t c = 0; c < d; ++c) var += (y[r * d + c] - mean) * (y[r * d + c] - mean);
    var /= d;
    EXPECT_LT(std::abs(mean), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(CrossEntropy, SmoothedOracle) {
  const std::vector<int> t{0};
  EXPECT_NEAR(cross_entropy(Tensor::from({1, 3}, {1, 0, 0}), t, 0.1, -1).item(), 0.61811138059871775572, 1e-12);
}

TEST(CrossEntropy, UniformAndPeaked) {
  const std::vector<int> t{3, 1};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({2, 5}), t, 0.0, -1).item(), std::log(5.0), 1e-14);
  Tensor peaked = Tensor::zeros({2, 5});
  peaked.mutable_data()[3] = 60.0;
  peaked.mutable_data()[5 + 1] = 60.0;
  EXPECT_LT(cross_entropy(peaked, t, 0.0, -1).item(), 1e-20);
}

TEST(CrossEntropy, PadRowsContributeNothing) {
  Tensor logits = randn({3, 4}, 4);
  const std::vector<int> with_pad{2, 0, 1};
  Tensor two = Tensor::from({2, 4}, {logits[0], logits[1], logits[2], logits[3], logits[8], logits[9], logits[10],
                                     logits[11]});
  const std::vector<int> without{2, 1};
  EXPECT_NEAR(cross_entropy(logits, with_pad, 0.1, 0).item(), cross_entropy(two, without, 0.1, 0).item(), 1e-14);
}

TEST(CrossEntropy, OutOfRangeTarget) {
  const std::vector<int> t{7};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), t, 0.0, 0), IndexError);
}

TEST(Backward, LinearAndQuadratic) {
  Tensor x = randn({4, 3}, 5, true);
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope s(tape);
      loss = sum(x);
    }
    tape.backward(loss);
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  }
  x.drop_grad();
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope s(tape);
      loss = sum(mul(x, x));
    }
    tape.backward(loss);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i], 2.0 * x[i]);
  }
}

TEST(Backward, AccumulatesUntilZeroed) {
  Tensor x = randn({3}, 6, true);
  for (int round = 0; round < 2; ++round) {
    Tape tape;
    Tensor loss;
    {
      TapeScope s(tape);
      loss = sum(x);
    }
    tape.backward(loss);
  }
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
  x.zero_grad();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x = randn({3}, 7, true);
  Tape tape;
  Tensor y;
  {
    TapeScope s(tape);
    y = scale(x, 2.0);
  }
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Tape, ConstantsAreNotRecorded) {
  Tensor frozen = randn({3, 3}, 8);
  Tensor live = randn({3, 3}, 9, true);
  Tape tape;
  Tensor loss;
  {
    TapeScope s(tape);
    Tensor c = matmul(frozen, frozen);
    EXPECT_TRUE(tape.empty());
    loss = sum(matmul(c, live));
  }
  EXPECT_EQ(tape.size(), 2u);
  tape.backward(loss);
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_TRUE(live.has_grad());
}

TEST(Tape, TopologicalOrderAndBitIdenticalReplay) {
  Tensor x = randn({4, 6}, 10, true);
  Tensor w = randn({6, 6}, 11, true);
  Tensor g = Tensor::full({6}, 1.0, true), b = Tensor::zeros({6}, true);
  Tape tape;
  Tensor loss;
  {
    TapeScope s(tape);
    Tensor h = relu(layer_norm(matmul(x, w), g, b, 1e-5));
    loss = sum(mul(softmax(h), h));
  }
  std::set<std::uint64_t> seen{x.id(), w.id(), g.id(), b.id()};
  std::vector<std::vector<double>> outputs;
  for (const auto& rec : tape.records()) {
    for (auto in : rec.inputs) EXPECT_TRUE(seen.count(in)) << op_name(rec.op);
    seen.insert(rec.output);
    outputs.emplace_back(rec.result->data);
  }
  tape.replay();
  for (std::size_t i = 0; i < tape.size(); ++i) EXPECT_EQ(tape.records()[i].result->data, outputs[i]);
}

TEST(Determinism, SameInputsSameGradients) {
  auto run = [] {
    Tensor x = randn({5, 4}, 12, true);
    Tensor w = randn({4, 3}, 13, true);
    Tape tape;
    Tensor loss;
    {
      TapeScope s(tape);
      const std::vector<int> t{0, 1, 2, 1, 0};
      loss = cross_entropy(matmul(x, w), t, 0.1, -1);
    }
    tape.backward(loss);
    return std::pair{values(x), std::vector<double>(w.grad().begin(), w.grad().end())};
  };
  EXPECT_EQ(run(), run());
}

TEST(Dropout, IdentityAtZeroAndInverted) {
  Tensor x = randn({50, 40}, 14);
  std::mt19937_64 rng(1);
  EXPECT_TRUE(dropout(x, 0.0, rng).bit_equal(x));
  Tensor ones = Tensor::full({20000}, 1.0);
  Tensor y = dropout(ones, 0.25, rng);
  double mean = 0.0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
    mean += v;
  }
  EXPECT_NEAR(mean / 20000, 1.0, 0.03);
}

TEST(ConcatSplit, RoundTrip) {
  Tensor a = randn({3, 2}, 15), b = randn({3, 5}, 16);
  auto parts = split_last(concat_last({a, b}), {2, 5});
  EXPECT_TRUE(parts[0].bit_equal(a));
  EXPECT_TRUE(parts[1].bit_equal(b));
}

TEST(FiniteDiff, QuadraticPassesTightly) {
  Tensor x = randn({30}, 17);
  FiniteDiffOptions opts;
  opts.tol = 1e-6;
  const auto rep = finite_diff_check([&] { return sum(mul(x, x)); }, {x}, opts);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
  EXPECT_EQ(rep.checked, 30u);
}

TEST(FiniteDiff, EveryOpAndModelLossAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    FiniteDiffOptions opts;
    opts.seed = seed;
    for (const auto& c : gradcheck_suite(opts)) {
      EXPECT_TRUE(c.report.pass) << c.name << " seed " << seed << " rel " << c.report.max_rel_err;
      EXPECT_GE(c.report.checked, 100u) << c.name;
    }
  }
}

TEST(FiniteDiff, CorruptedBackwardRuleFails) {
  for (OpKind op : {OpKind::MatMul, OpKind::Softmax, OpKind::LayerNorm, OpKind::Relu, OpKind::Embedding}) {
    set_backward_fault(op, 1.5);
    bool model_failed = false, op_failed = false;
    for (const auto& c : gradcheck_suite({})) {
      if (c.name == "model_loss") model_failed = !c.report.pass;
      if (c.name == op_name(op)) op_failed = !c.report.pass;
    }
    clear_backward_fault();
    EXPECT_TRUE(model_failed) << op_name(op);
    EXPECT_TRUE(op_failed) << op_name(op);
  }
}

TEST(FiniteDiff, KinkCrossingsAreSkippedNotScored) {
  // relu at exactly 0: the +-h probe straddles the kink.
  Tensor x = Tensor::from({3}, {0.0, 1.0, -1.0});
  const auto rep = finite_diff_check([&] { return sum(relu(x)); }, {x});
  EXPECT_EQ(rep.skipped_kinks, 1u);
  EXPECT_EQ(rep.checked, 2u);
  EXPECT_TRUE(rep.pass);
}
