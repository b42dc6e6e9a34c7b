#include <gtest/gtest.h>

#include <map>
#include <set>

#include "xattn/error.hpp"
#include "xattn/model.hpp"

using namespace xattn;

namespace {

ModelConfig toy() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 16;
  c.max_len = 16;
  c.src_vocab_size = 10;
  c.tgt_vocab_size = 12;
  return c;
}

// Closed-form parameter counts of the toy configuration.
constexpr std::size_t kToySrc = 10 * 8 + 16 * 8 + 2 * 8;
constexpr std::size_t kToyTgt = 12 * 8 + 16 * 8 + 2 * 8;
constexpr std::size_t kToyAttn = 4 * (8 * 8 + 8);
constexpr std::size_t kToyFF = (8 * 16 + 16) + (16 * 8 + 8);
constexpr std::size_t kToyEnc = kToyAttn + 2 * 8 + kToyFF + 2 * 8;
constexpr std::size_t kToyDec = kToyEnc;
constexpr std::size_t kToyXattn = kToyAttn + 2 * 8;

std::vector<double> logits_of(const Model& m, std::vector<int> src, std::vector<int> tgt) {
  Tensor t = forward(m, src, tgt);
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST(Layout, ToyCountsMatchClosedForm) {
  const Model m = build_model(toy(), 1);
  EXPECT_EQ(kToyXattn, 304u);
  EXPECT_EQ(count_params(m, {GroupTag::Xattn}).count, kToyXattn);
  EXPECT_EQ(count_params(m, {GroupTag::Src}).count, kToySrc);
  EXPECT_EQ(count_params(m, {GroupTag::Tgt}).count, kToyTgt);
  EXPECT_EQ(count_params(m, {GroupTag::Enc}).count, kToyEnc);
  EXPECT_EQ(count_params(m, {GroupTag::Dec}).count, kToyDec);
  EXPECT_EQ(m.registry().total_scalars(), 1968u);
  EXPECT_EQ(count_params(m, TagSet::all()).fraction, 1.0);
  const auto x = count_params(m, {GroupTag::Xattn});
  EXPECT_EQ(x.fraction, 304.0 / 1968.0);
  EXPECT_EQ(count_params(parameter_layout(toy()), {GroupTag::Xattn}).count, 304u);
}

TEST(Layout, GroupsPartitionTheRegistry) {
  const Model m = build_model(toy(), 1);
  std::size_t sum = 0;
  std::set<std::string> names;
  for (GroupTag t : TagSet::all().tags()) {
    for (const auto& p : params_by_tags(m, {t})) {
      EXPECT_EQ(p.tag, t);
      EXPECT_TRUE(names.insert(p.name).second) << p.name;
      sum += p.tensor.numel();
    }
  }
  EXPECT_EQ(sum, m.registry().total_scalars());
  EXPECT_EQ(names.size(), m.registry().size());
  EXPECT_TRUE(params_by_tags(m, {}).empty());
  EXPECT_EQ(params_by_tags(m, TagSet::all()).size(), m.registry().size());
}

TEST(Layout, TagAssignment) {
  const Model m = build_model(toy(), 1);
  const std::map<std::string, GroupTag> expect{
      {"src.embed_tokens", GroupTag::Src},        {"src.embed_positions", GroupTag::Src},
      {"src.embed_ln.gain", GroupTag::Src},       {"tgt.embed_tokens", GroupTag::Tgt},
      {"tgt.embed_ln.bias", GroupTag::Tgt},       {"enc.0.self_attn.q.weight", GroupTag::Enc},
      {"enc.0.ff_ln.gain", GroupTag::Enc},        {"dec.0.self_attn.v.bias", GroupTag::Dec},
      {"dec.0.ff2.weight", GroupTag::Dec},        {"dec.0.cross_attn.k.weight", GroupTag::Xattn},
      {"dec.0.cross_attn_ln.gain", GroupTag::Xattn}, {"dec.0.cross_attn.o.bias", GroupTag::Xattn}};
  for (const auto& [name, tag] : expect) EXPECT_EQ(m.registry().at(name).tag, tag) << name;
}

TEST(Layout, OrderFollowsDefinition) {
  const auto layout = parameter_layout(toy());
  const Model m = build_model(toy(), 3);
  ASSERT_EQ(layout.size(), m.registry().size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    EXPECT_EQ(layout[i].name, m.registry().entries()[i].name);
    EXPECT_EQ(layout[i].shape, m.registry().entries()[i].tensor.shape());
  }
}

TEST(Build, DeterministicPerSeed) {
  const Model a = build_model(toy(), 42), b = build_model(toy(), 42), c = build_model(toy(), 43);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.registry().size(); ++i) {
    EXPECT_TRUE(a.registry().entries()[i].tensor.bit_equal(b.registry().entries()[i].tensor));
    any_diff = any_diff || !a.registry().entries()[i].tensor.bit_equal(c.registry().entries()[i].tensor);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Build, InitRanges) {
  const ModelConfig c = toy();
  const Model m = build_model(c, 5);
  for (const auto& spec : parameter_layout(c)) {
    const Tensor& t = m.param(spec.name);
    switch (spec.init) {
      case ParamSpec::Init::Zero:
        for (double v : t.data()) EXPECT_EQ(v, 0.0) << spec.name;
        break;
      case ParamSpec::Init::One:
        for (double v : t.data()) EXPECT_EQ(v, 1.0) << spec.name;
        break;
      case ParamSpec::Init::Weight: {
        const double bound = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
        for (double v : t.data()) EXPECT_LE(std::abs(v), bound) << spec.name;
        break;
      }
      case ParamSpec::Init::Embedding: {
        double sq = 0.0;
        for (double v : t.data()) sq += v * v;
        const double std = std::sqrt(sq / t.numel());
        EXPECT_NEAR(std, 1.0 / std::sqrt(8.0), 0.1) << spec.name;
        break;
      }
    }
  }
}

TEST(Build, EmbedInitScaleOnlyScalesEmbeddingTables) {
  ModelConfig c = toy();
  const Model base = build_model(c, 5);
  c.embed_init_scale = 0.25;
  const Model scaled = build_model(c, 5);
  for (const auto& spec : parameter_layout(c)) {
    const auto a = base.param(spec.name).data(), b = scaled.param(spec.name).data();
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_DOUBLE_EQ(b[i], spec.init == ParamSpec::Init::Embedding ? 0.25 * a[i] : a[i]) << spec.name;
    }
  }
}

TEST(Build, InvalidConfigs) {
  ModelConfig c = toy();
  c.n_heads = 3;
  EXPECT_THROW(build_model(c, 1), ConfigError);
  c = toy();
  c.n_enc_layers = 0;
  EXPECT_THROW(build_model(c, 1), ConfigError);
  c = toy();
  c.embed_init_scale = 0.0;
  EXPECT_THROW(build_model(c, 1), ConfigError);
}

TEST(Forward, ShapeContract) {
  const Model m = build_model(toy(), 1);
  Tensor out = forward(m, std::vector<int>{4, 5, 6}, std::vector<int>{1, 7, 8, 9, 10});
  EXPECT_EQ(out.shape(), (Shape{5, 12}));
}

TEST(Forward, RejectsOutOfRangeInputs) {
  const Model m = build_model(toy(), 1);
  EXPECT_THROW(forward(m, std::vector<int>{4, 10}, std::vector<int>{1}), ContractError);
  EXPECT_THROW(forward(m, std::vector<int>{4}, std::vector<int>{12}), ContractError);
  EXPECT_THROW(forward(m, std::vector<int>(17, 4), std::vector<int>{1}), ContractError);
}

TEST(Forward, Causality) {
  const Model m = build_model(toy(), 2);
  const std::vector<int> src{4, 5, 6, 7};
  const auto a = logits_of(m, src, {1, 5, 6, 7, 8});
  const auto b = logits_of(m, src, {1, 5, 6, 11, 4});
  for (std::size_t i = 0; i < 3 * 12; ++i) EXPECT_EQ(a[i], b[i]);
  bool later_changed = false;
  for (std::size_t i = 3 * 12; i < a.size(); ++i) later_changed = later_changed || a[i] != b[i];
  EXPECT_TRUE(later_changed);
}

TEST(Forward, SourceOrderMatters) {
  const Model m = build_model(toy(), 3);
  EXPECT_NE(logits_of(m, {4, 5, 6, 7}, {1, 8}), logits_of(m, {7, 6, 5, 4}, {1, 8}));
}

TEST(Forward, PaddedBatchMatchesSingle) {
  const Model m = build_model(toy(), 4);
  const std::vector<std::vector<int>> src{{4, 5, 6, 7, 8}, {9, 4}};
  const std::vector<std::vector<int>> tgt{{1, 5, 6}, {1, 7, 8, 9, 10, 11}};
  const TokenBatch sb = TokenBatch::pack(src), tb = TokenBatch::pack(tgt);
  Tensor batched = decode(m, encode(m, sb), sb, tb);
  const std::size_t T = tb.length, V = 12;
  for (std::size_t r = 0; r < 2; ++r) {
    const auto single = logits_of(m, src[r], tgt[r]);
    for (std::size_t t = 0; t < tgt[r].size(); ++t) {
      for (std::size_t v = 0; v < V; ++v) {
        EXPECT_NEAR(batched[(r * T + t) * V + v], single[t * V + v], 1e-12);
      }
    }
  }
}

TEST(Forward, TiedOutputProjection) {
  Model m = build_model(toy(), 5);
  const std::vector<int> src{4, 5}, tgt{1, 6};
  const auto before = logits_of(m, src, tgt);
  // row 11 never appears as an input token, so only the projection sees it
  auto emb = m.registry().at("tgt.embed_tokens").tensor;
  for (std::size_t j = 0; j < 8; ++j) emb.mutable_data()[11 * 8 + j] += 1.0;
  const auto after = logits_of(m, src, tgt);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t v = 0; v < 12; ++v) {
      if (v == 11) {
        EXPECT_NE(before[t * 12 + v], after[t * 12 + v]);
      } else {
        EXPECT_EQ(before[t * 12 + v], after[t * 12 + v]);
      }
    }
  }
  for (const auto& e : m.registry().entries()) {
    if (e.name != "tgt.embed_tokens") EXPECT_NE(e.tensor.shape(), (Shape{12, 8})) << e.name;
  }
}

TEST(Forward, CrossAttentionConstantForZeroMemory) {
  Model a = build_model(toy(), 6);
  a.set_param("dec.0.cross_attn.v.bias", Tensor::zeros({8}));
  Model b = a;
  b.registry() = a.registry().clone();
  b.set_param("dec.0.cross_attn.k.weight", Tensor::full({8, 8}, 0.3));
  b.set_param("dec.0.cross_attn.v.weight", Tensor::full({8, 8}, -0.7));
  const TokenBatch src = TokenBatch::pack({{4, 5, 6}});
  const TokenBatch tgt = TokenBatch::pack({{1, 7, 8}});
  Tensor zero_memory = Tensor::zeros({1, 3, 8});
  EXPECT_TRUE(decode(a, zero_memory, src, tgt).bit_equal(decode(b, zero_memory, src, tgt)));
}

TEST(Decode, ImmediateEosAndCap) {
  Model m = build_model(toy(), 7);
  Tensor bias = Tensor::from({8}, {1, -1, 1, -1, 1, -1, 1, -1});
  m.set_param("dec.0.ff_ln.gain", Tensor::zeros({8}));
  m.set_param("dec.0.ff_ln.bias", bias);
  Tensor emb = Tensor::zeros({12, 8});
  for (std::size_t j = 0; j < 8; ++j) emb.mutable_data()[SpecialTokens::kEos * 8 + j] = bias[j];
  m.set_param("tgt.embed_tokens", emb);
  EXPECT_TRUE(decode_greedy(m, std::vector<int>{4, 5}, 10).empty());

  for (std::size_t j = 0; j < 8; ++j) emb.mutable_data()[SpecialTokens::kEos * 8 + j] = -bias[j];
  m.set_param("tgt.embed_tokens", emb);
  const auto out = decode_greedy(m, std::vector<int>{4, 5}, 7);
  EXPECT_EQ(out.size(), 7u);
  // all other logits tie at zero: lowest id wins
  for (int tok : out) EXPECT_EQ(tok, SpecialTokens::kPad);
}

TEST(Decode, BatchMatchesSingle) {
  const Model m = build_model(toy(), 8);
  const std::vector<std::vector<int>> srcs{{4, 5, 6}, {7}, {8, 9, 4, 5, 6, 7}, {9, 9}};
  const auto batched = decode_greedy_batch(m, srcs, 6, 3);
  for (std::size_t i = 0; i < srcs.size(); ++i) EXPECT_EQ(batched[i], decode_greedy(m, srcs[i], 6));
}
