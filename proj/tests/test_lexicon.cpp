#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "xattn/error.hpp"
#include "xattn/lexicon.hpp"

using namespace xattn;

namespace {

EmbeddingMatrix random_matrix(std::size_t rows, std::size_t dim, std::uint64_t seed, const std::string& id = "X") {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  EmbeddingMatrix m{id, rows, dim, std::vector<double>(rows * dim)};
  for (auto& v : m.values) v = d(rng);
  return m;
}

// Exhaustive argmax over explicit pairwise cosines.
int oracle_nn(std::span<const double> q, const EmbeddingMatrix& keys, std::size_t first) {
  std::vector<double> sims;
  for (std::size_t k = first; k < keys.rows; ++k) {
    const auto r = keys.row(k);
    const double num = std::inner_product(q.begin(), q.end(), r.begin(), 0.0);
    const double den = std::sqrt(std::inner_product(q.begin(), q.end(), q.begin(), 0.0)) *
                       std::sqrt(std::inner_product(r.begin(), r.end(), r.begin(), 0.0));
    sims.push_back(den == 0 ? -2.0 : num / den);
  }
  return static_cast<int>(first + (std::max_element(sims.begin(), sims.end()) - sims.begin()));
}

}  // namespace

TEST(NearestNeighbor, SelfRetrieval) {
  const auto m = random_matrix(12, 6, 1);
  for (std::size_t i = 0; i < m.rows; ++i) EXPECT_EQ(nearest_neighbor(m.row(i), m), static_cast<int>(i));
}

TEST(NearestNeighbor, OrthogonalBasis) {
  EmbeddingMatrix keys{"K", 3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}};
  const std::vector<double> q{0.2, 0.9, -0.1};
  EXPECT_EQ(nearest_neighbor(q, keys), 1);
  const std::vector<double> neg{-1, -1, -0.5};
  EXPECT_EQ(nearest_neighbor(neg, keys), 2);
}

TEST(NearestNeighbor, MatchesBruteForce) {
  for (auto [rows, dim] : {std::pair<std::size_t, std::size_t>{5, 3}, {20, 8}}) {
    const auto keys = random_matrix(rows, dim, rows * 31 + dim);
    const auto queries = random_matrix(30, dim, 77 + rows);
    for (std::size_t q = 0; q < queries.rows; ++q) {
      for (std::size_t first : {std::size_t{0}, std::size_t{2}}) {
        EXPECT_EQ(nearest_neighbor(queries.row(q), keys, first), oracle_nn(queries.row(q), keys, first));
      }
    }
  }
}

TEST(NearestNeighbor, TiesGoToLowestIdAndZeroKeysSkipped) {
  EmbeddingMatrix keys{"K", 4, 2, {0, 0, 2, 2, 1, 1, 3, 0}};
  const std::vector<double> q{1, 1};
  EXPECT_EQ(nearest_neighbor(q, keys), 1);
  const std::vector<double> zero{0, 0};
  EXPECT_THROW(nearest_neighbor(zero, keys), RetrievalError);
  EmbeddingMatrix empty{"K", 2, 2, {0, 0, 0, 0}};
  EXPECT_THROW(nearest_neighbor(q, empty), RetrievalError);
  EXPECT_THROW(nearest_neighbor(std::vector<double>{1, 2, 3}, keys), DimensionError);
}

TEST(Induce, RecoversAPermutation) {
  const std::size_t n = 24, dim = 10;
  const auto parent = random_matrix(n, dim, 4, "P");
  std::vector<std::size_t> pi(n - SpecialTokens::kCount);
  std::iota(pi.begin(), pi.end(), SpecialTokens::kCount);
  std::shuffle(pi.begin(), pi.end(), std::mt19937_64(5));
  EmbeddingMatrix child{"C", n, dim, std::vector<double>(n * dim, 0.0)};
  GoldDictionary gold;
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> scale(0.1, 10.0);
  for (std::size_t i = SpecialTokens::kCount; i < n; ++i) {
    const std::size_t p = pi[i - SpecialTokens::kCount];
    const double s = scale(rng);  // cosine ignores row norms
    for (std::size_t j = 0; j < dim; ++j) child.values[i * dim + j] = s * parent.values[p * dim + j];
    gold.pairs.insert({static_cast<int>(i), static_cast<int>(p)});
  }
  const auto lex = induce_lexicon(child, parent, surface_types(child));
  EXPECT_EQ(lex.pairs.size(), n - SpecialTokens::kCount);
  for (const auto& [c, p] : lex.pairs) EXPECT_TRUE(gold.contains(c, p));
  const auto sc = lexicon_accuracy(lex.pairs, gold);
  EXPECT_EQ(sc.accuracy, 1.0);
  EXPECT_EQ(sc.evaluated, n - SpecialTokens::kCount);
}

TEST(Induce, SkipsSpecialsAndZeroRows) {
  auto child = random_matrix(8, 3, 9, "C");
  for (std::size_t j = 0; j < 3; ++j) child.values[5 * 3 + j] = 0.0;
  const auto parent = random_matrix(8, 3, 10, "P");
  const auto lex = induce_lexicon(child, parent, {0, 2, 4, 5, 7});
  EXPECT_EQ(lex.pairs.size(), 2u);
  EXPECT_TRUE(lex.pairs.count(4) && lex.pairs.count(7));
  EXPECT_EQ(lex.skipped_zero, std::vector<int>{5});
  for (const auto& [c, p] : lex.pairs) EXPECT_GE(p, SpecialTokens::kCount);
  EXPECT_THROW(induce_lexicon(child, parent, {8}), IndexError);
}

TEST(Accuracy, CountsOnlyGoldSourcesAndIsMonotone) {
  GoldDictionary gold;
  for (int i = 4; i < 14; ++i) gold.pairs.insert({i, i + 10});
  std::map<int, int> induced;
  for (int i = 4; i < 14; ++i) induced[i] = 0;
  induced[99] = 5;  // not a gold source
  double prev = lexicon_accuracy(induced, gold).accuracy;
  EXPECT_EQ(prev, 0.0);
  EXPECT_EQ(lexicon_accuracy(induced, gold).evaluated, 10u);
  for (int i = 4; i < 14; ++i) {
    induced[i] = i + 10;
    const double now = lexicon_accuracy(induced, gold).accuracy;
    EXPECT_GT(now, prev);
    prev = now;
  }
  EXPECT_EQ(prev, 1.0);
  EXPECT_THROW(lexicon_accuracy({{99, 5}}, gold), UndefinedScoreError);
  EXPECT_THROW(lexicon_accuracy({}, gold), UndefinedScoreError);
}

TEST(Accuracy, TokenEmbeddingsOfAModel) {
  ModelConfig mc;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.n_enc_layers = mc.n_dec_layers = 1;
  mc.d_ff = 16;
  mc.max_len = 8;
  mc.src_vocab_size = 10;
  mc.tgt_vocab_size = 12;
  const Model m = build_model(mc, 1, "A", "B");
  const auto s = token_embeddings(m, GroupTag::Src), t = token_embeddings(m, GroupTag::Tgt);
  EXPECT_EQ(s.rows, 10u);
  EXPECT_EQ(t.rows, 12u);
  EXPECT_EQ(s.vocab_id, "A");
  EXPECT_EQ(s.values[9 * 8 + 7], m.param("src.embed_tokens")[79]);
  EXPECT_THROW(token_embeddings(m, GroupTag::Enc), ContractError);
  EXPECT_EQ(surface_types(s).size(), 6u);
}
