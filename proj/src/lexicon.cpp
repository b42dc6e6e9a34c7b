#include "xattn/lexicon.hpp"

#include <cmath>

#include "xattn/error.hpp"

namespace xattn {

namespace {

double norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

}  // namespace

EmbeddingMatrix EmbeddingMatrix::from_tensor(std::string vocab_id, const Tensor& table) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + shape_str(table.shape()));
  EmbeddingMatrix m;
  m.vocab_id = std::move(vocab_id);
  m.rows = table.dim(0);
  m.dim = table.dim(1);
  m.values.assign(table.data().begin(), table.data().end());
  return m;
}

EmbeddingMatrix token_embeddings(const Model& model, GroupTag side) {
  if (side == GroupTag::Src) return EmbeddingMatrix::from_tensor(model.src_vocab_id, model.param("src.embed_tokens"));
  if (side == GroupTag::Tgt) return EmbeddingMatrix::from_tensor(model.tgt_vocab_id, model.param("tgt.embed_tokens"));
  throw ContractError(std::string("group ") + tag_name(side) + " has no token embeddings");
}

int nearest_neighbor(std::span<const double> query, const EmbeddingMatrix& keys, std::size_t first_key) {
  if (query.size() != keys.dim) {
    throw DimensionError("query has " + std::to_string(query.size()) + " dims, keys have " + std::to_string(keys.dim));
  }
  const double qn = norm(query);
  if (qn == 0.0) throw RetrievalError("zero query vector");
  int best = -1;
  double best_sim = 0.0;
  for (std::size_t k = first_key; k < keys.rows; ++k) {
    const auto row = keys.row(k);
    const double kn = norm(row);
    if (kn == 0.0) continue;
    double dot = 0.0;
    for (std::size_t j = 0; j < keys.dim; ++j) dot += query[j] * row[j];
    const double sim = dot / (qn * kn);
    if (best < 0 || sim > best_sim) {
      best = static_cast<int>(k);
      best_sim = sim;
    }
  }
  if (best < 0) throw RetrievalError("no non-zero key rows to retrieve from");
  return best;
}

InducedLexicon induce_lexicon(const EmbeddingMatrix& child_emb, const EmbeddingMatrix& parent_emb,
                              const std::set<int>& eval_types) {
  InducedLexicon out;
  for (int t : eval_types) {
    if (t < SpecialTokens::kCount) continue;
    if (static_cast<std::size_t>(t) >= child_emb.rows) {
      throw IndexError("evaluated type " + std::to_string(t) + " outside the child vocabulary");
    }
    const auto q = child_emb.row(static_cast<std::size_t>(t));
    if (norm(q) == 0.0) {
      out.skipped_zero.push_back(t);
      continue;
    }
    out.pairs[t] = nearest_neighbor(q, parent_emb, SpecialTokens::kCount);
  }
  return out;
}

std::set<int> surface_types(const EmbeddingMatrix& emb) {
  std::set<int> out;
  for (std::size_t i = SpecialTokens::kCount; i < emb.rows; ++i) out.insert(static_cast<int>(i));
  return out;
}

LexiconScore lexicon_accuracy(const std::map<int, int>& induced, const GoldDictionary& gold) {
  std::set<int> gold_sources;
  for (const auto& [s, t] : gold.pairs) gold_sources.insert(s);
  LexiconScore sc;
  for (const auto& [s, t] : induced) {
    if (!gold_sources.count(s)) continue;
    ++sc.evaluated;
    sc.correct += gold.contains(s, t);
  }
  if (sc.evaluated == 0) throw UndefinedScoreError("no induced type appears in the gold dictionary");
  sc.accuracy = static_cast<double>(sc.correct) / static_cast<double>(sc.evaluated);
  return sc;
}

}  // namespace xattn
