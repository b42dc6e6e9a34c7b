#pragma once

// Bilingual lexicon induction by cosine nearest neighbour between two
// token-embedding tables.

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "xattn/model.hpp"
#include "xattn/tasks.hpp"

namespace xattn {

/// Row-major [rows x dim] token embeddings of one vocabulary.
struct EmbeddingMatrix {
  std::string vocab_id;
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  static EmbeddingMatrix from_tensor(std::string vocab_id, const Tensor& table);
  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
};

/// Token table of one side (SRC or TGT); positional rows are not included.
EmbeddingMatrix token_embeddings(const Model& model, GroupTag side);

/// Key row with the highest cosine similarity to `query`, scanning ids from
/// `first_key`; ties go to the lowest id and zero key rows are skipped.
/// Throws RetrievalError for a zero query or when no key is usable.
int nearest_neighbor(std::span<const double> query, const EmbeddingMatrix& keys, std::size_t first_key = 0);

struct InducedLexicon {
  std::map<int, int> pairs;        // child type -> parent type
  std::vector<int> skipped_zero;   // evaluated types whose row is all zero
};

/// Nearest parent type for every evaluated child type. Special tokens are
/// excluded on both sides.
InducedLexicon induce_lexicon(const EmbeddingMatrix& child_emb, const EmbeddingMatrix& parent_emb,
                              const std::set<int>& eval_types);

/// All surface-token ids of a vocabulary table.
std::set<int> surface_types(const EmbeddingMatrix& emb);

struct LexiconScore {
  double accuracy = 0.0;
  std::size_t evaluated = 0;
  std::size_t correct = 0;
};

/// Exact-match accuracy over the induced types that appear as a source in
/// the gold dictionary. Throws UndefinedScoreError if there are none.
LexiconScore lexicon_accuracy(const std::map<int, int>& induced, const GoldDictionary& gold);

}  // namespace xattn
