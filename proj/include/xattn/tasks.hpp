#pragma once

// Synthetic translation tasks: toy languages realized from a shared concept
// space, parallel corpora with construction-known dictionaries, span-masking
// noise for denoising pretraining, and corpus BLEU over token ids.

#include <cstdint>
#include <iosfwd>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "xattn/model.hpp"

namespace xattn {

enum class Reorder { Identity, Reverse, FixedPermutation };

const char* reorder_name(Reorder r);
Reorder reorder_from_name(const std::string& name);

/// A toy language: a bijection from concepts to surface tokens plus a
/// length-preserving word-order rule.
struct SyntheticLanguageSpec {
  std::string id = "A";
  std::size_t concept_vocab_size = 600;
  std::uint64_t surface_seed = 0;
  Reorder reorder = Reorder::Identity;
  std::uint64_t permutation_seed = 0;  // for FixedPermutation

  /// Concept index -> token id (token ids start after the special tokens).
  std::vector<int> surface_map() const;
  std::size_t vocab_size() const { return concept_vocab_size + SpecialTokens::kCount; }
  /// Applies the word-order rule to a sentence of any element type.
  std::vector<int> apply_order(const std::vector<int>& sentence) const;
  /// Surface form of a concept sentence: order rule, then the bijection.
  std::vector<int> realize(const std::vector<int>& concepts) const;

  std::string token_string(int token) const;
  int parse_token(const std::string& text) const;

  /// Canonical one-line record, e.g. "id=A;concepts=600;surface_seed=1;reorder=IDENTITY;perm_seed=0".
  std::string canonical() const;
  static SyntheticLanguageSpec parse(const std::string& record);

  friend bool operator==(const SyntheticLanguageSpec&, const SyntheticLanguageSpec&) = default;
};

struct SentencePair {
  std::vector<int> src;
  std::vector<int> tgt;
  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

enum class Split { Train, Dev, Test };
const char* split_name(Split s);

/// Pairs are stored without special tokens; to_target_input/output add
/// bos/eos when a batch is built.
struct ParallelCorpus {
  SyntheticLanguageSpec src_lang;
  SyntheticLanguageSpec tgt_lang;
  Split split = Split::Train;
  std::vector<SentencePair> pairs;

  const std::string& src_vocab_id() const { return src_lang.id; }
  const std::string& tgt_vocab_id() const { return tgt_lang.id; }
  std::size_t size() const { return pairs.size(); }
  std::vector<std::vector<int>> sources() const;
  std::vector<std::vector<int>> targets() const;
};

std::vector<int> to_target_input(const std::vector<int>& tgt);   // bos y...
std::vector<int> to_target_output(const std::vector<int>& tgt);  // y... eos

struct LengthRange {
  std::size_t min = 3;
  std::size_t max = 12;
};

/// Concept sentences with Zipf(s) word frequencies and uniform lengths.
std::vector<std::vector<int>> sample_concept_sentences(std::size_t concept_vocab_size, std::size_t n,
                                                       LengthRange lengths, double zipf_s,
                                                       std::uint64_t seed);

ParallelCorpus gen_parallel_corpus(const SyntheticLanguageSpec& a, const SyntheticLanguageSpec& b,
                                   std::size_t n, LengthRange lengths, double zipf_s, std::uint64_t seed,
                                   Split split = Split::Train);

struct CorpusSplits {
  ParallelCorpus train;
  ParallelCorpus dev;
  ParallelCorpus test;
};

/// Train/dev/test corpora whose underlying concept sentences are pairwise
/// distinct across splits.
CorpusSplits gen_parallel_splits(const SyntheticLanguageSpec& a, const SyntheticLanguageSpec& b,
                                 std::size_t n_train, std::size_t n_dev, std::size_t n_test,
                                 LengthRange lengths, double zipf_s, std::uint64_t seed);

/// Monolingual surface sentences of one language.
std::vector<std::vector<int>> gen_monolingual(const SyntheticLanguageSpec& lang, std::size_t n,
                                              LengthRange lengths, double zipf_s, std::uint64_t seed);

struct GoldDictionary {
  std::set<std::pair<int, int>> pairs;
  bool contains(int src, int tgt) const { return pairs.count({src, tgt}) != 0; }
  std::size_t size() const { return pairs.size(); }
};

GoldDictionary gold_dictionary(const SyntheticLanguageSpec& a, const SyntheticLanguageSpec& b);

// ---------------------------------------------------------------------------

struct NoiseConfig {
  double mask_ratio = 0.35;
  double mean_span = 3.5;
  int mask_id = SpecialTokens::kMask;
  std::uint64_t seed = 0;
};

/// Replaces Poisson(mean_span)-long spans (zero lengths resampled) by one
/// mask token each until at least mask_ratio of the maskable tokens are
/// covered. bos/eos are never masked.
std::vector<int> noise_spans(const std::vector<int>& sentence, const NoiseConfig& nc);

// ---------------------------------------------------------------------------

struct BleuStats {
  double precisions[4] = {0, 0, 0, 0};  // after smoothing
  double brevity_penalty = 1.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
  double score = 0.0;
};

/// Corpus BLEU-4 over token ids, add-one smoothing on orders 2-4.
BleuStats bleu_stats(const std::vector<std::vector<int>>& hypotheses,
                     const std::vector<std::vector<int>>& references);
double bleu(const std::vector<std::vector<int>>& hypotheses,
            const std::vector<std::vector<int>>& references);

// ---------------------------------------------------------------------------
// Text formats

void write_corpus(std::ostream& os, const ParallelCorpus& corpus);
ParallelCorpus read_corpus(std::istream& is);
void write_corpus_file(const std::string& path, const ParallelCorpus& corpus);
ParallelCorpus read_corpus_file(const std::string& path);

void write_dictionary(std::ostream& os, const GoldDictionary& dict, const SyntheticLanguageSpec& a,
                      const SyntheticLanguageSpec& b);
GoldDictionary read_dictionary(std::istream& is, const SyntheticLanguageSpec& a,
                               const SyntheticLanguageSpec& b);

}  // namespace xattn
