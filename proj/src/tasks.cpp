#include "xattn/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "xattn/hash.hpp"

namespace xattn {

namespace {

std::vector<std::string> split_on(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(text);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

std::vector<std::string> split_ws(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

bool is_marker(int token) { return token == SpecialTokens::kBos || token == SpecialTokens::kEos; }

}  // namespace

const char* reorder_name(Reorder r) {
  switch (r) {
    case Reorder::Identity: return "IDENTITY";
    case Reorder::Reverse: return "REVERSE";
    case Reorder::FixedPermutation: return "FIXED_PERMUTATION";
  }
  return "?";
}

Reorder reorder_from_name(const std::string& name) {
  for (auto r : {Reorder::Identity, Reorder::Reverse, Reorder::FixedPermutation}) {
    if (name == reorder_name(r)) return r;
  }
  throw ConfigError("unknown reorder rule '" + name + "'");
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

// ---------------------------------------------------------------------------

std::vector<int> SyntheticLanguageSpec::surface_map() const {
  std::vector<int> map(concept_vocab_size);
  std::iota(map.begin(), map.end(), SpecialTokens::kCount);
  std::mt19937_64 rng(mix_seed(surface_seed, fnv1a(id)));
  std::shuffle(map.begin(), map.end(), rng);
  return map;
}

std::vector<int> SyntheticLanguageSpec::apply_order(const std::vector<int>& sentence) const {
  switch (reorder) {
    case Reorder::Identity: return sentence;
    case Reorder::Reverse: return {sentence.rbegin(), sentence.rend()};
    case Reorder::FixedPermutation: {
      std::vector<std::size_t> perm(sentence.size());
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix_seed(permutation_seed, sentence.size()));
      std::shuffle(perm.begin(), perm.end(), rng);
      std::vector<int> out(sentence.size());
      for (std::size_t i = 0; i < perm.size(); ++i) out[i] = sentence[perm[i]];
      return out;
    }
  }
  return sentence;
}

std::vector<int> SyntheticLanguageSpec::realize(const std::vector<int>& concepts) const {
  const auto map = surface_map();
  std::vector<int> out;
  out.reserve(concepts.size());
  for (int c : apply_order(concepts)) {
    if (c < 0 || static_cast<std::size_t>(c) >= concept_vocab_size) {
      throw GenerationError("concept " + std::to_string(c) + " outside language " + id);
    }
    out.push_back(map[static_cast<std::size_t>(c)]);
  }
  return out;
}

std::string SyntheticLanguageSpec::token_string(int token) const {
  switch (token) {
    case SpecialTokens::kPad: return "<pad>";
    case SpecialTokens::kBos: return "<s>";
    case SpecialTokens::kEos: return "</s>";
    case SpecialTokens::kMask: return "<mask>";
    default: break;
  }
  return id + "." + std::to_string(token - SpecialTokens::kCount);
}

int SyntheticLanguageSpec::parse_token(const std::string& text) const {
  if (text == "<pad>") return SpecialTokens::kPad;
  if (text == "<s>") return SpecialTokens::kBos;
  if (text == "</s>") return SpecialTokens::kEos;
  if (text == "<mask>") return SpecialTokens::kMask;
  const auto dot = text.rfind('.');
  if (dot == std::string::npos || text.substr(0, dot) != id) {
    throw FormatError("token '" + text + "' does not belong to language " + id, 0);
  }
  std::size_t idx = 0;
  try {
    idx = std::stoul(text.substr(dot + 1));
  } catch (const std::exception&) {
    throw FormatError("malformed token '" + text + "'", 0);
  }
  if (idx >= concept_vocab_size) throw FormatError("token '" + text + "' outside vocabulary", 0);
  return static_cast<int>(idx) + SpecialTokens::kCount;
}

std::string SyntheticLanguageSpec::canonical() const {
  std::ostringstream os;
  os << "id=" << id << ";concepts=" << concept_vocab_size << ";surface_seed=" << surface_seed
     << ";reorder=" << reorder_name(reorder) << ";perm_seed=" << permutation_seed;
  return os.str();
}

SyntheticLanguageSpec SyntheticLanguageSpec::parse(const std::string& record) {
  SyntheticLanguageSpec spec;
  std::set<std::string> seen;
  for (const auto& field : split_on(record, ';')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed language field '" + field + "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    seen.insert(key);
    try {
      if (key == "id") spec.id = value;
      else if (key == "concepts") spec.concept_vocab_size = std::stoul(value);
      else if (key == "surface_seed") spec.surface_seed = std::stoull(value);
      else if (key == "reorder") spec.reorder = reorder_from_name(value);
      else if (key == "perm_seed") spec.permutation_seed = std::stoull(value);
      else throw ConfigError("unknown language field '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError("malformed value for language field '" + key + "'");
    } catch (const std::out_of_range&) {
      throw ConfigError("out-of-range value for language field '" + key + "'");
    }
  }
  if (!seen.count("id") || spec.id.empty() || spec.id.find_first_of(". \t") != std::string::npos) {
    throw ConfigError("language record needs an id without '.', tabs or spaces");
  }
  if (spec.concept_vocab_size == 0) throw ConfigError("language needs at least one concept");
  return spec;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<int>> ParallelCorpus::sources() const {
  std::vector<std::vector<int>> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.src);
  return out;
}

std::vector<std::vector<int>> ParallelCorpus::targets() const {
  std::vector<std::vector<int>> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.tgt);
  return out;
}

std::vector<int> to_target_input(const std::vector<int>& tgt) {
  std::vector<int> out{SpecialTokens::kBos};
  out.insert(out.end(), tgt.begin(), tgt.end());
  return out;
}

std::vector<int> to_target_output(const std::vector<int>& tgt) {
  std::vector<int> out(tgt);
  out.push_back(SpecialTokens::kEos);
  return out;
}

std::vector<std::vector<int>> sample_concept_sentences(std::size_t concept_vocab_size, std::size_t n,
                                                       LengthRange lengths, double zipf_s,
                                                       std::uint64_t seed) {
  if (lengths.min == 0 || lengths.min > lengths.max) throw GenerationError("invalid length range");
  std::vector<double> weights(concept_vocab_size);
  for (std::size_t k = 0; k < concept_vocab_size; ++k) {
    weights[k] = 1.0 / std::pow(static_cast<double>(k + 1), zipf_s);
  }
  std::discrete_distribution<int> concept_dist(weights.begin(), weights.end());
  std::uniform_int_distribution<std::size_t> length_dist(lengths.min, lengths.max);
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> out(n);
  for (auto& s : out) {
    s.resize(length_dist(rng));
    for (auto& c : s) c = concept_dist(rng);
  }
  return out;
}

namespace {

void check_compatible(const SyntheticLanguageSpec& a, const SyntheticLanguageSpec& b) {
  if (a.concept_vocab_size != b.concept_vocab_size) {
    throw GenerationError("languages " + a.id + " and " + b.id + " have different concept spaces (" +
                          std::to_string(a.concept_vocab_size) + " vs " +
                          std::to_string(b.concept_vocab_size) + ")");
  }
}

ParallelCorpus realize_pairs(const SyntheticLanguageSpec& a, const SyntheticLanguageSpec& b,
                             const std::vector<std::vector<int>>& concepts, Split split) {
  ParallelCorpus corpus{a, b, split, {}};
  corpus.pairs.reserve(concepts.size());
  for (const auto& c : concepts) corpus.pairs.push_back({a.realize(c), b.realize(c)});
  return corpus;
}

}  // namespace

ParallelCorpus gen_parallel_corpus(const SyntheticLanguageSpec& a, const SyntheticLanguageSpec& b,
                                   std::size_t n, LengthRange lengths, double zipf_s, std::uint64_t seed,
                                   Split split) {
  check_compatible(a, b);
  return realize_pairs(a, b, sample_concept_sentences(a.concept_vocab_size, n, lengths, zipf_s, seed), split);
}

CorpusSplits gen_parallel_splits(const SyntheticLanguageSpec& a, const SyntheticLanguageSpec& b,
                                 std::size_t n_train, std::size_t n_dev, std::size_t n_test,
                                 LengthRange lengths, double zipf_s, std::uint64_t seed) {
  check_compatible(a, b);
  const std::size_t wanted = n_train + n_dev + n_test;
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> unique;
  unique.reserve(wanted);
  for (std::uint64_t round = 0; unique.size() < wanted; ++round) {
    if (round > 64) throw GenerationError("cannot draw enough distinct concept sentences");
    auto batch = sample_concept_sentences(a.concept_vocab_size, wanted, lengths, zipf_s,
                                          mix_seed(seed, round));
    for (auto& s : batch) {
      if (unique.size() == wanted) break;
      if (seen.insert(s).second) unique.push_back(std::move(s));
    }
  }
  auto slice = [&](std::size_t from, std::size_t count) {
    return std::vector<std::vector<int>>(unique.begin() + static_cast<std::ptrdiff_t>(from),
                                         unique.begin() + static_cast<std::ptrdiff_t>(from + count));
  };
  return {realize_pairs(a, b, slice(0, n_train), Split::Train),
          realize_pairs(a, b, slice(n_train, n_dev), Split::Dev),
          realize_pairs(a, b, slice(n_train + n_dev, n_test), Split::Test)};
}

std::vector<std::vector<int>> gen_monolingual(const SyntheticLanguageSpec& lang, std::size_t n,
                                              LengthRange lengths, double zipf_s, std::uint64_t seed) {
  std::vector<std::vector<int>> out;
  out.reserve(n);
  for (const auto& c : sample_concept_sentences(lang.concept_vocab_size, n, lengths, zipf_s, seed)) {
    out.push_back(lang.realize(c));
  }
  return out;
}

GoldDictionary gold_dictionary(const SyntheticLanguageSpec& a, const SyntheticLanguageSpec& b) {
  check_compatible(a, b);
  const auto ma = a.surface_map(), mb = b.surface_map();
  GoldDictionary dict;
  for (std::size_t k = 0; k < ma.size(); ++k) dict.pairs.insert({ma[k], mb[k]});
  return dict;
}

// ---------------------------------------------------------------------------

std::vector<int> noise_spans(const std::vector<int>& sentence, const NoiseConfig& nc) {
  if (!(nc.mask_ratio >= 0.0 && nc.mask_ratio <= 1.0)) throw ContractError("mask_ratio must lie in [0, 1]");
  if (!(nc.mean_span > 0.0)) throw ContractError("mean span length must be positive");
  const std::size_t n = sentence.size();
  std::size_t maskable = 0;
  for (int t : sentence) maskable += !is_marker(t);
  const auto target = static_cast<std::size_t>(
      std::min<double>(static_cast<double>(maskable),
                       std::ceil(nc.mask_ratio * static_cast<double>(maskable) - 1e-9)));
  if (target == 0) return sentence;

  std::mt19937_64 rng(nc.seed);
  std::poisson_distribution<int> span_length(nc.mean_span);
  std::vector<int> span_of(n, -1);
  std::size_t covered = 0;
  int span = 0;
  std::vector<std::size_t> free_positions;
  while (covered < target) {
    int len = 0;
    while (len == 0) len = span_length(rng);
    free_positions.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (span_of[i] < 0 && !is_marker(sentence[i])) free_positions.push_back(i);
    }
    std::uniform_int_distribution<std::size_t> pick(0, free_positions.size() - 1);
    std::size_t pos = free_positions[pick(rng)];
    for (int marked = 0; marked < len && pos < n && span_of[pos] < 0 && !is_marker(sentence[pos]);
         ++marked, ++pos) {
      span_of[pos] = span;
      ++covered;
    }
    ++span;
  }
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (span_of[i] < 0) {
      out.push_back(sentence[i]);
    } else if (i == 0 || span_of[i - 1] != span_of[i]) {
      out.push_back(nc.mask_id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

BleuStats bleu_stats(const std::vector<std::vector<int>>& hypotheses,
                     const std::vector<std::vector<int>>& references) {
  if (hypotheses.size() != references.size()) {
    throw ContractError("bleu needs one reference per hypothesis (" + std::to_string(hypotheses.size()) +
                        " vs " + std::to_string(references.size()) + ")");
  }
  if (hypotheses.empty()) throw UndefinedScoreError("bleu of an empty corpus is undefined");

  std::size_t matches[4] = {0, 0, 0, 0}, totals[4] = {0, 0, 0, 0};
  BleuStats st;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& h = hypotheses[i];
    const auto& r = references[i];
    st.hyp_length += h.size();
    st.ref_length += r.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      if (h.size() < n) continue;
      std::map<std::vector<int>, std::size_t> ref_counts;
      for (std::size_t j = 0; j + n <= r.size(); ++j) ++ref_counts[{r.begin() + j, r.begin() + j + n}];
      std::map<std::vector<int>, std::size_t> hyp_counts;
      for (std::size_t j = 0; j + n <= h.size(); ++j) ++hyp_counts[{h.begin() + j, h.begin() + j + n}];
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
      }
      totals[n - 1] += h.size() - n + 1;
    }
  }
  if (totals[0] == 0 || matches[0] == 0) {
    st.precisions[0] = 0.0;
    st.score = 0.0;
    return st;
  }
  st.precisions[0] = static_cast<double>(matches[0]) / static_cast<double>(totals[0]);
  double log_sum = std::log(st.precisions[0]);
  for (std::size_t n = 1; n < 4; ++n) {
    st.precisions[n] = static_cast<double>(matches[n] + 1) / static_cast<double>(totals[n] + 1);
    log_sum += std::log(st.precisions[n]);
  }
  const double c = static_cast<double>(st.hyp_length), r = static_cast<double>(st.ref_length);
  st.brevity_penalty = c <= r ? std::exp(1.0 - r / c) : 1.0;
  st.score = 100.0 * st.brevity_penalty * std::exp(log_sum / 4.0);
  return st;
}

double bleu(const std::vector<std::vector<int>>& hypotheses,
            const std::vector<std::vector<int>>& references) {
  return bleu_stats(hypotheses, references).score;
}

// ---------------------------------------------------------------------------

namespace {

std::string join_tokens(const std::vector<int>& ids, const SyntheticLanguageSpec& lang) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += lang.token_string(ids[i]);
  }
  return out;
}

std::vector<int> parse_tokens(const std::string& text, const SyntheticLanguageSpec& lang,
                              std::uint64_t offset) {
  std::vector<int> out;
  for (const auto& tok : split_ws(text)) {
    try {
      out.push_back(lang.parse_token(tok));
    } catch (const FormatError& e) {
      throw FormatError(std::string("corpus: ") + e.what(), offset);
    }
  }
  return out;
}

constexpr const char* kCorpusMagic = "#xattn-corpus v1";

}  // namespace

void write_corpus(std::ostream& os, const ParallelCorpus& corpus) {
  os << kCorpusMagic << "\tsplit=" << split_name(corpus.split) << "\tsrc=" << corpus.src_lang.canonical()
     << "\ttgt=" << corpus.tgt_lang.canonical() << '\n';
  for (const auto& p : corpus.pairs) {
    os << join_tokens(p.src, corpus.src_lang) << '\t' << join_tokens(p.tgt, corpus.tgt_lang) << '\n';
  }
}

ParallelCorpus read_corpus(std::istream& is) {
  std::string line;
  std::uint64_t offset = 0;
  if (!std::getline(is, line)) throw FormatError("corpus: missing header line", 0);
  auto fields = split_on(line, '\t');
  if (fields.size() != 4 || fields[0] != kCorpusMagic || fields[1].rfind("split=", 0) != 0 ||
      fields[2].rfind("src=", 0) != 0 || fields[3].rfind("tgt=", 0) != 0) {
    throw FormatError("corpus: malformed header", 0);
  }
  ParallelCorpus corpus;
  const std::string split = fields[1].substr(6);
  if (split == "train") corpus.split = Split::Train;
  else if (split == "dev") corpus.split = Split::Dev;
  else if (split == "test") corpus.split = Split::Test;
  else throw FormatError("corpus: unknown split '" + split + "'", 0);
  try {
    corpus.src_lang = SyntheticLanguageSpec::parse(fields[2].substr(4));
    corpus.tgt_lang = SyntheticLanguageSpec::parse(fields[3].substr(4));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("corpus header: ") + e.what(), 0);
  }
  offset += line.size() + 1;
  while (std::getline(is, line)) {
    if (!line.empty()) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError("corpus: line without tab separator", offset);
      corpus.pairs.push_back({parse_tokens(line.substr(0, tab), corpus.src_lang, offset),
                              parse_tokens(line.substr(tab + 1), corpus.tgt_lang, offset)});
    }
    offset += line.size() + 1;
  }
  return corpus;
}

void write_corpus_file(const std::string& path, const ParallelCorpus& corpus) {
  std::ofstream os(path);
  if (!os) throw ContractError("cannot write corpus file " + path);
  write_corpus(os, corpus);
}

ParallelCorpus read_corpus_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("cannot read corpus file " + path);
  return read_corpus(is);
}

void write_dictionary(std::ostream& os, const GoldDictionary& dict, const SyntheticLanguageSpec& a,
                      const SyntheticLanguageSpec& b) {
  for (const auto& [s, t] : dict.pairs) os << a.token_string(s) << '\t' << b.token_string(t) << '\n';
}

GoldDictionary read_dictionary(std::istream& is, const SyntheticLanguageSpec& a,
                               const SyntheticLanguageSpec& b) {
  GoldDictionary dict;
  std::string line;
  std::uint64_t offset = 0;
  while (std::getline(is, line)) {
    if (!line.empty()) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError("dictionary: line without tab separator", offset);
      try {
        dict.pairs.insert({a.parse_token(line.substr(0, tab)), b.parse_token(line.substr(tab + 1))});
      } catch (const FormatError& e) {
        throw FormatError(std::string("dictionary: ") + e.what(), offset);
      }
    }
    offset += line.size() + 1;
  }
  return dict;
}

}  // namespace xattn
