#pragma once

// Post-norm encoder-decoder Transformer whose parameters are partitioned
// into five groups: source embeddings, target embeddings, encoder body,
// decoder body and cross-attention.

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xattn/tensor.hpp"

namespace xattn {

enum class GroupTag : std::uint8_t { Src = 0, Tgt = 1, Enc = 2, Dec = 3, Xattn = 4 };

inline constexpr std::size_t kGroupCount = 5;

const char* tag_name(GroupTag tag);
GroupTag tag_from_name(const std::string& name);

/// Small value set of group tags.
class TagSet {
 public:
  constexpr TagSet() = default;
  TagSet(std::initializer_list<GroupTag> tags) {
    for (auto t : tags) insert(t);
  }
  static TagSet all() { return {GroupTag::Src, GroupTag::Tgt, GroupTag::Enc, GroupTag::Dec, GroupTag::Xattn}; }

  void insert(GroupTag t) { bits_ |= bit(t); }
  void erase(GroupTag t) { bits_ &= static_cast<std::uint8_t>(~bit(t)); }
  bool contains(GroupTag t) const { return (bits_ & bit(t)) != 0; }
  bool empty() const { return bits_ == 0; }
  std::size_t size() const;
  std::vector<GroupTag> tags() const;
  std::string str() const;

  friend bool operator==(TagSet, TagSet) = default;

 private:
  static constexpr std::uint8_t bit(GroupTag t) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(t)); }
  std::uint8_t bits_ = 0;
};

/// Token ids reserved in every vocabulary.
struct SpecialTokens {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;
  static constexpr int kCount = 4;
};

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t d_ff = 256;
  std::size_t max_len = 64;
  std::size_t src_vocab_size = 0;
  std::size_t tgt_vocab_size = 0;
  double dropout = 0.0;
  /// Token and positional tables start at normal(0, scale / sqrt(d_model)).
  double embed_init_scale = 1.0;

  /// Throws ConfigError on a malformed configuration.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  GroupTag tag;
};

/// Name, group and shape of one parameter, before any allocation.
struct ParamSpec {
  std::string name;
  GroupTag tag;
  Shape shape;
  enum class Init { Weight, Zero, One, Embedding } init;
};

/// Parameter layout of a configuration in definition order. build_model
/// instantiates exactly this list.
std::vector<ParamSpec> parameter_layout(const ModelConfig& config);

/// Ordered name -> (tensor, tag) map; iteration follows insertion order.
class ParameterRegistry {
 public:
  void add(std::string name, Tensor tensor, GroupTag tag);
  const NamedParam& at(const std::string& name) const;
  NamedParam& at(const std::string& name);
  const NamedParam* find(const std::string& name) const;
  bool contains(const std::string& name) const { return find(name) != nullptr; }

  std::span<const NamedParam> entries() const { return entries_; }
  std::span<NamedParam> entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_scalars() const;

  /// Deep copy: every tensor is cloned.
  ParameterRegistry clone() const;

 private:
  std::vector<NamedParam> entries_;
};

/// Draws the initial value of one parameter. The stream depends only on
/// (seed, name), so re-randomizing a subset of groups is reproducible.
Tensor init_parameter(const ParamSpec& spec, const ModelConfig& config, std::uint64_t seed);

class Model {
 public:
  Model() = default;
  Model(ModelConfig config, ParameterRegistry registry, std::string src_vocab_id,
        std::string tgt_vocab_id);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  const ParameterRegistry& registry() const { return registry_; }
  ParameterRegistry& registry() { return registry_; }
  const Tensor& param(const std::string& name) const { return registry_.at(name).tensor; }

  std::string src_vocab_id;
  std::string tgt_vocab_id;
  std::optional<std::uint64_t> parent_lineage_hash;
  std::string regime = "SCRATCH";

  /// Replaces the tensor stored under name (shape must match the layout).
  void set_param(const std::string& name, Tensor value);

 private:
  ModelConfig config_;
  ParameterRegistry registry_;
};

/// Throws ConfigError for an invalid configuration.
Model build_model(const ModelConfig& config, std::uint64_t seed, std::string src_vocab_id = "src",
                  std::string tgt_vocab_id = "tgt");

std::vector<NamedParam> params_by_tags(const Model& model, TagSet tags);

struct ParamCount {
  std::size_t count = 0;
  std::size_t total = 0;
  double fraction = 0.0;
};
ParamCount count_params(const Model& model, TagSet tags);
/// Same count over a layout, without allocating tensors.
ParamCount count_params(const std::vector<ParamSpec>& layout, TagSet tags);

// ---------------------------------------------------------------------------
// Forward computation
// ---------------------------------------------------------------------------

/// Right-padded batch of token sequences.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;              // batch * length, padded with kPad
  std::vector<std::size_t> lengths;  // unpadded length per row

  static TokenBatch pack(const std::vector<std::vector<int>>& rows);
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout > 0
};

/// Encoder states [B, S, d].
Tensor encode(const Model& model, const TokenBatch& src, const ForwardOptions& options = {});

/// Decoder logits [B, T, V_tgt] given encoder states and the source batch
/// (for its key padding mask).
Tensor decode(const Model& model, const Tensor& memory, const TokenBatch& src,
              const TokenBatch& tgt_in, const ForwardOptions& options = {});

/// Logits [T, V_tgt] for a single sentence pair.
Tensor forward(const Model& model, std::span<const int> src_ids, std::span<const int> tgt_in_ids,
               const ForwardOptions& options = {});

/// Greedy decoding from bos until eos or max_steps; the returned sequence
/// excludes bos and eos. Argmax ties go to the lowest token id.
std::vector<int> decode_greedy(const Model& model, std::span<const int> src_ids, std::size_t max_steps,
                               int bos = SpecialTokens::kBos, int eos = SpecialTokens::kEos);

/// Batched greedy decoding of many sources; same result per sentence as
/// decode_greedy.
std::vector<std::vector<int>> decode_greedy_batch(const Model& model,
                                                  const std::vector<std::vector<int>>& sources,
                                                  std::size_t max_steps, std::size_t batch_size = 64,
                                                  int bos = SpecialTokens::kBos,
                                                  int eos = SpecialTokens::kEos);

}  // namespace xattn
