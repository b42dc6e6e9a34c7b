#include "xattn/model.hpp"

#include "xattn/hash.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace xattn {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kMaskValue = -1e9;

void push_linear(std::vector<ParamSpec>& out, const std::string& prefix, GroupTag tag,
                 std::size_t in, std::size_t outw) {
  out.push_back({prefix + ".weight", tag, {in, outw}, ParamSpec::Init::Weight});
  out.push_back({prefix + ".bias", tag, {outw}, ParamSpec::Init::Zero});
}

void push_norm(std::vector<ParamSpec>& out, const std::string& prefix, GroupTag tag, std::size_t d) {
  out.push_back({prefix + ".gain", tag, {d}, ParamSpec::Init::One});
  out.push_back({prefix + ".bias", tag, {d}, ParamSpec::Init::Zero});
}

void push_attention(std::vector<ParamSpec>& out, const std::string& prefix, GroupTag tag,
                    std::size_t d) {
  for (const char* p : {"q", "k", "v", "o"}) push_linear(out, prefix + "." + p, tag, d, d);
}

void push_embeddings(std::vector<ParamSpec>& out, const std::string& side, GroupTag tag,
                     std::size_t vocab, const ModelConfig& c) {
  out.push_back({side + ".embed_tokens", tag, {vocab, c.d_model}, ParamSpec::Init::Embedding});
  out.push_back({side + ".embed_positions", tag, {c.max_len, c.d_model}, ParamSpec::Init::Embedding});
  push_norm(out, side + ".embed_ln", tag, c.d_model);
}

// ---------------------------------------------------------------------------
// Forward helpers

struct Ctx {
  const Model& model;
  const ForwardOptions& options;

  const Tensor& p(const std::string& name) const { return model.param(name); }

  Tensor drop(const Tensor& x) const {
    const double rate = model.config().dropout;
    if (!options.training || rate == 0.0) return x;
    if (!options.rng) throw ContractError("training with dropout needs an rng");
    return dropout(x, rate, *options.rng);
  }

  Tensor linear(const Tensor& x, const std::string& prefix) const {
    return add(matmul(x, p(prefix + ".weight")), p(prefix + ".bias"));
  }

  Tensor norm(const Tensor& x, const std::string& prefix) const {
    return layer_norm(x, p(prefix + ".gain"), p(prefix + ".bias"), kLayerNormEps);
  }

  Tensor attention(const Tensor& query_in, const Tensor& kv_in, const Tensor& mask,
                   const std::string& prefix) const {
    const auto& c = model.config();
    const std::size_t dh = c.d_model / c.n_heads;
    const std::vector<std::size_t> sizes(c.n_heads, dh);
    auto qs = split_last(linear(query_in, prefix + ".q"), sizes);
    auto ks = split_last(linear(kv_in, prefix + ".k"), sizes);
    auto vs = split_last(linear(kv_in, prefix + ".v"), sizes);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(c.n_heads);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      Tensor scores = add(scale(matmul(qs[h], transpose(ks[h])), inv_sqrt), mask);
      heads.push_back(matmul(drop(softmax(scores)), vs[h]));
    }
    return linear(concat_last(heads), prefix + ".o");
  }

  Tensor feed_forward(const Tensor& x, const std::string& prefix) const {
    return linear(relu(linear(x, prefix + ".ff1")), prefix + ".ff2");
  }

  Tensor embed(const TokenBatch& tokens, const std::string& side) const {
    const auto& c = model.config();
    std::vector<int> pos(tokens.ids.size());
    for (std::size_t b = 0; b < tokens.batch; ++b) {
      for (std::size_t t = 0; t < tokens.length; ++t) pos[b * tokens.length + t] = static_cast<int>(t);
    }
    Shape lead{tokens.batch, tokens.length};
    Tensor tok = scale(embedding(p(side + ".embed_tokens"), tokens.ids, lead),
                       std::sqrt(static_cast<double>(c.d_model)));
    Tensor x = add(tok, embedding(p(side + ".embed_positions"), pos, lead));
    return drop(norm(x, side + ".embed_ln"));
  }
};

void check_tokens(const TokenBatch& tokens, std::size_t vocab, std::size_t max_len, const char* what) {
  if (tokens.batch == 0 || tokens.length == 0) {
    throw ContractError(std::string(what) + " batch is empty");
  }
  if (tokens.length > max_len) {
    throw ContractError(std::string(what) + " length " + std::to_string(tokens.length) +
                        " exceeds max_len " + std::to_string(max_len));
  }
  for (int id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ContractError(std::string(what) + " token id " + std::to_string(id) +
                          " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  for (auto len : tokens.lengths) {
    if (len == 0) throw ContractError(std::string(what) + " contains an empty sequence");
  }
}

Tensor key_padding_mask(std::size_t q_len, const TokenBatch& keys) {
  const std::size_t B = keys.batch, S = keys.length;
  std::vector<double> m(B * q_len * S, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < q_len; ++t) {
      for (std::size_t s = keys.lengths[b]; s < S; ++s) m[(b * q_len + t) * S + s] = kMaskValue;
    }
  }
  return Tensor::from({B, q_len, S}, std::move(m));
}

Tensor causal_mask(const TokenBatch& tgt) {
  const std::size_t B = tgt.batch, T = tgt.length;
  std::vector<double> m(B * T * T, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t s = 0; s < T; ++s) {
        if (s > t || s >= tgt.lengths[b]) m[(b * T + t) * T + s] = kMaskValue;
      }
    }
  }
  return Tensor::from({B, T, T}, std::move(m));
}

Tensor decoder_states(const Model& model, const Tensor& memory, const TokenBatch& src,
                      const TokenBatch& tgt_in, const ForwardOptions& options) {
  const auto& c = model.config();
  check_tokens(tgt_in, c.tgt_vocab_size, c.max_len, "target");
  if (memory.rank() != 3 || memory.dim(0) != src.batch || memory.dim(1) != src.length ||
      memory.dim(2) != c.d_model || tgt_in.batch != src.batch) {
    throw ContractError("encoder states " + shape_str(memory.shape()) + " do not match the batch");
  }
  Ctx ctx{model, options};
  Tensor self_mask = causal_mask(tgt_in);
  Tensor cross_mask = key_padding_mask(tgt_in.length, src);
  Tensor x = ctx.embed(tgt_in, "tgt");
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    x = ctx.norm(add(x, ctx.drop(ctx.attention(x, x, self_mask, pre + ".self_attn"))), pre + ".self_attn_ln");
    x = ctx.norm(add(x, ctx.drop(ctx.attention(x, memory, cross_mask, pre + ".cross_attn"))),
                 pre + ".cross_attn_ln");
    x = ctx.norm(add(x, ctx.drop(ctx.feed_forward(x, pre))), pre + ".ff_ln");
  }
  return x;
}

Tensor project_logits(const Model& model, const Tensor& states) {
  return matmul(states, transpose(model.param("tgt.embed_tokens")));
}

}  // namespace

// ---------------------------------------------------------------------------

const char* tag_name(GroupTag tag) {
  switch (tag) {
    case GroupTag::Src: return "SRC";
    case GroupTag::Tgt: return "TGT";
    case GroupTag::Enc: return "ENC";
    case GroupTag::Dec: return "DEC";
    case GroupTag::Xattn: return "XATTN";
  }
  return "?";
}

GroupTag tag_from_name(const std::string& name) {
  for (auto t : TagSet::all().tags()) {
    if (name == tag_name(t)) return t;
  }
  throw ContractError("unknown group tag '" + name + "'");
}

std::size_t TagSet::size() const {
  std::size_t n = 0;
  for (unsigned i = 0; i < kGroupCount; ++i) n += (bits_ >> i) & 1u;
  return n;
}

std::vector<GroupTag> TagSet::tags() const {
  std::vector<GroupTag> out;
  for (unsigned i = 0; i < kGroupCount; ++i) {
    if ((bits_ >> i) & 1u) out.push_back(static_cast<GroupTag>(i));
  }
  return out;
}

std::string TagSet::str() const {
  std::string s = "{";
  bool first = true;
  for (auto t : tags()) {
    if (!first) s += ",";
    s += tag_name(t);
    first = false;
  }
  return s + "}";
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (d_model == 0 || n_heads == 0 || n_enc_layers == 0 || n_dec_layers == 0 || d_ff == 0 ||
      max_len == 0 || src_vocab_size == 0 || tgt_vocab_size == 0) {
    fail("all extents must be >= 1");
  }
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_model < 2) fail("d_model must be >= 2 for layer norm");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(embed_init_scale > 0.0)) fail("embed_init_scale must be > 0");
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  push_embeddings(out, "src", GroupTag::Src, c.src_vocab_size, c);
  push_embeddings(out, "tgt", GroupTag::Tgt, c.tgt_vocab_size, c);
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    push_attention(out, pre + ".self_attn", GroupTag::Enc, c.d_model);
    push_norm(out, pre + ".self_attn_ln", GroupTag::Enc, c.d_model);
    push_linear(out, pre + ".ff1", GroupTag::Enc, c.d_model, c.d_ff);
    push_linear(out, pre + ".ff2", GroupTag::Enc, c.d_ff, c.d_model);
    push_norm(out, pre + ".ff_ln", GroupTag::Enc, c.d_model);
  }
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    push_attention(out, pre + ".self_attn", GroupTag::Dec, c.d_model);
    push_norm(out, pre + ".self_attn_ln", GroupTag::Dec, c.d_model);
    push_attention(out, pre + ".cross_attn", GroupTag::Xattn, c.d_model);
    push_norm(out, pre + ".cross_attn_ln", GroupTag::Xattn, c.d_model);
    push_linear(out, pre + ".ff1", GroupTag::Dec, c.d_model, c.d_ff);
    push_linear(out, pre + ".ff2", GroupTag::Dec, c.d_ff, c.d_model);
    push_norm(out, pre + ".ff_ln", GroupTag::Dec, c.d_model);
  }
  return out;
}

void ParameterRegistry::add(std::string name, Tensor tensor, GroupTag tag) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  entries_.push_back({std::move(name), std::move(tensor), tag});
}

const NamedParam* ParameterRegistry::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const NamedParam& ParameterRegistry::at(const std::string& name) const {
  const NamedParam* p = find(name);
  if (!p) throw ContractError("no parameter named '" + name + "'");
  return *p;
}

NamedParam& ParameterRegistry::at(const std::string& name) {
  return const_cast<NamedParam&>(std::as_const(*this).at(name));
}

std::size_t ParameterRegistry::total_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

ParameterRegistry ParameterRegistry::clone() const {
  ParameterRegistry out;
  for (const auto& e : entries_) out.entries_.push_back({e.name, e.tensor.clone(), e.tag});
  return out;
}

Tensor init_parameter(const ParamSpec& spec, const ModelConfig& config, std::uint64_t seed) {
  switch (spec.init) {
    case ParamSpec::Init::Zero: return Tensor::zeros(spec.shape);
    case ParamSpec::Init::One: return Tensor::full(spec.shape, 1.0);
    case ParamSpec::Init::Weight: {
      std::mt19937_64 rng(splitmix64(seed ^ fnv1a(spec.name)));
      const double limit = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
      std::uniform_real_distribution<double> dist(-limit, limit);
      Tensor t = Tensor::zeros(spec.shape);
      for (auto& v : t.mutable_data()) v = dist(rng);
      return t;
    }
    case ParamSpec::Init::Embedding: {
      std::mt19937_64 rng(splitmix64(seed ^ fnv1a(spec.name)));
      std::normal_distribution<double> dist(0.0, config.embed_init_scale / std::sqrt(static_cast<double>(config.d_model)));
      Tensor t = Tensor::zeros(spec.shape);
      for (auto& v : t.mutable_data()) v = dist(rng);
      return t;
    }
  }
  throw ContractError("unknown init rule");
}

Model::Model(ModelConfig config, ParameterRegistry registry, std::string src_vocab, std::string tgt_vocab)
    : src_vocab_id(std::move(src_vocab)),
      tgt_vocab_id(std::move(tgt_vocab)),
      config_(config),
      registry_(std::move(registry)) {}

Model::Model(const Model& other)
    : src_vocab_id(other.src_vocab_id),
      tgt_vocab_id(other.tgt_vocab_id),
      parent_lineage_hash(other.parent_lineage_hash),
      regime(other.regime),
      config_(other.config_),
      registry_(other.registry_.clone()) {}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Model::set_param(const std::string& name, Tensor value) {
  NamedParam& slot = registry_.at(name);
  if (slot.tensor.shape() != value.shape()) {
    throw DimensionError("parameter '" + name + "' has shape " + shape_str(slot.tensor.shape()) +
                         ", replacement has " + shape_str(value.shape()));
  }
  slot.tensor = std::move(value);
}

Model build_model(const ModelConfig& config, std::uint64_t seed, std::string src_vocab_id,
                  std::string tgt_vocab_id) {
  ParameterRegistry registry;
  for (const auto& spec : parameter_layout(config)) {
    registry.add(spec.name, init_parameter(spec, config, seed), spec.tag);
  }
  return Model(config, std::move(registry), std::move(src_vocab_id), std::move(tgt_vocab_id));
}

std::vector<NamedParam> params_by_tags(const Model& model, TagSet tags) {
  std::vector<NamedParam> out;
  for (const auto& e : model.registry().entries()) {
    if (tags.contains(e.tag)) out.push_back(e);
  }
  return out;
}

ParamCount count_params(const Model& model, TagSet tags) {
  ParamCount pc;
  for (const auto& e : model.registry().entries()) {
    pc.total += e.tensor.numel();
    if (tags.contains(e.tag)) pc.count += e.tensor.numel();
  }
  pc.fraction = pc.total ? static_cast<double>(pc.count) / static_cast<double>(pc.total) : 0.0;
  return pc;
}

ParamCount count_params(const std::vector<ParamSpec>& layout, TagSet tags) {
  ParamCount pc;
  for (const auto& s : layout) {
    const std::size_t n = shape_numel(s.shape);
    pc.total += n;
    if (tags.contains(s.tag)) pc.count += n;
  }
  pc.fraction = pc.total ? static_cast<double>(pc.count) / static_cast<double>(pc.total) : 0.0;
  return pc;
}

// ---------------------------------------------------------------------------

TokenBatch TokenBatch::pack(const std::vector<std::vector<int>>& rows) {
  TokenBatch tb;
  tb.batch = rows.size();
  for (const auto& r : rows) tb.length = std::max(tb.length, r.size());
  tb.ids.assign(tb.batch * tb.length, SpecialTokens::kPad);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    std::copy(rows[b].begin(), rows[b].end(), tb.ids.begin() + static_cast<std::ptrdiff_t>(b * tb.length));
    tb.lengths.push_back(rows[b].size());
  }
  return tb;
}

Tensor encode(const Model& model, const TokenBatch& src, const ForwardOptions& options) {
  const auto& c = model.config();
  check_tokens(src, c.src_vocab_size, c.max_len, "source");
  Ctx ctx{model, options};
  Tensor mask = key_padding_mask(src.length, src);
  Tensor x = ctx.embed(src, "src");
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    x = ctx.norm(add(x, ctx.drop(ctx.attention(x, x, mask, pre + ".self_attn"))), pre + ".self_attn_ln");
    x = ctx.norm(add(x, ctx.drop(ctx.feed_forward(x, pre))), pre + ".ff_ln");
  }
  return x;
}

Tensor decode(const Model& model, const Tensor& memory, const TokenBatch& src, const TokenBatch& tgt_in,
              const ForwardOptions& options) {
  return project_logits(model, decoder_states(model, memory, src, tgt_in, options));
}

Tensor forward(const Model& model, std::span<const int> src_ids, std::span<const int> tgt_in_ids,
               const ForwardOptions& options) {
  TokenBatch src = TokenBatch::pack({std::vector<int>(src_ids.begin(), src_ids.end())});
  TokenBatch tgt = TokenBatch::pack({std::vector<int>(tgt_in_ids.begin(), tgt_in_ids.end())});
  Tensor memory = encode(model, src, options);
  Tensor logits = decode(model, memory, src, tgt, options);
  return reshape(logits, {tgt.length, model.config().tgt_vocab_size});
}

std::vector<int> decode_greedy(const Model& model, std::span<const int> src_ids, std::size_t max_steps,
                               int bos, int eos) {
  return decode_greedy_batch(model, {std::vector<int>(src_ids.begin(), src_ids.end())}, max_steps, 1, bos,
                             eos)
      .front();
}

std::vector<std::vector<int>> decode_greedy_batch(const Model& model,
                                                  const std::vector<std::vector<int>>& sources,
                                                  std::size_t max_steps, std::size_t batch_size, int bos,
                                                  int eos) {
  if (max_steps == 0) throw ContractError("decode_greedy needs max_steps >= 1");
  NoGradScope no_grad;
  const auto& c = model.config();
  const std::size_t steps = std::min(max_steps, c.max_len);
  const std::size_t V = c.tgt_vocab_size;
  const Tensor& table = model.param("tgt.embed_tokens");
  std::vector<std::vector<int>> results(sources.size());
  batch_size = std::max<std::size_t>(batch_size, 1);

  for (std::size_t start = 0; start < sources.size(); start += batch_size) {
    const std::size_t end = std::min(sources.size(), start + batch_size);
    std::vector<std::vector<int>> rows(sources.begin() + static_cast<std::ptrdiff_t>(start),
                                       sources.begin() + static_cast<std::ptrdiff_t>(end));
    const std::size_t B = rows.size();
    TokenBatch src = TokenBatch::pack(rows);
    Tensor memory = encode(model, src);
    std::vector<std::vector<int>> prefix(B, std::vector<int>{bos});
    std::vector<bool> done(B, false);
    std::size_t remaining = B;
    for (std::size_t step = 0; step < steps && remaining > 0; ++step) {
      TokenBatch tgt = TokenBatch::pack(prefix);
      Tensor states = decoder_states(model, memory, src, tgt, {});
      const std::size_t d = c.d_model, T = tgt.length;
      for (std::size_t b = 0; b < B; ++b) {
        if (done[b]) continue;
        const double* h = states.data().data() + (b * T + (T - 1)) * d;
        int best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < V; ++v) {
          const double* e = table.data().data() + v * d;
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += h[j] * e[j];
          if (s > best_score) {
            best_score = s;
            best = static_cast<int>(v);
          }
        }
        if (best == eos) {
          done[b] = true;
          --remaining;
        } else {
          results[start + b].push_back(best);
        }
        prefix[b].push_back(best);
      }
    }
  }
  return results;
}

}  // namespace xattn
