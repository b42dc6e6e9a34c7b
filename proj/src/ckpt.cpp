#include "xattn/ckpt.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "xattn/error.hpp"
#include "xattn/hash.hpp"

namespace xattn {

namespace {

constexpr char kMagicFull[4] = {'X', 'A', 'T', 'N'};
constexpr char kMagicDelta[4] = {'X', 'A', 'T', 'D'};
constexpr std::size_t kPrefixBytes = 4 + 4 + 8;

using Manifest = std::map<std::string, std::string>;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
  for (double x : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(x));
}

std::string fmt_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out.empty() ? "-" : out;
}

void check_value(const std::string& key, const std::string& value) {
  if (value.find('\n') != std::string::npos) {
    throw ContractError("manifest value for '" + key + "' contains a newline");
  }
}

Manifest base_manifest(const Model& model) {
  const auto& c = model.config();
  Manifest m;
  m["format_version"] = std::to_string(kCheckpointVersion);
  m["config.d_model"] = std::to_string(c.d_model);
  m["config.n_heads"] = std::to_string(c.n_heads);
  m["config.n_enc_layers"] = std::to_string(c.n_enc_layers);
  m["config.n_dec_layers"] = std::to_string(c.n_dec_layers);
  m["config.d_ff"] = std::to_string(c.d_ff);
  m["config.max_len"] = std::to_string(c.max_len);
  m["config.src_vocab_size"] = std::to_string(c.src_vocab_size);
  m["config.tgt_vocab_size"] = std::to_string(c.tgt_vocab_size);
  m["config.dropout"] = fmt_double(c.dropout);
  m["config.embed_init_scale"] = fmt_double(c.embed_init_scale);
  m["vocab.src"] = model.src_vocab_id;
  m["vocab.tgt"] = model.tgt_vocab_id;
  m["lineage.parent"] = model.parent_lineage_hash ? hash_hex(*model.parent_lineage_hash) : "none";
  m["regime"] = model.regime;
  return m;
}

std::vector<std::uint8_t> encode_with(const char (&magic)[4], Manifest manifest,
                                      const std::vector<const NamedParam*>& params) {
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    char key[32];
    std::snprintf(key, sizeof key, "group.%05zu", i);
    const auto& p = *params[i];
    manifest[key] = p.name + " " + tag_name(p.tag) + " " + shape_field(p.tensor.shape()) + " " +
                    std::to_string(offset);
    offset += p.tensor.numel() * sizeof(double);
  }
  manifest["payload.bytes"] = std::to_string(offset);
  std::string text;
  for (const auto& [k, v] : manifest) {
    check_value(k, v);
    text += k + "=" + v + "\n";
  }
  std::vector<std::uint8_t> out(magic, magic + 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto* p : params) put_tensor(out, p->tensor);
  return out;
}

// ---------------------------------------------------------------------------

struct GroupEntry {
  std::string name;
  GroupTag tag;
  Shape shape;
  std::size_t offset;
};

struct Decoded {
  Manifest manifest;
  std::vector<GroupEntry> groups;
  std::size_t payload_start = 0;
  std::size_t payload_bytes = 0;
};

std::uint64_t parse_uint(const std::string& text, const std::string& what, std::uint64_t at) {
  std::uint64_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || text.empty()) {
    throw FormatError("malformed integer for " + what + ": '" + text + "'", at);
  }
  return v;
}

const std::string& need(const Manifest& m, const std::string& key, std::uint64_t at) {
  auto it = m.find(key);
  if (it == m.end()) throw FormatError("manifest lacks key '" + key + "'", at);
  return it->second;
}

Decoded decode_frame(const std::vector<std::uint8_t>& bytes, const char (&magic)[4]) {
  if (bytes.size() < kPrefixBytes) throw FormatError("file too short for header", bytes.size());
  if (std::memcmp(bytes.data(), magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + std::string(magic, 4), 0);
  }
  const auto version = static_cast<std::uint32_t>(get_le(bytes.data() + 4, 4));
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported format version " + std::to_string(version), 4);
  }
  const std::uint64_t mlen = get_le(bytes.data() + 8, 8);
  if (mlen > bytes.size() - kPrefixBytes) throw FormatError("manifest length exceeds file size", 8);

  Decoded d;
  const std::string text(bytes.begin() + kPrefixBytes, bytes.begin() + static_cast<std::ptrdiff_t>(kPrefixBytes + mlen));
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("manifest line not terminated", kPrefixBytes + pos);
    const std::string line = text.substr(pos, nl - pos);
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) throw FormatError("malformed manifest line", kPrefixBytes + pos);
    if (!d.manifest.emplace(line.substr(0, eq), line.substr(eq + 1)).second) {
      throw FormatError("duplicate manifest key '" + line.substr(0, eq) + "'", kPrefixBytes + pos);
    }
    pos = nl + 1;
  }
  const std::uint64_t at = kPrefixBytes;
  if (parse_uint(need(d.manifest, "format_version", at), "format_version", at) != kCheckpointVersion) {
    throw FormatError("manifest format_version disagrees with header", at);
  }
  d.payload_start = kPrefixBytes + mlen;
  d.payload_bytes = parse_uint(need(d.manifest, "payload.bytes", at), "payload.bytes", at);

  std::size_t expect_offset = 0;
  for (std::size_t i = 0;; ++i) {
    char key[32];
    std::snprintf(key, sizeof key, "group.%05zu", i);
    auto it = d.manifest.find(key);
    if (it == d.manifest.end()) break;
    std::istringstream is(it->second);
    std::string name, tag, shape, offset, extra;
    if (!(is >> name >> tag >> shape >> offset) || (is >> extra)) {
      throw FormatError(std::string("malformed group entry ") + key, at);
    }
    GroupEntry g;
    g.name = name;
    try {
      g.tag = tag_from_name(tag);
    } catch (const Error&) {
      throw FormatError("unknown group tag '" + tag + "'", at);
    }
    if (shape != "-") {
      std::size_t s = 0;
      while (s <= shape.size()) {
        auto x = shape.find('x', s);
        if (x == std::string::npos) x = shape.size();
        g.shape.push_back(parse_uint(shape.substr(s, x - s), "shape of " + name, at));
        s = x + 1;
      }
    }
    g.offset = parse_uint(offset, "offset of " + name, at);
    if (g.offset != expect_offset) throw FormatError("group " + name + " has non-contiguous offset", at);
    expect_offset += shape_numel(g.shape) * sizeof(double);
    d.groups.push_back(std::move(g));
  }
  if (expect_offset != d.payload_bytes) throw FormatError("group table disagrees with payload.bytes", at);
  if (bytes.size() - d.payload_start < d.payload_bytes) {
    throw FormatError("payload truncated: need " + std::to_string(d.payload_bytes) + " bytes", bytes.size());
  }
  if (bytes.size() - d.payload_start > d.payload_bytes) {
    throw FormatError("trailing bytes after payload", d.payload_start + d.payload_bytes);
  }
  return d;
}

ModelConfig config_from(const Manifest& m) {
  const std::uint64_t at = kPrefixBytes;
  auto u = [&](const char* key) { return static_cast<std::size_t>(parse_uint(need(m, key, at), key, at)); };
  ModelConfig c;
  c.d_model = u("config.d_model");
  c.n_heads = u("config.n_heads");
  c.n_enc_layers = u("config.n_enc_layers");
  c.n_dec_layers = u("config.n_dec_layers");
  c.d_ff = u("config.d_ff");
  c.max_len = u("config.max_len");
  c.src_vocab_size = u("config.src_vocab_size");
  c.tgt_vocab_size = u("config.tgt_vocab_size");
  auto real = [&](const char* key, double& out) {
    const std::string& text = need(m, key, at);
    auto res = std::from_chars(text.data(), text.data() + text.size(), out);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
      throw FormatError(std::string("malformed ") + key, at);
    }
  };
  real("config.dropout", c.dropout);
  real("config.embed_init_scale", c.embed_init_scale);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), at);
  }
  return c;
}

std::optional<std::uint64_t> lineage_from(const Manifest& m) {
  const std::string& v = need(m, "lineage.parent", kPrefixBytes);
  if (v == "none") return std::nullopt;
  std::uint64_t h = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), h, 16);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || v.size() != 16) {
    throw FormatError("malformed lineage hash '" + v + "'", kPrefixBytes);
  }
  return h;
}

Tensor read_tensor(const std::vector<std::uint8_t>& bytes, std::size_t at, const Shape& shape) {
  std::vector<double> values(shape_numel(shape));
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = std::bit_cast<double>(get_le(bytes.data() + at + 8 * i, 8));
  }
  return Tensor::from(shape, std::move(values));
}

Model model_shell(const Manifest& m, const ModelConfig& config, ParameterRegistry registry) {
  Model model(config, std::move(registry), need(m, "vocab.src", kPrefixBytes), need(m, "vocab.tgt", kPrefixBytes));
  model.parent_lineage_hash = lineage_from(m);
  model.regime = need(m, "regime", kPrefixBytes);
  return model;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("cannot write " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ContractError("short write to " + path);
}

FineTuneRegime child_regime(const Model& m, const char* role) {
  try {
    return FineTuneRegime::parse(m.regime);
  } catch (const ConfigError&) {
    throw CompositionError(std::string(role) + " has no transfer regime (regime '" + m.regime + "')");
  }
}

ModelConfig with_vocab(ModelConfig c, GroupTag side, std::size_t size) {
  (side == GroupTag::Src ? c.src_vocab_size : c.tgt_vocab_size) = size;
  return c;
}

std::size_t vocab_of(const ModelConfig& c, GroupTag side) {
  return side == GroupTag::Src ? c.src_vocab_size : c.tgt_vocab_size;
}

}  // namespace

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::optional<FineTuneRegime> Checkpoint::regime() const {
  try {
    return FineTuneRegime::parse(model.regime);
  } catch (const ConfigError&) {
    return std::nullopt;
  }
}

std::uint64_t payload_hash(const Model& model) {
  std::uint64_t h = kFnvOffset;
  std::uint8_t buf[8];
  for (const auto& e : model.registry().entries()) {
    for (double x : e.tensor.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(x);
      for (int i = 0; i < 8; ++i) buf[i] = static_cast<std::uint8_t>(bits >> (8 * i));
      h = fnv1a(std::span<const std::uint8_t>(buf, 8), h);
    }
  }
  return h;
}

Checkpoint snapshot(const Model& model) { return {model, payload_hash(model)}; }

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  std::vector<const NamedParam*> params;
  for (const auto& e : model.registry().entries()) params.push_back(&e);
  return encode_with(kMagicFull, base_manifest(model), params);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const Decoded d = decode_frame(bytes, kMagicFull);
  const ModelConfig config = config_from(d.manifest);
  const auto layout = parameter_layout(config);
  if (layout.size() != d.groups.size()) {
    throw FormatError("group table has " + std::to_string(d.groups.size()) + " entries, config implies " +
                          std::to_string(layout.size()),
                      kPrefixBytes);
  }
  ParameterRegistry registry;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& g = d.groups[i];
    if (g.name != layout[i].name || g.tag != layout[i].tag || g.shape != layout[i].shape) {
      throw FormatError("group entry '" + g.name + "' does not match the configured layout", kPrefixBytes);
    }
    registry.add(g.name, read_tensor(bytes, d.payload_start + g.offset, g.shape), g.tag);
  }
  Model model = model_shell(d.manifest, config, std::move(registry));
  const std::uint64_t h = fnv1a(std::span<const std::uint8_t>(bytes.data() + d.payload_start, d.payload_bytes));
  return {std::move(model), h};
}

void save_checkpoint(const Model& model, const std::string& path) { write_file(path, encode_checkpoint(model)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_delta(const Model& child, const Checkpoint& parent) {
  if (child.parent_lineage_hash != parent.content_hash) {
    throw CompositionError("delta needs the child's own parent (lineage " +
                           (child.parent_lineage_hash ? hash_hex(*child.parent_lineage_hash) : std::string("none")) +
                           ", parent payload " + hash_hex(parent.content_hash) + ")");
  }
  const TagSet stored = regime_trainable_tags(child_regime(child, "delta child"));
  std::vector<const NamedParam*> params;
  for (const auto& e : child.registry().entries()) {
    if (stored.contains(e.tag)) {
      params.push_back(&e);
      continue;
    }
    const NamedParam* p = parent.model.registry().find(e.name);
    if (!p || !p->tensor.bit_equal(e.tensor)) {
      throw CompositionError("frozen parameter '" + e.name + "' differs from the parent; cannot store as delta");
    }
  }
  Manifest m = base_manifest(child);
  m["delta.parent"] = hash_hex(parent.content_hash);
  return encode_with(kMagicDelta, std::move(m), params);
}

Model decode_delta(const std::vector<std::uint8_t>& bytes, const Checkpoint& parent) {
  const Decoded d = decode_frame(bytes, kMagicDelta);
  const std::string& want = need(d.manifest, "delta.parent", kPrefixBytes);
  if (want != hash_hex(parent.content_hash)) {
    throw CompositionError("delta was written against parent " + want + ", got " + hash_hex(parent.content_hash));
  }
  const ModelConfig config = config_from(d.manifest);
  std::map<std::string, const GroupEntry*> stored;
  for (const auto& g : d.groups) stored[g.name] = &g;
  ParameterRegistry registry;
  std::size_t used = 0;
  for (const auto& spec : parameter_layout(config)) {
    auto it = stored.find(spec.name);
    if (it != stored.end()) {
      const GroupEntry& g = *it->second;
      if (g.tag != spec.tag || g.shape != spec.shape) {
        throw FormatError("delta entry '" + g.name + "' does not match the configured layout", kPrefixBytes);
      }
      registry.add(spec.name, read_tensor(bytes, d.payload_start + g.offset, g.shape), spec.tag);
      ++used;
      continue;
    }
    const NamedParam* p = parent.model.registry().find(spec.name);
    if (!p || p->tensor.shape() != spec.shape) {
      throw CompositionError("parent lacks a compatible '" + spec.name + "' for the delta");
    }
    registry.add(spec.name, p->tensor.clone(), spec.tag);
  }
  if (used != d.groups.size()) throw FormatError("delta stores parameters outside the layout", kPrefixBytes);
  return model_shell(d.manifest, config, std::move(registry));
}

void save_delta(const Model& child, const Checkpoint& parent, const std::string& path) {
  write_file(path, encode_delta(child, parent));
}

Model load_delta(const std::string& path, const Checkpoint& parent) { return decode_delta(read_file(path), parent); }

// ---------------------------------------------------------------------------

StorageReport storage_report(const FineTuneRegime& regime, const ModelConfig& config) {
  const ParamCount pc = count_params(parameter_layout(config), regime_trainable_tags(regime));
  return {regime, pc.count, pc.total, pc.fraction, pc.count * sizeof(double)};
}

Model restore_parent_embeddings(const Checkpoint& child, const Checkpoint& parent, Side side) {
  if (child.model.parent_lineage_hash != parent.content_hash) {
    throw CompositionError("child does not descend from this parent (lineage " +
                           (child.model.parent_lineage_hash ? hash_hex(*child.model.parent_lineage_hash)
                                                            : std::string("none")) +
                           ", parent payload " + hash_hex(parent.content_hash) + ")");
  }
  const FineTuneRegime r = child_regime(child.model, "child");
  if (r.side != side) {
    throw CompositionError(std::string("child was transferred on ") + side_name(r.side) + ", not " + side_name(side));
  }
  const GroupTag tag = new_side_tag(side);
  const ModelConfig config = with_vocab(child.model.config(), tag, vocab_of(parent.model.config(), tag));
  if (!(config == parent.model.config())) throw CompositionError("child and parent configurations differ");

  ParameterRegistry registry;
  for (const auto& e : child.model.registry().entries()) {
    const Tensor& t = e.tag == tag ? parent.model.param(e.name) : e.tensor;
    registry.add(e.name, t.clone(), e.tag);
  }
  Model out(config, std::move(registry), tag == GroupTag::Src ? parent.model.src_vocab_id : child.model.src_vocab_id,
            tag == GroupTag::Tgt ? parent.model.tgt_vocab_id : child.model.tgt_vocab_id);
  out.parent_lineage_hash = child.model.parent_lineage_hash;
  out.regime = child.model.regime;
  return out;
}

Model compose_zero_shot(const Checkpoint& source_child, const Checkpoint& target_child,
                        const CompositionOptions& options) {
  const auto& s = source_child.model;
  const auto& t = target_child.model;
  if (!s.parent_lineage_hash || !t.parent_lineage_hash) throw CompositionError("both inputs must be transferred children");
  if (*s.parent_lineage_hash != *t.parent_lineage_hash) {
    throw CompositionError("children descend from different parents (" + hash_hex(*s.parent_lineage_hash) + " vs " +
                           hash_hex(*t.parent_lineage_hash) + ")");
  }
  const FineTuneRegime rs = child_regime(s, "source child");
  const FineTuneRegime rt = child_regime(t, "target child");
  if (options.require_sides && (rs.side != Side::NewSource || rt.side != Side::NewTarget)) {
    throw CompositionError("expected a NEW_SOURCE source child and a NEW_TARGET target child, got " + rs.str() +
                           " and " + rt.str());
  }
  auto xattn_like = [](RegimeKind k) { return k == RegimeKind::EmbXattn || k == RegimeKind::EmbRandXattn; };
  if (!options.allow_non_xattn && (!xattn_like(rs.kind) || !xattn_like(rt.kind))) {
    throw CompositionError("composition of " + rs.str() + " and " + rt.str() +
                           " refused: only cross-attention-tuned children have aligned embeddings");
  }
  const ModelConfig config = with_vocab(t.config(), GroupTag::Src, s.config().src_vocab_size);
  if (!(config == with_vocab(s.config(), GroupTag::Tgt, t.config().tgt_vocab_size))) {
    throw CompositionError("children have different architectures");
  }
  ParameterRegistry registry;
  for (const auto& e : t.registry().entries()) {
    const Tensor& src = e.tag == GroupTag::Src ? s.param(e.name) : e.tensor;
    registry.add(e.name, src.clone(), e.tag);
  }
  Model out(config, std::move(registry), s.src_vocab_id, t.tgt_vocab_id);
  out.parent_lineage_hash = t.parent_lineage_hash;
  out.regime = "COMPOSED";
  return out;
}

}  // namespace xattn
