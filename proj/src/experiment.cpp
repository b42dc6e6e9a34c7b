#include "xattn/experiment.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>
#include <type_traits>

#include "json.hpp"

#include "xattn/error.hpp"
#include "xattn/hash.hpp"

namespace xattn {

namespace {

struct Binding {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string fmt(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (value.empty() || res.ec != std::errc() || res.ptr != value.data() + value.size()) {
    throw ConfigError("bad value '" + value + "' for key '" + key + "'");
  }
  return out;
}

template <class T>
Binding field(const std::string& key, T& ref) {
  if constexpr (std::is_same_v<T, std::string>) {
    return {[&ref](const std::string& v) { ref = v; }, [&ref] { return ref; }};
  } else if constexpr (std::is_floating_point_v<T>) {
    return {[&ref, key](const std::string& v) { ref = parse_number<T>(key, v); }, [&ref] { return fmt(ref); }};
  } else {
    return {[&ref, key](const std::string& v) { ref = parse_number<T>(key, v); },
            [&ref] { return std::to_string(ref); }};
  }
}
Binding flag(const std::string& key, bool& ref) {
  return {[&ref, key](const std::string& v) {
            if (v == "true" || v == "1") ref = true;
            else if (v == "false" || v == "0") ref = false;
            else throw ConfigError("bad value '" + v + "' for key '" + key + "' (expected true/false)");
          },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

std::map<std::string, Binding> bindings(ExperimentConfig& c) {
  std::map<std::string, Binding> b;
  b["seed"] = field("seed", c.seed);

  b["model.d_model"] = field("model.d_model", c.model.d_model);
  b["model.n_heads"] = field("model.n_heads", c.model.n_heads);
  b["model.n_enc_layers"] = field("model.n_enc_layers", c.model.n_enc_layers);
  b["model.n_dec_layers"] = field("model.n_dec_layers", c.model.n_dec_layers);
  b["model.d_ff"] = field("model.d_ff", c.model.d_ff);
  b["model.max_len"] = field("model.max_len", c.model.max_len);
  b["model.dropout"] = field("model.dropout", c.model.dropout);
  b["model.embed_init_scale"] = field("model.embed_init_scale", c.model.embed_init_scale);

  b["data.concepts"] = field("data.concepts", c.data.concepts);
  b["data.parent_pairs"] = field("data.parent_pairs", c.data.parent_pairs);
  b["data.child_pairs"] = field("data.child_pairs", c.data.child_pairs);
  b["data.dev_pairs"] = field("data.dev_pairs", c.data.dev_pairs);
  b["data.test_pairs"] = field("data.test_pairs", c.data.test_pairs);
  b["data.mono_sentences"] = field("data.mono_sentences", c.data.mono_sentences);
  b["data.min_len"] = field("data.min_len", c.data.min_len);
  b["data.max_len"] = field("data.max_len", c.data.max_len);
  b["data.zipf"] = field("data.zipf", c.data.zipf);

  for (auto* lang : {&c.langs.A, &c.langs.B, &c.langs.C, &c.langs.R, &c.langs.D}) {
    const std::string p = "lang." + lang->id + ".";
    b[p + "surface_seed"] = field(p + "surface_seed", lang->surface_seed);
    b[p + "perm_seed"] = field(p + "perm_seed", lang->permutation_seed);
    b[p + "reorder"] = {[lang](const std::string& v) { lang->reorder = reorder_from_name(v); },
                        [lang] { return std::string(reorder_name(lang->reorder)); }};
  }

  for (auto [prefix, tc] : {std::pair<std::string, TrainConfig*>{"parent.", &c.parent_train},
                            {"child.", &c.child_train}, {"denoise.", &c.denoise_train}}) {
    b[prefix + "lr"] = field(prefix + "lr", tc->lr);
    b[prefix + "beta1"] = field(prefix + "beta1", tc->beta1);
    b[prefix + "beta2"] = field(prefix + "beta2", tc->beta2);
    b[prefix + "adam_eps"] = field(prefix + "adam_eps", tc->adam_eps);
    b[prefix + "warmup_steps"] = field(prefix + "warmup_steps", tc->warmup_steps);
    b[prefix + "max_steps"] = field(prefix + "max_steps", tc->max_steps);
    b[prefix + "batch_size"] = field(prefix + "batch_size", tc->batch_size);
    b[prefix + "label_smoothing"] = field(prefix + "label_smoothing", tc->label_smoothing);
    b[prefix + "clip_norm"] = field(prefix + "clip_norm", tc->clip_norm);
    b[prefix + "eval_every"] = field(prefix + "eval_every", tc->eval_every);
    b[prefix + "keep_best_dev"] = flag(prefix + "keep_best_dev", tc->keep_best_dev);
  }

  b["noise.mask_ratio"] = field("noise.mask_ratio", c.noise.mask_ratio);
  b["noise.mean_span"] = field("noise.mean_span", c.noise.mean_span);

  b["eval.replicas"] = field("eval.replicas", c.replicas);
  b["eval.lexicon_min_count"] = field("eval.lexicon_min_count", c.lexicon_min_count);
  b["finetune.regime"] = field("finetune.regime", c.finetune_regime);
  b["finetune.side"] = field("finetune.side", c.finetune_side);
  b["finetune.child"] = field("finetune.child", c.finetune_child);
  b["compose.allow_non_xattn"] = flag("compose.allow_non_xattn", c.allow_non_xattn);
  return b;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto z = s.find_last_not_of(" \t\r");
  return s.substr(a, z - a + 1);
}

}  // namespace

const SyntheticLanguageSpec& LanguageSet::by_id(const std::string& id) const {
  for (const auto* l : {&A, &B, &C, &R, &D}) {
    if (l->id == id) return *l;
  }
  throw ConfigError("unknown language '" + id + "' (expected one of A, B, C, R, D)");
}

ExperimentConfig::ExperimentConfig() {
  model.embed_init_scale = 0.3;
  langs.A = {"A", data.concepts, 11, Reorder::Identity, 0};
  langs.B = {"B", data.concepts, 12, Reorder::Reverse, 0};
  langs.C = {"C", data.concepts, 13, Reorder::Identity, 0};
  langs.R = {"R", data.concepts, 14, Reorder::Reverse, 0};
  langs.D = {"D", data.concepts, 15, Reorder::Reverse, 0};

  parent_train.lr = 1e-3;
  parent_train.max_steps = 3000;
  parent_train.eval_every = 500;
  child_train.lr = 2e-3;
  child_train.max_steps = 3000;
  child_train.eval_every = 500;
  denoise_train = parent_train;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  auto b = bindings(*this);
  auto it = b.find(key);
  if (it == b.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(value);
  if (key == "data.concepts") {
    for (auto* l : {&langs.A, &langs.B, &langs.C, &langs.R, &langs.D}) l->concept_vocab_size = data.concepts;
  }
}

void ExperimentConfig::load(std::istream& is) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " lacks '='");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void ExperimentConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  load(is);
}

std::map<std::string, std::string> ExperimentConfig::values() const {
  std::map<std::string, std::string> out;
  for (auto& [k, b] : bindings(const_cast<ExperimentConfig&>(*this))) out[k] = b.get();
  return out;
}

std::string ExperimentConfig::text() const {
  std::string out;
  for (const auto& [k, v] : values()) out += k + "=" + v + "\n";
  return out;
}

std::uint64_t component_seed(const ExperimentConfig& cfg, const std::string& component) {
  return mix_seed(cfg.seed, fnv1a(component));
}

// ---------------------------------------------------------------------------

CorpusSplits make_pair(const ExperimentConfig& cfg, const std::string& src, const std::string& tgt,
                       std::size_t n_train) {
  const auto& d = cfg.data;
  return gen_parallel_splits(cfg.langs.by_id(src), cfg.langs.by_id(tgt), n_train, d.dev_pairs, d.test_pairs,
                             {d.min_len, d.max_len}, d.zipf, component_seed(cfg, "data:" + src + "-" + tgt));
}

CorpusSplits splits_for(const ExperimentConfig& cfg, const std::string& src, const std::string& tgt) {
  if (src == tgt) throw ConfigError("no parallel task for " + src + "->" + tgt);
  const bool parent = src == cfg.langs.A.id && tgt == cfg.langs.B.id;
  return make_pair(cfg, src, tgt, parent ? cfg.data.parent_pairs : cfg.data.child_pairs);
}

CorpusSplits child_task(const ExperimentConfig& cfg, Side side, const std::string& child) {
  return side == Side::NewSource ? splits_for(cfg, child, cfg.langs.B.id) : splits_for(cfg, cfg.langs.A.id, child);
}

TaskSuite make_tasks(const ExperimentConfig& cfg) {
  TaskSuite t;
  t.parent = make_pair(cfg, "A", "B", cfg.data.parent_pairs);
  t.lexical = make_pair(cfg, "C", "B", cfg.data.child_pairs);
  t.structural = make_pair(cfg, "R", "B", cfg.data.child_pairs);
  t.target = make_pair(cfg, "A", "D", cfg.data.child_pairs);
  t.zero_shot = make_pair(cfg, "C", "D", cfg.data.child_pairs);
  t.mono = gen_monolingual(cfg.langs.B, cfg.data.mono_sentences, {cfg.data.min_len, cfg.data.max_len}, cfg.data.zipf,
                           component_seed(cfg, "data:mono-B"));
  return t;
}

ModelConfig model_config(const ExperimentConfig& cfg, const SyntheticLanguageSpec& src,
                         const SyntheticLanguageSpec& tgt) {
  ModelConfig mc = cfg.model;
  mc.src_vocab_size = src.vocab_size();
  mc.tgt_vocab_size = tgt.vocab_size();
  mc.validate();
  return mc;
}

TrainResult train_parent(const ExperimentConfig& cfg, const CorpusSplits& data) {
  const auto& s = data.train.src_lang;
  const auto& t = data.train.tgt_lang;
  Model m = build_model(model_config(cfg, s, t), component_seed(cfg, "init:parent"), s.id, t.id);
  TrainConfig tc = cfg.parent_train;
  tc.seed = component_seed(cfg, "train:parent");
  return train(std::move(m), data.train, {}, tc, &data.dev);
}

TrainResult train_denoise_parent(const ExperimentConfig& cfg, const TaskSuite& tasks) {
  const auto& b = cfg.langs.B;
  Model m = build_model(model_config(cfg, b, b), component_seed(cfg, "init:denoise"), b.id, b.id);
  TrainConfig tc = cfg.denoise_train;
  tc.seed = component_seed(cfg, "train:denoise");
  NoiseConfig nc = cfg.noise;
  nc.seed = component_seed(cfg, "noise");
  return denoise_pretrain(std::move(m), tasks.mono, b.id, nc, tc);
}

TrainResult finetune(const ExperimentConfig& cfg, const Checkpoint& parent, const FineTuneRegime& regime,
                     const CorpusSplits& data, std::size_t replica) {
  const auto& s = data.train.src_lang;
  const auto& t = data.train.tgt_lang;
  const std::string run = regime.str() + ":" + s.id + "-" + t.id + ":" + std::to_string(replica);
  Model m;
  if (regime.is_transfer()) {
    const auto& fresh = regime.side == Side::NewSource ? s : t;
    m = init_child(parent, regime, fresh.vocab_size(), component_seed(cfg, "init:" + run), fresh.id);
  } else {
    m = build_model(model_config(cfg, s, t), component_seed(cfg, "init:" + run), s.id, t.id);
  }
  TrainConfig tc = cfg.child_train;
  tc.seed = component_seed(cfg, "train:" + run);
  return train(std::move(m), data.train, regime, tc, &data.dev);
}

std::set<int> frequent_types(const ParallelCorpus& corpus, GroupTag side, std::size_t min_count) {
  std::map<int, std::size_t> counts;
  for (const auto& p : corpus.pairs) {
    for (int tok : side == GroupTag::Src ? p.src : p.tgt) ++counts[tok];
  }
  std::set<int> out;
  for (const auto& [tok, n] : counts) {
    if (n >= min_count && tok >= SpecialTokens::kCount) out.insert(tok);
  }
  return out;
}

LexiconScore child_lexicon_accuracy(const ExperimentConfig& cfg, const Model& child, const Model& parent,
                                    Side side, const ParallelCorpus& child_train) {
  const GroupTag tag = new_side_tag(side);
  const auto& child_lang = side == Side::NewSource ? child_train.src_lang : child_train.tgt_lang;
  const auto& parent_lang = cfg.langs.by_id(tag == GroupTag::Src ? parent.src_vocab_id : parent.tgt_vocab_id);
  const auto induced = induce_lexicon(token_embeddings(child, tag), token_embeddings(parent, tag),
                                      frequent_types(child_train, tag, cfg.lexicon_min_count));
  return lexicon_accuracy(induced.pairs, gold_dictionary(child_lang, parent_lang));
}

// ---------------------------------------------------------------------------

MetricsLog::MetricsLog(std::string path, std::string run_id) : path_(std::move(path)), run_id_(std::move(run_id)) {}

void MetricsLog::write(const std::string& metric, double value, std::optional<std::size_t> step) {
  nlohmann::ordered_json rec;
  rec["run_id"] = run_id_;
  if (step) rec["step"] = *step;
  rec["metric"] = metric;
  rec["value"] = value;
  std::ofstream os(path_, std::ios::app);
  if (!os) throw ContractError("cannot append to metrics file " + path_);
  os << rec.dump() << '\n';
}

void MetricsLog::write_series(const std::vector<MetricPoint>& points, const std::string& prefix) {
  std::ofstream os(path_, std::ios::app);
  if (!os) throw ContractError("cannot append to metrics file " + path_);
  for (const auto& p : points) {
    nlohmann::ordered_json rec;
    rec["run_id"] = run_id_;
    rec["step"] = p.step;
    rec["metric"] = prefix + p.metric;
    rec["value"] = p.value;
    os << rec.dump() << '\n';
  }
}

}  // namespace xattn
