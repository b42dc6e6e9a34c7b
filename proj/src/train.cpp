#include "xattn/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

#include "xattn/error.hpp"
#include "xattn/hash.hpp"

namespace xattn {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must lie in [0, 1)");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
}

double warmup_lr(const TrainConfig& tc, std::size_t step) {
  if (tc.warmup_steps == 0 || step >= tc.warmup_steps) return tc.lr;
  return tc.lr * static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
}

double global_grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double adam_step(std::vector<Tensor>& params, AdamState& state, const TrainConfig& tc, std::size_t step) {
  if (step < 1) throw ContractError("adam step counter starts at 1");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  const double norm = global_grad_norm(params);
  const double clip = tc.clip_norm > 0.0 && norm > tc.clip_norm ? tc.clip_norm / norm : 1.0;
  const double lr = warmup_lr(tc, step);
  const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = params[i].grad();
    if (g.empty()) continue;
    auto w = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * gj;
      v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * gj * gj;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + tc.adam_eps);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------

Model init_child(const Checkpoint& parent, const FineTuneRegime& regime, std::size_t new_vocab_size,
                 std::uint64_t seed, const std::string& new_vocab_id) {
  if (!regime.is_transfer()) throw ContractError("init_child needs a transfer regime, got SCRATCH");
  if (new_vocab_size <= static_cast<std::size_t>(SpecialTokens::kCount)) {
    throw TransferError("new vocabulary of size " + std::to_string(new_vocab_size) + " has no surface tokens");
  }
  const GroupTag fresh = new_side_tag(regime.side);
  ModelConfig config = parent.model.config();
  (fresh == GroupTag::Src ? config.src_vocab_size : config.tgt_vocab_size) = new_vocab_size;

  const std::uint64_t child_seed = mix_seed(seed, parent.content_hash);
  ParameterRegistry registry;
  for (const auto& spec : parameter_layout(config)) {
    const bool redraw = spec.tag == fresh || (regime.kind == RegimeKind::EmbRandXattn && spec.tag == GroupTag::Xattn);
    if (redraw) {
      registry.add(spec.name, init_parameter(spec, config, child_seed), spec.tag);
      continue;
    }
    const NamedParam* p = parent.model.registry().find(spec.name);
    if (!p || p->tensor.shape() != spec.shape || p->tag != spec.tag) {
      throw TransferError("parent has no compatible parameter '" + spec.name + "'");
    }
    registry.add(spec.name, p->tensor.clone(), spec.tag);
  }
  Model child(config, std::move(registry), fresh == GroupTag::Src ? new_vocab_id : parent.model.src_vocab_id,
              fresh == GroupTag::Tgt ? new_vocab_id : parent.model.tgt_vocab_id);
  child.parent_lineage_hash = parent.content_hash;
  child.regime = regime.str();
  return child;
}

Tensor batch_loss(const Model& model, const std::vector<std::vector<int>>& sources,
                  const std::vector<std::vector<int>>& targets, double label_smoothing,
                  const ForwardOptions& options) {
  if (sources.size() != targets.size() || sources.empty()) {
    throw ContractError("batch needs matching, non-empty source and target lists");
  }
  std::vector<std::vector<int>> tin, tout;
  tin.reserve(targets.size());
  tout.reserve(targets.size());
  for (const auto& t : targets) {
    tin.push_back(to_target_input(t));
    tout.push_back(to_target_output(t));
  }
  const TokenBatch src = TokenBatch::pack(sources);
  const TokenBatch tgt_in = TokenBatch::pack(tin);
  const TokenBatch tgt_out = TokenBatch::pack(tout);
  const Tensor memory = encode(model, src, options);
  const Tensor logits = decode(model, memory, src, tgt_in, options);
  const std::size_t V = model.config().tgt_vocab_size;
  return cross_entropy(reshape(logits, {tgt_in.batch * tgt_in.length, V}), tgt_out.ids, label_smoothing,
                       SpecialTokens::kPad);
}

double corpus_bleu(const Model& model, const ParallelCorpus& corpus, std::size_t max_extra_steps) {
  const auto sources = corpus.sources();
  std::size_t longest = 0;
  for (const auto& s : sources) longest = std::max(longest, s.size());
  const std::size_t steps = std::min(longest + max_extra_steps, model.config().max_len - 1);
  return bleu(decode_greedy_batch(model, sources, steps), corpus.targets());
}

namespace {

using BatchFn = std::function<void(std::size_t step, const std::vector<std::size_t>& rows,
                                   std::vector<std::vector<int>>& src, std::vector<std::vector<int>>& tgt)>;

TrainResult run_loop(Model model, TagSet trainable, std::size_t n_rows, const BatchFn& make_batch,
                     const TrainConfig& tc, const ParallelCorpus* dev) {
  tc.validate();
  if (n_rows == 0) throw ContractError("training corpus is empty");

  std::vector<Tensor> params;
  for (auto& e : model.registry().entries()) {
    const bool rg = trainable.contains(e.tag);
    e.tensor.set_requires_grad(rg);
    e.tensor.drop_grad();
    if (rg) params.push_back(e.tensor);
  }

  std::mt19937_64 order_rng(mix_seed(tc.seed, 0x0bde));
  std::mt19937_64 dropout_rng(mix_seed(tc.seed, 0xd0));
  ForwardOptions fopts;
  fopts.training = model.config().dropout > 0.0;
  fopts.rng = &dropout_rng;

  std::vector<std::size_t> order(n_rows);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), order_rng);
  std::size_t cursor = 0;

  TrainResult res;
  AdamState state;
  std::optional<ParameterRegistry> best;
  std::vector<std::size_t> rows;
  std::vector<std::vector<int>> src, tgt;
  for (std::size_t step = 1; step <= tc.max_steps; ++step) {
    rows.clear();
    while (rows.size() < std::min(tc.batch_size, n_rows)) {
      if (cursor == n_rows) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      rows.push_back(order[cursor++]);
    }
    src.clear();
    tgt.clear();
    make_batch(step, rows, src, tgt);

    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = batch_loss(model, src, tgt, tc.label_smoothing, fopts);
    }
    tape.backward(loss);
    const double norm = adam_step(params, state, tc, step);
    for (auto& p : params) p.drop_grad();

    res.final_loss = loss.item();
    res.metrics.push_back({step, "loss", res.final_loss});
    res.metrics.push_back({step, "lr", warmup_lr(tc, step)});
    res.metrics.push_back({step, "grad_norm", norm});

    const bool eval_now = dev && tc.eval_every > 0 && (step % tc.eval_every == 0 || step == tc.max_steps);
    if (eval_now) {
      const double b = corpus_bleu(model, *dev);
      res.metrics.push_back({step, "dev_bleu", b});
      if (b > res.best_dev_bleu) {
        res.best_dev_bleu = b;
        res.best_step = step;
        if (tc.keep_best_dev) best = model.registry().clone();
      }
    }
  }
  if (best) model.registry() = std::move(*best);
  for (auto& e : model.registry().entries()) {
    e.tensor.set_requires_grad(false);
    e.tensor.drop_grad();
  }
  if (!best) res.best_step = tc.max_steps;
  res.model = std::move(model);
  return res;
}

}  // namespace

TrainResult train(Model model, const ParallelCorpus& corpus, const FineTuneRegime& regime, const TrainConfig& tc,
                  const ParallelCorpus* dev) {
  auto check = [&](const ParallelCorpus& c, const char* what) {
    if (c.src_vocab_id() != model.src_vocab_id || c.tgt_vocab_id() != model.tgt_vocab_id) {
      throw ContractError(std::string(what) + " corpus is " + c.src_vocab_id() + "->" + c.tgt_vocab_id() +
                          " but the model translates " + model.src_vocab_id + "->" + model.tgt_vocab_id);
    }
    if (c.src_lang.vocab_size() > model.config().src_vocab_size ||
        c.tgt_lang.vocab_size() > model.config().tgt_vocab_size) {
      throw ContractError(std::string(what) + " corpus vocabulary exceeds the model's embedding tables");
    }
  };
  check(corpus, "training");
  if (dev) check(*dev, "dev");
  const auto& pairs = corpus.pairs;
  BatchFn fn = [&pairs](std::size_t, const std::vector<std::size_t>& rows, std::vector<std::vector<int>>& src,
                        std::vector<std::vector<int>>& tgt) {
    for (auto r : rows) {
      src.push_back(pairs[r].src);
      tgt.push_back(pairs[r].tgt);
    }
  };
  return run_loop(std::move(model), regime_trainable_tags(regime), pairs.size(), fn, tc, dev);
}

TrainResult denoise_pretrain(Model model, const std::vector<std::vector<int>>& sentences,
                             const std::string& vocab_id, const NoiseConfig& noise, const TrainConfig& tc) {
  if (model.src_vocab_id != vocab_id || model.tgt_vocab_id != vocab_id ||
      model.config().src_vocab_size != model.config().tgt_vocab_size) {
    throw ContractError("denoising needs one shared vocabulary " + vocab_id + " on both sides, model has " +
                        model.src_vocab_id + "/" + model.tgt_vocab_id);
  }
  BatchFn fn = [&](std::size_t step, const std::vector<std::size_t>& rows, std::vector<std::vector<int>>& src,
                   std::vector<std::vector<int>>& tgt) {
    for (std::size_t j = 0; j < rows.size(); ++j) {
      NoiseConfig nc = noise;
      nc.seed = mix_seed(noise.seed, step * tc.batch_size + j);
      auto noised = noise_spans(sentences[rows[j]], nc);
      src.push_back(std::move(noised));
      tgt.push_back(sentences[rows[j]]);
    }
  };
  return run_loop(std::move(model), TagSet::all(), sentences.size(), fn, tc, nullptr);
}

}  // namespace xattn
