// Experiment driver: gen-data, train-parent, finetune, compose, eval,
// lexicon, params, gradcheck. Every subcommand writes resolved.cfg and
// appends to metrics.jsonl in --out.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "xattn/ckpt.hpp"
#include "xattn/error.hpp"
#include "xattn/experiment.hpp"
#include "xattn/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace xattn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitContract = 3;
constexpr int kExitCheck = 4;

struct Common {
  std::string config;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
};

struct Args {
  Common common;
  std::string regime;
  std::string side;
  std::string child;
  std::string parent;
  std::string ckpt;
  std::string delta;
  std::string source_child;
  std::string target_child;
  std::string mode = "restore";
  std::string split = "test";
  std::string fault;
  double h = 1e-4;
  bool denoise = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key=value configuration file")->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "output directory");
  app->add_option("--seed", c.seed, "overrides the config seed");
}

struct Run {
  ExperimentConfig cfg;
  fs::path dir;

  explicit Run(const Args& a) {
    if (!a.common.config.empty()) cfg.load_file(a.common.config);
    if (a.common.seed) cfg.seed = *a.common.seed;
    if (!a.regime.empty()) cfg.finetune_regime = a.regime;
    if (!a.side.empty()) cfg.finetune_side = a.side;
    if (!a.child.empty()) cfg.finetune_child = a.child;
    dir = a.common.out;
    fs::create_directories(dir);
    std::ofstream(dir / "resolved.cfg") << cfg.text();
  }

  MetricsLog log(const std::string& run_id) const { return MetricsLog((dir / "metrics.jsonl").string(), run_id); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

std::string pair_name(const Model& m) { return m.src_vocab_id + "-" + m.tgt_vocab_id; }

std::string child_file(const FineTuneRegime& r, const CorpusSplits& task) {
  std::string name = r.str();
  for (auto& ch : name) {
    if (ch == ':') ch = '-';
  }
  name += "-" + task.train.src_lang.id + "-" + task.train.tgt_lang.id;
  return name + (r.is_transfer() ? ".xatd" : ".xatn");
}

// Full checkpoint, or a child delta when a parent is also given.
Checkpoint load_model(const std::string& ckpt, const std::string& delta, const std::string& parent) {
  if (!delta.empty()) {
    if (parent.empty()) throw ConfigError("--delta needs --parent");
    return snapshot(load_delta(delta, load_checkpoint(parent)));
  }
  if (ckpt.empty()) throw ConfigError("need --ckpt, or --delta with --parent");
  return load_checkpoint(ckpt);
}

const ParallelCorpus& pick_split(const CorpusSplits& s, const std::string& split) {
  if (split == "train") return s.train;
  if (split == "dev") return s.dev;
  if (split == "test") return s.test;
  throw ConfigError("unknown split '" + split + "' (expected train, dev or test)");
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Args& a) {
  Run run(a);
  const TaskSuite t = make_tasks(run.cfg);
  auto log = run.log("gen-data");
  const std::pair<const char*, const CorpusSplits*> pairs[] = {
      {"parent", &t.parent}, {"lexical", &t.lexical}, {"structural", &t.structural},
      {"target", &t.target}, {"zero_shot", &t.zero_shot}};
  for (const auto& [role, s] : pairs) {
    const std::string stem = s->train.src_lang.id + "-" + s->train.tgt_lang.id;
    for (const ParallelCorpus* c : {&s->train, &s->dev, &s->test}) {
      write_corpus_file(run.path(stem + "." + split_name(c->split) + ".tsv"), *c);
      log.write(std::string(role) + "." + split_name(c->split) + ".pairs", static_cast<double>(c->pairs.size()));
    }
    std::ofstream os(run.path(stem + ".dict.tsv"));
    write_dictionary(os, gold_dictionary(s->train.src_lang, s->train.tgt_lang), s->train.src_lang, s->train.tgt_lang);
  }
  {
    std::ofstream os(run.path(run.cfg.langs.B.id + ".mono.txt"));
    for (const auto& sent : t.mono) {
      for (std::size_t i = 0; i < sent.size(); ++i) os << (i ? " " : "") << run.cfg.langs.B.token_string(sent[i]);
      os << '\n';
    }
  }
  log.write("mono.sentences", static_cast<double>(t.mono.size()));
  std::printf("wrote task corpora to %s\n", run.dir.c_str());
  return kExitOk;
}

int cmd_train_parent(const Args& a) {
  Run run(a);
  const TaskSuite t = make_tasks(run.cfg);
  TrainResult res = a.denoise ? train_denoise_parent(run.cfg, t) : train_parent(run.cfg, t.parent);
  const std::string name = a.denoise ? "denoise" : "parent";
  auto log = run.log("train-" + name);
  log.write_series(res.metrics);
  save_checkpoint(res.model, run.path(name + ".xatn"));
  log.write("final_loss", res.final_loss);
  if (!a.denoise) {
    const double b = corpus_bleu(res.model, t.parent.test);
    log.write("test_bleu", b);
    std::printf("%s %s test BLEU %.2f (best dev %.2f at step %zu)\n", name.c_str(), pair_name(res.model).c_str(), b,
                res.best_dev_bleu, res.best_step);
  } else {
    std::printf("%s final loss %.4f\n", name.c_str(), res.final_loss);
  }
  return kExitOk;
}

int cmd_finetune(const Args& a) {
  Run run(a);
  if (a.parent.empty()) throw ConfigError("finetune needs --parent");
  const Checkpoint parent = load_checkpoint(a.parent);
  const Side side = side_from_name(run.cfg.finetune_side);
  const CorpusSplits task = child_task(run.cfg, side, run.cfg.finetune_child);

  std::vector<FineTuneRegime> regimes;
  if (run.cfg.finetune_regime == "all") {
    for (auto k : kAllRegimeKinds) regimes.push_back({k, side});
  } else {
    FineTuneRegime r = FineTuneRegime::parse(run.cfg.finetune_regime);
    if (run.cfg.finetune_regime.find(':') == std::string::npos) r.side = side;
    if (r.is_transfer() && r.side != side) throw ConfigError("--regime side disagrees with --side");
    regimes.push_back(r);
  }
  const ModelConfig full = model_config(run.cfg, task.train.src_lang, task.train.tgt_lang);

  std::ofstream summary(run.path("summary.tsv"), std::ios::app);
  if (summary.tellp() == 0) summary << "regime\tpair\ttest_bleu\tbest_step\tupdated\tfraction\n";
  std::printf("%-26s %-6s %9s %9s %10s %9s\n", "regime", "pair", "test_bleu", "best_step", "updated", "fraction");
  for (const auto& r : regimes) {
    TrainResult res = finetune(run.cfg, parent, r, task, 0);
    const std::string pair = task.train.src_lang.id + "-" + task.train.tgt_lang.id;
    auto log = run.log("finetune:" + r.str() + ":" + pair);
    log.write_series(res.metrics);
    if (r.is_transfer()) {
      save_delta(res.model, parent, run.path(child_file(r, task)));
    } else {
      save_checkpoint(res.model, run.path(child_file(r, task)));
    }
    const double b = corpus_bleu(res.model, task.test);
    const StorageReport rep = storage_report(r, full);
    log.write("test_bleu", b);
    log.write("fraction", rep.fraction);
    log.write("updated_params", static_cast<double>(rep.updated_param_count));
    summary << r.str() << '\t' << pair << '\t' << b << '\t' << res.best_step << '\t' << rep.updated_param_count << '\t'
            << rep.fraction << '\n';
    std::printf("%-26s %-6s %9.2f %9zu %10zu %9.4f\n", r.str().c_str(), pair.c_str(), b, res.best_step,
                rep.updated_param_count, rep.fraction);
  }
  return kExitOk;
}

int cmd_compose(const Args& a) {
  Run run(a);
  if (a.parent.empty()) throw ConfigError("compose needs --parent");
  const Checkpoint parent = load_checkpoint(a.parent);
  if (a.mode == "restore") {
    if (a.delta.empty()) throw ConfigError("compose --mode restore needs --delta");
    const Checkpoint child = snapshot(load_delta(a.delta, parent));
    const auto regime = child.regime();
    if (!regime) throw CompositionError("child carries no fine-tuning regime");
    Model restored = restore_parent_embeddings(child, parent, regime->side);
    const auto task = splits_for(run.cfg, restored.src_vocab_id, restored.tgt_vocab_id);
    const double b = corpus_bleu(restored, task.test);
    const std::string stem = "restored-" + fs::path(a.delta).stem().string();
    save_checkpoint(restored, run.path(stem + ".xatn"));
    run.log("compose:restore:" + regime->str()).write("parent_task_bleu", b);
    std::printf("restored %s on %s: test BLEU %.2f\n", regime->str().c_str(), pair_name(restored).c_str(), b);
    return kExitOk;
  }
  if (a.mode == "zero-shot") {
    if (a.source_child.empty() || a.target_child.empty()) {
      throw ConfigError("compose --mode zero-shot needs --source-child and --target-child");
    }
    const Checkpoint src = snapshot(load_delta(a.source_child, parent));
    const Checkpoint tgt = snapshot(load_delta(a.target_child, parent));
    CompositionOptions opts;
    opts.allow_non_xattn = run.cfg.allow_non_xattn;
    Model composed = compose_zero_shot(src, tgt, opts);
    const auto task = splits_for(run.cfg, composed.src_vocab_id, composed.tgt_vocab_id);
    const double b = corpus_bleu(composed, task.test);
    save_checkpoint(composed, run.path("composed-" + pair_name(composed) + ".xatn"));
    run.log("compose:zero-shot:" + pair_name(composed)).write("test_bleu", b);
    std::printf("composed %s: test BLEU %.2f\n", pair_name(composed).c_str(), b);
    return kExitOk;
  }
  throw ConfigError("unknown --mode '" + a.mode + "' (expected restore or zero-shot)");
}

int cmd_eval(const Args& a) {
  Run run(a);
  const Checkpoint ck = load_model(a.ckpt, a.delta, a.parent);
  const auto task = splits_for(run.cfg, ck.model.src_vocab_id, ck.model.tgt_vocab_id);
  const double b = corpus_bleu(ck.model, pick_split(task, a.split));
  run.log("eval:" + pair_name(ck.model) + ":" + hash_hex(ck.content_hash)).write(a.split + "_bleu", b);
  std::printf("%s %s BLEU %.2f\n", pair_name(ck.model).c_str(), a.split.c_str(), b);
  return kExitOk;
}

int cmd_lexicon(const Args& a) {
  Run run(a);
  if (a.parent.empty() || a.delta.empty()) throw ConfigError("lexicon needs --delta and --parent");
  const Checkpoint parent = load_checkpoint(a.parent);
  const Checkpoint child = snapshot(load_delta(a.delta, parent));
  const auto regime = child.regime();
  if (!regime || !regime->is_transfer()) throw CompositionError("lexicon needs a transferred child");
  const Side side = regime->side;
  const auto task = splits_for(run.cfg, child.model.src_vocab_id, child.model.tgt_vocab_id);
  const LexiconScore score = child_lexicon_accuracy(run.cfg, child.model, parent.model, side, task.train);

  const GroupTag tag = new_side_tag(side);
  const auto& child_lang = side == Side::NewSource ? task.train.src_lang : task.train.tgt_lang;
  const auto& parent_lang =
      run.cfg.langs.by_id(tag == GroupTag::Src ? parent.model.src_vocab_id : parent.model.tgt_vocab_id);
  const auto induced =
      induce_lexicon(token_embeddings(child.model, tag), token_embeddings(parent.model, tag),
                     frequent_types(task.train, tag, run.cfg.lexicon_min_count));
  GoldDictionary out;
  for (const auto& [c, p] : induced.pairs) out.pairs.insert({c, p});
  std::ofstream os(run.path("lexicon-" + fs::path(a.delta).stem().string() + ".tsv"));
  write_dictionary(os, out, child_lang, parent_lang);

  auto log = run.log("lexicon:" + regime->str() + ":" + pair_name(child.model));
  log.write("lexicon_accuracy", score.accuracy);
  log.write("lexicon_evaluated", static_cast<double>(score.evaluated));
  std::printf("lexicon accuracy %.4f (%zu / %zu types)\n", score.accuracy, score.correct, score.evaluated);
  return kExitOk;
}

int cmd_params(const Args& a) {
  Run run(a);
  const ModelConfig mc = model_config(run.cfg, run.cfg.langs.A, run.cfg.langs.B);
  auto log = run.log("params");
  std::printf("%-26s %10s %10s %9s %12s\n", "regime", "updated", "total", "fraction", "delta_bytes");
  std::vector<FineTuneRegime> all;
  for (auto side : {Side::NewSource, Side::NewTarget}) {
    for (auto k : kAllRegimeKinds) {
      if (k != RegimeKind::Scratch) all.push_back({k, side});
    }
  }
  all.push_back({RegimeKind::Scratch, Side::NewSource});
  for (const auto& r : all) {
    const StorageReport rep = storage_report(r, mc);
    log.write(r.str() + ".fraction", rep.fraction);
    log.write(r.str() + ".updated", static_cast<double>(rep.updated_param_count));
    std::printf("%-26s %10zu %10zu %9.4f %12zu\n", r.str().c_str(), rep.updated_param_count, rep.total_param_count,
                rep.fraction, rep.bytes_if_stored_delta);
  }
  return kExitOk;
}

int cmd_gradcheck(const Args& a) {
  Run run(a);
  if (!a.fault.empty()) {
    const auto colon = a.fault.find(':');
    const double factor = colon == std::string::npos ? 1.5 : std::stod(a.fault.substr(colon + 1));
    set_backward_fault(op_from_name(a.fault.substr(0, colon)), factor);
  }
  FiniteDiffOptions opts;
  opts.seed = run.cfg.seed;
  opts.h = a.h;
  const auto cases = gradcheck_suite(opts);
  clear_backward_fault();
  auto log = run.log("gradcheck");
  bool ok = true;
  for (const auto& c : cases) {
    ok = ok && c.report.pass;
    log.write(c.name + ".max_rel_err", c.report.max_rel_err);
    std::printf("%-24s %4zu coords (%zu at kinks)  max rel %.3e  (analytic %.6e, numeric %.6e)  %s\n", c.name.c_str(),
                c.report.checked, c.report.skipped_kinks, c.report.max_rel_err, c.report.worst_analytic, c.report.worst_numeric,
                c.report.pass ? "ok" : "FAIL");
  }
  return ok ? kExitOk : kExitCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-attention transfer experiments"};
  app.require_subcommand(1);
  Args a;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic task corpora and dictionaries");
  add_common(gen, a.common);

  auto* tp = app.add_subcommand("train-parent", "train the parent translation (or denoising) model");
  add_common(tp, a.common);
  tp->add_flag("--denoise", a.denoise, "pretrain a span-denoising parent on monolingual B instead");

  auto* ft = app.add_subcommand("finetune", "fine-tune children of a parent under one regime or all");
  add_common(ft, a.common);
  ft->add_option("--parent", a.parent, "parent checkpoint")->required();
  ft->add_option("--regime", a.regime, "regime name or 'all'");
  ft->add_option("--side", a.side, "source or target");
  ft->add_option("--child", a.child, "language replacing the parent's language on that side");

  auto* co = app.add_subcommand("compose", "restore parent embeddings or compose a zero-shot model");
  add_common(co, a.common);
  co->add_option("--parent", a.parent, "parent checkpoint")->required();
  co->add_option("--mode", a.mode, "restore or zero-shot");
  co->add_option("--delta", a.delta, "child delta (restore)");
  co->add_option("--source-child", a.source_child, "source-side child delta (zero-shot)");
  co->add_option("--target-child", a.target_child, "target-side child delta (zero-shot)");

  auto* ev = app.add_subcommand("eval", "BLEU of a model on one split of its pair");
  add_common(ev, a.common);
  ev->add_option("--ckpt", a.ckpt, "full checkpoint");
  ev->add_option("--delta", a.delta, "child delta");
  ev->add_option("--parent", a.parent, "parent of --delta");
  ev->add_option("--split", a.split, "train, dev or test");

  auto* lx = app.add_subcommand("lexicon", "induce a lexicon from a child and score it");
  add_common(lx, a.common);
  lx->add_option("--delta", a.delta, "child delta")->required();
  lx->add_option("--parent", a.parent, "parent checkpoint")->required();

  auto* pa = app.add_subcommand("params", "per-regime storage report");
  add_common(pa, a.common);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the model loss");
  add_common(gc, a.common);
  gc->add_option("--step", a.h, "central-difference step");
  gc->add_option("--fault", a.fault, "corrupt one backward rule, e.g. softmax:1.5");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "gen-data") return cmd_gen_data(a);
    if (name == "train-parent") return cmd_train_parent(a);
    if (name == "finetune") return cmd_finetune(a);
    if (name == "compose") return cmd_compose(a);
    if (name == "eval") return cmd_eval(a);
    if (name == "lexicon") return cmd_lexicon(a);
    if (name == "params") return cmd_params(a);
    if (name == "gradcheck") return cmd_gradcheck(a);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitContract;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kExitUsage;
}
