// Desk-scale acceptance run: prints one PASS/FAIL line per criterion and
// exits 4 if any criterion fails. Optional argv[1]: output directory for
// metrics.jsonl and checkpoints (default: acceptance_out).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "xattn/ckpt.hpp"
#include "xattn/experiment.hpp"
#include "xattn/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace xattn;

namespace {

// Tolerances.
constexpr double kGradH = 1e-4;
constexpr double kGradTol = 1e-4;
constexpr std::size_t kGradSamples = 100;
constexpr std::size_t kFreezeSteps = 300;
constexpr double kBodyXattnBand = 3.0;
constexpr double kXattnOverOnly = 2.0;
constexpr double kRandBelowXattn = 1.0;
constexpr double kLexiconFloor = 0.70;
constexpr double kLexiconGap = 0.20;
constexpr double kRestoreGap = 5.0;
constexpr double kRestoreRatio = 0.8;
constexpr double kZeroShotFloor = 5.0;
constexpr double kZeroShotRatio = 0.4;
constexpr double kDenoiseGap = 2.0;
constexpr double kBleuTol = 1e-9;
constexpr double kWorkedExample = 77.88007830714049;  // 100 * exp(1 - 5/4)

struct Outcome {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Outcome> outcomes;

void report(int id, bool pass, const std::string& detail) {
  outcomes.push_back({id, pass, detail});
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double now() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

bool registries_bit_equal(const Model& a, const Model& b) {
  const auto& ea = a.registry().entries();
  const auto& eb = b.registry().entries();
  if (ea.size() != eb.size()) return false;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (ea[i].name != eb[i].name || ea[i].tag != eb[i].tag || !ea[i].tensor.bit_equal(eb[i].tensor)) return false;
  }
  return a.config() == b.config() && a.src_vocab_id == b.src_vocab_id && a.tgt_vocab_id == b.tgt_vocab_id &&
         a.parent_lineage_hash == b.parent_lineage_hash && a.regime == b.regime;
}

std::vector<FineTuneRegime> ten_settings() {
  std::vector<FineTuneRegime> out;
  for (auto side : {Side::NewSource, Side::NewTarget}) {
    for (auto k : kAllRegimeKinds) out.push_back({k, side});
  }
  return out;
}

// ---------------------------------------------------------------------------

void criterion_gradients() {
  FiniteDiffOptions opts;
  opts.h = kGradH;
  opts.tol = kGradTol;
  opts.samples = kGradSamples;
  opts.seed = 7;
  bool ok = true;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : gradcheck_suite(opts)) {
    ok = ok && c.report.pass && c.report.checked >= kGradSamples;
    if (c.report.max_rel_err >= worst) {
      worst = c.report.max_rel_err;
      worst_name = c.name;
    }
  }
  report(1, ok, fmt("worst max rel err %.3e (%s), tol %.0e", worst, worst_name.c_str(), kGradTol));
}

void criterion_freeze() {
  ExperimentConfig tiny;
  tiny.model.d_model = 16;
  tiny.model.n_heads = 2;
  tiny.model.n_enc_layers = 1;
  tiny.model.n_dec_layers = 1;
  tiny.model.d_ff = 32;
  tiny.model.max_len = 16;
  tiny.set("data.concepts", "40");
  tiny.data.parent_pairs = 300;
  tiny.data.child_pairs = 300;
  tiny.data.dev_pairs = 20;
  tiny.data.test_pairs = 20;
  tiny.data.max_len = 6;
  tiny.parent_train.max_steps = 100;
  tiny.parent_train.eval_every = 0;
  tiny.parent_train.batch_size = 8;
  tiny.child_train = tiny.parent_train;
  tiny.child_train.max_steps = kFreezeSteps;

  const Checkpoint parent = snapshot(train_parent(tiny, splits_for(tiny, "A", "B")).model);
  bool ok = true;
  std::size_t frozen_checked = 0;
  std::string bad;
  for (const auto& r : ten_settings()) {
    const auto task = child_task(tiny, r.side, r.side == Side::NewSource ? "R" : "D");
    const auto& fresh = r.side == Side::NewSource ? task.train.src_lang : task.train.tgt_lang;
    Model init = r.is_transfer() ? init_child(parent, r, fresh.vocab_size(), 5, fresh.id)
                                 : build_model(model_config(tiny, task.train.src_lang, task.train.tgt_lang), 5,
                                               task.train.src_lang.id, task.train.tgt_lang.id);
    const ParameterRegistry before = init.registry().clone();
    TrainConfig tc = tiny.child_train;
    tc.seed = 11;
    const TrainResult res = train(std::move(init), task.train, r, tc, nullptr);
    const TagSet trainable = regime_trainable_tags(r);
    for (const auto& e : res.model.registry().entries()) {
      const NamedParam* b = before.find(e.name);
      const bool same = b && e.tensor.bit_equal(b->tensor);
      if (trainable.contains(e.tag)) {
        if (same) {
          ok = false;
          bad += " " + r.str() + ":" + e.name + "(trainable unchanged)";
        }
      } else {
        ++frozen_checked;
        if (!same) {
          ok = false;
          bad += " " + r.str() + ":" + e.name;
        }
      }
    }
  }
  report(2, ok,
         fmt("10 settings x %zu steps, %zu frozen tensors bit-identical%s", kFreezeSteps, frozen_checked,
             bad.empty() ? "" : (", violations:" + bad).c_str()));
}

void criterion_scorer() {
  const std::vector<std::vector<int>> refs{{4, 5, 6, 7, 8}, {9, 10, 11}, {4, 4, 4, 4, 4, 4}};
  const double identical = bleu(refs, refs);
  const double worked = bleu({{4, 5, 6, 7}}, {{4, 5, 6, 7, 8}});
  const bool ok = std::abs(identical - 100.0) <= kBleuTol && std::abs(worked - kWorkedExample) <= kBleuTol;
  report(10, ok, fmt("identical %.12f, worked example %.14f (expected %.14f)", identical, worked, kWorkedExample));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::create_directories(out);
  fs::remove(out / "metrics.jsonl");
  const double t_start = now();
  auto timed = [&](const char* what, const std::function<void()>& fn) {
    const double t0 = now();
    fn();
    std::fprintf(stderr, "[%s: %.0fs]\n", what, now() - t0);
  };

  ExperimentConfig cfg;
  cfg.seed = 1;
  std::ofstream(out / "resolved.cfg") << cfg.text();
  MetricsLog log((out / "metrics.jsonl").string(), "acceptance");

  timed("gradients", criterion_gradients);
  timed("freeze", criterion_freeze);

  const TaskSuite tasks = make_tasks(cfg);
  Checkpoint parent;
  double parent_bleu = 0.0;
  timed("parent", [&] {
    TrainResult res = train_parent(cfg, tasks.parent);
    parent = snapshot(res.model);
    parent_bleu = corpus_bleu(parent.model, tasks.parent.test);
    save_checkpoint(parent.model, (out / "parent.xatn").string());
  });
  log.write("parent.test_bleu", parent_bleu);
  std::fprintf(stderr, "parent A->B test BLEU %.2f\n", parent_bleu);

  auto run_child = [&](const FineTuneRegime& r, const CorpusSplits& task, std::size_t replica, const Checkpoint& from,
                       const std::string& tag) {
    const double t0 = now();
    TrainResult res = finetune(cfg, from, r, task, replica);
    const double b = corpus_bleu(res.model, task.test);
    const std::string name = tag + ":" + r.str() + ":" + std::to_string(replica);
    log.write(name + ".test_bleu", b);
    for (const auto& m : res.metrics) {
      if (m.metric == "dev_bleu") log.write(name + ".dev_bleu", m.value, m.step);
    }
    std::fprintf(stderr, "  %-40s test BLEU %6.2f  best@%zu  (%.0fs)\n", name.c_str(), b, res.best_step, now() - t0);
    return std::pair{std::move(res.model), b};
  };

  // Regime ordering and random cross-attention on the structural child.
  {
    std::map<RegimeKind, std::vector<double>> bleus;
    timed("structural sweep", [&] {
      for (std::size_t rep = 0; rep < cfg.replicas; ++rep) {
        for (auto k : kAllRegimeKinds) {
          bleus[k].push_back(run_child({k, Side::NewSource}, tasks.structural, rep, parent, "structural").second);
        }
      }
    });
    const double only = median(bleus[RegimeKind::EmbOnly]);
    const double xattn = median(bleus[RegimeKind::EmbXattn]);
    const double body = median(bleus[RegimeKind::EmbBody]);
    const double rand = median(bleus[RegimeKind::EmbRandXattn]);
    const double scratch = median(bleus[RegimeKind::Scratch]);
    for (auto [k, v] : std::map<std::string, double>{
             {"only", only}, {"xattn", xattn}, {"body", body}, {"randxattn", rand}, {"scratch", scratch}}) {
      log.write("structural.median." + k, v);
    }
    const bool ok3 = body >= xattn && xattn >= body - kBodyXattnBand && xattn >= only + kXattnOverOnly &&
                     xattn > scratch;
    report(3, ok3,
           fmt("medians over %zu seeds: body %.2f, xattn %.2f, only %.2f, scratch %.2f", cfg.replicas, body, xattn,
               only, scratch));
    report(4, rand <= xattn - kRandBelowXattn, fmt("randxattn %.2f vs xattn %.2f", rand, xattn));
  }

  // Alignment, forgetting, composition and storage on the lexical and target children.
  Model lex_xattn, lex_body, tgt_xattn, tgt_body;
  timed("lexical and target children", [&] {
    lex_xattn = run_child({RegimeKind::EmbXattn, Side::NewSource}, tasks.lexical, 0, parent, "lexical").first;
    lex_body = run_child({RegimeKind::EmbBody, Side::NewSource}, tasks.lexical, 0, parent, "lexical").first;
    tgt_xattn = run_child({RegimeKind::EmbXattn, Side::NewTarget}, tasks.target, 0, parent, "target").first;
    tgt_body = run_child({RegimeKind::EmbBody, Side::NewTarget}, tasks.target, 0, parent, "target").first;
  });
  {
    const auto ax = child_lexicon_accuracy(cfg, lex_xattn, parent.model, Side::NewSource, tasks.lexical.train);
    const auto ab = child_lexicon_accuracy(cfg, lex_body, parent.model, Side::NewSource, tasks.lexical.train);
    log.write("lexical.lexicon.xattn", ax.accuracy);
    log.write("lexical.lexicon.body", ab.accuracy);
    report(5, ax.accuracy >= kLexiconFloor && ax.accuracy >= ab.accuracy + kLexiconGap,
           fmt("lexicon accuracy xattn %.3f, body %.3f over %zu types", ax.accuracy, ab.accuracy, ax.evaluated));
  }
  {
    const double rx = corpus_bleu(restore_parent_embeddings(snapshot(lex_xattn), parent, Side::NewSource),
                                  tasks.parent.test);
    const double rb =
        corpus_bleu(restore_parent_embeddings(snapshot(lex_body), parent, Side::NewSource), tasks.parent.test);
    log.write("restore.xattn", rx);
    log.write("restore.body", rb);
    report(6, rx >= rb + kRestoreGap && rx >= kRestoreRatio * parent_bleu,
           fmt("restored parent-task BLEU xattn %.2f, body %.2f, parent %.2f", rx, rb, parent_bleu));
  }
  {
    double composed = 0.0, composed_body = 0.0, supervised = 0.0;
    timed("zero-shot", [&] {
      composed = corpus_bleu(compose_zero_shot(snapshot(lex_xattn), snapshot(tgt_xattn)), tasks.zero_shot.test);
      CompositionOptions body_opts;
      body_opts.allow_non_xattn = true;
      composed_body =
          corpus_bleu(compose_zero_shot(snapshot(lex_body), snapshot(tgt_body), body_opts), tasks.zero_shot.test);
      supervised = run_child({RegimeKind::Scratch, Side::NewSource}, tasks.zero_shot, 0, parent, "zero_shot").second;
    });
    log.write("zero_shot.xattn", composed);
    log.write("zero_shot.body", composed_body);
    log.write("zero_shot.supervised", supervised);
    report(7, composed >= kZeroShotFloor && composed >= kZeroShotRatio * supervised && composed_body < composed,
           fmt("composed C->D xattn %.2f, body %.2f, supervised scratch %.2f", composed, composed_body, supervised));
  }
  {
    double from_translation = 0.0, from_denoise = 0.0;
    timed("denoise parent", [&] {
      const Checkpoint denoise = snapshot(train_denoise_parent(cfg, tasks).model);
      const FineTuneRegime only{RegimeKind::EmbOnly, Side::NewSource};
      from_translation = run_child(only, tasks.lexical, 0, parent, "lexical").second;
      from_denoise = run_child(only, tasks.lexical, 0, denoise, "lexical-from-denoise").second;
    });
    log.write("denoise.only.translation_parent", from_translation);
    log.write("denoise.only.denoise_parent", from_denoise);
    report(8, from_denoise <= from_translation - kDenoiseGap,
           fmt("EMB_ONLY on C->B from denoise parent %.2f, from translation parent %.2f", from_denoise,
               from_translation));
  }
  {
    const ModelConfig mc = model_config(cfg, cfg.langs.A, cfg.langs.B);
    const Model desk = build_model(mc, 3);
    bool exact = true, monotone = true;
    for (auto side : {Side::NewSource, Side::NewTarget}) {
      double prev = -1.0;
      for (auto k : {RegimeKind::EmbOnly, RegimeKind::EmbXattn, RegimeKind::EmbBody}) {
        const StorageReport rep = storage_report({k, side}, mc);
        monotone = monotone && rep.fraction > prev;
        prev = rep.fraction;
      }
    }
    for (const auto& r : ten_settings()) {
      const StorageReport rep = storage_report(r, mc);
      const ParamCount pc = count_params(desk, regime_trainable_tags(r));
      exact = exact && rep.updated_param_count == pc.count && rep.total_param_count == pc.total &&
              rep.fraction == pc.fraction;
    }
    bool roundtrip = true;
    std::size_t files = 0;
    for (const Model* child : {&lex_xattn, &lex_body, &tgt_xattn, &tgt_body}) {
      const fs::path p = out / ("child-" + std::to_string(files++) + ".xatd");
      save_delta(*child, parent, p.string());
      const Model back = load_delta(p.string(), parent);
      roundtrip = roundtrip && registries_bit_equal(*child, back) && payload_hash(*child) == payload_hash(back);
    }
    const StorageReport x = storage_report({RegimeKind::EmbXattn, Side::NewSource}, mc);
    report(9, exact && monotone && roundtrip,
           fmt("fractions match enumeration: %s, monotone: %s, %zu deltas reload bit-identically: %s (xattn %.4f)",
               exact ? "yes" : "no", monotone ? "yes" : "no", files, roundtrip ? "yes" : "no", x.fraction));
  }
  criterion_scorer();

  std::size_t passed = 0;
  for (const auto& o : outcomes) passed += o.pass;
  std::printf("%zu/%zu criteria passed in %.0fs\n", passed, outcomes.size(), now() - t_start);
  return passed == outcomes.size() ? 0 : 4;
}
