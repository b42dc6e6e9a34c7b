#pragma once

// Flat key=value experiment configuration and the shared pipeline steps
// used by the command-line driver and the acceptance suite.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "xattn/ckpt.hpp"
#include "xattn/lexicon.hpp"
#include "xattn/tasks.hpp"
#include "xattn/train.hpp"

namespace xattn {

struct DataConfig {
  std::size_t concepts = 600;
  std::size_t parent_pairs = 8000;
  std::size_t child_pairs = 1500;
  std::size_t dev_pairs = 200;
  std::size_t test_pairs = 200;
  std::size_t mono_sentences = 8000;
  std::size_t min_len = 3;
  std::size_t max_len = 12;
  double zipf = 1.2;
};

/// Language roles:
///   A -> B   parent pair
///   C        new source language that differs from A in its lexicon only
///   R        new source language that also changes word order relative to A
///   D        new target language that differs from B in its lexicon only
struct LanguageSet {
  SyntheticLanguageSpec A, B, C, R, D;
  const SyntheticLanguageSpec& by_id(const std::string& id) const;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  ModelConfig model;  // vocab sizes are filled in per task
  DataConfig data;
  LanguageSet langs;
  TrainConfig parent_train;
  TrainConfig child_train;
  TrainConfig denoise_train;
  NoiseConfig noise;
  std::size_t replicas = 3;         // seeds per regime in the quality comparison
  std::size_t lexicon_min_count = 1;  // evaluated types must occur this often in child training data
  std::string finetune_regime = "all";
  std::string finetune_side = "source";
  std::string finetune_child = "R";  // source-side child language for `finetune`
  bool allow_non_xattn = false;

  ExperimentConfig();

  /// Applies one key; throws ConfigError naming an unknown key or bad value.
  void set(const std::string& key, const std::string& value);
  /// Parses "key=value" lines ('#' starts a comment).
  void load(std::istream& is);
  void load_file(const std::string& path);
  /// Every key with its resolved value, sorted, one per line.
  std::string text() const;
  std::map<std::string, std::string> values() const;
};

/// Stream seed for a named component, derived from the experiment seed.
std::uint64_t component_seed(const ExperimentConfig& cfg, const std::string& component);

struct TaskSuite {
  CorpusSplits parent;      // A -> B
  CorpusSplits lexical;     // C -> B
  CorpusSplits structural;  // R -> B
  CorpusSplits target;      // A -> D
  CorpusSplits zero_shot;   // C -> D
  std::vector<std::vector<int>> mono;  // B sentences for denoising
};

TaskSuite make_tasks(const ExperimentConfig& cfg);
/// Parallel splits for an arbitrary ordered pair of configured languages.
CorpusSplits make_pair(const ExperimentConfig& cfg, const std::string& src, const std::string& tgt,
                       std::size_t n_train);

/// Splits of the pair a model translates; the parent pair uses parent_pairs
/// training sentences, every other pair child_pairs.
CorpusSplits splits_for(const ExperimentConfig& cfg, const std::string& src, const std::string& tgt);

/// Language whose child pair fine-tuning uses for a side: `child` -> B for
/// new sources, A -> `child` for new targets.
CorpusSplits child_task(const ExperimentConfig& cfg, Side side, const std::string& child);

ModelConfig model_config(const ExperimentConfig& cfg, const SyntheticLanguageSpec& src,
                         const SyntheticLanguageSpec& tgt);

TrainResult train_parent(const ExperimentConfig& cfg, const CorpusSplits& data);
TrainResult train_denoise_parent(const ExperimentConfig& cfg, const TaskSuite& tasks);

/// Child (or SCRATCH model) for one regime trained with child_train;
/// `replica` selects the seed stream.
TrainResult finetune(const ExperimentConfig& cfg, const Checkpoint& parent, const FineTuneRegime& regime,
                     const CorpusSplits& data, std::size_t replica = 0);

/// Token ids occurring at least `min_count` times on one side of a corpus.
std::set<int> frequent_types(const ParallelCorpus& corpus, GroupTag side, std::size_t min_count);

/// Lexicon accuracy of a child's new-side embeddings against the parent's.
LexiconScore child_lexicon_accuracy(const ExperimentConfig& cfg, const Model& child, const Model& parent,
                                    Side side, const ParallelCorpus& child_train);

// ---------------------------------------------------------------------------

/// Line-delimited metric records {run_id, step?, metric, value}.
class MetricsLog {
 public:
  MetricsLog(std::string path, std::string run_id);
  void write(const std::string& metric, double value, std::optional<std::size_t> step = std::nullopt);
  void write_series(const std::vector<MetricPoint>& points, const std::string& prefix = "");
  const std::string& run_id() const { return run_id_; }

 private:
  std::string path_;
  std::string run_id_;
};

}  // namespace xattn
