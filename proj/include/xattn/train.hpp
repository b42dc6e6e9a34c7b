#pragma once

// Regime-aware training with hard freezing: only tensors of trainable
// groups enter the autodiff graph and receive Adam state.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xattn/ckpt.hpp"
#include "xattn/model.hpp"
#include "xattn/regime.hpp"
#include "xattn/tasks.hpp"

namespace xattn {

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  std::size_t warmup_steps = 100;
  std::size_t max_steps = 1000;
  std::size_t batch_size = 16;
  double label_smoothing = 0.1;
  double clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: no periodic dev evaluation
  bool keep_best_dev = true;   // return the best-dev-BLEU snapshot when evaluating

  void validate() const;
};

/// lr * min(1, step / warmup_steps); step counts from 1.
double warmup_lr(const TrainConfig& tc, std::size_t step);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update of `params` from their gradient buffers,
/// after global-norm clipping. Returns the pre-clip global norm.
double adam_step(std::vector<Tensor>& params, AdamState& state, const TrainConfig& tc, std::size_t step);

/// Global L2 norm of the gradients of `params` (absent grads count as zero).
double global_grad_norm(const std::vector<Tensor>& params);

/// Child of `parent` for a transfer regime: everything copied except the
/// new-side embedding group (and, for EMB_RANDXATTN, the cross-attention
/// group), which is drawn fresh from `seed`.
Model init_child(const Checkpoint& parent, const FineTuneRegime& regime, std::size_t new_vocab_size,
                 std::uint64_t seed, const std::string& new_vocab_id);

/// Mean token cross-entropy of a batch of (source, raw target) pairs.
Tensor batch_loss(const Model& model, const std::vector<std::vector<int>>& sources,
                  const std::vector<std::vector<int>>& targets, double label_smoothing,
                  const ForwardOptions& options = {});

struct MetricPoint {
  std::size_t step = 0;
  std::string metric;
  double value = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<MetricPoint> metrics;
  std::size_t best_step = 0;
  double best_dev_bleu = -1.0;
  double final_loss = 0.0;
};

/// Test-set style BLEU of greedy decodes.
double corpus_bleu(const Model& model, const ParallelCorpus& corpus, std::size_t max_extra_steps = 4);

/// Trains the tensors whose tags the regime makes trainable. Checks the
/// corpus vocabularies against the model's.
TrainResult train(Model model, const ParallelCorpus& corpus, const FineTuneRegime& regime, const TrainConfig& tc,
                  const ParallelCorpus* dev = nullptr);

/// Reconstructs monolingual sentences from span-noised copies. The model
/// must share one vocabulary across both sides.
TrainResult denoise_pretrain(Model model, const std::vector<std::vector<int>>& sentences,
                             const std::string& vocab_id, const NoiseConfig& noise, const TrainConfig& tc);

}  // namespace xattn
