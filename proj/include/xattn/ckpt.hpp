#pragma once

// Binary checkpoints with a canonical text manifest, delta files that store
// only trainable groups, storage accounting, and the embedding-swap
// compositions (restore parent embeddings, zero-shot transplant).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xattn/model.hpp"
#include "xattn/regime.hpp"

namespace xattn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A loaded or freshly snapshotted model together with its payload hash.
struct Checkpoint {
  Model model;
  std::uint64_t content_hash = 0;

  /// The lineage a child of this checkpoint records: the payload hash.
  std::uint64_t lineage_hash() const { return content_hash; }
  bool is_child() const { return model.parent_lineage_hash.has_value(); }
  /// Regime recorded in the manifest; empty for composed models.
  std::optional<FineTuneRegime> regime() const;
};

/// FNV-1a over the little-endian f64 payload in registry order.
std::uint64_t payload_hash(const Model& model);
Checkpoint snapshot(const Model& model);

std::vector<std::uint8_t> encode_checkpoint(const Model& model);
/// Throws FormatError (with byte offset) on any malformed input.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Model& model, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Delta form of a child: manifest plus the groups its regime trains. The
/// remaining groups must be bit-identical to the parent's (checked).
std::vector<std::uint8_t> encode_delta(const Model& child, const Checkpoint& parent);
Model decode_delta(const std::vector<std::uint8_t>& bytes, const Checkpoint& parent);
void save_delta(const Model& child, const Checkpoint& parent, const std::string& path);
Model load_delta(const std::string& path, const Checkpoint& parent);

std::string hash_hex(std::uint64_t h);

// ---------------------------------------------------------------------------

struct StorageReport {
  FineTuneRegime regime;
  std::size_t updated_param_count = 0;
  std::size_t total_param_count = 0;
  double fraction = 0.0;
  std::size_t bytes_if_stored_delta = 0;  // payload bytes of the updated groups
};

StorageReport storage_report(const FineTuneRegime& regime, const ModelConfig& config);

// ---------------------------------------------------------------------------

/// Child model with its transferred-side embedding group replaced by the
/// parent's, so it translates the parent pair again.
Model restore_parent_embeddings(const Checkpoint& child, const Checkpoint& parent, Side side);

struct CompositionOptions {
  bool allow_non_xattn = false;  // compose children whose embeddings were trained with the body
  bool require_sides = true;     // source child must be NEW_SOURCE, target child NEW_TARGET
};

/// target_child with its SRC group taken from source_child.
Model compose_zero_shot(const Checkpoint& source_child, const Checkpoint& target_child,
                        const CompositionOptions& options = {});

}  // namespace xattn
