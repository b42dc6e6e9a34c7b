#pragma once

#include <string>

#include "xattn/model.hpp"

namespace xattn {

enum class RegimeKind { Scratch, EmbOnly, EmbBody, EmbXattn, EmbRandXattn };
enum class Side { NewSource, NewTarget };

const char* regime_kind_name(RegimeKind kind);
RegimeKind regime_kind_from_name(const std::string& name);
const char* side_name(Side side);
Side side_from_name(const std::string& name);  // also accepts "source"/"target"

struct FineTuneRegime {
  RegimeKind kind = RegimeKind::Scratch;
  Side side = Side::NewSource;

  /// "SCRATCH" or e.g. "EMB_XATTN:NEW_SOURCE".
  std::string str() const;
  static FineTuneRegime parse(const std::string& text);
  bool is_transfer() const { return kind != RegimeKind::Scratch; }

  friend bool operator==(const FineTuneRegime&, const FineTuneRegime&) = default;
};

/// Embedding group of the language that changes under this side.
inline GroupTag new_side_tag(Side side) { return side == Side::NewSource ? GroupTag::Src : GroupTag::Tgt; }
inline GroupTag shared_side_tag(Side side) { return side == Side::NewSource ? GroupTag::Tgt : GroupTag::Src; }

TagSet regime_trainable_tags(const FineTuneRegime& regime);

/// The five regimes of one side, in nesting order.
inline constexpr RegimeKind kAllRegimeKinds[] = {RegimeKind::EmbOnly, RegimeKind::EmbXattn,
                                                 RegimeKind::EmbRandXattn, RegimeKind::EmbBody,
                                                 RegimeKind::Scratch};

}  // namespace xattn
