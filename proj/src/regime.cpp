#include "xattn/regime.hpp"

#include "xattn/error.hpp"

namespace xattn {

const char* regime_kind_name(RegimeKind kind) {
  switch (kind) {
    case RegimeKind::Scratch: return "SCRATCH";
    case RegimeKind::EmbOnly: return "EMB_ONLY";
    case RegimeKind::EmbBody: return "EMB_BODY";
    case RegimeKind::EmbXattn: return "EMB_XATTN";
    case RegimeKind::EmbRandXattn: return "EMB_RANDXATTN";
  }
  return "?";
}

RegimeKind regime_kind_from_name(const std::string& name) {
  for (auto k : kAllRegimeKinds) {
    if (name == regime_kind_name(k)) return k;
  }
  throw ConfigError("unknown regime '" + name + "'");
}

const char* side_name(Side side) { return side == Side::NewSource ? "NEW_SOURCE" : "NEW_TARGET"; }

Side side_from_name(const std::string& name) {
  if (name == "NEW_SOURCE" || name == "source") return Side::NewSource;
  if (name == "NEW_TARGET" || name == "target") return Side::NewTarget;
  throw ConfigError("unknown side '" + name + "'");
}

std::string FineTuneRegime::str() const {
  if (kind == RegimeKind::Scratch) return "SCRATCH";
  return std::string(regime_kind_name(kind)) + ":" + side_name(side);
}

FineTuneRegime FineTuneRegime::parse(const std::string& text) {
  const auto colon = text.find(':');
  FineTuneRegime r;
  r.kind = regime_kind_from_name(text.substr(0, colon));
  if (colon != std::string::npos) r.side = side_from_name(text.substr(colon + 1));
  return r;
}

TagSet regime_trainable_tags(const FineTuneRegime& regime) {
  const GroupTag fresh = new_side_tag(regime.side);
  switch (regime.kind) {
    case RegimeKind::Scratch: return TagSet::all();
    case RegimeKind::EmbOnly: return {fresh};
    case RegimeKind::EmbBody: return {fresh, GroupTag::Enc, GroupTag::Dec, GroupTag::Xattn};
    case RegimeKind::EmbXattn:
    case RegimeKind::EmbRandXattn: return {fresh, GroupTag::Xattn};
  }
  return {};
}

}  // namespace xattn
