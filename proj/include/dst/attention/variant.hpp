#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "dst/numcore/errors.hpp"

namespace dst::attn {

enum class AttentionKind {
  Full,
  FixedWindow,
  DcnLike,
  Deformable,
  DeformableFixedSize,
  DeformableZeroOffset,
};

// Decision outputs held constant instead of predicted. A pinned size is
// size_fraction * L_valid; a pinned offset is zero.
struct DecisionPins {
  std::optional<double> size_fraction;
  bool zero_offset = false;

  bool all_pinned() const { return size_fraction.has_value() && zero_offset; }
};

/// Which attention mechanism a layer runs, plus its single tuning fraction:
/// window size for FixedWindow, sampling density for DcnLike, pinned window
/// half-size for DeformableFixedSize. Unused for the other kinds.
class AttentionVariant {
 public:
  static constexpr double kDefaultWindowFraction = 0.1;
  static constexpr double kDefaultPointFraction = 0.1;
  static constexpr double kDefaultSizeFraction = 0.05;

  static AttentionVariant full() { return AttentionVariant(AttentionKind::Full, 1.0); }
  static AttentionVariant fixed_window(double fraction = kDefaultWindowFraction) {
    return AttentionVariant(AttentionKind::FixedWindow, fraction);
  }
  static AttentionVariant dcn_like(double fraction = kDefaultPointFraction) {
    return AttentionVariant(AttentionKind::DcnLike, fraction);
  }
  static AttentionVariant deformable() { return AttentionVariant(AttentionKind::Deformable, 1.0); }
  static AttentionVariant deformable_fixed_size(double fraction = kDefaultSizeFraction) {
    return AttentionVariant(AttentionKind::DeformableFixedSize, fraction);
  }
  static AttentionVariant deformable_zero_offset() {
    return AttentionVariant(AttentionKind::DeformableZeroOffset, 1.0);
  }

  AttentionVariant() : AttentionVariant(AttentionKind::Full, 1.0) {}

  AttentionVariant(AttentionKind kind, double fraction) : kind_(kind), fraction_(fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
      throw ConfigError("attention fraction must lie in (0, 1], got " + std::to_string(fraction));
    }
  }

  AttentionKind kind() const { return kind_; }
  double fraction() const { return fraction_; }

  bool is_deformable() const {
    return kind_ == AttentionKind::Deformable || kind_ == AttentionKind::DeformableFixedSize ||
           kind_ == AttentionKind::DeformableZeroOffset;
  }

  DecisionPins pins() const {
    DecisionPins p;
    if (kind_ == AttentionKind::DeformableFixedSize) p.size_fraction = fraction_;
    if (kind_ == AttentionKind::DeformableZeroOffset) p.zero_offset = true;
    return p;
  }

  std::string name() const {
    switch (kind_) {
      case AttentionKind::Full: return "full";
      case AttentionKind::FixedWindow: return "window";
      case AttentionKind::DcnLike: return "dcn";
      case AttentionKind::Deformable: return "deformable";
      case AttentionKind::DeformableFixedSize: return "deformable-fixed-size";
      case AttentionKind::DeformableZeroOffset: return "deformable-zero-offset";
    }
    return "unknown";
  }

  friend bool operator==(const AttentionVariant&, const AttentionVariant&) = default;

 private:
  AttentionKind kind_;
  double fraction_;
};

inline AttentionKind parse_kind(std::string_view name) {
  if (name == "full") return AttentionKind::Full;
  if (name == "window") return AttentionKind::FixedWindow;
  if (name == "dcn") return AttentionKind::DcnLike;
  if (name == "deformable") return AttentionKind::Deformable;
  if (name == "deformable-fixed-size") return AttentionKind::DeformableFixedSize;
  if (name == "deformable-zero-offset") return AttentionKind::DeformableZeroOffset;
  throw ConfigError("unknown attention variant '" + std::string(name) +
                    "' (expected full, window, dcn, deformable, deformable-fixed-size, "
                    "deformable-zero-offset)");
}

// Variant by name with that kind's default fraction.
inline AttentionVariant parse_variant(std::string_view name) {
  switch (parse_kind(name)) {
    case AttentionKind::Full: return AttentionVariant::full();
    case AttentionKind::FixedWindow: return AttentionVariant::fixed_window();
    case AttentionKind::DcnLike: return AttentionVariant::dcn_like();
    case AttentionKind::Deformable: return AttentionVariant::deformable();
    case AttentionKind::DeformableFixedSize: return AttentionVariant::deformable_fixed_size();
    case AttentionKind::DeformableZeroOffset: return AttentionVariant::deformable_zero_offset();
  }
  return AttentionVariant::full();
}

}  // namespace dst::attn
