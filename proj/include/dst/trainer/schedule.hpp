#pragma once

#include <cmath>
#include <numbers>

#include "dst/numcore/errors.hpp"

namespace dst::train {

// Cosine annealing with warm restarts; cycle i lasts t0 * t_mult^i epochs.
struct Schedule {
  double t0 = 10.0;
  double t_mult = 2.0;
  double min_lr = 0.0;
};

inline double cosine_lr(double t_cur, double t_i, double max_lr, double min_lr) {
  return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t_cur / t_i));
}

/// Learning rate at (possibly fractional) epoch t.
inline double lr_at(double t, const Schedule& s, double max_lr) {
  if (!(t >= 0.0)) throw ContractError("lr_at: epoch must be >= 0");
  if (!(s.t0 > 0.0) || !(s.t_mult >= 1.0)) throw ConfigError("schedule: need t0 > 0 and t_mult >= 1");
  double t_cur = t, t_i = s.t0;
  if (s.t_mult == 1.0) {
    t_cur = std::fmod(t, s.t0);
  } else {
    while (t_cur >= t_i) {
      t_cur -= t_i;
      t_i *= s.t_mult;
    }
  }
  return cosine_lr(t_cur, t_i, max_lr, s.min_lr);
}

}  // namespace dst::train
