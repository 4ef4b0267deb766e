#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>

#include "spngd/errors.hpp"
#include "spngd/fisher.hpp"
#include "spngd/linalg.hpp"

namespace spngd {

// Flattened snapshot of a raw statistic with per-entry weights chosen so the
// weighted norm equals the Frobenius norm of the underlying matrix (packed
// off-diagonal entries count twice). Snapshots always hold the raw,
// pre-damping statistic, never the inverses.
struct Stat {
  Vector data;
  Vector w;  // squared-norm weight per entry (1 or 2)
};

inline Stat to_stat(const SymMatrix& m) {
  Stat s;
  s.data = m.data();
  s.w.resize(m.size());
  Index p = 0;
  for (Index i = 0; i < m.dim(); ++i)
    for (Index j = i; j < m.dim(); ++j) s.w[p++] = (i == j) ? 1.0 : 2.0;
  return s;
}

inline Stat to_stat(const UnitBnBlock& b) {
  const Index c = b.fgg.size();
  Stat s;
  s.data.resize(3 * c);
  s.w.resize(3 * c);
  for (Index ch = 0; ch < c; ++ch) {
    s.data[3 * ch + 0] = b.fgg[ch];
    s.data[3 * ch + 1] = b.fgb[ch];
    s.data[3 * ch + 2] = b.fbb[ch];
    s.w[3 * ch + 0] = 1.0;
    s.w[3 * ch + 1] = 2.0;
    s.w[3 * ch + 2] = 1.0;
  }
  return s;
}

inline double weighted_norm(const Stat& s) {
  return std::sqrt((s.w.array() * s.data.array().square()).sum());
}

// ||x - ref|| / ||ref|| < alpha, with a zero-norm reference similar only to
// an exactly equal snapshot. Strict inequality makes alpha == 0 degrade to
// "always dissimilar", i.e. refresh-every-step.
inline bool similar(const Stat& x, const Stat& ref, double alpha) {
  if (x.data.size() != ref.data.size())
    throw ShapeMismatch("similar: snapshot size mismatch");
  Stat diff{Vector(x.data - ref.data), ref.w};
  const double dn = weighted_norm(diff);
  const double rn = weighted_norm(ref);
  if (rn == 0.0) return dn == 0.0;
  return dn / rn < alpha;
}

enum class RefreshReason { FirstBuild, Dissimilar1, Dissimilar2, SimilarBoth };

struct RefreshDecision {
  bool refreshed = false;
  Index next_interval = 1;
  RefreshReason reason = RefreshReason::FirstBuild;
};

// The acceptable interval until the next refresh: shrink when the fresh
// statistic moved away from the last snapshot, hold when it only moved
// relative to the one before, grow Fibonacci-style when it matches both.
// Absent snapshots count as dissimilar (the conservative reading).
inline std::pair<Index, RefreshReason> next_interval(
    const Stat& x, const std::optional<Stat>& x1, const std::optional<Stat>& x2,
    Index delta1, Index delta2, double alpha) {
  if (!x1)
    return {std::max<Index>(1, delta1 / 2), RefreshReason::FirstBuild};
  if (!similar(x, *x1, alpha))
    return {std::max<Index>(1, delta1 / 2), RefreshReason::Dissimilar1};
  if (!x2 || !similar(x, *x2, alpha))
    return {delta1, RefreshReason::Dissimilar2};
  return {delta1 + delta2, RefreshReason::SimilarBoth};
}

// Per-statistic refresh schedule: refresh exactly at step t_X, then advance
// t_X by the freshly decided interval and rotate the retained snapshots.
class StaleTracker {
 public:
  StaleTracker() = default;
  StaleTracker(std::string id, double alpha)
      : id_(std::move(id)), alpha_(alpha) {}

  bool should_refresh(Index step) const { return step == t_x_; }

  RefreshDecision on_refresh(const Stat& x, Index step) {
    if (step != t_x_)
      throw RefreshOutOfTurn("statistic " + id_ + ": refresh at step " +
                             std::to_string(step) + " but scheduled for " +
                             std::to_string(t_x_));
    const auto [nd, reason] =
        next_interval(x, x1_, x2_, delta_, delta_prev_, alpha_);
    x2_ = std::move(x1_);
    x1_ = x;
    delta_prev_ = delta_;
    delta_ = nd;
    t_x_ = step + nd;
    ++refresh_count_;
    return {true, nd, reason};
  }

  const std::string& id() const { return id_; }
  double alpha() const { return alpha_; }
  Index t_x() const { return t_x_; }
  Index delta() const { return delta_; }
  Index delta_prev() const { return delta_prev_; }
  Index refresh_count() const { return refresh_count_; }
  bool ever_built() const { return refresh_count_ > 0; }

 private:
  std::string id_;
  double alpha_ = 0.1;
  Index t_x_ = 1;
  Index delta_ = 1;
  Index delta_prev_ = 1;
  Index refresh_count_ = 0;
  std::optional<Stat> x1_, x2_;
};

}  // namespace spngd
