#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <vector>

#include "seldde/accddoa_codec.hpp"
#include "seldde/error.hpp"
#include "seldde/tensor.hpp"

namespace seldde {

/// One target arrangement over the three output tracks.
template <class T>
using TrackAssignment = std::array<std::array<T, kTargetComponents>, kNumTracks>;

/// Candidate arrangements for one (frame, class).
template <class T>
using AdpitCandidateSet = std::vector<TrackAssignment<T>>;

/// ADPIT candidates for the active event rows of one (frame, class).
///
/// Every track must carry some active event, so the candidates are the
/// surjective maps from the 3 tracks onto the A events, enumerated in
/// lexicographic order of the event-index triple: 1 for A <= 1, 6 for A = 2
/// (both duplication patterns in all arrangements), 6 for A = 3.
template <class T>
AdpitCandidateSet<T> build_adpit_candidates(const std::vector<std::array<T, kTargetComponents>>& rows) {
  const std::size_t A = rows.size();
  if (A > kNumTracks) throw ValidationError("ADPIT supports at most 3 active events per class");
  AdpitCandidateSet<T> out;
  if (A == 0) {
    out.push_back({});
    return out;
  }
  for (std::size_t i = 0; i < A; ++i)
    for (std::size_t j = 0; j < A; ++j)
      for (std::size_t k = 0; k < A; ++k) {
        std::array<bool, kNumTracks> used{};
        used[i] = used[j] = used[k] = true;
        bool onto = true;
        for (std::size_t a = 0; a < A; ++a) onto = onto && used[a];
        if (!onto) continue;
        out.push_back({rows[i], rows[j], rows[k]});
      }
  return out;
}

template <class T>
AdpitCandidateSet<T> build_adpit_candidates(const std::vector<Event>& events, const DistanceScaler& scaler) {
  std::vector<std::array<T, kTargetComponents>> rows;
  for (const Event& e : events) {
    const auto v = encode_event(e, scaler);
    rows.push_back({static_cast<T>(v[0]), static_cast<T>(v[1]), static_cast<T>(v[2]), static_cast<T>(v[3])});
  }
  return build_adpit_candidates(rows);
}

/// Candidate sets for every (frame, class) of a segment.
template <class T>
struct AdpitTargets {
  std::size_t frames = 0;
  std::size_t classes = 0;
  std::vector<AdpitCandidateSet<T>> sets;  // index frame * classes + class

  const AdpitCandidateSet<T>& at(std::size_t f, std::size_t c) const { return sets[f * classes + c]; }
};

template <class T>
AdpitTargets<T> adpit_targets_from_events(const EventList& events, const DistanceScaler& scaler,
                                          std::size_t classes, std::size_t frames = kLabelFramesPerSegment) {
  AdpitTargets<T> t{frames, classes, {}};
  std::vector<std::vector<Event>> grouped(frames * classes);
  for (const auto& [key, group] : group_events(events)) {
    const auto [f, c] = key;
    if (f < 0 || static_cast<std::size_t>(f) >= frames || c < 0 || static_cast<std::size_t>(c) >= classes)
      throw ValidationError("event outside the target grid");
    grouped[static_cast<std::size_t>(f) * classes + static_cast<std::size_t>(c)] = group;
  }
  t.sets.reserve(grouped.size());
  for (const auto& g : grouped) t.sets.push_back(build_adpit_candidates<T>(g, scaler));
  return t;
}

/// Candidate sets from a multi-ACCDDOA tensor; every non-zero track row is an
/// active event. For tensors made by encode_labels this matches
/// adpit_targets_from_events; for mixed-up targets it uses the blended rows.
template <class T, class U>
AdpitTargets<T> adpit_targets_from_tensor(const Tensor<U>& target) {
  if (target.rank() != 4 || target.dim(1) != kNumTracks || target.dim(3) != kTargetComponents)
    throw PreconditionError("target must be [frames, 3, C, 4]");
  const std::size_t frames = target.dim(0), classes = target.dim(2);
  AdpitTargets<T> t{frames, classes, {}};
  t.sets.reserve(frames * classes);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<std::array<T, kTargetComponents>> rows;
      for (std::size_t k = 0; k < kNumTracks; ++k) {
        std::array<T, kTargetComponents> r;
        bool nonzero = false;
        for (std::size_t i = 0; i < kTargetComponents; ++i) {
          r[i] = static_cast<T>(target(f, k, c, i));
          nonzero = nonzero || r[i] != T{0};
        }
        if (nonzero) rows.push_back(r);
      }
      t.sets.push_back(build_adpit_candidates(rows));
    }
  return t;
}

/// Mean squared error of one (frame, class) block against one arrangement.
/// Track sums are added in sorted order, so relabeling tracks is bit-exact.
template <class T>
T block_mse(const Tensor<T>& pred, std::size_t f, std::size_t c, const TrackAssignment<T>& cand) {
  std::array<T, kNumTracks> per{};
  for (std::size_t k = 0; k < kNumTracks; ++k)
    for (std::size_t i = 0; i < kTargetComponents; ++i) {
      const T d = pred(f, k, c, i) - cand[k][i];
      per[k] += d * d;
    }
  std::sort(per.begin(), per.end());
  T acc{0};
  for (T v : per) acc += v;
  return acc / static_cast<T>(kNumTracks * kTargetComponents);
}

/// ADPIT-MSE: per (frame, class) the minimum block MSE over candidates
/// (first minimum on ties), averaged over frames and classes. When `grad` is
/// given it receives d(loss)/d(pred).
template <class T>
T adpit_mse(const Tensor<T>& pred, const AdpitTargets<T>& targets, Tensor<T>* grad = nullptr) {
  if (pred.rank() != 4 || pred.dim(0) != targets.frames || pred.dim(1) != kNumTracks ||
      pred.dim(2) != targets.classes || pred.dim(3) != kTargetComponents)
    throw PreconditionError("prediction shape " + shape_string(pred.shape()) + " does not match targets");
  if (grad) *grad = Tensor<T>(pred.shape());
  const T norm = static_cast<T>(targets.frames * targets.classes);
  T total{0};
  for (std::size_t f = 0; f < targets.frames; ++f)
    for (std::size_t c = 0; c < targets.classes; ++c) {
      const auto& cands = targets.at(f, c);
      std::size_t best = 0;
      T best_loss = std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < cands.size(); ++i) {
        const T l = block_mse(pred, f, c, cands[i]);
        if (l < best_loss) {
          best_loss = l;
          best = i;
        }
      }
      total += best_loss;
      if (grad) {
        const T scale = T{2} / (static_cast<T>(kNumTracks * kTargetComponents) * norm);
        for (std::size_t k = 0; k < kNumTracks; ++k)
          for (std::size_t i = 0; i < kTargetComponents; ++i)
            (*grad)(f, k, c, i) = scale * (pred(f, k, c, i) - cands[best][k][i]);
      }
    }
  return total / norm;
}

}  // namespace seldde
