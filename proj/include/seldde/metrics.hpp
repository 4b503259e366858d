#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seldde/accddoa_codec.hpp"
#include "seldde/error.hpp"
#include "seldde/io_dataset.hpp"

namespace seldde {

/// Great-circle angle between two directions, degrees in [0, 180].
inline double angular_error(double az1, double el1, double az2, double el2) {
  const auto a = doa_to_unit(az1, el1);
  const auto b = doa_to_unit(az2, el2);
  const double dot = std::clamp(a[0] * b[0] + a[1] * b[1] + a[2] * b[2], -1.0, 1.0);
  return std::acos(dot) * kRadToDeg;
}

inline double angular_error(const Event& a, const Event& b) {
  return angular_error(a.azimuth_deg, a.elevation_deg, b.azimuth_deg, b.elevation_deg);
}

/// Minimum-cost assignment for a rows x cols cost matrix (rows <= cols
/// not required). Returns, per row, the assigned column or -1.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size();
  if (rows == 0) return {};
  const std::size_t cols = cost[0].size();
  const bool transposed = rows > cols;
  const std::size_t n = transposed ? cols : rows, m = transposed ? rows : cols;
  auto c = [&](std::size_t i, std::size_t j) { return transposed ? cost[j][i] : cost[i][j]; };

  // Potentials formulation, 1-based with a virtual column 0.
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> assign(rows, -1);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    if (transposed)
      assign[j - 1] = static_cast<int>(p[j] - 1);
    else
      assign[p[j] - 1] = static_cast<int>(j - 1);
  }
  return assign;
}

struct MatchedPair {
  std::size_t pred = 0;  // index into preds.events
  std::size_t ref = 0;   // index into refs.events
  double angle_deg = 0.0;
};

struct Matching {
  std::vector<MatchedPair> pairs;
  std::vector<std::size_t> unmatched_preds;  // false positives
  std::vector<std::size_t> unmatched_refs;   // false negatives
};

/// Per (frame, class), pairs predictions and references minimizing the total
/// angular error.
inline Matching match_events(const EventList& preds, const EventList& refs) {
  std::map<std::pair<int, int>, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < preds.events.size(); ++i)
    groups[{preds.events[i].frame, preds.events[i].class_idx}].first.push_back(i);
  for (std::size_t i = 0; i < refs.events.size(); ++i)
    groups[{refs.events[i].frame, refs.events[i].class_idx}].second.push_back(i);

  Matching m;
  for (const auto& [key, g] : groups) {
    const auto& [pi, ri] = g;
    if (pi.empty() || ri.empty()) {
      m.unmatched_preds.insert(m.unmatched_preds.end(), pi.begin(), pi.end());
      m.unmatched_refs.insert(m.unmatched_refs.end(), ri.begin(), ri.end());
      continue;
    }
    std::vector<std::vector<double>> cost(pi.size(), std::vector<double>(ri.size()));
    for (std::size_t a = 0; a < pi.size(); ++a)
      for (std::size_t b = 0; b < ri.size(); ++b)
        cost[a][b] = angular_error(preds.events[pi[a]], refs.events[ri[b]]);
    const auto assign = hungarian(cost);
    std::vector<bool> ref_used(ri.size(), false);
    for (std::size_t a = 0; a < pi.size(); ++a) {
      if (assign[a] < 0) {
        m.unmatched_preds.push_back(pi[a]);
        continue;
      }
      const auto b = static_cast<std::size_t>(assign[a]);
      ref_used[b] = true;
      m.pairs.push_back({pi[a], ri[b], cost[a][b]});
    }
    for (std::size_t b = 0; b < ri.size(); ++b)
      if (!ref_used[b]) m.unmatched_refs.push_back(ri[b]);
  }
  return m;
}

struct ClassMetrics {
  int class_idx = 0;
  std::size_t true_positives = 0, num_preds = 0, num_refs = 0, num_matches = 0;
  double f1 = 0.0, le_deg = 180.0, rde = 1.0;
};

struct SelddeMetrics {
  double f20 = 0.0;
  double le_cd_deg = 180.0;
  double rde_cd = 1.0;
  double seldde_error = 1.0;
  std::vector<ClassMetrics> per_class;
};

/// Aggregated error: ((1 - F) + LE / 180 + RDE) / 3.
inline double seldde_error(double f20, double le_cd_deg, double rde_cd) {
  return ((1.0 - f20) + le_cd_deg / 180.0 + rde_cd) / 3.0;
}

struct MetricOptions {
  double ang_thresh_deg = 20.0;
  /// Relative distance threshold for a true positive; infinity disables it.
  double rde_thresh = 1.0;
};

/// Location-dependent F1 and class-dependent LE / RDE, macro-averaged over
/// classes that occur in either list. A present class without any matched
/// pair contributes LE 180 and RDE 1. With no events at all the result is
/// the perfect score.
inline SelddeMetrics compute_metrics(const EventList& preds, const EventList& refs, int num_classes,
                                     const MetricOptions& opt = {}) {
  for (const Event& e : refs.events)
    if (!(e.distance_m > 0)) throw ValidationError("reference distances must be positive");
  std::vector<ClassMetrics> cls(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) cls[static_cast<std::size_t>(c)].class_idx = c;
  auto slot = [&](int c) -> ClassMetrics& {
    if (c < 0 || c >= num_classes) throw ValidationError("class index " + std::to_string(c) + " outside [0, C)");
    return cls[static_cast<std::size_t>(c)];
  };
  for (const Event& e : preds.events) ++slot(e.class_idx).num_preds;
  for (const Event& e : refs.events) ++slot(e.class_idx).num_refs;

  std::vector<double> sum_ang(cls.size(), 0.0), sum_rde(cls.size(), 0.0);
  const Matching m = match_events(preds, refs);
  for (const MatchedPair& p : m.pairs) {
    const Event& pe = preds.events[p.pred];
    const Event& re = refs.events[p.ref];
    const double rde = std::abs(pe.distance_m - re.distance_m) / re.distance_m;
    ClassMetrics& c = slot(re.class_idx);
    ++c.num_matches;
    sum_ang[static_cast<std::size_t>(re.class_idx)] += p.angle_deg;
    sum_rde[static_cast<std::size_t>(re.class_idx)] += rde;
    if (p.angle_deg <= opt.ang_thresh_deg && rde <= opt.rde_thresh) ++c.true_positives;
  }

  SelddeMetrics out;
  double f_sum = 0, le_sum = 0, rde_sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < cls.size(); ++c) {
    ClassMetrics& k = cls[c];
    if (k.num_preds == 0 && k.num_refs == 0) continue;
    ++present;
    k.f1 = 2.0 * static_cast<double>(k.true_positives) / static_cast<double>(k.num_preds + k.num_refs);
    if (k.num_matches > 0) {
      k.le_deg = sum_ang[c] / static_cast<double>(k.num_matches);
      k.rde = sum_rde[c] / static_cast<double>(k.num_matches);
    }
    f_sum += k.f1;
    le_sum += k.le_deg;
    rde_sum += k.rde;
    out.per_class.push_back(k);
  }
  if (present == 0) {
    out.f20 = 1.0;
    out.le_cd_deg = 0.0;
    out.rde_cd = 0.0;
  } else {
    const double n = static_cast<double>(present);
    out.f20 = f_sum / n;
    out.le_cd_deg = le_sum / n;
    out.rde_cd = rde_sum / n;
  }
  out.seldde_error = seldde_error(out.f20, out.le_cd_deg, out.rde_cd);
  return out;
}

inline nlohmann::json metrics_to_json(const SelddeMetrics& m) {
  nlohmann::json per = nlohmann::json::object();
  for (const ClassMetrics& c : m.per_class)
    per[std::to_string(c.class_idx)] = {{"f1", c.f1},
                                        {"le_deg", c.le_deg},
                                        {"rde", c.rde},
                                        {"true_positives", c.true_positives},
                                        {"num_preds", c.num_preds},
                                        {"num_refs", c.num_refs},
                                        {"num_matches", c.num_matches}};
  return {{"f20", m.f20}, {"le_cd_deg", m.le_cd_deg}, {"rde_cd", m.rde_cd},
          {"seldde_error", m.seldde_error}, {"per_class", per}};
}

inline void write_metrics_json(const std::string& path, const SelddeMetrics& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path);
  out << metrics_to_json(m).dump(2) << '\n';
}

}  // namespace seldde
