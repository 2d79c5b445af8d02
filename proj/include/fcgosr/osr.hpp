#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

// Prototype-based open-set classifier. Each known class k keeps its
// representation centroid mu_k plus the mean m_k and population standard
// deviation s_k of the training distances |z_i - mu_k|. A sample's score is
// min_k | D(mu_k, z) - m_k | / s_k; it is rejected as unknown above the
// threshold (3 under the Empirical Rule).

namespace fcgosr {

inline constexpr int kUnknownLabel = -1;

/// One learned representation with its class label (kUnknownLabel for
/// samples of classes never seen in training).
struct Representation {
  std::vector<double> z;
  int label = kUnknownLabel;
  std::string id;

  friend bool operator==(const Representation&, const Representation&) = default;
};

using RepresentationSet = std::vector<Representation>;

struct ClassStats {
  int class_id = 0;
  std::vector<double> prototype;
  double mean_distance = 0.0;  // m_k
  double std_distance = 0.0;   // s_k, floored at epsilon
  std::size_t count = 0;       // N_k
};

enum class ThresholdMode { statistical, manual };

struct Threshold {
  ThresholdMode mode = ThresholdMode::statistical;
  double value = 3.0;
};

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw Error("dimension mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

class OsrModel {
 public:
  static constexpr double kDefaultEpsilon = 1e-8;

  OsrModel() = default;
  OsrModel(std::vector<ClassStats> stats, Threshold threshold, double epsilon = kDefaultEpsilon)
      : stats_(std::move(stats)), threshold_(threshold), epsilon_(epsilon) {
    if (stats_.empty()) throw Error("open-set model needs at least one known class");
    if (!(std::isfinite(threshold_.value) && threshold_.value > 0.0))
      throw Error("threshold must be finite and positive");
    std::sort(stats_.begin(), stats_.end(), [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
    for (const auto& s : stats_)
      if (s.prototype.size() != stats_.front().prototype.size()) throw Error("prototypes differ in dimension");
  }

  const std::vector<ClassStats>& stats() const { return stats_; }
  const Threshold& threshold() const { return threshold_; }
  double epsilon() const { return epsilon_; }
  std::size_t dimension() const { return stats_.empty() ? 0 : stats_.front().prototype.size(); }

  OsrModel with_threshold(Threshold t) const { return OsrModel(stats_, t, epsilon_); }

  /// |D(mu_k, z) - m_k| / s_k for every class, in class-id order.
  std::vector<double> deviations(std::span<const double> z) const {
    if (z.size() != dimension())
      throw Error("representation has dimension " + std::to_string(z.size()) + ", model expects " +
                  std::to_string(dimension()));
    std::vector<double> out;
    out.reserve(stats_.size());
    for (const auto& s : stats_) out.push_back(std::abs(euclidean(s.prototype, z) - s.mean_distance) / s.std_distance);
    return out;
  }

  double outlier_score(std::span<const double> z) const {
    const auto dev = deviations(z);
    return *std::min_element(dev.begin(), dev.end());
  }

  /// Known class id, or kUnknownLabel when the score exceeds the threshold.
  int classify(std::span<const double> z) const {
    const auto dev = deviations(z);
    const auto best = std::min_element(dev.begin(), dev.end());  // first minimum = smallest class id
    if (*best > threshold_.value) return kUnknownLabel;
    return stats_[static_cast<std::size_t>(best - dev.begin())].class_id;
  }

 private:
  std::vector<ClassStats> stats_;
  Threshold threshold_;
  double epsilon_ = kDefaultEpsilon;
};

inline OsrModel fit_class_stats(std::span<const Representation> reps, Threshold threshold = {},
                                double epsilon = OsrModel::kDefaultEpsilon) {
  if (reps.empty()) throw Error("cannot fit class statistics on an empty set");
  const std::size_t dim = reps.front().z.size();
  std::map<int, std::vector<const Representation*>> by_class;
  for (const auto& r : reps) {
    if (r.label < 0) throw Error("unknown-class sample in the training representations");
    if (r.z.size() != dim) throw Error("representations differ in dimension");
    by_class[r.label].push_back(&r);
  }

  std::vector<ClassStats> stats;
  for (const auto& [label, members] : by_class) {
    ClassStats s;
    s.class_id = label;
    s.count = members.size();
    s.prototype.assign(dim, 0.0);
    for (const auto* r : members)
      for (std::size_t k = 0; k < dim; ++k) s.prototype[k] += r->z[k];
    for (auto& v : s.prototype) v /= static_cast<double>(s.count);

    std::vector<double> dist;
    dist.reserve(s.count);
    for (const auto* r : members) dist.push_back(euclidean(s.prototype, r->z));
    double mean = 0.0;
    for (double d : dist) mean += d;
    mean /= static_cast<double>(s.count);
    double var = 0.0;
    for (double d : dist) var += (d - mean) * (d - mean);
    var /= static_cast<double>(s.count);
    s.mean_distance = mean;
    s.std_distance = std::max(std::sqrt(var), epsilon);
    stats.push_back(std::move(s));
  }
  return OsrModel(std::move(stats), threshold, epsilon);
}

/// Nearest-rank percentile: the ceil(p/100 * N)-th smallest score.
inline double manual_threshold(std::vector<double> scores, double percentile = 99.0) {
  if (scores.empty()) throw Error("manual threshold needs at least one score");
  if (!(percentile > 0.0 && percentile <= 100.0)) throw Error("percentile must lie in (0, 100]");
  std::sort(scores.begin(), scores.end());
  const double rank = std::ceil(percentile / 100.0 * static_cast<double>(scores.size()));
  const auto idx = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(scores.size()))) - 1;
  return scores[idx];
}

// ---- JSON --------------------------------------------------------------

inline nlohmann::json to_json(const OsrModel& m) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& s : m.stats())
    classes.push_back(
        {{"id", s.class_id}, {"prototype", s.prototype}, {"m", s.mean_distance}, {"s", s.std_distance}, {"n", s.count}});
  return {{"classes", classes},
          {"distance", "euclidean"},
          {"epsilon", m.epsilon()},
          {"threshold",
           {{"mode", m.threshold().mode == ThresholdMode::statistical ? "statistical" : "manual"},
            {"value", m.threshold().value}}}};
}

inline OsrModel osr_model_from_json(const nlohmann::json& j) {
  try {
    if (j.value("distance", std::string("euclidean")) != "euclidean") throw Error("only euclidean distance is supported");
    std::vector<ClassStats> stats;
    for (const auto& c : j.at("classes")) {
      ClassStats s;
      s.class_id = c.at("id").get<int>();
      s.prototype = c.at("prototype").get<std::vector<double>>();
      s.mean_distance = c.at("m").get<double>();
      s.std_distance = c.at("s").get<double>();
      s.count = c.at("n").get<std::size_t>();
      stats.push_back(std::move(s));
    }
    Threshold t;
    const auto& tj = j.at("threshold");
    const auto mode = tj.at("mode").get<std::string>();
    if (mode == "statistical") t.mode = ThresholdMode::statistical;
    else if (mode == "manual") t.mode = ThresholdMode::manual;
    else throw Error("unknown threshold mode '" + mode + "'");
    t.value = tj.at("value").get<double>();
    return OsrModel(std::move(stats), t, j.value("epsilon", OsrModel::kDefaultEpsilon));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid OSR model: ") + e.what());
  }
}

inline nlohmann::json to_json(const Representation& r) {
  return {{"id", r.id}, {"label", r.label}, {"z", r.z}};
}

inline Representation representation_from_json(const nlohmann::json& j) {
  try {
    return {j.at("z").get<std::vector<double>>(), j.value("label", kUnknownLabel), j.value("id", std::string{})};
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid representation record: ") + e.what());
  }
}

}  // namespace fcgosr
