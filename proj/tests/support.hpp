#pragma once

// Generators and independent reference implementations shared by the unit
// and acceptance suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include <fcgosr/common.hpp>
#include <fcgosr/graph.hpp>
#include <fcgosr/nn.hpp>

namespace fcgosr::oracle {

/// Random FCG with V in [0, max_v] and roughly `edge_factor * V` edges.
inline Fcg random_fcg(Rng& rng, std::size_t max_v = 67, double edge_factor = 1.2) {
  const auto v = static_cast<std::size_t>(rng.below(max_v + 1));
  std::vector<Edge> edges;
  if (v > 0) {
    const auto m = static_cast<std::size_t>(edge_factor * static_cast<double>(v) * rng.uniform());
    for (std::size_t k = 0; k < m; ++k)
      edges.push_back({static_cast<std::uint32_t>(rng.below(v)), static_cast<std::uint32_t>(rng.below(v))});
  }
  std::vector<std::int64_t> ids(v);
  for (auto& id : ids) id = static_cast<std::int64_t>(rng.below(60));
  return Fcg(v, std::move(ids), std::move(edges), "c" + std::to_string(rng.below(3)));
}

/// Undirected degree of each true vertex read straight off the matrix.
inline std::vector<std::size_t> matrix_degrees(const AdjacencyTensor& a) {
  std::vector<std::size_t> deg(a.size, 0);
  for (std::size_t i = 0; i < a.size; ++i)
    for (std::size_t j = 0; j < a.size; ++j)
      if (a(i, j) != 0.0) {
        ++deg[i];
        ++deg[j];
      }
  return deg;
}

/// Component sizes by flood fill over the undirected matrix; isolated
/// vertices below `vertices` count as singletons.
inline std::multiset<std::size_t> matrix_component_sizes(const AdjacencyTensor& a, std::size_t vertices) {
  std::vector<bool> seen(vertices, false);
  std::multiset<std::size_t> sizes;
  for (std::size_t s = 0; s < vertices; ++s) {
    if (seen[s]) continue;
    std::vector<std::size_t> stack{s};
    seen[s] = true;
    std::size_t count = 0;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      ++count;
      for (std::size_t w = 0; w < vertices; ++w)
        if (!seen[w] && (a(u, w) != 0.0 || a(w, u) != 0.0)) {
          seen[w] = true;
          stack.push_back(w);
        }
    }
    sizes.insert(count);
  }
  return sizes;
}

/// Full AUC as the probability that an unknown outranks a known (ties 1/2).
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<bool>& unknown) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!unknown[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (unknown[j]) continue;
      den += 1.0;
      if (scores[i] > scores[j]) num += 1.0;
      else if (scores[i] == scores[j]) num += 0.5;
    }
  }
  return num / den;
}

/// Straight transcription of the prototype statistics and decision rule.
struct BruteOsr {
  struct Cls {
    int id;
    std::vector<double> mu;
    double m, s;
  };
  std::vector<Cls> classes;
  double threshold;

  BruteOsr(const std::vector<std::vector<double>>& z, const std::vector<int>& labels, double thr, double eps = 1e-8)
      : threshold(thr) {
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
    for (const auto& [id, idx] : members) {
      Cls c{id, std::vector<double>(z[idx[0]].size(), 0.0), 0.0, 0.0};
      const auto count = static_cast<double>(idx.size());
      for (auto i : idx)
        for (std::size_t k = 0; k < c.mu.size(); ++k) c.mu[k] += z[i][k];
      for (auto& v : c.mu) v /= count;
      std::vector<double> d;
      for (auto i : idx) d.push_back(dist(c.mu, z[i]));
      for (double x : d) c.m += x;
      c.m /= count;
      double var = 0.0;
      for (double x : d) var += (x - c.m) * (x - c.m);
      var /= count;
      c.s = std::max(std::sqrt(var), eps);
      classes.push_back(std::move(c));
    }
  }

  static double dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
  }

  double score(const std::vector<double>& z) const {
    double best = INFINITY;
    for (const auto& c : classes) best = std::min(best, std::abs(dist(c.mu, z) - c.m) / c.s);
    return best;
  }

  int classify(const std::vector<double>& z) const {
    double best = INFINITY;
    int label = -1;
    for (const auto& c : classes) {
      const double dev = std::abs(dist(c.mu, z) - c.m) / c.s;
      if (dev < best) {
        best = dev;
        label = c.id;
      }
    }
    return best > threshold ? -1 : label;
  }
};

// Small nonzero biases keep ReLU pre-activations off the kink when an input
// row is all zeros.
inline void jitter_biases(nn::Network& net, Rng& rng, double scale = 0.1) {
  for (auto& l : net.layers())
    if (auto* d = std::get_if<nn::Dense>(&l))
      for (auto& b : d->bias) b = scale * rng.normal();
}

}  // namespace fcgosr::oracle
