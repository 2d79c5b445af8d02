#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace fcgosr {

struct Edge {
  std::uint32_t from = 0;
  std::uint32_t to = 0;

  auto operator<=>(const Edge&) const = default;
};

/// Directed function call graph. Vertices are function clusters labelled by
/// cluster id; edges are caller -> callee and form a set (self-loops allowed).
class Fcg {
 public:
  Fcg() = default;

  Fcg(std::size_t num_vertices, std::vector<std::int64_t> cluster_ids, std::vector<Edge> edges,
      std::string label = {})
      : num_vertices_(num_vertices),
        cluster_ids_(std::move(cluster_ids)),
        edges_(std::move(edges)),
        label_(std::move(label)) {
    if (cluster_ids_.empty() && num_vertices_ > 0) {
      cluster_ids_.resize(num_vertices_);
      std::iota(cluster_ids_.begin(), cluster_ids_.end(), std::int64_t{0});
    }
    if (cluster_ids_.size() != num_vertices_)
      throw Error("cluster_ids has " + std::to_string(cluster_ids_.size()) + " entries for " +
                  std::to_string(num_vertices_) + " vertices");
    for (auto id : cluster_ids_)
      if (id < 0) throw Error("negative cluster id");
    for (const auto& e : edges_)
      if (e.from >= num_vertices_ || e.to >= num_vertices_)
        throw Error("edge (" + std::to_string(e.from) + "," + std::to_string(e.to) +
                    ") out of range for " + std::to_string(num_vertices_) + " vertices");
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
  }

  std::size_t num_vertices() const noexcept { return num_vertices_; }
  const std::vector<std::int64_t>& cluster_ids() const noexcept { return cluster_ids_; }
  const std::vector<Edge>& edges() const noexcept { return edges_; }
  const std::string& label() const noexcept { return label_; }
  void set_label(std::string label) { label_ = std::move(label); }

  bool has_edge(std::uint32_t from, std::uint32_t to) const {
    return std::binary_search(edges_.begin(), edges_.end(), Edge{from, to});
  }

  friend bool operator==(const Fcg&, const Fcg&) = default;

 private:
  std::size_t num_vertices_ = 0;
  std::vector<std::int64_t> cluster_ids_;
  std::vector<Edge> edges_;
  std::string label_;
};

/// Square zero-padded adjacency matrix, row-major. Graph-derived tensors hold
/// 0/1 values; decoder reconstructions may hold values in [0, 1].
struct AdjacencyTensor {
  std::size_t size = 0;
  std::size_t true_vertices = 0;
  std::vector<double> data;

  AdjacencyTensor() = default;
  AdjacencyTensor(std::size_t s, std::size_t vertices)
      : size(s), true_vertices(vertices), data(s * s, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * size + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * size + j]; }

  std::size_t count_nonzero() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](double v) { return v != 0.0; }));
  }

  friend bool operator==(const AdjacencyTensor&, const AdjacencyTensor&) = default;
};

enum class PadMode { strict, truncate };

/// Undirected degree of every vertex; a self-loop contributes 2.
inline std::vector<std::size_t> undirected_degrees(const Fcg& g) {
  std::vector<std::size_t> deg(g.num_vertices(), 0);
  for (const auto& e : g.edges()) {
    ++deg[e.from];
    ++deg[e.to];
  }
  return deg;
}

inline std::vector<std::size_t> degree_sequence(const Fcg& g) {
  auto deg = undirected_degrees(g);
  std::sort(deg.begin(), deg.end());
  return deg;
}

inline AdjacencyTensor to_adjacency(const Fcg& g, std::size_t size, PadMode mode = PadMode::strict) {
  if (size == 0) throw Error("padded size must be at least 1");
  const std::size_t v = g.num_vertices();
  if (v <= size) {
    AdjacencyTensor t(size, v);
    for (const auto& e : g.edges()) t(e.from, e.to) = 1.0;
    return t;
  }
  if (mode == PadMode::strict) throw CapacityError(v, size);

  // Keep the `size` highest-degree vertices (ties to the lower index), then
  // lay them out in their original relative order.
  const auto deg = undirected_degrees(g);
  std::vector<std::uint32_t> order(v);
  std::iota(order.begin(), order.end(), 0U);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return deg[a] > deg[b]; });
  order.resize(size);
  std::sort(order.begin(), order.end());
  std::vector<std::int64_t> slot(v, -1);
  for (std::size_t i = 0; i < order.size(); ++i) slot[order[i]] = static_cast<std::int64_t>(i);

  AdjacencyTensor t(size, size);
  for (const auto& e : g.edges()) {
    if (slot[e.from] >= 0 && slot[e.to] >= 0)
      t(static_cast<std::size_t>(slot[e.from]), static_cast<std::size_t>(slot[e.to])) = 1.0;
  }
  return t;
}

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  // The smaller root wins so each set is represented by its minimum element.
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace detail

/// Weakly connected components, ordered by their smallest vertex.
inline std::vector<std::vector<std::size_t>> weak_components(const Fcg& g) {
  const std::size_t n = g.num_vertices();
  detail::DisjointSets sets(n);
  for (const auto& e : g.edges()) sets.unite(e.from, e.to);

  std::vector<std::size_t> index_of_root(n, n);
  std::vector<std::vector<std::size_t>> components;
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t r = sets.find(v);
    if (index_of_root[r] == n) {
      index_of_root[r] = components.size();
      components.emplace_back();
    }
    components[index_of_root[r]].push_back(v);
  }
  return components;
}

/// Corpus averages of the graph characteristics. Percent fields are in
/// percent units (16.0 means 16%) and average per-graph ratios.
struct GraphStatsReport {
  double mean_vertices = 0.0;
  double mean_degree = 0.0;
  double degree_per_vertex_pct = 0.0;
  double mean_components = 0.0;
  double mean_component_size = 0.0;
  double component_size_per_vertex_pct = 0.0;
};

inline GraphStatsReport graph_stats(std::span<const Fcg> corpus) {
  if (corpus.empty()) throw Error("graph_stats: empty corpus");
  GraphStatsReport r;
  std::size_t nonempty = 0;
  for (const auto& g : corpus) {
    const auto v = static_cast<double>(g.num_vertices());
    const auto comps = static_cast<double>(weak_components(g).size());
    r.mean_vertices += v;
    r.mean_components += comps;
    if (g.num_vertices() == 0) continue;
    ++nonempty;
    const double degree = 2.0 * static_cast<double>(g.edges().size()) / v;
    const double comp_size = v / comps;
    r.mean_degree += degree;
    r.degree_per_vertex_pct += degree / v;
    r.mean_component_size += comp_size;
    r.component_size_per_vertex_pct += comp_size / v;
  }
  const auto n = static_cast<double>(corpus.size());
  r.mean_vertices /= n;
  r.mean_components /= n;
  if (nonempty > 0) {
    const auto m = static_cast<double>(nonempty);
    r.mean_degree /= m;
    r.degree_per_vertex_pct *= 100.0 / m;
    r.mean_component_size /= m;
    r.component_size_per_vertex_pct *= 100.0 / m;
  }
  return r;
}

inline void check_same_size(const AdjacencyTensor& a, const AdjacencyTensor& b, std::size_t perm_size) {
  if (a.size != b.size || a.size != perm_size)
    throw Error("size mismatch: " + std::to_string(a.size) + ", " + std::to_string(b.size) + ", permutation " +
                std::to_string(perm_size));
}

inline void check_permutation(std::span<const std::size_t> sigma) {
  std::vector<bool> hit(sigma.size(), false);
  for (auto v : sigma) {
    if (v >= sigma.size() || hit[v]) throw Error("not a permutation of 0.." + std::to_string(sigma.size() - 1));
    hit[v] = true;
  }
}

/// True iff b[i][j] == a[sigma[i]][sigma[j]] for every cell.
inline bool check_isomorphic_under(const AdjacencyTensor& a, const AdjacencyTensor& b,
                                   std::span<const std::size_t> sigma) {
  check_same_size(a, b, sigma.size());
  check_permutation(sigma);
  const std::size_t s = a.size;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j)
      if (b(i, j) != a(sigma[i], sigma[j])) return false;
  return true;
}

/// Relabels vertices: out[i][j] = a[sigma[i]][sigma[j]].
inline AdjacencyTensor permute(const AdjacencyTensor& a, std::span<const std::size_t> sigma) {
  if (sigma.size() != a.size) throw Error("permutation length differs from tensor size");
  check_permutation(sigma);
  AdjacencyTensor out(a.size, a.true_vertices);
  for (std::size_t i = 0; i < a.size; ++i)
    for (std::size_t j = 0; j < a.size; ++j) out(i, j) = a(sigma[i], sigma[j]);
  return out;
}

/// Reads the 0/1 pattern of the first `true_vertices` rows back into a graph.
inline Fcg from_adjacency(const AdjacencyTensor& a) {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < a.size; ++i)
    for (std::size_t j = 0; j < a.size; ++j)
      if (a(i, j) != 0.0) edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
  std::size_t v = a.true_vertices;
  for (const auto& e : edges) v = std::max<std::size_t>(v, std::max(e.from, e.to) + 1U);
  return Fcg(v, {}, std::move(edges));
}

// ---- JSON --------------------------------------------------------------

inline nlohmann::json to_json(const Fcg& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges()) edges.push_back({e.from, e.to});
  return nlohmann::json{{"num_vertices", g.num_vertices()},
                        {"cluster_ids", g.cluster_ids()},
                        {"edges", std::move(edges)},
                        {"label", g.label()}};
}

inline Fcg fcg_from_json(const nlohmann::json& j) {
  try {
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 2) throw Error("edge must be a [u, v] pair");
      edges.push_back({e[0].get<std::uint32_t>(), e[1].get<std::uint32_t>()});
    }
    std::vector<std::int64_t> ids;
    if (j.contains("cluster_ids")) ids = j.at("cluster_ids").get<std::vector<std::int64_t>>();
    return Fcg(j.at("num_vertices").get<std::size_t>(), std::move(ids), std::move(edges),
               j.value("label", std::string{}));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid FCG record: ") + e.what());
  }
}

inline std::vector<Fcg> read_corpus(std::istream& in) {
  std::vector<Fcg> corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    try {
      corpus.push_back(fcg_from_json(j));
    } catch (const Error& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return corpus;
}

inline std::vector<Fcg> read_corpus_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_corpus(in);
}

inline void write_corpus(std::ostream& out, std::span<const Fcg> corpus) {
  for (const auto& g : corpus) out << to_json(g).dump() << '\n';
}

inline nlohmann::json to_json(const GraphStatsReport& r) {
  return nlohmann::json{{"mean_vertices", r.mean_vertices},
                        {"mean_degree", r.mean_degree},
                        {"degree_per_vertex_pct", r.degree_per_vertex_pct},
                        {"mean_components", r.mean_components},
                        {"mean_component_size", r.mean_component_size},
                        {"component_size_per_vertex_pct", r.component_size_per_vertex_pct}};
}

}  // namespace fcgosr
