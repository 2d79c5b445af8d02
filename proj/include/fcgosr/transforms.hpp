#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "graph.hpp"

namespace fcgosr {

enum class TransformKind { identity, fcg_shift, fcg_random, node_dropping, subgraph_sampling };

inline std::string_view to_string(TransformKind k) {
  switch (k) {
    case TransformKind::identity: return "identity";
    case TransformKind::fcg_shift: return "fcg_shift";
    case TransformKind::fcg_random: return "fcg_random";
    case TransformKind::node_dropping: return "node_dropping";
    case TransformKind::subgraph_sampling: return "subgraph_sampling";
  }
  return "?";
}

inline TransformKind transform_kind_from_string(std::string_view name) {
  for (auto k : {TransformKind::identity, TransformKind::fcg_shift, TransformKind::fcg_random,
                 TransformKind::node_dropping, TransformKind::subgraph_sampling})
    if (to_string(k) == name) return k;
  throw Error("unknown transform kind '" + std::string(name) + "'");
}

struct TransformSpec {
  TransformKind kind = TransformKind::identity;
  std::optional<std::size_t> shift_n;   // fcg_shift; drawn from 1..V-1 when unset
  double drop_rate = 0.2;               // node_dropping
  std::optional<std::size_t> walk_len;  // subgraph_sampling; 2V when unset
  std::uint64_t seed = 0;

  friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

struct TransformOutcome {
  AdjacencyTensor tensor;
  // Present for the isomorphism-preserving kinds: tensor = permute(input, *permutation).
  std::optional<std::vector<std::size_t>> permutation;
};

namespace detail {

inline std::vector<std::size_t> identity_permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

inline void zero_vertex(AdjacencyTensor& a, std::size_t v) {
  for (std::size_t k = 0; k < a.size; ++k) {
    a(v, k) = 0.0;
    a(k, v) = 0.0;
  }
}

}  // namespace detail

inline TransformOutcome identity_transform(const AdjacencyTensor& a) {
  return {a, detail::identity_permutation(a.size)};
}

/// Relabels the first true_vertices indices by sigma (padding stays fixed).
inline TransformOutcome permute_vertices(const AdjacencyTensor& a, std::span<const std::size_t> head) {
  if (head.size() != a.true_vertices) throw Error("permutation must cover exactly the true vertices");
  auto sigma = detail::identity_permutation(a.size);
  std::copy(head.begin(), head.end(), sigma.begin());
  auto t = permute(a, sigma);
  return {std::move(t), std::move(sigma)};
}

/// Rotates the vertex order n positions to the left: sigma(i) = (i + n) mod V.
inline TransformOutcome fcg_shift(const AdjacencyTensor& a, std::size_t n) {
  const std::size_t v = a.true_vertices;
  if (v == 0) return identity_transform(a);
  if (n >= v) throw Error("shift " + std::to_string(n) + " must be below vertex count " + std::to_string(v));
  std::vector<std::size_t> head(v);
  for (std::size_t i = 0; i < v; ++i) head[i] = (i + n) % v;
  return permute_vertices(a, head);
}

/// Uniform random relabelling of the true vertices (Fisher-Yates).
inline TransformOutcome fcg_random(const AdjacencyTensor& a, std::uint64_t seed) {
  auto head = detail::identity_permutation(a.true_vertices);
  Rng rng(seed);
  rng.shuffle(head.begin(), head.end());
  return permute_vertices(a, head);
}

/// Zeroes the rows and columns of the masked vertices; indices are not compacted.
inline AdjacencyTensor zero_vertices(const AdjacencyTensor& a, const std::vector<bool>& dropped) {
  AdjacencyTensor out = a;
  for (std::size_t v = 0; v < dropped.size() && v < a.size; ++v)
    if (dropped[v]) detail::zero_vertex(out, v);
  return out;
}

inline TransformOutcome node_dropping(const AdjacencyTensor& a, double drop_rate, std::uint64_t seed) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw Error("drop_rate must lie in [0, 1)");
  Rng rng(seed);
  std::vector<bool> dropped(a.true_vertices);
  for (std::size_t v = 0; v < a.true_vertices; ++v) dropped[v] = rng.bernoulli(drop_rate);
  return {zero_vertices(a, dropped), std::nullopt};
}

/// Undirected random walk from a uniform start; unvisited vertices are zeroed.
inline TransformOutcome subgraph_sampling(const AdjacencyTensor& a, std::size_t walk_len, std::uint64_t seed) {
  const std::size_t v = a.true_vertices;
  if (v == 0) throw Error("subgraph sampling needs at least one vertex");
  if (walk_len == 0) throw Error("walk length must be at least 1");

  std::vector<std::vector<std::size_t>> neighbours(v);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = 0; j < v; ++j)
      if (a(i, j) != 0.0 || a(j, i) != 0.0) neighbours[i].push_back(j);

  Rng rng(seed);
  std::vector<bool> visited(v, false);
  std::size_t at = rng.below(v);
  visited[at] = true;
  for (std::size_t step = 0; step < walk_len; ++step) {
    const auto& nb = neighbours[at];
    if (nb.empty()) break;
    at = nb[rng.below(nb.size())];
    visited[at] = true;
  }
  std::vector<bool> dropped(v);
  for (std::size_t i = 0; i < v; ++i) dropped[i] = !visited[i];
  return {zero_vertices(a, dropped), std::nullopt};
}

inline TransformOutcome apply_transform(const TransformSpec& spec, const AdjacencyTensor& a) {
  switch (spec.kind) {
    case TransformKind::identity:
      return identity_transform(a);
    case TransformKind::fcg_shift: {
      std::size_t n = 0;
      if (spec.shift_n) {
        n = *spec.shift_n;
      } else if (a.true_vertices > 1) {
        Rng rng(spec.seed);
        n = static_cast<std::size_t>(rng.between(1, static_cast<std::int64_t>(a.true_vertices) - 1));
      }
      return fcg_shift(a, n);
    }
    case TransformKind::fcg_random:
      return fcg_random(a, spec.seed);
    case TransformKind::node_dropping:
      return node_dropping(a, spec.drop_rate, spec.seed);
    case TransformKind::subgraph_sampling:
      return subgraph_sampling(a, spec.walk_len.value_or(2 * a.true_vertices), spec.seed);
  }
  throw Error("unhandled transform kind");
}

inline nlohmann::json to_json(const TransformSpec& s) {
  nlohmann::json j{{"kind", to_string(s.kind)}, {"drop_rate", s.drop_rate}, {"seed", s.seed}};
  j["shift_n"] = s.shift_n ? nlohmann::json(*s.shift_n) : nlohmann::json(nullptr);
  j["walk_len"] = s.walk_len ? nlohmann::json(*s.walk_len) : nlohmann::json(nullptr);
  return j;
}

inline TransformSpec transform_spec_from_json(const nlohmann::json& j) {
  try {
    TransformSpec s;
    s.kind = transform_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("shift_n") && !j["shift_n"].is_null()) s.shift_n = j["shift_n"].get<std::size_t>();
    if (j.contains("walk_len") && !j["walk_len"].is_null()) s.walk_len = j["walk_len"].get<std::size_t>();
    s.drop_rate = j.value("drop_rate", 0.2);
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid transform spec: ") + e.what());
  }
}

}  // namespace fcgosr
