#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "common.hpp"
#include "graph.hpp"

// Function call graph extraction from a minimal disassembly listing:
//
//   # comment
//   FUNC <name>
//     <opcode> [operands...]
//     call <callee>
//   ENDF
//
// Functions are grouped by MinHash/LSH similarity of their opcode n-grams and
// the graph vertices are the resulting clusters.

namespace fcgosr {

struct FunctionRecord {
  std::string name;
  std::vector<std::string> opcodes;
  std::vector<std::string> callees;

  friend bool operator==(const FunctionRecord&, const FunctionRecord&) = default;
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace detail

inline std::vector<FunctionRecord> parse_disassembly(std::string_view text) {
  std::vector<FunctionRecord> functions;
  std::unordered_set<std::string> names;
  bool open = false;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tokens = detail::split_ws(line);
    if (tokens.empty() || tokens.front().front() == '#') continue;
    const std::string_view head = tokens.front();
    if (head == "FUNC") {
      if (open) throw ParseError(lineno, "FUNC inside an unterminated function");
      if (tokens.size() != 2) throw ParseError(lineno, "FUNC expects exactly one name");
      std::string name(tokens[1]);
      if (!names.insert(name).second) throw ParseError(lineno, "duplicate function name '" + name + "'");
      functions.push_back({std::move(name), {}, {}});
      open = true;
    } else if (head == "ENDF") {
      if (!open) throw ParseError(lineno, "ENDF without FUNC");
      open = false;
    } else if (!open) {
      throw ParseError(lineno, "unknown directive '" + std::string(head) + "' outside a function");
    } else {
      auto opcode = detail::lowercase(head);
      if (opcode == "call") {
        if (tokens.size() < 2) throw ParseError(lineno, "call without a target");
        functions.back().callees.emplace_back(tokens[1]);
      }
      functions.back().opcodes.push_back(std::move(opcode));
    }
  }
  if (open) throw ParseError(lineno, "function '" + functions.back().name + "' missing ENDF");
  return functions;
}

/// Contiguous opcode windows of length n, tokens joined by a single space.
/// Sequences shorter than n yield one gram holding the whole sequence.
inline std::vector<std::string> opcode_ngrams(const FunctionRecord& fn, std::size_t n) {
  if (n == 0) throw Error("n-gram length must be at least 1");
  auto join = [&](std::size_t first, std::size_t count) {
    std::string gram;
    for (std::size_t k = 0; k < count; ++k) {
      if (k) gram += ' ';
      gram += fn.opcodes[first + k];
    }
    return gram;
  };
  if (fn.opcodes.size() < n) return {join(0, fn.opcodes.size())};
  std::vector<std::string> grams;
  grams.reserve(fn.opcodes.size() - n + 1);
  for (std::size_t i = 0; i + n <= fn.opcodes.size(); ++i) grams.push_back(join(i, n));
  return grams;
}

struct MinHashSignature {
  std::vector<std::uint64_t> values;

  std::size_t num_hashes() const noexcept { return values.size(); }
  friend bool operator==(const MinHashSignature&, const MinHashSignature&) = default;
};

/// values[h] = min over distinct grams g of hash_h(g). Multiplicity is ignored.
inline MinHashSignature minhash_signature(std::span<const std::string> grams, std::size_t num_hashes,
                                          std::uint64_t seed) {
  if (num_hashes == 0) throw Error("num_hashes must be positive");
  if (grams.empty()) throw Error("minhash of an empty gram set");
  std::vector<std::uint64_t> keys(num_hashes);
  for (std::size_t h = 0; h < num_hashes; ++h) keys[h] = derive_seed(seed, h);

  MinHashSignature sig{std::vector<std::uint64_t>(num_hashes, std::numeric_limits<std::uint64_t>::max())};
  for (const auto& g : grams) {
    const std::uint64_t base = fnv1a64(g);
    for (std::size_t h = 0; h < num_hashes; ++h)
      sig.values[h] = std::min(sig.values[h], mix64(base ^ keys[h]));
  }
  return sig;
}

/// Maps function name -> dense cluster id.
using ClusterAssignment = std::map<std::string, std::size_t>;

/// Cluster ids per signature index: connected components of the "shares an
/// identical band" relation, numbered in order of first appearance.
inline std::vector<std::size_t> lsh_cluster(std::span<const MinHashSignature> signatures, std::size_t bands,
                                            std::size_t rows) {
  if (bands == 0 || rows == 0) throw Error("bands and rows must be positive");
  for (const auto& s : signatures)
    if (s.num_hashes() != bands * rows)
      throw Error("bands x rows = " + std::to_string(bands * rows) + " but signature has " +
                  std::to_string(s.num_hashes()) + " hashes");

  const std::size_t n = signatures.size();
  detail::DisjointSets sets(n);
  for (std::size_t b = 0; b < bands; ++b) {
    std::map<std::vector<std::uint64_t>, std::size_t> first_with_key;
    for (std::size_t i = 0; i < n; ++i) {
      const auto begin = signatures[i].values.begin() + static_cast<std::ptrdiff_t>(b * rows);
      std::vector<std::uint64_t> key(begin, begin + static_cast<std::ptrdiff_t>(rows));
      auto [it, inserted] = first_with_key.try_emplace(std::move(key), i);
      if (!inserted) sets.unite(it->second, i);
    }
  }

  std::vector<std::size_t> id_of_root(n, n);
  std::vector<std::size_t> ids(n);
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = sets.find(i);
    if (id_of_root[r] == n) id_of_root[r] = next++;
    ids[i] = id_of_root[r];
  }
  return ids;
}

struct BuildDiagnostics {
  std::size_t unresolved_callees = 0;
};

/// Collapses functions to their clusters. Edge multiplicity is discarded;
/// self-loops are kept; calls to unknown names are counted and dropped.
inline Fcg build_fcg(std::span<const FunctionRecord> functions, const ClusterAssignment& clusters,
                     BuildDiagnostics* diagnostics = nullptr) {
  std::size_t num_clusters = 0;
  for (const auto& fn : functions) {
    auto it = clusters.find(fn.name);
    if (it == clusters.end()) throw Error("function '" + fn.name + "' has no cluster id");
    num_clusters = std::max(num_clusters, it->second + 1);
  }
  std::vector<Edge> edges;
  std::size_t unresolved = 0;
  std::unordered_set<std::string> defined;
  for (const auto& fn : functions) defined.insert(fn.name);
  for (const auto& fn : functions) {
    const auto from = static_cast<std::uint32_t>(clusters.at(fn.name));
    for (const auto& callee : fn.callees) {
      if (!defined.contains(callee)) {
        ++unresolved;
        continue;
      }
      edges.push_back({from, static_cast<std::uint32_t>(clusters.at(callee))});
    }
  }
  if (diagnostics) diagnostics->unresolved_callees = unresolved;
  return Fcg(num_clusters, {}, std::move(edges));
}

struct ExtractConfig {
  std::size_t ngram = 2;
  std::size_t num_hashes = 64;
  std::size_t bands = 16;
  std::uint64_t seed = 0;

  std::size_t rows() const {
    if (bands == 0 || num_hashes % bands != 0)
      throw Error("hash count " + std::to_string(num_hashes) + " is not divisible by " + std::to_string(bands) +
                  " bands");
    return num_hashes / bands;
  }
};

struct ExtractResult {
  Fcg graph;
  ClusterAssignment clusters;
  BuildDiagnostics diagnostics;
};

inline ExtractResult extract_fcg(std::string_view listing, const ExtractConfig& cfg = {}) {
  const auto functions = parse_disassembly(listing);
  std::vector<MinHashSignature> signatures;
  signatures.reserve(functions.size());
  for (const auto& fn : functions) {
    const auto grams = opcode_ngrams(fn, cfg.ngram);
    signatures.push_back(minhash_signature(grams, cfg.num_hashes, cfg.seed));
  }
  const auto ids = lsh_cluster(signatures, cfg.bands, cfg.rows());
  ExtractResult result;
  for (std::size_t i = 0; i < functions.size(); ++i) result.clusters[functions[i].name] = ids[i];
  result.graph = build_fcg(functions, result.clusters, &result.diagnostics);
  return result;
}

}  // namespace fcgosr
