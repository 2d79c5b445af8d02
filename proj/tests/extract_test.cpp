#include <gtest/gtest.h>

#include <set>

#include <fcgosr/fcg_extract.hpp>

using namespace fcgosr;

namespace {

std::vector<std::string> tokens(std::initializer_list<const char*> xs) { return {xs.begin(), xs.end()}; }

MinHashSignature sig_of(std::initializer_list<std::uint64_t> v) { return {std::vector<std::uint64_t>(v)}; }

}  // namespace

TEST(ParseDisassembly, TwoFunctions) {
  const auto fns = parse_disassembly("FUNC f1\n mov\n call f2\nENDF\nFUNC f2\n ret\nENDF");
  ASSERT_EQ(fns.size(), 2u);
  EXPECT_EQ(fns[0].name, "f1");
  EXPECT_EQ(fns[0].opcodes, tokens({"mov", "call"}));
  EXPECT_EQ(fns[0].callees, tokens({"f2"}));
  EXPECT_EQ(fns[1].opcodes, tokens({"ret"}));
  EXPECT_TRUE(fns[1].callees.empty());
}

TEST(ParseDisassembly, EmptyInput) { EXPECT_TRUE(parse_disassembly("").empty()); }

TEST(ParseDisassembly, CommentsBlankLinesAndCase) {
  const auto fns = parse_disassembly("# header\n\nFUNC f\n  MOV eax, 1\n# inside\n  Push\nENDF\n");
  ASSERT_EQ(fns.size(), 1u);
  EXPECT_EQ(fns[0].opcodes, tokens({"mov", "push"}));
}

TEST(ParseDisassembly, EmptyFunctionAllowed) {
  const auto fns = parse_disassembly("FUNC f\nENDF\n");
  ASSERT_EQ(fns.size(), 1u);
  EXPECT_TRUE(fns[0].opcodes.empty());
}

TEST(ParseDisassembly, ErrorsCarryLineNumbers) {
  auto line_of = [](const char* text) -> std::size_t {
    try {
      parse_disassembly(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of("FUNC a\nENDF\nmov\n"), 3u);         // opcode outside a function
  EXPECT_EQ(line_of("FUNC a\nENDF\nFUNC a\nENDF\n"), 3u);  // duplicate name
  EXPECT_EQ(line_of("ENDF\n"), 1u);
  EXPECT_EQ(line_of("FUNC a\nFUNC b\n"), 2u);
  EXPECT_EQ(line_of("FUNC\n"), 1u);
  EXPECT_EQ(line_of("FUNC a\n call\nENDF\n"), 2u);
  EXPECT_NE(line_of("FUNC a\n mov\n"), 0u);  // missing ENDF
}

TEST(OpcodeNgrams, Examples) {
  FunctionRecord f{"f", tokens({"a", "b", "c"}), {}};
  EXPECT_EQ(opcode_ngrams(f, 2), tokens({"a b", "b c"}));
  FunctionRecord g{"g", tokens({"a"}), {}};
  EXPECT_EQ(opcode_ngrams(g, 2), tokens({"a"}));
  FunctionRecord h{"h", tokens({"a", "a", "a"}), {}};
  EXPECT_EQ(opcode_ngrams(h, 2), tokens({"a a", "a a"}));
  EXPECT_EQ(opcode_ngrams(f, 1), tokens({"a", "b", "c"}));
  EXPECT_THROW(opcode_ngrams(f, 0), Error);
}

TEST(MinHash, DeterministicAndSetSemantics) {
  const auto a = tokens({"x", "y", "z"});
  const auto b = tokens({"z", "y", "x", "x"});
  EXPECT_EQ(minhash_signature(a, 64, 7), minhash_signature(b, 64, 7));
  EXPECT_EQ(minhash_signature(a, 64, 7).num_hashes(), 64u);
  EXPECT_NE(minhash_signature(a, 64, 7), minhash_signature(a, 64, 8));
  EXPECT_THROW(minhash_signature(a, 0, 7), Error);
}

TEST(MinHash, DisjointSetsRarelyAgree) {
  const auto a = tokens({"a", "b", "c"});
  const auto b = tokens({"d", "e", "f"});
  std::size_t matches = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto sa = minhash_signature(a, 64, seed), sb = minhash_signature(b, 64, seed);
    for (std::size_t h = 0; h < 64; ++h) matches += sa.values[h] == sb.values[h];
  }
  EXPECT_EQ(matches, 0u);
}

// Agreement rate estimates the exact Jaccard index.
TEST(MinHash, AgreementTracksJaccard) {
  Rng rng(1234);
  for (int trial = 0; trial < 5; ++trial) {
    std::set<std::string> sa, sb;
    for (int k = 0; k < 12; ++k) {
      sa.insert("t" + std::to_string(rng.below(20)));
      sb.insert("t" + std::to_string(rng.below(20)));
    }
    std::vector<std::string> inter, uni;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
    std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
    const double jaccard = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    const std::vector<std::string> va(sa.begin(), sa.end()), vb(sb.begin(), sb.end());
    double agree = 0.0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto x = minhash_signature(va, 64, seed), y = minhash_signature(vb, 64, seed);
      for (std::size_t h = 0; h < 64; ++h) agree += x.values[h] == y.values[h];
    }
    EXPECT_NEAR(agree / 64000.0, jaccard, 0.05);
  }
}

TEST(MinHash, OneThirdJaccard) {
  const auto a = tokens({"a", "b"}), b = tokens({"b", "c"});
  double agree = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto x = minhash_signature(a, 64, seed), y = minhash_signature(b, 64, seed);
    for (std::size_t h = 0; h < 64; ++h) agree += x.values[h] == y.values[h];
  }
  EXPECT_NEAR(agree / 64000.0, 1.0 / 3.0, 0.05);
}

TEST(LshCluster, IdenticalAndDisjoint) {
  std::vector<MinHashSignature> sigs;
  std::vector<std::uint64_t> v(64), w(64);
  for (std::size_t i = 0; i < 64; ++i) {
    v[i] = i;
    w[i] = 1000 + i;
  }
  sigs = {{v}, {v}, {w}};
  EXPECT_EQ(lsh_cluster(sigs, 16, 4), (std::vector<std::size_t>{0, 0, 1}));
}

TEST(LshCluster, TransitiveClosure) {
  // A~B share band 0, B~C share band 1, A and C share nothing.
  const std::vector<MinHashSignature> sigs{sig_of({1, 2, 3, 4}), sig_of({1, 2, 5, 6}), sig_of({7, 8, 5, 6})};
  EXPECT_EQ(lsh_cluster(sigs, 2, 2), (std::vector<std::size_t>{0, 0, 0}));
}

TEST(LshCluster, FirstSeenNumbering) {
  const std::vector<MinHashSignature> sigs{sig_of({9, 9}), sig_of({1, 1}), sig_of({9, 9}), sig_of({5, 5})};
  EXPECT_EQ(lsh_cluster(sigs, 1, 2), (std::vector<std::size_t>{0, 1, 0, 2}));
}

TEST(LshCluster, BandRowMismatchThrows) {
  const std::vector<MinHashSignature> sigs{sig_of({1, 2, 3, 4})};
  EXPECT_THROW(lsh_cluster(sigs, 3, 1), Error);
}

TEST(BuildFcg, CollapsesAndCountsUnresolved) {
  std::vector<FunctionRecord> fns{{"f1", {"call"}, {"f2"}}, {"f2", {}, {}}, {"f3", {"call"}, {"f4"}}, {"f4", {}, {}}};
  const ClusterAssignment clusters{{"f1", 0}, {"f2", 1}, {"f3", 0}, {"f4", 1}};
  const auto g = build_fcg(fns, clusters);
  EXPECT_EQ(g.num_vertices(), 2u);
  EXPECT_EQ(g.edges(), (std::vector<Edge>{{0, 1}}));

  std::vector<FunctionRecord> ghost{{"f1", {"call"}, {"ghost"}}};
  BuildDiagnostics diag;
  const auto h = build_fcg(ghost, ClusterAssignment{{"f1", 0}}, &diag);
  EXPECT_TRUE(h.edges().empty());
  EXPECT_EQ(diag.unresolved_callees, 1u);
}

TEST(BuildFcg, RecursionIsSelfLoop) {
  std::vector<FunctionRecord> fns{{"f1", {"call"}, {"f1"}}};
  EXPECT_EQ(build_fcg(fns, ClusterAssignment{{"f1", 0}}).edges(), (std::vector<Edge>{{0, 0}}));
}

TEST(ExtractFcg, EndToEnd) {
  const char* listing =
      "FUNC main\n push\n mov\n call helper\n call helper2\n ret\nENDF\n"
      "FUNC helper\n push\n mov\n add\n pop\n ret\nENDF\n"
      "FUNC helper2\n push\n mov\n add\n pop\n ret\nENDF\n"
      "FUNC other\n xor\n jmp\nENDF\n";
  const auto r = extract_fcg(listing);
  EXPECT_EQ(r.clusters.at("helper"), r.clusters.at("helper2"));
  EXPECT_NE(r.clusters.at("main"), r.clusters.at("other"));
  std::set<std::size_t> ids;
  for (const auto& [name, id] : r.clusters) ids.insert(id);
  EXPECT_EQ(*ids.rbegin() + 1, ids.size());  // contiguous 0..K-1
  EXPECT_EQ(r.graph.num_vertices(), ids.size());
  EXPECT_LE(r.graph.num_vertices(), 4u);
  EXPECT_TRUE(r.graph.has_edge(static_cast<std::uint32_t>(r.clusters.at("main")),
                               static_cast<std::uint32_t>(r.clusters.at("helper"))));
  EXPECT_EQ(r.graph, extract_fcg(listing).graph);
}

TEST(ExtractFcg, BadBandingThrows) {
  ExtractConfig cfg;
  cfg.bands = 5;
  EXPECT_THROW(extract_fcg("FUNC a\nENDF\n", cfg), Error);
}
