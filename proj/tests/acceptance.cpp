// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include <fcgosr/eval.hpp>

#include "support.hpp"

using namespace fcgosr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail = what;
      pass = false;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// ---- 1 -----------------------------------------------------------------------

Outcome isomorphism_suite() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  std::size_t graphs = 0;
  while (graphs < 1000) {
    const auto g = oracle::random_fcg(rng, 67);
    if (g.num_vertices() < 2) continue;
    ++graphs;
    const auto a = to_adjacency(g, 67);
    auto deg = oracle::matrix_degrees(a);
    std::sort(deg.begin(), deg.end());
    const auto sizes = oracle::matrix_component_sizes(a, g.num_vertices());
    const std::vector<TransformOutcome> outs{fcg_shift(a, 1 + rng.below(g.num_vertices() - 1)),
                                             fcg_random(a, rng.next())};
    for (const auto& out : outs) {
      o.require(out.permutation.has_value(), "missing permutation");
      if (!out.permutation) continue;
      o.require(check_isomorphic_under(a, out.tensor, *out.permutation), "isomorphism check failed");
      auto d2 = oracle::matrix_degrees(out.tensor);
      std::sort(d2.begin(), d2.end());
      o.require(d2 == deg, "degree sequence changed");
      const auto s2 = oracle::matrix_component_sizes(out.tensor, g.num_vertices());
      o.require(s2 == sizes, "component sizes changed");
      o.require(weak_components(from_adjacency(out.tensor)).size() == weak_components(g).size(),
                "component count changed");
    }
  }
  const double t = seconds_since(t0);
  o.require(t < 10.0, "runtime " + fmt(t) + " s");
  if (o.pass) o.detail = std::to_string(graphs) + " graphs x 2 transforms in " + fmt(t, 3) + " s";
  return o;
}

// ---- 2 -----------------------------------------------------------------------

Outcome gradient_checks() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::map<std::string, std::size_t> coverage;
  for (std::uint64_t c = 0; c < 10; ++c) {
    Rng rng(derive_seed(202, c));
    const std::size_t side = 3 + rng.below(3), batch = 4 + rng.below(4);
    const std::size_t in = side * side, hidden = 4 + rng.below(8), rep = 2 + rng.below(3);
    // at least one repeated label so the triplet loss has an anchor-positive pair
    const std::size_t classes = std::min<std::size_t>(2 + rng.below(3), batch - 1);
    const double rate = rng.uniform(0.1, 0.5);
    nn::Tensor x({batch, side, side});
    for (auto& v : x.values) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    std::vector<int> labels(batch);
    for (std::size_t n = 0; n < batch; ++n) labels[n] = static_cast<int>(n % classes);
    const std::uint64_t mask_seed = rng.next();

    // encoder -> decoder for the reconstruction loss
    nn::Network ae({nn::Flatten{}, nn::Dense::glorot(in, hidden, rng), nn::Relu{}, nn::Dropout{rate},
                    nn::Dense::glorot(hidden, rep, rng), nn::Dense::glorot(rep, hidden, rng), nn::Relu{},
                    nn::Dense::glorot(hidden, in, rng), nn::Sigmoid{}});
    const nn::Tensor target({batch, in}, x.values);
    // encoder -> head for cross entropy; encoder alone for the triplet loss
    nn::Network clf({nn::Flatten{}, nn::Dense::glorot(in, hidden, rng), nn::Relu{}, nn::Dropout{rate},
                     nn::Dense::glorot(hidden, rep, rng), nn::Dense::glorot(rep, classes, rng)});
    nn::Network enc({nn::Flatten{}, nn::Dense::glorot(in, hidden, rng), nn::Relu{}, nn::Dropout{rate},
                     nn::Dense::glorot(hidden, rep, rng)});
    for (auto* net : {&ae, &clf, &enc}) oracle::jitter_biases(*net, rng);

    const std::vector<std::pair<std::string, std::function<double()>>> checks{
        {"dtae",
         [&] {
           return nn::grad_check(ae, [&](const nn::Tensor& y) { return nn::dtae_view_loss(target, y); }, x,
                                 nn::Mode::train, mask_seed)
               .max_relative_error;
         }},
        {"cross_entropy",
         [&] {
           return nn::grad_check(clf, [&](const nn::Tensor& y) { return nn::cross_entropy_loss(y, labels); }, x,
                                 nn::Mode::train, mask_seed)
               .max_relative_error;
         }},
        {"triplet",
         [&] {
           return nn::grad_check(enc, [&](const nn::Tensor& y) { return nn::triplet_loss(y, labels, 0.5); }, x,
                                 nn::Mode::train, mask_seed)
               .max_relative_error;
         }},
    };
    for (const auto& [name, run] : checks) {
      const double err = run();
      worst = std::max(worst, err);
      o.require(err < 1e-4, name + " config " + std::to_string(c) + " error " + fmt(err));
      ++coverage[name];
    }
    for (const auto* net : {&ae, &clf, &enc})
      for (const auto& l : net->layers()) ++coverage[nn::layer_kind(l)];
  }
  for (const char* kind : {"dense", "relu", "dropout", "flatten", "sigmoid", "dtae", "cross_entropy", "triplet"})
    o.require(coverage[kind] >= 10, std::string(kind) + " covered by fewer than 10 configurations");
  const double t = seconds_since(t0);
  o.require(t < 60.0, "runtime " + fmt(t) + " s");
  if (o.pass) o.detail = "max relative error " + fmt(worst, 3) + " over 30 checks in " + fmt(t, 3) + " s";
  return o;
}

// ---- 3 -----------------------------------------------------------------------

Outcome osr_oracle() {
  Outcome o;
  Rng rng(303);
  std::size_t decisions = 0;
  for (int set = 0; set < 100; ++set) {
    const std::size_t n = 1 + rng.below(100), d = 1 + rng.below(6);
    const std::size_t classes = 1 + rng.below(std::min<std::size_t>(n, 6));
    std::vector<std::vector<double>> z;
    std::vector<int> labels;
    RepresentationSet reps;
    for (std::size_t i = 0; i < n; ++i) {
      const int label = i < classes ? static_cast<int>(i) : static_cast<int>(rng.below(classes));
      std::vector<double> v(d);
      for (auto& x : v) x = 2.5 * label + rng.normal();
      reps.push_back({v, label, ""});
      z.push_back(std::move(v));
      labels.push_back(label);
    }
    const double thr = set % 2 ? 3.0 : rng.uniform(0.5, 5.0);
    const auto model = fit_class_stats(reps, {set % 2 ? ThresholdMode::statistical : ThresholdMode::manual, thr});
    const oracle::BruteOsr brute(z, labels, thr);
    o.require(model.stats().size() == brute.classes.size(), "class count differs");
    for (std::size_t c = 0; c < brute.classes.size() && o.pass; ++c) {
      const auto& a = model.stats()[c];
      const auto& b = brute.classes[c];
      for (std::size_t k = 0; k < d; ++k) o.require(std::abs(a.prototype[k] - b.mu[k]) <= 1e-9, "prototype differs");
      o.require(std::abs(a.mean_distance - b.m) <= 1e-9, "mean distance differs");
      o.require(std::abs(a.std_distance - b.s) <= 1e-9, "std distance differs");
    }
    for (int q = 0; q < 100; ++q) {
      std::vector<double> v(d);
      for (auto& x : v) x = 5.0 * rng.normal();
      o.require(std::abs(model.outlier_score(v) - brute.score(v)) <= 1e-9, "outlier score differs");
      o.require(model.classify(v) == brute.classify(v), "classification differs");
      ++decisions;
    }
  }

  const auto hand = fit_class_stats(RepresentationSet{{{0, 0}, 0, ""}, {{1, 0}, 0, ""}, {{5, 0}, 0, ""}});
  const auto& s = hand.stats()[0];
  o.require(s.prototype == std::vector<double>{2, 0}, "hand prototype");
  o.require(std::abs(s.mean_distance - 2.0) < 1e-12, "hand m");
  o.require(std::abs(s.std_distance - 0.816497) < 1e-6, "hand s");
  const std::vector<double> near{6, 0}, far{10, 0};
  o.require(std::abs(hand.outlier_score(near) - 2.449490) < 1e-6, "hand score (6,0)");
  o.require(std::abs(hand.outlier_score(far) - 7.348469) < 1e-6, "hand score (10,0)");
  o.require(hand.classify(near) == 0, "(6,0) should be known");
  o.require(hand.classify(far) == kUnknownLabel, "(10,0) should be unknown");
  if (o.pass)
    o.detail = "100 sets, " + std::to_string(decisions) + " decisions agree; hand case 2.449490 known, 7.348469 unknown";
  return o;
}

// ---- 4 -----------------------------------------------------------------------

Outcome auc_oracle() {
  Outcome o;
  Rng rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> scores(n);
    std::vector<bool> unknown(n);
    for (std::size_t i = 0; i < n; ++i) {
      unknown[i] = rng.bernoulli(0.3);
      scores[i] = trial % 2 ? rng.normal() + (unknown[i] ? 0.7 : 0.0) : std::floor(4.0 * rng.uniform());
    }
    unknown[0] = true;
    unknown[n - 1] = false;
    worst = std::max(worst, std::abs(auc_at_fpr(scores, unknown, 1.0) - oracle::pairwise_auc(scores, unknown)));
  }
  o.require(worst <= 1e-12, "pairwise oracle mismatch " + fmt(worst));
  const std::vector<double> perfect{0.9, 0.8, 0.2, 0.1};
  const std::vector<bool> truth{true, true, false, false};
  o.require(auc_at_fpr(perfect, truth, 0.1) == 0.1, "perfect separator auc_at_10 != 0.1");
  o.require(auc_at_fpr(perfect, truth, 1.0) == 1.0, "perfect separator auc_full != 1");
  const std::vector<double> chance(50, 0.42);
  std::vector<bool> mixed(50);
  for (std::size_t i = 0; i < 50; ++i) mixed[i] = i % 5 == 0;
  o.require(auc_at_fpr(chance, mixed, 1.0) == 0.5, "chance scores != 0.5");
  if (o.pass) o.detail = "500 instances, max |diff| " + fmt(worst, 3) + "; auc_at_10 perfect = 0.1; chance = 0.5";
  return o;
}

// ---- 5 -----------------------------------------------------------------------

Outcome dtae_values() {
  Outcome o;
  const nn::Tensor x({1, 2, 2}, std::vector<double>{0, 1, 0, 0});
  const nn::Tensor zero({1, 2, 2});
  const double one = nn::dtae_loss(x, std::vector<nn::Tensor>{zero});
  const double two = nn::dtae_loss(x, std::vector<nn::Tensor>{zero, zero});
  const double ident = nn::dtae_loss(x, std::vector<nn::Tensor>{x});
  o.require(std::abs(one - 0.5) < 1e-12, "one view " + fmt(one));
  o.require(std::abs(two - 1.0) < 1e-12, "two views " + fmt(two));
  o.require(ident == 0.0, "identity " + fmt(ident));
  if (o.pass) o.detail = "0.500000 / 1.000000 / 0";
  return o;
}

// ---- 6 -----------------------------------------------------------------------

Outcome empirical_rule() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t train = 10000, draws = 2000000;
  Rng train_rng(606);
  RepresentationSet reps;
  std::vector<std::vector<double>> z;
  for (std::size_t i = 0; i < train; ++i) {
    z.push_back({train_rng.normal()});
    reps.push_back({z.back(), 0, ""});
  }
  const auto model = fit_class_stats(reps);

  // library: classify fresh same-class test points
  Rng test_rng(607);
  std::size_t flagged = 0;
  std::vector<double> point(1);
  for (std::size_t i = 0; i < draws; ++i) {
    point[0] = test_rng.normal();
    flagged += model.classify(point) == kUnknownLabel;
  }
  const double library = static_cast<double>(flagged) / static_cast<double>(draws);

  // oracle: P(|d - m| / s > 3) estimated from independent draws with the
  // statistics recomputed by the brute-force reference
  const oracle::BruteOsr brute(z, std::vector<int>(train, 0), 3.0);
  const auto& c = brute.classes[0];
  Rng oracle_rng(608);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    const double d = std::abs(oracle_rng.normal() - c.mu[0]);
    hits += std::abs(d - c.m) / c.s > 3.0;
  }
  const double oracle = static_cast<double>(hits) / static_cast<double>(draws);
  const double diff_pp = 100.0 * std::abs(library - oracle);
  o.require(diff_pp <= 0.3, "difference " + fmt(diff_pp) + " pp");
  const double t = seconds_since(t0);
  o.require(t < 30.0, "runtime " + fmt(t) + " s");
  if (o.pass)
    o.detail = "flagged " + fmt(100.0 * library, 4) + "% vs oracle " + fmt(100.0 * oracle, 4) + "% (" +
               fmt(diff_pp, 3) + " pp) in " + fmt(t, 3) + " s";
  return o;
}

// ---- 7 -----------------------------------------------------------------------

nlohmann::json reference_config() {
  std::ifstream in(FCGOSR_REFERENCE_CONFIG);
  if (!in) throw Error("cannot open " + std::string(FCGOSR_REFERENCE_CONFIG));
  return nlohmann::json::parse(in);
}

Outcome synth_fidelity() {
  Outcome o;
  const auto cfg = experiment_config_from_json(reference_config());
  const auto stats = graph_stats(synth_corpus(*cfg.synth));
  o.require(stats.degree_per_vertex_pct >= 4.0 && stats.degree_per_vertex_pct <= 12.0,
            "degree_per_vertex_pct " + fmt(stats.degree_per_vertex_pct));
  o.require(stats.mean_components >= 8.0, "mean_components " + fmt(stats.mean_components));
  o.detail = "degree_per_vertex_pct " + fmt(stats.degree_per_vertex_pct, 4) + ", mean_components " +
             fmt(stats.mean_components, 4) + (o.pass ? "" : " (" + o.detail + ")");
  return o;
}

// ---- 8 -----------------------------------------------------------------------

Outcome end_to_end_trend() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = experiment_config_from_json(reference_config());
  const auto result = run_experiment(cfg);
  const double t = seconds_since(t0);

  std::size_t failed = 0;
  for (const auto& r : result.runs) failed += !r.metrics;
  o.require(failed == 0, std::to_string(failed) + " run cells failed");

  auto mean = [&](const std::string& pre, const std::string& loss, const std::string& thr, const std::string& metric) {
    return result.pooled_metric(method_name(pre, loss, thr), metric).mean;
  };

  std::cout << "  reference grid, pooled means over " << cfg.groups * cfg.runs_per_group << " runs:\n";
  std::cout << "  method                                f1_known  f1_unknown  f1_overall  auc_full  auc_at_10\n";
  for (const auto& [method, metrics] : result.pooled) {
    std::printf("  %-36s  %8.4f  %10.4f  %10.4f  %8.4f  %9.5f\n", method.c_str(), metrics.at("f1_known").mean,
                metrics.at("f1_unknown").mean, metrics.at("f1_overall").mean, metrics.at("auc_full").mean,
                metrics.at("auc_at_10").mean);
  }

  std::vector<std::string> violations;
  for (const auto& loss : {"ce", "triplet"}) {
    for (const auto& thr : {"statistical", "manual"}) {
      const double base_unknown = mean("none", loss, thr, "f1_unknown");
      const double base_overall = mean("none", loss, thr, "f1_overall");
      for (const auto& pre : {"fcg_shift", "fcg_random"}) {
        const double v = mean(pre, loss, thr, "f1_unknown");
        if (v < base_unknown)
          violations.push_back(std::string(pre) + "+" + loss + "+" + thr + " f1_unknown " + fmt(v, 4) + " < baseline " +
                               fmt(base_unknown, 4));
      }
      const double sub = mean("subgraph_sampling", loss, thr, "f1_overall");
      if (sub > base_overall)
        violations.push_back(std::string("subgraph_sampling+") + loss + "+" + thr + " f1_overall " + fmt(sub, 4) +
                             " > baseline " + fmt(base_overall, 4));
    }
  }
  double worst_gap = 0.0;
  for (const auto& pre : cfg.pretrain_grid)
    for (const auto& loss : cfg.loss_grid) {
      const double gap =
          std::abs(mean(pre, loss, "statistical", "f1_overall") - mean(pre, loss, "manual", "f1_overall"));
      std::printf("  |statistical - manual| f1_overall  %-22s %.4f\n", (pre + "+" + loss).c_str(), gap);
      worst_gap = std::max(worst_gap, gap);
      if (gap >= 0.05) violations.push_back(pre + "+" + loss + " threshold gap " + fmt(gap, 4));
    }
  for (const auto& v : violations) std::cout << "  violation: " << v << '\n';
  o.require(violations.empty(), std::to_string(violations.size()) + " trend violations");
  o.require(t < 900.0, "runtime " + fmt(t) + " s");
  o.detail = (o.pass ? std::string() : o.detail + "; ") + "max threshold gap " + fmt(worst_gap, 3) + ", runtime " +
             fmt(t, 4) + " s";
  return o;
}

// ---- 9 -----------------------------------------------------------------------

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int cli(const std::string& args) {
  const std::string cmd = std::string("\"") + FCGOSR_CLI + "\" " + args + " 2>/dev/null";
  return std::system(cmd.c_str());
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "fcgosr_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);

  std::ofstream(root / "sample.asm") << "FUNC main\n push\n mov\n call helper\n call util\n ret\nENDF\n"
                                        "FUNC helper\n push\n mov\n add\n pop\n ret\nENDF\n"
                                        "FUNC util\n push\n mov\n add\n pop\n ret\nENDF\n"
                                        "FUNC other\n xor\n jmp\n call main\nENDF\n";
  std::ofstream(root / "synth.json") << R"({"classes": 3, "samples_per_class": 6, "seed": 7})";
  std::ofstream(root / "train.json")
      << R"({"arch": {"hidden": 16, "rep_dim": 3}, "pretrain": {"epochs": 2, "batch_size": 8, "seed": 5},
            "finetune": {"epochs": 2, "batch_size": 8, "seed": 6}})";
  std::ofstream(root / "run.json") << R"({
    "corpus": {"synth": {"classes": 3, "samples_per_class": 8, "seed": 2}},
    "arch": {"hidden": 8, "rep_dim": 3},
    "pretrain": {"epochs": 1, "batch_size": 8},
    "finetune": {"epochs": 2, "batch_size": 8},
    "grid": {"pretrain": ["none", "fcg_shift"], "loss": ["ce", "triplet"], "threshold": ["statistical", "manual"]},
    "splits": {"known_count": 2, "groups": 1, "runs_per_group": 2},
    "seed": 11, "write_artifacts": true})";

  const std::string r = "\"" + root.string() + "/";
  auto outputs = [&](int rep) {
    const std::string tag = std::to_string(rep);
    std::map<std::string, std::string> files;
    std::vector<std::pair<std::string, std::string>> commands{
        {"extract", "extract --in " + r + "sample.asm\" --label demo --out " + r + "g" + tag + ".json\""},
        {"synth", "synth --config " + r + "synth.json\" --out " + r + "c" + tag + ".jsonl\""},
        {"pretrain", "pretrain --corpus " + r + "c" + tag + ".jsonl\" --config " + r +
                         "train.json\" --kinds fcg_random,node_dropping --out " + r + "p" + tag + ".json\""},
        {"finetune", "finetune --corpus " + r + "c" + tag + ".jsonl\" --model " + r + "p" + tag + ".json\" --config " +
                         r + "train.json\" --loss triplet --out " + r + "f" + tag + ".json\""},
        {"run", "run --config " + r + "run.json\" --out " + r + "run" + tag + "\""},
    };
    for (const auto& [name, args] : commands) o.require(cli(args) == 0, name + " exited with an error");
    for (const char* f : {"g", "c", "p", "f"}) {
      const auto ext = std::string(f) == "c" ? ".jsonl" : ".json";
      files[std::string(f) + ext] = file_bytes(root / (std::string(f) + tag + ext));
    }
    for (const auto& e : fs::directory_iterator(root / ("run" + tag)))
      files["run/" + e.path().filename().string()] = file_bytes(e.path());
    return files;
  };

  const auto first = outputs(1);
  const auto second = outputs(2);
  o.require(first.size() == second.size(), "different output file sets");
  std::size_t bytes = 0;
  for (const auto& [name, content] : first) {
    const auto it = second.find(name);
    o.require(it != second.end() && it->second == content, name + " differs between runs");
    o.require(!content.empty(), name + " is empty");
    bytes += content.size();
  }
  if (o.pass)
    o.detail = "extract, synth, pretrain, finetune, run: " + std::to_string(first.size()) + " files, " +
               std::to_string(bytes) + " bytes identical";
  fs::remove_all(root);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"isomorphism suite", isomorphism_suite},
      {"gradient checks", gradient_checks},
      {"OSR oracle equivalence", osr_oracle},
      {"AUC oracle", auc_oracle},
      {"DTAE loss values", dtae_values},
      {"empirical rule", empirical_rule},
      {"synthetic corpus fidelity", synth_fidelity},
      {"end-to-end trend", end_to_end_trend},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += !o.pass;
    std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
