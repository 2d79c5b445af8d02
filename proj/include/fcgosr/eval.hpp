#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "graph.hpp"
#include "osr.hpp"
#include "pipeline.hpp"
#include "transforms.hpp"

namespace fcgosr {

// ---- open-set splits -------------------------------------------------------

struct SplitSpec {
  std::vector<int> known;    // sorted
  std::vector<int> unknown;  // sorted
  std::size_t group = 0;
  std::size_t run = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

/// `groups` distinct random known-class sets, each repeated `runs_per_group`
/// times with its own run seed.
inline std::vector<SplitSpec> make_splits(std::vector<int> class_ids, std::size_t known_count, std::size_t groups,
                                          std::size_t runs_per_group, std::uint64_t seed) {
  std::sort(class_ids.begin(), class_ids.end());
  class_ids.erase(std::unique(class_ids.begin(), class_ids.end()), class_ids.end());
  if (known_count == 0 || known_count >= class_ids.size())
    throw Error("known class count must lie in 1.." + std::to_string(class_ids.size() - 1));

  std::vector<std::vector<int>> chosen;
  for (std::size_t g = 0; g < groups; ++g) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < 100 && !placed; ++attempt) {
      auto pool = class_ids;
      Rng rng(derive_seed(seed, 0x5917, g, attempt));
      rng.shuffle(pool.begin(), pool.end());
      std::vector<int> known(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(known_count));
      std::sort(known.begin(), known.end());
      if (std::find(chosen.begin(), chosen.end(), known) != chosen.end()) continue;
      chosen.push_back(std::move(known));
      placed = true;
    }
    if (!placed) throw Error("could not draw " + std::to_string(groups) + " distinct known-class groups");
  }

  std::vector<SplitSpec> splits;
  for (std::size_t g = 0; g < groups; ++g) {
    std::vector<int> unknown;
    std::set_difference(class_ids.begin(), class_ids.end(), chosen[g].begin(), chosen[g].end(),
                        std::back_inserter(unknown));
    for (std::size_t r = 0; r < runs_per_group; ++r)
      splits.push_back({chosen[g], unknown, g, r, derive_seed(seed, 0x7247, g, r)});
  }
  return splits;
}

// ---- metrics -----------------------------------------------------------------

/// Area under the ROC curve (unknown = positive, higher score = more
/// unknown) restricted to FPR in [0, cap], not normalized. Tied scores form
/// one ROC segment.
inline double auc_at_fpr(std::span<const double> scores, const std::vector<bool>& is_unknown, double cap = 1.0) {
  if (scores.size() != is_unknown.size()) throw Error("auc: score and truth lengths differ");
  if (!(cap > 0.0 && cap <= 1.0)) throw Error("auc: FPR cap must lie in (0, 1]");
  const auto positives = static_cast<double>(std::count(is_unknown.begin(), is_unknown.end(), true));
  const auto negatives = static_cast<double>(is_unknown.size()) - positives;
  if (positives == 0 || negatives == 0) throw Error("auc needs both known and unknown samples");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double area = 0.0, tp = 0.0, fp = 0.0, prev_fpr = 0.0, prev_tpr = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (is_unknown[order[j]] ? tp : fp) += 1.0;
      ++j;
    }
    i = j;
    const double fpr = fp / negatives, tpr = tp / positives;
    if (fpr <= cap) {
      area += (fpr - prev_fpr) * (prev_tpr + tpr) / 2.0;
    } else {
      const double tpr_at_cap = prev_tpr + (tpr - prev_tpr) * (cap - prev_fpr) / (fpr - prev_fpr);
      area += (cap - prev_fpr) * (prev_tpr + tpr_at_cap) / 2.0;
      return area;
    }
    prev_fpr = fpr;
    prev_tpr = tpr;
  }
  return area;
}

struct F1Report {
  std::vector<int> labels;                        // known classes then kUnknownLabel
  std::vector<double> per_class_f1;               // aligned with labels
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double f1_known = 0.0;
  double f1_unknown = 0.0;
  double f1_overall = 0.0;
};

/// Per-class F1 with macro averages. Labels outside `known` count as unknown.
inline F1Report f1_report(std::span<const int> predictions, std::span<const int> truths, std::span<const int> known) {
  if (predictions.size() != truths.size()) throw Error("f1: prediction and truth lengths differ");
  F1Report r;
  r.labels.assign(known.begin(), known.end());
  r.labels.push_back(kUnknownLabel);
  const std::size_t k = r.labels.size();
  auto index_of = [&](int label) {
    for (std::size_t i = 0; i + 1 < k; ++i)
      if (r.labels[i] == label) return i;
    return k - 1;
  };
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < truths.size(); ++i) ++r.confusion[index_of(truths[i])][index_of(predictions[i])];

  for (std::size_t c = 0; c < k; ++c) {
    double tp = static_cast<double>(r.confusion[c][c]), pred = 0.0, actual = 0.0;
    for (std::size_t o = 0; o < k; ++o) {
      pred += static_cast<double>(r.confusion[o][c]);
      actual += static_cast<double>(r.confusion[c][o]);
    }
    const double precision = pred > 0 ? tp / pred : 0.0;
    const double recall = actual > 0 ? tp / actual : 0.0;
    r.per_class_f1.push_back(precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0);
  }
  const double known_sum = std::accumulate(r.per_class_f1.begin(), r.per_class_f1.end() - 1, 0.0);
  r.f1_known = k > 1 ? known_sum / static_cast<double>(k - 1) : 0.0;
  r.f1_unknown = r.per_class_f1.back();
  r.f1_overall = (known_sum + r.f1_unknown) / static_cast<double>(k);
  return r;
}

/// Known/unknown score counts over `bins` equal-width bins spanning
/// [0, max score]; the last bin is closed.
struct ScoreHistogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> known;
  std::vector<std::size_t> unknown;
};

inline ScoreHistogram score_histogram(std::span<const double> scores, const std::vector<bool>& is_unknown,
                                      std::size_t bins = 20) {
  if (scores.size() != is_unknown.size()) throw Error("histogram: score and truth lengths differ");
  if (bins == 0) throw Error("histogram needs at least one bin");
  double top = 0.0;
  for (double s : scores)
    if (std::isfinite(s)) top = std::max(top, s);
  if (top == 0.0) top = 1.0;
  ScoreHistogram h;
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(top * static_cast<double>(b) / static_cast<double>(bins));
  h.known.assign(bins, 0);
  h.unknown.assign(bins, 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double x = std::isfinite(scores[i]) ? scores[i] : top;
    const auto b = std::min(bins - 1, static_cast<std::size_t>(x / top * static_cast<double>(bins)));
    ++(is_unknown[i] ? h.unknown : h.known)[b];
  }
  return h;
}

struct MetricsReport {
  double auc_full = 0.0;
  double auc_at_10 = 0.0;
  F1Report f1;
};

inline nlohmann::json to_json(const MetricsReport& m) {
  return {{"auc_full", m.auc_full},     {"auc_at_10", m.auc_at_10},   {"f1_known", m.f1.f1_known},
          {"f1_unknown", m.f1.f1_unknown}, {"f1_overall", m.f1.f1_overall}, {"labels", m.f1.labels},
          {"per_class_f1", m.f1.per_class_f1}, {"confusion", m.f1.confusion}};
}

// ---- synthetic corpus --------------------------------------------------------

struct SynthConfig {
  std::size_t classes = 9;
  std::size_t templates_per_class = 3;
  std::size_t template_min_vertices = 2;
  std::size_t template_max_vertices = 4;
  double extra_edge_prob = 0.6;  // per template vertex, beyond the spanning tree
  std::size_t components_min = 12;
  std::size_t components_max = 18;
  std::size_t vocabulary = 60;
  double label_focus = 0.8;  // chance a template label comes from its class's id window
  double label_noise = 0.05;
  std::size_t samples_per_class = 30;
  std::size_t size = 67;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"classes", c.classes},
          {"templates_per_class", c.templates_per_class},
          {"template_min_vertices", c.template_min_vertices},
          {"template_max_vertices", c.template_max_vertices},
          {"extra_edge_prob", c.extra_edge_prob},
          {"components_min", c.components_min},
          {"components_max", c.components_max},
          {"vocabulary", c.vocabulary},
          {"label_focus", c.label_focus},
          {"label_noise", c.label_noise},
          {"samples_per_class", c.samples_per_class},
          {"size", c.size},
          {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.classes = j.value("classes", c.classes);
  c.templates_per_class = j.value("templates_per_class", c.templates_per_class);
  c.template_min_vertices = j.value("template_min_vertices", c.template_min_vertices);
  c.template_max_vertices = j.value("template_max_vertices", c.template_max_vertices);
  c.extra_edge_prob = j.value("extra_edge_prob", c.extra_edge_prob);
  c.components_min = j.value("components_min", c.components_min);
  c.components_max = j.value("components_max", c.components_max);
  c.vocabulary = j.value("vocabulary", c.vocabulary);
  c.label_focus = j.value("label_focus", c.label_focus);
  c.label_noise = j.value("label_noise", c.label_noise);
  c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
  c.size = j.value("size", c.size);
  c.seed = j.value("seed", c.seed);
  return c;
}

/// A small connected digraph with cluster-id labels.
struct ComponentTemplate {
  std::vector<std::int64_t> cluster_ids;
  std::vector<Edge> edges;
};

inline std::string class_name(std::size_t k) { return "class_" + std::to_string(k); }

/// Per-class template libraries.
inline std::vector<std::vector<ComponentTemplate>> synth_templates(const SynthConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0x7e3b));
  const std::size_t window = std::max<std::size_t>(1, cfg.vocabulary / std::max<std::size_t>(1, cfg.classes));
  std::vector<std::vector<ComponentTemplate>> library(cfg.classes);
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    for (std::size_t t = 0; t < cfg.templates_per_class; ++t) {
      ComponentTemplate tpl;
      const auto n = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(cfg.template_min_vertices),
                                                          static_cast<std::int64_t>(cfg.template_max_vertices)));
      for (std::size_t v = 0; v < n; ++v) {
        const bool focused = rng.bernoulli(cfg.label_focus);
        const std::uint64_t id = focused ? (k * window + rng.below(window)) % cfg.vocabulary : rng.below(cfg.vocabulary);
        tpl.cluster_ids.push_back(static_cast<std::int64_t>(id));
      }
      // random spanning tree with random directions keeps the template connected
      for (std::size_t v = 1; v < n; ++v) {
        const auto u = static_cast<std::uint32_t>(rng.below(v));
        const auto w = static_cast<std::uint32_t>(v);
        tpl.edges.push_back(rng.bernoulli(0.5) ? Edge{u, w} : Edge{w, u});
      }
      for (std::size_t v = 0; v < n; ++v)
        if (rng.bernoulli(cfg.extra_edge_prob))
          tpl.edges.push_back({static_cast<std::uint32_t>(rng.below(n)), static_cast<std::uint32_t>(rng.below(n))});
      std::sort(tpl.edges.begin(), tpl.edges.end());
      tpl.edges.erase(std::unique(tpl.edges.begin(), tpl.edges.end()), tpl.edges.end());
      library[k].push_back(std::move(tpl));
    }
  }
  return library;
}

/// Each sample is the disjoint union of templates drawn from its class
/// library, with per-vertex label noise. Vertices are laid out in ascending
/// cluster-id order (stable), as an extractor would number them.
inline std::vector<Fcg> synth_corpus(const SynthConfig& cfg) {
  if (cfg.classes == 0 || cfg.templates_per_class == 0) throw Error("synth: need at least one class and template");
  if (cfg.template_min_vertices == 0 || cfg.template_min_vertices > cfg.template_max_vertices)
    throw Error("synth: invalid template size range");
  if (cfg.template_max_vertices > cfg.size)
    throw Error("synth: template of " + std::to_string(cfg.template_max_vertices) + " vertices exceeds padded size " +
                std::to_string(cfg.size));
  if (cfg.components_min == 0 || cfg.components_min > cfg.components_max)
    throw Error("synth: invalid component count range");
  for (double p : {cfg.extra_edge_prob, cfg.label_focus, cfg.label_noise})
    if (!(p >= 0.0 && p <= 1.0)) throw Error("synth: probabilities must lie in [0, 1]");
  if (cfg.vocabulary == 0) throw Error("synth: vocabulary must be non-empty");

  const auto library = synth_templates(cfg);
  std::vector<Fcg> corpus;
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    for (std::size_t s = 0; s < cfg.samples_per_class; ++s) {
      Rng rng(derive_seed(cfg.seed, 0x5a3e, k, s));
      const auto count = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(cfg.components_min),
                                                              static_cast<std::int64_t>(cfg.components_max)));
      std::vector<std::int64_t> ids;
      std::vector<Edge> edges;
      for (std::size_t c = 0; c < count; ++c) {
        const auto& tpl = library[k][rng.below(library[k].size())];
        if (ids.size() + tpl.cluster_ids.size() > cfg.size) break;
        const auto offset = static_cast<std::uint32_t>(ids.size());
        for (auto id : tpl.cluster_ids)
          ids.push_back(rng.bernoulli(cfg.label_noise) ? static_cast<std::int64_t>(rng.below(cfg.vocabulary)) : id);
        for (const auto& e : tpl.edges) edges.push_back({e.from + offset, e.to + offset});
      }
      std::vector<std::uint32_t> order(ids.size());
      std::iota(order.begin(), order.end(), 0U);
      std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return ids[a] < ids[b]; });
      std::vector<std::uint32_t> position(ids.size());
      std::vector<std::int64_t> sorted_ids(ids.size());
      for (std::size_t i = 0; i < order.size(); ++i) {
        position[order[i]] = static_cast<std::uint32_t>(i);
        sorted_ids[i] = ids[order[i]];
      }
      for (auto& e : edges) e = {position[e.from], position[e.to]};
      corpus.emplace_back(ids.size(), std::move(sorted_ids), std::move(edges), class_name(k));
    }
  }
  return corpus;
}

// ---- experiment runner -------------------------------------------------------

struct ExperimentConfig {
  std::optional<SynthConfig> synth;
  std::string corpus_file;
  std::size_t size = 67;
  PadMode pad_mode = PadMode::strict;
  ArchConfig arch;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  std::vector<std::string> pretrain_grid{"none", "node_dropping", "subgraph_sampling", "fcg_shift", "fcg_random"};
  std::vector<std::string> loss_grid{"ce", "triplet"};
  std::vector<std::string> threshold_grid{"statistical", "manual"};
  std::size_t known_count = 6;
  std::size_t groups = 3;
  std::size_t runs_per_group = 10;
  double train_fraction = 0.7;
  double manual_percentile = 99.0;
  std::uint64_t seed = 0;
  std::string output_dir;
  bool write_artifacts = true;
  std::size_t jobs = 1;
};

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  try {
    ExperimentConfig c;
    if (j.contains("corpus")) {
      const auto& cj = j["corpus"];
      if (cj.contains("synth")) c.synth = synth_config_from_json(cj["synth"]);
      c.corpus_file = cj.value("file", std::string{});
    }
    if (!c.synth && c.corpus_file.empty()) throw Error("experiment config needs corpus.synth or corpus.file");
    c.size = j.value("size", c.synth ? c.synth->size : c.size);
    if (j.value("pad_mode", std::string("strict")) == "truncate") c.pad_mode = PadMode::truncate;
    c.arch = arch_from_json(j.value("arch", nlohmann::json::object()));
    c.arch.input_size = c.size;
    c.pretrain = pretrain_config_from_json(j.value("pretrain", nlohmann::json::object()));
    c.finetune = finetune_config_from_json(j.value("finetune", nlohmann::json::object()));
    if (j.contains("grid")) {
      const auto& g = j["grid"];
      c.pretrain_grid = g.value("pretrain", c.pretrain_grid);
      c.loss_grid = g.value("loss", c.loss_grid);
      c.threshold_grid = g.value("threshold", c.threshold_grid);
    }
    if (j.contains("splits")) {
      const auto& s = j["splits"];
      c.known_count = s.value("known_count", c.known_count);
      c.groups = s.value("groups", c.groups);
      c.runs_per_group = s.value("runs_per_group", c.runs_per_group);
      c.train_fraction = s.value("train_fraction", c.train_fraction);
    }
    c.manual_percentile = j.value("manual_percentile", c.manual_percentile);
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.write_artifacts = j.value("write_artifacts", c.write_artifacts);
    c.jobs = j.value("jobs", c.jobs);
    for (const auto& p : c.pretrain_grid)
      if (p != "none") transform_kind_from_string(p);
    for (const auto& l : c.loss_grid) finetune_loss_from_string(l);
    for (const auto& t : c.threshold_grid)
      if (t != "statistical" && t != "manual") throw Error("unknown threshold mode '" + t + "'");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid experiment config: ") + e.what());
  }
}

struct RunRecord {
  std::size_t group = 0;
  std::size_t run = 0;
  std::string method;  // <pretrain>+<loss>+<threshold>
  std::optional<MetricsReport> metrics;
  std::string error;
  double threshold_value = 0.0;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
  std::size_t n = 0;
};

inline MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  s.n = values.size();
  if (s.n == 0) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"auc_full", "auc_at_10", "f1_known", "f1_unknown", "f1_overall"};
  return names;
}

inline double metric_value(const MetricsReport& m, const std::string& name) {
  if (name == "auc_full") return m.auc_full;
  if (name == "auc_at_10") return m.auc_at_10;
  if (name == "f1_known") return m.f1.f1_known;
  if (name == "f1_unknown") return m.f1.f1_unknown;
  if (name == "f1_overall") return m.f1.f1_overall;
  throw Error("unknown metric '" + name + "'");
}

struct ExperimentResult {
  std::vector<RunRecord> runs;  // sorted by (group, run, method)
  // method -> metric -> summary, pooled over all runs
  std::map<std::string, std::map<std::string, MetricSummary>> pooled;
  // method -> group -> metric -> summary
  std::map<std::string, std::map<std::size_t, std::map<std::string, MetricSummary>>> per_group;

  const MetricSummary& pooled_metric(const std::string& method, const std::string& metric) const {
    return pooled.at(method).at(metric);
  }
};

inline std::string method_name(const std::string& pretrain, const std::string& loss, const std::string& threshold) {
  return pretrain + "+" + loss + "+" + threshold;
}

namespace detail {

struct SplitData {
  std::vector<LabeledTensor> train;
  std::vector<LabeledTensor> test;
  std::vector<int> test_truth;  // known index or kUnknownLabel
};

inline SplitData split_data(std::span<const LabeledTensor> all, const SplitSpec& split, double train_fraction) {
  SplitData d;
  std::map<int, int> known_index;
  for (std::size_t i = 0; i < split.known.size(); ++i) known_index[split.known[i]] = static_cast<int>(i);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < all.size(); ++i) by_class[all[i].label].push_back(i);
  // Every class is divided the same way; the training part of an unknown
  // class is never seen.
  for (auto& [cls, members] : by_class) {
    const auto it = known_index.find(cls);
    const bool known = it != known_index.end();
    Rng rng(derive_seed(split.seed, 0x3a1, static_cast<std::uint64_t>(cls)));
    rng.shuffle(members.begin(), members.end());
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(members.size())));
    n_train = std::min(std::max<std::size_t>(n_train, 1), members.size() > 1 ? members.size() - 1 : 1);
    for (std::size_t m = 0; m < members.size(); ++m) {
      LabeledTensor s = all[members[m]];
      s.label = known ? it->second : kUnknownLabel;
      if (m < n_train) {
        if (known) d.train.push_back(std::move(s));
      } else {
        d.test_truth.push_back(s.label);
        d.test.push_back(std::move(s));
      }
    }
  }
  return d;
}

inline std::string artifact_stem(const RunRecord& r) {
  std::string m = r.method;
  std::replace(m.begin(), m.end(), '+', '_');
  return "g" + std::to_string(r.group) + "r" + std::to_string(r.run) + "_" + m;
}

}  // namespace detail

struct LoadedCorpus {
  std::vector<LabeledTensor> samples;
  std::vector<std::string> class_names;  // index = class id
};

inline LoadedCorpus tensorize_corpus(std::span<const Fcg> graphs, std::size_t size, PadMode mode) {
  LoadedCorpus c;
  std::map<std::string, int> ids;
  for (const auto& g : graphs) ids.emplace(g.label(), 0);
  int next = 0;
  for (auto& [name, id] : ids) {
    id = next++;
    c.class_names.push_back(name);
  }
  for (std::size_t i = 0; i < graphs.size(); ++i)
    c.samples.push_back({to_adjacency(graphs[i], size, mode), ids.at(graphs[i].label()), "s" + std::to_string(i)});
  return c;
}

/// Runs every (split, method) cell. Pre-trained encoders are shared across
/// losses and trained encoders across thresholds within one split.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const std::function<void(const std::string&)>& log = {}) {
  std::vector<Fcg> graphs = cfg.synth ? synth_corpus(*cfg.synth) : read_corpus_file(cfg.corpus_file);
  const auto corpus = tensorize_corpus(graphs, cfg.size, cfg.pad_mode);
  std::vector<int> class_ids(corpus.class_names.size());
  std::iota(class_ids.begin(), class_ids.end(), 0);
  const auto splits = make_splits(class_ids, cfg.known_count, cfg.groups, cfg.runs_per_group, cfg.seed);

  ArchConfig arch = cfg.arch;
  arch.input_size = cfg.size;

  auto run_split = [&](const SplitSpec& split) {
    std::vector<RunRecord> records;
    const auto data = detail::split_data(corpus.samples, split, cfg.train_fraction);
    for (const auto& pre : cfg.pretrain_grid) {
      std::optional<TrainedModel> pretrained;
      std::string pre_error;
      if (pre != "none") {
        try {
          PretrainConfig pc = cfg.pretrain;
          pc.kinds = {transform_kind_from_string(pre)};
          pc.seed = derive_seed(split.seed, 0x9e, fnv1a64(pre));
          pretrained = pretrain_dtae(data.train, arch, pc);
        } catch (const std::exception& e) {
          pre_error = std::string("pretrain: ") + e.what();
        }
      }
      for (const auto& loss_name : cfg.loss_grid) {
        std::optional<TrainedModel> model;
        std::optional<OsrModel> osr;
        std::vector<double> test_scores;
        RepresentationSet test_reps;
        std::string error = pre_error;
        double manual_value = 0.0;
        if (error.empty()) {
          try {
            FinetuneConfig fc = cfg.finetune;
            fc.loss = finetune_loss_from_string(loss_name);
            fc.seed = derive_seed(split.seed, 0xf1, fnv1a64(loss_name));
            model = finetune(pretrained, data.train, arch, fc, split.known.size());
            const auto train_reps = embed(*model, data.train);
            test_reps = embed(*model, data.test);
            osr = fit_class_stats(train_reps);
            std::vector<double> train_scores;
            for (const auto& r : train_reps) train_scores.push_back(osr->outlier_score(r.z));
            manual_value = std::max(manual_threshold(train_scores, cfg.manual_percentile), 1e-12);
            for (const auto& r : test_reps) test_scores.push_back(osr->outlier_score(r.z));
          } catch (const std::exception& e) {
            error = e.what();
          }
        }
        for (const auto& thr : cfg.threshold_grid) {
          RunRecord rec{split.group, split.run, method_name(pre, loss_name, thr), std::nullopt, error, 0.0};
          if (error.empty()) {
            try {
              const Threshold t = thr == "manual" ? Threshold{ThresholdMode::manual, manual_value} : Threshold{};
              const OsrModel active = osr->with_threshold(t);
              rec.threshold_value = t.value;
              std::vector<int> preds;
              std::vector<bool> unknown_truth;
              for (std::size_t i = 0; i < test_reps.size(); ++i) {
                preds.push_back(active.classify(test_reps[i].z));
                unknown_truth.push_back(data.test_truth[i] == kUnknownLabel);
              }
              std::vector<int> known_idx(split.known.size());
              std::iota(known_idx.begin(), known_idx.end(), 0);
              MetricsReport m;
              m.auc_full = auc_at_fpr(test_scores, unknown_truth, 1.0);
              m.auc_at_10 = auc_at_fpr(test_scores, unknown_truth, 0.1);
              m.f1 = f1_report(preds, data.test_truth, known_idx);
              rec.metrics = std::move(m);

              if (cfg.write_artifacts && !cfg.output_dir.empty()) {
                const auto stem = detail::artifact_stem(rec);
                const std::filesystem::path dir(cfg.output_dir);
                std::ofstream(dir / ("confusion_" + stem + ".json"))
                    << nlohmann::json{{"labels", rec.metrics->f1.labels},
                                      {"confusion", rec.metrics->f1.confusion}}.dump()
                    << '\n';
                std::ofstream reps_out(dir / ("reps_" + stem + ".jsonl"));
                for (const auto& r : test_reps) reps_out << to_json(r).dump() << '\n';
                std::ofstream scores_out(dir / ("scores_" + stem + ".csv"));
                scores_out << "id,truth,is_unknown,score,predicted\n";
                for (std::size_t i = 0; i < test_reps.size(); ++i) {
                  std::ostringstream line;
                  line.precision(17);
                  line << test_reps[i].id << ',' << data.test_truth[i] << ',' << (unknown_truth[i] ? 1 : 0) << ','
                       << test_scores[i] << ',' << preds[i] << '\n';
                  scores_out << line.str();
                }
                const auto hist = score_histogram(test_scores, unknown_truth);
                std::ofstream hist_out(dir / ("hist_" + stem + ".csv"));
                hist_out.precision(17);
                hist_out << "lo,hi,known,unknown\n";
                for (std::size_t b = 0; b < hist.known.size(); ++b)
                  hist_out << hist.edges[b] << ',' << hist.edges[b + 1] << ',' << hist.known[b] << ','
                           << hist.unknown[b] << '\n';
              }
            } catch (const std::exception& e) {
              rec.error = e.what();
              rec.metrics.reset();
            }
          }
          records.push_back(std::move(rec));
        }
      }
    }
    if (log) log("group " + std::to_string(split.group) + " run " + std::to_string(split.run) + " done");
    return records;
  };

  if (!cfg.output_dir.empty()) std::filesystem::create_directories(cfg.output_dir);

  std::vector<std::vector<RunRecord>> per_split(splits.size());
  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, splits.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < splits.size(); i = next++) per_split[i] = run_split(splits[i]);
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  ExperimentResult result;
  for (auto& recs : per_split)
    for (auto& r : recs) result.runs.push_back(std::move(r));
  std::sort(result.runs.begin(), result.runs.end(), [](const RunRecord& a, const RunRecord& b) {
    return std::tie(a.group, a.run, a.method) < std::tie(b.group, b.run, b.method);
  });

  std::map<std::string, std::map<std::string, std::vector<double>>> pooled_values;
  std::map<std::string, std::map<std::size_t, std::map<std::string, std::vector<double>>>> group_values;
  for (const auto& r : result.runs) {
    if (!r.metrics) continue;
    for (const auto& name : metric_names()) {
      const double v = metric_value(*r.metrics, name);
      pooled_values[r.method][name].push_back(v);
      group_values[r.method][r.group][name].push_back(v);
    }
  }
  for (const auto& [method, metrics] : pooled_values)
    for (const auto& [name, values] : metrics) result.pooled[method][name] = summarize(values);
  for (const auto& [method, groups] : group_values)
    for (const auto& [group, metrics] : groups)
      for (const auto& [name, values] : metrics) result.per_group[method][group][name] = summarize(values);
  return result;
}

inline nlohmann::json to_json(const MetricSummary& s) { return {{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; }

inline nlohmann::json to_json(const ExperimentResult& r) {
  nlohmann::json pooled = nlohmann::json::object();
  for (const auto& [method, metrics] : r.pooled)
    for (const auto& [name, s] : metrics) pooled[method][name] = to_json(s);
  nlohmann::json per_group = nlohmann::json::object();
  for (const auto& [method, groups] : r.per_group)
    for (const auto& [group, metrics] : groups)
      for (const auto& [name, s] : metrics) per_group[method][std::to_string(group)][name] = to_json(s);
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs) {
    nlohmann::json j{{"group", run.group}, {"run", run.run}, {"method", run.method}};
    if (run.metrics) {
      j["metrics"] = to_json(*run.metrics);
      j["threshold"] = run.threshold_value;
    } else {
      j["error"] = run.error;
    }
    runs.push_back(std::move(j));
  }
  return {{"pooled", pooled}, {"per_group", per_group}, {"runs", runs}};
}

inline std::string runs_csv(const ExperimentResult& r) {
  std::ostringstream out;
  out.precision(17);
  out << "group,run,method,threshold";
  for (const auto& name : metric_names()) out << ',' << name;
  out << ",error\n";
  for (const auto& run : r.runs) {
    out << run.group << ',' << run.run << ',' << run.method << ',' << run.threshold_value;
    for (const auto& name : metric_names()) {
      out << ',';
      if (run.metrics) out << metric_value(*run.metrics, name);
    }
    std::string err = run.error;
    std::replace(err.begin(), err.end(), ',', ';');
    out << ',' << err << '\n';
  }
  return out.str();
}

inline void write_experiment_outputs(const ExperimentResult& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(std::filesystem::path(dir) / "report.json") << to_json(r).dump(2) << '\n';
  std::ofstream(std::filesystem::path(dir) / "runs.csv") << runs_csv(r);
}

}  // namespace fcgosr
