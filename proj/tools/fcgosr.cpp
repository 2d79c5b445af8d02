// fcgosr command-line front end.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <fcgosr/eval.hpp>
#include <fcgosr/fcg_extract.hpp>

using namespace fcgosr;
using nlohmann::json;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const std::string& path) {
  try {
    return json::parse(slurp(path));
  } catch (const json::parse_error& e) {
    throw Error(path + ": " + e.what());
  }
}

// "-" means stdout
void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

void emit_json(const std::string& path, const json& j) { emit(path, j.dump(2) + "\n"); }

std::vector<Representation> read_reps(const std::string& path) {
  std::istringstream in(slurp(path));
  std::vector<Representation> reps;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      reps.push_back(representation_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw ParseError(n, e.what());
    }
  }
  return reps;
}

std::string reps_jsonl(std::span<const Representation> reps) {
  std::string out;
  for (const auto& r : reps) out += to_json(r).dump() + "\n";
  return out;
}

// Labels become class indices in sorted-name order; the names travel with
// the model so later commands use the same mapping.
LoadedCorpus load_corpus(const std::string& path, std::size_t size) {
  const auto graphs = read_corpus_file(path);
  return tensorize_corpus(graphs, size, PadMode::strict);
}

std::vector<LabeledTensor> relabel(const LoadedCorpus& c, const std::vector<std::string>& names) {
  std::map<int, int> remap;
  for (std::size_t i = 0; i < c.class_names.size(); ++i) {
    const auto it = std::find(names.begin(), names.end(), c.class_names[i]);
    remap[static_cast<int>(i)] = it == names.end() ? kUnknownLabel : static_cast<int>(it - names.begin());
  }
  auto samples = c.samples;
  for (auto& s : samples) s.label = remap.at(s.label);
  return samples;
}

std::vector<std::string> model_class_names(const TrainedModel& m) {
  return m.configs.value("class_names", std::vector<std::string>{});
}

struct Global {
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set recognition over function call graphs"};
  app.require_subcommand(1);
  Global global;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Override the seed of a seeded command");
  app.add_option("--jobs", global.jobs, "Worker threads for `run`")->check(CLI::PositiveNumber);

  // extract
  std::string ex_in, ex_out, ex_label, ex_clusters;
  ExtractConfig ex_cfg;
  auto* extract = app.add_subcommand("extract", "Build an FCG from a disassembly listing");
  extract->add_option("--in", ex_in, "Listing file")->required();
  extract->add_option("--out", ex_out, "Output graph JSON (default stdout)");
  extract->add_option("--ngram", ex_cfg.ngram, "Opcode n-gram length");
  extract->add_option("--hashes", ex_cfg.num_hashes, "MinHash signature length");
  extract->add_option("--bands", ex_cfg.bands, "LSH bands");
  extract->add_option("--label", ex_label, "Class label stored in the graph");
  extract->add_option("--clusters", ex_clusters, "Also write the function -> cluster map here");

  // stats
  std::string st_in, st_out;
  auto* stats = app.add_subcommand("stats", "Corpus statistics");
  stats->add_option("--in", st_in, "Corpus JSONL")->required();
  stats->add_option("--out", st_out, "Report JSON (default stdout)");

  // transform
  std::string tr_in, tr_out, tr_kind = "fcg_random";
  std::size_t tr_size = 67;
  std::optional<std::size_t> tr_shift, tr_walk;
  double tr_drop = 0.2;
  auto* transform = app.add_subcommand("transform", "Apply one graph transformation to an FCG");
  transform->add_option("--in", tr_in, "Graph JSON")->required();
  transform->add_option("--out", tr_out, "Output JSON (default stdout)");
  transform->add_option("--kind", tr_kind, "identity|fcg_shift|fcg_random|node_dropping|subgraph_sampling");
  transform->add_option("--size", tr_size, "Padded size S");
  transform->add_option("--shift", tr_shift, "Shift amount for fcg_shift");
  transform->add_option("--drop-rate", tr_drop, "Drop rate for node_dropping");
  transform->add_option("--walk-len", tr_walk, "Walk length for subgraph_sampling");

  // synth
  std::string sy_config, sy_out;
  std::optional<std::size_t> sy_classes, sy_samples;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled corpus");
  synth->add_option("--config", sy_config, "SynthConfig JSON");
  synth->add_option("--classes", sy_classes, "Class count");
  synth->add_option("--samples-per-class", sy_samples, "Samples per class");
  synth->add_option("--out", sy_out, "Corpus JSONL (default stdout)");

  // split
  std::string sp_in, sp_out;
  std::size_t sp_classes = 0, sp_known = 6, sp_groups = 3, sp_runs = 10;
  auto* split = app.add_subcommand("split", "Draw open-set known/unknown class splits");
  split->add_option("--in", sp_in, "Corpus JSONL (class ids follow sorted label order)");
  split->add_option("--classes", sp_classes, "Class count when no corpus is given");
  split->add_option("--known", sp_known, "Known classes per split");
  split->add_option("--groups", sp_groups, "Distinct known-class groups");
  split->add_option("--runs", sp_runs, "Runs per group");
  split->add_option("--out", sp_out, "Output JSON (default stdout)");

  // pretrain
  std::string pt_corpus, pt_config, pt_out, pt_kinds;
  auto* pretrain = app.add_subcommand("pretrain", "DTAE pre-training");
  pretrain->add_option("--corpus", pt_corpus, "Training corpus JSONL")->required();
  pretrain->add_option("--config", pt_config, "JSON with optional `arch` and `pretrain` objects");
  pretrain->add_option("--kinds", pt_kinds, "Comma-separated transform kinds (overrides config)");
  pretrain->add_option("--out", pt_out, "Model JSON")->required();

  // finetune
  std::string ft_corpus, ft_config, ft_model, ft_out, ft_loss;
  auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune an encoder with ce or triplet loss");
  finetune_cmd->add_option("--corpus", ft_corpus, "Training corpus JSONL")->required();
  finetune_cmd->add_option("--model", ft_model, "Pre-trained model JSON (omit for no pre-training)");
  finetune_cmd->add_option("--config", ft_config, "JSON with optional `arch` and `finetune` objects");
  finetune_cmd->add_option("--loss", ft_loss, "ce|triplet")->check(CLI::IsMember({"ce", "triplet"}));
  finetune_cmd->add_option("--out", ft_out, "Model JSON")->required();

  // embed
  std::string em_model, em_in, em_out;
  auto* embed_cmd = app.add_subcommand("embed", "Encode a corpus into representations");
  embed_cmd->add_option("--model", em_model, "Model JSON")->required();
  embed_cmd->add_option("--in", em_in, "Corpus JSONL")->required();
  embed_cmd->add_option("--out", em_out, "Representations JSONL (default stdout)");

  // fit-osr
  std::string fo_in, fo_out, fo_mode = "statistical";
  double fo_value = 3.0, fo_percentile = 99.0;
  auto* fit = app.add_subcommand("fit-osr", "Fit per-class prototypes and distance statistics");
  fit->add_option("--in", fo_in, "Training representations JSONL")->required();
  fit->add_option("--threshold", fo_mode, "statistical|manual")->check(CLI::IsMember({"statistical", "manual"}));
  fit->add_option("--value", fo_value, "Statistical threshold");
  fit->add_option("--percentile", fo_percentile, "Training-score percentile for the manual threshold");
  fit->add_option("--out", fo_out, "OSR model JSON (default stdout)");

  // score
  std::string sc_model, sc_osr, sc_in, sc_out;
  auto* score = app.add_subcommand("score", "Outlier scores and open-set predictions");
  score->add_option("--osr", sc_osr, "OSR model JSON")->required();
  score->add_option("--model", sc_model, "Encoder model; when given, --in is a corpus instead of representations");
  score->add_option("--in", sc_in, "Representations JSONL (or corpus JSONL with --model)")->required();
  score->add_option("--out", sc_out, "Scores CSV (default stdout)");

  // run
  std::string rn_config, rn_out;
  auto* run = app.add_subcommand("run", "Run an open-set experiment grid");
  run->add_option("--config", rn_config, "Experiment config JSON")->required();
  run->add_option("--out", rn_out, "Output directory (overrides config)");

  // metrics
  std::string me_in, me_out;
  auto* metrics = app.add_subcommand("metrics", "Metrics from a scores CSV");
  metrics->add_option("--in", me_in, "CSV with truth, is_unknown, score, predicted columns")->required();
  metrics->add_option("--out", me_out, "Metrics JSON (default stdout)");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) global.seed = seed_value;
  const std::uint64_t seed = global.seed.value_or(0);

  try {
    if (*extract) {
      ex_cfg.seed = seed;
      auto result = extract_fcg(slurp(ex_in), ex_cfg);
      const auto& g = result.graph;
      Fcg labelled(g.num_vertices(), g.cluster_ids(), g.edges(), ex_label);
      emit_json(ex_out, to_json(labelled));
      if (!ex_clusters.empty()) emit_json(ex_clusters, json(result.clusters));
      if (result.diagnostics.unresolved_callees)
        std::cerr << "warning: " << result.diagnostics.unresolved_callees << " calls to undefined functions dropped\n";
    } else if (*stats) {
      const auto corpus = read_corpus_file(st_in);
      emit_json(st_out, to_json(graph_stats(corpus)));
    } else if (*transform) {
      const auto g = fcg_from_json(read_json(tr_in));
      TransformSpec spec;
      spec.kind = transform_kind_from_string(tr_kind);
      spec.shift_n = tr_shift;
      spec.drop_rate = tr_drop;
      spec.walk_len = tr_walk;
      spec.seed = seed;
      const auto a = to_adjacency(g, tr_size);
      const auto out = apply_transform(spec, a);
      json j{{"spec", to_json(spec)}, {"graph", to_json(from_adjacency(out.tensor))}};
      j["permutation"] = out.permutation ? json(*out.permutation) : json(nullptr);
      emit_json(tr_out, j);
    } else if (*synth) {
      SynthConfig cfg = sy_config.empty() ? SynthConfig{} : synth_config_from_json(read_json(sy_config));
      if (global.seed) cfg.seed = *global.seed;
      if (sy_classes) cfg.classes = *sy_classes;
      if (sy_samples) cfg.samples_per_class = *sy_samples;
      std::ostringstream out;
      const auto corpus = synth_corpus(cfg);
      write_corpus(out, corpus);
      emit(sy_out, out.str());
    } else if (*split) {
      std::size_t classes = sp_classes;
      std::vector<std::string> names;
      if (!sp_in.empty()) {
        names = load_corpus(sp_in, 67).class_names;
        classes = names.size();
      }
      if (classes == 0) throw Error("give --in or --classes");
      std::vector<int> ids(classes);
      std::iota(ids.begin(), ids.end(), 0);
      json out = json::array();
      for (const auto& s : make_splits(ids, sp_known, sp_groups, sp_runs, seed)) {
        json j{{"group", s.group}, {"run", s.run}, {"seed", s.seed}, {"known", s.known}, {"unknown", s.unknown}};
        if (!names.empty()) {
          std::vector<std::string> kn, un;
          for (int k : s.known) kn.push_back(names[static_cast<std::size_t>(k)]);
          for (int u : s.unknown) un.push_back(names[static_cast<std::size_t>(u)]);
          j["known_labels"] = kn;
          j["unknown_labels"] = un;
        }
        out.push_back(std::move(j));
      }
      emit_json(sp_out, out);
    } else if (*pretrain) {
      const json cfg = pt_config.empty() ? json::object() : read_json(pt_config);
      const ArchConfig arch = arch_from_json(cfg.value("arch", json::object()));
      PretrainConfig pc = pretrain_config_from_json(cfg.value("pretrain", json::object()));
      if (global.seed) pc.seed = *global.seed;
      if (!pt_kinds.empty()) {
        pc.kinds.clear();
        std::istringstream ks(pt_kinds);
        for (std::string k; std::getline(ks, k, ',');) pc.kinds.push_back(transform_kind_from_string(k));
      }
      const auto corpus = load_corpus(pt_corpus, arch.input_size);
      auto model = pretrain_dtae(corpus.samples, arch, pc);
      model.configs["class_names"] = corpus.class_names;
      save_model(model, pt_out);
    } else if (*finetune_cmd) {
      const json cfg = ft_config.empty() ? json::object() : read_json(ft_config);
      std::optional<TrainedModel> base;
      if (!ft_model.empty()) base = load_model(ft_model);
      const ArchConfig arch = base ? base->arch : arch_from_json(cfg.value("arch", json::object()));
      FinetuneConfig fc = finetune_config_from_json(cfg.value("finetune", json::object()));
      if (!ft_loss.empty()) fc.loss = finetune_loss_from_string(ft_loss);
      if (global.seed) fc.seed = *global.seed;
      const auto corpus = load_corpus(ft_corpus, arch.input_size);
      auto model = finetune(base, corpus.samples, arch, fc, corpus.class_names.size());
      model.configs["class_names"] = corpus.class_names;
      save_model(model, ft_out);
    } else if (*embed_cmd) {
      const auto model = load_model(em_model);
      const auto corpus = load_corpus(em_in, model.arch.input_size);
      const auto names = model_class_names(model);
      const auto samples = names.empty() ? corpus.samples : relabel(corpus, names);
      emit(em_out, reps_jsonl(embed(model, samples)));
    } else if (*fit) {
      const auto reps = read_reps(fo_in);
      auto osr = fit_class_stats(reps, {ThresholdMode::statistical, fo_value});
      if (fo_mode == "manual") {
        std::vector<double> scores;
        for (const auto& r : reps) scores.push_back(osr.outlier_score(r.z));
        osr = osr.with_threshold({ThresholdMode::manual, std::max(manual_threshold(scores, fo_percentile), 1e-12)});
      }
      emit_json(fo_out, to_json(osr));
    } else if (*score) {
      const auto osr = osr_model_from_json(read_json(sc_osr));
      std::vector<Representation> reps;
      if (sc_model.empty()) {
        reps = read_reps(sc_in);
      } else {
        const auto model = load_model(sc_model);
        const auto corpus = load_corpus(sc_in, model.arch.input_size);
        const auto names = model_class_names(model);
        reps = embed(model, names.empty() ? corpus.samples : relabel(corpus, names));
      }
      std::ostringstream out;
      out.precision(17);
      out << "id,truth,is_unknown,score,predicted\n";
      for (const auto& r : reps)
        out << r.id << ',' << r.label << ',' << (r.label == kUnknownLabel ? 1 : 0) << ',' << osr.outlier_score(r.z)
            << ',' << osr.classify(r.z) << '\n';
      emit(sc_out, out.str());
    } else if (*run) {
      auto cfg = experiment_config_from_json(read_json(rn_config));
      if (global.seed) cfg.seed = *global.seed;
      if (!rn_out.empty()) cfg.output_dir = rn_out;
      if (app.get_option("--jobs")->count()) cfg.jobs = global.jobs;
      if (cfg.output_dir.empty()) throw Error("experiment needs an output directory (--out)");
      const auto result = run_experiment(cfg, [](const std::string& msg) { std::cerr << msg << '\n'; });
      write_experiment_outputs(result, cfg.output_dir);
      std::size_t failed = 0;
      for (const auto& r : result.runs)
        if (!r.error.empty()) ++failed;
      std::cerr << result.runs.size() << " run-method cells, " << failed << " failed\n";
    } else if (*metrics) {
      std::istringstream in(slurp(me_in));
      std::string line;
      std::getline(in, line);  // header
      std::vector<int> truth, pred;
      std::vector<double> scores;
      std::vector<bool> unknown;
      std::set<int> known;
      std::size_t n = 1;
      while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
        if (cols.size() < 5) throw ParseError(n, "expected id,truth,is_unknown,score,predicted");
        try {
          truth.push_back(std::stoi(cols[1]));
          unknown.push_back(cols[2] == "1");
          scores.push_back(std::stod(cols[3]));
          pred.push_back(std::stoi(cols[4]));
        } catch (const std::exception&) {
          throw ParseError(n, "malformed number");
        }
        if (truth.back() != kUnknownLabel) known.insert(truth.back());
      }
      const std::vector<int> known_ids(known.begin(), known.end());
      MetricsReport m;
      m.auc_full = auc_at_fpr(scores, unknown, 1.0);
      m.auc_at_10 = auc_at_fpr(scores, unknown, 0.1);
      m.f1 = f1_report(pred, truth, known_ids);
      emit_json(me_out, to_json(m));
    }
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
