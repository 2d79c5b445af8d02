#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "graph.hpp"
#include "nn.hpp"
#include "osr.hpp"
#include "transforms.hpp"

// Two-stage training: detransformation-autoencoder pre-training on
// transformed views, then fine-tuning of the encoder with a classification
// (cross-entropy) or representation (triplet) loss.

namespace fcgosr {

inline constexpr int kModelFormatVersion = 1;

struct ArchConfig {
  std::size_t input_size = 67;  // padded adjacency side
  std::size_t hidden = 64;
  std::size_t rep_dim = 6;
  double dropout = 0.2;
  // Treat `dropout` as a keep probability instead of a drop rate.
  bool dropout_is_keep_probability = false;

  double drop_rate() const { return dropout_is_keep_probability ? 1.0 - dropout : dropout; }
  std::size_t input_features() const { return input_size * input_size; }
};

struct PretrainConfig {
  std::size_t views = 4;  // M
  std::vector<TransformKind> kinds{TransformKind::fcg_random};
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool identity_first_view = false;
  double drop_rate = 0.2;
  std::optional<std::size_t> walk_len;
};

enum class FinetuneLoss { cross_entropy, triplet };

struct FinetuneConfig {
  FinetuneLoss loss = FinetuneLoss::cross_entropy;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double margin = 0.5;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct LabeledTensor {
  AdjacencyTensor tensor;
  int label = kUnknownLabel;
  std::string id;
};

struct TrainedModel {
  ArchConfig arch;
  nn::Network encoder;
  std::optional<nn::Network> decoder;
  std::optional<nn::Network> head;
  nlohmann::json configs = nlohmann::json::object();
  std::vector<double> loss_history;

  friend bool operator==(const TrainedModel& a, const TrainedModel& b) {
    return a.encoder == b.encoder && a.decoder == b.decoder && a.head == b.head && a.configs == b.configs &&
           a.loss_history == b.loss_history;
  }
};

// ---- config JSON -----------------------------------------------------------

inline nlohmann::json to_json(const ArchConfig& a) {
  return {{"input_size", a.input_size},
          {"hidden", a.hidden},
          {"rep_dim", a.rep_dim},
          {"dropout", a.dropout},
          {"dropout_is_keep_probability", a.dropout_is_keep_probability}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.input_size = j.value("input_size", a.input_size);
  a.hidden = j.value("hidden", a.hidden);
  a.rep_dim = j.value("rep_dim", a.rep_dim);
  a.dropout = j.value("dropout", a.dropout);
  a.dropout_is_keep_probability = j.value("dropout_is_keep_probability", a.dropout_is_keep_probability);
  if (a.input_size == 0 || a.hidden == 0 || a.rep_dim == 0) throw Error("architecture dimensions must be positive");
  if (!(a.drop_rate() >= 0.0 && a.drop_rate() < 1.0)) throw Error("dropout must leave a drop rate in [0, 1)");
  return a;
}

inline nlohmann::json to_json(const PretrainConfig& c) {
  nlohmann::json kinds = nlohmann::json::array();
  for (auto k : c.kinds) kinds.push_back(to_string(k));
  nlohmann::json j{{"views", c.views},
                   {"kinds", kinds},
                   {"epochs", c.epochs},
                   {"batch_size", c.batch_size},
                   {"learning_rate", c.learning_rate},
                   {"seed", c.seed},
                   {"identity_first_view", c.identity_first_view},
                   {"drop_rate", c.drop_rate}};
  j["walk_len"] = c.walk_len ? nlohmann::json(*c.walk_len) : nlohmann::json(nullptr);
  return j;
}

inline PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.views = j.value("views", c.views);
  if (j.contains("kinds")) {
    c.kinds.clear();
    for (const auto& k : j["kinds"]) c.kinds.push_back(transform_kind_from_string(k.get<std::string>()));
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.identity_first_view = j.value("identity_first_view", c.identity_first_view);
  c.drop_rate = j.value("drop_rate", c.drop_rate);
  if (j.contains("walk_len") && !j["walk_len"].is_null()) c.walk_len = j["walk_len"].get<std::size_t>();
  return c;
}

inline std::string to_string(FinetuneLoss l) { return l == FinetuneLoss::cross_entropy ? "ce" : "triplet"; }

inline FinetuneLoss finetune_loss_from_string(const std::string& s) {
  if (s == "ce" || s == "cross_entropy") return FinetuneLoss::cross_entropy;
  if (s == "triplet") return FinetuneLoss::triplet;
  throw Error("unknown fine-tuning loss '" + s + "'");
}

inline nlohmann::json to_json(const FinetuneConfig& c) {
  return {{"loss", to_string(c.loss)}, {"epochs", c.epochs},     {"batch_size", c.batch_size},
          {"margin", c.margin},        {"learning_rate", c.learning_rate}, {"seed", c.seed}};
}

inline FinetuneConfig finetune_config_from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  if (j.contains("loss")) c.loss = finetune_loss_from_string(j["loss"].get<std::string>());
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.margin = j.value("margin", c.margin);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  return c;
}

// ---- networks --------------------------------------------------------------

/// flatten -> dense(S^2, hidden) -> relu -> dropout -> dense(hidden, rep_dim)
inline nn::Network make_encoder(const ArchConfig& a, std::uint64_t seed) {
  Rng rng(seed);
  nn::Network net;
  net.append(nn::Flatten{});
  net.append(nn::Dense::glorot(a.input_features(), a.hidden, rng));
  net.append(nn::Relu{});
  net.append(nn::Dropout{a.drop_rate()});
  net.append(nn::Dense::glorot(a.hidden, a.rep_dim, rng));
  return net;
}

/// Mirror of the encoder, squashed to [0, 1].
inline nn::Network make_decoder(const ArchConfig& a, std::uint64_t seed) {
  Rng rng(seed);
  nn::Network net;
  net.append(nn::Dense::glorot(a.rep_dim, a.hidden, rng));
  net.append(nn::Relu{});
  net.append(nn::Dropout{a.drop_rate()});
  net.append(nn::Dense::glorot(a.hidden, a.input_features(), rng));
  net.append(nn::Sigmoid{});
  return net;
}

inline nn::Network make_classifier_head(const ArchConfig& a, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  return nn::Network({nn::Dense::glorot(a.rep_dim, classes, rng)});
}

namespace detail {

inline void check_training_sample(const LabeledTensor& s, const ArchConfig& arch) {
  if (s.label < 0) throw Error("unknown-class sample '" + s.id + "' supplied for training");
  if (s.tensor.size != arch.input_size)
    throw Error("tensor size " + std::to_string(s.tensor.size) + " differs from model input size " +
                std::to_string(arch.input_size));
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  return order;
}

enum : std::uint64_t {
  kStreamInit = 1,
  kStreamShuffle,
  kStreamView,
  kStreamDropout,
  kStreamHead,
};

}  // namespace detail

inline TrainedModel pretrain_dtae(std::span<const LabeledTensor> corpus, const ArchConfig& arch,
                                  const PretrainConfig& cfg) {
  if (corpus.empty()) throw Error("pre-training corpus is empty");
  if (cfg.views == 0) throw Error("pre-training needs at least one view");
  if (cfg.kinds.empty()) throw Error("pre-training needs at least one transform kind");
  if (cfg.batch_size == 0) throw Error("batch size must be positive");
  for (const auto& s : corpus) detail::check_training_sample(s, arch);

  TrainedModel model;
  model.arch = arch;
  model.encoder = make_encoder(arch, derive_seed(cfg.seed, detail::kStreamInit, 0));
  model.decoder = make_decoder(arch, derive_seed(cfg.seed, detail::kStreamInit, 1));
  model.configs = {{"arch", to_json(arch)}, {"pretrain", to_json(cfg)}};

  nn::AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  nn::Adam enc_opt(model.encoder, adam_cfg);
  nn::Adam dec_opt(*model.decoder, adam_cfg);
  nn::Gradients enc_grads(model.encoder);
  nn::Gradients dec_grads(*model.decoder);

  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::shuffled_indices(corpus.size(), derive_seed(cfg.seed, detail::kStreamShuffle, epoch));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const AdjacencyTensor*> originals;
      for (std::size_t b = start; b < end; ++b) originals.push_back(&corpus[order[b]].tensor);
      const nn::Tensor target = nn::stack(std::span<const AdjacencyTensor* const>(originals));

      enc_grads.clear();
      dec_grads.clear();
      for (std::size_t t = 0; t < cfg.views; ++t) {
        std::vector<AdjacencyTensor> views;
        views.reserve(originals.size());
        for (std::size_t b = start; b < end; ++b) {
          const std::size_t sample = order[b];
          const std::uint64_t view_seed = derive_seed(cfg.seed, detail::kStreamView, epoch, sample, t);
          TransformSpec spec;
          spec.seed = view_seed;
          if (!(cfg.identity_first_view && t == 0)) {
            Rng pick(derive_seed(view_seed, 0));
            spec.kind = cfg.kinds[pick.below(cfg.kinds.size())];
          }
          spec.drop_rate = cfg.drop_rate;
          spec.walk_len = cfg.walk_len;
          views.push_back(apply_transform(spec, corpus[sample].tensor).tensor);
        }
        const std::uint64_t drop_seed = derive_seed(cfg.seed, detail::kStreamDropout, step, t);
        const auto enc_trace = nn::forward(model.encoder, nn::stack(views), nn::Mode::train, drop_seed);
        const auto dec_trace = nn::forward(*model.decoder, enc_trace.output(), nn::Mode::train, derive_seed(drop_seed, 1));
        auto loss = nn::dtae_view_loss(target, dec_trace.output());
        epoch_loss += loss.value;
        auto dz = nn::backward(*model.decoder, dec_trace, std::move(loss.grad), dec_grads, true);
        nn::backward(model.encoder, enc_trace, std::move(dz), enc_grads);
      }
      enc_opt.step(model.encoder, enc_grads);
      dec_opt.step(*model.decoder, dec_grads);
      ++step;
    }
    model.loss_history.push_back(epoch_loss / static_cast<double>(corpus.size() * cfg.views));
  }
  return model;
}

/// Fine-tunes `base`'s encoder (or a fresh seeded one when absent) on the
/// untransformed originals. The decoder is discarded.
inline TrainedModel finetune(const std::optional<TrainedModel>& base, std::span<const LabeledTensor> corpus,
                             const ArchConfig& arch, const FinetuneConfig& cfg, std::size_t num_classes) {
  if (corpus.empty()) throw Error("fine-tuning corpus is empty");
  if (cfg.batch_size == 0) throw Error("batch size must be positive");
  std::set<int> present;
  for (const auto& s : corpus) {
    detail::check_training_sample(s, arch);
    if (static_cast<std::size_t>(s.label) >= num_classes)
      throw Error("label " + std::to_string(s.label) + " outside the " + std::to_string(num_classes) + " known classes");
    present.insert(s.label);
  }
  if (cfg.loss == FinetuneLoss::triplet) {
    if (present.size() < 2) throw Error("triplet fine-tuning needs at least two known classes");
    if (!(cfg.margin > 0.0)) throw Error("triplet margin must be positive");
  }

  TrainedModel model;
  model.arch = arch;
  if (base) {
    model.encoder = base->encoder;
    model.configs = base->configs;
    if (base->arch.input_size != arch.input_size || base->arch.rep_dim != arch.rep_dim || base->arch.hidden != arch.hidden)
      throw Error("pre-trained model architecture differs from the fine-tuning architecture");
  } else {
    model.encoder = make_encoder(arch, derive_seed(cfg.seed, detail::kStreamInit, 0));
    model.configs = {{"arch", to_json(arch)}};
  }
  model.configs["finetune"] = to_json(cfg);
  if (cfg.loss == FinetuneLoss::cross_entropy)
    model.head = make_classifier_head(arch, num_classes, derive_seed(cfg.seed, detail::kStreamHead));

  nn::AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  nn::Adam enc_opt(model.encoder, adam_cfg);
  std::optional<nn::Adam> head_opt;
  if (model.head) head_opt.emplace(*model.head, adam_cfg);

  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::shuffled_indices(corpus.size(), derive_seed(cfg.seed, detail::kStreamShuffle, epoch));
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const AdjacencyTensor*> inputs;
      std::vector<int> labels;
      for (std::size_t b = start; b < end; ++b) {
        inputs.push_back(&corpus[order[b]].tensor);
        labels.push_back(corpus[order[b]].label);
      }
      const std::uint64_t drop_seed = derive_seed(cfg.seed, detail::kStreamDropout, step++);
      const auto enc_trace = nn::forward(model.encoder, nn::stack(std::span<const AdjacencyTensor* const>(inputs)),
                                         nn::Mode::train, drop_seed);
      nn::Gradients enc_grads(model.encoder);
      if (model.head) {
        const auto head_trace = nn::forward(*model.head, enc_trace.output(), nn::Mode::train);
        auto loss = nn::cross_entropy_loss(head_trace.output(), labels);
        epoch_loss += loss.value;
        nn::Gradients head_grads(*model.head);
        auto dz = nn::backward(*model.head, head_trace, std::move(loss.grad), head_grads, true);
        nn::backward(model.encoder, enc_trace, std::move(dz), enc_grads);
        head_opt->step(*model.head, head_grads);
      } else {
        const std::set<int> batch_classes(labels.begin(), labels.end());
        bool has_positive_pair = false;
        for (int c : batch_classes)
          if (std::count(labels.begin(), labels.end(), c) >= 2) has_positive_pair = true;
        if (batch_classes.size() < 2 || !has_positive_pair) continue;  // no triplet in this batch
        auto loss = nn::triplet_loss(enc_trace.output(), labels, cfg.margin);
        epoch_loss += loss.value;
        nn::backward(model.encoder, enc_trace, std::move(loss.grad), enc_grads);
      }
      enc_opt.step(model.encoder, enc_grads);
      ++batches;
    }
    model.loss_history.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
  }
  return model;
}

/// Eval-mode representations z for each sample; labels pass through.
inline RepresentationSet embed(const TrainedModel& model, std::span<const LabeledTensor> samples,
                               std::size_t chunk = 256) {
  RepresentationSet out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    std::vector<const AdjacencyTensor*> inputs;
    for (std::size_t i = start; i < end; ++i) {
      if (samples[i].tensor.size != model.arch.input_size)
        throw Error("tensor size " + std::to_string(samples[i].tensor.size) + " differs from model input size " +
                    std::to_string(model.arch.input_size));
      inputs.push_back(&samples[i].tensor);
    }
    const auto z = nn::predict(model.encoder, nn::stack(std::span<const AdjacencyTensor* const>(inputs)));
    for (std::size_t i = start; i < end; ++i) {
      const auto row = z.row(i - start);
      out.push_back({std::vector<double>(row.begin(), row.end()), samples[i].label, samples[i].id});
    }
  }
  return out;
}

/// Class predicted by the cross-entropy head (argmax of the logits).
inline std::vector<int> predict_classes(const TrainedModel& model, std::span<const LabeledTensor> samples) {
  if (!model.head) throw Error("model has no classifier head");
  std::vector<const AdjacencyTensor*> inputs;
  for (const auto& s : samples) inputs.push_back(&s.tensor);
  const auto logits = nn::predict(*model.head, nn::predict(model.encoder, nn::stack(std::span<const AdjacencyTensor* const>(inputs))));
  std::vector<int> out;
  for (std::size_t n = 0; n < logits.batch(); ++n) {
    const auto row = logits.row(n);
    out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

// ---- persistence -----------------------------------------------------------

inline nlohmann::json to_json(const TrainedModel& m) {
  nlohmann::json layers = nlohmann::json::array();
  auto add = [&](const std::string& part, const nn::Network& net) {
    for (const auto& l : net.layers()) {
      auto j = nn::to_json(l);
      j["network"] = part;
      layers.push_back(std::move(j));
    }
  };
  add("encoder", m.encoder);
  if (m.decoder) add("decoder", *m.decoder);
  if (m.head) add("head", *m.head);
  return {{"format_version", kModelFormatVersion},
          {"arch", to_json(m.arch)},
          {"configs", m.configs},
          {"loss_history", m.loss_history},
          {"layers", layers}};
}

inline TrainedModel trained_model_from_json(const nlohmann::json& j) {
  try {
    const int version = j.at("format_version").get<int>();
    if (version > kModelFormatVersion)
      throw Error("model format version " + std::to_string(version) + " is newer than supported version " +
                  std::to_string(kModelFormatVersion));
    TrainedModel m;
    m.arch = arch_from_json(j.at("arch"));
    m.configs = j.value("configs", nlohmann::json::object());
    m.loss_history = j.value("loss_history", std::vector<double>{});
    nn::Network decoder, head;
    for (const auto& l : j.at("layers")) {
      const auto part = l.at("network").get<std::string>();
      auto layer = nn::layer_from_json(l);
      if (part == "encoder") m.encoder.append(std::move(layer));
      else if (part == "decoder") decoder.append(std::move(layer));
      else if (part == "head") head.append(std::move(layer));
      else throw Error("unknown network part '" + part + "'");
    }
    if (decoder.size()) m.decoder = std::move(decoder);
    if (head.size()) m.head = std::move(head);
    if (m.encoder.output_features(m.arch.input_features()) != m.arch.rep_dim)
      throw Error("encoder output does not match the representation size");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("corrupt model file: ") + e.what());
  }
}

inline void save_model(const TrainedModel& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << to_json(m).dump() << '\n';
}

inline TrainedModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("corrupt model file " + path + ": " + e.what());
  }
  return trained_model_from_json(j);
}

}  // namespace fcgosr
