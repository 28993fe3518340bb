#include "mwp/config.hpp"

#include "mwp/error.hpp"

#include <fstream>
#include <set>

namespace mwp {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw UsageError("unknown " + where + " field '" + key + "'");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw UsageError("epochs must be at least 1");
  if (batch_size < 1) throw UsageError("batch_size must be at least 1");
  if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw UsageError("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw UsageError("adam_eps must be positive");
  if (lambda < 0.0) throw UsageError("lambda must be non-negative");
  if (lr_halve_after < 0 || lr_halve_every < 1) throw UsageError("bad learning-rate halving rule");
  if (embed_dim < 1 || embed_window < 1) throw UsageError("bad embedder settings");
  if (min_freq < 1) throw UsageError("min_freq must be at least 1");
  if (train_accuracy_every < 0 || train_accuracy_limit < 0 || valid_every < 0) {
    throw UsageError("evaluation intervals must be non-negative");
  }
  if (infer.beam < 1 || infer.max_len < 1) throw UsageError("beam and max_len must be positive");
}

void to_json(nlohmann::json& j, const InferConfig& c) {
  j = {{"beam", c.beam}, {"max_len", c.max_len}, {"uniform_weights", c.uniform_weights},
       {"per_sequence", c.per_sequence}};
}

void from_json(const nlohmann::json& j, InferConfig& c) {
  reject_unknown(j, {"beam", "max_len", "uniform_weights", "per_sequence"}, "infer config");
  const InferConfig d;
  c.beam = j.value("beam", d.beam);
  c.max_len = j.value("max_len", d.max_len);
  c.uniform_weights = j.value("uniform_weights", d.uniform_weights);
  c.per_sequence = j.value("per_sequence", d.per_sequence);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"lambda", c.lambda},
       {"lr_halve_after", c.lr_halve_after},
       {"lr_halve_every", c.lr_halve_every},
       {"clip_norm", c.clip_norm},
       {"seed", c.seed},
       {"equation_normalization", c.equation_normalization},
       {"copy", c.copy},
       {"memory", c.memory},
       {"embed_dim", c.embed_dim},
       {"embed_window", c.embed_window},
       {"min_freq", c.min_freq},
       {"train_accuracy_every", c.train_accuracy_every},
       {"train_accuracy_limit", c.train_accuracy_limit},
       {"valid_every", c.valid_every},
       {"model", c.model},
       {"infer", c.infer}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "adam_eps", "lambda", "lr_halve_after",
                  "lr_halve_every", "clip_norm", "seed", "equation_normalization", "copy", "memory", "embed_dim",
                  "embed_window", "min_freq", "train_accuracy_every", "train_accuracy_limit", "valid_every", "model",
                  "infer"},
                 "train config");
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.lambda = j.value("lambda", d.lambda);
  c.lr_halve_after = j.value("lr_halve_after", d.lr_halve_after);
  c.lr_halve_every = j.value("lr_halve_every", d.lr_halve_every);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.seed = j.value("seed", d.seed);
  c.equation_normalization = j.value("equation_normalization", d.equation_normalization);
  c.copy = j.value("copy", d.copy);
  c.memory = j.value("memory", d.memory);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.embed_window = j.value("embed_window", d.embed_window);
  c.min_freq = j.value("min_freq", d.min_freq);
  c.train_accuracy_every = j.value("train_accuracy_every", d.train_accuracy_every);
  c.train_accuracy_limit = j.value("train_accuracy_limit", d.train_accuracy_limit);
  c.valid_every = j.value("valid_every", d.valid_every);
  c.model = j.contains("model") ? j.at("model").get<net::ModelConfig>() : d.model;
  c.infer = j.contains("infer") ? j.at("infer").get<InferConfig>() : d.infer;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  try {
    TrainConfig c = nlohmann::json::parse(in).get<TrainConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("bad config " + path.string() + ": " + e.what());
  }
}

void save_train_config(const TrainConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << nlohmann::json(c).dump(2) << "\n";
}

}  // namespace mwp
