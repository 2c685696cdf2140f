#pragma once

// Whole-run configuration as one strict JSON document:
//   {dataset, loss, stage1, stage2, queue: {capacity}, encoder, experiment}
// Every section is optional; unknown keys anywhere are rejected.

#include <cstdint>
#include <string>
#include <vector>

#include "dscl/dataset_io.hpp"
#include "dscl/encoder.hpp"
#include "dscl/losses.hpp"
#include "dscl/train.hpp"

namespace dscl {

struct GradRatioSettings {
  std::size_t anchors_per_class = 100;
  std::size_t min_bucket = 10;  // smaller buckets are dropped with a warning
};

struct ConvergeSettings {
  std::vector<std::size_t> positives{1, 4, 16};
  std::vector<double> alphas{0.1, 0.3};
  std::size_t classes = 4;
  std::size_t dim = 8;
  double lr = 0.5;
  std::size_t max_steps = 200000;
  double grad_tol = 1e-6;
};

struct SweepSettings {
  std::vector<double> alphas{0.0, 0.05, 0.1, 0.3, 0.5, 1.0};
  std::vector<std::size_t> patches{1, 2, 3, 4, 5};
  std::vector<double> lambdas{0.0, 0.5, 1.0, 1.5, 2.0};
};

struct RetrievalSettings {
  std::size_t queries = 40;
  std::size_t top_k = 3;
};

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> variants{"scl", "dscl", "scl+pbsd", "dscl+pbsd", "dscl+multicrop", "dscl+pbsd_global"};
  GradRatioSettings grad_ratio;
  ConvergeSettings converge;
  SweepSettings sweep;
  RetrievalSettings retrieval;
};

struct RunConfig {
  DatasetSpec dataset = DatasetSpec::desk_default();
  EncoderConfig encoder;
  Stage1Config stage1;  // also carries the loss and the queue capacity
  Stage2Config stage2;
  ExperimentConfig experiment;

  // Cross-section consistency; the augmentation output size follows the encoder.
  void finalize() {
    stage1.augment.out_size = encoder.input_size;
    try {
      dataset.validate();
    } catch (const SpecError& e) {
      throw ConfigError(std::string("dataset: ") + e.what());
    }
    encoder.validate();
    stage1.validate();
    stage2.validate();
    if (dataset.image_size != encoder.input_size) {
      throw ConfigError("encoder.input_size " + std::to_string(encoder.input_size) + " must equal dataset.image_size " +
                        std::to_string(dataset.image_size));
    }
    if (dataset.channels != encoder.channels) throw ConfigError("encoder.channels must equal dataset.channels");
    if (experiment.seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
    if (experiment.grad_ratio.anchors_per_class < 1) throw ConfigError("experiment.grad_ratio.anchors_per_class must be >= 1");
    if (experiment.converge.classes < 2) throw ConfigError("experiment.converge.classes must be >= 2");
    if (experiment.retrieval.top_k < 1) throw ConfigError("experiment.retrieval.top_k must be >= 1");
  }

  // Training seed for both stages.
  void set_seed(std::uint64_t s) {
    stage1.seed = s;
    stage2.seed = s;
  }
};

namespace detail {

inline Json range_json(const Range& r) { return Json::array({r.lo, r.hi}); }

inline void read_range(const Json& j, const char* key, Range& r, const std::string& section) {
  if (!j.contains(key)) return;
  std::vector<double> v;
  read_opt(j, key, v, section);
  if (v.size() != 2) throw ConfigError(section + "." + key + ": expected [min, max]");
  r = {v[0], v[1]};
}

}  // namespace detail

inline Json augment_to_json(const AugmentationPolicy& a) {
  return Json{{"crop_scale", detail::range_json(a.crop_scale)},
              {"crop_aspect", detail::range_json(a.crop_aspect)},
              {"flip_probability", a.flip_probability},
              {"brightness", a.brightness},
              {"contrast", a.contrast}};
}

inline AugmentationPolicy augment_from_json(const Json& j, AugmentationPolicy a) {
  require_known_keys(j, "stage1.augment", {"crop_scale", "crop_aspect", "flip_probability", "brightness", "contrast"});
  detail::read_range(j, "crop_scale", a.crop_scale, "stage1.augment");
  detail::read_range(j, "crop_aspect", a.crop_aspect, "stage1.augment");
  read_opt(j, "flip_probability", a.flip_probability, "stage1.augment");
  read_opt(j, "brightness", a.brightness, "stage1.augment");
  read_opt(j, "contrast", a.contrast, "stage1.augment");
  if (!(a.flip_probability >= 0.0 && a.flip_probability <= 1.0)) {
    throw ConfigError("stage1.augment.flip_probability must lie in [0, 1]");
  }
  if (!(a.brightness >= 0.0 && a.brightness < 1.0) || !(a.contrast >= 0.0 && a.contrast < 1.0)) {
    throw ConfigError("stage1.augment jitter must lie in [0, 1)");
  }
  try {
    detail::check_ranges(a.crop_scale, a.crop_aspect);
  } catch (const SamplingError& e) {
    throw ConfigError(std::string("stage1.augment: ") + e.what());
  }
  return a;
}

inline Json experiment_to_json(const ExperimentConfig& e) {
  return Json{{"seeds", e.seeds},
              {"variants", e.variants},
              {"grad_ratio", {{"anchors_per_class", e.grad_ratio.anchors_per_class}, {"min_bucket", e.grad_ratio.min_bucket}}},
              {"converge",
               {{"positives", e.converge.positives},
                {"alphas", e.converge.alphas},
                {"classes", e.converge.classes},
                {"dim", e.converge.dim},
                {"lr", e.converge.lr},
                {"max_steps", e.converge.max_steps},
                {"grad_tol", e.converge.grad_tol}}},
              {"sweep", {{"alphas", e.sweep.alphas}, {"patches", e.sweep.patches}, {"lambdas", e.sweep.lambdas}}},
              {"retrieval", {{"queries", e.retrieval.queries}, {"top_k", e.retrieval.top_k}}}};
}

inline ExperimentConfig experiment_from_json(const Json& j) {
  require_known_keys(j, "experiment", {"seeds", "variants", "grad_ratio", "converge", "sweep", "retrieval"});
  ExperimentConfig e;
  read_opt(j, "seeds", e.seeds, "experiment");
  read_opt(j, "variants", e.variants, "experiment");
  if (j.contains("grad_ratio")) {
    const Json& g = j["grad_ratio"];
    require_known_keys(g, "experiment.grad_ratio", {"anchors_per_class", "min_bucket"});
    read_opt(g, "anchors_per_class", e.grad_ratio.anchors_per_class, "experiment.grad_ratio");
    read_opt(g, "min_bucket", e.grad_ratio.min_bucket, "experiment.grad_ratio");
  }
  if (j.contains("converge")) {
    const Json& c = j["converge"];
    require_known_keys(c, "experiment.converge", {"positives", "alphas", "classes", "dim", "lr", "max_steps", "grad_tol"});
    read_opt(c, "positives", e.converge.positives, "experiment.converge");
    read_opt(c, "alphas", e.converge.alphas, "experiment.converge");
    read_opt(c, "classes", e.converge.classes, "experiment.converge");
    read_opt(c, "dim", e.converge.dim, "experiment.converge");
    read_opt(c, "lr", e.converge.lr, "experiment.converge");
    read_opt(c, "max_steps", e.converge.max_steps, "experiment.converge");
    read_opt(c, "grad_tol", e.converge.grad_tol, "experiment.converge");
  }
  if (j.contains("sweep")) {
    const Json& s = j["sweep"];
    require_known_keys(s, "experiment.sweep", {"alphas", "patches", "lambdas"});
    read_opt(s, "alphas", e.sweep.alphas, "experiment.sweep");
    read_opt(s, "patches", e.sweep.patches, "experiment.sweep");
    read_opt(s, "lambdas", e.sweep.lambdas, "experiment.sweep");
  }
  if (j.contains("retrieval")) {
    const Json& r = j["retrieval"];
    require_known_keys(r, "experiment.retrieval", {"queries", "top_k"});
    read_opt(r, "queries", e.retrieval.queries, "experiment.retrieval");
    read_opt(r, "top_k", e.retrieval.top_k, "experiment.retrieval");
  }
  return e;
}

inline Json run_config_to_json(const RunConfig& c) {
  const Stage1Config& s1 = c.stage1;
  const Stage2Config& s2 = c.stage2;
  return Json{{"dataset", dataset_spec_to_json(c.dataset)},
              {"encoder", encoder_config_to_json(c.encoder)},
              {"loss", loss_config_to_json(s1.loss)},
              {"queue", {{"capacity", s1.queue_capacity}}},
              {"stage1",
               {{"epochs", s1.epochs},
                {"batch_size", s1.batch_size},
                {"lr", s1.lr},
                {"momentum", s1.momentum},
                {"weight_decay", s1.weight_decay},
                {"ema_momentum", s1.ema_momentum},
                {"warmup_fill", s1.warmup_fill},
                {"probe_per_class", s1.probe_per_class},
                {"seed", s1.seed},
                {"augment", augment_to_json(s1.augment)}}},
              {"stage2",
               {{"epochs", s2.epochs},
                {"batch_size", s2.batch_size},
                {"lr", s2.lr},
                {"momentum", s2.momentum},
                {"weight_decay", s2.weight_decay},
                {"milestones", s2.milestones},
                {"gamma", s2.gamma},
                {"class_balanced", s2.class_balanced},
                {"seed", s2.seed}}},
              {"experiment", experiment_to_json(c.experiment)}};
}

inline RunConfig run_config_from_json(const Json& j) {
  require_known_keys(j, "config", {"dataset", "encoder", "loss", "queue", "stage1", "stage2", "experiment"});
  RunConfig c;
  if (j.contains("dataset")) c.dataset = dataset_spec_from_json(j["dataset"]);
  if (j.contains("encoder")) c.encoder = encoder_config_from_json(j["encoder"]);
  if (j.contains("loss")) c.stage1.loss = loss_config_from_json(j["loss"]);
  if (j.contains("queue")) {
    require_known_keys(j["queue"], "queue", {"capacity"});
    read_opt(j["queue"], "capacity", c.stage1.queue_capacity, "queue");
  }
  if (j.contains("stage1")) {
    const Json& s = j["stage1"];
    require_known_keys(s, "stage1",
                       {"epochs", "batch_size", "lr", "momentum", "weight_decay", "ema_momentum", "warmup_fill",
                        "probe_per_class", "seed", "augment"});
    read_opt(s, "epochs", c.stage1.epochs, "stage1");
    read_opt(s, "batch_size", c.stage1.batch_size, "stage1");
    read_opt(s, "lr", c.stage1.lr, "stage1");
    read_opt(s, "momentum", c.stage1.momentum, "stage1");
    read_opt(s, "weight_decay", c.stage1.weight_decay, "stage1");
    read_opt(s, "ema_momentum", c.stage1.ema_momentum, "stage1");
    read_opt(s, "warmup_fill", c.stage1.warmup_fill, "stage1");
    read_opt(s, "probe_per_class", c.stage1.probe_per_class, "stage1");
    read_opt(s, "seed", c.stage1.seed, "stage1");
    if (s.contains("augment")) c.stage1.augment = augment_from_json(s["augment"], c.stage1.augment);
  }
  if (j.contains("stage2")) {
    const Json& s = j["stage2"];
    require_known_keys(s, "stage2",
                       {"epochs", "batch_size", "lr", "momentum", "weight_decay", "milestones", "gamma",
                        "class_balanced", "seed"});
    read_opt(s, "epochs", c.stage2.epochs, "stage2");
    read_opt(s, "batch_size", c.stage2.batch_size, "stage2");
    read_opt(s, "lr", c.stage2.lr, "stage2");
    read_opt(s, "momentum", c.stage2.momentum, "stage2");
    read_opt(s, "weight_decay", c.stage2.weight_decay, "stage2");
    read_opt(s, "milestones", c.stage2.milestones, "stage2");
    read_opt(s, "gamma", c.stage2.gamma, "stage2");
    read_opt(s, "class_balanced", c.stage2.class_balanced, "stage2");
    read_opt(s, "seed", c.stage2.seed, "stage2");
  }
  if (j.contains("experiment")) c.experiment = experiment_from_json(j["experiment"]);
  c.finalize();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return run_config_from_json(j);
}

// FNV-1a over the canonical (sorted-key) dump.
inline std::string config_hash(const RunConfig& c) {
  const std::string s = run_config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return detail::hex64(h);
}

}  // namespace dscl
