#pragma once

// Two-stage pipeline: contrastive representation learning with an EMA encoder and a
// memory queue, then a linear classifier on frozen pooled features, evaluated per
// Many / Medium / Few split.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dscl/encoder.hpp"
#include "dscl/losses.hpp"
#include "dscl/parallel.hpp"
#include "dscl/queue.hpp"
#include "dscl/synthdata.hpp"

namespace dscl {

// ---------------------------------------------------------------------------
// Configuration

struct Stage1Config {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double ema_momentum = 0.99;
  std::size_t queue_capacity = 2048;
  double warmup_fill = 0.5;  // losses start once the queue holds this fraction of capacity
  std::size_t probe_per_class = 32;
  AugmentationPolicy augment;
  LossConfig loss;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("stage1.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("stage1.batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("stage1.lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("stage1.momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("stage1.weight_decay must be >= 0");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ConfigError("stage1.ema_momentum must lie in [0, 1]");
    if (queue_capacity < 1) throw ConfigError("queue.capacity must be >= 1");
    if (!(warmup_fill >= 0.0 && warmup_fill <= 1.0)) throw ConfigError("stage1.warmup_fill must lie in [0, 1]");
    loss.validate();
  }
};

struct Stage2Config {
  std::size_t epochs = 40;
  std::size_t batch_size = 256;
  double lr = 1.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::vector<std::size_t> milestones{20, 30};
  double gamma = 0.1;
  bool class_balanced = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("stage2.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("stage2.batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("stage2.lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("stage2.momentum must lie in [0, 1)");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] == 0 || milestones[i] >= epochs) {
        throw ConfigError("stage2.milestones must lie inside (0, epochs)");
      }
      if (i > 0 && milestones[i] <= milestones[i - 1]) throw ConfigError("stage2.milestones must be strictly increasing");
    }
  }

  double lr_at_epoch(std::size_t epoch) const {
    double lr_e = lr;
    for (std::size_t m : milestones)
      if (epoch >= m) lr_e *= gamma;
    return lr_e;
  }
};

// peak * 0.5 * (1 + cos(pi * t / T))
inline double cosine_lr(double peak, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return peak;
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

// ---------------------------------------------------------------------------
// Optimizer

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
// v <- mu v + (g + wd w); w <- w - lr v.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Var> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.shape(), 0.0);
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var& p = params_[i];
      Tensor& w = p.value_mut();
      Tensor& v = velocity_[i];
      const bool has = p.has_grad();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double g = (has ? p.grad()[k] : 0.0) + weight_decay_ * w[k];
        v[k] = momentum_ * v[k] + g;
        w[k] -= lr * v[k];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> velocity_;
  double momentum_;
  double weight_decay_;
};

// ---------------------------------------------------------------------------
// Metrics log

inline const char* kMetricsHeader =
    "step,epoch,loss_dscl,loss_pbsd,lr,queue_fill,mean_ratio_head,mean_ratio_tail,p_plus_head,p_plus_tail";

struct MetricsRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::optional<double> loss_dscl, loss_pbsd;
  double lr = 0.0;
  double queue_fill = 0.0;
  std::optional<double> mean_ratio_head, mean_ratio_tail, p_plus_head, p_plus_tail;
};

// Shortest round-trip representation, so logs are byte-stable.
inline std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_opt(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    os << r.step << ',' << r.epoch << ',' << format_opt(r.loss_dscl) << ',' << format_opt(r.loss_pbsd) << ','
       << format_number(r.lr) << ',' << format_number(r.queue_fill) << ',' << format_opt(r.mean_ratio_head) << ','
       << format_opt(r.mean_ratio_tail) << ',' << format_opt(r.p_plus_head) << ',' << format_opt(r.p_plus_tail) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Stage 1

struct Stage1State {
  EncoderParams online;
  EmaEncoder ema;
  MemoryQueue queue;
  SgdMomentum optimizer;
  std::size_t step = 0;

  Stage1State(const EncoderConfig& enc, const Stage1Config& cfg)
      : online(init_encoder(enc, derive_seed(cfg.seed, {0x1A17}))),
        ema(online, cfg.ema_momentum),
        queue(cfg.queue_capacity, enc.d_proj),
        optimizer(online.all(), cfg.momentum, cfg.weight_decay) {}

  bool warmed_up(const Stage1Config& cfg) const {
    return static_cast<double>(queue.size()) >= cfg.warmup_fill * static_cast<double>(queue.capacity());
  }
};

struct StepResult {
  bool updated = false;
  double loss_contrastive = 0.0;
  double loss_patch = 0.0;
  std::size_t fallbacks = 0;
  std::vector<std::size_t> num_pos;  // per anchor, when updated
  std::vector<ClassId> labels;
  bool queue_full = false;  // queue was at capacity when the losses were computed
};

namespace detail {

constexpr std::uint64_t kViewTag = 0xA0;
constexpr std::uint64_t kBoxTag = 0xB0;
constexpr std::uint64_t kProbeTag = 0xC0;
constexpr std::uint64_t kShuffleTag = 0xD0;

inline std::string logit_range_dump(const Tensor& z, const Tensor& zplus, const QueueSnapshot& snap) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t r = 0; r < z.dim(0); ++r) {
    for (double s : candidate_similarities(z.row(r), zplus.row(r), snap)) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
  }
  return "similarity range [" + format_number(lo) + ", " + format_number(hi) + "]";
}

}  // namespace detail

// One optimisation step on `indices` (training-set positions). Before warm-up the
// step only enqueues EMA embeddings.
inline StepResult stage1_step(Stage1State& st, const SynthDataset& ds, std::span<const std::size_t> indices,
                              const Stage1Config& cfg, double lr, std::size_t threads = 1) {
  const std::size_t B = indices.size();
  const LossConfig& lc = cfg.loss;
  std::vector<Tensor> view_a(B), view_b(B);
  std::vector<std::vector<PatchBox>> boxes(B);
  const bool patches = lc.uses_patches() && lc.lambda > 0.0;
  parallel_for(B, threads, [&](std::size_t i) {
    const std::size_t idx = indices[i];
    auto [a, b] = augment_two_views(ds.train[idx], cfg.augment, derive_seed(cfg.seed, {detail::kViewTag, st.step, idx}));
    view_a[i] = std::move(a.pixels);
    view_b[i] = std::move(b.pixels);
    if (patches) {
      boxes[i] = sample_patch_boxes(lc.patches, lc.patch_scale, lc.patch_aspect,
                                    derive_seed(cfg.seed, {detail::kBoxTag, st.step, idx}));
    }
  });

  StepResult res;
  res.labels.resize(B);
  for (std::size_t i = 0; i < B; ++i) res.labels[i] = ds.train[indices[i]].label;

  const Tensor zplus = embed_images(st.ema.params(), to_batch(view_b)).value();

  if (st.warmed_up(cfg)) {
    const QueueSnapshot snap = st.queue.snapshot();
    res.queue_full = st.queue.full();
    BatchInputs batch;
    for (const auto& v : view_a) batch.view_a.push_back(&v);
    batch.zplus = zplus;
    batch.labels = res.labels;
    if (patches) batch.boxes = boxes;
    const ObjectiveTerms terms = overall_objective(st.online, &st.ema.params(), batch, snap, lc);
    if (!std::isfinite(terms.total.item())) {
      throw NumericalError("non-finite loss at step " + std::to_string(st.step) + ": " +
                           detail::logit_range_dump(terms.z, zplus, snap));
    }
    st.optimizer.zero_grad();
    terms.total.backward();
    st.optimizer.step(lr);
    st.ema.update(st.online);
    res.updated = true;
    res.loss_contrastive = terms.contrastive;
    res.loss_patch = terms.patch;
    res.fallbacks = terms.stats.fallbacks;
    res.num_pos = terms.stats.num_pos;
  }
  st.queue.enqueue_batch(zplus, res.labels);
  ++st.step;
  return res;
}

// Fixed anchors from the head-most and tail-most classes, re-measured every epoch.
struct ProbeSet {
  std::vector<std::size_t> head, tail;
  Tensor head_a, head_b, tail_a, tail_b;  // [n, C, S, S] batches of the two fixed views
  ClassId head_class = 0, tail_class = 0;
};

inline ProbeSet make_probe_set(const SynthDataset& ds, const Stage1Config& cfg) {
  ProbeSet ps;
  const std::size_t K = ds.spec.num_classes();
  ps.head_class = 0;
  ps.tail_class = K - 1;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    if (ds.train[i].label == ps.head_class && ps.head.size() < cfg.probe_per_class) ps.head.push_back(i);
    if (ds.train[i].label == ps.tail_class && ps.tail.size() < cfg.probe_per_class) ps.tail.push_back(i);
  }
  auto views = [&](const std::vector<std::size_t>& idx, Tensor& a, Tensor& b) {
    if (idx.empty()) return;
    std::vector<Tensor> va, vb;
    for (std::size_t i : idx) {
      auto [x, y] = augment_two_views(ds.train[i], cfg.augment, derive_seed(cfg.seed, {detail::kProbeTag, i}));
      va.push_back(std::move(x.pixels));
      vb.push_back(std::move(y.pixels));
    }
    a = to_batch(va);
    b = to_batch(vb);
  };
  views(ps.head, ps.head_a, ps.head_b);
  views(ps.tail, ps.tail_a, ps.tail_b);
  return ps;
}

struct ProbeResult {
  std::optional<double> ratio_head, ratio_tail, p_plus_head, p_plus_tail;
};

// Mean positive-gradient ratio (anchors with |P| >= 1) and mean p(z+|z) per group.
inline ProbeResult run_probe(const ProbeSet& ps, const EncoderParams& online, const EncoderParams& ema,
                             const QueueSnapshot& snap, const LossConfig& lc) {
  ProbeResult out;
  auto group = [&](const std::vector<std::size_t>& idx, const Tensor& a, const Tensor& b, ClassId label,
                   std::optional<double>& ratio, std::optional<double>& pplus) {
    if (idx.empty()) return;
    const Tensor z = embed_images(online.clone(false), a).value();
    const Tensor zp = embed_images(ema, b).value();
    double rsum = 0.0, psum = 0.0;
    std::size_t rn = 0;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      psum += conditional_prob(z.row(r), zp.row(r), snap, lc.tau)[0];
      if (snap.count_of(label) > 0) {
        rsum += positive_gradient_ratio(z.row(r), zp.row(r), snap, label, lc.tau, lc.mode, lc.alpha);
        ++rn;
      }
    }
    pplus = psum / static_cast<double>(idx.size());
    if (rn > 0) ratio = rsum / static_cast<double>(rn);
  };
  group(ps.head, ps.head_a, ps.head_b, ps.head_class, out.ratio_head, out.p_plus_head);
  group(ps.tail, ps.tail_a, ps.tail_b, ps.tail_class, out.ratio_tail, out.p_plus_tail);
  return out;
}

struct Stage1Result {
  Checkpoint checkpoint;
  std::vector<MetricsRow> metrics;
  std::size_t fallbacks = 0;
  std::size_t warmup_steps = 0;
  // Per class, sum and count of |P| seen by anchors while the queue was full.
  std::vector<double> positives_sum;
  std::vector<std::size_t> positives_count;

  Json summary() const {
    Json pc = Json::array();
    for (std::size_t k = 0; k < positives_sum.size(); ++k) {
      pc.push_back(positives_count[k] ? positives_sum[k] / static_cast<double>(positives_count[k]) : 0.0);
    }
    return Json{{"steps", metrics.size()},
                {"warmup_steps", warmup_steps},
                {"empty_positive_fallbacks", fallbacks},
                {"mean_positives_per_class", pc}};
  }
};

using ProgressFn = std::function<void(const MetricsRow&)>;

inline Stage1Result stage1_train(const SynthDataset& ds, const EncoderConfig& enc, const Stage1Config& cfg,
                                 std::size_t threads = 1, const ProgressFn& on_epoch = {}) {
  cfg.validate();
  if (ds.train.empty()) throw SpecError("stage1_train: empty training set");
  Stage1State st(enc, cfg);
  const ProbeSet probe = make_probe_set(ds, cfg);
  const std::size_t n = ds.train.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  const std::size_t K = ds.spec.num_classes();

  Stage1Result out;
  out.positives_sum.assign(K, 0.0);
  out.positives_count.assign(K, 0);
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, {detail::kShuffleTag, epoch}));
    shuffle_rng.shuffle(order);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t begin = s * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const double lr = cosine_lr(cfg.lr, st.step, total);
      MetricsRow row;
      row.step = st.step;
      row.epoch = epoch;
      row.lr = lr;
      const StepResult r = stage1_step(st, ds, std::span<const std::size_t>(order.data() + begin, end - begin), cfg, lr,
                                       threads);
      row.queue_fill = st.queue.fill_fraction();
      if (r.updated) {
        row.loss_dscl = r.loss_contrastive;
        row.loss_pbsd = r.loss_patch;
        out.fallbacks += r.fallbacks;
        if (r.queue_full) {
          for (std::size_t i = 0; i < r.labels.size(); ++i) {
            out.positives_sum[r.labels[i]] += static_cast<double>(r.num_pos[i]);
            ++out.positives_count[r.labels[i]];
          }
        }
      } else {
        ++out.warmup_steps;
      }
      if (s + 1 == steps_per_epoch) {
        const ProbeResult p = run_probe(probe, st.online, st.ema.params(), st.queue.snapshot(), cfg.loss);
        row.mean_ratio_head = p.ratio_head;
        row.mean_ratio_tail = p.ratio_tail;
        row.p_plus_head = p.p_plus_head;
        row.p_plus_tail = p.p_plus_tail;
      }
      out.metrics.push_back(row);
      if (s + 1 == steps_per_epoch && on_epoch) on_epoch(row);
    }
  }
  out.checkpoint.online = st.online;
  out.checkpoint.ema = st.ema.params();
  out.checkpoint.ema_momentum = cfg.ema_momentum;
  out.checkpoint.step = st.step;
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2

// Pooled backbone features v of un-augmented images, in fixed-size chunks so the
// result does not depend on the thread count.
inline Tensor extract_features(const EncoderParams& backbone, const std::vector<SynthImage>& images,
                               std::size_t threads = 1, std::size_t chunk = 128) {
  const EncoderParams frozen = backbone.clone(false);
  const std::size_t d = frozen.config.feature_dim();
  Tensor out(Shape{images.size(), d});
  const std::size_t chunks = (images.size() + chunk - 1) / chunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * chunk, end = std::min(images.size(), begin + chunk);
    std::vector<const Tensor*> ptrs;
    for (std::size_t i = begin; i < end; ++i) ptrs.push_back(&images[i].pixels);
    const Tensor v = encode(frozen, Var::constant(to_batch(std::span<const Tensor* const>(ptrs)))).v.value();
    std::copy_n(v.data(), v.size(), out.data() + begin * d);
  });
  return out;
}

// Per-dimension standardisation scaled by 1/sqrt(d) so rows have roughly unit norm.
struct FeatureScaler {
  std::vector<double> mean, inv_std;

  static FeatureScaler fit(const Tensor& x) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    FeatureScaler s;
    s.mean.assign(d, 0.0);
    s.inv_std.assign(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += x.at(r, j);
    for (double& m : s.mean) m /= static_cast<double>(n);
    std::vector<double> var(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) var[j] += std::pow(x.at(r, j) - s.mean[j], 2);
    const double root_d = std::sqrt(static_cast<double>(d));
    for (std::size_t j = 0; j < d; ++j) {
      const double sd = std::sqrt(var[j] / static_cast<double>(n));
      s.inv_std[j] = sd > 1e-12 ? 1.0 / (sd * root_d) : 0.0;
    }
    return s;
  }

  Tensor apply(const Tensor& x) const {
    Tensor out = x;
    for (std::size_t r = 0; r < x.dim(0); ++r)
      for (std::size_t j = 0; j < x.dim(1); ++j) out.at(r, j) = (x.at(r, j) - mean[j]) * inv_std[j];
    return out;
  }
};

struct LinearClassifier {
  Var weight;  // [d, K]
  Var bias;    // [K]
  FeatureScaler scaler;

  std::size_t num_classes() const { return bias.value().dim(0); }

  // Logits for raw (unscaled) pooled features.
  Tensor logits(const Tensor& features) const {
    return add_row(matmul(Var::constant(scaler.apply(features)), Var::constant(weight.value())),
                   Var::constant(bias.value()))
        .value();
  }

  std::vector<ClassId> predict(const Tensor& features) const {
    const Tensor l = logits(features);
    std::vector<ClassId> out(l.dim(0));
    for (std::size_t r = 0; r < out.size(); ++r) {
      const auto row = l.row(r);
      out[r] = static_cast<ClassId>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }
};

// Mean cross-entropy of integer labels under logits [N, K].
inline Var cross_entropy(const Var& logits, std::span<const ClassId> labels) {
  const std::size_t N = logits.value().dim(0), K = logits.value().dim(1);
  Tensor onehot(Shape{N, K}, 0.0);
  for (std::size_t r = 0; r < N; ++r) onehot.at(r, labels[r]) = 1.0;
  return soft_cross_entropy(logits, onehot, 1.0);
}

// Draws a training index: class uniformly then an item within it (balanced), or an
// item uniformly (instance-balanced).
class ClassSampler {
 public:
  ClassSampler(const std::vector<ClassId>& labels, std::size_t num_classes, bool balanced)
      : by_class_(num_classes), balanced_(balanced), n_(labels.size()) {
    for (std::size_t i = 0; i < labels.size(); ++i) by_class_[labels[i]].push_back(i);
    for (std::size_t k = 0; k < num_classes; ++k)
      if (!by_class_[k].empty()) present_.push_back(k);
    if (present_.empty()) throw SpecError("ClassSampler: no labelled samples");
  }

  std::size_t draw(Rng& rng) const {
    if (!balanced_) return static_cast<std::size_t>(rng.index(n_));
    const auto& items = by_class_[present_[rng.index(present_.size())]];
    return items[rng.index(items.size())];
  }

 private:
  std::vector<std::vector<std::size_t>> by_class_;
  std::vector<ClassId> present_;
  bool balanced_;
  std::size_t n_;
};

inline LinearClassifier train_linear_on_features(const Tensor& features, const std::vector<ClassId>& labels,
                                                 std::size_t num_classes, const Stage2Config& cfg) {
  cfg.validate();
  const std::size_t n = features.dim(0), d = features.dim(1);
  LinearClassifier clf;
  clf.scaler = FeatureScaler::fit(features);
  const Tensor x = clf.scaler.apply(features);
  clf.weight = Var::parameter(Tensor(Shape{d, num_classes}, 0.0));
  clf.bias = Var::parameter(Tensor(Shape{num_classes}, 0.0));
  SgdMomentum opt({clf.weight, clf.bias}, cfg.momentum, cfg.weight_decay);
  const ClassSampler sampler(labels, num_classes, cfg.class_balanced);
  Rng rng(derive_seed(cfg.seed, {0x52}));
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, (n + cfg.batch_size - 1) / cfg.batch_size);
  Tensor xb(Shape{cfg.batch_size, d});
  std::vector<ClassId> yb(cfg.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at_epoch(epoch);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const std::size_t i = sampler.draw(rng);
        std::copy_n(x.data() + i * d, d, xb.data() + b * d);
        yb[b] = labels[i];
      }
      opt.zero_grad();
      cross_entropy(add_row(matmul(Var::constant(xb), clf.weight), clf.bias), yb).backward();
      opt.step(lr);
    }
  }
  return clf;
}

// Frozen-backbone linear probe; the projection head is not used.
inline LinearClassifier stage2_train_linear(const EncoderParams& backbone, const SynthDataset& ds,
                                            const Stage2Config& cfg, std::size_t threads = 1) {
  const Tensor f = extract_features(backbone, ds.train, threads);
  return train_linear_on_features(f, ds.train_labels(), ds.spec.num_classes(), cfg);
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Split { many, medium, few };

// Many > 100, Medium 20..100, Few < 20 training images.
inline Split split_of(std::size_t train_count) {
  if (train_count > 100) return Split::many;
  if (train_count >= 20) return Split::medium;
  return Split::few;
}

struct SplitReport {
  double overall = 0.0;
  std::optional<double> many, medium, few;
  std::vector<std::optional<double>> per_class;  // nullopt: no test samples
  std::vector<std::string> warnings;

  Json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    Json pc = Json::array();
    for (const auto& v : per_class) pc.push_back(opt(v));
    return Json{{"overall", overall}, {"many", opt(many)}, {"medium", opt(medium)}, {"few", opt(few)},
                {"per_class", pc},    {"warnings", warnings}};
  }
};

inline SplitReport evaluate_predictions(std::span<const ClassId> predicted, std::span<const ClassId> truth,
                                        const std::vector<std::size_t>& train_counts) {
  const std::size_t K = train_counts.size();
  std::vector<std::size_t> correct(K, 0), total(K, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++total[truth[i]];
    correct[truth[i]] += predicted[i] == truth[i];
  }
  SplitReport rep;
  rep.per_class.resize(K);
  double sums[3] = {0, 0, 0};
  std::size_t counts[3] = {0, 0, 0};
  double all = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (total[k] == 0) {
      rep.warnings.push_back("class " + std::to_string(k) + " has no test samples; excluded");
      continue;
    }
    const double acc = static_cast<double>(correct[k]) / static_cast<double>(total[k]);
    rep.per_class[k] = acc;
    const auto s = static_cast<std::size_t>(split_of(train_counts[k]));
    sums[s] += acc;
    ++counts[s];
    all += acc;
    ++present;
  }
  rep.overall = present ? all / static_cast<double>(present) : 0.0;
  if (counts[0]) rep.many = sums[0] / static_cast<double>(counts[0]);
  if (counts[1]) rep.medium = sums[1] / static_cast<double>(counts[1]);
  if (counts[2]) rep.few = sums[2] / static_cast<double>(counts[2]);
  return rep;
}

inline SplitReport evaluate_splits(const LinearClassifier& clf, const EncoderParams& backbone,
                                   const std::vector<SynthImage>& test, const std::vector<std::size_t>& train_counts,
                                   std::size_t threads = 1) {
  const Tensor f = extract_features(backbone, test, threads);
  std::vector<ClassId> truth(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) truth[i] = test[i].label;
  return evaluate_predictions(clf.predict(f), truth, train_counts);
}

// ---------------------------------------------------------------------------
// Classifier persistence (JSON; values printed round-trip exact)

inline Json classifier_to_json(const LinearClassifier& c) {
  return Json{{"weight_shape", c.weight.shape()},
              {"weight", std::vector<double>(c.weight.value().values().begin(), c.weight.value().values().end())},
              {"bias", std::vector<double>(c.bias.value().values().begin(), c.bias.value().values().end())},
              {"scaler_mean", c.scaler.mean},
              {"scaler_inv_std", c.scaler.inv_std}};
}

inline LinearClassifier classifier_from_json(const Json& j) {
  LinearClassifier c;
  const auto shape = j.at("weight_shape").get<Shape>();
  if (shape.size() != 2) throw FormatError("classifier weight must be a matrix");
  c.weight = Var::constant(Tensor(shape, j.at("weight").get<std::vector<double>>()));
  c.bias = Var::constant(Tensor(Shape{shape[1]}, j.at("bias").get<std::vector<double>>()));
  c.scaler.mean = j.at("scaler_mean").get<std::vector<double>>();
  c.scaler.inv_std = j.at("scaler_inv_std").get<std::vector<double>>();
  if (c.weight.value().size() != shape[0] * shape[1] || c.scaler.mean.size() != shape[0]) {
    throw FormatError("classifier file is inconsistent");
  }
  return c;
}

}  // namespace dscl
