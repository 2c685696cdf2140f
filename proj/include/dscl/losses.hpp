#pragma once

// Contrastive losses over the candidate set {z+} ∪ M, patch self-distillation, and
// the analytic gradient oracles used to check them.
//
// Every contrastive loss here is a soft-target cross-entropy over candidate logits
// s_m / tau, with per-anchor target row T:
//   SCL:  T = 1/(|P|+1) on z+ and each queue positive
//   DSCL: T = w/(|P|+1), w_plus = alpha(|P|+1), w_queue = (1-alpha)(|P|+1)/|P|
// Weighting a positive's logit in the numerator and dividing by |P|+1 gives exactly
// LSE - sum_t T_t s_t / tau, i.e. -sum T log p when sum T = 1.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dscl/autograd.hpp"
#include "dscl/encoder.hpp"
#include "dscl/json_util.hpp"
#include "dscl/queue.hpp"

namespace dscl {

enum class ContrastiveMode { scl, dscl };
enum class PatchMode { none, pbsd, multicrop, pbsd_global };
enum class TargetBranch { online, ema };

inline const char* to_string(ContrastiveMode m) { return m == ContrastiveMode::scl ? "scl" : "dscl"; }
inline const char* to_string(PatchMode m) {
  switch (m) {
    case PatchMode::none: return "none";
    case PatchMode::pbsd: return "pbsd";
    case PatchMode::multicrop: return "multicrop";
    case PatchMode::pbsd_global: return "pbsd_global";
  }
  return "?";
}
inline const char* to_string(TargetBranch b) { return b == TargetBranch::online ? "online" : "ema"; }

struct LossConfig {
  double tau = 0.07;
  double alpha = 0.1;
  double lambda = 1.5;
  std::size_t patches = 5;
  Range patch_scale{0.05, 0.6};
  Range patch_aspect{3.0 / 4.0, 4.0 / 3.0};
  ContrastiveMode mode = ContrastiveMode::dscl;
  PatchMode patch_mode = PatchMode::pbsd;
  TargetBranch target_branch = TargetBranch::online;

  bool uses_patches() const { return patch_mode != PatchMode::none && patches > 0; }

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("loss.tau must be > 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("loss.alpha must lie in [0, 1]");
    if (!(lambda >= 0.0)) throw ConfigError("loss.lambda must be >= 0");
    if (patch_mode != PatchMode::none && patches < 1) throw ConfigError("loss.patches must be >= 1");
    if (!(patch_scale.lo > 0.0 && patch_scale.lo <= patch_scale.hi && patch_scale.hi <= 1.0)) {
      throw ConfigError("loss.patch_scale must satisfy 0 < min <= max <= 1");
    }
    if (!(patch_aspect.lo > 0.0 && patch_aspect.lo <= patch_aspect.hi)) {
      throw ConfigError("loss.patch_aspect must satisfy 0 < min <= max");
    }
  }
};

inline Json loss_config_to_json(const LossConfig& c) {
  return Json{{"tau", c.tau},
              {"alpha", c.alpha},
              {"lambda", c.lambda},
              {"patches", c.patches},
              {"patch_scale", {c.patch_scale.lo, c.patch_scale.hi}},
              {"patch_aspect", {c.patch_aspect.lo, c.patch_aspect.hi}},
              {"mode", to_string(c.mode)},
              {"patch_mode", to_string(c.patch_mode)},
              {"target_branch", to_string(c.target_branch)}};
}

inline LossConfig loss_config_from_json(const Json& j, LossConfig c = {}) {
  require_known_keys(j, "loss",
                     {"tau", "alpha", "lambda", "patches", "patch_scale", "patch_aspect", "mode", "patch_mode",
                      "target_branch"});
  read_opt(j, "tau", c.tau, "loss");
  read_opt(j, "alpha", c.alpha, "loss");
  read_opt(j, "lambda", c.lambda, "loss");
  read_opt(j, "patches", c.patches, "loss");
  auto range = [&](const char* key, Range& r) {
    if (!j.contains(key)) return;
    std::vector<double> v;
    read_opt(j, key, v, "loss");
    if (v.size() != 2) throw ConfigError(std::string("loss.") + key + ": expected [min, max]");
    r = {v[0], v[1]};
  };
  range("patch_scale", c.patch_scale);
  range("patch_aspect", c.patch_aspect);
  if (j.contains("mode")) {
    const std::string m = j.at("mode").get<std::string>();
    if (m == "scl") c.mode = ContrastiveMode::scl;
    else if (m == "dscl") c.mode = ContrastiveMode::dscl;
    else throw ConfigError("loss.mode: expected scl|dscl, got '" + m + "'");
  }
  if (j.contains("patch_mode")) {
    const std::string m = j.at("patch_mode").get<std::string>();
    if (m == "none") c.patch_mode = PatchMode::none;
    else if (m == "pbsd") c.patch_mode = PatchMode::pbsd;
    else if (m == "multicrop") c.patch_mode = PatchMode::multicrop;
    else if (m == "pbsd_global") c.patch_mode = PatchMode::pbsd_global;
    else throw ConfigError("loss.patch_mode: expected none|pbsd|multicrop|pbsd_global, got '" + m + "'");
  }
  if (j.contains("target_branch")) {
    const std::string m = j.at("target_branch").get<std::string>();
    if (m == "online") c.target_branch = TargetBranch::online;
    else if (m == "ema") c.target_branch = TargetBranch::ema;
    else throw ConfigError("loss.target_branch: expected online|ema, got '" + m + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Positive weights

template <typename T>
struct BasicPositiveWeights {
  T w_plus;
  T w_queue;
};
using PositiveWeights = BasicPositiveWeights<double>;

// Weights for |P| queue positives; |P| = 0 falls back to the augmentation-only term.
// Templated so the algebra can be checked in exact arithmetic.
template <typename T>
BasicPositiveWeights<T> positive_weights_as(T alpha, std::size_t num_pos) {
  if (num_pos == 0) return {T(1), T(0)};
  const T n1 = T(static_cast<long long>(num_pos) + 1);
  const T np = T(static_cast<long long>(num_pos));
  return {alpha * n1, (T(1) - alpha) * n1 / np};
}

inline PositiveWeights positive_weights(double alpha, std::size_t num_pos) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  return positive_weights_as<double>(alpha, num_pos);
}

// Target row over [z+ | queue] for one anchor.
inline void fill_targets(std::span<double> row, std::span<const ClassId> queue_labels, ClassId label, ContrastiveMode mode,
                         double alpha, std::size_t* num_pos_out = nullptr) {
  std::size_t num_pos = 0;
  for (ClassId y : queue_labels) num_pos += y == label;
  const double n1 = static_cast<double>(num_pos + 1);
  double t_plus, t_queue;
  if (mode == ContrastiveMode::scl || num_pos == 0) {
    t_plus = t_queue = 1.0 / n1;
    if (num_pos == 0) t_plus = 1.0;
  } else {
    const PositiveWeights w = positive_weights(alpha, num_pos);
    t_plus = w.w_plus / n1;
    t_queue = w.w_queue / n1;
  }
  row[0] = t_plus;
  for (std::size_t m = 0; m < queue_labels.size(); ++m) row[m + 1] = queue_labels[m] == label ? t_queue : 0.0;
  if (num_pos_out) *num_pos_out = num_pos;
}

// ---------------------------------------------------------------------------
// Value-level helpers (no tape)

// Candidate dot products [z+ · a, q_1 · a, ..., q_M · a].
inline std::vector<double> candidate_similarities(std::span<const double> anchor, std::span<const double> zplus,
                                                  const QueueSnapshot& snap) {
  std::vector<double> s(snap.size() + 1);
  s[0] = dot(anchor, zplus);
  for (std::size_t m = 0; m < snap.size(); ++m) s[m + 1] = dot(anchor, snap.row(m));
  return s;
}

inline std::vector<double> stable_softmax(std::span<const double> logits, double tau) {
  detail::check_temperature(tau);
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l / tau);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] / tau - mx);
  for (double& v : p) v /= z;
  return p;
}

// p(z_t | anchor) over {z+} ∪ M; entry 0 is z+.
inline std::vector<double> conditional_prob(std::span<const double> anchor, std::span<const double> zplus,
                                            const QueueSnapshot& snap, double tau) {
  return stable_softmax(candidate_similarities(anchor, zplus, snap), tau);
}

// (1/tau) [sum_N z_j p_j + z+(p+ - 1/(|P|+1)) + sum_P z_t (p_t - 1/(|P|+1))], candidates held fixed.
inline std::vector<double> scl_anchor_gradient_analytic(std::span<const double> anchor, std::span<const double> zplus,
                                                        const QueueSnapshot& snap, ClassId label, double tau) {
  const auto p = conditional_prob(anchor, zplus, snap, tau);
  std::vector<double> target(p.size());
  fill_targets(target, snap.labels(), label, ContrastiveMode::scl, 0.0);
  std::vector<double> g(anchor.size(), 0.0);
  for (std::size_t j = 0; j < anchor.size(); ++j) g[j] += zplus[j] * (p[0] - target[0]);
  for (std::size_t m = 0; m < snap.size(); ++m) {
    const auto row = snap.row(m);
    for (std::size_t j = 0; j < anchor.size(); ++j) g[j] += row[j] * (p[m + 1] - target[m + 1]);
  }
  for (double& v : g) v /= tau;
  return g;
}

// ||grad term from z+|| / sum_{t in P} ||grad term from z_t|| for the mode's targets.
inline double positive_gradient_ratio(std::span<const double> anchor, std::span<const double> zplus,
                                      const QueueSnapshot& snap, ClassId label, double tau, ContrastiveMode mode,
                                      double alpha) {
  const auto p = conditional_prob(anchor, zplus, snap, tau);
  std::vector<double> target(p.size());
  std::size_t num_pos = 0;
  fill_targets(target, snap.labels(), label, mode, alpha, &num_pos);
  if (num_pos == 0) throw DegenerateInputError("gradient ratio undefined: anchor has no queue positives");
  const double num = std::abs(p[0] - target[0]) * l2_norm(zplus);
  double den = 0.0;
  for (std::size_t m = 0; m < snap.size(); ++m)
    if (snap.labels()[m] == label) den += std::abs(p[m + 1] - target[m + 1]) * l2_norm(snap.row(m));
  if (!(den > 0.0)) throw DegenerateInputError("gradient ratio undefined: queue-positive gradient vanishes");
  return num / den;
}

// Detached distillation target softmax([c·z+, c·M] / tau).
inline std::vector<double> pbsd_target_distribution(std::span<const double> c, std::span<const double> zplus,
                                                    const QueueSnapshot& snap, double tau) {
  return conditional_prob(c, zplus, snap, tau);
}

// ---------------------------------------------------------------------------
// Taped losses

// Logits [R, 1 + M]: column 0 is rowwise q·z+, the rest q·queue^T.
inline Var candidate_logits(const Var& q, const Var& zplus, const Var& queue) {
  const Var pos = rowdot(q, zplus);
  if (queue.value().rank() != 2 || queue.value().dim(0) == 0) return pos;
  return concat_cols(pos, matmul(q, queue, /*transpose_b=*/true));
}

inline Var as_matrix(const Var& v) {
  return v.value().rank() == 1 ? reshape(v, Shape{1, v.value().dim(0)}) : v;
}

struct ContrastiveStats {
  Tensor probs;    // [R, 1 + M]
  Tensor targets;  // [R, 1 + M]
  std::vector<std::size_t> num_pos;
  std::size_t fallbacks = 0;  // anchors with |P| = 0
};

// Mean over rows of -sum_m T_m log softmax(logits / tau)_m.
inline Var soft_cross_entropy(const Var& logits, const Tensor& targets, double tau) {
  require_same_shape(logits.value(), targets, "soft_cross_entropy");
  const double rows = static_cast<double>(targets.dim(0));
  return scale(sum(mul(Var::constant(targets), log_softmax(logits, tau))), -1.0 / rows);
}

// Batch contrastive loss. anchors [R, d]; zplus [R, d] (row r is anchor r's augmentation
// positive); queue [M, d] with labels; anchor_labels [R].
inline Var contrastive_loss(const Var& anchors, const Var& zplus, const Var& queue, std::span<const ClassId> queue_labels,
                            std::span<const ClassId> anchor_labels, ContrastiveMode mode, double alpha, double tau,
                            ContrastiveStats* stats = nullptr) {
  const Var a = as_matrix(anchors), zp = as_matrix(zplus);
  require_same_shape(a.value(), zp.value(), "contrastive_loss");
  const std::size_t R = a.value().dim(0);
  const std::size_t M = queue.value().rank() == 2 ? queue.value().dim(0) : 0;
  if (anchor_labels.size() != R || queue_labels.size() != M) {
    throw StructuralError("contrastive_loss: label counts do not match anchors/queue");
  }
  const Var logits = candidate_logits(a, zp, queue);
  Tensor targets(Shape{R, M + 1});
  std::vector<std::size_t> num_pos(R);
  std::size_t fallbacks = 0;
  for (std::size_t r = 0; r < R; ++r) {
    fill_targets(targets.values().subspan(r * (M + 1), M + 1), queue_labels, anchor_labels[r], mode, alpha, &num_pos[r]);
    fallbacks += num_pos[r] == 0;
  }
  if (stats) {
    stats->probs = softmax(Var::constant(logits.value()), tau).value();
    stats->num_pos = num_pos;
    stats->fallbacks = fallbacks;
  }
  Var loss = soft_cross_entropy(logits, targets, tau);
  if (stats) stats->targets = std::move(targets);
  return loss;
}

inline Var contrastive_loss(const Var& anchors, const Var& zplus, const QueueSnapshot& snap,
                            std::span<const ClassId> anchor_labels, ContrastiveMode mode, double alpha, double tau,
                            ContrastiveStats* stats = nullptr) {
  return contrastive_loss(anchors, zplus, Var::constant(snap.embeddings()), snap.labels(), anchor_labels, mode, alpha,
                          tau, stats);
}

// Single-anchor forms; `anchor` is the (already normalized) z_i.
inline Var scl_loss(const Var& anchor, const Var& zplus, const QueueSnapshot& snap, ClassId label, double tau) {
  return contrastive_loss(anchor, zplus, snap, std::span<const ClassId>(&label, 1), ContrastiveMode::scl, 0.0, tau);
}

inline Var dscl_loss(const Var& anchor, const Var& zplus, const QueueSnapshot& snap, ClassId label, double tau,
                     double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  return contrastive_loss(anchor, zplus, snap, std::span<const ClassId>(&label, 1), ContrastiveMode::dscl, alpha, tau);
}

// Repeats each row of `x` `times` times: [N, d] -> [N * times, d].
inline Tensor repeat_rows(const Tensor& x, std::size_t times) {
  require_rank(x, 2, "repeat_rows");
  const std::size_t N = x.dim(0), d = x.dim(1);
  Tensor out(Shape{N * times, d});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < times; ++t) std::copy_n(x.data() + n * d, d, out.data() + (n * times + t) * d);
  return out;
}

// Rows of softmax([c·z+ | c·M] / tau), detached. c and zplus are [R, d].
inline Tensor pbsd_targets(const Tensor& c, const Tensor& zplus, const Tensor& queue, double tau) {
  const Var logits = candidate_logits(Var::constant(c), Var::constant(zplus), Var::constant(queue));
  return softmax(logits, tau).value();
}

// Patch distillation: mean over the R patches of CE(target from c, prediction from s).
// `c` is detached here whatever its history; zplus [R, d] holds each patch's anchor z+.
inline Var pbsd_loss(const Var& s, const Var& c, const Var& zplus, const Var& queue, double tau) {
  const Var sm = as_matrix(s);
  const Tensor target = pbsd_targets(as_matrix(detach(c)).value(), as_matrix(zplus).value(), queue.value(), tau);
  return soft_cross_entropy(candidate_logits(sm, as_matrix(zplus), queue), target, tau);
}

inline Var pbsd_loss(const Var& s, const Var& c, const Var& zplus, const QueueSnapshot& snap, double tau) {
  return pbsd_loss(s, c, zplus, Var::constant(snap.embeddings()), tau);
}

// DSCL on the global anchors plus lambda times the mean DSCL loss of the patch crops, each
// crop acting as an extra query against its image's z+ and the queue. No crops -> DSCL.
inline Var multicrop_loss(const Var& z, const Var& s, const Var& zplus, const QueueSnapshot& snap,
                          std::span<const ClassId> labels, std::size_t crops_per_image, double tau, double alpha,
                          double lambda = 1.0, ContrastiveMode mode = ContrastiveMode::dscl) {
  const Var base = contrastive_loss(z, zplus, snap, labels, mode, alpha, tau);
  if (crops_per_image == 0) return base;
  std::vector<ClassId> crop_labels;
  for (ClassId y : labels) crop_labels.insert(crop_labels.end(), crops_per_image, y);
  const Var zp = Var::constant(repeat_rows(as_matrix(zplus).value(), crops_per_image));
  const Var crops = contrastive_loss(s, zp, snap, crop_labels, mode, alpha, tau);
  return weighted_sum({base, crops}, {1.0, lambda});
}

// ---------------------------------------------------------------------------
// Full objective on a batch

struct BatchInputs {
  std::vector<const Tensor*> view_a;          // online views, H x W x C
  Tensor zplus;                               // [B, d] EMA embeddings of the second views
  std::vector<ClassId> labels;                // [B]
  std::vector<std::vector<PatchBox>> boxes;   // per image, L boxes (may be empty)
  // Distillation targets [B * L, d] to use instead of recomputing them; lets a
  // finite-difference check hold the stop-gradient branch fixed.
  std::optional<Tensor> fixed_targets;
};

struct ObjectiveTerms {
  Var total;
  double contrastive = 0.0;
  double patch = 0.0;  // distillation or multicrop term, before lambda
  ContrastiveStats stats;
  Tensor z;  // online global embeddings [B, d]
  Tensor c;  // distillation target embeddings [B * L, d] (empty if unused)
};

// L_contrastive + lambda * L_patch averaged over anchors. `target_params` supplies the
// feature map for ROI targets when the target branch is the EMA encoder.
inline ObjectiveTerms overall_objective(const EncoderParams& online, const EncoderParams* target_params,
                                        const BatchInputs& batch, const QueueSnapshot& snap, const LossConfig& cfg) {
  const std::size_t B = batch.view_a.size();
  if (B == 0 || batch.labels.size() != B || batch.zplus.rank() != 2 || batch.zplus.dim(0) != B) {
    throw StructuralError("overall_objective: inconsistent batch");
  }
  const Tensor x = to_batch(std::span<const Tensor* const>(batch.view_a));
  const Encoded enc = encode(online, Var::constant(x));
  const Var z = project(online, enc.v);
  const Var zplus = Var::constant(batch.zplus);
  const Var queue = Var::constant(snap.embeddings());

  ObjectiveTerms out;
  out.z = z.value();
  const Var lc = contrastive_loss(z, zplus, queue, snap.labels(), batch.labels, cfg.mode, cfg.alpha, cfg.tau, &out.stats);
  out.contrastive = lc.item();
  if (!cfg.uses_patches() || cfg.lambda == 0.0) {
    out.total = lc;
    return out;
  }

  std::vector<Roi> rois;
  std::vector<const Tensor*> crop_src;
  std::vector<PatchBox> crop_boxes;
  for (std::size_t i = 0; i < B; ++i) {
    if (batch.boxes.size() != B || batch.boxes[i].size() != cfg.patches) {
      throw StructuralError("overall_objective: expected " + std::to_string(cfg.patches) + " boxes per image");
    }
    for (const PatchBox& b : batch.boxes[i]) {
      rois.push_back({i, b});
      crop_src.push_back(batch.view_a[i]);
      crop_boxes.push_back(b);
    }
  }
  const Var s = embed_patches(online, crop_src, crop_boxes, online.config.patch_size);
  const Tensor zplus_rep = repeat_rows(batch.zplus, cfg.patches);

  Var lp;
  if (cfg.patch_mode == PatchMode::multicrop) {
    std::vector<ClassId> crop_labels;
    for (ClassId y : batch.labels) crop_labels.insert(crop_labels.end(), cfg.patches, y);
    lp = contrastive_loss(s, Var::constant(zplus_rep), queue, snap.labels(), crop_labels, cfg.mode, cfg.alpha, cfg.tau);
  } else {
    Tensor c;
    if (batch.fixed_targets) {
      c = *batch.fixed_targets;
    } else if (cfg.patch_mode == PatchMode::pbsd_global) {
      c = repeat_rows(z.value(), cfg.patches);
    } else if (cfg.target_branch == TargetBranch::ema && target_params) {
      const Encoded te = encode(*target_params, Var::constant(x));
      c = roi_pool_project(*target_params, te.u, rois).value();
    } else {
      c = roi_pool_project(online, detach(enc.u), rois).value();
    }
    lp = pbsd_loss(s, Var::constant(c), Var::constant(zplus_rep), queue, cfg.tau);
    out.c = std::move(c);
  }
  out.patch = lp.item();
  out.total = weighted_sum({lc, lp}, {1.0, cfg.lambda});
  return out;
}

}  // namespace dscl
