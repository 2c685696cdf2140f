#pragma once

// Experiment drivers behind the CLI: gradient-ratio buckets at initialization, the
// free-embedding convergence probe, ablation tables over seeds, hyperparameter
// sweeps and patch retrieval. Each writes CSV (the contract), optional SVG/PPM
// renderings and a report.json that embeds the exact config.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dscl/config.hpp"
#include "dscl/plot.hpp"

namespace dscl {

using LogFn = std::function<void(const std::string&)>;

struct ExperimentReport {
  std::string id;
  Json config;
  std::string config_hash;
  Json results = Json::object();
  std::vector<std::string> artifacts;
  std::vector<std::string> warnings;

  ExperimentReport(std::string name, const RunConfig& cfg)
      : id(std::move(name)), config(run_config_to_json(cfg)), config_hash(dscl::config_hash(cfg)) {}

  Json to_json() const {
    return Json{{"experiment", id}, {"config_hash", config_hash}, {"config", config},
                {"results", results}, {"artifacts", artifacts},    {"warnings", warnings}};
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    detail::write_file(dir / "report.json", to_json().dump(2) + "\n");
  }
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  m.n = xs.size();
  if (xs.empty()) return m;
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Full pipeline

struct PipelineResult {
  Stage1Result stage1;
  LinearClassifier classifier;
  SplitReport report;
};

inline PipelineResult run_pipeline(const SynthDataset& ds, const RunConfig& cfg, std::size_t threads = 1,
                                   const ProgressFn& progress = {}) {
  PipelineResult out;
  out.stage1 = stage1_train(ds, cfg.encoder, cfg.stage1, threads, progress);
  out.classifier = stage2_train_linear(out.stage1.checkpoint.online, ds, cfg.stage2, threads);
  out.report = evaluate_splits(out.classifier, out.stage1.checkpoint.online, ds.test, ds.spec.class_counts, threads);
  return out;
}

// "<scl|dscl>[+<pbsd|pbsd_ema|multicrop|pbsd_global>][@key=value,...]" with keys
// alpha, lambda, patches, tau.
inline LossConfig apply_variant(LossConfig base, const std::string& variant) {
  std::string head = variant, overrides;
  if (const auto at = variant.find('@'); at != std::string::npos) {
    head = variant.substr(0, at);
    overrides = variant.substr(at + 1);
  }
  std::string mode = head, patch = "none";
  if (const auto plus = head.find('+'); plus != std::string::npos) {
    mode = head.substr(0, plus);
    patch = head.substr(plus + 1);
  }
  if (mode == "scl") base.mode = ContrastiveMode::scl;
  else if (mode == "dscl") base.mode = ContrastiveMode::dscl;
  else throw ConfigError("variant '" + variant + "': unknown contrastive mode '" + mode + "'");
  base.target_branch = TargetBranch::online;
  if (patch == "none") base.patch_mode = PatchMode::none;
  else if (patch == "pbsd") base.patch_mode = PatchMode::pbsd;
  else if (patch == "pbsd_ema") {
    base.patch_mode = PatchMode::pbsd;
    base.target_branch = TargetBranch::ema;
  } else if (patch == "multicrop") base.patch_mode = PatchMode::multicrop;
  else if (patch == "pbsd_global") base.patch_mode = PatchMode::pbsd_global;
  else throw ConfigError("variant '" + variant + "': unknown patch mode '" + patch + "'");
  std::stringstream ss(overrides);
  std::string kv;
  while (std::getline(ss, kv, ',')) {
    if (kv.empty()) continue;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("variant '" + variant + "': expected key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    try {
      if (key == "alpha") base.alpha = std::stod(val);
      else if (key == "lambda") base.lambda = std::stod(val);
      else if (key == "tau") base.tau = std::stod(val);
      else if (key == "patches") base.patches = std::stoul(val);
      else throw ConfigError("variant '" + variant + "': unknown override '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("variant '" + variant + "': bad value for " + key);
    }
  }
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// Gradient ratio at initialization

struct RatioBucket {
  std::size_t num_pos = 0;
  std::size_t anchors = 0;
  double scl_mean = 0.0, dscl_mean = 0.0;
  double scl_theory = 0.0, dscl_theory = 0.0;
};

struct GradRatioResult {
  double alpha = 0.0;
  std::vector<RatioBucket> buckets;  // ascending |P|, buckets below min_bucket removed
  std::vector<std::string> warnings;

  // Mean absolute relative deviation from theory over buckets with >= min_anchors.
  std::pair<double, double> mard(std::size_t min_anchors) const {
    double s = 0.0, d = 0.0;
    std::size_t n = 0;
    for (const auto& b : buckets) {
      if (b.anchors < min_anchors) continue;
      s += std::abs(b.scl_mean - b.scl_theory) / b.scl_theory;
      d += std::abs(b.dscl_mean - b.dscl_theory) / b.dscl_theory;
      ++n;
    }
    if (n == 0) return {std::nan(""), std::nan("")};
    return {s / static_cast<double>(n), d / static_cast<double>(n)};
  }
};

namespace detail {
constexpr std::uint64_t kRatioTag = 0x6A;
constexpr std::uint64_t kFillTag = 0x6B;
}  // namespace detail

// Queue filled from EMA (= initial) embeddings of augmented training views, then one
// frozen snapshot; every class contributes anchors_per_class anchors (cycling through
// its images with fresh views), so each class forms one exact-|P| bucket.
inline GradRatioResult gradient_ratio_experiment(const SynthDataset& ds, const RunConfig& cfg, std::size_t threads = 1) {
  const Stage1Config& s1 = cfg.stage1;
  const EncoderParams online = init_encoder(cfg.encoder, derive_seed(s1.seed, {0x1A17}));
  const EncoderParams ema = online.clone(false);
  MemoryQueue queue(s1.queue_capacity, cfg.encoder.d_proj);

  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(derive_seed(s1.seed, {detail::kFillTag}));
  shuffle.shuffle(order);
  for (std::size_t begin = 0; !queue.full(); begin += s1.batch_size) {
    std::vector<Tensor> views(s1.batch_size);
    std::vector<ClassId> labels(s1.batch_size);
    parallel_for(s1.batch_size, threads, [&](std::size_t i) {
      const std::size_t idx = order[(begin + i) % order.size()];
      Rng rng(derive_seed(s1.seed, {detail::kFillTag, begin + i}));
      views[i] = augment_view(ds.train[idx], s1.augment, rng).pixels;
      labels[i] = ds.train[idx].label;
    });
    const std::size_t take = std::min(s1.batch_size, queue.capacity() - queue.size());
    views.resize(take);
    labels.resize(take);
    queue.enqueue_batch(embed_images(ema, to_batch(views)).value(), labels);
  }
  const QueueSnapshot snap = queue.snapshot();

  GradRatioResult res;
  res.alpha = s1.loss.alpha;
  const std::size_t K = ds.spec.num_classes();
  std::vector<std::vector<std::size_t>> by_class(K);
  for (std::size_t i = 0; i < ds.train.size(); ++i) by_class[ds.train[i].label].push_back(i);
  std::map<std::size_t, RatioBucket> buckets;
  const std::size_t A = cfg.experiment.grad_ratio.anchors_per_class;
  for (ClassId k = 0; k < K; ++k) {
    const std::size_t P = snap.count_of(k);
    if (P == 0) {
      res.warnings.push_back("class " + std::to_string(k) + " absent from the queue; gradient ratio undefined");
      continue;
    }
    std::vector<Tensor> va(A), vb(A);
    parallel_for(A, threads, [&](std::size_t a) {
      auto [x, y] = augment_two_views(ds.train[by_class[k][a % by_class[k].size()]], s1.augment,
                                      derive_seed(s1.seed, {detail::kRatioTag, k, a}));
      va[a] = std::move(x.pixels);
      vb[a] = std::move(y.pixels);
    });
    const Tensor z = embed_images(online, to_batch(va)).value();
    const Tensor zp = embed_images(ema, to_batch(vb)).value();
    RatioBucket& b = buckets[P];
    b.num_pos = P;
    for (std::size_t a = 0; a < A; ++a) {
      b.scl_mean += positive_gradient_ratio(z.row(a), zp.row(a), snap, k, s1.loss.tau, ContrastiveMode::scl, 0.0);
      b.dscl_mean +=
          positive_gradient_ratio(z.row(a), zp.row(a), snap, k, s1.loss.tau, ContrastiveMode::dscl, s1.loss.alpha);
    }
    b.anchors += A;
  }
  for (auto& [P, b] : buckets) {
    if (b.anchors < cfg.experiment.grad_ratio.min_bucket) {
      res.warnings.push_back("bucket |P|=" + std::to_string(P) + " has only " + std::to_string(b.anchors) +
                             " anchors; dropped");
      continue;
    }
    b.scl_mean /= static_cast<double>(b.anchors);
    b.dscl_mean /= static_cast<double>(b.anchors);
    b.scl_theory = 1.0 / static_cast<double>(P);
    b.dscl_theory = s1.loss.alpha / (1.0 - s1.loss.alpha);
    res.buckets.push_back(b);
  }
  return res;
}

inline void write_grad_ratio_artifacts(const GradRatioResult& r, const std::filesystem::path& dir, ExperimentReport& rep) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "grad_ratio.csv");
  csv << "num_pos,anchors,scl_mean,scl_theory,dscl_mean,dscl_theory\n";
  PlotSeries scl{"SCL", {}, {}}, dscl{"DSCL", {}, {}}, scl_t{"1/|P|", {}, {}, true, false},
      dscl_t{"alpha/(1-alpha)", {}, {}, true, false};
  for (const auto& b : r.buckets) {
    csv << b.num_pos << ',' << b.anchors << ',' << format_number(b.scl_mean) << ',' << format_number(b.scl_theory) << ','
        << format_number(b.dscl_mean) << ',' << format_number(b.dscl_theory) << '\n';
    const double x = static_cast<double>(b.num_pos);
    scl.x.push_back(x), scl.y.push_back(b.scl_mean);
    dscl.x.push_back(x), dscl.y.push_back(b.dscl_mean);
    scl_t.x.push_back(x), scl_t.y.push_back(b.scl_theory);
    dscl_t.x.push_back(x), dscl_t.y.push_back(b.dscl_theory);
  }
  write_svg_plot(dir / "grad_ratio.svg",
                 {"Positive gradient ratio at initialization", "|P| (queue positives)", "ratio", true, true},
                 {scl, scl_t, dscl, dscl_t});
  rep.artifacts.push_back("grad_ratio.csv");
  rep.artifacts.push_back("grad_ratio.svg");
  const auto [ms, md] = r.mard(1);
  rep.results = Json{{"alpha", r.alpha}, {"buckets", r.buckets.size()}, {"scl_mard", ms}, {"dscl_mard", md}};
  for (const auto& w : r.warnings) rep.warnings.push_back(w);
}

// ---------------------------------------------------------------------------
// Free-embedding convergence probe

struct ConvergeRow {
  std::string mode;  // "scl", "dscl" or "dscl_reduced" (alpha = 1/(|P|+1))
  double alpha = 0.0;
  std::size_t num_pos = 0;
  std::size_t steps = 0;
  double grad_norm = 0.0;
  double p_plus = 0.0;          // mean over anchors
  double p_plus_max_dev = 0.0;  // max |p+ - theory| over anchors
  double theory = 0.0;
  bool converged = false;
};

// `classes` anchors, each with its own augmentation positive and |P| queue positives;
// every vector is a free unit-norm parameter. Projected gradient descent with momentum
// (rows renormalized after each step) until the gradient norm drops below tolerance.
inline ConvergeRow converge_free_embeddings(ContrastiveMode mode, double alpha, std::size_t num_pos,
                                            const ConvergeSettings& s, double tau, std::uint64_t seed) {
  const std::size_t C = s.classes, d = s.dim;
  Rng rng(seed);
  auto unit_rows = [&](std::size_t n) {
    Tensor t(Shape{n, d});
    for (double& x : t.values()) x = rng.normal();
    for (std::size_t r = 0; r < n; ++r) {
      const double nr = l2_norm(t.row(r));
      for (std::size_t j = 0; j < d; ++j) t.at(r, j) /= nr;
    }
    return Var::parameter(std::move(t));
  };
  Var A = unit_rows(C), B = unit_rows(C), Q = unit_rows(C * num_pos);
  std::vector<ClassId> anchor_labels(C), queue_labels(C * num_pos);
  for (std::size_t c = 0; c < C; ++c) {
    anchor_labels[c] = c;
    for (std::size_t k = 0; k < num_pos; ++k) queue_labels[c * num_pos + k] = c;
  }
  SgdMomentum opt({A, B, Q}, 0.9, 0.0);
  ConvergeRow row;
  row.mode = to_string(mode);
  row.alpha = alpha;
  row.num_pos = num_pos;
  row.theory = mode == ContrastiveMode::scl ? 1.0 / static_cast<double>(num_pos + 1) : alpha;
  ContrastiveStats stats;
  for (std::size_t step = 0;; ++step) {
    opt.zero_grad();
    contrastive_loss(l2_normalize(A), l2_normalize(B), l2_normalize(Q), queue_labels, anchor_labels, mode, alpha, tau,
                     &stats)
        .backward();
    double g2 = 0.0;
    for (const Var* v : {&A, &B, &Q})
      for (double g : v->grad().values()) g2 += g * g;
    row.grad_norm = std::sqrt(g2);
    row.steps = step;
    if (!std::isfinite(row.grad_norm)) throw NumericalError("convergence probe diverged");
    if (row.grad_norm < s.grad_tol) {
      row.converged = true;
      break;
    }
    if (step == s.max_steps) break;
    opt.step(s.lr);
    for (Var* v : {&A, &B, &Q}) {
      Tensor& t = v->value_mut();
      for (std::size_t r = 0; r < t.dim(0); ++r) {
        const double nr = l2_norm(t.row(r));
        for (std::size_t j = 0; j < d; ++j) t.at(r, j) /= nr;
      }
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    const double p = stats.probs.at(c, 0);
    row.p_plus += p / static_cast<double>(C);
    row.p_plus_max_dev = std::max(row.p_plus_max_dev, std::abs(p - row.theory));
  }
  return row;
}

inline std::vector<ConvergeRow> convergence_probe(const RunConfig& cfg) {
  const ConvergeSettings& s = cfg.experiment.converge;
  const double tau = cfg.stage1.loss.tau;
  std::vector<ConvergeRow> rows;
  std::uint64_t k = 0;
  const std::uint64_t base = derive_seed(cfg.stage1.seed, {0xCC});
  for (std::size_t P : s.positives) {
    rows.push_back(converge_free_embeddings(ContrastiveMode::scl, 0.0, P, s, tau, derive_seed(base, {k++})));
    for (double a : s.alphas) rows.push_back(converge_free_embeddings(ContrastiveMode::dscl, a, P, s, tau, derive_seed(base, {k++})));
    ConvergeRow r = converge_free_embeddings(ContrastiveMode::dscl, 1.0 / static_cast<double>(P + 1), P, s, tau,
                                             derive_seed(base, {k++}));
    r.mode = "dscl_reduced";
    rows.push_back(r);
  }
  return rows;
}

inline void write_converge_artifacts(const std::vector<ConvergeRow>& rows, const std::filesystem::path& dir,
                                     ExperimentReport& rep) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "converge.csv");
  csv << "mode,alpha,num_pos,steps,grad_norm,p_plus,p_plus_max_dev,theory,converged\n";
  Json arr = Json::array();
  for (const auto& r : rows) {
    csv << r.mode << ',' << format_number(r.alpha) << ',' << r.num_pos << ',' << r.steps << ',' << format_number(r.grad_norm)
        << ',' << format_number(r.p_plus) << ',' << format_number(r.p_plus_max_dev) << ',' << format_number(r.theory) << ','
        << (r.converged ? 1 : 0) << '\n';
    arr.push_back({{"mode", r.mode}, {"alpha", r.alpha}, {"num_pos", r.num_pos}, {"p_plus", r.p_plus},
                   {"theory", r.theory}, {"converged", r.converged}, {"grad_norm", r.grad_norm}});
    if (!r.converged) {
      rep.warnings.push_back(r.mode + " |P|=" + std::to_string(r.num_pos) + " did not converge; final gradient norm " +
                             format_number(r.grad_norm));
    }
  }
  rep.artifacts.push_back("converge.csv");
  rep.results = Json{{"rows", arr}};
}

// ---------------------------------------------------------------------------
// Ablation over variants and seeds

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  SplitReport report;
  Json summary;
};

struct AblationRow {
  std::string variant;
  MeanStd overall, many, medium, few;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationRow> rows;

  const AblationRow* find(const std::string& variant) const {
    for (const auto& r : rows)
      if (r.variant == variant) return &r;
    return nullptr;
  }
};

inline AblationRow aggregate_runs(const std::string& variant, const std::vector<AblationRun>& runs) {
  std::vector<double> o, m, md, f;
  for (const auto& r : runs) {
    if (r.variant != variant) continue;
    o.push_back(r.report.overall);
    m.push_back(r.report.many.value_or(std::nan("")));
    md.push_back(r.report.medium.value_or(std::nan("")));
    f.push_back(r.report.few.value_or(std::nan("")));
  }
  return {variant, mean_std(o), mean_std(m), mean_std(md), mean_std(f)};
}

inline AblationResult run_ablation(const SynthDataset& ds, const RunConfig& cfg, const std::vector<std::string>& variants,
                                   std::size_t threads = 1, const LogFn& log = {}) {
  for (const auto& v : variants) (void)apply_variant(cfg.stage1.loss, v);  // fail fast on typos
  AblationResult res;
  for (const auto& v : variants) {
    for (std::uint64_t seed : cfg.experiment.seeds) {
      RunConfig rc = cfg;
      rc.stage1.loss = apply_variant(cfg.stage1.loss, v);
      rc.set_seed(seed);
      PipelineResult pr = run_pipeline(ds, rc, threads);
      if (log) log(v + " seed " + std::to_string(seed) + ": overall " + format_number(pr.report.overall));
      res.runs.push_back({v, seed, pr.report, pr.stage1.summary()});
    }
    res.rows.push_back(aggregate_runs(v, res.runs));
  }
  return res;
}

inline std::string format_mean_std(const MeanStd& m) {
  if (!std::isfinite(m.mean)) return "n/a";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << 100.0 * m.mean << " ± " << 100.0 * m.std;
  return os.str();
}

inline void write_ablation_artifacts(const AblationResult& r, const std::filesystem::path& dir, ExperimentReport& rep) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream csv(dir / "ablation_runs.csv");
    csv << "variant,seed,many,medium,few,overall\n";
    auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
    for (const auto& run : r.runs) {
      csv << run.variant << ',' << run.seed << ',' << opt(run.report.many) << ',' << opt(run.report.medium) << ','
          << opt(run.report.few) << ',' << format_number(run.report.overall) << '\n';
    }
  }
  std::ofstream csv(dir / "ablation_table.csv");
  csv << "variant,runs,many_mean,many_std,medium_mean,medium_std,few_mean,few_std,overall_mean,overall_std\n";
  std::ofstream md(dir / "ablation_table.md");
  md << "| Variant | Many | Medium | Few | Overall |\n|---|---|---|---|---|\n";
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    csv << row.variant << ',' << row.overall.n;
    for (const MeanStd* m : {&row.many, &row.medium, &row.few, &row.overall})
      csv << ',' << format_number(m->mean) << ',' << format_number(m->std);
    csv << '\n';
    md << "| " << row.variant << " | " << format_mean_std(row.many) << " | " << format_mean_std(row.medium) << " | "
       << format_mean_std(row.few) << " | " << format_mean_std(row.overall) << " |\n";
    rows.push_back({{"variant", row.variant},
                    {"runs", row.overall.n},
                    {"overall", {row.overall.mean, row.overall.std}},
                    {"many", {row.many.mean, row.many.std}},
                    {"medium", {row.medium.mean, row.medium.std}},
                    {"few", {row.few.mean, row.few.std}}});
  }
  rep.artifacts.insert(rep.artifacts.end(), {"ablation_runs.csv", "ablation_table.csv", "ablation_table.md"});
  rep.results["table"] = rows;
}

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

// a beats b by more than one pooled standard deviation sqrt((s_a^2 + s_b^2) / 2).
inline CheckOutcome gap_check(const std::string& name, const MeanStd& a, const MeanStd& b) {
  const double pooled = std::sqrt(0.5 * (a.std * a.std + b.std * b.std));
  const double gap = a.mean - b.mean;
  CheckOutcome c{name, gap > pooled, ""};
  std::ostringstream os;
  os << "gap " << gap << " vs pooled std " << pooled << " (" << a.mean << " vs " << b.mean << ")";
  c.detail = os.str();
  return c;
}

inline std::vector<CheckOutcome> ablation_checks(const AblationResult& r) {
  std::vector<CheckOutcome> out;
  const auto* pbsd = r.find("dscl+pbsd");
  const auto* dscl = r.find("dscl");
  const auto* scl = r.find("scl");
  const auto* mc = r.find("dscl+multicrop");
  if (pbsd && dscl) out.push_back(gap_check("overall DSCL+PBSD > DSCL", pbsd->overall, dscl->overall));
  if (dscl && scl) out.push_back(gap_check("overall DSCL > SCL", dscl->overall, scl->overall));
  if (pbsd && mc) out.push_back(gap_check("overall DSCL+PBSD > DSCL+multicrop", pbsd->overall, mc->overall));
  if (dscl && scl) {
    std::ostringstream os;
    os << "few " << dscl->few.mean << " vs " << scl->few.mean;
    out.push_back({"few DSCL > SCL", dscl->few.mean > scl->few.mean, os.str()});
  }
  return out;
}

// Epoch-averaged |P| for the largest classes against (n_k / n) * |M|.
inline std::vector<CheckOutcome> queue_statistics_checks(const Json& summary, const DatasetSpec& spec,
                                                         std::size_t capacity, std::size_t top = 3, double tol = 0.10) {
  std::vector<CheckOutcome> out;
  const auto& mp = summary.at("mean_positives_per_class");
  for (std::size_t k = 0; k < std::min(top, spec.num_classes()); ++k) {
    const double expected = static_cast<double>(spec.class_counts[k]) / static_cast<double>(spec.total()) *
                            static_cast<double>(capacity);
    const double got = mp.at(k).get<double>();
    const double rel = std::abs(got - expected) / expected;
    std::ostringstream os;
    os << "class " << k << ": mean |P| " << got << " vs " << expected << " (rel " << rel << ")";
    out.push_back({"queue |P| class " + std::to_string(k), rel <= tol, os.str()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep (DSCL+PBSD around the configured loss)

struct SweepPoint {
  std::string param;
  double value = 0.0;
  std::uint64_t seed = 0;
  SplitReport report;
};

inline std::vector<SweepPoint> run_sweep(const SynthDataset& ds, const RunConfig& cfg, std::size_t threads = 1,
                                         const LogFn& log = {}) {
  std::vector<SweepPoint> pts;
  const SweepSettings& s = cfg.experiment.sweep;
  auto run = [&](const std::string& param, double value, const LossConfig& loss) {
    for (std::uint64_t seed : cfg.experiment.seeds) {
      RunConfig rc = cfg;
      rc.stage1.loss = loss;
      rc.set_seed(seed);
      const PipelineResult pr = run_pipeline(ds, rc, threads);
      if (log) log(param + "=" + format_number(value) + " seed " + std::to_string(seed) + ": overall " + format_number(pr.report.overall));
      pts.push_back({param, value, seed, pr.report});
    }
  };
  const LossConfig base = apply_variant(cfg.stage1.loss, "dscl+pbsd");
  for (double a : s.alphas) {
    LossConfig l = base;
    l.alpha = a;
    run("alpha", a, l);
  }
  for (std::size_t L : s.patches) {
    LossConfig l = base;
    l.patches = L;
    run("patches", static_cast<double>(L), l);
  }
  for (double lam : s.lambdas) {
    LossConfig l = base;
    l.lambda = lam;
    run("lambda", lam, l);
  }
  return pts;
}

inline void write_sweep_artifacts(const std::vector<SweepPoint>& pts, const std::filesystem::path& dir, ExperimentReport& rep) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "sweep.csv");
  csv << "param,value,seed,many,medium,few,overall\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  std::map<std::string, std::map<double, std::vector<double>>> grouped;
  for (const auto& p : pts) {
    csv << p.param << ',' << format_number(p.value) << ',' << p.seed << ',' << opt(p.report.many) << ','
        << opt(p.report.medium) << ',' << opt(p.report.few) << ',' << format_number(p.report.overall) << '\n';
    grouped[p.param][p.value].push_back(p.report.overall);
  }
  rep.artifacts.push_back("sweep.csv");
  Json res = Json::object();
  for (const auto& [param, by_value] : grouped) {
    PlotSeries mean{"overall (mean)", {}, {}};
    Json arr = Json::array();
    for (const auto& [v, xs] : by_value) {
      const MeanStd m = mean_std(xs);
      mean.x.push_back(v);
      mean.y.push_back(m.mean);
      arr.push_back({{"value", v}, {"overall_mean", m.mean}, {"overall_std", m.std}});
    }
    write_svg_plot(dir / ("sweep_" + param + ".svg"), {"Accuracy vs " + param, param, "overall accuracy"}, {mean});
    rep.artifacts.push_back("sweep_" + param + ".svg");
    res[param] = arr;
  }
  rep.results = res;
}

// Directional checks on the sweep: alpha = 1 (self-supervised degenerate case) scores
// below alpha = 0.1, and accuracy does not drop from the smallest to the largest L by
// more than one pooled standard deviation.
inline std::vector<CheckOutcome> sweep_checks(const std::vector<SweepPoint>& pts) {
  auto collect = [&](const std::string& param, double value) {
    std::vector<double> xs;
    for (const auto& p : pts)
      if (p.param == param && p.value == value) xs.push_back(p.report.overall);
    return mean_std(xs);
  };
  std::vector<CheckOutcome> out;
  const MeanStd a01 = collect("alpha", 0.1), a1 = collect("alpha", 1.0);
  if (a01.n && a1.n) out.push_back(gap_check("alpha=0.1 > alpha=1", a01, a1));
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& p : pts)
    if (p.param == "patches") lo = std::min(lo, p.value), hi = std::max(hi, p.value);
  if (hi > lo) {
    const MeanStd first = collect("patches", lo), last = collect("patches", hi);
    const double pooled = std::sqrt(0.5 * (first.std * first.std + last.std * last.std));
    std::ostringstream os;
    os << "L=" << hi << " " << last.mean << " vs L=" << lo << " " << first.mean << " (pooled std " << pooled << ")";
    out.push_back({"patches non-decreasing within noise", last.mean >= first.mean - pooled, os.str()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patch retrieval

struct RetrievalQuery {
  std::size_t image = 0;  // test index
  std::size_t motif = 0;
  PatchBox box;
  std::vector<std::size_t> top;  // retrieved test indices, best first
  double overlap = 0.0;          // fraction of retrieved images containing the motif
  bool top1_same_class = false;
};

struct RetrievalResult {
  std::vector<RetrievalQuery> queries;
  double mean_overlap = 0.0;
  double top1_class_rate = 0.0;
  std::vector<std::string> warnings;
};

inline bool has_motif(const SynthImage& im, std::size_t motif) {
  return std::any_of(im.placements.begin(), im.placements.end(), [&](const MotifPlacement& p) { return p.motif == motif; });
}

// Queries use ground-truth boxes of each image's identity motif (placement of its own
// class motif); ranking is by c · z over all other test images.
inline RetrievalResult run_patch_retrieval(const EncoderParams& params, const SynthDataset& ds, std::size_t num_queries,
                                           std::size_t top_k, std::uint64_t seed, std::size_t threads = 1) {
  RetrievalResult res;
  const EncoderParams frozen = params.clone(false);
  const std::size_t N = ds.test.size();
  if (N < 2) throw SpecError("retrieval needs at least two test images");
  if (top_k > N - 1) {
    res.warnings.push_back("top_k " + std::to_string(top_k) + " clipped to " + std::to_string(N - 1));
    top_k = N - 1;
  }
  // Global embeddings of the whole test split, in fixed chunks.
  const std::size_t d = frozen.config.d_proj, chunk = 128;
  Tensor z(Shape{N, d});
  parallel_for((N + chunk - 1) / chunk, threads, [&](std::size_t c) {
    const std::size_t b = c * chunk, e = std::min(N, b + chunk);
    std::vector<const Tensor*> ptrs;
    for (std::size_t i = b; i < e; ++i) ptrs.push_back(&ds.test[i].pixels);
    const Tensor zc = embed_images(frozen, to_batch(std::span<const Tensor* const>(ptrs))).value();
    std::copy_n(zc.data(), zc.size(), z.data() + b * d);
  });

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0x7E}));
  rng.shuffle(order);
  num_queries = std::min(num_queries, N);
  for (std::size_t q = 0; q < num_queries; ++q) {
    const SynthImage& im = ds.test[order[q]];
    if (im.placements.empty()) continue;
    const MotifPlacement* own = &im.placements.front();
    for (const auto& p : im.placements)
      if (p.motif == im.label) own = &p;  // identity motif ids coincide with class ids
    RetrievalQuery rq;
    rq.image = order[q];
    rq.motif = own->motif;
    rq.box = own->box;
    const Encoded enc = encode(frozen, Var::constant(to_batch(std::vector<Tensor>{im.pixels})));
    const Roi roi{0, rq.box};
    const Tensor c = roi_pool_project(frozen, enc.u, std::span<const Roi>(&roi, 1)).value();
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < N; ++i)
      if (i != rq.image) scored.push_back({-dot(c.row(0), z.row(i)), i});
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(top_k), scored.end());
    std::size_t hits = 0;
    for (std::size_t t = 0; t < top_k; ++t) {
      rq.top.push_back(scored[t].second);
      hits += has_motif(ds.test[scored[t].second], rq.motif);
    }
    rq.overlap = static_cast<double>(hits) / static_cast<double>(top_k);
    rq.top1_same_class = ds.test[rq.top.front()].label == im.label;
    res.queries.push_back(std::move(rq));
  }
  for (const auto& q : res.queries) {
    res.mean_overlap += q.overlap / static_cast<double>(res.queries.size());
    res.top1_class_rate += (q.top1_same_class ? 1.0 : 0.0) / static_cast<double>(res.queries.size());
  }
  return res;
}

inline void write_retrieval_artifacts(const RetrievalResult& r, const SynthDataset& ds, const std::filesystem::path& dir,
                                      ExperimentReport& rep, std::size_t grid_rows = 8) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "retrieval.csv");
  csv << "query_image,motif,cx,cy,w,h,overlap,top1_same_class,retrieved\n";
  for (const auto& q : r.queries) {
    csv << q.image << ',' << q.motif << ',' << format_number(q.box.cx) << ',' << format_number(q.box.cy) << ','
        << format_number(q.box.w) << ',' << format_number(q.box.h) << ',' << format_number(q.overlap) << ','
        << (q.top1_same_class ? 1 : 0) << ',';
    for (std::size_t t = 0; t < q.top.size(); ++t) csv << (t ? ";" : "") << q.top[t];
    csv << '\n';
  }
  rep.artifacts.push_back("retrieval.csv");
  if (!r.queries.empty()) {
    const std::size_t S = ds.spec.image_size, zoom = 2, cell = S * zoom + 4;
    const std::size_t rows = std::min(grid_rows, r.queries.size()), cols = 1 + r.queries.front().top.size();
    Canvas canvas(cols * cell + 4, rows * cell + 4);
    for (std::size_t i = 0; i < rows; ++i) {
      const auto& q = r.queries[i];
      const std::size_t top = 4 + i * cell;
      canvas.blit(ds.test[q.image].pixels, 4, top, zoom);
      const double s = static_cast<double>(S * zoom);
      canvas.rect(4 + static_cast<std::size_t>(q.box.x0() * s), top + static_cast<std::size_t>(q.box.y0() * s),
                  4 + static_cast<std::size_t>(std::max(0.0, q.box.x1() * s - 1)),
                  top + static_cast<std::size_t>(std::max(0.0, q.box.y1() * s - 1)), 1.0, 0.0, 0.0);
      for (std::size_t t = 0; t < q.top.size(); ++t) {
        const std::size_t left = 4 + (t + 1) * cell;
        canvas.blit(ds.test[q.top[t]].pixels, left, top, zoom);
        const bool hit = has_motif(ds.test[q.top[t]], q.motif);
        canvas.rect(left - 1, top - 1, left + S * zoom, top + S * zoom, hit ? 0.0 : 0.8, hit ? 0.7 : 0.0, 0.0);
      }
    }
    canvas.save_ppm(dir / "retrieval_grid.ppm");
    rep.artifacts.push_back("retrieval_grid.ppm");
  }
  rep.results = Json{{"queries", r.queries.size()}, {"mean_motif_overlap", r.mean_overlap},
                     {"top1_class_rate", r.top1_class_rate}};
  for (const auto& w : r.warnings) rep.warnings.push_back(w);
}

}  // namespace dscl
