// dscl_lab: command-line front end for data generation, two-stage training and the
// analysis experiments. Every verb writes its artifacts plus report.json and the
// resolved config.json into --out.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dscl/experiments.hpp"
#include "dscl/runtime.hpp"

namespace fs = std::filesystem;
using namespace dscl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitCheck = 4;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 1;
  bool check = false;
  std::string data;
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  if (g.seed) cfg.set_seed(*g.seed);
  cfg.finalize();
  return cfg;
}

// A saved dataset overrides the dataset section so reports describe what was used.
SynthDataset obtain_dataset(const Globals& g, RunConfig& cfg) {
  if (!g.data.empty()) {
    SynthDataset ds = load_dataset(g.data);
    cfg.dataset = ds.spec;
    cfg.finalize();
    log_line("loaded dataset " + g.data + " (" + std::to_string(ds.train.size()) + " train / " +
             std::to_string(ds.test.size()) + " test)");
    return ds;
  }
  log_line("generating dataset (seed " + std::to_string(cfg.dataset.seed) + ")");
  return generate_dataset(cfg.dataset, bank_for(cfg.dataset), g.threads);
}

fs::path out_dir(const Globals& g, const std::string& verb) {
  const fs::path dir = g.out.empty() ? fs::path("out") / verb : fs::path(g.out);
  fs::create_directories(dir);
  return dir;
}

void finish(const fs::path& dir, const RunConfig& cfg, ExperimentReport& rep) {
  detail::write_file(dir / "config.json", run_config_to_json(cfg).dump(2) + "\n");
  rep.artifacts.push_back("config.json");
  rep.write(dir);
  for (const auto& w : rep.warnings) log_line("warning: " + w);
  log_line("wrote " + (dir / "report.json").string());
}

// Prints one line per check and records them; returns the exit code.
int report_checks(const std::vector<CheckOutcome>& checks, ExperimentReport& rep) {
  bool ok = !checks.empty();
  Json arr = Json::array();
  for (const auto& c : checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    arr.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    ok = ok && c.passed;
  }
  if (checks.empty()) std::cout << "FAIL no checks could be evaluated\n";
  rep.results["checks"] = arr;
  return ok ? 0 : kExitCheck;
}

void log_epoch(const MetricsRow& r) {
  std::ostringstream os;
  os << "epoch " << r.epoch << " step " << r.step << " lr " << format_number(r.lr);
  if (r.loss_dscl) os << " loss " << format_number(*r.loss_dscl);
  if (r.loss_pbsd) os << " patch " << format_number(*r.loss_pbsd);
  if (r.p_plus_head) os << " p+ head " << format_number(*r.p_plus_head) << " tail " << format_number(*r.p_plus_tail);
  log_line(os.str());
}

void save_preview(const SynthDataset& ds, const fs::path& path) {
  const std::size_t K = ds.spec.num_classes(), S = ds.spec.image_size, per = 6, zoom = 2, cell = S * zoom + 2;
  Canvas canvas(per * cell + 2, K * cell + 2);
  std::vector<std::size_t> seen(K, 0);
  for (const auto& im : ds.train) {
    if (seen[im.label] >= per) continue;
    canvas.blit(im.pixels, 2 + seen[im.label] * cell, 2 + im.label * cell, zoom);
    ++seen[im.label];
  }
  canvas.save_ppm(path);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Globals& g) {
  RunConfig cfg = resolve_config(g);
  const fs::path dir = out_dir(g, "gen-data");
  const SynthDataset ds = generate_dataset(cfg.dataset, bank_for(cfg.dataset), g.threads);
  save_dataset(ds, dir);
  save_preview(ds, dir / "preview.ppm");
  ExperimentReport rep("gen-data", cfg);
  rep.artifacts = {"manifest.json", "train.ltcl", "test.ltcl", "preview.ppm"};
  rep.results = Json{{"train_images", ds.train.size()},
                     {"test_images", ds.test.size()},
                     {"classes", ds.spec.num_classes()},
                     {"imbalance_ratio", ds.spec.imbalance_ratio()},
                     {"nearest_centroid_accuracy", nearest_centroid_accuracy(ds)}};
  finish(dir, cfg, rep);
  return 0;
}

int cmd_train(const Globals& g) {
  RunConfig cfg = resolve_config(g);
  const SynthDataset ds = obtain_dataset(g, cfg);
  const fs::path dir = out_dir(g, "train");
  const Stage1Result r = stage1_train(ds, cfg.encoder, cfg.stage1, g.threads, log_epoch);
  {
    std::ofstream csv(dir / "metrics.csv");
    write_metrics_csv(csv, r.metrics);
  }
  Checkpoint ck = r.checkpoint;
  ck.extra = Json{{"config_hash", config_hash(cfg)}};
  save_checkpoint(ck, dir / "checkpoint.dsck");
  ExperimentReport rep("train", cfg);
  rep.artifacts = {"metrics.csv", "checkpoint.dsck"};
  rep.results["summary"] = r.summary();
  int code = 0;
  if (g.check) code = report_checks(queue_statistics_checks(r.summary(), ds.spec, cfg.stage1.queue_capacity), rep);
  finish(dir, cfg, rep);
  return code;
}

int cmd_linear_probe(const Globals& g, const std::string& checkpoint) {
  RunConfig cfg = resolve_config(g);
  const SynthDataset ds = obtain_dataset(g, cfg);
  const fs::path dir = out_dir(g, "linear-probe");
  const Checkpoint ck = load_checkpoint(checkpoint, &cfg.encoder);
  const LinearClassifier clf = stage2_train_linear(ck.online, ds, cfg.stage2, g.threads);
  detail::write_file(dir / "classifier.json", classifier_to_json(clf).dump() + "\n");
  const SplitReport train_rep = evaluate_splits(clf, ck.online, ds.train, ds.spec.class_counts, g.threads);
  ExperimentReport rep("linear-probe", cfg);
  rep.artifacts = {"classifier.json"};
  rep.results = Json{{"checkpoint", checkpoint}, {"train_accuracy", train_rep.to_json()}};
  finish(dir, cfg, rep);
  return 0;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& classifier) {
  RunConfig cfg = resolve_config(g);
  const SynthDataset ds = obtain_dataset(g, cfg);
  const fs::path dir = out_dir(g, "eval");
  const Checkpoint ck = load_checkpoint(checkpoint, &cfg.encoder);
  const LinearClassifier clf = classifier_from_json(Json::parse(detail::read_file(classifier)));
  const SplitReport r = evaluate_splits(clf, ck.online, ds.test, ds.spec.class_counts, g.threads);
  {
    std::ofstream csv(dir / "per_class.csv");
    csv << "class,train_count,split,accuracy\n";
    static const char* names[] = {"many", "medium", "few"};
    for (std::size_t k = 0; k < r.per_class.size(); ++k) {
      csv << k << ',' << ds.spec.class_counts[k] << ',' << names[static_cast<int>(split_of(ds.spec.class_counts[k]))]
          << ',' << format_opt(r.per_class[k]) << '\n';
    }
  }
  ExperimentReport rep("eval", cfg);
  rep.artifacts = {"per_class.csv"};
  rep.results = r.to_json();
  rep.warnings = r.warnings;
  std::cout << "overall " << format_number(r.overall) << " many " << format_opt(r.many) << " medium "
            << format_opt(r.medium) << " few " << format_opt(r.few) << "\n";
  finish(dir, cfg, rep);
  return 0;
}

int cmd_grad_ratio(const Globals& g) {
  RunConfig cfg = resolve_config(g);
  const SynthDataset ds = obtain_dataset(g, cfg);
  const fs::path dir = out_dir(g, "grad-ratio");
  const GradRatioResult r = gradient_ratio_experiment(ds, cfg, g.threads);
  ExperimentReport rep("grad-ratio", cfg);
  write_grad_ratio_artifacts(r, dir, rep);
  int code = 0;
  if (g.check) {
    const auto [ms, md] = r.mard(100);
    std::size_t n = 0;
    for (const auto& b : r.buckets) n += b.anchors >= 100;
    const std::string tail = " over " + std::to_string(n) + " buckets with >= 100 anchors";
    code = report_checks({{"SCL ratio tracks 1/|P| (MARD <= 0.2)", n > 0 && ms <= 0.2, "MARD " + format_number(ms) + tail},
                          {"DSCL ratio flat at alpha/(1-alpha) (MARD <= 0.2)", n > 0 && md <= 0.2,
                           "MARD " + format_number(md) + tail}},
                         rep);
  }
  finish(dir, cfg, rep);
  return code;
}

int cmd_converge(const Globals& g) {
  RunConfig cfg = resolve_config(g);
  const fs::path dir = out_dir(g, "converge-probe");
  const std::vector<ConvergeRow> rows = convergence_probe(cfg);
  ExperimentReport rep("converge-probe", cfg);
  write_converge_artifacts(rows, dir, rep);
  int code = 0;
  if (g.check) {
    std::vector<CheckOutcome> checks;
    for (const auto& r : rows) {
      checks.push_back({r.mode + " alpha=" + format_number(r.alpha) + " |P|=" + std::to_string(r.num_pos),
                        r.converged && r.p_plus_max_dev <= 0.02,
                        "p+ " + format_number(r.p_plus) + " vs " + format_number(r.theory) + ", max dev " +
                            format_number(r.p_plus_max_dev) + ", " + std::to_string(r.steps) + " steps"});
    }
    code = report_checks(checks, rep);
  }
  finish(dir, cfg, rep);
  return code;
}

int cmd_ablate(const Globals& g, const std::vector<std::string>& variants_flag) {
  RunConfig cfg = resolve_config(g);
  const SynthDataset ds = obtain_dataset(g, cfg);
  const fs::path dir = out_dir(g, "ablate");
  if (!variants_flag.empty()) cfg.experiment.variants = variants_flag;
  const AblationResult r = run_ablation(ds, cfg, cfg.experiment.variants, g.threads, log_line);
  ExperimentReport rep("ablate", cfg);
  write_ablation_artifacts(r, dir, rep);
  {
    Json summaries = Json::array();
    for (const auto& run : r.runs) summaries.push_back({{"variant", run.variant}, {"seed", run.seed}, {"summary", run.summary}});
    rep.results["stage1_summaries"] = summaries;
  }
  std::cout << detail::read_file(dir / "ablation_table.md");
  int code = 0;
  if (g.check) code = report_checks(ablation_checks(r), rep);
  finish(dir, cfg, rep);
  return code;
}

int cmd_sweep(const Globals& g) {
  RunConfig cfg = resolve_config(g);
  const SynthDataset ds = obtain_dataset(g, cfg);
  const fs::path dir = out_dir(g, "sweep");
  const std::vector<SweepPoint> pts = run_sweep(ds, cfg, g.threads, log_line);
  ExperimentReport rep("sweep", cfg);
  write_sweep_artifacts(pts, dir, rep);
  int code = 0;
  if (g.check) code = report_checks(sweep_checks(pts), rep);
  finish(dir, cfg, rep);
  return code;
}

int cmd_retrieve(const Globals& g, const std::string& checkpoint, const std::string& baseline) {
  RunConfig cfg = resolve_config(g);
  const SynthDataset ds = obtain_dataset(g, cfg);
  const fs::path dir = out_dir(g, "retrieve");
  const auto& rs = cfg.experiment.retrieval;
  const Checkpoint ck = load_checkpoint(checkpoint, &cfg.encoder);
  const RetrievalResult r = run_patch_retrieval(ck.online, ds, rs.queries, rs.top_k, cfg.stage1.seed, g.threads);
  ExperimentReport rep("retrieve", cfg);
  write_retrieval_artifacts(r, ds, dir, rep);
  rep.results["checkpoint"] = checkpoint;
  std::cout << "mean motif overlap " << format_number(r.mean_overlap) << ", top-1 class rate "
            << format_number(r.top1_class_rate) << "\n";
  std::vector<CheckOutcome> checks;
  if (!baseline.empty()) {
    const Checkpoint bk = load_checkpoint(baseline, &cfg.encoder);
    const RetrievalResult b = run_patch_retrieval(bk.online, ds, rs.queries, rs.top_k, cfg.stage1.seed, g.threads);
    rep.results["baseline"] = Json{{"checkpoint", baseline}, {"mean_motif_overlap", b.mean_overlap},
                                   {"top1_class_rate", b.top1_class_rate}};
    std::cout << "baseline mean motif overlap " << format_number(b.mean_overlap) << "\n";
    checks.push_back({"motif overlap exceeds baseline", r.mean_overlap > b.mean_overlap,
                      format_number(r.mean_overlap) + " vs " + format_number(b.mean_overlap)});
  }
  int code = 0;
  if (g.check) code = report_checks(checks, rep);
  finish(dir, cfg, rep);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Decoupled supervised contrastive learning with patch self-distillation on synthetic long-tailed data"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "training seed (both stages)");
  app.add_option("--out", g.out, "output directory (default out/<verb>)");
  app.add_option("--threads", g.threads, "worker threads; results do not depend on it")->check(CLI::PositiveNumber);
  app.add_flag("--check", g.check, "evaluate the verb's acceptance checks; exit 4 on failure");
  app.add_option("--data", g.data, "dataset directory from gen-data (default: generate from config)")
      ->check(CLI::ExistingDirectory);

  std::string checkpoint, classifier, baseline;
  std::vector<std::string> variants;
  auto* gen = app.add_subcommand("gen-data", "generate and save the synthetic long-tailed dataset");
  auto* train = app.add_subcommand("train", "stage 1 representation learning; writes metrics.csv and a checkpoint");
  auto* probe = app.add_subcommand("linear-probe", "stage 2 class-balanced linear classifier on a frozen backbone");
  probe->add_option("--checkpoint", checkpoint, "stage 1 checkpoint")->required()->check(CLI::ExistingFile);
  auto* eval = app.add_subcommand("eval", "Many/Medium/Few/overall accuracy on the test split");
  eval->add_option("--checkpoint", checkpoint, "stage 1 checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--classifier", classifier, "classifier.json from linear-probe")->required()->check(CLI::ExistingFile);
  auto* ratio = app.add_subcommand("grad-ratio", "positive-gradient ratio buckets at initialization");
  auto* conv = app.add_subcommand("converge-probe", "free-embedding fixed points of p(z+|z)");
  auto* ablate = app.add_subcommand("ablate", "variants x seeds through the full pipeline");
  ablate->add_option("--variants", variants, "override experiment.variants")->delimiter(',');
  auto* sweep = app.add_subcommand("sweep", "alpha / patches / lambda sweeps around dscl+pbsd");
  auto* retrieve = app.add_subcommand("retrieve", "patch-query image retrieval");
  retrieve->add_option("--checkpoint", checkpoint, "stage 1 checkpoint")->required()->check(CLI::ExistingFile);
  retrieve->add_option("--baseline", baseline, "second checkpoint whose motif overlap should be lower")
      ->check(CLI::ExistingFile);
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(g);
    if (*train) return cmd_train(g);
    if (*probe) return cmd_linear_probe(g, checkpoint);
    if (*eval) return cmd_eval(g, checkpoint, classifier);
    if (*ratio) return cmd_grad_ratio(g);
    if (*conv) return cmd_converge(g);
    if (*ablate) return cmd_ablate(g, variants);
    if (*sweep) return cmd_sweep(g);
    if (*retrieve) return cmd_retrieve(g, checkpoint, baseline);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const SpecError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
