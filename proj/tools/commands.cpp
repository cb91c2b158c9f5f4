#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "experiment.hpp"
#include "pgd/gradcheck_suite.hpp"
#include "pgd/metrics.hpp"
#include "run_config.hpp"

namespace pgd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kClassNames[] = {"background", "organ", "tumor"};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  if (!o) throw IoError("cannot write " + path.string());
  o << text;
  if (!o) throw IoError("write failed for " + path.string());
}

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

std::vector<SegSample> require_dataset(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--data is required");
  if (!fs::is_directory(dir)) throw IoError("dataset directory " + dir + " does not exist");
  auto data = load_dataset(dir);
  if (data.empty()) throw IoError("dataset " + dir + " is empty");
  return data;
}

std::vector<std::size_t> split_ids(const RunConfig& cfg, std::size_t n, const std::string& split) {
  if (split == "all") {
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
    return ids;
  }
  const Fold f = fold_of(cfg, n);
  if (split == "train") return f.train;
  if (split == "val") return f.val;
  if (split == "test") return f.test;
  throw ConfigError("--split: expected train, val, test or all, got '" + split + "'");
}

// ---- gen-data --------------------------------------------------------------

int cmd_gen_data(const std::string& config, const std::string& out_dir, std::int64_t n, std::ostream& out) {
  if (n < 1) throw ConfigError("--n: must be >= 1");
  const RunConfig cfg = config_or_default(config);
  const auto samples = generate(cfg.data, n);
  save_dataset(samples, out_dir);
  double frac = 0.0;
  std::int64_t noisy = 0;
  for (const auto& s : samples) {
    frac += s.tumor_fraction;
    noisy += s.noise_applied;
  }
  out << "wrote " << n << " samples (" << cfg.data.height << "x" << cfg.data.width << ") to " << out_dir << "\n"
      << "mean tumor fraction " << fmt("%.4f", frac / static_cast<double>(n)) << ", noisy samples " << noisy
      << " (rho " << cfg.data.noise_rate << ", " << to_string(cfg.data.noise_kind) << ")\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const std::string& config, const std::string& data_dir, const std::string& out_dir, bool quiet,
              std::ostream& out) {
  const RunConfig cfg = config_or_default(config);
  const auto data = require_dataset(data_dir);
  const Fold fold = fold_of(cfg, data.size());
  const ModelState init = build(cfg.network, cfg.train.seed);
  out << "training on " << fold.train.size() << " samples, validating on " << fold.val.size() << " ("
      << init.parameter_count() << " parameters)\n";
  const TrainResult r = train(init, data, fold.train, fold.val, cfg.train, [&](const EpochRecord& e) {
    if (quiet) return;
    out << "epoch " << e.epoch << "  train " << fmt("%.4f", e.train_loss) << "  val " << fmt("%.4f", e.val_loss)
        << "  dsc organ " << fmt("%.3f", e.val_dsc[kOrgan]) << " tumor " << fmt("%.3f", e.val_dsc[kTumor])
        << "  p_t " << fmt("%.3f", e.mean_pt) << "  " << to_string(e.phase) << "\n"
        << std::flush;
  });
  const fs::path root(out_dir);
  const std::string resolved = to_json(cfg).dump(2) + "\n";
  write_text(root / "metrics.csv", metrics_csv(r.records));
  write_text(root / "resolved_config.json", resolved);
  save_checkpoint(r.best_state, root / "checkpoints" / "best",
                  {{"best_epoch", Tensor::scalar(static_cast<double>(r.best_epoch))}});
  write_text(root / "checkpoints" / "best" / "resolved_config.json", resolved);
  save_checkpoint(r.final_state, root / "checkpoints" / "final", r.adam.to_tensors());
  write_text(root / "checkpoints" / "final" / "resolved_config.json", resolved);
  out << "best epoch " << r.best_epoch << "; wrote " << (root / "metrics.csv").string() << " and checkpoints\n";
  return kOk;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& split,
             const std::string& config, const std::string& out_file, std::ostream& out) {
  const fs::path ckpt(checkpoint);
  RunConfig cfg;
  if (!config.empty()) cfg = load_run_config(config);
  else if (fs::exists(ckpt / "resolved_config.json")) cfg = load_run_config(ckpt / "resolved_config.json");
  const ModelState model = load_checkpoint(ckpt);
  if (!config.empty() && !(model.config == cfg.network)) {
    throw CompatibilityError("checkpoint fingerprint " + fingerprint_hex(model.fingerprint()) +
                             " does not match the configured network " + fingerprint_hex(cfg.network.fingerprint()));
  }
  const auto data = require_dataset(data_dir);
  const auto ids = split_ids(cfg, data.size(), split);
  const EvalResult r = evaluate(model, data, ids);
  json report{{"split", split}, {"samples", ids.size()}};
  double fg_dsc = 0.0, fg_jac = 0.0;
  out << "split " << split << " (" << ids.size() << " samples), against clean labels\n"
      << "class        DSC               Jaccard\n";
  for (std::size_t k = 0; k < r.dsc.size(); ++k) {
    const MeanStd d = mean_std(r.dsc[k]), j = mean_std(r.jaccard[k]);
    const std::string name = k < 3 ? kClassNames[k] : "class" + std::to_string(k);
    report["dsc"][name] = {{"mean", d.mean}, {"std", d.std}};
    report["jaccard"][name] = {{"mean", j.mean}, {"std", j.std}};
    if (k > 0) {
      fg_dsc += d.mean;
      fg_jac += j.mean;
    }
    char line[128];
    std::snprintf(line, sizeof line, "%-12s %.4f ± %.4f   %.4f ± %.4f\n", name.c_str(), d.mean, d.std, j.mean, j.std);
    out << line;
  }
  const double fg = static_cast<double>(r.dsc.size() - 1);
  report["aggregate"] = {{"mean_foreground_dsc", fg_dsc / fg}, {"mean_foreground_jaccard", fg_jac / fg}};
  out << "mean foreground DSC " << fmt("%.4f", fg_dsc / fg) << ", Jaccard " << fmt("%.4f", fg_jac / fg) << "\n";
  if (!out_file.empty()) write_text(out_file, report.dump(2) + "\n");
  return kOk;
}

// ---- gradcheck -------------------------------------------------------------

int cmd_gradcheck(const std::string& suite, std::ostream& out) {
  const auto results = run_gradcheck_suite(suite);
  bool ok = true;
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %-8s %6s %12s %10s  %s\n", "check", "suite", "seeds", "max rel err",
                "tolerance", "result");
  out << line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-24s %-8s %6zu %12.3e %10.0e  %s\n", r.name.c_str(), r.suite.c_str(), r.seeds,
                  r.max_rel_error, r.tolerance, r.passed ? "pass" : "FAIL");
    out << line;
    ok = ok && r.passed;
  }
  out << results.size() << " checks, " << (ok ? "all passed" : "FAILURES") << "\n";
  return ok ? kOk : kTestFailure;
}

// ---- ablate ----------------------------------------------------------------

int cmd_ablate(const std::string& config, const std::string& data_dir, const std::string& out_dir, std::ostream& out) {
  const RunConfig cfg = config_or_default(config);
  const auto data = require_dataset(data_dir);
  const std::int64_t epochs = cfg.ablation_epochs();
  const fs::path root(out_dir);
  std::ostringstream runs;
  runs << "variant,loss,seed,best_epoch,best_dsc_organ,best_dsc_tumor,tail_dsc_organ,tail_dsc_tumor,val_loss_rise\n";
  std::ostringstream table;
  table << "variant,loss,dsc_label1,dsc_label2,median_dsc_label2,seeds\n";
  out << "ablation: " << cfg.ablate.variants.size() << " variants x " << cfg.ablate.losses.size() << " losses x "
      << cfg.ablate.seeds.size() << " seeds, " << epochs << " epochs each\n";
  char line[200];
  std::snprintf(line, sizeof line, "%-16s %-10s %10s %10s %12s\n", "variant", "loss", "label-1", "label-2",
                "median L2");
  std::string pretty = line;
  for (const auto& variant : cfg.ablate.variants) {
    for (const auto& loss : cfg.ablate.losses) {
      std::vector<double> organ, tumor;
      for (const auto seed : cfg.ablate.seeds) {
        const RunOutcome o = run_cell(cfg, data, variant, loss, seed, epochs);
        organ.push_back(o.final_dsc_organ);
        tumor.push_back(o.final_dsc_tumor);
        runs << variant << "," << loss << "," << seed << "," << o.best_epoch << "," << fmt("%.9g", o.best_dsc_organ)
             << "," << fmt("%.9g", o.best_dsc_tumor) << "," << fmt("%.9g", o.final_dsc_organ) << ","
             << fmt("%.9g", o.final_dsc_tumor) << "," << fmt("%.9g", post_minimum_rise(o.records)) << "\n";
        write_text(root / "metrics" / (variant + "_" + loss + "_seed" + std::to_string(seed) + ".csv"),
                   metrics_csv(o.records));
        out << "  " << variant << " / " << loss << " / seed " << seed << ": organ " << fmt("%.3f", o.final_dsc_organ)
            << " tumor " << fmt("%.3f", o.final_dsc_tumor) << "\n"
            << std::flush;
      }
      const double m1 = mean_std(organ).mean, m2 = mean_std(tumor).mean, med2 = median(tumor);
      table << variant << "," << loss << "," << fmt("%.9g", m1) << "," << fmt("%.9g", m2) << "," << fmt("%.9g", med2)
            << "," << tumor.size() << "\n";
      std::snprintf(line, sizeof line, "%-16s %-10s %10.4f %10.4f %12.4f\n", variant.c_str(), loss.c_str(), m1, m2,
                    med2);
      pretty += line;
    }
  }
  write_text(root / "runs.csv", runs.str());
  write_text(root / "ablation.csv", table.str());
  write_text(root / "resolved_config.json", to_json(cfg).dump(2) + "\n");
  out << "\nvalidation DSC, mean over the last " << kTailEpochs << " epochs and seeds (label 1 = organ, label 2 = tumor)\n" << pretty;
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"pgd: position-guided deformable segmentation toolkit: synthetic data, training, evaluation, gradient checks and ablations", "pgd"};
  app.require_subcommand(1, 1);

  std::string config, out_dir, data_dir, checkpoint, split = "test", suite = "all", out_file;
  std::int64_t n = 200;
  bool quiet = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic segmentation dataset");
  gen->add_option("--config", config, "run configuration (JSON)");
  gen->add_option("--out", out_dir, "output dataset directory")->required();
  gen->add_option("--n", n, "number of samples");

  auto* tr = app.add_subcommand("train", "train a model on one cross-validation fold");
  tr->add_option("--config", config, "run configuration (JSON)");
  tr->add_option("--data", data_dir, "dataset directory")->required();
  tr->add_option("--out", out_dir, "run output directory")->required();
  tr->add_flag("--quiet", quiet, "suppress per-epoch lines");

  auto* ev = app.add_subcommand("eval", "per-class DSC/Jaccard of a checkpoint against clean labels");
  ev->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--split", split, "train, val, test or all");
  ev->add_option("--config", config, "run configuration; defaults to the checkpoint's snapshot");
  ev->add_option("--out", out_file, "write the report as JSON");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--suite", suite, "ops, losses, network or all");

  auto* ab = app.add_subcommand("ablate", "network variant x loss ablation sweep");
  ab->add_option("--config", config, "run configuration (JSON)");
  ab->add_option("--data", data_dir, "dataset directory")->required();
  ab->add_option("--out", out_dir, "output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "pgd: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (*gen) return cmd_gen_data(config, out_dir, n, out);
    if (*tr) return cmd_train(config, data_dir, out_dir, quiet, out);
    if (*ev) return cmd_eval(checkpoint, data_dir, split, config, out_file, out);
    if (*gc) return cmd_gradcheck(suite, out);
    if (*ab) return cmd_ablate(config, data_dir, out_dir, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIoError;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const CompatibilityError& e) {
    err << "incompatible checkpoint: " << e.what() << "\n";
    return kCompatibilityError;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIoError;
  }
  return kConfigError;
}

}  // namespace pgd::cli
