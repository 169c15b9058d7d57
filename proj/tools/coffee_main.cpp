// Command-line driver for the fine-tuning laboratory. Every subcommand is a
// deterministic function of the JSON config (plus the explicit flag
// overrides), so pipelines can be re-run and diffed byte for byte.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "coffee/checks.hpp"
#include "coffee/harness.hpp"

namespace fs = std::filesystem;
using namespace coffee;

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out_dir;
  int threads = 0;  // 0 = keep config value
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON experiment config (defaults used if omitted)");
  cmd->add_option("--seed", f.seed, "replace the config's seed list with this single seed");
  cmd->add_option("--out", f.out_dir, "output directory (overrides config paths.out_dir)");
  cmd->add_option("--threads", f.threads, "worker threads for independent runs");
}

ExperimentConfig load_config(const CommonFlags& f) {
  ExperimentConfig cfg =
      f.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::from_file(f.config_path);
  if (f.seed) cfg.seeds = {*f.seed};
  if (f.threads > 0) cfg.threads = f.threads;
  if (!f.out_dir.empty()) {
    const PathsConfig defaults;
    // Rebase artifact paths that the config left at their defaults.
    if (cfg.paths.checkpoint ==
        (fs::path(cfg.paths.out_dir) / fs::path(defaults.checkpoint).filename()).string() ||
        cfg.paths.checkpoint == defaults.checkpoint)
      cfg.paths.checkpoint = (fs::path(f.out_dir) / "model.ckpt").string();
    if (cfg.paths.eval_head ==
        (fs::path(cfg.paths.out_dir) / fs::path(defaults.eval_head).filename()).string() ||
        cfg.paths.eval_head == defaults.eval_head)
      cfg.paths.eval_head = (fs::path(f.out_dir) / "eval_head.ckpt").string();
    cfg.paths.out_dir = f.out_dir;
  }
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, text);
  std::printf("wrote %s\n", path.string().c_str());
}

void write_sample_grid(const fs::path& dir, const std::vector<std::vector<float>>& samples) {
  fs::create_directories(dir);
  char name[32];
  for (size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof(name), "%05zu.pgm", i);
    write_pgm(dir / name, samples[i].data(), kImageSide, kImageSide);
  }
}

// Shared by `finetune` and `sample`: run every configured (pair, method,
// seed) cell, handing each run's artifacts to a sink.
template <class Sink>
void for_each_run(const ExperimentConfig& cfg, const Artifacts& a, Sink&& sink) {
  for (const auto& [base, attr] : cfg.concept_pairs)
    for (FinetuneMethod m : cfg.methods)
      for (uint64_t seed : cfg.seeds) {
        RunSpec spec{base, attr, m, seed, cfg.lambda};
        sink(spec, run_one(a, cfg, spec));
      }
}

int cmd_datagen(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f);
  const fs::path dir = fs::path(cfg.paths.out_dir) / "corpus";
  const auto corpus = build_pretrain_corpus(cfg.corpus.size, cfg.corpus.seed);
  export_pgms(dir, corpus);
  std::string labels = "index,base,attributes,prompt\n";
  for (size_t i = 0; i < corpus.size(); ++i) {
    std::string attrs;
    for (const std::string& s : corpus[i].attributes) attrs += (attrs.empty() ? "" : "+") + s;
    char idx[16];
    std::snprintf(idx, sizeof(idx), "%05zu", i);
    labels += std::string(idx) + "," + corpus[i].base + "," + attrs + "," + corpus[i].prompt + "\n";
  }
  write_text(dir / "labels.csv", labels);
  std::printf("rendered %zu corpus images to %s\n", corpus.size(), dir.string().c_str());
  return 0;
}

int cmd_pretrain(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f);
  const auto corpus = build_pretrain_corpus(cfg.corpus.size, cfg.corpus.seed);
  const NoiseSchedule schedule = cfg.schedule.make();
  const PretrainResult r = pretrain(corpus, Vocabulary::standard(), cfg.pretrain, schedule);
  save_checkpoint(cfg.paths.checkpoint,
                  model_checkpoint_data(r.net, r.table, Vocabulary::standard(), cfg.schedule,
                                        cfg.model_fingerprint(), cfg.pretrain.seed));
  std::printf("wrote %s\n", cfg.paths.checkpoint.c_str());
  std::string trace = "step,loss\n";
  for (size_t i = 0; i < r.loss_trace.size(); ++i)
    trace += std::to_string(i) + "," + harness_detail::format_float(r.loss_trace[i]) + "\n";
  write_text(fs::path(cfg.paths.out_dir) / "pretrain_loss.csv", trace);
  std::printf("final training loss %.5f over %d steps\n",
              r.loss_trace.empty() ? 0.0 : double(r.loss_trace.back()), cfg.pretrain.steps);
  return 0;
}

int cmd_train_eval_head(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f);
  const auto corpus = build_pretrain_corpus(cfg.eval_head.corpus_size, cfg.eval_head.corpus_seed);
  const FeatureExtractor fx =
      train_feature_extractor(corpus, cfg.eval_head.seed, cfg.eval_head.train);
  save_checkpoint(cfg.paths.eval_head,
                  eval_head_checkpoint_data(fx, cfg.eval_head_fingerprint(), cfg.eval_head.seed));
  std::printf("wrote %s\n", cfg.paths.eval_head.c_str());
  return 0;
}

int cmd_finetune(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f);
  const Artifacts a = prepare_artifacts(cfg, /*build_missing=*/false);
  for_each_run(cfg, a, [&](const RunSpec& spec, const RunOutput& out) {
    const std::string tag = harness_detail::run_tag(out.report);
    const fs::path dir = fs::path(cfg.paths.out_dir) / "finetuned";
    save_checkpoint(dir / (tag + ".ckpt"),
                    model_checkpoint_data(out.finetune.net, out.finetune.table, a.vocab,
                                          cfg.schedule, a.fingerprint, spec.seed));
    write_text(fs::path(cfg.paths.out_dir) / "traces" / (tag + ".csv"),
               harness_detail::trace_csv(out.finetune));
  });
  return 0;
}

int cmd_sample(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f);
  const Artifacts a = prepare_artifacts(cfg, /*build_missing=*/false);
  for_each_run(cfg, a, [&](const RunSpec&, const RunOutput& out) {
    const fs::path dir =
        fs::path(cfg.paths.out_dir) / "samples" / harness_detail::run_tag(out.report);
    write_sample_grid(dir, out.samples);
    std::printf("wrote %d samples to %s\n", int(out.samples.size()), dir.string().c_str());
  });
  return 0;
}

int cmd_eval(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f);
  const Artifacts a = prepare_artifacts(cfg, /*build_missing=*/false);
  const std::vector<EvalReport> rows = run_experiment(cfg, a);
  write_text(fs::path(cfg.paths.out_dir) / "report.json",
             experiment_report_json(cfg, rows).dump(2) + "\n");
  const std::string csv = experiment_summary_csv(cfg, rows);
  write_text(fs::path(cfg.paths.out_dir) / "summary.csv", csv);
  std::printf("\n%s", csv.c_str());
  return 0;
}

int cmd_sweep(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f);
  const Artifacts a = prepare_artifacts(cfg, /*build_missing=*/false);
  const std::vector<EvalReport> rows = run_lambda_sweep(cfg, a);
  nlohmann::json j;
  j["fingerprint"] = cfg.model_fingerprint();
  j["lambdas"] = cfg.lambda_sweep;
  j["rows"] = nlohmann::json::array();
  for (const EvalReport& r : rows) j["rows"].push_back(report_to_json(r));
  write_text(fs::path(cfg.paths.out_dir) / "sweep.json", j.dump(2) + "\n");
  const std::string csv = sweep_csv(cfg, rows);
  write_text(fs::path(cfg.paths.out_dir) / "sweep.csv", csv);
  std::printf("\n%s", csv.c_str());
  return 0;
}

int cmd_protocols(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f);
  const Artifacts a = prepare_artifacts(cfg, /*build_missing=*/false);
  const std::vector<ProtocolRow> rows = run_protocol_comparison(cfg, a);
  nlohmann::json j;
  j["fingerprint"] = cfg.model_fingerprint();
  j["rows"] = nlohmann::json::array();
  for (const ProtocolRow& r : rows) {
    nlohmann::json e;
    e["groups"] = r.groups;
    e["trained_params"] = r.trained_params;
    e["param_fraction_of_full"] = r.param_fraction_of_full;
    e["is_analog"] = r.is_analog;
    e["ffd"] = r.ffd.value();
    e["ffd_finetune"] = r.ffd_finetune.value();
    e["rows"] = nlohmann::json::array();
    for (const EvalReport& row : r.rows) e["rows"].push_back(report_to_json(row));
    j["rows"].push_back(std::move(e));
  }
  write_text(fs::path(cfg.paths.out_dir) / "protocols.json", j.dump(2) + "\n");
  const std::string csv = protocol_csv(rows);
  write_text(fs::path(cfg.paths.out_dir) / "protocols.csv", csv);
  std::printf("\n%s", csv.c_str());
  return 0;
}

std::vector<EvalReport> rows_from_report_file(const fs::path& path, const char* produce_cmd) {
  if (!fs::exists(path))
    throw Error(Error::Kind::io,
                "report not found: " + path.string() + "; produce it with: " + produce_cmd);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::io, path.string() + ": " + e.what());
  }
  std::vector<EvalReport> rows;
  try {
    if (j.contains("methods"))
      for (const auto& [name, entry] : j.at("methods").items())
        for (const nlohmann::json& r : entry.at("rows")) rows.push_back(report_from_json(r));
    else
      for (const nlohmann::json& r : j.at("rows")) rows.push_back(report_from_json(r));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::io, path.string() + ": " + e.what());
  }
  return rows;
}

int cmd_report(const CommonFlags& f, bool check) {
  const ExperimentConfig cfg = load_config(f);
  const fs::path out = cfg.paths.out_dir;
  const std::vector<EvalReport> rows =
      rows_from_report_file(out / "report.json", "coffee eval --config <config>");
  std::printf("%s", experiment_summary_csv(cfg, rows).c_str());
  if (!check) return 0;

  std::vector<CriterionResult> results;
  results.push_back(check_presence_halving(rows));
  results.push_back(check_steering_insufficiency(rows));
  if (fs::exists(out / "sweep.json")) {
    const auto sweep = rows_from_report_file(out / "sweep.json", "coffee sweep");
    results.push_back(check_lambda_trend(cfg.lambda_sweep, sweep));
  } else {
    results.push_back({.name = "lambda-trend",
                       .pass = false,
                       .detail = "sweep.json missing; produce it with: coffee sweep --config <config>"});
  }
  results.push_back(check_drift_bound(rows));
  if (fs::exists(out / "protocols.json")) {
    nlohmann::json j = nlohmann::json::parse(read_file(out / "protocols.json"));
    std::vector<ProtocolRow> prows;
    for (const nlohmann::json& e : j.at("rows")) {
      ProtocolRow r;
      e.at("groups").get_to(r.groups);
      e.at("trained_params").get_to(r.trained_params);
      e.at("param_fraction_of_full").get_to(r.param_fraction_of_full);
      e.at("is_analog").get_to(r.is_analog);
      r.ffd = e.at("ffd").get<float>();
      r.ffd_finetune = e.at("ffd_finetune").get<float>();
      prows.push_back(std::move(r));
    }
    results.push_back(check_protocol_competitiveness(prows));
  } else {
    results.push_back(
        {.name = "protocol-competitiveness",
         .pass = false,
         .detail = "protocols.json missing; produce it with: coffee protocols --config <config>"});
  }

  bool all_pass = true;
  std::printf("\n");
  for (const CriterionResult& r : results) {
    const bool counts = !r.informational;
    if (counts && !r.pass) all_pass = false;
    std::printf("%-28s %s  %s\n", r.name.c_str(),
                r.informational ? "INFO" : (r.pass ? "PASS" : "FAIL"), r.detail.c_str());
  }
  return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for drift-regularized diffusion fine-tuning"};
  app.require_subcommand(1);

  CommonFlags flags;
  bool check = false;

  CLI::App* datagen = app.add_subcommand("datagen", "render the pretraining corpus to PGM files");
  CLI::App* pretrain_cmd =
      app.add_subcommand("pretrain", "train the denoiser + embedding table and checkpoint them");
  CLI::App* train_head =
      app.add_subcommand("train-eval-head", "train and checkpoint the frozen evaluation head");
  CLI::App* finetune_cmd = app.add_subcommand(
      "finetune", "fine-tune per (pair, method, seed); save checkpoints and loss traces");
  CLI::App* sample_cmd =
      app.add_subcommand("sample", "fine-tune and write evaluation sample grids as PGM files");
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "run the full experiment table and write report + summary");
  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "run the regularization-strength sweep and write its table");
  CLI::App* protocols_cmd = app.add_subcommand(
      "protocols", "compare trainable-group protocols and write their table");
  CLI::App* report_cmd =
      app.add_subcommand("report", "print saved report tables; --check gates the claims");
  report_cmd->add_flag("--check", check, "evaluate the directional claims; exit 2 on failure");

  for (CLI::App* cmd : {datagen, pretrain_cmd, train_head, finetune_cmd, sample_cmd, eval_cmd,
                        sweep_cmd, protocols_cmd, report_cmd})
    add_common_flags(cmd, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (datagen->parsed()) return cmd_datagen(flags);
    if (pretrain_cmd->parsed()) return cmd_pretrain(flags);
    if (train_head->parsed()) return cmd_train_eval_head(flags);
    if (finetune_cmd->parsed()) return cmd_finetune(flags);
    if (sample_cmd->parsed()) return cmd_sample(flags);
    if (eval_cmd->parsed()) return cmd_eval(flags);
    if (sweep_cmd->parsed()) return cmd_sweep(flags);
    if (protocols_cmd->parsed()) return cmd_protocols(flags);
    if (report_cmd->parsed()) return cmd_report(flags, check);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
