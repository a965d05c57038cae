#include "decaps/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "decaps/config.hpp"
#include "decaps/data.hpp"
#include "decaps/metrics.hpp"
#include "decaps/training.hpp"

namespace decaps::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double elapsed_s(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void apply_seed_env(RunConfig& cfg) {
  if (const char* env = std::getenv("DECAPS_SEED")) {
    apply_config_value(cfg, "seed", env);
  }
}

// Registers one CLI option per config key: model.n_iter -> --model.n-iter.
void add_config_flags(CLI::App* cmd, RunConfig& cfg) {
  for (const ConfigKey& key : config_keys()) {
    std::string flag = "--" + key.key;
    for (auto& ch : flag) {
      if (ch == '_') ch = '-';
    }
    const std::string name = key.key;
    cmd->add_option_function<std::string>(
           flag,
           [&cfg, name](const std::string& value) {
             apply_config_value(cfg, name, value);
           },
           "config key " + key.key)
        ->expected(1);
  }
}

struct LoadedData {
  std::vector<Sample> samples;
  int classes = 0;
  std::string manifest_hash;
};

LoadedData load_data(const std::string& manifest) {
  if (manifest.empty()) throw ConfigError("data.manifest is required");
  LoadedData data;
  data.samples = load_manifest(manifest);
  if (data.samples.empty()) throw DataError("manifest is empty: " + manifest);
  data.classes = static_cast<int>(data.samples[0].labels.size());
  for (const Sample& s : data.samples) {
    if (static_cast<int>(s.labels.size()) != data.classes) {
      throw DataError("manifest has inconsistent label widths");
    }
  }
  data.manifest_hash = file_hash_hex(manifest);
  return data;
}

struct TrainOutcome {
  fs::path final_checkpoint;
  double last_total = 0.0;
};

Checkpoint snapshot(const CapsNet& model, const TemplateBank& bank,
                    const AdamState& adam, const PeekabooTrainer& trainer,
                    const std::string& echo, int64_t epochs_done) {
  Checkpoint ckpt;
  ckpt.config_echo = echo;
  ckpt.params = model.named_params();
  for (auto& [name, t] : ckpt.params) t = detach(t);
  ckpt.bank = bank;
  ckpt.adam_lr = adam.learning_rate();
  ckpt.adam_beta1 = adam.beta1();
  ckpt.adam_beta2 = adam.beta2();
  ckpt.adam_eps = adam.epsilon();
  ckpt.adam_step_count = adam.step_count();
  ckpt.adam_m = adam.first_moments();
  ckpt.adam_v = adam.second_moments();
  ckpt.epochs_done = epochs_done;
  ckpt.global_step = trainer.global_step();
  ckpt.rng_state = Rng(trainer.seed()).serialize();
  return ckpt;
}

TrainOutcome run_training(RunConfig cfg, const std::string& resume_path,
                          std::ostream& log) {
  LoadedData data = load_data(cfg.data_manifest);
  if (cfg.model_classes != data.classes) {
    log << "note: model.classes set to " << data.classes << " from the manifest\n";
    cfg.model_classes = data.classes;
  }
  cfg.validate();
  const std::string echo = config_echo(cfg);

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream cfg_out(fs::path(cfg.out_dir) / "config.echo");
    cfg_out << echo;
  }

  CapsNet model(cfg.model_config(), Rng(cfg.seed).split(1));
  TemplateBank bank(cfg.model_heads, cfg.model_classes, cfg.model_d_out);
  AdamState adam(model.params(), cfg.optim_lr, cfg.optim_beta1, cfg.optim_beta2);
  PeekabooTrainer trainer(model, bank, adam, cfg.loss_config(), cfg.peekaboo_config(),
                          cfg.seed, cfg.optim_threads);

  int64_t start_epoch = 0;
  const fs::path log_path = fs::path(cfg.out_dir) / "loss_log.csv";
  if (!resume_path.empty()) {
    Checkpoint ckpt = load_checkpoint(resume_path);
    restore_model(ckpt, model, bank, adam);
    start_epoch = ckpt.epochs_done;
    trainer.set_global_step(ckpt.global_step);
    log << "resumed from " << resume_path << " at epoch " << start_epoch << "\n";
  }
  std::ofstream loss_log(log_path, resume_path.empty()
                                       ? std::ios::trunc
                                       : std::ios::app);
  if (resume_path.empty()) loss_log << "step,margin,har,total\n";

  TrainOutcome outcome;
  const int n = static_cast<int>(data.samples.size());
  for (int64_t epoch = start_epoch; epoch < cfg.optim_epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const auto batches =
        batch_indices(n, cfg.optim_batch, Rng(cfg.seed).split(2).split(epoch).seed());
    double epoch_total = 0.0;
    for (const auto& batch_ids : batches) {
      std::vector<TrainItem> batch;
      batch.reserve(batch_ids.size());
      for (int idx : batch_ids) {
        batch.push_back({data.samples[idx].image, data.samples[idx].labels, idx});
      }
      LossBreakdown loss = trainer.train_step(batch, static_cast<int>(epoch));
      loss_log << trainer.global_step() << ',' << loss.margin << ',' << loss.har << ','
               << loss.total << '\n';
      epoch_total += loss.total;
      outcome.last_total = loss.total;
    }
    loss_log.flush();

    char name[64];
    std::snprintf(name, sizeof(name), "checkpoint_epoch_%03lld.dkpt",
                  static_cast<long long>(epoch + 1));
    outcome.final_checkpoint = fs::path(cfg.out_dir) / name;
    save_checkpoint(outcome.final_checkpoint,
                    snapshot(model, bank, adam, trainer, echo, epoch + 1));
    log << "epoch " << (epoch + 1) << "/" << cfg.optim_epochs
        << " mean_total=" << (epoch_total / static_cast<double>(batches.size()))
        << " (" << elapsed_s(epoch_start) << "s)\n";
  }
  if (outcome.final_checkpoint.empty()) {
    outcome.final_checkpoint = fs::path(cfg.out_dir) / "checkpoint_epoch_000.dkpt";
    save_checkpoint(outcome.final_checkpoint,
                    snapshot(model, bank, adam, trainer, echo, 0));
  }
  return outcome;
}

struct EvalOutcome {
  EvalReport report;
  fs::path report_path;
};

EvalOutcome run_eval(const std::string& checkpoint_path, const std::string& manifest,
                     const fs::path& out_dir, bool dump_hams, int threads,
                     const std::vector<std::pair<std::string, std::string>>& overrides,
                     std::ostream& log) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  RunConfig cfg = parse_config_text(ckpt.config_echo);
  for (const auto& [key, value] : overrides) apply_config_value(cfg, key, value);
  if (!manifest.empty()) cfg.data_manifest = manifest;
  apply_seed_env(cfg);

  LoadedData data = load_data(cfg.data_manifest);
  if (data.classes != cfg.model_classes) {
    throw DataError("eval: manifest classes (" + std::to_string(data.classes) +
                    ") do not match the checkpoint (" +
                    std::to_string(cfg.model_classes) + ")");
  }
  cfg.validate();

  CapsNet model(cfg.model_config(), Rng(cfg.seed).split(1));
  TemplateBank bank(cfg.model_heads, cfg.model_classes, cfg.model_d_out);
  AdamState adam(model.params(), cfg.optim_lr, cfg.optim_beta1, cfg.optim_beta2);
  restore_model(ckpt, model, bank, adam);

  EvalConfig ecfg;
  ecfg.peekaboo = cfg.peekaboo_config();
  ecfg.threads = threads > 0 ? threads : cfg.optim_threads;

  EvalOutcome out;
  out.report = evaluate(model, data.samples, ecfg);
  out.report.config_echo = config_echo(cfg);
  out.report.manifest_hash = data.manifest_hash;

  fs::create_directories(out_dir);
  out.report_path = out_dir / "report.json";
  {
    std::ofstream rj(out.report_path, std::ios::trunc);
    rj << eval_report_json(out.report);
  }
  log << "mean AUC " << out.report.mean_auc << ", mIoU L1 " << out.report.miou_level1.mean
      << ", mIoU L2 " << out.report.miou_level2.mean << " -> " << out.report_path.string()
      << "\n";

  if (dump_hams) {
    const fs::path ham_dir = out_dir / "hams";
    for (const Sample& sample : data.samples) {
      SampleVisualization vis = visualize_sample(model, sample, ecfg);
      const fs::path sample_dir = ham_dir / vis.sample_id;
      fs::create_directories(sample_dir);
      const int I = vis.coarse_hams.dim(0), J = vis.coarse_hams.dim(1);
      const int gh = vis.coarse_hams.dim(2), gw = vis.coarse_hams.dim(3);
      Tensor flat = reshape(vis.coarse_hams, {I * J, gh, gw});
      for (int i = 0; i < I; ++i) {
        for (int j = 0; j < J; ++j) {
          Tensor map = reshape(narrow0(flat, i * J + j, 1), {gh, gw});
          char name[64];
          std::snprintf(name, sizeof(name), "ham_h%d_c%d.pgm", i, j);
          write_pgm(sample_dir / name, normalize_ham(map));
        }
      }
      json side;
      side["sample_id"] = vis.sample_id;
      side["coarse_scores"] = vis.coarse_scores;
      side["fine_scores"] = vis.fine_scores;
      side["distilled_scores"] = vis.distilled_scores;
      auto dets_to_json = [](const std::vector<Detection>& dets) {
        json arr = json::array();
        for (const Detection& d : dets) {
          arr.push_back({{"class", d.cls},
                         {"box", {d.box.r0, d.box.c0, d.box.r1, d.box.c1}},
                         {"score", d.score},
                         {"level", d.level}});
        }
        return arr;
      };
      side["detections_level1"] = dets_to_json(vis.detections_level1);
      side["detections_level2"] = dets_to_json(vis.detections_level2);
      std::ofstream sj(sample_dir / "boxes.json", std::ios::trunc);
      sj << side.dump(2) << "\n";
    }
    log << "HAM dumps under " << ham_dir.string() << "\n";
  }
  return out;
}

int cmd_gen(const DatasetSpec& spec, const std::string& out_dir, std::ostream& log) {
  spec.validate();
  const auto samples = generate(spec);
  const fs::path manifest = fs::path(out_dir) / "manifest.jsonl";
  save_manifest(manifest, samples);
  log << "wrote " << samples.size() << " samples to " << manifest.string() << "\n";
  return 0;
}

struct AblateRow {
  std::string name;
  bool crop, drop, distill;
};

int cmd_ablate(RunConfig base, const std::string& eval_manifest, std::ostream& log) {
  if (eval_manifest.empty()) throw ConfigError("ablate: --eval-manifest is required");
  const std::vector<AblateRow> rows = {
      {"idr", false, false, false},
      {"idr+drop", false, true, false},
      {"idr+crop", true, false, false},
      {"idr+crop+drop", true, true, false},
      {"idr+crop+drop+distill", true, true, true},
  };

  const fs::path out_root = base.out_dir;
  fs::create_directories(out_root);
  json table = json::array();
  // crop+drop training is shared by the distill row: distillation only
  // changes inference.
  std::map<std::pair<bool, bool>, fs::path> trained;

  log << "setting            mAUC    mIoU-L1  mIoU-L2  acc\n";
  for (const AblateRow& row : rows) {
    RunConfig cfg = base;
    cfg.peekaboo_crop = row.crop;
    cfg.peekaboo_drop = row.drop;
    cfg.peekaboo_distill = row.distill;
    cfg.out_dir = (out_root / row.name).string();

    fs::path ckpt_path;
    const auto key = std::make_pair(row.crop, row.drop);
    if (auto it = trained.find(key); it != trained.end()) {
      ckpt_path = it->second;
    } else {
      TrainOutcome t = run_training(cfg, "", log);
      ckpt_path = t.final_checkpoint;
      trained.emplace(key, ckpt_path);
    }

    std::vector<std::pair<std::string, std::string>> overrides = {
        {"peekaboo.crop", row.crop ? "true" : "false"},
        {"peekaboo.drop", row.drop ? "true" : "false"},
        {"peekaboo.distill", row.distill ? "true" : "false"},
    };
    EvalOutcome ev = run_eval(ckpt_path.string(), eval_manifest,
                              fs::path(cfg.out_dir) / "eval", false,
                              cfg.optim_threads, overrides, log);

    char line[160];
    std::snprintf(line, sizeof(line), "%-18s %.4f  %.4f   %.4f   %.4f", row.name.c_str(),
                  ev.report.mean_auc, ev.report.miou_level1.mean,
                  ev.report.miou_level2.mean, ev.report.accuracy_per_class);
    log << line << "\n";
    table.push_back({{"name", row.name},
                     {"crop", row.crop},
                     {"drop", row.drop},
                     {"distill", row.distill},
                     {"mean_auc", ev.report.mean_auc},
                     {"miou_level1", ev.report.miou_level1.mean},
                     {"miou_level2", ev.report.miou_level2.mean},
                     {"accuracy_per_class", ev.report.accuracy_per_class},
                     {"manifest_hash", ev.report.manifest_hash},
                     {"report", (fs::path(cfg.out_dir) / "eval" / "report.json").string()}});
  }
  std::ofstream tj(out_root / "ablation.json", std::ios::trunc);
  tj << table.dump(2) << "\n";
  log << "ablation table -> " << (out_root / "ablation.json").string() << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Detail-oriented capsule network trainer and evaluator"};
  app.require_subcommand(1);

  // --- gen ---
  auto* gen = app.add_subcommand("gen", "Generate a synthetic shape dataset");
  DatasetSpec spec;
  std::string gen_out;
  gen->add_option("--n", spec.num_samples, "number of samples");
  gen->add_option("--seed", spec.seed, "dataset seed");
  gen->add_option("--image-size", spec.image_size, "square image size");
  gen->add_option("--classes", spec.classes, "number of shape classes (<=4)");
  gen->add_option("--min-objects", spec.min_objects, "min shapes per image");
  gen->add_option("--max-objects", spec.max_objects, "max shapes per image");
  gen->add_option("--min-size", spec.min_size, "min shape half-extent");
  gen->add_option("--max-size", spec.max_size, "max shape half-extent");
  gen->add_option("--noise", spec.noise, "gaussian pixel noise sigma");
  gen->add_option("--out", gen_out, "output directory")->required();

  // --- train ---
  auto* train = app.add_subcommand("train", "Train with the Peekaboo procedure");
  RunConfig train_cfg;
  std::string train_config_file, resume_path;
  train->add_option("--config", train_config_file, "key = value config file");
  train->add_option("--resume", resume_path, "checkpoint to resume from");
  // The config file is parsed in a preparse callback so that explicit flags
  // win over file values regardless of argument order.
  train->preparse_callback([&](size_t) {
    if (!train_config_file.empty()) train_cfg = load_config_file(train_config_file);
  });
  add_config_flags(train, train_cfg);

  // --- eval / localize ---
  struct EvalArgs {
    std::string checkpoint, manifest, out;
    bool dump_hams = false;
    int threads = 0;
    std::vector<std::pair<std::string, std::string>> overrides;
  };
  auto add_eval_flags = [](CLI::App* cmd, EvalArgs& ea) {
    cmd->add_option("--checkpoint", ea.checkpoint, "trained checkpoint")->required();
    cmd->add_option("--manifest", ea.manifest, "evaluation manifest");
    cmd->add_option("--out", ea.out, "output directory")->required();
    cmd->add_option("--threads", ea.threads, "worker threads");
    for (const char* key :
         {"peekaboo.crop", "peekaboo.drop", "peekaboo.distill", "peekaboo.theta_c",
          "peekaboo.theta_d", "peekaboo.head_select", "seed"}) {
      std::string flag = std::string("--") + key;
      for (auto& ch : flag) {
        if (ch == '_') ch = '-';
      }
      cmd->add_option_function<std::string>(
             flag,
             [&ea, key](const std::string& v) { ea.overrides.emplace_back(key, v); },
             "override " + std::string(key))
          ->expected(1);
    }
  };
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  EvalArgs eval_args;
  add_eval_flags(eval_cmd, eval_args);
  eval_cmd->add_flag("--dump-hams", eval_args.dump_hams,
                     "write HAM heatmaps and box sidecars");

  auto* loc_cmd = app.add_subcommand("localize", "Evaluate and dump HAMs + boxes");
  EvalArgs loc_args;
  add_eval_flags(loc_cmd, loc_args);

  // --- ablate ---
  auto* ablate = app.add_subcommand("ablate", "Run the component ablation grid");
  RunConfig ablate_cfg;
  std::string ablate_config_file, ablate_eval_manifest;
  ablate->add_option("--config", ablate_config_file, "key = value config file");
  ablate->add_option("--eval-manifest", ablate_eval_manifest, "held-out manifest")
      ->required();
  ablate->preparse_callback([&](size_t) {
    if (!ablate_config_file.empty()) ablate_cfg = load_config_file(ablate_config_file);
  });
  add_config_flags(ablate, ablate_cfg);

  std::vector<std::string> argv_copy(args);
  try {
    std::vector<const char*> argv;
    argv.push_back("decaps");
    for (const auto& a : argv_copy) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());

    if (gen->parsed()) return cmd_gen(spec, gen_out, std::cout);
    if (train->parsed()) {
      apply_seed_env(train_cfg);
      run_training(train_cfg, resume_path, std::cout);
      return 0;
    }
    if (eval_cmd->parsed()) {
      run_eval(eval_args.checkpoint, eval_args.manifest, eval_args.out,
               eval_args.dump_hams, eval_args.threads, eval_args.overrides, std::cout);
      return 0;
    }
    if (loc_cmd->parsed()) {
      run_eval(loc_args.checkpoint, loc_args.manifest, loc_args.out, true,
               loc_args.threads, loc_args.overrides, std::cout);
      return 0;
    }
    if (ablate->parsed()) {
      apply_seed_env(ablate_cfg);
      return cmd_ablate(ablate_cfg, ablate_eval_manifest, std::cout);
    }
    return 1;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;  // --help
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace decaps::cli
