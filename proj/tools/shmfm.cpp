// shmfm: synthetic data, preprocessing, training and evaluation from INI experiment configs.
//
// Every stage writes into a fresh run directory <out>/<stage>-<config hash>-<UTC time>
// holding the input config, its canonical form, run.json (seeds, hashes, inputs, outputs) and
// log.txt. The directory path is the only thing printed on stdout.

#include "shmfm/anomaly.hpp"
#include "shmfm/baselines.hpp"
#include "shmfm/config.hpp"
#include "shmfm/evaluation.hpp"
#include "shmfm/io.hpp"
#include "shmfm/mae.hpp"
#include "shmfm/signal.hpp"
#include "shmfm/synth.hpp"
#include "shmfm/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace shmfm;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kBadConfig = 3,
  kMissingCheckpoint = 4,
  kBadFormat = 5,
  kBadData = 6,
  kDiverged = 7,
};

class MissingCheckpoint : public Error {
 public:
  using Error::Error;
};

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string model_name(const ModelConfig& m) {
  return "(" + std::to_string(m.e_dim) + "," + std::to_string(m.d_dim) + ")";
}

std::string utc_stamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

struct Run {
  std::string stage;
  ExperimentConfig cfg;
  fs::path dir;
  json meta;
  std::ofstream log_file;

  void log(const std::string& line) {
    std::cerr << line << '\n';
    log_file << line << '\n';
    log_file.flush();
  }

  std::uint64_t seed(std::string_view module) {
    const std::uint64_t s = derive_seed(cfg.seed, module);
    meta["seeds"][std::string(module)] = s;
    return s;
  }

  fs::path output(const std::string& name) {
    meta["outputs"].push_back(name);
    return dir / name;
  }

  void input(const fs::path& p) { meta["inputs"].push_back(p.string()); }

  void finish() {
    meta["finished"] = utc_stamp();
    std::ofstream(dir / "run.json") << meta.dump(2) << '\n';
  }
};

// Never reuses an existing directory: a clash within the same second gets a numeric suffix.
fs::path fresh_dir(const fs::path& root, const std::string& stem) {
  fs::create_directories(root);
  fs::path dir = root / stem;
  for (int i = 1; fs::exists(dir); ++i) dir = root / (stem + "-" + std::to_string(i));
  fs::create_directory(dir);
  return dir;
}

Run open_run(const std::string& stage, const fs::path& config_path, ExperimentConfig cfg, const fs::path& out_root) {
  Run r;
  r.stage = stage;
  r.cfg = std::move(cfg);
  const std::uint64_t hash = r.cfg.hash();
  r.dir = fresh_dir(out_root, stage + "-" + hex(hash).substr(0, 12) + "-" + utc_stamp());
  r.log_file.open(r.dir / "log.txt");
  if (!config_path.empty()) fs::copy_file(config_path, r.dir / "config.ini");
  std::ofstream(r.dir / "config.canonical.ini") << r.cfg.canonical();
  r.meta = {{"stage", stage},           {"config_hash", hex(hash)}, {"seed", r.cfg.seed},
            {"threads", r.cfg.threads}, {"started", utc_stamp()},   {"inputs", json::array()},
            {"outputs", json::array()}, {"seeds", json::object()}};
  return r;
}

Checkpoint open_checkpoint(Run& run, const std::string& key) {
  const fs::path p = run.cfg.path(key);
  if (!fs::exists(p)) throw MissingCheckpoint("checkpoint not found: " + p.string());
  run.input(p);
  Checkpoint ck = load_checkpoint(p);
  run.log("loaded " + model_name(ck.model.config) + " from " + p.string());
  return ck;
}

std::vector<SpectrogramWindow> load_windows(Run& run, const std::string& key) {
  std::vector<SpectrogramWindow> out;
  for (const fs::path& dir : run.cfg.path_list(key)) {
    run.input(dir);
    auto part = read_dataset(dir);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  if (out.empty()) throw DataError("no windows under [paths] " + key);
  run.log(key + ": " + std::to_string(out.size()) + " windows");
  return out;
}

std::vector<RawRecording> load_recordings(Run& run, const std::string& key) {
  std::vector<RawRecording> out;
  for (const fs::path& p : run.cfg.path_list(key)) {
    run.input(p);
    out.push_back(read_recording(p));
  }
  return out;
}

EpochHook progress(Run& run) {
  return [&run](int epoch, const MaeModel<float>&) -> std::optional<double> {
    if (epoch % 10 == 0) run.log("epoch " + std::to_string(epoch));
    return std::nullopt;
  };
}

void save_training(Run& run, const MaeModel<float>& m, const TrainLog& log, const TrainPlan& plan) {
  run.meta["plan"] = plan.canonical();
  run.meta["plan_hash"] = hex(plan.hash());
  log.write_csv(run.output("train_log.csv"));
  const std::uint64_t provenance = mix_seed(run.cfg.hash(), plan.hash());
  save_checkpoint(m, run.output("model.maec"), provenance, plan.adam);
  run.meta["provenance"] = hex(provenance);
  if (!log.epochs.empty()) run.log("final epoch loss " + std::to_string(log.epochs.back().loss));
}

std::vector<Verdict> truth_of(std::span<const SpectrogramWindow> windows) {
  std::vector<Verdict> t;
  for (const auto& w : windows) t.push_back(w.tag == WindowTag::anomaly ? Verdict::anomaly : Verdict::normal);
  return t;
}

void write_reports(Run& run, const std::vector<MetricsReport>& reports) {
  write_reports_csv(run.output("report.csv"), reports);
  const std::string table = format_reports(reports);
  std::ofstream(run.output("report.txt")) << table;
  run.log(table);
}

// ---------------------------------------------------------------------------------------
// Stages.

void synth_gen(Run& run) {
  const ExperimentConfig& c = run.cfg;
  BridgeConfig bridge = c.bridge;
  if (!c.bridge_seed_set) bridge.seed = run.seed("synth_bench.bridge");
  TrafficConfig traffic = c.traffic;
  if (!c.traffic_seed_set) traffic.seed = run.seed("synth_bench.traffic");
  const std::string ext = "." + c.synth.format;
  json files = json::array();
  auto write = [&](const std::string& name, const std::string& state, const BridgeConfig& b, std::uint64_t hash,
                   const RawRecording& rec) {
    const fs::path p = run.output(name + ext);
    if (c.synth.format == "csv")
      write_recording_csv(p, rec);
    else
      write_recording_bin(p, rec);
    files.push_back({{"file", p.filename().string()}, {"state", state}, {"seed", b.seed}, {"config_hash", hex(hash)},
                     {"samples", rec.size()}});
    run.log("wrote " + p.filename().string() + " (" + std::to_string(rec.size()) + " samples)");
  };

  // Separate days for training, calibration and testing; the damaged day shares the
  // excitation and noise streams of the healthy test day.
  auto day = [&](std::uint64_t k) {
    BridgeConfig b = bridge;
    b.seed = mix_seed(bridge.seed, k);
    return b;
  };
  const BridgeConfig d0 = day(0), d1 = day(1), d2 = day(2), d3 = day(3);
  write("normal", "normal", d0, config_hash(d0), gen_ambient(d0, c.synth.normal_s, false));
  write("calibration", "normal", d1, config_hash(d1), gen_ambient(d1, c.synth.damaged_s, false));
  write("test_normal", "normal", d2, config_hash(d2), gen_ambient(d2, c.synth.damaged_s, false));
  write("damaged", "damaged", d2, config_hash(d2), gen_ambient(d2, c.synth.damaged_s, true));
  const TrafficRecording t = gen_traffic(d3, traffic, c.synth.traffic_s);
  write("traffic", "traffic", d3, config_hash(d3, traffic), t.recording);
  std::ofstream events(run.output("traffic_events.csv"));
  events << "class,arrival_s,label_start,label_len\n";
  for (const VehicleEvent& ev : t.events)
    events << (ev.cls == VehicleClass::light ? "light" : "heavy") << ',' << ev.arrival_s << ',' << ev.label_start << ','
           << ev.label_len << '\n';
  const json manifest = {{"files", files}, {"traffic_seed", traffic.seed}, {"vehicles", t.events.size()}};
  std::ofstream(run.output("manifest.json")) << manifest.dump(2) << '\n';
}

// Every [paths] entry becomes a dataset directory of the same name. Entries whose key starts
// with "damaged" are tagged anomalous, all others normal.
void preprocess(Run& run) {
  if (run.cfg.paths.empty()) throw ConfigError("[paths] lists no recordings to preprocess");
  for (const auto& [key, files] : run.cfg.paths) {
    std::vector<RawRecording> recs;
    for (const fs::path& p : files) {
      run.input(p);
      recs.push_back(read_recording(p));
    }
    const WindowTag tag = key.rfind("damaged", 0) == 0 ? WindowTag::anomaly : WindowTag::normal;
    const Dataset ds = build_dataset(recs, run.cfg.pipeline, BuildOptions{false, tag});
    write_dataset(run.output(key), ds.windows);
    run.log(key + ": " + std::to_string(ds.windows.size()) + " windows kept of " + std::to_string(ds.candidates) +
            " (" + std::to_string(ds.dropped_by_energy) + " below the energy threshold)");
  }
}

void pretrain_stage(Run& run) {
  const auto windows = load_windows(run, "train");
  MaeModel<float> m = run.cfg.has_path("checkpoint") ? open_checkpoint(run, "checkpoint").model
                                                     : make_mae<float>(run.cfg.model, run.seed("mae_model.init"));
  TrainPlan plan = run.cfg.plan_for(Phase::pretrain);
  plan.seed = run.seed("trainer.pretrain");
  const TrainLog log = pretrain(m, windows, plan, progress(run));
  save_training(run, m, log, plan);
}

void finetune_ad_stage(Run& run) {
  MaeModel<float> m = open_checkpoint(run, "checkpoint").model;
  const auto windows = load_windows(run, "train");
  TrainPlan plan = run.cfg.plan_for(Phase::finetune_ad);
  plan.seed = run.seed("trainer.finetune_ad");
  const TrainLog log = finetune_ad(m, windows, plan, progress(run));
  save_training(run, m, log, plan);
}

MaeModel<float> regression_model(Run& run, const std::string& key, std::span<const SpectrogramWindow> train) {
  MaeModel<float> m = run.cfg.has_path(key) ? open_checkpoint(run, key).model
                                            : make_mae<float>(run.cfg.model, run.seed("mae_model.init"));
  if (!m.has_reg_head()) m = attach_regression_head(m, mean_target(train), run.seed("mae_model.head"));
  return m;
}

void finetune_tle_stage(Run& run) {
  const auto windows = load_windows(run, "train");
  MaeModel<float> m = regression_model(run, "checkpoint", windows);
  TrainPlan plan = run.cfg.plan_for(Phase::finetune_tle);
  plan.seed = run.seed("trainer.finetune_tle");
  const TrainLog log = finetune_tle(m, windows, plan, progress(run));
  save_training(run, m, log, plan);
}

void distill_stage(Run& run) {
  const MaeModel<float> teacher = open_checkpoint(run, "teacher").model;
  const auto windows = load_windows(run, "train");
  MaeModel<float> student = regression_model(run, "student", windows);
  TrainPlan plan = run.cfg.plan_for(Phase::finetune_kd);
  plan.seed = run.seed("trainer.finetune_kd");
  const TrainLog log = finetune_kd(student, teacher, windows, plan, run.cfg.kd, progress(run));
  save_training(run, student, log, plan);
}

void eval_ad_stage(Run& run) {
  const Checkpoint ck = open_checkpoint(run, "checkpoint");
  const auto train = load_windows(run, "train");
  const auto cal = load_windows(run, "calibration");
  const auto test = load_windows(run, "test");
  const std::uint64_t mask_seed = run.cfg.eval.seed ? *run.cfg.eval.seed : run.seed("evaluation.mask");
  run.meta["mask_seed"] = mask_seed;
  const auto e_train = reconstruction_errors(ck.model, train, mask_seed);
  const auto e_cal = reconstruction_errors(ck.model, cal, mask_seed);
  const auto e_test = reconstruction_errors(ck.model, test, mask_seed);
  const auto truth = truth_of(test);
  const CalibratedDetection d = calibrated_detection("ad", model_name(ck.model.config), e_train, e_cal, e_test, truth,
                                                     run.cfg.eval.filter_lengths, run.cfg.threshold);
  std::ofstream th(run.output("thresholds.csv"));
  th << "filter_len,threshold\n";
  for (std::size_t i = 0; i < d.thresholds.size(); ++i) {
    th << run.cfg.eval.filter_lengths[i] << ',' << d.thresholds[i] << '\n';
    const int len = run.cfg.eval.filter_lengths[i];
    const auto smoothed = median_smooth(e_test, len);
    write_verdicts_csv(run.output("verdicts_L" + std::to_string(len) + ".csv"), e_test, smoothed,
                       classify(smoothed, d.thresholds[i]), truth);
  }
  write_reports(run, {d.report});
}

void eval_tle_stage(Run& run) {
  const Checkpoint ck = open_checkpoint(run, "checkpoint");
  const auto test = load_windows(run, "test");
  std::vector<double> y;
  for (const auto& w : test) {
    if (!w.target) throw DataError("test window without a target");
    y.push_back(*w.target);
  }
  const auto pred = predict(ck.model, test);
  write_predictions_csv(run.output("predictions.csv"), y, pred);
  MetricsReport r;
  r.task = "tle";
  r.model = model_name(ck.model.config);
  r.samples = y.size();
  r.regression = regression_metrics(pred, y, run.cfg.eval.percent_base);
  write_reports(run, {r});
}

void ablation_stage(Run& run) {
  const ExperimentConfig& c = run.cfg;
  if (c.ablation.tasks.empty()) throw ConfigError("[ablation] tasks is empty");
  std::vector<AblationTask> tasks;
  for (const std::string& name : c.ablation.tasks) {
    AblationTask t;
    t.name = name;
    t.train = load_windows(run, name + "_train");
    if (c.has_path(name + "_test")) t.test = load_windows(run, name + "_test");
    tasks.push_back(std::move(t));
  }
  AblationSpec spec;
  spec.model = c.model;
  spec.pretrain = c.ablation.pretrain;
  spec.finetune = c.ablation.finetune;
  spec.pretrain.threads = spec.finetune.threads = c.threads;
  spec.seeds = c.ablation.seeds;
  spec.finetune_fraction = c.ablation.finetune_fraction;
  const auto results = ablation_protocol(spec, tasks, [&](const AblationResult& r) {
    std::string line = r.task + " " + to_string(r.regime) + " seed " + std::to_string(r.seed);
    if (r.metrics && r.metrics->mae_pct) line += " MAE% " + std::to_string(*r.metrics->mae_pct);
    if (!r.error.empty()) line += " failed: " + r.error;
    run.log(line);
  });
  write_ablation_csv(run.output("ablation.csv"), results);
  const std::string table = format_ablation(results);
  std::ofstream(run.output("ablation.txt")) << table;
  run.log(table);
}

std::vector<Eigen::VectorXd> time_windows(const std::vector<RawRecording>& recs, const PipelineConfig& cfg,
                                          std::vector<double>* targets = nullptr) {
  const Dataset ds = build_dataset(recs, cfg, BuildOptions{true, std::nullopt});
  std::vector<Eigen::VectorXd> out;
  for (std::size_t i = 0; i < ds.windows.size(); ++i) {
    out.push_back(ds.time_windows[i].values);
    if (targets) {
      if (!ds.windows[i].target) throw DataError("recording without labels cannot provide targets");
      targets->push_back(*ds.windows[i].target);
    }
  }
  return out;
}

void baseline_stage(Run& run) {
  const ExperimentConfig& c = run.cfg;
  if (c.baseline.kind == "pca") {
    const auto train = time_windows(load_recordings(run, "train"), c.pipeline);
    const auto cal = time_windows(load_recordings(run, "calibration"), c.pipeline);
    const auto normal = time_windows(load_recordings(run, "test_normal"), c.pipeline);
    const auto damaged = time_windows(load_recordings(run, "test_damaged"), c.pipeline);
    const PcaModel pca = pca_fit(train, c.baseline.compression_factor);
    save_pca(pca, run.output("pca.pcam"));
    auto errors = [&](const std::vector<Eigen::VectorXd>& w) {
      std::vector<double> e;
      for (const auto& x : w) e.push_back(pca_error(pca, x));
      return e;
    };
    std::vector<double> test = errors(normal);
    const auto e_damaged = errors(damaged);
    test.insert(test.end(), e_damaged.begin(), e_damaged.end());
    std::vector<Verdict> truth(normal.size(), Verdict::normal);
    truth.insert(truth.end(), damaged.size(), Verdict::anomaly);
    const CalibratedDetection d = calibrated_detection("ad", "pca-cf" + std::to_string(c.baseline.compression_factor),
                                                       errors(train), errors(cal), test, truth, c.eval.filter_lengths,
                                                       c.threshold);
    write_reports(run, {d.report});
    return;
  }
  std::vector<double> y_train, y_test;
  const auto train = time_windows(load_recordings(run, "train"), c.pipeline, &y_train);
  const auto test = time_windows(load_recordings(run, "test"), c.pipeline, &y_test);
  std::vector<FeatureVector> f_train, f_test;
  for (const auto& x : train) f_train.push_back(extract_features(x));
  for (const auto& x : test) f_test.push_back(extract_features(x));
  const Eigen::MatrixXd ftr = feature_matrix(f_train), fte = feature_matrix(f_test);
  const Eigen::VectorXd ytr = Eigen::Map<const Eigen::VectorXd>(y_train.data(), static_cast<Index>(y_train.size()));
  std::vector<double> pred;
  std::string model;
  if (c.baseline.kind == "knn") {
    const KnnRegressor knn(ftr, ytr, c.baseline.k);
    for (Index i = 0; i < fte.rows(); ++i) pred.push_back(knn.predict(fte.row(i)));
    model = "knn-k" + std::to_string(c.baseline.k);
  } else {
    const LinearRegressor lr = linreg_fit(ftr, ytr);
    for (Index i = 0; i < fte.rows(); ++i) pred.push_back(lr.predict(fte.row(i)));
    model = "linreg";
  }
  write_predictions_csv(run.output("predictions.csv"), y_test, pred);
  MetricsReport r;
  r.task = "tle";
  r.model = model;
  r.samples = y_test.size();
  r.regression = regression_metrics(pred, y_test, c.eval.percent_base);
  write_reports(run, {r});
}

void describe(const fs::path& path) {
  if (!fs::exists(path)) throw MissingCheckpoint("checkpoint not found: " + path.string());
  const Checkpoint ck = load_checkpoint(path);
  const ModelConfig& m = ck.model.config;
  std::cout << "model        " << model_name(m) << '\n'
            << "blocks       " << m.n_blocks << " encoder + " << m.n_blocks << " decoder\n"
            << "patch size   " << m.patch_size << '\n'
            << "mask ratio   " << m.mask_ratio << '\n'
            << "decoder      " << (ck.model.has_decoder() ? "yes" : "no") << '\n'
            << "regression   " << (ck.model.has_reg_head() ? "yes" : "no") << '\n'
            << "parameters   " << ck.model.size() << " stored, " << param_count(m) << " in the full autoencoder\n"
            << "file size    " << fs::file_size(path) << " bytes\n"
            << "provenance   " << hex(ck.provenance) << '\n';
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const MissingCheckpoint*>(&e)) return kMissingCheckpoint;
  if (dynamic_cast<const ConfigError*>(&e)) return kBadConfig;
  if (dynamic_cast<const FormatError*>(&e)) return kBadFormat;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ModeError*>(&e)) return kBadData;
  if (dynamic_cast<const TrainingError*>(&e)) return kDiverged;
  return kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-autoencoder vibration models: synthetic data, training and evaluation"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  fs::path config_path, out_root, checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;

  const std::vector<std::pair<std::string, std::string>> stages{
      {"synth-gen", "generate synthetic ambient, damaged and traffic recordings"},
      {"preprocess", "turn recordings into spectrogram datasets"},
      {"pretrain", "self-supervised masked-reconstruction pretraining"},
      {"finetune-ad", "fine-tune on normal-state windows for anomaly detection"},
      {"finetune-tle", "fine-tune a regression head for traffic load estimation"},
      {"distill", "fine-tune a student against a frozen teacher"},
      {"eval-ad", "calibrate thresholds and score anomaly detection"},
      {"eval-tle", "score traffic load predictions"},
      {"ablation", "No Pretrain / Pretrain UC / Pretrain All comparison"},
      {"baseline", "PCA, kNN or linear-regression baselines"},
  };
  std::vector<CLI::App*> stage_apps;
  for (const auto& [name, help] : stages) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "experiment config (INI)")->required();
    sub->add_option("--seed", seed, "global seed (overrides [run] seed)");
    sub->add_option("--threads", threads, "worker threads; 1 is bitwise deterministic")->check(CLI::PositiveNumber);
    sub->add_option("--out", out_root, "output root (default $SHM_FOMO_OUT or ./runs)");
    stage_apps.push_back(sub);
  }
  CLI::App* desc = app.add_subcommand("describe", "summarize a checkpoint");
  desc->add_option("checkpoint", checkpoint, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*desc) {
      describe(checkpoint);
      return kOk;
    }
    CLI::App* chosen = nullptr;
    for (CLI::App* sub : stage_apps)
      if (*sub) chosen = sub;
    const std::string stage = chosen->get_name();

    ExperimentConfig cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (threads) {
      cfg.threads = *threads;
      cfg.train.threads = *threads;
    }
    if (out_root.empty()) {
      const char* env = std::getenv("SHM_FOMO_OUT");
      out_root = env && *env ? fs::path(env) : fs::path("runs");
    }
    Run run = open_run(stage, config_path, std::move(cfg), out_root);
    try {
      if (stage == "synth-gen") synth_gen(run);
      else if (stage == "preprocess") preprocess(run);
      else if (stage == "pretrain") pretrain_stage(run);
      else if (stage == "finetune-ad") finetune_ad_stage(run);
      else if (stage == "finetune-tle") finetune_tle_stage(run);
      else if (stage == "distill") distill_stage(run);
      else if (stage == "eval-ad") eval_ad_stage(run);
      else if (stage == "eval-tle") eval_tle_stage(run);
      else if (stage == "ablation") ablation_stage(run);
      else baseline_stage(run);
    } catch (const std::exception& e) {
      run.meta["error"] = e.what();
      run.log(std::string("error: ") + e.what());
      run.finish();
      throw;
    }
    run.finish();
    std::cout << run.dir.string() << '\n';
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "shmfm: " << e.what() << '\n';
    return exit_code_for(e);
  }
}
