#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "shmfm/evaluation.hpp"
#include "shmfm/io.hpp"
#include "shmfm/trainer.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace shmfm;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr discarded; stdout is captured.
Result run_command(const std::string& cmd) {
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  Result r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) r.out += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

Result cli(const std::string& args, const std::string& env = "") {
  return run_command(env + std::string(SHMFM_CLI_PATH) + " " + args + " 2>/dev/null");
}

fs::path work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "shmfm_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

fs::path write_config(const std::string& name, const std::string& text) {
  const fs::path p = work_dir() / name;
  std::ofstream(p) << text;
  return p;
}

// Runs a stage that must succeed and returns its run directory.
fs::path stage(const std::string& name, const fs::path& config, const std::string& extra = "") {
  const Result r = cli(name + " --config " + config.string() + " --out " + (work_dir() / "runs").string() + " " + extra);
  REQUIRE_MESSAGE(r.code == 0, name, " exited with ", r.code);
  std::string dir = r.out;
  while (!dir.empty() && (dir.back() == '\n' || dir.back() == '\r')) dir.pop_back();
  REQUIRE(fs::is_directory(dir));
  CHECK(fs::exists(fs::path(dir) / "run.json"));
  CHECK(fs::exists(fs::path(dir) / "config.canonical.ini"));
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("usage and configuration errors") {
  CHECK(cli("").code == 2);
  CHECK(cli("pretrain").code == 2);
  CHECK(cli("pretrain --config x.ini --bogus").code == 2);
  CHECK(cli("frobnicate --config x.ini").code == 2);
  CHECK(cli("pretrain --config " + (work_dir() / "absent.ini").string()).code == 3);
  CHECK(cli("pretrain --config " + write_config("bad.ini", "[run]\nseed = abc\n").string()).code == 3);
  CHECK(cli("pretrain --config " + write_config("unknown.ini", "[model]\nwidth = 3\n").string()).code == 3);
  const fs::path missing = write_config("missing.ini", "[paths]\ncheckpoint = nowhere.maec\ntrain = nowhere\n");
  CHECK(cli("finetune-ad --config " + missing.string() + " --out " + (work_dir() / "runs").string()).code == 4);
  CHECK(cli("describe " + (work_dir() / "nowhere.maec").string()).code == 4);
}

TEST_CASE("anomaly-detection recipe") {
  const fs::path synth = stage("synth-gen", write_config("synth.ini", "[run]\nseed = 3\n[synth]\nnormal_s = 150\n"
                                                                      "damaged_s = 80\ntraffic_s = 200\n"));
  for (const char* f : {"normal.bin", "calibration.bin", "test_normal.bin", "damaged.bin", "traffic.bin", "manifest.json"})
    CHECK(fs::exists(synth / f));
  CHECK(read_recording(synth / "traffic.bin").labels.size() == 20000);

  const fs::path pre = stage("preprocess", write_config("pre.ini", "[paths]\nnormal = " + (synth / "normal.bin").string() +
                                                                       "\ncalibration = " + (synth / "calibration.bin").string() +
                                                                       "\ntest_normal = " + (synth / "test_normal.bin").string() +
                                                                       "\ndamaged = " + (synth / "damaged.bin").string() + "\n"));
  const auto damaged = read_dataset(pre / "damaged");
  REQUIRE_FALSE(damaged.empty());
  CHECK(*damaged.front().tag == WindowTag::anomaly);
  CHECK(*read_dataset(pre / "normal").front().tag == WindowTag::normal);

  const std::string pretrain_cfg = "[model]\ne_dim = 24\nd_dim = 16\n[train]\nepochs = 2\nwarmup_epochs = 1\n"
                                   "batch_size = 16\nbase_lr = 1e-3\n[paths]\ntrain = " + (pre / "normal").string() + "\n";
  const fs::path cfg = write_config("pretrain.ini", pretrain_cfg);
  const fs::path a = stage("pretrain", cfg, "--threads 1");
  const fs::path b = stage("pretrain", cfg, "--threads 1");
  // Same config twice: two directories, identical weights.
  CHECK(a != b);
  CHECK(slurp(a / "model.maec") == slurp(b / "model.maec"));
  const fs::path c = stage("pretrain", cfg, "--seed 99");
  CHECK(slurp(c / "model.maec") != slurp(a / "model.maec"));
  CHECK(slurp(c / "run.json").find("\"seed\": 99") != std::string::npos);

  const Checkpoint ck = load_checkpoint(a / "model.maec");
  CHECK(ck.model.config == ModelConfig::family(24, 16));
  const Result described = cli("describe " + (a / "model.maec").string());
  CHECK(described.code == 0);
  CHECK(described.out.find("(24,16)") != std::string::npos);

  const fs::path ft = stage("finetune-ad", write_config("ft.ini", "[train]\nepochs = 2\nbatch_size = 16\n[paths]\ntrain = " +
                                                                      (pre / "normal").string() + "\ncheckpoint = " +
                                                                      (a / "model.maec").string() + "\n"));
  const fs::path ev = stage("eval-ad", write_config("ev.ini", "[eval]\nfilter_lengths = 1, 15\n[paths]\ncheckpoint = " +
                                                                  (ft / "model.maec").string() + "\ntrain = " +
                                                                  (pre / "normal").string() + "\ncalibration = " +
                                                                  (pre / "calibration").string() + "\ntest = " +
                                                                  (pre / "test_normal").string() + ", " +
                                                                  (pre / "damaged").string() + "\n"));
  const std::string report = slurp(ev / "report.csv");
  CHECK(report.find("accuracy") != std::string::npos);
  CHECK(fs::exists(ev / "verdicts_L15.csv"));
  CHECK(fs::exists(ev / "thresholds.csv"));

  // A tampered checkpoint is a format error.
  const fs::path tampered = work_dir() / "tampered.maec";
  fs::copy_file(a / "model.maec", tampered);
  fs::resize_file(tampered, fs::file_size(tampered) - 8);
  CHECK(cli("describe " + tampered.string()).code == 5);
}

TEST_CASE("traffic recipe and baselines") {
  const fs::path synth = stage("synth-gen", write_config("tsynth.ini", "[run]\nseed = 4\n[synth]\nnormal_s = 60\n"
                                                                       "damaged_s = 60\ntraffic_s = 400\n"));
  const std::string traffic = (synth / "traffic.bin").string();
  const fs::path pre = stage("preprocess", write_config("tpre.ini", "[pipeline]\nwindow_s = 60\nstride_s = 10\n"
                                                                    "vehicle_class = any\n[paths]\ntraffic = " + traffic + "\n"));
  const auto windows = read_dataset(pre / "traffic");
  REQUIRE_FALSE(windows.empty());
  CHECK(windows.front().target.has_value());

  const std::string data = (pre / "traffic").string();
  const fs::path tle = stage("finetune-tle", write_config("tle.ini", "[model]\ne_dim = 24\nd_dim = 16\n[train]\nepochs = 2\n"
                                                                     "batch_size = 8\nbase_lr = 1e-3\nwarmup_epochs = 0\n"
                                                                     "[paths]\ntrain = " + data + "\n"));
  CHECK(load_checkpoint(tle / "model.maec").model.has_reg_head());
  const fs::path ev = stage("eval-tle", write_config("evt.ini", "[paths]\ncheckpoint = " + (tle / "model.maec").string() +
                                                                "\ntest = " + data + "\n"));
  const auto [y, p] = read_predictions_csv(ev / "predictions.csv");
  CHECK(y.size() == windows.size());
  CHECK(p.size() == windows.size());

  const fs::path kd = stage("distill", write_config("kd.ini", "[model]\ne_dim = 24\nd_dim = 16\n[train]\nphase = finetune_kd\n"
                                                              "epochs = 1\nbatch_size = 8\nwarmup_epochs = 0\n[paths]\nteacher = " +
                                                              (tle / "model.maec").string() + "\ntrain = " + data + "\n"));
  CHECK(fs::exists(kd / "model.maec"));

  for (const char* kind : {"knn", "linreg"}) {
    const fs::path bl = stage("baseline", write_config(std::string(kind) + ".ini",
                                                       "[pipeline]\nwindow_s = 60\nstride_s = 10\n[baseline]\nkind = " +
                                                           std::string(kind) + "\n[paths]\ntrain = " + traffic +
                                                           "\ntest = " + traffic + "\n"));
    CHECK(slurp(bl / "report.csv").find(kind) != std::string::npos);
  }
  const fs::path pca = stage("baseline", write_config("pca.ini", "[eval]\nfilter_lengths = 1\n[paths]\ntrain = " +
                                                                 (synth / "normal.bin").string() + "\ncalibration = " +
                                                                 (synth / "calibration.bin").string() + "\ntest_normal = " +
                                                                 (synth / "test_normal.bin").string() + "\ntest_damaged = " +
                                                                 (synth / "damaged.bin").string() + "\n"));
  CHECK(fs::exists(pca / "pca.pcam"));
}

TEST_CASE("output root from the environment") {
  const fs::path root = work_dir() / "env_root";
  const fs::path cfg = write_config("env.ini", "[synth]\nnormal_s = 20\ndamaged_s = 20\ntraffic_s = 60\n");
  const Result r = cli("synth-gen --config " + cfg.string(), "SHM_FOMO_OUT=" + root.string() + " ");
  CHECK(r.code == 0);
  CHECK(r.out.rfind(root.string(), 0) == 0);
}
