#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "shmfm/config.hpp"
#include "shmfm/io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace shmfm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "shmfm_test_io";
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

RawRecording sample_recording(bool labels) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal(0.0, 0.01);
  RawRecording r;
  r.samples.resize(1234);
  for (Index i = 0; i < r.size(); ++i) r.samples(i) = normal(rng);
  if (labels) {
    r.labels.resize(1234);
    for (std::size_t i = 0; i < r.labels.size(); ++i) r.labels[i] = static_cast<std::uint8_t>((i / 10) % 3);
  }
  return r;
}

}  // namespace

TEST_CASE("recording round trips") {
  for (bool labels : {false, true}) {
    const RawRecording r = sample_recording(labels);
    const fs::path bin = temp_dir() / "rec.bin", csv = temp_dir() / "rec.csv";
    write_recording_bin(bin, r);
    const RawRecording b = read_recording(bin);
    CHECK(b.fs == 100.0);
    CHECK(b.labels == r.labels);
    // Binary samples are stored as f32.
    CHECK(b.samples == r.samples.cast<float>().cast<double>());
    write_recording_csv(csv, r);
    const RawRecording c = read_recording(csv);
    CHECK(c.labels == r.labels);
    CHECK((c.samples - r.samples).cwiseAbs().maxCoeff() <= 1e-9 * 0.05);
  }
}

TEST_CASE("malformed recordings") {
  const fs::path p = temp_dir() / "bad.csv";
  write_text(p, "timestamp,accel_z,label\n0,0.1,0\n0.01,oops,0\n");
  CHECK_THROWS_AS(read_recording_csv(p), FormatError);
  write_text(p, "timestamp,accel_z,label\n0,0.1,7\n");
  CHECK_THROWS_AS(read_recording_csv(p), DataError);
  write_text(p, "timestamp,accel_z,label\n0,0.1,x\n");
  CHECK_THROWS_AS(read_recording_csv(p), FormatError);
  const fs::path b = temp_dir() / "bad.bin";
  write_text(b, "NOPE0000000000000");
  CHECK_THROWS_AS(read_recording_bin(b), FormatError);
  write_recording_bin(b, sample_recording(true));
  const auto full = fs::file_size(b);
  fs::resize_file(b, full - 100);
  CHECK_THROWS_AS(read_recording_bin(b), FormatError);
  CHECK_THROWS_AS(read_recording(temp_dir() / "does_not_exist.bin"), Error);
}

TEST_CASE("dataset records") {
  std::vector<SpectrogramWindow> w(3);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i].image = Image::Random(kImageSide, kImageSide);
  }
  w[1].target = 2.5;
  w[2].tag = WindowTag::anomaly;
  const fs::path dir = temp_dir() / "ds";
  fs::create_directories(dir);
  write_dataset(dir, w);
  CHECK(fs::file_size(dir / "records.bin") == 3 * kRecordBytes);
  const auto back = read_dataset(dir);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(back[i].image == w[i].image);
  CHECK_FALSE(back[0].target.has_value());
  CHECK(*back[1].target == 2.5);
  CHECK_FALSE(back[1].tag.has_value());
  CHECK(*back[2].tag == WindowTag::anomaly);
  fs::resize_file(dir / "records.bin", 3 * kRecordBytes - 1);
  CHECK_THROWS_AS(read_dataset(dir), FormatError);
}

TEST_CASE("tensor container") {
  TensorContainer c;
  c.magic = {'T', 'E', 'S', 'T'};
  c.meta = "a=1\nb=two\n";
  c.tensors.push_back({"w", {2, 3}, {1, 2, 3, 4, 5, 6}});
  c.tensors.push_back({"b", {3}, {0.5f, -0.5f, 0.25f}});
  const fs::path p = temp_dir() / "c.bin";
  write_container(p, c);
  const TensorContainer back = read_container(p, c.magic, 1);
  CHECK(back.meta == c.meta);
  REQUIRE(back.find("w") != nullptr);
  CHECK(back.find("w")->dims == std::vector<std::uint32_t>{2, 3});
  CHECK(back.find("b")->data == c.tensors[1].data);
  CHECK(back.find("missing") == nullptr);
  CHECK_THROWS_AS(read_container(p, {'M', 'A', 'E', 'C'}, 1), FormatError);
  const auto kv = parse_key_values(c.meta);
  REQUIRE(kv.size() == 2);
  CHECK(kv[1] == std::pair<std::string, std::string>{"b", "two"});
  c.tensors[0].dims = {4, 4};
  CHECK_THROWS_AS(write_container(p, c), Error);
}

TEST_CASE("config parsing") {
  const std::string text = R"(# experiment
[run]
seed = 42
threads = 2

[pipeline]
window_s = 60
stride_s = 10
vehicle_class = heavy

[model]
e_dim = 48
d_dim = 32

[train]
phase = finetune_tle
epochs = 20
base_lr = 1e-4

[paths]
normal = data/a.bin, data/b.bin
out = /tmp/x
)";
  const ExperimentConfig c = parse_config(text, "/base");
  CHECK(c.seed == 42);
  CHECK(c.threads == 2);
  CHECK(c.train.threads == 2);
  CHECK(c.pipeline.window_s == 60.0);
  CHECK(c.pipeline.vehicle_class == VehicleClass::heavy);
  CHECK(c.model == ModelConfig::family(48, 32));
  CHECK(c.train_phase_set);
  CHECK(c.train.phase == Phase::finetune_tle);
  CHECK(c.train.epochs == 20);
  CHECK(c.train.base_lr == 1e-4);
  CHECK(c.path_list("normal") == std::vector<fs::path>{"/base/data/a.bin", "/base/data/b.bin"});
  CHECK(c.path("out") == fs::path("/tmp/x"));
  CHECK_THROWS_AS(c.path("normal"), ConfigError);
  CHECK_THROWS_AS(c.path("nothing"), ConfigError);

  // Formatting and key order do not change the hash.
  const std::string reordered = "[run]\nthreads=2\nseed=42\n[model]\nd_dim=32\ne_dim=48\n[pipeline]\nvehicle_class=heavy\n"
                                "stride_s=10\nwindow_s=60.0\n[train]\nbase_lr=0.0001\nepochs=20\nphase=finetune_tle\n"
                                "[paths]\nout=/tmp/x\nnormal=data/a.bin,data/b.bin\n";
  CHECK(parse_config(reordered, "/base").hash() == c.hash());
  CHECK(parse_config(reordered, "/base").canonical() == c.canonical());
  CHECK(parse_config("[run]\nseed=43\n").hash() != parse_config("[run]\nseed=42\n").hash());
  CHECK(split_list(" a , b,,c ") == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("malformed configs are rejected") {
  for (const char* bad : {"[run]\nseed=abc\n", "[run]\nthreads=0\n", "[nope]\nx=1\n", "[run]\nbogus=1\n",
                          "seed=1\n", "[pipeline]\nwindow_s=1\nstride_s=2\n", "[model]\ne_dim=25\n",
                          "[train]\nphase=warmup\n", "[train]\nepochs=3.5\n", "[run]\nseed=-1\n",
                          "[pipeline]\nvehicle_class=bus\n", "[kd]\nalpha_task=0.9\n", "[eval]\ntrain_fraction=1\n",
                          "[run\nseed=1\n"}) {
    CAPTURE(bad);
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
  }
  CHECK_THROWS_AS(load_config(temp_dir() / "missing.ini"), ConfigError);
  const fs::path p = temp_dir() / "ok.ini";
  write_text(p, "[paths]\nx = rel/file.bin\n");
  CHECK(load_config(p).path("x") == temp_dir() / "rel/file.bin");
}

TEST_CASE("train overrides apply to each phase's defaults") {
  const ExperimentConfig c = parse_config("[run]\nthreads=3\n[train]\nepochs=20\nbase_lr=1e-4\n");
  CHECK_FALSE(c.train_phase_set);
  const TrainPlan ad = c.plan_for(Phase::finetune_ad);
  CHECK(ad.phase == Phase::finetune_ad);
  CHECK(ad.epochs == 20);
  CHECK(ad.base_lr == 1e-4);
  CHECK(ad.batch_size == TrainPlan::finetune_ad_defaults().batch_size);
  CHECK(ad.threads == 3);
  // Pretraining defaults warm up for 100 epochs, which no longer fits into 20.
  CHECK_THROWS_AS(c.plan_for(Phase::pretrain), ConfigError);
  const ExperimentConfig kd = parse_config("[train]\nphase=finetune_kd\nepochs=5\n");
  CHECK(kd.plan_for(Phase::finetune_kd).epochs == 5);
  CHECK(kd.plan_for(Phase::finetune_kd).batch_size == TrainPlan::finetune_tle_defaults().batch_size);
}
