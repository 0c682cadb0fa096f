#include "shmfm/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace shmfm {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot open " + path.string() + " for writing");
  }
  template <typename T>
  void put(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw Error("write failed for " + path.string());
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot open " + path.string());
  }
  template <typename T>
  T get() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("truncated file " + path_.string());
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

void write_recording_csv(const std::filesystem::path& path, const RawRecording& rec) {
  rec.validate();
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "timestamp,accel_z,label\n";
  out.precision(9);
  for (Index i = 0; i < rec.size(); ++i) {
    out << static_cast<double>(i) / rec.fs << ',' << rec.samples(i) << ',';
    if (rec.has_labels()) out << static_cast<int>(rec.labels[static_cast<std::size_t>(i)]);
    out << '\n';
  }
  if (!out) throw Error("write failed for " + path.string());
}

RawRecording read_recording_csv(const std::filesystem::path& path, double fs) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::vector<double> samples;
  std::vector<std::uint8_t> labels;
  bool any_label = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.find_first_of("0123456789") != 0 && line[0] != '-') continue;  // header
    std::stringstream ss(line);
    std::string ts, acc, lab;
    std::getline(ss, ts, ',');
    std::getline(ss, acc, ',');
    std::getline(ss, lab, ',');
    try {
      samples.push_back(std::stod(acc));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad acceleration value");
    }
    if (!lab.empty() && lab.find_first_not_of(" \r") != std::string::npos) {
      int l = 0;
      try {
        l = std::stoi(lab);
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad label value");
      }
      if (l < 0 || l > 2) throw DataError(path.string() + ":" + std::to_string(line_no) + ": label outside {0,1,2}");
      labels.push_back(static_cast<std::uint8_t>(l));
      any_label = true;
    } else {
      labels.push_back(0);
    }
  }
  RawRecording rec;
  rec.fs = fs;
  rec.samples = Eigen::Map<Eigen::VectorXd>(samples.data(), static_cast<Index>(samples.size()));
  if (any_label) rec.labels = std::move(labels);
  return rec;
}

void write_recording_bin(const std::filesystem::path& path, const RawRecording& rec) {
  rec.validate();
  Writer w(path);
  w.bytes("SHM1", 4);
  w.put(static_cast<std::uint32_t>(std::lround(rec.fs)));
  w.put(static_cast<std::uint64_t>(rec.size()));
  w.put(static_cast<std::uint8_t>(rec.has_labels() ? 1 : 0));
  const Eigen::VectorXf f = rec.samples.cast<float>();
  w.bytes(f.data(), static_cast<std::size_t>(f.size()) * sizeof(float));
  if (rec.has_labels()) w.bytes(rec.labels.data(), rec.labels.size());
  w.finish(path);
}

RawRecording read_recording_bin(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "SHM1", 4) != 0) throw FormatError(path.string() + ": not an SHM1 recording");
  RawRecording rec;
  rec.fs = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  const auto has_labels = r.get<std::uint8_t>();
  if (count > (std::uint64_t{1} << 34)) throw FormatError(path.string() + ": implausible sample count");
  Eigen::VectorXf f(static_cast<Index>(count));
  r.bytes(f.data(), count * sizeof(float));
  rec.samples = f.cast<double>();
  if (has_labels) {
    rec.labels.resize(count);
    r.bytes(rec.labels.data(), count);
  }
  rec.validate();
  return rec;
}

RawRecording read_recording(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? read_recording_csv(path) : read_recording_bin(path);
}

void write_dataset(const std::filesystem::path& dir, const std::vector<SpectrogramWindow>& windows) {
  std::filesystem::create_directories(dir);
  const auto path = dir / "records.bin";
  Writer w(path);
  for (const SpectrogramWindow& sw : windows) {
    if (sw.image.rows() != kImageSide || sw.image.cols() != kImageSide)
      throw DataError("dataset images must be 100x100");
    w.bytes(sw.image.data(), static_cast<std::size_t>(sw.image.size()) * sizeof(float));
    w.put(sw.target ? static_cast<float>(*sw.target) : std::numeric_limits<float>::quiet_NaN());
    w.put(sw.tag ? static_cast<std::uint8_t>(*sw.tag) : kNoTag);
  }
  w.finish(path);
}

std::vector<SpectrogramWindow> read_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "records.bin";
  if (!std::filesystem::exists(path)) throw Error("missing dataset file " + path.string());
  const auto bytes = std::filesystem::file_size(path);
  if (bytes % kRecordBytes != 0) throw FormatError(path.string() + ": size is not a whole number of records");
  Reader r(path);
  std::vector<SpectrogramWindow> out(bytes / kRecordBytes);
  for (SpectrogramWindow& sw : out) {
    sw.image.resize(kImageSide, kImageSide);
    r.bytes(sw.image.data(), static_cast<std::size_t>(sw.image.size()) * sizeof(float));
    const auto target = r.get<float>();
    const auto tag = r.get<std::uint8_t>();
    if (!std::isnan(target)) sw.target = target;
    if (tag != kNoTag) {
      if (tag > 1) throw FormatError(path.string() + ": invalid tag byte");
      sw.tag = static_cast<WindowTag>(tag);
    }
  }
  return out;
}

const NamedTensor* TensorContainer::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_container(const std::filesystem::path& path, const TensorContainer& c) {
  Writer w(path);
  w.bytes(c.magic.data(), 4);
  w.put(c.version);
  w.put(static_cast<std::uint32_t>(c.meta.size()));
  w.bytes(c.meta.data(), c.meta.size());
  w.put(static_cast<std::uint32_t>(c.tensors.size()));
  for (const NamedTensor& t : c.tensors) {
    std::size_t expected = 1;
    for (auto d : t.dims) expected *= d;
    if (expected != t.data.size()) throw Error("tensor " + t.name + " has inconsistent dims");
    w.put(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.put(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.put(d);
    w.bytes(t.data.data(), t.data.size() * sizeof(float));
  }
  w.finish(path);
}

TensorContainer read_container(const std::filesystem::path& path, std::array<char, 4> expected_magic,
                               std::uint32_t max_version) {
  const auto file_bytes = std::filesystem::file_size(path);
  Reader r(path);
  TensorContainer c;
  r.bytes(c.magic.data(), 4);
  if (c.magic != expected_magic)
    throw FormatError(path.string() + ": bad magic, expected " + std::string(expected_magic.data(), 4));
  c.version = r.get<std::uint32_t>();
  if (c.version == 0 || c.version > max_version)
    throw FormatError(path.string() + ": unsupported format version " + std::to_string(c.version));
  const auto meta_len = r.get<std::uint32_t>();
  if (meta_len > file_bytes) throw FormatError(path.string() + ": corrupt metadata length");
  c.meta.resize(meta_len);
  r.bytes(c.meta.data(), meta_len);
  const auto count = r.get<std::uint32_t>();
  if (count > file_bytes) throw FormatError(path.string() + ": corrupt tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = r.get<std::uint32_t>();
    if (name_len > 4096) throw FormatError(path.string() + ": corrupt tensor name length");
    t.name.resize(name_len);
    r.bytes(t.name.data(), name_len);
    const auto rank = r.get<std::uint8_t>();
    std::uint64_t elements = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.get<std::uint32_t>());
      elements *= t.dims.back();
    }
    if (elements * sizeof(float) > file_bytes) throw FormatError(path.string() + ": tensor " + t.name + " overruns file");
    t.data.resize(elements);
    r.bytes(t.data.data(), elements * sizeof(float));
    c.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after last tensor");
  return c;
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return out;
}

}  // namespace shmfm
