#include "shmfm/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace shmfm {

namespace pt = boost::property_tree;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

const std::filesystem::path& ExperimentConfig::path(const std::string& key) const {
  const auto it = paths.find(key);
  if (it == paths.end() || it->second.empty()) throw ConfigError("missing [paths] " + key);
  if (it->second.size() != 1) throw ConfigError("[paths] " + key + " must name exactly one path");
  return it->second.front();
}

std::vector<std::filesystem::path> ExperimentConfig::path_list(const std::string& key) const {
  const auto it = paths.find(key);
  if (it == paths.end() || it->second.empty()) throw ConfigError("missing [paths] " + key);
  return it->second;
}

namespace {

class Section {
 public:
  Section(std::string name, const pt::ptree* tree) : name_(std::move(name)), tree_(tree) {}

  ~Section() noexcept(false) {
    if (!tree_ || std::uncaught_exceptions()) return;
    for (const auto& [key, _] : *tree_)
      if (!used_.count(key)) throw ConfigError("unknown key [" + name_ + "] " + key);
  }

  std::optional<std::string> raw(const std::string& key) {
    used_.insert(key);
    if (!tree_) return std::nullopt;
    const auto it = tree_->find(key);
    if (it == tree_->not_found()) return std::nullopt;
    return it->second.data();
  }

  void get(const std::string& key, double& out) {
    if (auto v = raw(key)) out = to_double(key, *v);
  }
  void get(const std::string& key, int& out) {
    if (auto v = raw(key)) out = static_cast<int>(to_integer(key, *v));
  }
  void get(const std::string& key, Index& out) {
    if (auto v = raw(key)) out = static_cast<Index>(to_integer(key, *v));
  }
  bool get(const std::string& key, std::uint64_t& out) {
    if (auto v = raw(key)) {
      out = to_unsigned(key, *v);
      return true;
    }
    return false;
  }
  void get(const std::string& key, std::string& out) {
    if (auto v = raw(key)) out = *v;
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (auto v = raw(key)) {
      out.clear();
      for (const auto& item : split_list(*v)) out.push_back(to_double(key, item));
    }
  }

  [[noreturn]] void bad(const std::string& key, const std::string& value, const char* what) const {
    throw ConfigError("[" + name_ + "] " + key + " = '" + value + "': " + what);
  }

  double to_double(const std::string& key, const std::string& v) const {
    std::size_t used = 0;
    double d = 0.0;
    try {
      d = std::stod(v, &used);
    } catch (const std::exception&) {
      bad(key, v, "expected a number");
    }
    if (used != v.size()) bad(key, v, "expected a number");
    return d;
  }

  long long to_integer(const std::string& key, const std::string& v) const {
    std::size_t used = 0;
    long long i = 0;
    try {
      i = std::stoll(v, &used);
    } catch (const std::exception&) {
      bad(key, v, "expected an integer");
    }
    if (used != v.size()) bad(key, v, "expected an integer");
    return i;
  }

  std::uint64_t to_unsigned(const std::string& key, const std::string& v) const {
    std::size_t used = 0;
    unsigned long long u = 0;
    try {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      u = std::stoull(v, &used, 0);
    } catch (const std::exception&) {
      bad(key, v, "expected an unsigned integer");
    }
    if (used != v.size()) bad(key, v, "expected an unsigned integer");
    return u;
  }

 private:
  std::string name_;
  const pt::ptree* tree_;
  std::set<std::string> used_;
};

VehicleClass parse_vehicle_class(Section& s, const std::string& v) {
  if (v == "light") return VehicleClass::light;
  if (v == "heavy") return VehicleClass::heavy;
  if (v == "any") return VehicleClass::any;
  s.bad("vehicle_class", v, "expected light, heavy or any");
}

std::string vehicle_class_name(VehicleClass k) {
  switch (k) {
    case VehicleClass::light: return "light";
    case VehicleClass::heavy: return "heavy";
    case VehicleClass::any: return "any";
  }
  return "any";
}

SupervisedLoss parse_loss(Section& s, const std::string& key, const std::string& v) {
  if (v == "mse") return SupervisedLoss::mse;
  if (v == "mae") return SupervisedLoss::mae;
  s.bad(key, v, "expected mse or mae");
}

void read_plan(Section& s, const std::string& prefix, TrainPlan& plan) {
  if (auto v = s.raw(prefix + "phase")) {
    try {
      plan.phase = parse_phase(*v);
    } catch (const ConfigError&) {
      s.bad(prefix + "phase", *v, "unknown phase");
    }
  }
  s.get(prefix + "base_lr", plan.base_lr);
  s.get(prefix + "weight_decay", plan.weight_decay);
  s.get(prefix + "epochs", plan.epochs);
  s.get(prefix + "batch_size", plan.batch_size);
  s.get(prefix + "warmup_epochs", plan.warmup_epochs);
  s.get(prefix + "mask_ratio", plan.mask_ratio);
  s.get(prefix + "max_grad_norm", plan.max_grad_norm);
  s.get(prefix + "beta1", plan.adam.beta1);
  s.get(prefix + "beta2", plan.adam.beta2);
  s.get(prefix + "adam_eps", plan.adam.eps);
  if (auto v = s.raw(prefix + "loss")) plan.loss = parse_loss(s, prefix + "loss", *v);
}

TrainPlan phase_defaults(Phase phase) {
  TrainPlan p;
  switch (phase) {
    case Phase::pretrain: p = TrainPlan::pretrain_defaults(); break;
    case Phase::finetune_ad: p = TrainPlan::finetune_ad_defaults(); break;
    case Phase::finetune_tle:
    case Phase::finetune_kd: p = TrainPlan::finetune_tle_defaults(); break;
  }
  p.phase = phase;
  return p;
}

const pt::ptree* child(const pt::ptree& root, const std::string& name) {
  const auto it = root.find(name);
  return it == root.not_found() ? nullptr : &it->second;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + num(v[i]);
  return s;
}

void emit_plan(std::ostringstream& os, const std::string& prefix, const TrainPlan& p) {
  os << prefix << "phase=" << to_string(p.phase) << '\n'
     << prefix << "base_lr=" << num(p.base_lr) << '\n'
     << prefix << "weight_decay=" << num(p.weight_decay) << '\n'
     << prefix << "epochs=" << p.epochs << '\n'
     << prefix << "batch_size=" << p.batch_size << '\n'
     << prefix << "warmup_epochs=" << p.warmup_epochs << '\n'
     << prefix << "mask_ratio=" << num(p.mask_ratio) << '\n'
     << prefix << "max_grad_norm=" << num(p.max_grad_norm) << '\n'
     << prefix << "beta1=" << num(p.adam.beta1) << '\n'
     << prefix << "beta2=" << num(p.adam.beta2) << '\n'
     << prefix << "adam_eps=" << num(p.adam.eps) << '\n'
     << prefix << "loss=" << (p.loss == SupervisedLoss::mse ? "mse" : "mae") << '\n';
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  // The INI reader only knows ';' comments; accept '#' as well.
  std::string cleaned;
  {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const auto b = line.find_first_not_of(" \t");
      if (b != std::string::npos && line[b] == '#') line.clear();
      cleaned += line + '\n';
    }
  }
  pt::ptree root;
  try {
    std::istringstream in(cleaned);
    pt::ini_parser::read_ini(in, root);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  static const std::set<std::string> known{"run",    "pipeline", "model", "train",    "kd",       "threshold", "bridge",
                                           "traffic", "synth",   "eval",  "baseline", "ablation", "paths"};
  for (const auto& [name, sub] : root) {
    if (!known.count(name)) throw ConfigError("unknown config section [" + name + "]");
    if (sub.empty() && !sub.data().empty()) throw ConfigError("key '" + name + "' outside any section");
  }

  ExperimentConfig c;
  {
    Section s("run", child(root, "run"));
    s.get("seed", c.seed);
    s.get("threads", c.threads);
  }
  {
    Section s("pipeline", child(root, "pipeline"));
    s.get("window_s", c.pipeline.window_s);
    s.get("stride_s", c.pipeline.stride_s);
    s.get("energy_threshold", c.pipeline.energy_threshold);
    if (auto v = s.raw("vehicle_class")) c.pipeline.vehicle_class = parse_vehicle_class(s, *v);
  }
  {
    Section s("model", child(root, "model"));
    Index e = c.model.e_dim, d = c.model.d_dim;
    s.get("e_dim", e);
    s.get("d_dim", d);
    // Family members get their head counts unless overridden.
    bool in_family = false;
    for (const auto& [fe, fd] : ModelConfig::family_sizes()) in_family |= fe == e && fd == d;
    if (in_family) {
      c.model = ModelConfig::family(e, d);
    } else {
      c.model.e_dim = e;
      c.model.d_dim = d;
    }
    s.get("n_blocks", c.model.n_blocks);
    s.get("patch_size", c.model.patch_size);
    s.get("e_heads", c.model.e_heads);
    s.get("d_heads", c.model.d_heads);
    s.get("mlp_ratio", c.model.mlp_ratio);
    s.get("mask_ratio", c.model.mask_ratio);
  }
  {
    const pt::ptree* train = child(root, "train");
    if (train)
      for (const auto& [key, value] : *train)
        if (key != "phase") c.train_overrides.emplace_back(key, value.data());
    Section s("train", train);
    Phase phase = Phase::pretrain;
    if (auto v = s.raw("phase")) {
      try {
        phase = parse_phase(*v);
      } catch (const ConfigError&) {
        s.bad("phase", *v, "unknown phase");
      }
      c.train_phase_set = true;
    }
    c.train = phase_defaults(phase);
    read_plan(s, "", c.train);
  }
  {
    Section s("kd", child(root, "kd"));
    s.get("alpha_task", c.kd.alpha_task);
    s.get("alpha_kd", c.kd.alpha_kd);
  }
  {
    Section s("threshold", child(root, "threshold"));
    s.get("step_fraction", c.threshold.step_fraction);
    s.get("max_steps", c.threshold.max_steps);
  }
  {
    Section s("bridge", child(root, "bridge"));
    s.get("modal_freqs", c.bridge.modal_freqs);
    s.get("modal_amps", c.bridge.modal_amps);
    s.get("damping", c.bridge.damping);
    s.get("excitation_rate", c.bridge.excitation_rate);
    s.get("noise_std", c.bridge.noise_std);
    s.get("anomaly_shift", c.bridge.anomaly_shift);
    s.get("fs", c.bridge.fs);
    c.bridge_seed_set = s.get("seed", c.bridge.seed);
  }
  {
    Section s("traffic", child(root, "traffic"));
    s.get("arrival_rate_light", c.traffic.arrival_rate_light);
    s.get("arrival_rate_heavy", c.traffic.arrival_rate_heavy);
    s.get("pulse_amp_light", c.traffic.pulse_amp_light);
    s.get("pulse_amp_heavy", c.traffic.pulse_amp_heavy);
    s.get("pulse_dur_s", c.traffic.pulse_dur_s);
    s.get("crossing_frames", c.traffic.crossing_frames);
    s.get("rate_modulation", c.traffic.rate_modulation);
    s.get("modulation_period_s", c.traffic.modulation_period_s);
    c.traffic_seed_set = s.get("seed", c.traffic.seed);
  }
  {
    Section s("synth", child(root, "synth"));
    s.get("normal_s", c.synth.normal_s);
    s.get("damaged_s", c.synth.damaged_s);
    s.get("traffic_s", c.synth.traffic_s);
    s.get("format", c.synth.format);
    if (c.synth.format != "bin" && c.synth.format != "csv") s.bad("format", c.synth.format, "expected bin or csv");
  }
  {
    Section s("eval", child(root, "eval"));
    if (auto v = s.raw("filter_lengths")) {
      c.eval.filter_lengths.clear();
      for (const auto& item : split_list(*v)) c.eval.filter_lengths.push_back(static_cast<int>(s.to_integer("filter_lengths", item)));
    }
    if (auto v = s.raw("percent_base")) {
      if (*v == "prediction") c.eval.percent_base = PercentBase::mean_prediction;
      else if (*v == "truth") c.eval.percent_base = PercentBase::mean_truth;
      else s.bad("percent_base", *v, "expected prediction or truth");
    }
    s.get("train_fraction", c.eval.train_fraction);
    std::uint64_t seed = 0;
    if (s.get("seed", seed)) c.eval.seed = seed;
  }
  {
    Section s("baseline", child(root, "baseline"));
    s.get("kind", c.baseline.kind);
    if (c.baseline.kind != "pca" && c.baseline.kind != "knn" && c.baseline.kind != "linreg")
      s.bad("kind", c.baseline.kind, "expected pca, knn or linreg");
    s.get("compression_factor", c.baseline.compression_factor);
    s.get("k", c.baseline.k);
  }
  {
    Section s("ablation", child(root, "ablation"));
    if (auto v = s.raw("tasks")) c.ablation.tasks = split_list(*v);
    if (auto v = s.raw("seeds")) {
      c.ablation.seeds.clear();
      for (const auto& item : split_list(*v)) c.ablation.seeds.push_back(s.to_unsigned("seeds", item));
    }
    s.get("finetune_fraction", c.ablation.finetune_fraction);
    read_plan(s, "pretrain_", c.ablation.pretrain);
    read_plan(s, "finetune_", c.ablation.finetune);
    c.ablation.pretrain.phase = Phase::pretrain;
    c.ablation.finetune.phase = Phase::finetune_tle;
  }
  if (const pt::ptree* p = child(root, "paths")) {
    for (const auto& [key, value] : *p) {
      std::vector<std::filesystem::path> list;
      for (const auto& item : split_list(value.data())) {
        std::filesystem::path path(item);
        if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
        list.push_back(path.lexically_normal());
      }
      c.paths[key] = std::move(list);
    }
  }

  // Validate once everything is read so errors name the final values.
  {
    if (c.threads < 1) throw ConfigError("[run] threads must be >= 1");
    c.pipeline.validate();
    c.model.validate();
    if (c.train_phase_set) c.train.validate();
    c.kd.validate();
    c.threshold.validate();
    c.bridge.validate();
    c.traffic.validate();
    if (!(c.eval.train_fraction > 0.0 && c.eval.train_fraction < 1.0))
      throw ConfigError("[eval] train_fraction must lie in (0, 1)");
    for (int len : c.eval.filter_lengths)
      if (len < 1) throw ConfigError("[eval] filter lengths must be >= 1");
    if (c.baseline.compression_factor < 1) throw ConfigError("[baseline] compression_factor must be >= 1");
    if (c.baseline.k < 1) throw ConfigError("[baseline] k must be >= 1");
    if (!(c.ablation.finetune_fraction > 0.0 && c.ablation.finetune_fraction <= 1.0))
      throw ConfigError("[ablation] finetune_fraction must lie in (0, 1]");
    c.ablation.pretrain.validate();
    c.ablation.finetune.validate();
  }
  c.train.threads = c.threads;
  c.ablation.pretrain.threads = c.threads;
  c.ablation.finetune.threads = c.threads;
  return c;
}

TrainPlan ExperimentConfig::plan_for(Phase phase) const {
  if (train_phase_set && train.phase == phase) return train;
  pt::ptree tree;
  for (const auto& [key, value] : train_overrides) tree.put(pt::ptree::path_type(key, '\0'), value);
  TrainPlan plan = phase_defaults(phase);
  {
    Section s("train", &tree);
    read_plan(s, "", plan);
  }
  plan.threads = threads;
  plan.validate();
  return plan;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.parent_path());
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  os << "[run]\nseed=" << seed << "\nthreads=" << threads << '\n';
  os << "[pipeline]\nwindow_s=" << num(pipeline.window_s) << "\nstride_s=" << num(pipeline.stride_s)
     << "\nenergy_threshold=" << num(pipeline.energy_threshold)
     << "\nvehicle_class=" << vehicle_class_name(pipeline.vehicle_class) << '\n';
  os << "[model]\ne_dim=" << model.e_dim << "\nd_dim=" << model.d_dim << "\nn_blocks=" << model.n_blocks
     << "\npatch_size=" << model.patch_size << "\ne_heads=" << model.e_heads << "\nd_heads=" << model.d_heads
     << "\nmlp_ratio=" << model.mlp_ratio << "\nmask_ratio=" << num(model.mask_ratio) << '\n';
  os << "[train]\n";
  emit_plan(os, "", train);
  os << "[kd]\nalpha_task=" << num(kd.alpha_task) << "\nalpha_kd=" << num(kd.alpha_kd) << '\n';
  os << "[threshold]\nstep_fraction=" << num(threshold.step_fraction) << "\nmax_steps=" << threshold.max_steps << '\n';
  os << "[bridge]\nmodal_freqs=" << list(bridge.modal_freqs) << "\nmodal_amps=" << list(bridge.modal_amps)
     << "\ndamping=" << list(bridge.damping) << "\nexcitation_rate=" << num(bridge.excitation_rate)
     << "\nnoise_std=" << num(bridge.noise_std) << "\nanomaly_shift=" << num(bridge.anomaly_shift)
     << "\nfs=" << num(bridge.fs) << '\n';
  if (bridge_seed_set) os << "seed=" << bridge.seed << '\n';
  os << "[traffic]\narrival_rate_light=" << num(traffic.arrival_rate_light)
     << "\narrival_rate_heavy=" << num(traffic.arrival_rate_heavy) << "\npulse_amp_light=" << num(traffic.pulse_amp_light)
     << "\npulse_amp_heavy=" << num(traffic.pulse_amp_heavy) << "\npulse_dur_s=" << num(traffic.pulse_dur_s)
     << "\ncrossing_frames=" << traffic.crossing_frames << "\nrate_modulation=" << num(traffic.rate_modulation)
     << "\nmodulation_period_s=" << num(traffic.modulation_period_s) << '\n';
  if (traffic_seed_set) os << "seed=" << traffic.seed << '\n';
  os << "[synth]\nnormal_s=" << num(synth.normal_s) << "\ndamaged_s=" << num(synth.damaged_s)
     << "\ntraffic_s=" << num(synth.traffic_s) << "\nformat=" << synth.format << '\n';
  os << "[eval]\nfilter_lengths=";
  for (std::size_t i = 0; i < eval.filter_lengths.size(); ++i) os << (i ? "," : "") << eval.filter_lengths[i];
  os << "\npercent_base=" << (eval.percent_base == PercentBase::mean_prediction ? "prediction" : "truth")
     << "\ntrain_fraction=" << num(eval.train_fraction) << '\n';
  if (eval.seed) os << "seed=" << *eval.seed << '\n';
  os << "[baseline]\nkind=" << baseline.kind << "\ncompression_factor=" << baseline.compression_factor
     << "\nk=" << baseline.k << '\n';
  os << "[ablation]\ntasks=";
  for (std::size_t i = 0; i < ablation.tasks.size(); ++i) os << (i ? "," : "") << ablation.tasks[i];
  os << "\nseeds=";
  for (std::size_t i = 0; i < ablation.seeds.size(); ++i) os << (i ? "," : "") << ablation.seeds[i];
  os << "\nfinetune_fraction=" << num(ablation.finetune_fraction) << '\n';
  emit_plan(os, "pretrain_", ablation.pretrain);
  emit_plan(os, "finetune_", ablation.finetune);
  os << "[paths]\n";
  for (const auto& [key, list] : paths) {
    os << key << '=';
    for (std::size_t i = 0; i < list.size(); ++i) os << (i ? "," : "") << list[i].string();
    os << '\n';
  }
  return os.str();
}

}  // namespace shmfm
