#include "shmfm/trainer.hpp"

#include "shmfm/io.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

namespace shmfm {

std::string to_string(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::finetune_ad: return "finetune_ad";
    case Phase::finetune_tle: return "finetune_tle";
    case Phase::finetune_kd: return "finetune_kd";
  }
  return "unknown";
}

Phase parse_phase(const std::string& s) {
  for (Phase p : {Phase::pretrain, Phase::finetune_ad, Phase::finetune_tle, Phase::finetune_kd})
    if (to_string(p) == s) return p;
  throw ConfigError("unknown training phase '" + s + "'");
}

void TrainPlan::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (epochs <= 0) throw ConfigError("epochs must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("warmup_epochs must lie in [0, epochs]");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in [0, 1)");
  if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

TrainPlan TrainPlan::pretrain_defaults() { return TrainPlan{}; }

TrainPlan TrainPlan::finetune_ad_defaults() {
  TrainPlan p;
  p.phase = Phase::finetune_ad;
  p.base_lr = 2.5e-3;
  p.epochs = 400;
  p.batch_size = 64;
  p.warmup_epochs = 0;
  return p;
}

TrainPlan TrainPlan::finetune_tle_defaults() {
  TrainPlan p;
  p.phase = Phase::finetune_tle;
  p.base_lr = 2.5e-6;
  p.epochs = 500;
  p.batch_size = 8;
  p.warmup_epochs = 0;
  return p;
}

TrainPlan TrainPlan::finetune_tle_large_defaults() {
  TrainPlan p = finetune_tle_defaults();
  p.epochs = 200;
  p.batch_size = 128;
  return p;
}

std::string TrainPlan::canonical() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "phase=%s\nbase_lr=%.17g\nweight_decay=%.17g\nepochs=%d\nbatch_size=%d\nwarmup_epochs=%d\n"
                "mask_ratio=%.17g\nseed=%llu\nmax_grad_norm=%.17g\nbeta1=%.17g\nbeta2=%.17g\nadam_eps=%.17g\n"
                "loss=%s\n",
                to_string(phase).c_str(), base_lr, weight_decay, epochs, batch_size, warmup_epochs, mask_ratio,
                static_cast<unsigned long long>(seed), max_grad_norm, adam.beta1, adam.beta2, adam.eps,
                loss == SupervisedLoss::mse ? "mse" : "mae");
  return buf;
}

std::uint64_t TrainPlan::hash() const { return fnv1a(canonical()); }

void KDConfig::validate() const {
  if (alpha_task < 0.0 || alpha_kd < 0.0 || std::abs(alpha_task + alpha_kd - 1.0) > 1e-12)
    throw ConfigError("KD weights must be non-negative and sum to 1");
}

double lr_at(const TrainPlan& plan, int epoch) {
  if (epoch < 0 || epoch >= plan.epochs)
    throw ConfigError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(plan.epochs) + ")");
  if (epoch < plan.warmup_epochs) return plan.base_lr * epoch / plan.warmup_epochs;
  const double progress =
      static_cast<double>(epoch - plan.warmup_epochs) / static_cast<double>(plan.epochs - plan.warmup_epochs);
  return plan.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "epoch,lr,loss,val_metric,seconds\n";
  out.precision(10);
  for (const EpochRecord& r : epochs) {
    out << r.epoch << ',' << r.lr << ',' << r.loss << ',';
    if (r.val_metric) out << *r.val_metric;
    out << ',' << r.seconds << '\n';
  }
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::uint64_t state = seed;
  for (std::size_t i = n; i-- > 1;) {
    state = mix_seed(state);
    std::swap(order[i], order[state % (i + 1)]);
  }
  return order;
}

// Runs fn(worker, begin, end) over contiguous chunks of [0, n); chunk boundaries depend only
// on (n, threads), so reductions in worker order are reproducible for a fixed thread count.
template <typename Fn>
void for_chunks(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    fn(std::size_t{0}, std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    pool.emplace_back([&, w, begin, end] {
      try {
        fn(w, begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::size_t worker_count(std::size_t n, int threads) {
  return std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(threads), n));
}

std::vector<Matrix<float>> patchify_all(std::span<const SpectrogramWindow> windows, Index patch_size) {
  std::vector<Matrix<float>> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(patchify<float>(w.image, patch_size));
  return out;
}

void apply_update(MaeModel<float>& model, AdamW<float>& opt, Vector<float>& grad, double loss, const TrainPlan& plan,
                  double lr, int epoch) {
  if (!std::isfinite(loss))
    throw TrainingError("loss diverged (" + std::to_string(loss) + ") in epoch " + std::to_string(epoch) + " of " +
                        to_string(plan.phase));
  clip_gradients(grad, plan.max_grad_norm);
  opt.step(model.params, grad, lr, plan.weight_decay);
}

template <typename StepFn>
TrainLog run_epochs(MaeModel<float>& model, std::size_t n_windows, const TrainPlan& plan, const EpochHook& hook,
                    StepFn&& step) {
  TrainLog log;
  AdamW<float> opt(model.layout.params, plan.adam);
  const auto batch = static_cast<std::size_t>(plan.batch_size);
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(plan, epoch);
    const auto order = shuffled_indices(n_windows, mix_seed(plan.seed, static_cast<std::uint64_t>(epoch), 0x5eedULL));
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < n_windows; start += batch) {
      const std::span<const std::size_t> ids(order.data() + start, std::min(batch, n_windows - start));
      Vector<float> grad = Vector<float>::Zero(model.size());
      const double loss = step(ids, epoch, grad);
      apply_update(model, opt, grad, loss, plan, lr, epoch);
      log.step_losses.push_back(loss);
      loss_sum += loss;
      ++steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = loss_sum / static_cast<double>(steps);
    if (hook) rec.val_metric = hook(epoch, model);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);
  }
  return log;
}

TrainLog masked_training(MaeModel<float>& model, std::span<const SpectrogramWindow> windows, const TrainPlan& plan,
                         const EpochHook& hook) {
  plan.validate();
  if (windows.empty()) throw DataError("training set is empty");
  if (!model.has_decoder()) throw ModeError("masked training needs the decoder");
  const auto patches = patchify_all(windows, model.config.patch_size);
  const Index n_patches = model.config.num_patches();

  auto step = [&](std::span<const std::size_t> ids, int epoch, Vector<float>& grad) {
    const std::size_t workers = worker_count(ids.size(), plan.threads);
    std::vector<Vector<float>> grads(workers);
    std::vector<double> losses(workers, 0.0);
    for_chunks(ids.size(), plan.threads, [&](std::size_t w, std::size_t begin, std::size_t end) {
      Vector<float>& g = workers == 1 ? grad : grads[w];
      if (workers > 1) g = Vector<float>::Zero(model.size());
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t idx = ids[i];
        const MaskPlan mask =
            sample_mask(n_patches, plan.mask_ratio, mix_seed(plan.seed, static_cast<std::uint64_t>(epoch) + 1, idx));
        losses[w] += static_cast<double>(pretrain_loss_and_grad(model, patches[idx], mask, g));
      }
    });
    if (workers > 1)
      for (const auto& g : grads) grad += g;
    double loss = 0.0;
    for (double l : losses) loss += l;
    const auto count = static_cast<double>(ids.size());
    grad /= static_cast<float>(count);
    return loss / count;
  };
  return run_epochs(model, windows.size(), plan, hook, step);
}

// Computes the batch loss and dL/dy_i from predictions of the batch members `ids`.
using BatchLossFn =
    std::function<double(std::span<const std::size_t> ids, std::span<const double> preds, std::span<double> dpred)>;

TrainLog supervised_training(MaeModel<float>& model, std::span<const SpectrogramWindow> windows, const TrainPlan& plan,
                             const BatchLossFn& loss_fn, const EpochHook& hook) {
  plan.validate();
  if (windows.empty()) throw DataError("training set is empty");
  if (!model.has_reg_head()) throw ModeError("supervised fine-tuning needs a regression head");
  const auto patches = patchify_all(windows, model.config.patch_size);

  auto step = [&](std::span<const std::size_t> ids, int, Vector<float>& grad) {
    const std::size_t n = ids.size();
    std::vector<RegressionTrace<float>> traces(n);
    std::vector<double> preds(n);
    for_chunks(n, plan.threads, [&](std::size_t, std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i)
        preds[i] = static_cast<double>(regress_patches(model, patches[ids[i]], &traces[i]));
    });
    std::vector<double> dpred(n, 0.0);
    const double loss = loss_fn(ids, preds, dpred);
    if (!std::isfinite(loss)) return loss;
    const std::size_t workers = worker_count(n, plan.threads);
    std::vector<Vector<float>> grads(workers);
    for_chunks(n, plan.threads, [&](std::size_t w, std::size_t begin, std::size_t end) {
      Vector<float>& g = workers == 1 ? grad : grads[w];
      if (workers > 1) g = Vector<float>::Zero(model.size());
      for (std::size_t i = begin; i < end; ++i)
        regress_backward(model, traces[i], static_cast<float>(dpred[i]), g);
    });
    if (workers > 1)
      for (const auto& g : grads) grad += g;
    return loss;
  };
  return run_epochs(model, windows.size(), plan, hook, step);
}

std::vector<double> collect_targets(std::span<const SpectrogramWindow> windows) {
  std::vector<double> t;
  t.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (!windows[i].target) throw DataError("window " + std::to_string(i) + " has no regression target");
    t.push_back(*windows[i].target);
  }
  return t;
}

double sign(double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); }

}  // namespace

TrainLog pretrain(MaeModel<float>& model, std::span<const SpectrogramWindow> windows, const TrainPlan& plan,
                  const EpochHook& hook) {
  return masked_training(model, windows, plan, hook);
}

TrainLog finetune_ad(MaeModel<float>& model, std::span<const SpectrogramWindow> windows, const TrainPlan& plan,
                     const EpochHook& hook) {
  for (std::size_t i = 0; i < windows.size(); ++i)
    if (windows[i].tag == WindowTag::anomaly)
      throw DataError("anomaly-tagged window " + std::to_string(i) + " in anomaly-detection fine-tuning set");
  return masked_training(model, windows, plan, hook);
}

TrainLog finetune_tle(MaeModel<float>& model, std::span<const SpectrogramWindow> windows, const TrainPlan& plan,
                      const EpochHook& hook) {
  const std::vector<double> targets = collect_targets(windows);
  const bool use_mae = plan.loss == SupervisedLoss::mae;
  BatchLossFn loss_fn = [&](std::span<const std::size_t> ids, std::span<const double> preds, std::span<double> d) {
    const auto n = static_cast<double>(ids.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const double r = preds[i] - targets[ids[i]];
      if (use_mae) {
        loss += std::abs(r);
        d[i] = sign(r) / n;
      } else {
        loss += r * r;
        d[i] = 2.0 * r / n;
      }
    }
    return loss / n;
  };
  return supervised_training(model, windows, plan, loss_fn, hook);
}

double kd_loss(std::span<const double> student, std::span<const double> teacher, std::span<const double> truth,
               const KDConfig& kd) {
  if (student.size() != teacher.size() || student.size() != truth.size() || student.empty())
    throw DataError("KD loss needs equal, non-empty prediction vectors");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < student.size(); ++i) {
    abs_sum += std::abs(student[i] - truth[i]);
    sq_sum += (student[i] - teacher[i]) * (student[i] - teacher[i]);
  }
  const auto n = static_cast<double>(student.size());
  return kd.alpha_task * (abs_sum / n) + kd.alpha_kd * std::sqrt(sq_sum / n);
}

TrainLog finetune_kd(MaeModel<float>& student, const MaeModel<float>& teacher,
                     std::span<const SpectrogramWindow> windows, const TrainPlan& plan, const KDConfig& kd,
                     const EpochHook& hook) {
  kd.validate();
  if (!teacher.has_reg_head()) throw ConfigError("KD teacher has no regression head");
  const std::vector<double> targets = collect_targets(windows);
  const std::vector<double> teacher_preds = predict(teacher, windows);
  BatchLossFn loss_fn = [&](std::span<const std::size_t> ids, std::span<const double> preds, std::span<double> d) {
    const std::size_t n = ids.size();
    std::vector<double> t(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = teacher_preds[ids[i]];
      y[i] = targets[ids[i]];
    }
    const double loss = kd_loss(preds, t, y, kd);
    double sq_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq_sum += (preds[i] - t[i]) * (preds[i] - t[i]);
    const auto nd = static_cast<double>(n);
    const double rmse = std::sqrt(sq_sum / nd);
    for (std::size_t i = 0; i < n; ++i) {
      const double d_task = sign(preds[i] - y[i]) / nd;
      const double d_kd = rmse > 0.0 ? (preds[i] - t[i]) / (nd * rmse) : 0.0;
      d[i] = kd.alpha_task * d_task + kd.alpha_kd * d_kd;
    }
    return loss;
  };
  return supervised_training(student, windows, plan, loss_fn, hook);
}

std::vector<double> predict(const MaeModel<float>& model, std::span<const SpectrogramWindow> windows) {
  std::vector<double> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(static_cast<double>(forward_regress(model, w.image)));
  return out;
}

std::vector<double> reconstruction_errors(const MaeModel<float>& model, std::span<const SpectrogramWindow> windows,
                                          std::uint64_t global_seed, std::size_t first_index) {
  std::vector<double> out;
  out.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i)
    out.push_back(static_cast<double>(reconstruction_error(model, windows[i].image, global_seed ^ (first_index + i))));
  return out;
}

double mean_target(std::span<const SpectrogramWindow> windows) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& w : windows)
    if (w.target) {
      sum += *w.target;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'M', 'A', 'E', 'C'};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void save_checkpoint(const MaeModel<float>& model, const std::filesystem::path& path, std::uint64_t provenance,
                     const AdamWConfig& adam) {
  const ModelConfig& c = model.config;
  std::ostringstream meta;
  meta << "e_dim=" << c.e_dim << "\nd_dim=" << c.d_dim << "\nn_blocks=" << c.n_blocks
       << "\npatch_size=" << c.patch_size << "\ne_heads=" << c.e_heads << "\nd_heads=" << c.d_heads
       << "\nmlp_ratio=" << c.mlp_ratio << "\nmask_ratio=" << format_double(c.mask_ratio)
       << "\nhas_decoder=" << model.has_decoder() << "\nhas_reg_head=" << model.has_reg_head()
       << "\nadam_beta1=" << format_double(adam.beta1) << "\nadam_beta2=" << format_double(adam.beta2)
       << "\nadam_eps=" << format_double(adam.eps) << "\nprovenance=" << provenance << "\n";
  TensorContainer box;
  box.magic = kCheckpointMagic;
  box.version = kCheckpointVersion;
  box.meta = meta.str();
  for (const TensorSlot& s : model.layout.params.slots()) {
    NamedTensor t;
    t.name = s.name;
    if (s.rows == 1)
      t.dims = {static_cast<std::uint32_t>(s.cols)};
    else
      t.dims = {static_cast<std::uint32_t>(s.rows), static_cast<std::uint32_t>(s.cols)};
    const float* src = model.params.data() + s.offset;
    t.data.assign(src, src + s.size());
    box.tensors.push_back(std::move(t));
  }
  write_container(path, box);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("checkpoint not found: " + path.string());
  const TensorContainer box = read_container(path, kCheckpointMagic, kCheckpointVersion);
  ModelConfig cfg;
  bool has_decoder = false, has_reg_head = false;
  Checkpoint ck;
  try {
    for (const auto& [key, value] : parse_key_values(box.meta)) {
      if (key == "e_dim") cfg.e_dim = std::stoll(value);
      else if (key == "d_dim") cfg.d_dim = std::stoll(value);
      else if (key == "n_blocks") cfg.n_blocks = std::stoll(value);
      else if (key == "patch_size") cfg.patch_size = std::stoll(value);
      else if (key == "e_heads") cfg.e_heads = std::stoll(value);
      else if (key == "d_heads") cfg.d_heads = std::stoll(value);
      else if (key == "mlp_ratio") cfg.mlp_ratio = std::stoll(value);
      else if (key == "mask_ratio") cfg.mask_ratio = std::stod(value);
      else if (key == "has_decoder") has_decoder = value == "1";
      else if (key == "has_reg_head") has_reg_head = value == "1";
      else if (key == "adam_beta1") ck.adam.beta1 = std::stod(value);
      else if (key == "adam_beta2") ck.adam.beta2 = std::stod(value);
      else if (key == "adam_eps") ck.adam.eps = std::stod(value);
      else if (key == "provenance") ck.provenance = std::stoull(value);
    }
    cfg.validate();
  } catch (const std::logic_error& e) {
    throw FormatError(path.string() + ": malformed checkpoint header (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": invalid model configuration (" + e.what() + ")");
  }
  ck.model = empty_model<float>(cfg, has_decoder, has_reg_head);
  if (box.tensors.size() != ck.model.layout.params.slots().size())
    throw FormatError(path.string() + ": expected " + std::to_string(ck.model.layout.params.slots().size()) +
                      " tensors, found " + std::to_string(box.tensors.size()));
  for (const TensorSlot& s : ck.model.layout.params.slots()) {
    const NamedTensor* t = box.find(s.name);
    if (!t) throw FormatError(path.string() + ": missing tensor " + s.name);
    std::uint64_t elements = 1;
    for (auto d : t->dims) elements *= d;
    const bool shape_ok = (t->dims.size() == 1 && s.rows == 1 && t->dims[0] == s.cols) ||
                          (t->dims.size() == 2 && t->dims[0] == s.rows && t->dims[1] == s.cols);
    if (!shape_ok || elements != static_cast<std::uint64_t>(s.size()))
      throw FormatError(path.string() + ": tensor " + s.name + " has the wrong shape for this configuration");
    std::copy(t->data.begin(), t->data.end(), ck.model.params.data() + s.offset);
  }
  return ck;
}

}  // namespace shmfm
