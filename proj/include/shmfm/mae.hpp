#pragma once

// Masked autoencoder over 100x100 spectrogram images.
//
// Images are cut into a grid of square patches; the encoder sees only visible patches
// (embedded, plus a fixed 2-D sin/cos position), the decoder receives the projected
// latents with a trainable mask token at every hidden position and regresses the pixels of
// all patches. The regression variant drops the decoder and maps the mean encoder latent
// through a single linear unit.

#include "shmfm/common.hpp"
#include "shmfm/nn.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

namespace shmfm {

struct ModelConfig {
  Index e_dim = 768;
  Index d_dim = 512;
  Index n_blocks = 3;
  Index patch_size = 10;
  Index e_heads = 12;
  Index d_heads = 8;
  Index mlp_ratio = 4;
  double mask_ratio = 0.8;

  Index grid() const { return kImageSide / patch_size; }
  Index num_patches() const { return grid() * grid(); }
  Index patch_area() const { return patch_size * patch_size; }

  void validate() const;

  /// Member of the (768,512) ... (24,16) family with its head counts.
  static ModelConfig family(Index e_dim, Index d_dim);
  /// The six family sizes, largest first.
  static std::vector<std::pair<Index, Index>> family_sizes();

  bool operator==(const ModelConfig&) const = default;
};

struct MaeLayout {
  ParamLayout params;
  LinearSlots patch_embed;
  std::vector<BlockSlots> encoder;
  NormSlots encoder_norm;

  bool has_decoder = false;
  LinearSlots enc_to_dec;
  TensorSlot mask_token;
  std::vector<BlockSlots> decoder;
  NormSlots decoder_norm;
  LinearSlots recon_head;

  bool has_reg_head = false;
  LinearSlots reg_head;
};

MaeLayout build_layout(const ModelConfig& cfg, bool with_decoder, bool with_reg_head);

/// Trainable scalars of the full encoder-decoder model (positional tables excluded).
Index param_count(const ModelConfig& cfg);
/// Trainable scalars of the encoder alone (patch embedding, blocks, final norm).
Index encoder_param_count(const ModelConfig& cfg);

struct MaskPlan {
  std::vector<Index> masked;   // ascending
  std::vector<Index> visible;  // ascending
  std::uint64_t seed = 0;
};

/// Uniformly random subset of exactly round(p * num_patches) masked patches.
MaskPlan sample_mask(Index num_patches, double p, std::uint64_t seed);

/// Plan with every patch visible.
MaskPlan full_visibility(Index num_patches);

// ---------------------------------------------------------------------------------------

template <typename Scalar>
struct MaeModel {
  ModelConfig config;
  MaeLayout layout;
  Vector<Scalar> params;
  Matrix<Scalar> enc_pos;
  Matrix<Scalar> dec_pos;

  bool has_decoder() const { return layout.has_decoder; }
  bool has_reg_head() const { return layout.has_reg_head; }
  Index size() const { return params.size(); }
};

namespace detail {

template <typename Scalar>
void truncated_normal(Eigen::Map<Matrix<Scalar>> out, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < out.size(); ++i) {
    double v = normal(rng);
    while (std::abs(v) > 2.0) v = normal(rng);
    out.data()[i] = static_cast<Scalar>(v * stddev);
  }
}

template <typename Scalar>
void init_linear(Vector<Scalar>& p, const LinearSlots& l, std::mt19937_64& rng) {
  truncated_normal<Scalar>(view(p, l.weight), 0.02, rng);
  view(p, l.bias).setZero();
}

template <typename Scalar>
void init_norm(Vector<Scalar>& p, const NormSlots& n) {
  view(p, n.gain).setOnes();
  view(p, n.shift).setZero();
}

template <typename Scalar>
void init_block(Vector<Scalar>& p, const BlockSlots& b, std::mt19937_64& rng) {
  init_norm(p, b.norm1);
  init_linear(p, b.attn.query, rng);
  init_linear(p, b.attn.key, rng);
  init_linear(p, b.attn.value, rng);
  init_linear(p, b.attn.out, rng);
  init_norm(p, b.norm2);
  init_linear(p, b.fc1, rng);
  init_linear(p, b.fc2, rng);
}

}  // namespace detail

/// Zero-filled model with the requested parts; positional tables populated.
template <typename Scalar>
MaeModel<Scalar> empty_model(const ModelConfig& cfg, bool with_decoder, bool with_reg_head) {
  cfg.validate();
  MaeModel<Scalar> m;
  m.config = cfg;
  m.layout = build_layout(cfg, with_decoder, with_reg_head);
  m.params = Vector<Scalar>::Zero(m.layout.params.size());
  m.enc_pos = sincos_position_table<Scalar>(cfg.grid(), cfg.e_dim);
  if (with_decoder) m.dec_pos = sincos_position_table<Scalar>(cfg.grid(), cfg.d_dim);
  return m;
}

/// Freshly initialized encoder-decoder: truncated normal (std 0.02) linear weights, zero
/// biases, unit norm gains, mask token ~ N(0, 0.02^2).
template <typename Scalar>
MaeModel<Scalar> make_mae(const ModelConfig& cfg, std::uint64_t seed) {
  MaeModel<Scalar> m = empty_model<Scalar>(cfg, true, false);
  std::mt19937_64 rng(seed);
  auto& p = m.params;
  const MaeLayout& l = m.layout;
  detail::init_linear(p, l.patch_embed, rng);
  for (const auto& b : l.encoder) detail::init_block(p, b, rng);
  detail::init_norm(p, l.encoder_norm);
  detail::init_linear(p, l.enc_to_dec, rng);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto token = view(p, l.mask_token);
  for (Index i = 0; i < token.size(); ++i) token.data()[i] = static_cast<Scalar>(normal(rng));
  for (const auto& b : l.decoder) detail::init_block(p, b, rng);
  detail::init_norm(p, l.decoder_norm);
  detail::init_linear(p, l.recon_head, rng);
  return m;
}

/// Copy of the encoder with the decoder dropped and a single-output linear head attached.
template <typename Scalar>
MaeModel<Scalar> attach_regression_head(const MaeModel<Scalar>& src, double bias, std::uint64_t seed) {
  MaeModel<Scalar> m = empty_model<Scalar>(src.config, false, true);
  m.enc_pos = src.enc_pos;
  for (const TensorSlot& slot : m.layout.params.slots()) {
    if (const TensorSlot* from = src.layout.params.find(slot.name))
      view(m.params, slot) = view(src.params, *from);
  }
  std::mt19937_64 rng(seed);
  detail::truncated_normal<Scalar>(view(m.params, m.layout.reg_head.weight), 0.02, rng);
  view(m.params, m.layout.reg_head.bias).setConstant(static_cast<Scalar>(bias));
  return m;
}

template <typename To, typename From>
MaeModel<To> cast_model(const MaeModel<From>& src) {
  MaeModel<To> m;
  m.config = src.config;
  m.layout = src.layout;
  m.params = src.params.template cast<To>();
  m.enc_pos = src.enc_pos.template cast<To>();
  m.dec_pos = src.dec_pos.template cast<To>();
  return m;
}

// ---------------------------------------------------------------------------------------
// Patches.

/// (grid^2 x patch_size^2) matrix, patches in row-major grid order, pixels row-major within a patch.
template <typename Scalar, typename Derived>
Matrix<Scalar> patchify(const Eigen::MatrixBase<Derived>& image, Index patch_size) {
  if (patch_size <= 0 || image.rows() % patch_size != 0 || image.cols() % patch_size != 0)
    throw ConfigError("image side is not divisible by patch size " + std::to_string(patch_size));
  const Index gr = image.rows() / patch_size;
  const Index gc = image.cols() / patch_size;
  Matrix<Scalar> patches(gr * gc, patch_size * patch_size);
  for (Index r = 0; r < gr; ++r)
    for (Index c = 0; c < gc; ++c)
      for (Index i = 0; i < patch_size; ++i)
        for (Index j = 0; j < patch_size; ++j)
          patches(r * gc + c, i * patch_size + j) =
              static_cast<Scalar>(image(r * patch_size + i, c * patch_size + j));
  return patches;
}

template <typename Scalar>
Matrix<Scalar> depatchify(const Matrix<Scalar>& patches, Index patch_size, Index side = kImageSide) {
  if (patch_size <= 0 || side % patch_size != 0)
    throw ConfigError("image side is not divisible by patch size " + std::to_string(patch_size));
  const Index grid = side / patch_size;
  if (patches.rows() != grid * grid || patches.cols() != patch_size * patch_size)
    throw ConfigError("patch matrix shape does not match the image grid");
  Matrix<Scalar> image(side, side);
  for (Index r = 0; r < grid; ++r)
    for (Index c = 0; c < grid; ++c)
      for (Index i = 0; i < patch_size; ++i)
        for (Index j = 0; j < patch_size; ++j)
          image(r * patch_size + i, c * patch_size + j) = patches(r * grid + c, i * patch_size + j);
  return image;
}

// ---------------------------------------------------------------------------------------
// Forward passes with optional traces for backpropagation.

template <typename Scalar>
struct EncoderTrace {
  Matrix<Scalar> inputs;  // visible patches
  std::vector<BlockCache<Scalar>> blocks;
  NormCache<Scalar> norm;
};

template <typename Scalar>
struct DecoderTrace {
  Matrix<Scalar> latents;  // encoder output fed to enc_to_dec
  std::vector<BlockCache<Scalar>> blocks;
  NormCache<Scalar> norm;
  Matrix<Scalar> normed;  // input of the reconstruction head
};

template <typename Scalar>
Matrix<Scalar> encode_patches(const MaeModel<Scalar>& m, const Matrix<Scalar>& patches, std::span<const Index> visible,
                              std::type_identity_t<EncoderTrace<Scalar>>* trace) {
  const Index n = static_cast<Index>(visible.size());
  Matrix<Scalar> inputs(n, patches.cols());
  for (Index i = 0; i < n; ++i) inputs.row(i) = patches.row(visible[static_cast<std::size_t>(i)]);
  Matrix<Scalar> x = linear_forward(m.layout.patch_embed, m.params, inputs);
  for (Index i = 0; i < n; ++i) x.row(i) += m.enc_pos.row(visible[static_cast<std::size_t>(i)]);
  if (trace) trace->blocks.resize(m.layout.encoder.size());
  for (std::size_t b = 0; b < m.layout.encoder.size(); ++b)
    x = block_forward(m.layout.encoder[b], m.params, x, trace ? &trace->blocks[b] : nullptr);
  Matrix<Scalar> latents = norm_forward(m.layout.encoder_norm, m.params, x, trace ? &trace->norm : nullptr);
  if (trace) trace->inputs = std::move(inputs);
  return latents;
}

template <typename Scalar>
void encoder_backward(const MaeModel<Scalar>& m, const EncoderTrace<Scalar>& t, const Matrix<Scalar>& dlatents,
                      Vector<Scalar>& grad) {
  Matrix<Scalar> dx = norm_backward(m.layout.encoder_norm, m.params, t.norm, dlatents, grad);
  for (std::size_t b = m.layout.encoder.size(); b-- > 0;)
    dx = block_backward(m.layout.encoder[b], m.params, t.blocks[b], dx, grad);
  linear_backward_params(m.layout.patch_embed, t.inputs, dx, grad);
}

/// Reconstructed patches (num_patches x patch_area) from visible-patch latents.
template <typename Scalar>
Matrix<Scalar> decode_patches(const MaeModel<Scalar>& m, const Matrix<Scalar>& latents, const MaskPlan& plan,
                              std::type_identity_t<DecoderTrace<Scalar>>* trace) {
  if (!m.has_decoder()) throw ModeError("model has no decoder");
  if (latents.rows() != static_cast<Index>(plan.visible.size()) || latents.cols() != m.config.e_dim)
    throw Error("latent shape does not match the mask plan");
  const MaeLayout& l = m.layout;
  const Matrix<Scalar> z = linear_forward(l.enc_to_dec, m.params, latents);
  Matrix<Scalar> x(m.config.num_patches(), m.config.d_dim);
  const auto token = row_view(m.params, l.mask_token);
  for (Index idx : plan.masked) x.row(idx) = token;
  for (std::size_t i = 0; i < plan.visible.size(); ++i) x.row(plan.visible[i]) = z.row(static_cast<Index>(i));
  x += m.dec_pos;
  if (trace) trace->blocks.resize(l.decoder.size());
  for (std::size_t b = 0; b < l.decoder.size(); ++b)
    x = block_forward(l.decoder[b], m.params, x, trace ? &trace->blocks[b] : nullptr);
  Matrix<Scalar> normed = norm_forward(l.decoder_norm, m.params, x, trace ? &trace->norm : nullptr);
  Matrix<Scalar> recon = linear_forward(l.recon_head, m.params, normed);
  if (trace) {
    trace->latents = latents;
    trace->normed = std::move(normed);
  }
  return recon;
}

/// Backward through the decoder; returns the gradient w.r.t. the latents.
template <typename Scalar>
Matrix<Scalar> decoder_backward(const MaeModel<Scalar>& m, const DecoderTrace<Scalar>& t, const MaskPlan& plan,
                                const Matrix<Scalar>& drecon, Vector<Scalar>& grad) {
  const MaeLayout& l = m.layout;
  Matrix<Scalar> dx = linear_backward(l.recon_head, m.params, t.normed, drecon, grad);
  dx = norm_backward(l.decoder_norm, m.params, t.norm, dx, grad);
  for (std::size_t b = l.decoder.size(); b-- > 0;) dx = block_backward(l.decoder[b], m.params, t.blocks[b], dx, grad);
  auto dtoken = row_view(grad, l.mask_token);
  for (Index idx : plan.masked) dtoken += dx.row(idx);
  Matrix<Scalar> dz(static_cast<Index>(plan.visible.size()), m.config.d_dim);
  for (std::size_t i = 0; i < plan.visible.size(); ++i) dz.row(static_cast<Index>(i)) = dx.row(plan.visible[i]);
  return linear_backward(l.enc_to_dec, m.params, t.latents, dz, grad);
}

// ---------------------------------------------------------------------------------------
// Public operations.

/// Latents of the visible patches (all patches when `plan` is null).
template <typename Scalar, typename Derived>
Matrix<Scalar> encode(const MaeModel<Scalar>& m, const Eigen::MatrixBase<Derived>& image, const MaskPlan* plan) {
  const Matrix<Scalar> patches = patchify<Scalar>(image, m.config.patch_size);
  const MaskPlan all = plan ? MaskPlan{} : full_visibility(m.config.num_patches());
  return encode_patches(m, patches, plan ? plan->visible : all.visible, nullptr);
}

template <typename Scalar>
Matrix<Scalar> decode_reconstruct(const MaeModel<Scalar>& m, const Matrix<Scalar>& latents, const MaskPlan& plan) {
  return depatchify(decode_patches(m, latents, plan, nullptr), m.config.patch_size);
}

/// Mean squared error over the pixels of masked patches (patch space).
template <typename Scalar>
Scalar masked_patch_mse(const Matrix<Scalar>& pred, const Matrix<Scalar>& truth, std::span<const Index> masked) {
  if (masked.empty()) throw UndefinedValue("masked-patch loss is undefined for an empty mask");
  Scalar total = 0;
  for (Index idx : masked) total += (pred.row(idx) - truth.row(idx)).squaredNorm();
  return total / static_cast<Scalar>(static_cast<Index>(masked.size()) * pred.cols());
}

/// Gradient of masked_patch_mse w.r.t. the prediction; visible rows are exactly zero.
template <typename Scalar>
Matrix<Scalar> masked_patch_mse_grad(const Matrix<Scalar>& pred, const Matrix<Scalar>& truth,
                                     std::span<const Index> masked) {
  if (masked.empty()) throw UndefinedValue("masked-patch loss is undefined for an empty mask");
  Matrix<Scalar> g = Matrix<Scalar>::Zero(pred.rows(), pred.cols());
  const Scalar scale = Scalar(2) / static_cast<Scalar>(static_cast<Index>(masked.size()) * pred.cols());
  for (Index idx : masked) g.row(idx) = (pred.row(idx) - truth.row(idx)) * scale;
  return g;
}

/// Image-space masked MSE: only pixels of masked patches contribute.
template <typename Scalar>
Scalar pretrain_loss(const Matrix<Scalar>& pred_image, const Matrix<Scalar>& true_image, const MaskPlan& plan,
                     Index patch_size) {
  if (pred_image.rows() != true_image.rows() || pred_image.cols() != true_image.cols())
    throw Error("prediction and target shapes differ");
  return masked_patch_mse<Scalar>(patchify<Scalar>(pred_image, patch_size), patchify<Scalar>(true_image, patch_size),
                                  plan.masked);
}

/// Forward + backward of the masked reconstruction objective for one image. Accumulates
/// into `grad` and returns the loss.
template <typename Scalar>
Scalar pretrain_loss_and_grad(const MaeModel<Scalar>& m, const Matrix<Scalar>& patches, const MaskPlan& plan,
                              Vector<Scalar>& grad) {
  EncoderTrace<Scalar> et;
  DecoderTrace<Scalar> dt;
  const Matrix<Scalar> latents = encode_patches(m, patches, plan.visible, &et);
  const Matrix<Scalar> recon = decode_patches(m, latents, plan, &dt);
  const Scalar loss = masked_patch_mse<Scalar>(recon, patches, plan.masked);
  const Matrix<Scalar> drecon = masked_patch_mse_grad<Scalar>(recon, patches, plan.masked);
  const Matrix<Scalar> dlatents = decoder_backward(m, dt, plan, drecon, grad);
  encoder_backward(m, et, dlatents, grad);
  return loss;
}

/// Masked reconstruction loss (no gradient).
template <typename Scalar>
Scalar pretrain_loss_value(const MaeModel<Scalar>& m, const Matrix<Scalar>& patches, const MaskPlan& plan) {
  const Matrix<Scalar> latents = encode_patches(m, patches, plan.visible, nullptr);
  return masked_patch_mse<Scalar>(decode_patches(m, latents, plan, nullptr), patches, plan.masked);
}

/// Per-window anomaly score: masked reconstruction loss under the mask drawn from `eval_seed`.
template <typename Scalar, typename Derived>
Scalar reconstruction_error(const MaeModel<Scalar>& m, const Eigen::MatrixBase<Derived>& image,
                            std::uint64_t eval_seed) {
  const MaskPlan plan = sample_mask(m.config.num_patches(), m.config.mask_ratio, eval_seed);
  return pretrain_loss_value(m, patchify<Scalar>(image, m.config.patch_size), plan);
}

template <typename Scalar>
struct RegressionTrace {
  EncoderTrace<Scalar> encoder;
  RowVector<Scalar> pooled;
};

template <typename Scalar>
Scalar regress_patches(const MaeModel<Scalar>& m, const Matrix<Scalar>& patches, std::type_identity_t<RegressionTrace<Scalar>>* trace) {
  if (!m.has_reg_head()) throw ModeError("model has no regression head");
  const MaskPlan all = full_visibility(m.config.num_patches());
  const Matrix<Scalar> latents = encode_patches(m, patches, all.visible, trace ? &trace->encoder : nullptr);
  RowVector<Scalar> pooled = latents.colwise().mean();
  const Scalar y = (pooled * view(m.params, m.layout.reg_head.weight))(0, 0) +
                   view(m.params, m.layout.reg_head.bias)(0, 0);
  if (trace) trace->pooled = std::move(pooled);
  return y;
}

/// Backward of the regression output given dL/dy.
template <typename Scalar>
void regress_backward(const MaeModel<Scalar>& m, const RegressionTrace<Scalar>& t, Scalar dy, Vector<Scalar>& grad) {
  const LinearSlots& head = m.layout.reg_head;
  view(grad, head.weight) += t.pooled.transpose() * dy;
  view(grad, head.bias)(0, 0) += dy;
  const RowVector<Scalar> dpooled = view(m.params, head.weight).transpose() * dy;
  const Index n = m.config.num_patches();
  Matrix<Scalar> dlatents = dpooled.replicate(n, 1) / static_cast<Scalar>(n);
  encoder_backward(m, t.encoder, dlatents, grad);
}

template <typename Scalar, typename Derived>
Scalar forward_regress(const MaeModel<Scalar>& m, const Eigen::MatrixBase<Derived>& image) {
  return regress_patches(m, patchify<Scalar>(image, m.config.patch_size), nullptr);
}

}  // namespace shmfm
