#include "shmfm/mae.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace shmfm {

void ModelConfig::validate() const {
  if (e_dim <= 0 || d_dim <= 0 || e_heads <= 0 || d_heads <= 0 || n_blocks < 0 || mlp_ratio <= 0)
    throw ConfigError("model dimensions must be positive");
  if (e_dim % e_heads != 0) throw ConfigError("e_dim must be divisible by e_heads");
  if (d_dim % d_heads != 0) throw ConfigError("d_dim must be divisible by d_heads");
  if (e_dim % 4 != 0 || d_dim % 4 != 0) throw ConfigError("embedding widths must be divisible by 4");
  if (patch_size <= 0 || kImageSide % patch_size != 0) throw ConfigError("100 must be divisible by patch_size");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in [0, 1)");
}

std::vector<std::pair<Index, Index>> ModelConfig::family_sizes() {
  return {{768, 512}, {384, 256}, {192, 128}, {96, 64}, {48, 32}, {24, 16}};
}

ModelConfig ModelConfig::family(Index e_dim, Index d_dim) {
  static const std::map<Index, Index> encoder_heads{{768, 12}, {384, 6}, {192, 3}, {96, 3}, {48, 3}, {24, 3}};
  static const std::map<Index, Index> decoder_heads{{512, 8}, {256, 8}, {128, 4}, {64, 4}, {32, 4}, {16, 2}};
  const auto e = encoder_heads.find(e_dim);
  const auto d = decoder_heads.find(d_dim);
  if (e == encoder_heads.end() || d == decoder_heads.end())
    throw ConfigError("(" + std::to_string(e_dim) + "," + std::to_string(d_dim) + ") is not a family size");
  ModelConfig cfg;
  cfg.e_dim = e_dim;
  cfg.d_dim = d_dim;
  cfg.e_heads = e->second;
  cfg.d_heads = d->second;
  return cfg;
}

MaeLayout build_layout(const ModelConfig& cfg, bool with_decoder, bool with_reg_head) {
  cfg.validate();
  MaeLayout l;
  l.patch_embed = add_linear(l.params, "encoder.patch_embed", cfg.patch_area(), cfg.e_dim);
  for (Index b = 0; b < cfg.n_blocks; ++b)
    l.encoder.push_back(
        add_block(l.params, "encoder.blocks." + std::to_string(b), cfg.e_dim, cfg.e_heads, cfg.mlp_ratio));
  l.encoder_norm = add_norm(l.params, "encoder.norm", cfg.e_dim);
  l.has_decoder = with_decoder;
  if (with_decoder) {
    l.enc_to_dec = add_linear(l.params, "decoder.embed", cfg.e_dim, cfg.d_dim);
    l.mask_token = l.params.add("decoder.mask_token", 1, cfg.d_dim, false);
    for (Index b = 0; b < cfg.n_blocks; ++b)
      l.decoder.push_back(
          add_block(l.params, "decoder.blocks." + std::to_string(b), cfg.d_dim, cfg.d_heads, cfg.mlp_ratio));
    l.decoder_norm = add_norm(l.params, "decoder.norm", cfg.d_dim);
    l.recon_head = add_linear(l.params, "decoder.recon_head", cfg.d_dim, cfg.patch_area());
  }
  l.has_reg_head = with_reg_head;
  if (with_reg_head) l.reg_head = add_linear(l.params, "reg_head", cfg.e_dim, 1);
  return l;
}

Index param_count(const ModelConfig& cfg) { return build_layout(cfg, true, false).params.size(); }

Index encoder_param_count(const ModelConfig& cfg) { return build_layout(cfg, false, false).params.size(); }

MaskPlan sample_mask(Index num_patches, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("mask ratio must lie in [0, 1)");
  const auto n_masked = static_cast<Index>(std::llround(p * static_cast<double>(num_patches)));
  std::vector<Index> order(static_cast<std::size_t>(num_patches));
  std::iota(order.begin(), order.end(), Index{0});
  // Fisher-Yates over a splitmix stream: identical across standard libraries.
  std::uint64_t state = seed;
  for (Index i = num_patches - 1; i > 0; --i) {
    state = mix_seed(state);
    const auto j = static_cast<Index>(state % static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  MaskPlan plan;
  plan.seed = seed;
  plan.masked.assign(order.begin(), order.begin() + n_masked);
  plan.visible.assign(order.begin() + n_masked, order.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

MaskPlan full_visibility(Index num_patches) {
  MaskPlan plan;
  plan.visible.resize(static_cast<std::size_t>(num_patches));
  std::iota(plan.visible.begin(), plan.visible.end(), Index{0});
  return plan;
}

}  // namespace shmfm
