#pragma once

// Transformer building blocks over a flat parameter vector.
//
// Every trainable tensor lives in one contiguous Vector<Scalar>; a ParamLayout records
// where each named tensor sits. Gradients and optimizer moments are vectors with the same
// layout, so optimizers, clipping and checkpoints work on flat storage while layers map
// their slices as Eigen matrices. Activations are token-major: one row per token.

#include "shmfm/common.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

namespace shmfm {

struct TensorSlot {
  std::string name;
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;
  bool decay = false;  // decoupled weight decay applies

  Index size() const { return rows * cols; }
};

class ParamLayout {
 public:
  TensorSlot add(std::string name, Index rows, Index cols, bool decay) {
    TensorSlot slot{std::move(name), size_, rows, cols, decay};
    size_ += slot.size();
    slots_.push_back(slot);
    return slot;
  }

  const std::vector<TensorSlot>& slots() const { return slots_; }
  Index size() const { return size_; }

  const TensorSlot* find(std::string_view name) const {
    for (const auto& s : slots_)
      if (s.name == name) return &s;
    return nullptr;
  }

 private:
  std::vector<TensorSlot> slots_;
  Index size_ = 0;
};

template <typename Scalar>
Eigen::Map<Matrix<Scalar>> view(Vector<Scalar>& flat, const TensorSlot& s) {
  return {flat.data() + s.offset, s.rows, s.cols};
}

template <typename Scalar>
Eigen::Map<const Matrix<Scalar>> view(const Vector<Scalar>& flat, const TensorSlot& s) {
  return {flat.data() + s.offset, s.rows, s.cols};
}

template <typename Scalar>
Eigen::Map<RowVector<Scalar>> row_view(Vector<Scalar>& flat, const TensorSlot& s) {
  return {flat.data() + s.offset, s.size()};
}

template <typename Scalar>
Eigen::Map<const RowVector<Scalar>> row_view(const Vector<Scalar>& flat, const TensorSlot& s) {
  return {flat.data() + s.offset, s.size()};
}

// ---------------------------------------------------------------------------------------
// Linear: y = x W + b, W stored (in x out).

struct LinearSlots {
  TensorSlot weight;
  TensorSlot bias;
};

inline LinearSlots add_linear(ParamLayout& layout, const std::string& name, Index in, Index out) {
  return {layout.add(name + ".weight", in, out, true), layout.add(name + ".bias", 1, out, false)};
}

template <typename Scalar>
Matrix<Scalar> linear_forward(const LinearSlots& l, const Vector<Scalar>& p, const Matrix<Scalar>& x) {
  Matrix<Scalar> y = x * view(p, l.weight);
  y.rowwise() += row_view(p, l.bias);
  return y;
}

template <typename Scalar>
void linear_backward_params(const LinearSlots& l, const Matrix<Scalar>& x, const Matrix<Scalar>& dy,
                            Vector<Scalar>& grad) {
  view(grad, l.weight).noalias() += x.transpose() * dy;
  row_view(grad, l.bias) += dy.colwise().sum();
}

template <typename Scalar>
Matrix<Scalar> linear_backward(const LinearSlots& l, const Vector<Scalar>& p, const Matrix<Scalar>& x,
                               const Matrix<Scalar>& dy, Vector<Scalar>& grad) {
  linear_backward_params(l, x, dy, grad);
  return dy * view(p, l.weight).transpose();
}

// ---------------------------------------------------------------------------------------
// LayerNorm over the feature axis.

inline constexpr double kLayerNormEps = 1e-6;

struct NormSlots {
  TensorSlot gain;
  TensorSlot shift;
};

inline NormSlots add_norm(ParamLayout& layout, const std::string& name, Index dim) {
  return {layout.add(name + ".gain", 1, dim, false), layout.add(name + ".shift", 1, dim, false)};
}

template <typename Scalar>
struct NormCache {
  Matrix<Scalar> xhat;
  Vector<Scalar> rstd;
};

template <typename Scalar>
Matrix<Scalar> norm_forward(const NormSlots& n, const Vector<Scalar>& p, const Matrix<Scalar>& x,
                            std::type_identity_t<NormCache<Scalar>>* cache) {
  const Index cols = x.cols();
  const Vector<Scalar> mean = x.rowwise().mean();
  Matrix<Scalar> xhat = x.colwise() - mean;
  const Vector<Scalar> var = xhat.array().square().rowwise().sum() / static_cast<Scalar>(cols);
  const Vector<Scalar> rstd = (var.array() + static_cast<Scalar>(kLayerNormEps)).rsqrt();
  xhat = rstd.asDiagonal() * xhat;
  Matrix<Scalar> y = xhat.array().rowwise() * row_view(p, n.gain).array();
  y.rowwise() += row_view(p, n.shift);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = rstd;
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> norm_backward(const NormSlots& n, const Vector<Scalar>& p, const NormCache<Scalar>& c,
                             const Matrix<Scalar>& dy, Vector<Scalar>& grad) {
  row_view(grad, n.gain) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  row_view(grad, n.shift) += dy.colwise().sum();
  const Matrix<Scalar> dxhat = dy.array().rowwise() * row_view(p, n.gain).array();
  const auto cols = static_cast<Scalar>(dy.cols());
  const Vector<Scalar> mean_dxhat = dxhat.rowwise().sum() / cols;
  const Vector<Scalar> mean_dxhat_xhat = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix() / cols;
  Matrix<Scalar> dx = dxhat;
  dx.colwise() -= mean_dxhat;
  dx -= mean_dxhat_xhat.asDiagonal() * c.xhat;
  return c.rstd.asDiagonal() * dx;
}

// ---------------------------------------------------------------------------------------
// GELU (erf form).

template <typename Scalar>
Matrix<Scalar> gelu(const Matrix<Scalar>& x) {
  const Scalar inv_sqrt2 = static_cast<Scalar>(1.0 / std::numbers::sqrt2);
  return x.unaryExpr([inv_sqrt2](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
}

template <typename Scalar>
Matrix<Scalar> gelu_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& dy) {
  const Scalar inv_sqrt2 = static_cast<Scalar>(1.0 / std::numbers::sqrt2);
  const Scalar inv_sqrt2pi = static_cast<Scalar>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  Matrix<Scalar> d = x.unaryExpr([=](Scalar v) {
    return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
  });
  return d.cwiseProduct(dy);
}

// ---------------------------------------------------------------------------------------
// Multi-head self-attention.

struct AttentionSlots {
  LinearSlots query, key, value, out;
  Index heads = 1;
};

inline AttentionSlots add_attention(ParamLayout& layout, const std::string& name, Index dim, Index heads) {
  AttentionSlots a;
  a.query = add_linear(layout, name + ".query", dim, dim);
  a.key = add_linear(layout, name + ".key", dim, dim);
  a.value = add_linear(layout, name + ".value", dim, dim);
  a.out = add_linear(layout, name + ".out", dim, dim);
  a.heads = heads;
  return a;
}

template <typename Scalar>
struct AttentionCache {
  Matrix<Scalar> input, q, k, v, context;
  std::vector<Matrix<Scalar>> probs;  // one (tokens x tokens) matrix per head
};

template <typename Scalar>
void softmax_rows(Matrix<Scalar>& s) {
  for (Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
}

template <typename Scalar>
Matrix<Scalar> attention_forward(const AttentionSlots& a, const Vector<Scalar>& p, const Matrix<Scalar>& x,
                                 std::type_identity_t<AttentionCache<Scalar>>* cache) {
  const Index tokens = x.rows();
  const Index dim = x.cols();
  const Index hd = dim / a.heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  Matrix<Scalar> q = linear_forward(a.query, p, x);
  Matrix<Scalar> k = linear_forward(a.key, p, x);
  Matrix<Scalar> v = linear_forward(a.value, p, x);
  Matrix<Scalar> context(tokens, dim);
  std::vector<Matrix<Scalar>> probs;
  if (cache) probs.reserve(static_cast<std::size_t>(a.heads));
  for (Index h = 0; h < a.heads; ++h) {
    Matrix<Scalar> s = (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose()) * scale;
    softmax_rows(s);
    context.middleCols(h * hd, hd).noalias() = s * v.middleCols(h * hd, hd);
    if (cache) probs.push_back(std::move(s));
  }
  Matrix<Scalar> y = linear_forward(a.out, p, context);
  if (cache) {
    cache->input = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->context = std::move(context);
    cache->probs = std::move(probs);
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> attention_backward(const AttentionSlots& a, const Vector<Scalar>& p, const AttentionCache<Scalar>& c,
                                  const Matrix<Scalar>& dy, Vector<Scalar>& grad) {
  const Index tokens = c.input.rows();
  const Index dim = c.input.cols();
  const Index hd = dim / a.heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  const Matrix<Scalar> dcontext = linear_backward(a.out, p, c.context, dy, grad);
  Matrix<Scalar> dq(tokens, dim), dk(tokens, dim), dv(tokens, dim);
  for (Index h = 0; h < a.heads; ++h) {
    const Matrix<Scalar>& prob = c.probs[static_cast<std::size_t>(h)];
    const auto dctx_h = dcontext.middleCols(h * hd, hd);
    dv.middleCols(h * hd, hd).noalias() = prob.transpose() * dctx_h;
    Matrix<Scalar> dprob = dctx_h * c.v.middleCols(h * hd, hd).transpose();
    const Vector<Scalar> row_dot = (dprob.array() * prob.array()).rowwise().sum().matrix();
    Matrix<Scalar> ds = prob.array() * (dprob.colwise() - row_dot).array();
    ds *= scale;
    dq.middleCols(h * hd, hd).noalias() = ds * c.k.middleCols(h * hd, hd);
    dk.middleCols(h * hd, hd).noalias() = ds.transpose() * c.q.middleCols(h * hd, hd);
  }
  Matrix<Scalar> dx = linear_backward(a.query, p, c.input, dq, grad);
  dx += linear_backward(a.key, p, c.input, dk, grad);
  dx += linear_backward(a.value, p, c.input, dv, grad);
  return dx;
}

// ---------------------------------------------------------------------------------------
// Pre-norm transformer block: x + attn(norm(x)), then + mlp(norm(.)).

struct BlockSlots {
  NormSlots norm1;
  AttentionSlots attn;
  NormSlots norm2;
  LinearSlots fc1, fc2;
};

inline BlockSlots add_block(ParamLayout& layout, const std::string& name, Index dim, Index heads, Index mlp_ratio) {
  BlockSlots b;
  b.norm1 = add_norm(layout, name + ".norm1", dim);
  b.attn = add_attention(layout, name + ".attn", dim, heads);
  b.norm2 = add_norm(layout, name + ".norm2", dim);
  b.fc1 = add_linear(layout, name + ".mlp.fc1", dim, dim * mlp_ratio);
  b.fc2 = add_linear(layout, name + ".mlp.fc2", dim * mlp_ratio, dim);
  return b;
}

template <typename Scalar>
struct BlockCache {
  NormCache<Scalar> norm1;
  AttentionCache<Scalar> attn;
  NormCache<Scalar> norm2;
  Matrix<Scalar> mlp_in;   // norm2 output
  Matrix<Scalar> hidden;   // fc1 output, pre-activation
  Matrix<Scalar> act;      // gelu(hidden)
};

template <typename Scalar>
Matrix<Scalar> block_forward(const BlockSlots& b, const Vector<Scalar>& p, const Matrix<Scalar>& x,
                             std::type_identity_t<BlockCache<Scalar>>* cache) {
  Matrix<Scalar> a = norm_forward(b.norm1, p, x, cache ? &cache->norm1 : nullptr);
  Matrix<Scalar> x1 = x + attention_forward(b.attn, p, a, cache ? &cache->attn : nullptr);
  Matrix<Scalar> m = norm_forward(b.norm2, p, x1, cache ? &cache->norm2 : nullptr);
  Matrix<Scalar> hidden = linear_forward(b.fc1, p, m);
  Matrix<Scalar> act = gelu(hidden);
  x1 += linear_forward(b.fc2, p, act);
  if (cache) {
    cache->mlp_in = std::move(m);
    cache->hidden = std::move(hidden);
    cache->act = std::move(act);
  }
  return x1;
}

template <typename Scalar>
Matrix<Scalar> block_backward(const BlockSlots& b, const Vector<Scalar>& p, const BlockCache<Scalar>& c,
                              const Matrix<Scalar>& dy, Vector<Scalar>& grad) {
  const Matrix<Scalar> dact = linear_backward(b.fc2, p, c.act, dy, grad);
  const Matrix<Scalar> dhidden = gelu_backward(c.hidden, dact);
  const Matrix<Scalar> dm = linear_backward(b.fc1, p, c.mlp_in, dhidden, grad);
  Matrix<Scalar> dx1 = dy + norm_backward(b.norm2, p, c.norm2, dm, grad);
  const Matrix<Scalar> da = attention_backward(b.attn, p, c.attn, dx1, grad);
  dx1 += norm_backward(b.norm1, p, c.norm1, da, grad);
  return dx1;
}

/// Fixed 2-D sine/cosine table for a grid x grid patch layout (rows = patch index, row-major grid).
/// The first half of the features encodes the grid row (time), the second half the column (frequency).
template <typename Scalar>
Matrix<Scalar> sincos_position_table(Index grid, Index dim) {
  if (dim % 4 != 0) throw ConfigError("positional table width must be divisible by 4");
  const Index quarter = dim / 4;
  Matrix<Scalar> table(grid * grid, dim);
  for (Index r = 0; r < grid; ++r) {
    for (Index c = 0; c < grid; ++c) {
      const Index row = r * grid + c;
      for (Index i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
        table(row, i) = static_cast<Scalar>(std::sin(r * omega));
        table(row, quarter + i) = static_cast<Scalar>(std::cos(r * omega));
        table(row, 2 * quarter + i) = static_cast<Scalar>(std::sin(c * omega));
        table(row, 3 * quarter + i) = static_cast<Scalar>(std::cos(c * omega));
      }
    }
  }
  return table;
}

}  // namespace shmfm
