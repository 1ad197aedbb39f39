#pragma once

// Dense kernels with explicit backward passes. Activations are row-major
// (rows = tokens, stacked across the batch); weights map rows by X * W.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <type_traits>
#include <vector>

#include "pix2seq/rng.hpp"

namespace pix2seq {

template <class S>
using Tensor = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using ColVector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Y = X W + b, with b stored as a 1 x out row.
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  Tensor<S> y(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
  return y;
}

// Accumulates weight/bias gradients and returns dX.
template <class S>
Tensor<S> linear_backward(const Tensor<S>& dy, const Tensor<S>& x, const Tensor<S>& w, Tensor<S>& dw,
                          Tensor<S>& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  Tensor<S> dx(dy.rows(), w.rows());
  dx.noalias() = dy * w.transpose();
  return dx;
}

template <class S>
struct LayerNormParams {
  Tensor<S> gain;
  Tensor<S> bias;
};

template <class S>
struct LayerNormCache {
  Tensor<S> xhat;
  ColVector<S> rstd;
};

inline constexpr double kLayerNormEps = 1e-5;

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const LayerNormParams<S>& p, LayerNormCache<S>* cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  Tensor<S> xhat(n, d);
  ColVector<S> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().mean();
    rstd(i) = S(1) / std::sqrt(var + S(kLayerNormEps));
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  Tensor<S> y = (xhat.array().rowwise() * p.gain.row(0).array()).rowwise() + p.bias.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <class S>
Tensor<S> layer_norm_backward(const Tensor<S>& dy, const LayerNormParams<S>& p, const LayerNormCache<S>& cache,
                              LayerNormParams<S>& grad) {
  grad.gain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  grad.bias.row(0) += dy.colwise().sum();
  Tensor<S> dxhat = dy.array().rowwise() * p.gain.row(0).array();
  const auto d = static_cast<S>(dy.cols());
  Tensor<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const S mean_d = dxhat.row(i).sum() / d;
    const S mean_dx = dxhat.row(i).dot(cache.xhat.row(i)) / d;
    dx.row(i) = (dxhat.row(i).array() - mean_d - cache.xhat.row(i).array() * mean_dx) * cache.rstd(i);
  }
  return dx;
}

// tanh-approximated GELU.
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const auto v = x.array();
  Tensor<S> out = (S(0.5) * v * (S(1) + (c * (v + S(0.044715) * v.cube())).tanh())).matrix();
  return out;
}

template <class S>
Tensor<S> gelu_backward(const Tensor<S>& dy, const Tensor<S>& x) {
  const S c = static_cast<S>(0.7978845608028654);
  const auto v = x.array();
  const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t = (c * (v + S(0.044715) * v.cube())).tanh();
  Tensor<S> dx = ((S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t.square()) * c * (S(1) + S(3 * 0.044715) * v.square())) *
                  dy.array())
                     .matrix();
  return dx;
}

// In-place row softmax over the first `valid` columns; the rest become 0.
template <class Row>
void softmax_prefix(Row&& row, Eigen::Index valid) {
  using S = typename std::decay_t<Row>::Scalar;
  const S mx = row.head(valid).maxCoeff();
  S sum = 0;
  for (Eigen::Index j = 0; j < valid; ++j) {
    const S e = std::exp(row(j) - mx);
    row(j) = e;
    sum += e;
  }
  row.head(valid) /= sum;
  if (valid < row.size()) row.tail(row.size() - valid).setZero();
}

template <class S>
struct AttentionParams {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class S>
struct AttentionCache {
  Tensor<S> xq, xkv, q, k, v, concat;
  std::vector<Tensor<S>> probs;  // [batch * heads], each tq x tk
};

struct AttentionShape {
  Eigen::Index batch = 1;
  Eigen::Index tq = 1;
  Eigen::Index tk = 1;
  int heads = 1;
  bool causal = false;
};

// Multi-head attention over a batch stacked along rows: query rows
// [b*tq, (b+1)*tq) attend to key rows [b*tk, (b+1)*tk).
// `head_mean` (batch*tq x tk), when given, receives attention averaged over heads.
template <class S>
Tensor<S> attention(const Tensor<S>& xq, const Tensor<S>& xkv, const AttentionParams<S>& p, const AttentionShape& sh,
                    AttentionCache<S>* cache, Tensor<S>* head_mean = nullptr) {
  const Eigen::Index d = p.wq.cols();
  const Eigen::Index dh = d / sh.heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Tensor<S> q = linear(xq, p.wq, p.bq);
  Tensor<S> k = linear(xkv, p.wk, p.bk);
  Tensor<S> v = linear(xkv, p.wv, p.bv);
  Tensor<S> concat(xq.rows(), d);
  if (cache) cache->probs.resize(static_cast<std::size_t>(sh.batch * sh.heads));
  if (head_mean) head_mean->setZero(sh.batch * sh.tq, sh.tk);
  Tensor<S> probs(sh.tq, sh.tk);
  for (Eigen::Index b = 0; b < sh.batch; ++b) {
    for (int h = 0; h < sh.heads; ++h) {
      const auto qh = q.block(b * sh.tq, h * dh, sh.tq, dh);
      const auto kh = k.block(b * sh.tk, h * dh, sh.tk, dh);
      const auto vh = v.block(b * sh.tk, h * dh, sh.tk, dh);
      probs.noalias() = qh * kh.transpose();
      probs *= scale;
      for (Eigen::Index i = 0; i < sh.tq; ++i)
        softmax_prefix(probs.row(i), sh.causal ? std::min(i + 1, sh.tk) : sh.tk);
      concat.block(b * sh.tq, h * dh, sh.tq, dh).noalias() = probs * vh;
      if (head_mean) head_mean->middleRows(b * sh.tq, sh.tq) += probs / static_cast<S>(sh.heads);
      if (cache) cache->probs[static_cast<std::size_t>(b * sh.heads + h)] = probs;
    }
  }
  Tensor<S> out = linear(concat, p.wo, p.bo);
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
  }
  return out;
}

template <class S>
struct AttentionInputGrads {
  Tensor<S> dxq;
  Tensor<S> dxkv;
};

template <class S>
AttentionInputGrads<S> attention_backward(const Tensor<S>& dout, const AttentionParams<S>& p, const AttentionShape& sh,
                                          const AttentionCache<S>& c, AttentionParams<S>& g) {
  const Eigen::Index d = p.wq.cols();
  const Eigen::Index dh = d / sh.heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const Tensor<S> dconcat = linear_backward(dout, c.concat, p.wo, g.wo, g.bo);
  Tensor<S> dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
  Tensor<S> dp(sh.tq, sh.tk);
  for (Eigen::Index b = 0; b < sh.batch; ++b) {
    for (int h = 0; h < sh.heads; ++h) {
      const Tensor<S>& probs = c.probs[static_cast<std::size_t>(b * sh.heads + h)];
      const auto doh = dconcat.block(b * sh.tq, h * dh, sh.tq, dh);
      const auto qh = c.q.block(b * sh.tq, h * dh, sh.tq, dh);
      const auto kh = c.k.block(b * sh.tk, h * dh, sh.tk, dh);
      const auto vh = c.v.block(b * sh.tk, h * dh, sh.tk, dh);
      dv.block(b * sh.tk, h * dh, sh.tk, dh).noalias() = probs.transpose() * doh;
      dp.noalias() = doh * vh.transpose();
      // softmax backward: ds = p * (dp - rowsum(dp * p)); masked entries have p = 0.
      for (Eigen::Index i = 0; i < sh.tq; ++i) {
        const S dot = dp.row(i).dot(probs.row(i));
        dp.row(i) = (probs.row(i).array() * (dp.row(i).array() - dot)).matrix();
      }
      dp *= scale;
      dq.block(b * sh.tq, h * dh, sh.tq, dh).noalias() = dp * kh;
      dk.block(b * sh.tk, h * dh, sh.tk, dh).noalias() = dp.transpose() * qh;
    }
  }
  AttentionInputGrads<S> out;
  out.dxq = linear_backward(dq, c.xq, p.wq, g.wq, g.bq);
  out.dxkv = linear_backward(dk, c.xkv, p.wk, g.wk, g.bk);
  out.dxkv += linear_backward(dv, c.xkv, p.wv, g.wv, g.bv);
  return out;
}

template <class S>
struct FeedForwardParams {
  Tensor<S> w1, b1, w2, b2;
};

template <class S>
struct FeedForwardCache {
  Tensor<S> x, pre, act;
};

template <class S>
Tensor<S> feed_forward(const Tensor<S>& x, const FeedForwardParams<S>& p, FeedForwardCache<S>* cache) {
  Tensor<S> pre = linear(x, p.w1, p.b1);
  Tensor<S> act = gelu(pre);
  Tensor<S> out = linear(act, p.w2, p.b2);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

template <class S>
Tensor<S> feed_forward_backward(const Tensor<S>& dout, const FeedForwardParams<S>& p, const FeedForwardCache<S>& c,
                                FeedForwardParams<S>& g) {
  const Tensor<S> dact = linear_backward(dout, c.act, p.w2, g.w2, g.b2);
  const Tensor<S> dpre = gelu_backward(dact, c.pre);
  return linear_backward(dpre, c.x, p.w1, g.w1, g.b1);
}

// Elementwise multiplier on a residual branch combining dropout and
// per-sample stochastic depth. Empty when both rates are zero or in eval mode.
template <class S>
Tensor<S> make_branch_mask(Eigen::Index batch, Eigen::Index rows_per_sample, Eigen::Index cols, double dropout,
                           double drop_path, Rng* rng) {
  if (!rng || (dropout <= 0 && drop_path <= 0)) return {};
  Tensor<S> mask = Tensor<S>::Ones(batch * rows_per_sample, cols);
  for (Eigen::Index b = 0; b < batch; ++b) {
    if (drop_path > 0) {
      const S keep = rng->bernoulli(drop_path) ? S(0) : S(1 / (1 - drop_path));
      mask.middleRows(b * rows_per_sample, rows_per_sample) *= keep;
    }
  }
  if (dropout > 0) {
    const S inv = S(1 / (1 - dropout));
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] *= rng->bernoulli(dropout) ? S(0) : inv;
  }
  return mask;
}

}  // namespace pix2seq
