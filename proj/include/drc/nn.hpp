#pragma once

// Layer arithmetic with hand-written reverse mode: layer normalization,
// single-head scaled dot-product attention, GELU feed-forward, and the
// post-norm attention+feed-forward layer shared by the towers and the mask
// generator. Every backward accumulates into a gradient struct of the same
// type as the weights and returns input gradients.

#include "drc/core.hpp"

#include <limits>
#include <utility>

namespace drc::nn {

inline constexpr double kLnEps = 1e-5;

// ----------------------------------------------------------------------------
// Layer normalization
// ----------------------------------------------------------------------------

template <class T>
struct LayerNormW {
  using Scalar = T;
  RowVec<T> gain, offset;

  LayerNormW() = default;
  explicit LayerNormW(int d) : gain(RowVec<T>::Ones(d)), offset(RowVec<T>::Zero(d)) {}

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("gain", s.gain);
    f("offset", s.offset);
  }
};

template <class T>
struct LnCache {
  Mat<T> xhat;
  ColVec<T> rstd;
};

template <class T>
Mat<T> layer_norm(const LayerNormW<T>& w, const Mat<T>& x, LnCache<T>* cache = nullptr) {
  const Eigen::Index n = x.rows();
  Mat<T> xhat(n, x.cols());
  ColVec<T> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const auto centered = (x.row(i).array() - mean).eval();
    const T var = centered.square().mean();
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    xhat.row(i) = centered * r;
    rstd(i) = r;
  }
  Mat<T> y = (xhat.array().rowwise() * w.gain.array()).rowwise() + w.offset.array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <class T>
Mat<T> layer_norm_backward(const LayerNormW<T>& w, const LnCache<T>& c, const Mat<T>& dy, LayerNormW<T>& g) {
  g.gain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.offset += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * w.gain.array();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T m1 = dxhat.row(i).mean();
    const T m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

// ----------------------------------------------------------------------------
// Single-head attention: out = softmax(Xq Wq (Xkv Wk)^T / sqrt(d)) Xkv Wv Wo
// ----------------------------------------------------------------------------

template <class T>
struct AttentionW {
  using Scalar = T;
  Mat<T> wq, wk, wv, wo;  // d x d, no biases

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("wq", s.wq);
    f("wk", s.wk);
    f("wv", s.wv);
    f("wo", s.wo);
  }
};

template <class T>
AttentionW<T> make_attention(int d, Rng& rng, double out_scale = 1.0) {
  AttentionW<T> w;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (Mat<T>* m : {&w.wq, &w.wk, &w.wv, &w.wo}) m->resize(d, d);
  init_normal(w.wq, rng, s);
  init_normal(w.wk, rng, s);
  init_normal(w.wv, rng, s);
  init_normal(w.wo, rng, s * out_scale);
  return w;
}

template <class T>
struct AttnCache {
  Mat<T> xq, xkv, q, k, v, a, c;
};

template <class T>
void softmax_rows_inplace(Mat<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const T m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
}

template <class T>
Mat<T> attention(const AttentionW<T>& w, const Mat<T>& xq, const Mat<T>& xkv, bool causal,
                 AttnCache<T>* cache = nullptr) {
  require(xq.cols() == w.wq.rows() && xkv.cols() == w.wk.rows(), "attention: width mismatch");
  const T scale = T(1) / std::sqrt(static_cast<T>(w.wq.cols()));
  Mat<T> q = xq * w.wq;
  Mat<T> k = xkv * w.wk;
  Mat<T> v = xkv * w.wv;
  Mat<T> a = (q * k.transpose()) * scale;
  if (causal) {
    require(xq.rows() == xkv.rows(), "causal attention requires a shared sequence");
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = i + 1; j < a.cols(); ++j) a(i, j) = -std::numeric_limits<T>::infinity();
  }
  softmax_rows_inplace(a);
  Mat<T> c = a * v;
  Mat<T> out = c * w.wo;
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->a = std::move(a);
    cache->c = std::move(c);
  }
  return out;
}

// Returns (d xq, d xkv).
template <class T>
std::pair<Mat<T>, Mat<T>> attention_backward(const AttentionW<T>& w, const AttnCache<T>& c, const Mat<T>& dout,
                                             AttentionW<T>& g) {
  const T scale = T(1) / std::sqrt(static_cast<T>(w.wq.cols()));
  g.wo.noalias() += c.c.transpose() * dout;
  const Mat<T> dc = dout * w.wo.transpose();
  const Mat<T> da = dc * c.v.transpose();
  const Mat<T> dv = c.a.transpose() * dc;
  Mat<T> ds = c.a.array() * (da.array().colwise() - (da.array() * c.a.array()).rowwise().sum());
  ds *= scale;
  const Mat<T> dq = ds * c.k;
  const Mat<T> dk = ds.transpose() * c.q;
  g.wq.noalias() += c.xq.transpose() * dq;
  g.wk.noalias() += c.xkv.transpose() * dk;
  g.wv.noalias() += c.xkv.transpose() * dv;
  Mat<T> dxq = dq * w.wq.transpose();
  Mat<T> dxkv = dk * w.wk.transpose();
  dxkv.noalias() += dv * w.wv.transpose();
  return {std::move(dxq), std::move(dxkv)};
}

// ----------------------------------------------------------------------------
// Feed-forward: gelu(X W1 + b1) W2 + b2 (tanh-form GELU)
// ----------------------------------------------------------------------------

template <class T>
struct FeedForwardW {
  using Scalar = T;
  Mat<T> w1;
  RowVec<T> b1;
  Mat<T> w2;
  RowVec<T> b2;

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("w1", s.w1);
    f("b1", s.b1);
    f("w2", s.w2);
    f("b2", s.b2);
  }
};

template <class T>
FeedForwardW<T> make_feed_forward(int d, int hidden, Rng& rng, double out_scale = 1.0) {
  FeedForwardW<T> w;
  w.w1.resize(d, hidden);
  w.w2.resize(hidden, d);
  init_normal(w.w1, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  init_normal(w.w2, rng, out_scale / std::sqrt(static_cast<double>(hidden)));
  w.b1 = RowVec<T>::Zero(hidden);
  w.b2 = RowVec<T>::Zero(d);
  return w;
}

template <class T>
struct FfnCache {
  Mat<T> x, pre, act;
};

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

template <class T>
Mat<T> feed_forward(const FeedForwardW<T>& w, const Mat<T>& x, FfnCache<T>* cache = nullptr) {
  require(x.cols() == w.w1.rows(), "feed_forward: width mismatch");
  Mat<T> pre = (x * w.w1).rowwise() + w.b1;
  const T c = static_cast<T>(detail::kGeluC), a = static_cast<T>(detail::kGeluA);
  Mat<T> act = (T(0.5) * pre.array() * (T(1) + (c * (pre.array() + a * pre.array().cube())).tanh())).matrix();
  Mat<T> out = (act * w.w2).rowwise() + w.b2;
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

template <class T>
Mat<T> feed_forward_backward(const FeedForwardW<T>& w, const FfnCache<T>& c, const Mat<T>& dout, FeedForwardW<T>& g) {
  g.w2.noalias() += c.act.transpose() * dout;
  g.b2 += dout.colwise().sum();
  const Mat<T> dact = dout * w.w2.transpose();
  const T cc = static_cast<T>(detail::kGeluC), a = static_cast<T>(detail::kGeluA);
  const auto x = c.pre.array();
  const auto t = (cc * (x + a * x.cube())).tanh().eval();
  const auto dgelu = (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t.square()) * cc * (T(1) + T(3) * a * x.square())).eval();
  const Mat<T> dpre = (dact.array() * dgelu).matrix();
  g.w1.noalias() += c.x.transpose() * dpre;
  g.b1 += dpre.colwise().sum();
  return dpre * w.w1.transpose();
}

// ----------------------------------------------------------------------------
// Post-norm attention layer:
//   h   = LN1(q + Attn(q, kv))
//   out = LN2(h + FFN(h))
// ----------------------------------------------------------------------------

template <class T>
struct TowerW {
  using Scalar = T;
  AttentionW<T> attn;
  LayerNormW<T> ln1;
  FeedForwardW<T> ffn;
  LayerNormW<T> ln2;

  int width() const { return static_cast<int>(attn.wq.rows()); }

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("attn", s.attn);
    f("ln1", s.ln1);
    f("ffn", s.ffn);
    f("ln2", s.ln2);
  }
};

template <class T>
TowerW<T> make_tower(int d, int ffn_mult, Rng& rng) {
  TowerW<T> w;
  w.attn = make_attention<T>(d, rng);
  w.ln1 = LayerNormW<T>(d);
  w.ffn = make_feed_forward<T>(d, ffn_mult * d, rng);
  w.ln2 = LayerNormW<T>(d);
  return w;
}

template <class T>
struct TowerCache {
  AttnCache<T> attn;
  LnCache<T> ln1;
  FfnCache<T> ffn;
  LnCache<T> ln2;
};

template <class T>
Mat<T> tower_forward(const TowerW<T>& w, const Mat<T>& q, const Mat<T>& kv, TowerCache<T>* cache = nullptr) {
  const Mat<T> a = attention(w.attn, q, kv, false, cache ? &cache->attn : nullptr);
  const Mat<T> h = layer_norm(w.ln1, Mat<T>(q + a), cache ? &cache->ln1 : nullptr);
  const Mat<T> f = feed_forward(w.ffn, h, cache ? &cache->ffn : nullptr);
  return layer_norm(w.ln2, Mat<T>(h + f), cache ? &cache->ln2 : nullptr);
}

// Returns (d q, d kv).
template <class T>
std::pair<Mat<T>, Mat<T>> tower_backward(const TowerW<T>& w, const TowerCache<T>& c, const Mat<T>& dout, TowerW<T>& g) {
  const Mat<T> dz2 = layer_norm_backward(w.ln2, c.ln2, dout, g.ln2);
  const Mat<T> dh = dz2 + feed_forward_backward(w.ffn, c.ffn, dz2, g.ffn);
  const Mat<T> dz1 = layer_norm_backward(w.ln1, c.ln1, dh, g.ln1);
  auto [dq, dkv] = attention_backward(w.attn, c.attn, dz1, g.attn);
  dq += dz1;
  return {std::move(dq), std::move(dkv)};
}

// Row-wise log-sum-exp.
template <class T>
ColVec<T> logsumexp_rows(const Mat<T>& x) {
  ColVec<T> out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T m = x.row(i).maxCoeff();
    out(i) = m + std::log((x.row(i).array() - m).exp().sum());
  }
  return out;
}

template <class T>
Mat<T> vstack(const Mat<T>& a, const Mat<T>& b) {
  require(a.cols() == b.cols(), "vstack: width mismatch");
  Mat<T> out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  return out;
}

}  // namespace drc::nn
