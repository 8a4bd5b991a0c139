#pragma once

// Fusion of a (style, semantic) feature pair into M latent rows.
//   u = LN(sty + CA(sty, sem)),  v = LN(sem + CA(sem, sty))
//   out = LN(Q + Attn(Q, [u; v]))          Q: M learned query rows
// The concat variant skips the two cross-attention branches and instead adds a
// learned segment row to each side, so the pooled result knows which rows are
// style and which are semantics.

#include "drc/nn.hpp"

namespace drc {

enum class FusionKind { full, concat };

inline const char* to_string(FusionKind k) { return k == FusionKind::full ? "full" : "concat"; }

template <class T>
struct FusionW {
  using Scalar = T;
  FusionKind kind = FusionKind::full;
  nn::AttentionW<T> u_attn, v_attn;
  nn::LayerNormW<T> u_ln, v_ln;
  RowVec<T> seg_sty, seg_sem;  // concat only
  Mat<T> queries;  // M x d
  nn::AttentionW<T> pool;
  nn::LayerNormW<T> out_ln;

  int latent_rows() const { return static_cast<int>(queries.rows()); }

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    if (s.kind == FusionKind::full) {
      f("u_attn", s.u_attn);
      f("u_ln", s.u_ln);
      f("v_attn", s.v_attn);
      f("v_ln", s.v_ln);
    } else {
      f("seg_sty", s.seg_sty);
      f("seg_sem", s.seg_sem);
    }
    f("queries", s.queries);
    f("pool", s.pool);
    f("out_ln", s.out_ln);
  }
};

template <class T>
FusionW<T> make_fusion(FusionKind kind, int d, int M, Rng& rng) {
  require(M >= 1, "make_fusion: M must be >= 1");
  FusionW<T> w;
  w.kind = kind;
  if (kind == FusionKind::full) {
    w.u_attn = nn::make_attention<T>(d, rng);
    w.v_attn = nn::make_attention<T>(d, rng);
    w.u_ln = nn::LayerNormW<T>(d);
    w.v_ln = nn::LayerNormW<T>(d);
  } else {
    w.seg_sty.resize(d);
    w.seg_sem.resize(d);
    init_normal(w.seg_sty, rng, 1.0);
    init_normal(w.seg_sem, rng, 1.0);
  }
  w.queries.resize(M, d);
  init_normal(w.queries, rng, 1.0);
  w.pool = nn::make_attention<T>(d, rng);
  w.out_ln = nn::LayerNormW<T>(d);
  return w;
}

template <class T>
struct FusionCache {
  nn::AttnCache<T> u_attn, v_attn, pool;
  nn::LnCache<T> u_ln, v_ln, out_ln;
  Eigen::Index sty_rows = 0;
};

namespace detail {

template <class T>
Mat<T> pool_rows(const FusionW<T>& w, const Mat<T>& fused, FusionCache<T>* c) {
  const Mat<T> a = nn::attention(w.pool, w.queries, fused, false, c ? &c->pool : nullptr);
  return nn::layer_norm(w.out_ln, Mat<T>(w.queries + a), c ? &c->out_ln : nullptr);
}

// Returns d fused; accumulates query and pooling gradients.
template <class T>
Mat<T> pool_rows_backward(const FusionW<T>& w, const FusionCache<T>& c, const Mat<T>& dout, FusionW<T>& g) {
  const Mat<T> dz = nn::layer_norm_backward(w.out_ln, c.out_ln, dout, g.out_ln);
  auto [dq, dfused] = nn::attention_backward(w.pool, c.pool, dz, g.pool);
  g.queries += dq + dz;
  return dfused;
}

}  // namespace detail

template <class T>
Mat<T> fuse(const FusionW<T>& w, const Mat<T>& sty, const Mat<T>& sem, FusionCache<T>* cache = nullptr) {
  const auto d = w.queries.cols();
  require(sty.cols() == d && sem.cols() == d, "fuse: feature width does not match fusion width " + std::to_string(d));
  require(sty.rows() >= 1 && sem.rows() >= 1, "fuse: empty feature matrix");
  if (cache) cache->sty_rows = sty.rows();
  if (w.kind == FusionKind::concat)
    return detail::pool_rows(w, nn::vstack(Mat<T>(sty.rowwise() + w.seg_sty), Mat<T>(sem.rowwise() + w.seg_sem)), cache);
  const Mat<T> cu = nn::attention(w.u_attn, sty, sem, false, cache ? &cache->u_attn : nullptr);
  const Mat<T> u = nn::layer_norm(w.u_ln, Mat<T>(sty + cu), cache ? &cache->u_ln : nullptr);
  const Mat<T> cv = nn::attention(w.v_attn, sem, sty, false, cache ? &cache->v_attn : nullptr);
  const Mat<T> v = nn::layer_norm(w.v_ln, Mat<T>(sem + cv), cache ? &cache->v_ln : nullptr);
  return detail::pool_rows(w, nn::vstack(u, v), cache);
}

template <class T>
Mat<T> concat_fuse(const FusionW<T>& w, const Mat<T>& sty, const Mat<T>& sem, FusionCache<T>* cache = nullptr) {
  require(w.kind == FusionKind::concat, "concat_fuse: weights are not the concat variant");
  return fuse(w, sty, sem, cache);
}

// Returns (d sty, d sem).
template <class T>
std::pair<Mat<T>, Mat<T>> fuse_backward(const FusionW<T>& w, const FusionCache<T>& c, const Mat<T>& dout,
                                        FusionW<T>& g) {
  const Mat<T> dfused = detail::pool_rows_backward(w, c, dout, g);
  const auto ns = c.sty_rows;
  const auto nm = dfused.rows() - ns;
  if (w.kind == FusionKind::concat) {
    g.seg_sty += dfused.topRows(ns).colwise().sum();
    g.seg_sem += dfused.bottomRows(nm).colwise().sum();
    return {dfused.topRows(ns), dfused.bottomRows(nm)};
  }

  const Mat<T> dzu = nn::layer_norm_backward(w.u_ln, c.u_ln, Mat<T>(dfused.topRows(ns)), g.u_ln);
  const Mat<T> dzv = nn::layer_norm_backward(w.v_ln, c.v_ln, Mat<T>(dfused.bottomRows(nm)), g.v_ln);
  auto [du_q, du_kv] = nn::attention_backward(w.u_attn, c.u_attn, dzu, g.u_attn);  // q = sty, kv = sem
  auto [dv_q, dv_kv] = nn::attention_backward(w.v_attn, c.v_attn, dzv, g.v_attn);  // q = sem, kv = sty
  Mat<T> dsty = dzu + du_q + dv_kv;
  Mat<T> dsem = dzv + dv_q + du_kv;
  return {std::move(dsty), std::move(dsem)};
}

}  // namespace drc
