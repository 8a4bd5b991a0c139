#pragma once

// Style and semantic towers. Each tower is one post-norm cross-attention +
// feed-forward layer; learned positional encodings are added on the query
// side only. The MLP variant maps every token independently.

#include "drc/nn.hpp"

namespace drc {

enum class DisentanglerKind { attention, mlp };
enum class TowerId { style, semantic };

inline const char* to_string(DisentanglerKind k) { return k == DisentanglerKind::attention ? "attention" : "mlp"; }

// Per-token map used by the MLP ablation: LN(x + FFN(x)).
template <class T>
struct TokenMlpW {
  using Scalar = T;
  nn::FeedForwardW<T> ffn;
  nn::LayerNormW<T> ln;

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("ffn", s.ffn);
    f("ln", s.ln);
  }
};

template <class T>
struct DisentanglerW {
  using Scalar = T;
  DisentanglerKind kind = DisentanglerKind::attention;
  nn::TowerW<T> sty, sem;
  Mat<T> pos_sty, pos_sem;  // L x d, query side only
  TokenMlpW<T> mlp_sty, mlp_sem;

  const nn::TowerW<T>& tower(TowerId id) const { return id == TowerId::style ? sty : sem; }
  nn::TowerW<T>& tower(TowerId id) { return id == TowerId::style ? sty : sem; }
  const Mat<T>& pos(TowerId id) const { return id == TowerId::style ? pos_sty : pos_sem; }
  Mat<T>& pos(TowerId id) { return id == TowerId::style ? pos_sty : pos_sem; }
  const TokenMlpW<T>& mlp(TowerId id) const { return id == TowerId::style ? mlp_sty : mlp_sem; }
  TokenMlpW<T>& mlp(TowerId id) { return id == TowerId::style ? mlp_sty : mlp_sem; }

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    if (s.kind == DisentanglerKind::attention) {
      f("sty", s.sty);
      f("sem", s.sem);
      f("pos_sty", s.pos_sty);
      f("pos_sem", s.pos_sem);
    } else {
      f("mlp_sty", s.mlp_sty);
      f("mlp_sem", s.mlp_sem);
    }
  }
};

template <class T>
DisentanglerW<T> make_disentangler(DisentanglerKind kind, int d, int seq_len, int ffn_mult, Rng& rng) {
  DisentanglerW<T> w;
  w.kind = kind;
  if (kind == DisentanglerKind::attention) {
    w.sty = nn::make_tower<T>(d, ffn_mult, rng);
    w.sem = nn::make_tower<T>(d, ffn_mult, rng);
    w.pos_sty.resize(seq_len, d);
    w.pos_sem.resize(seq_len, d);
    init_normal(w.pos_sty, rng, 0.02);
    init_normal(w.pos_sem, rng, 0.02);
  } else {
    for (TokenMlpW<T>* m : {&w.mlp_sty, &w.mlp_sem}) {
      m->ffn = nn::make_feed_forward<T>(d, ffn_mult * d, rng);
      m->ln = nn::LayerNormW<T>(d);
    }
  }
  return w;
}

// ----------------------------------------------------------------------------
// Raw tower arithmetic
// ----------------------------------------------------------------------------

template <class T>
Mat<T> tower_cross(const nn::TowerW<T>& tower, const Mat<T>& q, const Mat<T>& kv, nn::TowerCache<T>* cache = nullptr) {
  require(q.cols() == tower.width() && kv.cols() == tower.width(),
          "tower_cross: embedding width " + std::to_string(q.cols()) + "/" + std::to_string(kv.cols()) +
              " does not match tower width " + std::to_string(tower.width()));
  require(q.rows() >= 1 && kv.rows() >= 1, "tower_cross: empty sequence");
  return nn::tower_forward(tower, q, kv, cache);
}

template <class T>
struct TokenMlpCache {
  nn::FfnCache<T> ffn;
  nn::LnCache<T> ln;
};

template <class T>
Mat<T> token_mlp(const TokenMlpW<T>& w, const Mat<T>& x, TokenMlpCache<T>* cache = nullptr) {
  require(x.cols() == w.ffn.w1.rows(), "token_mlp: width mismatch");
  const Mat<T> f = nn::feed_forward(w.ffn, x, cache ? &cache->ffn : nullptr);
  return nn::layer_norm(w.ln, Mat<T>(x + f), cache ? &cache->ln : nullptr);
}

template <class T>
Mat<T> token_mlp_backward(const TokenMlpW<T>& w, const TokenMlpCache<T>& c, const Mat<T>& dout, TokenMlpW<T>& g) {
  const Mat<T> dz = nn::layer_norm_backward(w.ln, c.ln, dout, g.ln);
  return dz + nn::feed_forward_backward(w.ffn, c.ffn, dz, g.ffn);
}

// ----------------------------------------------------------------------------
// Extraction through a disentangler (dispatches on kind)
// ----------------------------------------------------------------------------

template <class T>
struct ExtractCache {
  TowerId id = TowerId::style;
  nn::TowerCache<T> tower;
  TokenMlpCache<T> mlp;
};

template <class T>
Mat<T> extract(const DisentanglerW<T>& w, TowerId id, const Mat<T>& q_emb, const Mat<T>& kv_emb,
               ExtractCache<T>* cache = nullptr) {
  if (cache) cache->id = id;
  if (w.kind == DisentanglerKind::mlp) return token_mlp(w.mlp(id), q_emb, cache ? &cache->mlp : nullptr);
  const Mat<T>& pos = w.pos(id);
  require(q_emb.rows() == pos.rows(), "extract: query length " + std::to_string(q_emb.rows()) +
                                          " does not match positional table " + std::to_string(pos.rows()));
  require(q_emb.cols() == pos.cols(), "extract: width mismatch");
  return tower_cross(w.tower(id), Mat<T>(q_emb + pos), kv_emb, cache ? &cache->tower : nullptr);
}

// Returns (d q_emb, d kv_emb). For the MLP variant d kv_emb is zero-sized.
template <class T>
std::pair<Mat<T>, Mat<T>> extract_backward(const DisentanglerW<T>& w, const ExtractCache<T>& c, const Mat<T>& dout,
                                           DisentanglerW<T>& g) {
  if (w.kind == DisentanglerKind::mlp) return {token_mlp_backward(w.mlp(c.id), c.mlp, dout, g.mlp(c.id)), Mat<T>()};
  auto res = nn::tower_backward(w.tower(c.id), c.tower, dout, g.tower(c.id));
  g.pos(c.id) += res.first;
  return res;
}

template <class T>
Mat<T> extract_self(const DisentanglerW<T>& w, TowerId id, const Mat<T>& emb, ExtractCache<T>* cache = nullptr) {
  return extract(w, id, emb, emb, cache);
}

template <class T>
Mat<T> extract_self_backward(const DisentanglerW<T>& w, const ExtractCache<T>& c, const Mat<T>& dout,
                             DisentanglerW<T>& g) {
  auto [dq, dkv] = extract_backward(w, c, dout, g);
  if (dkv.size() != 0) dq += dkv;
  return dq;
}

// Stage-1 features of one triplet.
template <class T>
struct TripletFeatures {
  Mat<T> a_sty, s_sty, a_sem, m_sem;
};

template <class T>
struct TripletFeatureCache {
  ExtractCache<T> a_sty, s_sty, a_sem, m_sem;
};

template <class T>
TripletFeatures<T> extract_triplet_features(const DisentanglerW<T>& w, const Mat<T>& Ea, const Mat<T>& Es,
                                            const Mat<T>& Em, TripletFeatureCache<T>* cache = nullptr) {
  require(Ea.rows() == Es.rows() && Ea.rows() == Em.rows(), "extract_triplet_features: sequence lengths differ");
  TripletFeatures<T> f;
  f.a_sty = extract(w, TowerId::style, Ea, Es, cache ? &cache->a_sty : nullptr);
  f.s_sty = extract(w, TowerId::style, Es, Ea, cache ? &cache->s_sty : nullptr);
  f.a_sem = extract(w, TowerId::semantic, Ea, Em, cache ? &cache->a_sem : nullptr);
  f.m_sem = extract(w, TowerId::semantic, Em, Ea, cache ? &cache->m_sem : nullptr);
  return f;
}

template <class T>
std::pair<Mat<T>, Mat<T>> mlp_disentangle(const DisentanglerW<T>& w, const Mat<T>& emb) {
  require(w.kind == DisentanglerKind::mlp, "mlp_disentangle: disentangler is not the MLP variant");
  return {token_mlp(w.mlp_sty, emb), token_mlp(w.mlp_sem, emb)};
}

}  // namespace drc
