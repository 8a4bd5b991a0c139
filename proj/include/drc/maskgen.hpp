#pragma once

// Mask generator: a self-attention encoder over [F_1; ...; F_N; F_sem] with a
// shared scalar scoring head, per-image top-k binarization, and masked mean
// pooling of the history features. Gradients pass the hard bits straight
// through to the scores.

#include "drc/nn.hpp"

#include <algorithm>
#include <numeric>

namespace drc {

struct MaskConfig {
  double alpha_s = 0.2;
  double alpha_m = 0.0;

  void validate() const {
    require(alpha_s >= 0.0 && alpha_s <= 1.0, "alpha_s must lie in [0,1]");
    require(alpha_m >= 0.0 && alpha_m <= 1.0, "alpha_m must lie in [0,1]");
  }
};

// Rows kept for ratio alpha: (1 - alpha) * L rounded half-up.
inline int kept_rows(double alpha, int L) {
  require(alpha >= 0.0 && alpha <= 1.0, "mask ratio must lie in [0,1]");
  // The small slack absorbs representation error in grid values like 0.7.
  return static_cast<int>(std::floor((1.0 - alpha) * L + 0.5 + 1e-9));
}

inline constexpr int kSemanticMaskTag = -1;

struct MaskVector {
  std::vector<uint8_t> bits;
  double alpha = 0.0;
  int tag = kSemanticMaskTag;  // history index, or kSemanticMaskTag

  int ones() const { return static_cast<int>(std::count(bits.begin(), bits.end(), uint8_t{1})); }
};

// Top-k over one image's scores; ties go to the lower row index.
template <class Vec>
std::vector<uint8_t> top_k_bits(const Vec& scores, int keep) {
  const int n = static_cast<int>(scores.size());
  require(keep >= 0 && keep <= n, "top_k_bits: keep out of range");
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(scores[i]))) throw NumericError("mask score is not finite");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<uint8_t> bits(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < keep; ++i) bits[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
  return bits;
}

template <class T>
struct MaskGenW {
  using Scalar = T;
  nn::TowerW<T> enc;
  RowVec<T> score_w;  // d
  RowVec<T> score_b;  // 1

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("enc", s.enc);
    f("score_w", s.score_w);
    f("score_b", s.score_b);
  }
};

template <class T>
MaskGenW<T> make_maskgen(int d, int ffn_mult, Rng& rng) {
  MaskGenW<T> w;
  w.enc = nn::make_tower<T>(d, ffn_mult, rng);
  w.score_w.resize(d);
  init_normal(w.score_w, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  w.score_b = RowVec<T>::Zero(1);
  return w;
}

// Frozen bits and reference scores for the smooth surrogate used in
// gradient checks: m = bits + (s - s_ref).
template <class T>
struct MaskOverride {
  std::vector<std::vector<uint8_t>> style_bits;
  std::vector<uint8_t> sem_bits;
  ColVec<T> ref_scores;
};

template <class T>
struct MaskResult {
  std::vector<MaskVector> style;
  MaskVector sem;
  ColVec<T> scores;                // (N+1)L, history blocks then semantic block
  std::vector<ColVec<T>> style_m;  // real-valued masks entering the product
  ColVec<T> sem_m;
};

template <class T>
struct MaskGenCache {
  Mat<T> hidden;
  nn::TowerCache<T> enc;
  T sem_scale = T(1);
};

// Scores every row of [F_1; ...; F_N; (1 - alpha_m) F_sem] jointly. The
// semantic rows enter scaled by (1 - alpha_m) so a fully masked reference
// cannot influence the style masks either.
template <class T>
MaskResult<T> generate_masks(const MaskGenW<T>& w, const std::vector<Mat<T>>& F_sty, const Mat<T>& F_sem,
                             const MaskConfig& cfg, const MaskOverride<T>* ov = nullptr,
                             MaskGenCache<T>* cache = nullptr) {
  cfg.validate();
  require(!F_sty.empty(), "generate_masks: no history features");
  const auto L = F_sem.rows();
  const auto d = F_sem.cols();
  require(d == w.enc.width(), "generate_masks: width mismatch");
  for (const auto& f : F_sty) require(f.rows() == L && f.cols() == d, "generate_masks: style feature shape mismatch");
  const auto N = static_cast<Eigen::Index>(F_sty.size());

  Mat<T> X((N + 1) * L, d);
  for (Eigen::Index i = 0; i < N; ++i) X.middleRows(i * L, L) = F_sty[static_cast<std::size_t>(i)];
  const T scale = static_cast<T>(1.0 - cfg.alpha_m);
  X.bottomRows(L) = F_sem * scale;

  nn::TowerCache<T> local;
  nn::TowerCache<T>& tc = cache ? cache->enc : local;
  Mat<T> H = nn::tower_forward(w.enc, X, X, &tc);
  MaskResult<T> r;
  r.scores = (H * w.score_w.transpose()).array() + w.score_b(0);
  if (cache) {
    cache->hidden = std::move(H);
    cache->sem_scale = scale;
  }

  const int keep_s = kept_rows(cfg.alpha_s, static_cast<int>(L));
  const int keep_m = kept_rows(cfg.alpha_m, static_cast<int>(L));
  if (ov) {
    require(ov->style_bits.size() == F_sty.size() && ov->ref_scores.size() == r.scores.size(),
            "generate_masks: override shape mismatch");
  }
  auto real_mask = [&](const std::vector<uint8_t>& bits, Eigen::Index off) {
    ColVec<T> m(L);
    for (Eigen::Index k = 0; k < L; ++k) {
      m(k) = static_cast<T>(bits[static_cast<std::size_t>(k)]);
      if (ov) m(k) += r.scores(off + k) - ov->ref_scores(off + k);
    }
    return m;
  };
  for (Eigen::Index i = 0; i < N; ++i) {
    MaskVector mv;
    mv.alpha = cfg.alpha_s;
    mv.tag = static_cast<int>(i);
    mv.bits = ov ? ov->style_bits[static_cast<std::size_t>(i)] : top_k_bits(r.scores.segment(i * L, L), keep_s);
    r.style_m.push_back(real_mask(mv.bits, i * L));
    r.style.push_back(std::move(mv));
  }
  r.sem.alpha = cfg.alpha_m;
  r.sem.tag = kSemanticMaskTag;
  r.sem.bits = ov ? ov->sem_bits : top_k_bits(r.scores.segment(N * L, L), keep_m);
  r.sem_m = real_mask(r.sem.bits, N * L);
  return r;
}

// d scores -> parameter gradients; returns (d F_sty list, d F_sem) through
// the encoder input.
template <class T>
std::pair<std::vector<Mat<T>>, Mat<T>> generate_masks_backward(const MaskGenW<T>& w, const MaskGenCache<T>& c,
                                                               const ColVec<T>& dscores, Eigen::Index N,
                                                               MaskGenW<T>& g) {
  g.score_w += dscores.transpose() * c.hidden;
  g.score_b(0) += dscores.sum();
  const Mat<T> dH = dscores * w.score_w;
  auto [dq, dkv] = nn::tower_backward(w.enc, c.enc, dH, g.enc);
  dq += dkv;
  const auto L = dq.rows() / (N + 1);
  std::vector<Mat<T>> dsty;
  for (Eigen::Index i = 0; i < N; ++i) dsty.push_back(dq.middleRows(i * L, L));
  Mat<T> dsem = dq.bottomRows(L) * c.sem_scale;
  return {std::move(dsty), std::move(dsem)};
}

// Row masking and mean pooling over the history.
template <class T>
std::pair<Mat<T>, Mat<T>> apply_and_pool(const std::vector<Mat<T>>& F_sty, const std::vector<ColVec<T>>& style_m,
                                         const Mat<T>& F_sem, const ColVec<T>& sem_m) {
  require(!F_sty.empty(), "apply_and_pool: N must be >= 1");
  require(F_sty.size() == style_m.size(), "apply_and_pool: mask count mismatch");
  require(sem_m.size() == F_sem.rows(), "apply_and_pool: semantic mask length mismatch");
  Mat<T> pooled = Mat<T>::Zero(F_sty[0].rows(), F_sty[0].cols());
  for (std::size_t i = 0; i < F_sty.size(); ++i) {
    require(F_sty[i].rows() == pooled.rows() && F_sty[i].cols() == pooled.cols() && style_m[i].size() == pooled.rows(),
            "apply_and_pool: shape mismatch");
    pooled.array() += F_sty[i].array().colwise() * style_m[i].array();
  }
  pooled /= static_cast<T>(F_sty.size());
  Mat<T> masked = F_sem.array().colwise() * sem_m.array();
  return {std::move(pooled), std::move(masked)};
}

inline ColVec<double> bits_as_real(const std::vector<uint8_t>& bits) {
  ColVec<double> m(static_cast<Eigen::Index>(bits.size()));
  for (std::size_t i = 0; i < bits.size(); ++i) m(static_cast<Eigen::Index>(i)) = bits[i];
  return m;
}

}  // namespace drc
