#include "drc/maskgen.hpp"

#include "fd.hpp"

#include <gtest/gtest.h>

using namespace drc;

namespace {

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat<double> m(r, c);
  init_normal(m, rng, 1.0);
  return m;
}

struct Setup {
  MaskGenW<double> w;
  std::vector<Mat<double>> sty;
  Mat<double> sem;
};

Setup setup(int N, int L, int d, uint64_t seed) {
  Rng rng(seed);
  Setup s{make_maskgen<double>(d, 4, rng), {}, random_mat(L, d, rng)};
  for (int i = 0; i < N; ++i) s.sty.push_back(random_mat(L, d, rng));
  return s;
}

}  // namespace

TEST(Masks, ExtremesAndHalf) {
  auto s = setup(3, 64, 8, 1);
  auto zero = generate_masks(s.w, s.sty, s.sem, MaskConfig{0.0, 0.0});
  auto one = generate_masks(s.w, s.sty, s.sem, MaskConfig{1.0, 1.0});
  auto half = generate_masks(s.w, s.sty, s.sem, MaskConfig{0.5, 0.5});
  ASSERT_EQ(zero.style.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(zero.style[static_cast<std::size_t>(i)].ones(), 64);
    EXPECT_EQ(one.style[static_cast<std::size_t>(i)].ones(), 0);
    EXPECT_EQ(half.style[static_cast<std::size_t>(i)].ones(), 32);
    EXPECT_EQ(half.style[static_cast<std::size_t>(i)].tag, i);
  }
  EXPECT_EQ(zero.sem.ones(), 64);
  EXPECT_EQ(one.sem.ones(), 0);
  EXPECT_EQ(half.sem.ones(), 32);
  EXPECT_EQ(half.sem.tag, kSemanticMaskTag);
}

TEST(Masks, CardinalityOnTheGrid) {
  auto s = setup(2, 64, 8, 2);
  for (int j = 0; j <= 10; ++j) {
    const double a = j / 10.0;
    const auto r = generate_masks(s.w, s.sty, s.sem, MaskConfig{a, a});
    const int zeros = static_cast<int>(std::lround(a * 64));
    EXPECT_EQ(64 - r.sem.ones(), zeros) << a;
    for (const auto& m : r.style) EXPECT_EQ(64 - m.ones(), zeros) << a;
  }
  EXPECT_EQ(kept_rows(0.2, 64), 51);
  EXPECT_EQ(kept_rows(0.7, 64), 19);
  EXPECT_THROW(kept_rows(1.5, 64), InputError);
  EXPECT_THROW(generate_masks(s.w, s.sty, s.sem, MaskConfig{0.2, -0.1}), InputError);
}

TEST(Masks, NestedAcrossRatios) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    ColVec<double> scores(64);
    for (int i = 0; i < 64; ++i) scores(i) = std::round(rng.normal() * 3.0);  // many ties
    for (int j = 0; j < 10; ++j) {
      const auto lo = top_k_bits(scores, kept_rows((j + 1) / 10.0, 64));
      const auto hi = top_k_bits(scores, kept_rows(j / 10.0, 64));
      for (int i = 0; i < 64; ++i)
        if (lo[static_cast<std::size_t>(i)]) {
          EXPECT_TRUE(hi[static_cast<std::size_t>(i)]);
        }
    }
  }
}

TEST(Masks, TiesGoToLowerIndex) {
  ColVec<double> s = ColVec<double>::Constant(6, 1.0);
  s(4) = 2.0;
  EXPECT_EQ(top_k_bits(s, 3), (std::vector<uint8_t>{1, 1, 0, 0, 1, 0}));
  s(0) = std::nan("");
  EXPECT_THROW(top_k_bits(s, 3), NumericError);
}

TEST(Masks, ShapeErrors) {
  auto s = setup(2, 8, 8, 4);
  EXPECT_THROW(generate_masks(s.w, {}, s.sem, MaskConfig{}), InputError);
  auto bad = s.sty;
  bad[1] = Mat<double>::Zero(7, 8);
  EXPECT_THROW(generate_masks(s.w, bad, s.sem, MaskConfig{}), InputError);
  EXPECT_THROW(generate_masks(s.w, s.sty, Mat<double>(Mat<double>::Zero(8, 6)), MaskConfig{}), InputError);
}

TEST(Pool, Identities) {
  Rng rng(5);
  const auto F = random_mat(5, 4, rng), S = random_mat(5, 4, rng);
  const ColVec<double> ones = ColVec<double>::Ones(5), zeros = ColVec<double>::Zero(5);
  auto [p1, m1] = apply_and_pool<double>({F}, {ones}, S, ones);
  EXPECT_EQ(p1, F);
  EXPECT_EQ(m1, S);
  auto [p2, m2] = apply_and_pool<double>({F, F}, {ones, ones}, S, zeros);
  EXPECT_LT((p2 - F).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_TRUE(m2.isZero(0.0));

  ColVec<double> some = ones;
  some(2) = 0.0;
  auto [p3, m3] = apply_and_pool<double>({F}, {some}, S, some);
  EXPECT_TRUE(p3.row(2).isZero(0.0));
  EXPECT_EQ(p3.row(1), F.row(1));
  EXPECT_TRUE(m3.row(2).isZero(0.0));
  EXPECT_THROW(apply_and_pool<double>({}, {}, S, ones), InputError);
  EXPECT_THROW(apply_and_pool<double>({F}, {ones}, S, ColVec<double>::Ones(4)), InputError);
}

// alpha_m = 1 zeroes the semantic matrix, so the masks and pooled style no
// longer depend on the reference features at all.
TEST(Pool, FullSemanticMaskDropsTheReference) {
  auto s = setup(2, 16, 8, 6);
  Rng rng(7);
  const auto other = random_mat(16, 8, rng);
  const MaskConfig cfg{0.2, 1.0};
  const auto a = generate_masks(s.w, s.sty, s.sem, cfg);
  const auto b = generate_masks(s.w, s.sty, other, cfg);
  for (std::size_t i = 0; i < a.style.size(); ++i) EXPECT_EQ(a.style[i].bits, b.style[i].bits);
  const auto [pa, ma] = apply_and_pool(s.sty, a.style_m, s.sem, a.sem_m);
  const auto [pb, mb] = apply_and_pool(s.sty, b.style_m, other, b.sem_m);
  EXPECT_EQ(pa, pb);
  EXPECT_TRUE(ma.isZero(0.0));
  EXPECT_TRUE(mb.isZero(0.0));
}

// Straight-through: with the bits frozen, m = bits + (s - s_ref) is smooth
// in the parameters, and its analytic gradient must match finite
// differences. At the reference point m equals the hard bits.
TEST(Gradients, SurrogateMatchesFiniteDifferences) {
  auto s = setup(2, 6, 8, 8);
  Rng rng(9);
  for (auto& p : param_list<double>(s.w))
    for (Eigen::Index k = 0; k < p.size(); ++k) p.data[k] += 0.2 * rng.normal();
  const MaskConfig cfg{0.5, 0.3};
  const auto base = generate_masks(s.w, s.sty, s.sem, cfg);
  MaskOverride<double> ov;
  for (const auto& m : base.style) ov.style_bits.push_back(m.bits);
  ov.sem_bits = base.sem.bits;
  ov.ref_scores = base.scores;

  const auto at_ref = generate_masks(s.w, s.sty, s.sem, cfg, &ov);
  for (std::size_t i = 0; i < at_ref.style_m.size(); ++i)
    EXPECT_EQ(at_ref.style_m[i], bits_as_real(base.style[i].bits).cast<double>());

  const auto R1 = random_mat(6, 8, rng), R2 = random_mat(6, 8, rng);
  auto loss = [&] {
    const auto r = generate_masks(s.w, s.sty, s.sem, cfg, &ov);
    const auto [pooled, masked] = apply_and_pool(s.sty, r.style_m, s.sem, r.sem_m);
    return (pooled.array() * R1.array()).sum() + (masked.array() * R2.array()).sum();
  };

  MaskGenCache<double> cache;
  const auto r = generate_masks(s.w, s.sty, s.sem, cfg, &ov, &cache);
  ColVec<double> dscores(r.scores.size());
  const Eigen::Index L = 6, N = 2;
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index k = 0; k < L; ++k)
      dscores(i * L + k) = (s.sty[static_cast<std::size_t>(i)].row(k).array() * R1.row(k).array()).sum() / N;
  for (Eigen::Index k = 0; k < L; ++k) dscores(N * L + k) = (s.sem.row(k).array() * R2.row(k).array()).sum();
  auto grads = zeros_like(s.w);
  generate_masks_backward(s.w, cache, dscores, N, grads);

  const auto worst = fd::check(s.w, grads, loss);
  EXPECT_LT(worst.rel, 1e-4) << worst.name << " analytic " << worst.analytic << " numeric " << worst.numeric;
}
