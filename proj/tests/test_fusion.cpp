#include "drc/fusion.hpp"

#include "fd.hpp"
#include "oracle.hpp"

#include <gtest/gtest.h>

using namespace drc;

namespace {

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat<double> m(r, c);
  init_normal(m, rng, 1.0);
  return m;
}

FusionW<double> random_fusion(FusionKind kind, int d, int M, Rng& rng) {
  auto w = make_fusion<double>(kind, d, M, rng);
  for (auto& p : param_list<double>(w))
    for (Eigen::Index k = 0; k < p.size(); ++k) p.data[k] += 0.3 * rng.normal();
  return w;
}

}  // namespace

TEST(Fuse, MatchesNaiveOracle) {
  Rng rng(1);
  const auto w = random_fusion(FusionKind::full, 8, 4, rng);
  const auto sty = random_mat(3, 8, rng), sem = random_mat(3, 8, rng);
  const auto out = fuse(w, sty, sem);
  ASSERT_EQ(out.rows(), 4);
  EXPECT_LT(oracle::max_abs_diff(out, oracle::fusion(w, oracle::from(sty), oracle::from(sem))), 1e-10);
}

TEST(Fuse, ConcatMatchesNaiveOracle) {
  Rng rng(2);
  const auto w = random_fusion(FusionKind::concat, 8, 3, rng);
  const auto sty = random_mat(3, 8, rng), sem = random_mat(5, 8, rng);
  oracle::Matrix s = oracle::from(sty), m = oracle::from(sem);
  for (auto& row : s)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += w.seg_sty(static_cast<Eigen::Index>(j));
  for (auto& row : m)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += w.seg_sem(static_cast<Eigen::Index>(j));
  const auto Q = oracle::from(w.queries);
  const auto expect = oracle::layer_norm(oracle::add(Q, oracle::attn(w.pool, Q, oracle::vstack(s, m))),
                                         oracle::vec(w.out_ln.gain), oracle::vec(w.out_ln.offset));
  EXPECT_LT(oracle::max_abs_diff(concat_fuse(w, sty, sem), expect), 1e-10);
}

TEST(Fuse, ZeroValuePathLeavesNormalizedQueries) {
  Rng rng(3);
  for (auto kind : {FusionKind::full, FusionKind::concat}) {
    auto w = make_fusion<double>(kind, 8, 5, rng);
    w.pool.wv.setZero();
    if (kind == FusionKind::full) {
      w.u_attn.wo.setZero();
      w.v_attn.wo.setZero();
    }
    const auto expect = nn::layer_norm(w.out_ln, w.queries);
    for (int t = 0; t < 3; ++t) {
      const auto out = fuse(w, random_mat(4, 8, rng), random_mat(2, 8, rng));
      EXPECT_LT((out - expect).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Fuse, DeterministicAndShape) {
  Rng rng(4);
  const auto w = make_fusion<double>(FusionKind::full, 8, 8, rng);
  const auto a = random_mat(7, 8, rng), b = random_mat(2, 8, rng);
  EXPECT_EQ(fuse(w, a, b), fuse(w, a, Mat<double>(b)));
  for (Eigen::Index rows : {1, 3, 64, 256}) EXPECT_EQ(fuse(w, random_mat(rows, 8, rng), b).rows(), 8);
  EXPECT_THROW(fuse(w, random_mat(2, 6, rng), b), InputError);
  EXPECT_THROW(make_fusion<double>(FusionKind::full, 8, 0, rng), InputError);
}

TEST(Concat, RowCountAndOrderSensitivity) {
  Rng rng(5);
  const auto w = make_fusion<double>(FusionKind::concat, 8, 6, rng);
  const auto a = random_mat(4, 8, rng), b = random_mat(9, 8, rng);
  EXPECT_EQ(concat_fuse(w, a, b).rows(), 6);
  EXPECT_GT((concat_fuse(w, a, b) - concat_fuse(w, b, a)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(concat_fuse(w, a, a), concat_fuse(w, a, a));
  const auto full = make_fusion<double>(FusionKind::full, 8, 6, rng);
  EXPECT_THROW(concat_fuse(full, a, b), InputError);
  EXPECT_THROW(concat_fuse(w, a, random_mat(2, 5, rng)), InputError);
}

TEST(Gradients, BothVariantsMatchFiniteDifferences) {
  Rng rng(6);
  for (auto kind : {FusionKind::full, FusionKind::concat}) {
    auto w = random_fusion(kind, 8, 3, rng);
    auto sty = random_mat(4, 8, rng), sem = random_mat(3, 8, rng);
    const auto R = random_mat(3, 8, rng);
    auto loss = [&] { return (fuse(w, sty, sem).array() * R.array()).sum(); };
    FusionCache<double> c;
    fuse(w, sty, sem, &c);
    auto grads = zeros_like(w);
    const auto [dsty, dsem] = fuse_backward(w, c, R, grads);
    const auto worst = fd::check(w, grads, loss);
    EXPECT_LT(worst.rel, 1e-5) << to_string(kind) << " " << worst.name;

    for (int which = 0; which < 2; ++which) {
      Mat<double>& x = which == 0 ? sty : sem;
      const Mat<double>& analytic = which == 0 ? dsty : dsem;
      for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double x0 = x.data()[k];
        x.data()[k] = x0 + 1e-5;
        const double lp = loss();
        x.data()[k] = x0 - 1e-5;
        const double lm = loss();
        x.data()[k] = x0;
        EXPECT_LT(fd::rel_error(analytic.data()[k], (lp - lm) / 2e-5), 1e-5);
      }
    }
  }
}
