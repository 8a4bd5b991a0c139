#pragma once

// Measurement: random-conv style features, Frechet distance, linear factor
// probes, the disentanglement matrix, a rule-based factor reader used to
// judge generated images, the alpha_m sweep and the reconstruction baseline.

#include "drc/training.hpp"

#include <Eigen/Eigenvalues>

#include <map>

namespace drc::eval {

// ----------------------------------------------------------------------------
// Fixed random convolutional features
// ----------------------------------------------------------------------------

inline constexpr uint64_t kFeatureNetSeed = 0xD1C0'5EEDull;

struct ConvLayer {
  int in = 0, out = 0, stride = 1;
  std::vector<double> w;  // out x in x 3 x 3
  std::vector<double> b;
};

// Three 3x3 conv layers with ReLU: 3 -> 16 (stride 1), 16 -> 32 (stride 2),
// 32 -> 32 (stride 2).
class RandomConvNet {
 public:
  explicit RandomConvNet(uint64_t seed = kFeatureNetSeed) {
    Rng rng(seed);
    layers_.push_back(make(3, 16, 1, rng));
    layers_.push_back(make(16, 32, 2, rng));
    layers_.push_back(make(32, 32, 2, rng));
  }

  struct Map {
    int channels = 0, size = 0;
    std::vector<double> a;  // channel-major
    int positions() const { return size * size; }
  };

  std::vector<Map> forward(const world::ToyImage& img) const {
    Map x{3, world::kImageSize, std::vector<double>(static_cast<std::size_t>(3 * world::kImageSize * world::kImageSize))};
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < world::kImageSize; ++y)
        for (int xx = 0; xx < world::kImageSize; ++xx)
          x.a[static_cast<std::size_t>((c * world::kImageSize + y) * world::kImageSize + xx)] = img.at(y, xx, c);
    std::vector<Map> out;
    for (const auto& l : layers_) {
      const Map& in = out.empty() ? x : out.back();
      out.push_back({l.out, in.size / l.stride, conv(l, in.a, in.size)});
    }
    return out;
  }

 private:
  static ConvLayer make(int in, int out, int stride, Rng& rng) {
    ConvLayer l;
    l.in = in;
    l.out = out;
    l.stride = stride;
    const double s = std::sqrt(2.0 / (9.0 * in));
    for (int i = 0; i < out * in * 9; ++i) l.w.push_back(rng.normal() * s);
    for (int i = 0; i < out; ++i) l.b.push_back(rng.normal() * 0.1);
    return l;
  }

  static std::vector<double> conv(const ConvLayer& l, const std::vector<double>& x, int size) {
    const int os = size / l.stride;
    std::vector<double> y(static_cast<std::size_t>(l.out * os * os));
    for (int o = 0; o < l.out; ++o)
      for (int oy = 0; oy < os; ++oy)
        for (int ox = 0; ox < os; ++ox) {
          double acc = l.b[static_cast<std::size_t>(o)];
          for (int i = 0; i < l.in; ++i)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * l.stride + ky - 1, ix = ox * l.stride + kx - 1;
                if (iy < 0 || ix < 0 || iy >= size || ix >= size) continue;
                acc += l.w[static_cast<std::size_t>(((o * l.in + i) * 3 + ky) * 3 + kx)] *
                       x[static_cast<std::size_t>((i * size + iy) * size + ix)];
              }
          y[static_cast<std::size_t>((o * os + oy) * os + ox)] = std::max(acc, 0.0);
        }
    return y;
  }

  std::vector<ConvLayer> layers_;
};

inline const RandomConvNet& feature_net() {
  static const RandomConvNet net;
  return net;
}

// Upper triangle (with diagonal) of the last-layer channel Gram matrix, scaled
// to unit L2 norm. The normalization removes most of the dependence on how
// much of the image the foreground covers.
inline std::vector<double> gram_style_feature(const world::ToyImage& img) {
  const auto maps = feature_net().forward(img);
  const auto& m = maps.back();
  const int n = m.positions();
  std::vector<double> out;
  for (int a = 0; a < m.channels; ++a)
    for (int b = a; b < m.channels; ++b) {
      double s = 0.0;
      for (int k = 0; k < n; ++k)
        s += m.a[static_cast<std::size_t>(a * n + k)] * m.a[static_cast<std::size_t>(b * n + k)];
      out.push_back(s / n);
    }
  double norm = 0.0;
  for (double v : out) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& v : out) v /= norm;
  return out;
}

inline double feature_mse(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && !a.empty(), "feature_mse: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return (aa > 0.0 && bb > 0.0) ? ab / std::sqrt(aa * bb) : 0.0;
}

// Channel means of every layer (16 + 32 + 32 values).
inline std::vector<double> pooled_feature(const world::ToyImage& img) {
  std::vector<double> out;
  for (const auto& m : feature_net().forward(img)) {
    const int n = m.positions();
    for (int c = 0; c < m.channels; ++c) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += m.a[static_cast<std::size_t>(c * n + k)];
      out.push_back(s / n);
    }
  }
  return out;
}

// ----------------------------------------------------------------------------
// Frechet distance
// ----------------------------------------------------------------------------

inline constexpr std::size_t kMinFidSet = 50;

inline Mat<double> sqrt_psd(const Mat<double>& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(0.5 * (a + a.transpose())));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline double frechet_distance(const Mat<double>& X, const Mat<double>& Y) {
  require(X.cols() == Y.cols(), "frechet_distance: feature width mismatch");
  auto moments = [](const Mat<double>& Z) {
    const RowVec<double> mu = Z.colwise().mean();
    const Mat<double> c = Z.rowwise() - mu;
    Mat<double> cov = (c.transpose() * c) / static_cast<double>(Z.rows() - 1);
    return std::make_pair(mu, cov);
  };
  const auto [m1, s1] = moments(X);
  const auto [m2, s2] = moments(Y);
  const Mat<double> r1 = sqrt_psd(s1);
  const Mat<double> mid = sqrt_psd(Mat<double>(r1 * s2 * r1));
  const double d = (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * mid.trace();
  return std::max(d, 0.0);
}

inline Mat<double> feature_matrix(const std::vector<world::ToyImage>& imgs,
                                  const std::function<std::vector<double>(const world::ToyImage&)>& f,
                                  int workers = 1) {
  require(!imgs.empty(), "feature_matrix: empty image set");
  std::vector<std::vector<double>> rows(imgs.size());
  world::parallel_for(imgs.size(), workers, [&](std::size_t i) { rows[i] = f(imgs[i]); });
  Mat<double> X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < rows[i].size(); ++k) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
  return X;
}

inline double fid_like(const std::vector<world::ToyImage>& real, const std::vector<world::ToyImage>& gen, int workers = 1) {
  require(real.size() >= kMinFidSet && gen.size() >= kMinFidSet,
          "fid_like: each set needs at least " + std::to_string(kMinFidSet) + " images");
  return frechet_distance(feature_matrix(real, pooled_feature, workers), feature_matrix(gen, pooled_feature, workers));
}

// ----------------------------------------------------------------------------
// Linear probes
// ----------------------------------------------------------------------------

inline constexpr int kMinPerClass = 20;

struct LinearProbe {
  RowVec<double> mean, scale;
  Mat<double> W;  // D x C
  RowVec<double> b;

  int classes() const { return static_cast<int>(W.cols()); }

  std::vector<int> predict(const Mat<double>& X) const {
    const Mat<double> Z = ((X.rowwise() - mean).array().rowwise() / scale.array()).matrix();
    const Mat<double> logits = (Z * W).rowwise() + b;
    std::vector<int> out(static_cast<std::size_t>(X.rows()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) logits.row(i).maxCoeff(&out[static_cast<std::size_t>(i)]);
    return out;
  }
};

struct ProbeConfig {
  int iterations = 300;
  double lr = 0.05;
  double l2 = 1e-4;
  uint64_t seed = 17;
};

// Multinomial logistic regression on standardized features, full-batch Adam.
inline LinearProbe fit_probe(const Mat<double>& X, const std::vector<int>& y, int classes, const ProbeConfig& cfg = {}) {
  require(X.rows() == static_cast<Eigen::Index>(y.size()) && X.rows() > 0, "fit_probe: label count mismatch");
  std::vector<int> per(static_cast<std::size_t>(classes), 0);
  for (int v : y) {
    require(v >= 0 && v < classes, "fit_probe: label out of range");
    ++per[static_cast<std::size_t>(v)];
  }
  for (int c = 0; c < classes; ++c)
    require(per[static_cast<std::size_t>(c)] >= kMinPerClass,
            "fit_probe: class " + std::to_string(c) + " has " + std::to_string(per[static_cast<std::size_t>(c)]) +
                " samples, fewer than " + std::to_string(kMinPerClass));

  LinearProbe p;
  const auto n = X.rows();
  const auto D = X.cols();
  p.mean = X.colwise().mean();
  p.scale = ((X.rowwise() - p.mean).array().square().colwise().sum() / static_cast<double>(n)).sqrt().matrix();
  for (Eigen::Index k = 0; k < D; ++k)
    if (p.scale(k) < 1e-12) p.scale(k) = 1.0;
  const Mat<double> Z = ((X.rowwise() - p.mean).array().rowwise() / p.scale.array()).matrix();

  Rng rng(cfg.seed);
  p.W.resize(D, classes);
  init_normal(p.W, rng, 0.01);
  p.b = RowVec<double>::Zero(classes);
  Mat<double> mW = Mat<double>::Zero(D, classes), vW = mW;
  RowVec<double> mb = RowVec<double>::Zero(classes), vb = mb;
  Mat<double> Y = Mat<double>::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) Y(i, y[static_cast<std::size_t>(i)]) = 1.0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    Mat<double> logits = (Z * p.W).rowwise() + p.b;
    const ColVec<double> lse = nn::logsumexp_rows(logits);
    const Mat<double> P = (logits.colwise() - lse).array().exp();
    const Mat<double> G = (P - Y) / static_cast<double>(n);
    const Mat<double> gW = Z.transpose() * G + cfg.l2 * p.W;
    const RowVec<double> gb = G.colwise().sum();
    const double c1 = 1.0 - std::pow(0.9, it), c2 = 1.0 - std::pow(0.999, it);
    mW = 0.9 * mW + 0.1 * gW;
    vW = 0.999 * vW + 0.001 * gW.cwiseProduct(gW);
    mb = 0.9 * mb + 0.1 * gb;
    vb = 0.999 * vb + 0.001 * gb.cwiseProduct(gb);
    p.W.array() -= cfg.lr * (mW.array() / c1) / ((vW.array() / c2).sqrt() + 1e-8);
    p.b.array() -= cfg.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + 1e-8);
  }
  return p;
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& y) {
  require(pred.size() == y.size() && !y.empty(), "accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += pred[i] == y[i];
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

inline double chance_level(int first_factor, int last_factor) {
  double s = 0.0;
  for (int f = first_factor; f < last_factor; ++f) s += 1.0 / world::kFactorClasses[static_cast<std::size_t>(f)];
  return s / (last_factor - first_factor);
}

// Representations: mean-pooled tower features of self-extraction, or the
// per-patch mean colors of the raw image.
enum class Representation { style_tower, semantic_tower, pixels };

inline const char* to_string(Representation r) {
  switch (r) {
    case Representation::style_tower: return "style_tower";
    case Representation::semantic_tower: return "semantic_tower";
    default: return "pixels";
  }
}

inline std::vector<double> patch_mean_colors(const world::ToyImage& img) {
  std::vector<double> out;
  for (int py = 0; py < world::kGrid; ++py)
    for (int px = 0; px < world::kGrid; ++px)
      for (int c = 0; c < world::kChannels; ++c) {
        double s = 0.0;
        for (int y = 0; y < world::kPatch; ++y)
          for (int x = 0; x < world::kPatch; ++x) s += img.at(py * world::kPatch + y, px * world::kPatch + x, c);
        out.push_back(s / (world::kPatch * world::kPatch));
      }
  return out;
}

template <class T>
Mat<double> representation(const DrcModel<T>& model, const vq::Codebook& cb, const std::vector<world::ToyImage>& imgs,
                           Representation rep, int workers = 1) {
  if (rep == Representation::pixels) return feature_matrix(imgs, patch_mean_colors, workers);
  const TowerId id = rep == Representation::style_tower ? TowerId::style : TowerId::semantic;
  return feature_matrix(
      imgs,
      [&](const world::ToyImage& img) {
        const Mat<T> F = extract_self(model.dis, id, embed_visual(model, vq::encode(img, cb)));
        const RowVec<T> m = F.colwise().mean();
        std::vector<double> v(static_cast<std::size_t>(m.size()));
        for (Eigen::Index k = 0; k < m.size(); ++k) v[static_cast<std::size_t>(k)] = static_cast<double>(m(k));
        return v;
      },
      workers);
}

inline std::vector<int> factor_column(const std::vector<world::ToyImage>& imgs, int factor) {
  std::vector<int> y;
  for (const auto& img : imgs) {
    require(img.factors.has_value(), "probe image without factors");
    y.push_back(world::factor_labels(*img.factors)[static_cast<std::size_t>(factor)]);
  }
  return y;
}

struct ProbeModel {
  std::map<Representation, std::array<LinearProbe, world::kFactorCount>> probes;
};

// Accuracy of every (representation, factor) pair on an evaluation set.
struct ProbeAccuracy {
  std::map<Representation, std::array<double, world::kFactorCount>> acc;
};

template <class T>
ProbeModel fit_probes(const DrcModel<T>& model, const vq::Codebook& cb, const std::vector<world::ToyImage>& fit_set,
                      const std::vector<Representation>& reps, const ProbeConfig& cfg = {}, int workers = 1) {
  ProbeModel pm;
  for (Representation r : reps) {
    const Mat<double> X = representation(model, cb, fit_set, r, workers);
    for (int f = 0; f < world::kFactorCount; ++f)
      pm.probes[r][static_cast<std::size_t>(f)] =
          fit_probe(X, factor_column(fit_set, f), world::kFactorClasses[static_cast<std::size_t>(f)], cfg);
  }
  return pm;
}

template <class T>
ProbeAccuracy probe_accuracy(const ProbeModel& pm, const DrcModel<T>& model, const vq::Codebook& cb,
                             const std::vector<world::ToyImage>& eval_set, int workers = 1) {
  ProbeAccuracy out;
  for (const auto& [r, probes] : pm.probes) {
    const Mat<double> X = representation(model, cb, eval_set, r, workers);
    for (int f = 0; f < world::kFactorCount; ++f)
      out.acc[r][static_cast<std::size_t>(f)] =
          accuracy(probes[static_cast<std::size_t>(f)].predict(X), factor_column(eval_set, f));
  }
  return out;
}

// 2x2 summary: rows (style rep, semantic rep), columns (style factors,
// semantic factors), entries are mean probe accuracies.
struct DisentanglementMatrix {
  double sty_on_sty = 0, sty_on_sem = 0, sem_on_sty = 0, sem_on_sem = 0;
  double chance_sty = 0, chance_sem = 0;
};

inline DisentanglementMatrix disentanglement_matrix(const ProbeAccuracy& pa) {
  auto mean = [](const std::array<double, world::kFactorCount>& a, int lo, int hi) {
    double s = 0.0;
    for (int f = lo; f < hi; ++f) s += a[static_cast<std::size_t>(f)];
    return s / (hi - lo);
  };
  require(pa.acc.count(Representation::style_tower) && pa.acc.count(Representation::semantic_tower),
          "disentanglement_matrix: both tower probes are required");
  const auto& s = pa.acc.at(Representation::style_tower);
  const auto& m = pa.acc.at(Representation::semantic_tower);
  DisentanglementMatrix d;
  d.sty_on_sty = mean(s, 0, 3);
  d.sty_on_sem = mean(s, 3, 6);
  d.sem_on_sty = mean(m, 0, 3);
  d.sem_on_sem = mean(m, 3, 6);
  d.chance_sty = chance_level(0, 3);
  d.chance_sem = chance_level(3, 6);
  return d;
}

// ----------------------------------------------------------------------------
// Rule-based factor reader for generated images
// ----------------------------------------------------------------------------

namespace detail {

inline double color_dist2(const world::ToyImage& img, int y, int x, const world::detail::Rgb& c) {
  double s = 0.0;
  for (int ch = 0; ch < 3; ++ch) {
    const double d = img.at(y, x, ch) - c[static_cast<std::size_t>(ch)] / 255.0;
    s += d * d;
  }
  return s;
}

struct CellTemplate {
  world::SemanticFactors sem;
  std::array<uint8_t, world::kGrid * world::kGrid> cells{};
};

// Every (shape, count, layout, jitter) placement, in semantic-index order.
inline const std::vector<CellTemplate>& cell_templates() {
  static const std::vector<CellTemplate> all = [] {
    std::vector<CellTemplate> out;
    for (int si = 0; si < world::kSemanticCombos; ++si) {
      const auto sem = world::SemanticFactors::from_index(si);
      const int combos = 1 << (2 * sem.count);
      for (int j = 0; j < combos; ++j) {
        CellTemplate t;
        t.sem = sem;
        for (int i = 0; i < sem.count; ++i) {
          const auto& q = world::detail::kQuadrantOrigin[static_cast<std::size_t>((sem.layout + i) % world::kLayouts)];
          const int jx = (j >> (2 * i)) & 1, jy = (j >> (2 * i + 1)) & 1;
          const auto& tmpl = world::detail::kShapeTemplates[sem.shape];
          for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
              if (tmpl[static_cast<std::size_t>(r * 3 + c)])
                t.cells[static_cast<std::size_t>((q[1] + jy + r) * world::kGrid + q[0] + jx + c)] = 1;
        }
        out.push_back(t);
      }
    }
    return out;
  }();
  return all;
}

}  // namespace detail

// Recovers factors from pixels by matching palette colors, background
// patterns, ink rows and cell-level shape placements.
inline world::FactorSpec read_factors(const world::ToyImage& img) {
  using world::kImageSize;
  const auto& table = world::detail::kPaletteTable;
  int best_pal = 0;
  double best_cost = std::numeric_limits<double>::infinity();
  for (int p = 0; p < world::kPalettes; ++p) {
    const auto& pal = table[static_cast<std::size_t>(p)];
    double cost = 0.0;
    for (int y = 0; y < kImageSize; ++y)
      for (int x = 0; x < kImageSize; ++x)
        cost += std::min({detail::color_dist2(img, y, x, pal.bg), detail::color_dist2(img, y, x, pal.bg2),
                          detail::color_dist2(img, y, x, pal.fill), detail::color_dist2(img, y, x, pal.ink)});
    if (cost < best_cost) {
      best_cost = cost;
      best_pal = p;
    }
  }
  const auto& pal = table[static_cast<std::size_t>(best_pal)];
  // 0 bg, 1 bg2, 2 fill, 3 ink
  std::vector<int> cls(static_cast<std::size_t>(kImageSize * kImageSize));
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) {
      const std::array<double, 4> d{detail::color_dist2(img, y, x, pal.bg), detail::color_dist2(img, y, x, pal.bg2),
                                    detail::color_dist2(img, y, x, pal.fill), detail::color_dist2(img, y, x, pal.ink)};
      cls[static_cast<std::size_t>(y * kImageSize + x)] = static_cast<int>(std::min_element(d.begin(), d.end()) - d.begin());
    }

  std::array<uint8_t, world::kGrid * world::kGrid> fg{};
  for (int cy = 0; cy < world::kGrid; ++cy)
    for (int cx = 0; cx < world::kGrid; ++cx) {
      int n = 0;
      for (int y = 0; y < world::kPatch; ++y)
        for (int x = 0; x < world::kPatch; ++x)
          n += cls[static_cast<std::size_t>((cy * world::kPatch + y) * kImageSize + cx * world::kPatch + x)] >= 2;
      fg[static_cast<std::size_t>(cy * world::kGrid + cx)] = n * 2 >= world::kPatch * world::kPatch;
    }

  // Stroke: modal count of leading ink rows over foreground cells.
  std::array<int, world::kStrokes> votes{};
  for (int cell = 0; cell < world::kGrid * world::kGrid; ++cell) {
    if (!fg[static_cast<std::size_t>(cell)]) continue;
    const int cy = cell / world::kGrid, cx = cell % world::kGrid;
    int rows = 0;
    for (int y = 0; y < world::kPatch; ++y) {
      int ink = 0;
      for (int x = 0; x < world::kPatch; ++x)
        ink += cls[static_cast<std::size_t>((cy * world::kPatch + y) * kImageSize + cx * world::kPatch + x)] == 3;
      if (ink * 2 > world::kPatch) ++rows;
    }
    ++votes[static_cast<std::size_t>(std::clamp(rows, 1, world::kStrokes) - 1)];
  }
  const int stroke = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());

  // Background: agreement of secondary-color pixels with each pattern.
  std::array<int, world::kBackgrounds> agree{};
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) {
      if (fg[static_cast<std::size_t>((y / world::kPatch) * world::kGrid + x / world::kPatch)]) continue;
      const int c = cls[static_cast<std::size_t>(y * kImageSize + x)];
      if (c > 1) continue;
      for (int b = 0; b < world::kBackgrounds; ++b) agree[static_cast<std::size_t>(b)] += (c == 1) == world::detail::background_secondary(b, x, y);
    }
  const int background = static_cast<int>(std::max_element(agree.begin(), agree.end()) - agree.begin());

  // Semantics: nearest placement template in Hamming distance.
  const auto& templates = detail::cell_templates();
  std::size_t best_t = 0;
  int best_h = std::numeric_limits<int>::max();
  for (std::size_t t = 0; t < templates.size(); ++t) {
    int h = 0;
    for (std::size_t k = 0; k < fg.size(); ++k) h += templates[t].cells[k] != fg[k];
    if (h < best_h) {
      best_h = h;
      best_t = t;
    }
  }

  world::FactorSpec f;
  f.style.palette = static_cast<uint8_t>(best_pal);
  f.style.background = static_cast<uint8_t>(background);
  f.style.stroke = static_cast<uint8_t>(stroke);
  f.semantic = templates[best_t].sem;
  return f;
}

inline double style_agreement(const world::FactorSpec& got, const world::StyleFactors& want) {
  return ((got.style.palette == want.palette) + (got.style.background == want.background) +
          (got.style.stroke == want.stroke)) /
         3.0;
}

inline double semantic_agreement(const world::FactorSpec& got, const world::SemanticFactors& want) {
  return ((got.semantic.shape == want.shape) + (got.semantic.count == want.count) +
          (got.semantic.layout == want.layout)) /
         3.0;
}

// ----------------------------------------------------------------------------
// Reports
// ----------------------------------------------------------------------------

struct ImageScore {
  double alpha_m = 0.0;
  double style = 0.0;       // factor agreement with the history persona
  double semantic = 0.0;    // factor agreement with the reference semantics
  double gram_cosine = 0.0;  // Gram-feature cosine to the mean history feature
  std::vector<int> tokens;

  double composite() const { return 0.5 * (style + semantic); }
};

inline std::vector<double> mean_gram(const std::vector<world::ToyImage>& imgs) {
  std::vector<double> m;
  for (const auto& img : imgs) {
    const auto g = gram_style_feature(img);
    if (m.empty()) m.assign(g.size(), 0.0);
    for (std::size_t k = 0; k < g.size(); ++k) m[k] += g[k] / static_cast<double>(imgs.size());
  }
  return m;
}

inline ImageScore score_image(const world::ToyImage& img, const world::UserSession& s,
                              const std::vector<double>& history_gram) {
  require(s.target.factors.has_value(), "score_image: session target has no factors");
  const auto f = read_factors(img);
  ImageScore r;
  r.style = style_agreement(f, s.target.factors->style);
  r.semantic = semantic_agreement(f, s.target.factors->semantic);
  r.gram_cosine = cosine(gram_style_feature(img), history_gram);
  return r;
}

inline std::vector<double> alpha_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

struct SweepResult {
  std::vector<ImageScore> per_alpha;  // one per grid point
  std::size_t chosen = 0;

  const ImageScore& best() const { return per_alpha[chosen]; }
};

// Greedy generation at every grid value; picks the highest mean of style and
// semantic agreement, ties to the smaller alpha_m.
template <class T>
SweepResult alpha_sweep(const DrcModel<T>& model, const vq::Codebook& cb, const world::UserSession& s,
                        const SessionTokens& tok, int reference = 0, double alpha_s = 0.2) {
  SweepResult out;
  const auto hg = mean_gram(s.history);
  double best = -1.0;
  for (double a : alpha_grid()) {
    const auto tokens = stage2_generate(model, stage2_inputs(tok, reference, alpha_s, a, false));
    ImageScore sc = score_image(vq::decode(tokens, cb), s, hg);
    sc.alpha_m = a;
    sc.tokens = tokens;
    if (sc.composite() > best) {
      best = sc.composite();
      out.chosen = out.per_alpha.size();
    }
    out.per_alpha.push_back(std::move(sc));
  }
  return out;
}

inline ImageScore recon_baseline(const vq::Codebook& cb, const world::UserSession& s, int reference = 0) {
  require(reference >= 0 && reference < static_cast<int>(s.reference_set.size()), "recon_baseline: bad reference");
  const auto tokens = vq::encode(s.reference_set[static_cast<std::size_t>(reference)], cb);
  ImageScore sc = score_image(vq::decode(tokens, cb), s, mean_gram(s.history));
  sc.tokens = tokens;
  return sc;
}

struct SessionRow {
  std::size_t index = 0;
  uint32_t user = 0;
  double chosen_alpha = 0.0;
  double style = 0.0, semantic = 0.0, gram_cosine = 0.0;
  double recon_style = 0.0, recon_semantic = 0.0, recon_gram_cosine = 0.0;
  std::vector<double> style_by_alpha, semantic_by_alpha;
};

struct EvalReport {
  std::size_t sessions = 0;
  double style_alignment = 0.0;
  double semantic_alignment = 0.0;
  double gram_cosine = 0.0;
  double fidelity = 0.0;
  double recon_style_alignment = 0.0;
  double recon_semantic_alignment = 0.0;
  double recon_gram_cosine = 0.0;
  double recon_fidelity = 0.0;
  double mean_chosen_alpha = 0.0;
  std::vector<double> alpha, style_by_alpha, semantic_by_alpha;
  std::vector<SessionRow> rows;

  std::string to_text() const {
    std::ostringstream o;
    o << std::setprecision(10);
    o << "sessions = " << sessions << "\n"
      << "style_alignment = " << style_alignment << "\n"
      << "semantic_alignment = " << semantic_alignment << "\n"
      << "gram_cosine = " << gram_cosine << "\n"
      << "fidelity = " << fidelity << "\n"
      << "recon_style_alignment = " << recon_style_alignment << "\n"
      << "recon_semantic_alignment = " << recon_semantic_alignment << "\n"
      << "recon_gram_cosine = " << recon_gram_cosine << "\n"
      << "recon_fidelity = " << recon_fidelity << "\n"
      << "mean_chosen_alpha = " << mean_chosen_alpha << "\n";
    for (std::size_t i = 0; i < alpha.size(); ++i)
      o << "alpha_" << std::fixed << std::setprecision(1) << alpha[i] << std::defaultfloat << std::setprecision(10)
        << " = style:" << style_by_alpha[i] << " semantic:" << semantic_by_alpha[i] << "\n";
    return o.str();
  }

  std::string table() const {
    std::ostringstream o;
    o << std::setprecision(10);
    o << "session,user,chosen_alpha,style,semantic,gram_cosine,recon_style,recon_semantic,recon_gram_cosine\n";
    for (const auto& r : rows)
      o << r.index << "," << r.user << "," << r.chosen_alpha << "," << r.style << "," << r.semantic << ","
        << r.gram_cosine << "," << r.recon_style << "," << r.recon_semantic << "," << r.recon_gram_cosine << "\n";
    return o.str();
  }
};

// Sweeps every session (in parallel when workers > 1; reduction happens in
// session order afterwards, so results do not depend on the worker count).
template <class T>
EvalReport evaluate_sessions(const DrcModel<T>& model, const vq::Codebook& cb,
                             const std::vector<world::UserSession>& sessions, double alpha_s = 0.2, int workers = 1) {
  require(!sessions.empty(), "evaluate_sessions: no sessions");
  const std::size_t n = sessions.size();
  std::vector<SweepResult> sweeps(n);
  std::vector<ImageScore> recon(n);
  world::parallel_for(n, workers, [&](std::size_t i) {
    const SessionTokens tok = tokenize(sessions[i], cb);
    sweeps[i] = alpha_sweep(model, cb, sessions[i], tok, 0, alpha_s);
    recon[i] = recon_baseline(cb, sessions[i], 0);
  });

  EvalReport rep;
  rep.sessions = n;
  rep.alpha = alpha_grid();
  rep.style_by_alpha.assign(rep.alpha.size(), 0.0);
  rep.semantic_by_alpha.assign(rep.alpha.size(), 0.0);
  std::vector<world::ToyImage> real, generated, recon_imgs;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& sw = sweeps[i];
    const auto& b = sw.best();
    SessionRow row;
    row.index = i;
    row.user = sessions[i].user_id;
    row.chosen_alpha = b.alpha_m;
    row.style = b.style;
    row.semantic = b.semantic;
    row.gram_cosine = b.gram_cosine;
    row.recon_style = recon[i].style;
    row.recon_semantic = recon[i].semantic;
    row.recon_gram_cosine = recon[i].gram_cosine;
    for (std::size_t a = 0; a < sw.per_alpha.size(); ++a) {
      row.style_by_alpha.push_back(sw.per_alpha[a].style);
      row.semantic_by_alpha.push_back(sw.per_alpha[a].semantic);
      rep.style_by_alpha[a] += sw.per_alpha[a].style / static_cast<double>(n);
      rep.semantic_by_alpha[a] += sw.per_alpha[a].semantic / static_cast<double>(n);
    }
    rep.style_alignment += b.style / static_cast<double>(n);
    rep.semantic_alignment += b.semantic / static_cast<double>(n);
    rep.gram_cosine += b.gram_cosine / static_cast<double>(n);
    rep.recon_style_alignment += recon[i].style / static_cast<double>(n);
    rep.recon_semantic_alignment += recon[i].semantic / static_cast<double>(n);
    rep.recon_gram_cosine += recon[i].gram_cosine / static_cast<double>(n);
    rep.mean_chosen_alpha += b.alpha_m / static_cast<double>(n);
    real.push_back(sessions[i].target);
    generated.push_back(vq::decode(b.tokens, cb));
    recon_imgs.push_back(vq::decode(recon[i].tokens, cb));
    rep.rows.push_back(std::move(row));
  }
  if (n >= kMinFidSet) {
    rep.fidelity = fid_like(real, generated, workers);
    rep.recon_fidelity = fid_like(real, recon_imgs, workers);
  }
  return rep;
}

}  // namespace drc::eval
