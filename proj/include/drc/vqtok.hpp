#pragma once

// Frozen k-means patch codebook: images <-> fixed-length token sequences.

#include "drc/toyworld.hpp"

#include <limits>
#include <unordered_map>

namespace drc::vq {

inline constexpr int kPatchDim = world::kPatch * world::kPatch * world::kChannels;  // 48
inline constexpr int kSeqLen = world::kGrid * world::kGrid;                           // 64
inline constexpr uint32_t kCodebookVersion = 1;
inline constexpr int kMaxIterations = 50;

using TokenSequence = std::vector<int>;

struct Codebook {
  Mat<double> centroids;  // V x kPatchDim
  uint64_t fit_seed = 0;
  uint32_t version = kCodebookVersion;

  int size() const { return static_cast<int>(centroids.rows()); }
};

// Patch p (row-major over the 8x8 grid) flattened as 4x4 pixels x RGB.
inline Mat<double> patches(const world::ToyImage& img) {
  Mat<double> out(kSeqLen, kPatchDim);
  for (int py = 0; py < world::kGrid; ++py)
    for (int px = 0; px < world::kGrid; ++px) {
      int k = 0;
      for (int y = 0; y < world::kPatch; ++y)
        for (int x = 0; x < world::kPatch; ++x)
          for (int c = 0; c < world::kChannels; ++c)
            out(py * world::kGrid + px, k++) = img.at(py * world::kPatch + y, px * world::kPatch + x, c);
    }
  return out;
}

namespace detail {

inline int nearest(const Mat<double>& centroids, const double* v) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < centroids.rows(); ++c) {
    const double* cr = centroids.row(c).data();
    double d = 0.0;
    for (int k = 0; k < kPatchDim; ++k) {
      const double t = v[k] - cr[k];
      d += t * t;
    }
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

struct PatchKeyHash {
  std::size_t operator()(const std::vector<float>& v) const { return fnv1a(v.data(), v.size() * sizeof(float)); }
};

}  // namespace detail

// k-means over all corpus patches. Lloyd iterations run on distinct patches
// weighted by multiplicity, which is exactly equivalent to running on the full
// patch multiset. Initialization is k-means++ over distinct patches.
inline Codebook fit_codebook(const std::vector<world::ToyImage>& corpus, int V, uint64_t seed) {
  require(V >= 2, "fit_codebook: V must be >= 2");
  std::unordered_map<std::vector<float>, std::size_t, detail::PatchKeyHash> index;
  std::vector<std::vector<float>> distinct;
  std::vector<double> weight;
  for (const auto& img : corpus) {
    const Mat<double> p = patches(img);
    for (int r = 0; r < p.rows(); ++r) {
      std::vector<float> key(kPatchDim);
      for (int k = 0; k < kPatchDim; ++k) key[static_cast<std::size_t>(k)] = static_cast<float>(p(r, k));
      auto [it, inserted] = index.try_emplace(key, distinct.size());
      if (inserted) {
        distinct.push_back(std::move(key));
        weight.push_back(0.0);
      }
      weight[it->second] += 1.0;
    }
  }
  require(distinct.size() >= static_cast<std::size_t>(V),
          "fit_codebook: corpus has " + std::to_string(distinct.size()) + " distinct patches, fewer than V=" +
              std::to_string(V));

  const auto n = static_cast<Eigen::Index>(distinct.size());
  Mat<double> X(n, kPatchDim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < kPatchDim; ++k) X(i, k) = distinct[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];

  Rng rng(seed);
  Mat<double> C(V, kPatchDim);
  ColVec<double> d2 = ColVec<double>::Constant(n, std::numeric_limits<double>::infinity());
  Eigen::Index first = static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n)));
  C.row(0) = X.row(first);
  for (int c = 1; c < V; ++c) {
    d2 = d2.cwiseMin((X.rowwise() - C.row(c - 1)).rowwise().squaredNorm());
    const double total = d2.sum();
    // Already-chosen points have d2 == 0 and can never be drawn again.
    Eigen::Index pick = -1, last = 0;
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (d2(i) <= 0.0) continue;
      acc += d2(i);
      last = i;
      if (acc > u) {
        pick = i;
        break;
      }
    }
    C.row(c) = X.row(pick >= 0 ? pick : last);
  }

  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < kMaxIterations; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = detail::nearest(C, X.row(i).data());
      if (a != assign[static_cast<std::size_t>(i)]) {
        assign[static_cast<std::size_t>(i)] = a;
        changed = true;
      }
    }
    if (!changed) break;
    Mat<double> sum = Mat<double>::Zero(V, kPatchDim);
    ColVec<double> cnt = ColVec<double>::Zero(V);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = assign[static_cast<std::size_t>(i)];
      sum.row(a) += weight[static_cast<std::size_t>(i)] * X.row(i);
      cnt(a) += weight[static_cast<std::size_t>(i)];
    }
    for (int c = 0; c < V; ++c) {
      if (cnt(c) > 0.0) {
        C.row(c) = sum.row(c) / cnt(c);
      } else {
        // Empty cluster: move it to the distinct patch worst served so far.
        Eigen::Index far = 0;
        double far_d = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d = (X.row(i) - C.row(assign[static_cast<std::size_t>(i)])).squaredNorm() * weight[static_cast<std::size_t>(i)];
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        C.row(c) = X.row(far);
        assign[static_cast<std::size_t>(far)] = c;
      }
    }
  }
  return {C, seed, kCodebookVersion};
}

inline TokenSequence encode(const world::ToyImage& img, const Codebook& cb) {
  require(cb.size() >= 2 && cb.centroids.cols() == kPatchDim, "encode: invalid codebook");
  const Mat<double> p = patches(img);
  TokenSequence out(kSeqLen);
  for (int r = 0; r < kSeqLen; ++r) out[static_cast<std::size_t>(r)] = detail::nearest(cb.centroids, p.row(r).data());
  return out;
}

inline world::ToyImage decode(const TokenSequence& tokens, const Codebook& cb) {
  require(static_cast<int>(tokens.size()) == kSeqLen, "decode: token sequence must have length " + std::to_string(kSeqLen));
  world::ToyImage img;
  for (int p = 0; p < kSeqLen; ++p) {
    const int t = tokens[static_cast<std::size_t>(p)];
    require(t >= 0 && t < cb.size(), "decode: token id " + std::to_string(t) + " out of range");
    const int py = p / world::kGrid, px = p % world::kGrid;
    int k = 0;
    for (int y = 0; y < world::kPatch; ++y)
      for (int x = 0; x < world::kPatch; ++x)
        for (int c = 0; c < world::kChannels; ++c) {
          const double v = std::clamp(cb.centroids(t, k++), 0.0, 1.0);
          img.pixels[(static_cast<std::size_t>(py * world::kPatch + y) * world::kImageSize + px * world::kPatch + x) *
                         world::kChannels +
                     c] = static_cast<float>(v);
        }
  }
  return img;
}

inline double mean_abs_error(const world::ToyImage& a, const world::ToyImage& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) s += std::abs(static_cast<double>(a.pixels[i]) - b.pixels[i]);
  return s / static_cast<double>(a.pixels.size());
}

// Mean squared patch-to-centroid distance over a corpus.
inline double distortion(const std::vector<world::ToyImage>& corpus, const Codebook& cb) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& img : corpus) {
    const Mat<double> p = patches(img);
    const TokenSequence t = encode(img, cb);
    for (int r = 0; r < kSeqLen; ++r) {
      s += (p.row(r) - cb.centroids.row(t[static_cast<std::size_t>(r)])).squaredNorm();
      ++n;
    }
  }
  return s / static_cast<double>(n);
}

// Codebook file: "DRCB" | u32 version | u32 V | u32 p | V*p f64 row-major.
inline std::vector<uint8_t> serialize(const Codebook& cb) {
  std::vector<uint8_t> out;
  io::put_bytes(out, "DRCB");
  io::put(out, cb.version);
  io::put(out, static_cast<uint32_t>(cb.centroids.rows()));
  io::put(out, static_cast<uint32_t>(cb.centroids.cols()));
  for (Eigen::Index i = 0; i < cb.centroids.size(); ++i) io::put_f64(out, cb.centroids.data()[i]);
  return out;
}

inline Codebook deserialize(const std::vector<uint8_t>& bytes) {
  io::Reader r(bytes.data(), bytes.size());
  if (r.get_string(4) != "DRCB") throw FormatError("not a DRCB codebook file");
  Codebook cb;
  cb.version = r.get<uint32_t>();
  if (cb.version != kCodebookVersion) throw VersionError("codebook version " + std::to_string(cb.version));
  const auto V = r.get<uint32_t>();
  const auto p = r.get<uint32_t>();
  if (p != kPatchDim || V < 2) throw FormatError("codebook shape mismatch");
  cb.centroids.resize(V, p);
  for (Eigen::Index i = 0; i < cb.centroids.size(); ++i) cb.centroids.data()[i] = r.get_f64();
  if (r.remaining() != 0) throw FormatError("trailing bytes in codebook file");
  return cb;
}

inline void save_codebook(const std::filesystem::path& p, const Codebook& cb) { world::detail::write_file(p, serialize(cb)); }
inline Codebook load_codebook(const std::filesystem::path& p) { return deserialize(world::detail::read_file(p)); }

}  // namespace drc::vq
