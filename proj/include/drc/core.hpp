#pragma once

// Shared numeric aliases, error types, deterministic RNG and byte I/O helpers.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace drc {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// ----------------------------------------------------------------------------
// Errors. Each family maps to one CLI exit code.
// ----------------------------------------------------------------------------

struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VersionError : FormatError {
  using FormatError::FormatError;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InputError(msg);
}

// ----------------------------------------------------------------------------
// RNG. xoshiro256** seeded through splitmix64; every distribution is
// implemented here so draws are identical across platforms and compilers.
// ----------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed)), seed_(seed) { refill_seed(); }

  // Independent stream for (seed, stream index), e.g. one per record or shard.
  static Rng derive(uint64_t seed, uint64_t stream) {
    return Rng(splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ull)));
  }

  uint64_t next() {
    // xoshiro256** over a splitmix-seeded state.
    const uint64_t result = std::rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = std::rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), unbiased.
  uint64_t below(uint64_t n) {
    if (n == 0) throw InputError("Rng::below(0)");
    const uint64_t limit = ~uint64_t{0} - (~uint64_t{0} % n);
    uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t seed() const { return seed_; }

 private:
  void refill_seed() {
    uint64_t x = state_;
    for (auto& s : s_) {
      x = splitmix64(x);
      s = x;
    }
  }

  uint64_t state_;
  uint64_t seed_;
  uint64_t s_[4]{};
};

// ----------------------------------------------------------------------------
// Hashing (FNV-1a, 64 bit). Used for content hashes in manifests and
// checkpoints, not for security.
// ----------------------------------------------------------------------------

inline uint64_t fnv1a(const void* data, std::size_t n, uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xCBF29CE484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

// ----------------------------------------------------------------------------
// Little-endian binary I/O.
// ----------------------------------------------------------------------------

namespace io {

template <class U>
  requires std::is_integral_v<U>
void put(std::vector<uint8_t>& buf, U v) {
  using UU = std::make_unsigned_t<U>;
  auto u = static_cast<UU>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf.push_back(static_cast<uint8_t>(u & 0xFF));
    u = static_cast<UU>(u >> 8);
  }
}

inline void put_f64(std::vector<uint8_t>& buf, double v) { put(buf, std::bit_cast<uint64_t>(v)); }

inline void put_bytes(std::vector<uint8_t>& buf, std::string_view s) { buf.insert(buf.end(), s.begin(), s.end()); }

// Bounds-checked reader over a byte span.
class Reader {
 public:
  Reader(const uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <class U>
    requires std::is_integral_v<U>
  U get() {
    need(sizeof(U));
    std::make_unsigned_t<U> u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      u |= static_cast<std::make_unsigned_t<U>>(static_cast<std::make_unsigned_t<U>>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return static_cast<U>(u);
  }

  double get_f64() { return std::bit_cast<double>(get<uint64_t>()); }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  const uint8_t* take(std::size_t n) {
    need(n);
    const uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return size_ - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > size_) throw FormatError("truncated binary data");
  }

  const uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace io

// ----------------------------------------------------------------------------
// Parameter reflection. Every weight struct exposes
//   template <class Self, class F> static void fields(Self& self, F&& f);
// which calls f(name, member) for each Eigen member or nested weight struct.
// ----------------------------------------------------------------------------

template <class M>
inline constexpr bool is_eigen_v = std::is_base_of_v<Eigen::EigenBase<std::remove_cvref_t<M>>, std::remove_cvref_t<M>>;

template <class W, class F>
void visit_params(W& w, F& f, const std::string& prefix = {}) {
  std::remove_const_t<W>::fields(w, [&](const auto& name, auto& member) {
    const std::string full = prefix.empty() ? std::string(name) : prefix + "." + std::string(name);
    if constexpr (is_eigen_v<decltype(member)>) {
      f(full, member);
    } else {
      visit_params(member, f, full);
    }
  });
}

template <class T>
struct ParamRef {
  std::string name;
  T* data;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const { return rows * cols; }
};

template <class T, class W>
std::vector<ParamRef<T>> param_list(W& w) {
  std::vector<ParamRef<T>> out;
  auto f = [&](const std::string& name, auto& m) { out.push_back({name, m.data(), m.rows(), m.cols()}); };
  visit_params(w, f);
  return out;
}

template <class W>
void zero_params(W& w) {
  auto f = [](const std::string&, auto& m) { m.setZero(); };
  visit_params(w, f);
}

template <class W>
W zeros_like(const W& w) {
  W z = w;
  zero_params(z);
  return z;
}

template <class W>
std::size_t param_count(const W& w) {
  std::size_t n = 0;
  auto f = [&](const std::string&, const auto& m) { n += static_cast<std::size_t>(m.size()); };
  visit_params(w, f);
  return n;
}

template <class W>
bool all_finite(const W& w) {
  bool ok = true;
  auto f = [&](const std::string&, const auto& m) { ok = ok && m.allFinite(); };
  visit_params(w, f);
  return ok;
}

// Converts parameter precision, e.g. a float training model into a double
// model for finite-difference checks.
template <class Dst, class Src>
void copy_params(Dst& dst, const Src& src) {
  auto d = param_list<typename Dst::Scalar>(dst);
  const auto s = param_list<const typename Src::Scalar>(src);
  if (d.size() != s.size()) throw InputError("copy_params: structure mismatch");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i].size() != s[i].size()) throw InputError("copy_params: shape mismatch at " + d[i].name);
    for (Eigen::Index k = 0; k < d[i].size(); ++k) d[i].data[k] = static_cast<typename Dst::Scalar>(s[i].data[k]);
  }
}

template <class T>
void init_normal(Mat<T>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
}

template <class T>
void init_normal(RowVec<T>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
}

}  // namespace drc
