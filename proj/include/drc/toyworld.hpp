#pragma once

// Synthetic factor world: rendering, contrastive triplets, personalization
// sessions and the versioned record-stream dataset format.

#include "drc/core.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

namespace drc::world {

inline constexpr int kImageSize = 32;
inline constexpr int kPatch = 4;
inline constexpr int kGrid = kImageSize / kPatch;  // patches per side
inline constexpr int kChannels = 3;
inline constexpr std::size_t kPixelCount = std::size_t{kImageSize} * kImageSize * kChannels;

inline constexpr int kPalettes = 8;
inline constexpr int kBackgrounds = 4;
inline constexpr int kStrokes = 3;
inline constexpr int kShapes = 6;
inline constexpr int kCounts = 3;  // count values are 1..3
inline constexpr int kLayouts = 4;
inline constexpr int kStyleCombos = kPalettes * kBackgrounds * kStrokes;
inline constexpr int kSemanticCombos = kShapes * kCounts * kLayouts;

inline constexpr std::array<const char*, kShapes> kShapeNames{"circle", "square", "triangle", "cross", "star", "ring"};
inline constexpr std::array<const char*, kBackgrounds> kBackgroundNames{"plain", "stripes", "dots", "checker"};
inline constexpr std::array<const char*, kStrokes> kStrokeNames{"thin", "medium", "thick"};

struct StyleFactors {
  uint8_t palette = 0;
  uint8_t background = 0;
  uint8_t stroke = 0;

  bool operator==(const StyleFactors&) const = default;
  auto operator<=>(const StyleFactors&) const = default;

  int index() const { return (palette * kBackgrounds + background) * kStrokes + stroke; }
  static StyleFactors from_index(int i) {
    return {static_cast<uint8_t>(i / (kBackgrounds * kStrokes)), static_cast<uint8_t>((i / kStrokes) % kBackgrounds),
            static_cast<uint8_t>(i % kStrokes)};
  }
};

struct SemanticFactors {
  uint8_t shape = 0;
  uint8_t count = 1;
  uint8_t layout = 0;

  bool operator==(const SemanticFactors&) const = default;
  auto operator<=>(const SemanticFactors&) const = default;

  int index() const { return (shape * kCounts + (count - 1)) * kLayouts + layout; }
  static SemanticFactors from_index(int i) {
    return {static_cast<uint8_t>(i / (kCounts * kLayouts)), static_cast<uint8_t>((i / kLayouts) % kCounts + 1),
            static_cast<uint8_t>(i % kLayouts)};
  }
};

struct FactorSpec {
  StyleFactors style;
  SemanticFactors semantic;
  bool operator==(const FactorSpec&) const = default;
};

// Ground-truth factor labels in a fixed order, used by probes.
inline constexpr int kFactorCount = 6;
inline constexpr std::array<const char*, kFactorCount> kFactorNames{"palette", "background", "stroke",
                                                                    "shape",   "count",      "layout"};
inline constexpr std::array<int, kFactorCount> kFactorClasses{kPalettes, kBackgrounds, kStrokes,
                                                              kShapes,   kCounts,      kLayouts};

inline std::array<int, kFactorCount> factor_labels(const FactorSpec& f) {
  return {f.style.palette, f.style.background, f.style.stroke, f.semantic.shape, f.semantic.count - 1, f.semantic.layout};
}

inline void validate(const StyleFactors& s) {
  require(s.palette < kPalettes, "palette_id out of range: " + std::to_string(s.palette));
  require(s.background < kBackgrounds, "background_id out of range: " + std::to_string(s.background));
  require(s.stroke < kStrokes, "stroke_id out of range: " + std::to_string(s.stroke));
}

inline void validate(const SemanticFactors& s) {
  require(s.shape < kShapes, "shape_id out of range: " + std::to_string(s.shape));
  require(s.count >= 1 && s.count <= kCounts, "count out of range: " + std::to_string(s.count));
  require(s.layout < kLayouts, "layout_id out of range: " + std::to_string(s.layout));
}

inline void validate(const FactorSpec& f) {
  validate(f.style);
  validate(f.semantic);
}

// Pixels are HWC row-major in [0,1]. Dataset images always carry factors;
// decoded token sequences do not.
struct ToyImage {
  std::vector<float> pixels = std::vector<float>(kPixelCount, 0.0f);
  std::optional<FactorSpec> factors;
  uint64_t render_seed = 0;

  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * kImageSize + x) * kChannels + c]; }

  bool same_pixels(const ToyImage& o) const { return pixels == o.pixels; }

  // Canonical 8-bit serialization of the pixel buffer.
  std::vector<uint8_t> to_bytes() const {
    std::vector<uint8_t> out(kPixelCount);
    for (std::size_t i = 0; i < kPixelCount; ++i) {
      const float v = std::clamp(pixels[i], 0.0f, 1.0f);
      out[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
    }
    return out;
  }

  static std::vector<float> pixels_from_bytes(const uint8_t* p) {
    std::vector<float> px(kPixelCount);
    for (std::size_t i = 0; i < kPixelCount; ++i) px[i] = static_cast<float>(p[i]) / 255.0f;
    return px;
  }
};

// ----------------------------------------------------------------------------
// Rendering
// ----------------------------------------------------------------------------

namespace detail {

using Rgb = std::array<uint8_t, 3>;

struct Palette {
  Rgb bg, bg2, fill, ink;
};

inline constexpr std::array<Palette, kPalettes> kPaletteTable{{
    {{235, 225, 200}, {196, 182, 146}, {220, 60, 50}, {70, 20, 20}},     // cream / red
    {{200, 225, 245}, {146, 182, 222}, {30, 90, 200}, {10, 30, 90}},     // sky / blue
    {{210, 240, 205}, {156, 210, 146}, {40, 150, 60}, {10, 60, 20}},     // mint / green
    {{245, 215, 235}, {222, 156, 200}, {170, 40, 150}, {70, 10, 60}},    // pink / magenta
    {{250, 240, 180}, {226, 202, 106}, {230, 150, 20}, {110, 60, 0}},    // lemon / orange
    {{60, 60, 72}, {96, 96, 112}, {240, 240, 240}, {150, 150, 165}},     // slate / white
    {{30, 40, 72}, {58, 72, 116}, {250, 210, 60}, {150, 100, 10}},       // navy / gold
    {{72, 30, 30}, {112, 56, 50}, {120, 220, 210}, {30, 120, 110}},      // maroon / teal
}};

// 3x3 cell templates, row-major from the top.
inline constexpr std::array<std::array<uint8_t, 9>, kShapes> kShapeTemplates{{
    {0, 1, 0, 1, 1, 1, 0, 1, 0},  // circle (rounded blob)
    {1, 1, 1, 1, 1, 1, 1, 1, 1},  // square
    {1, 0, 0, 1, 1, 0, 1, 1, 1},  // triangle
    {1, 0, 1, 0, 1, 0, 1, 0, 1},  // cross
    {0, 1, 0, 1, 1, 1, 1, 0, 1},  // star
    {1, 1, 1, 1, 0, 1, 1, 1, 1},  // ring
}};

// Quadrants clockwise from the upper left, in patch-grid units.
inline constexpr std::array<std::array<int, 2>, kLayouts> kQuadrantOrigin{{{0, 0}, {4, 0}, {4, 4}, {0, 4}}};

inline bool background_secondary(int bg, int x, int y) {
  switch (bg) {
    case 0:
      return false;
    case 1:
      return (y % 4) < 2;
    case 2:
      return (x % 4 == 1 || x % 4 == 2) && (y % 4 == 1 || y % 4 == 2);
    default:
      return ((x / 2) + (y / 2)) % 2 == 1;
  }
}

// Small deterministic per-pixel grain; a function of style and position only.
inline int grain(const StyleFactors& s, int x, int y, int c) {
  const uint64_t h = splitmix64((static_cast<uint64_t>(s.index()) << 32) ^ (static_cast<uint64_t>(y) << 16) ^
                                (static_cast<uint64_t>(x) << 4) ^ static_cast<uint64_t>(c));
  return static_cast<int>(h % 7) - 3;
}

}  // namespace detail

// Foreground cells on the patch grid (kGrid x kGrid, row-major). Depends only
// on the semantic factors and the render seed.
inline std::array<uint8_t, kGrid * kGrid> foreground_cells(const SemanticFactors& sem, uint64_t render_seed) {
  validate(sem);
  std::array<uint8_t, kGrid * kGrid> cells{};
  Rng rng(render_seed);
  const auto& tmpl = detail::kShapeTemplates[sem.shape];
  for (int i = 0; i < sem.count; ++i) {
    const auto& q = detail::kQuadrantOrigin[(sem.layout + i) % kLayouts];
    const int jx = static_cast<int>(rng.below(2));
    const int jy = static_cast<int>(rng.below(2));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        if (tmpl[r * 3 + c]) cells[static_cast<std::size_t>((q[1] + jy + r) * kGrid + q[0] + jx + c)] = 1;
  }
  return cells;
}

// Pixel-level foreground mask (kImageSize x kImageSize).
inline std::vector<uint8_t> silhouette(const SemanticFactors& sem, uint64_t render_seed) {
  const auto cells = foreground_cells(sem, render_seed);
  std::vector<uint8_t> mask(std::size_t{kImageSize} * kImageSize);
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x)
      mask[static_cast<std::size_t>(y * kImageSize + x)] = cells[static_cast<std::size_t>((y / kPatch) * kGrid + x / kPatch)];
  return mask;
}

inline ToyImage render(const FactorSpec& factors, uint64_t render_seed) {
  validate(factors);
  const auto cells = foreground_cells(factors.semantic, render_seed);
  const auto& pal = detail::kPaletteTable[factors.style.palette];
  const int ink_rows = factors.style.stroke + 1;

  ToyImage img;
  img.factors = factors;
  img.render_seed = render_seed;
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const bool fg = cells[static_cast<std::size_t>((y / kPatch) * kGrid + x / kPatch)] != 0;
      const detail::Rgb& base = fg ? ((y % kPatch) < ink_rows ? pal.ink : pal.fill)
                                   : (detail::background_secondary(factors.style.background, x, y) ? pal.bg2 : pal.bg);
      for (int c = 0; c < kChannels; ++c) {
        const int v = std::clamp(base[static_cast<std::size_t>(c)] + detail::grain(factors.style, x, y, c), 0, 255);
        img.pixels[(static_cast<std::size_t>(y) * kImageSize + x) * kChannels + c] = static_cast<float>(v) / 255.0f;
      }
    }
  }
  return img;
}

inline FactorSpec random_factors(Rng& rng) {
  FactorSpec f;
  f.style.palette = static_cast<uint8_t>(rng.below(kPalettes));
  f.style.background = static_cast<uint8_t>(rng.below(kBackgrounds));
  f.style.stroke = static_cast<uint8_t>(rng.below(kStrokes));
  f.semantic.shape = static_cast<uint8_t>(rng.below(kShapes));
  f.semantic.count = static_cast<uint8_t>(rng.below(kCounts) + 1);
  f.semantic.layout = static_cast<uint8_t>(rng.below(kLayouts));
  return f;
}

// ----------------------------------------------------------------------------
// Text instructions
// ----------------------------------------------------------------------------

// Text vocabulary: the fixed hybrid-prompt words, then count, shape and
// layout words.
inline constexpr std::array<const char*, 8> kPromptWords{"create", "an",        "image",     "that",
                                                         "meets",  "the",       "specified", "requirements"};
inline constexpr std::array<const char*, kCounts> kCountWords{"one", "two", "three"};
inline constexpr std::array<const char*, kLayouts> kLayoutWords{"upper-left", "upper-right", "lower-right",
                                                                "lower-left"};
inline constexpr int kCountWordBase = static_cast<int>(kPromptWords.size());
inline constexpr int kShapeWordBase = kCountWordBase + kCounts;
inline constexpr int kLayoutWordBase = kShapeWordBase + kShapes;
inline constexpr int kTextVocab = kLayoutWordBase + kLayouts;
inline constexpr std::size_t kMaxTextLength = 16;

struct TextInstruction {
  std::vector<uint8_t> token_ids;
  bool operator==(const TextInstruction&) const = default;
};

// The fixed hybrid prompt alone (used for reconstruction in stage 1).
inline TextInstruction prompt_prefix() {
  TextInstruction t;
  for (std::size_t i = 0; i < kPromptWords.size(); ++i) t.token_ids.push_back(static_cast<uint8_t>(i));
  return t;
}

inline TextInstruction text_instruction(const SemanticFactors& sem) {
  validate(sem);
  TextInstruction t = prompt_prefix();
  t.token_ids.push_back(static_cast<uint8_t>(kCountWordBase + sem.count - 1));
  t.token_ids.push_back(static_cast<uint8_t>(kShapeWordBase + sem.shape));
  t.token_ids.push_back(static_cast<uint8_t>(kLayoutWordBase + sem.layout));
  return t;
}

inline std::string text_word(int id) {
  if (id < kCountWordBase) return kPromptWords[static_cast<std::size_t>(id)];
  if (id < kShapeWordBase) return kCountWords[static_cast<std::size_t>(id - kCountWordBase)];
  if (id < kLayoutWordBase) return kShapeNames[static_cast<std::size_t>(id - kShapeWordBase)];
  if (id < kTextVocab) return kLayoutWords[static_cast<std::size_t>(id - kLayoutWordBase)];
  throw InputError("text token out of range: " + std::to_string(id));
}

// ----------------------------------------------------------------------------
// Contrastive triplets
// ----------------------------------------------------------------------------

struct TripletRecord {
  ToyImage anchor;
  ToyImage pos_style;
  ToyImage pos_semantic;
};

namespace detail {
inline uint8_t draw_excluding(Rng& rng, int n, int excluded) {
  const int v = static_cast<int>(rng.below(static_cast<uint64_t>(n - 1)));
  return static_cast<uint8_t>(v >= excluded ? v + 1 : v);
}
}  // namespace detail

// pos_style keeps the anchor's style and redraws every semantic factor from
// the values the anchor does not use; pos_semantic does the same for style
// and reuses the anchor's render seed, so its silhouette is identical.
inline TripletRecord build_triplet(const FactorSpec& anchor_factors, Rng& rng) {
  validate(anchor_factors);
  const uint64_t anchor_seed = rng.next();

  FactorSpec style_f = anchor_factors;
  style_f.semantic.shape = detail::draw_excluding(rng, kShapes, anchor_factors.semantic.shape);
  style_f.semantic.count = static_cast<uint8_t>(detail::draw_excluding(rng, kCounts, anchor_factors.semantic.count - 1) + 1);
  style_f.semantic.layout = detail::draw_excluding(rng, kLayouts, anchor_factors.semantic.layout);
  const uint64_t style_seed = rng.next();

  FactorSpec sem_f = anchor_factors;
  sem_f.style.palette = detail::draw_excluding(rng, kPalettes, anchor_factors.style.palette);
  sem_f.style.background = detail::draw_excluding(rng, kBackgrounds, anchor_factors.style.background);
  sem_f.style.stroke = detail::draw_excluding(rng, kStrokes, anchor_factors.style.stroke);

  return {render(anchor_factors, anchor_seed), render(style_f, style_seed), render(sem_f, anchor_seed)};
}

inline bool triplet_invariants_hold(const TripletRecord& t) {
  if (!t.anchor.factors || !t.pos_style.factors || !t.pos_semantic.factors) return false;
  const auto& a = *t.anchor.factors;
  const auto& s = *t.pos_style.factors;
  const auto& m = *t.pos_semantic.factors;
  return s.style == a.style && s.semantic != a.semantic && m.semantic == a.semantic && m.style != a.style;
}

// Nearest neighbour by mean squared error between style features. Pool
// entries pixel-identical to the anchor are skipped when exclude_identical is
// set; ties go to the lowest pool index.
template <class FeatureFn>
std::size_t style_nn_select(const ToyImage& anchor, const std::vector<ToyImage>& pool, FeatureFn&& style_feat,
                            bool exclude_identical = true) {
  require(!pool.empty(), "style_nn_select: empty pool");
  const std::vector<double> fa = style_feat(anchor);
  std::optional<std::size_t> best;
  double best_d = 0.0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (exclude_identical && pool[i].same_pixels(anchor)) continue;
    const std::vector<double> fp = style_feat(pool[i]);
    require(fp.size() == fa.size(), "style_nn_select: feature size mismatch");
    double d = 0.0;
    for (std::size_t k = 0; k < fa.size(); ++k) d += (fa[k] - fp[k]) * (fa[k] - fp[k]);
    d /= static_cast<double>(fa.size());
    if (!best || d < best_d) {
      best = i;
      best_d = d;
    }
  }
  require(best.has_value(), "style_nn_select: every pool entry equals the anchor");
  return *best;
}

// ----------------------------------------------------------------------------
// Semantic-preserving augmentation and personalization sessions
// ----------------------------------------------------------------------------

// k re-renders of the target with its semantics and silhouette but pairwise
// distinct styles, none equal to the target's.
inline std::vector<ToyImage> augment_semantic_preserving(const ToyImage& target, int k, Rng& rng) {
  require(target.factors.has_value(), "augment_semantic_preserving: target has no factors");
  require(k >= 1, "augment_semantic_preserving: k must be >= 1");
  require(k <= kStyleCombos - 1, "augment_semantic_preserving: k exceeds available distinct styles (" +
                                     std::to_string(kStyleCombos - 1) + ")");
  const int own = target.factors->style.index();
  std::vector<int> others;
  for (int i = 0; i < kStyleCombos; ++i)
    if (i != own) others.push_back(i);
  // Partial Fisher-Yates: first k entries are a uniform k-subset.
  for (int i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(others.size() - static_cast<std::size_t>(i));
    std::swap(others[static_cast<std::size_t>(i)], others[j]);
  }
  std::vector<ToyImage> out;
  for (int i = 0; i < k; ++i) {
    FactorSpec f = *target.factors;
    f.style = StyleFactors::from_index(others[static_cast<std::size_t>(i)]);
    out.push_back(render(f, target.render_seed));
  }
  return out;
}

struct UserSession {
  uint32_t user_id = 0;
  std::vector<ToyImage> history;
  std::vector<ToyImage> reference_set;
  TextInstruction text_instruction;
  ToyImage target;
};

inline bool session_invariants_hold(const UserSession& s, bool allow_persona_jitter = false) {
  if (s.history.empty() || s.reference_set.empty() || !s.target.factors) return false;
  for (const auto& r : s.reference_set)
    if (!r.factors || r.factors->semantic != s.target.factors->semantic) return false;
  if (!allow_persona_jitter)
    for (const auto& h : s.history)
      if (!h.factors || h.factors->style != s.target.factors->style) return false;
  return s.text_instruction.token_ids.size() <= kMaxTextLength;
}

struct SplitSizes {
  std::size_t train = 0, valid = 0, test = 0;
  std::size_t total() const { return train + valid + test; }
};

// 8:1:1 split with valid/test rounded to nearest and train taking the rest.
inline SplitSizes split_sizes(std::size_t n) {
  SplitSizes s;
  s.valid = (n + 5) / 10;
  s.test = (n + 5) / 10;
  if (s.valid + s.test > n) s.valid = s.test = n / 2;
  s.train = n - s.valid - s.test;
  return s;
}

struct PersonalConfig {
  int num_users = 96;
  int sessions_per_user = 50;
  int history_len = 4;
  int reference_count = 4;
  bool persona_jitter = false;  // one history image in four gets one style factor changed
  int workers = 1;
};

struct PersonalDataset {
  std::vector<UserSession> train, valid, test;
  std::vector<StyleFactors> personas;
};

template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n));
  if (w == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += w) fn(i);
    });
  }
  for (auto& th : threads) th.join();
}

inline PersonalDataset build_personal_dataset(const PersonalConfig& cfg, uint64_t seed) {
  require(cfg.num_users >= 1 && cfg.sessions_per_user >= 1, "build_personal_dataset: counts must be positive");
  require(cfg.history_len >= 1 && cfg.reference_count >= 1, "build_personal_dataset: N and K must be >= 1");
  require(cfg.num_users <= kStyleCombos, "build_personal_dataset: " + std::to_string(cfg.num_users) +
                                             " users requested but only " + std::to_string(kStyleCombos) +
                                             " distinct personas exist");
  // Distinct targets per user are bounded by semantic combinations times the
  // 4^count silhouette jitters.
  require(cfg.sessions_per_user <= kSemanticCombos * 4,
          "build_personal_dataset: too many sessions per user for distinct targets");

  Rng rng(seed);
  std::vector<int> style_ids(kStyleCombos);
  for (int i = 0; i < kStyleCombos; ++i) style_ids[static_cast<std::size_t>(i)] = i;
  rng.shuffle(style_ids);

  PersonalDataset ds;
  for (int u = 0; u < cfg.num_users; ++u) ds.personas.push_back(StyleFactors::from_index(style_ids[static_cast<std::size_t>(u)]));

  std::vector<std::vector<UserSession>> per_user(static_cast<std::size_t>(cfg.num_users));
  parallel_for(per_user.size(), cfg.workers, [&](std::size_t u) {
    Rng urng = Rng::derive(seed, u + 1);
    const StyleFactors persona = ds.personas[u];
    std::set<std::pair<int, std::array<uint8_t, kGrid * kGrid>>> seen;
    for (int s = 0; s < cfg.sessions_per_user; ++s) {
      UserSession sess;
      sess.user_id = static_cast<uint32_t>(u);
      int attempts = 0;
      while (true) {
        require(++attempts < 10000, "build_personal_dataset: could not draw a distinct target");
        FactorSpec tf = random_factors(urng);
        tf.style = persona;
        const uint64_t tseed = urng.next();
        auto key = std::make_pair(tf.semantic.index(), foreground_cells(tf.semantic, tseed));
        if (!seen.insert(key).second) continue;
        sess.target = render(tf, tseed);
        break;
      }
      for (int i = 0; i < cfg.history_len; ++i) {
        FactorSpec hf = random_factors(urng);
        hf.style = persona;
        if (cfg.persona_jitter && urng.below(4) == 0) {
          switch (urng.below(3)) {
            case 0: hf.style.palette = detail::draw_excluding(urng, kPalettes, persona.palette); break;
            case 1: hf.style.background = detail::draw_excluding(urng, kBackgrounds, persona.background); break;
            default: hf.style.stroke = detail::draw_excluding(urng, kStrokes, persona.stroke); break;
          }
        }
        sess.history.push_back(render(hf, urng.next()));
      }
      sess.reference_set = augment_semantic_preserving(sess.target, cfg.reference_count, urng);
      sess.text_instruction = text_instruction(sess.target.factors->semantic);
      per_user[u].push_back(std::move(sess));
    }
  });

  std::vector<UserSession> all;
  for (auto& v : per_user)
    for (auto& s : v) all.push_back(std::move(s));
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const SplitSizes sz = split_sizes(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < sz.train ? ds.train : (i < sz.train + sz.valid ? ds.valid : ds.test);
    dst.push_back(std::move(all[order[i]]));
  }
  return ds;
}

struct TripletDataset {
  std::vector<TripletRecord> train, valid, test;
};

// Record i draws from its own stream so output is independent of worker count.
inline TripletDataset build_triplet_dataset(std::size_t count, uint64_t seed, int workers = 1) {
  require(count >= 1, "build_triplet_dataset: count must be positive");
  std::vector<TripletRecord> all(count);
  parallel_for(count, workers, [&](std::size_t i) {
    Rng rng = Rng::derive(seed, 0x7000'0000ull + i);
    const FactorSpec f = random_factors(rng);
    all[i] = build_triplet(f, rng);
  });
  const SplitSizes sz = split_sizes(count);
  TripletDataset ds;
  for (std::size_t i = 0; i < count; ++i) {
    auto& dst = i < sz.train ? ds.train : (i < sz.train + sz.valid ? ds.valid : ds.test);
    dst.push_back(std::move(all[i]));
  }
  return ds;
}

// ----------------------------------------------------------------------------
// Record stream format
//   header: "DRCW" | u32 version | u64 record count          (16 bytes)
//   record: u32 payload length | payload
//   payload: u8 kind (1 triplet, 2 session) | body
//   image:  6 x u8 factor ids | u64 render seed | 32*32*3 u8 RGB, row-major
// ----------------------------------------------------------------------------

inline constexpr uint32_t kDatasetVersion = 1;
inline constexpr uint8_t kTripletKind = 1;
inline constexpr uint8_t kSessionKind = 2;

namespace detail {

inline void put_image(std::vector<uint8_t>& buf, const ToyImage& img) {
  require(img.factors.has_value(), "dataset image without factors");
  const auto& f = *img.factors;
  for (uint8_t b : {f.style.palette, f.style.background, f.style.stroke, f.semantic.shape, f.semantic.count, f.semantic.layout})
    buf.push_back(b);
  io::put(buf, img.render_seed);
  const auto px = img.to_bytes();
  buf.insert(buf.end(), px.begin(), px.end());
}

inline ToyImage get_image(io::Reader& r) {
  ToyImage img;
  FactorSpec f;
  f.style.palette = r.get<uint8_t>();
  f.style.background = r.get<uint8_t>();
  f.style.stroke = r.get<uint8_t>();
  f.semantic.shape = r.get<uint8_t>();
  f.semantic.count = r.get<uint8_t>();
  f.semantic.layout = r.get<uint8_t>();
  try {
    validate(f);
  } catch (const InputError& e) {
    throw FormatError(std::string("corrupt record: ") + e.what());
  }
  img.factors = f;
  img.render_seed = r.get<uint64_t>();
  img.pixels = ToyImage::pixels_from_bytes(r.take(kPixelCount));
  return img;
}

inline std::vector<uint8_t> header(uint64_t count) {
  std::vector<uint8_t> h;
  io::put_bytes(h, "DRCW");
  io::put(h, kDatasetVersion);
  io::put(h, count);
  return h;
}

inline void append_record(std::vector<uint8_t>& out, const std::vector<uint8_t>& payload) {
  io::put(out, static_cast<uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
}

inline std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifact("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Returns payload spans after validating the header.
inline std::vector<std::pair<std::size_t, std::size_t>> records(const std::vector<uint8_t>& bytes) {
  io::Reader r(bytes.data(), bytes.size());
  if (r.get_string(4) != "DRCW") throw FormatError("not a DRCW dataset file");
  const auto version = r.get<uint32_t>();
  if (version != kDatasetVersion)
    throw VersionError("dataset version " + std::to_string(version) + " != " + std::to_string(kDatasetVersion));
  const auto count = r.get<uint64_t>();
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (uint64_t i = 0; i < count; ++i) {
    const auto len = r.get<uint32_t>();
    spans.emplace_back(r.position(), len);
    r.take(len);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last record");
  return spans;
}

}  // namespace detail

inline std::vector<uint8_t> encode_triplets(const std::vector<TripletRecord>& recs) {
  std::vector<uint8_t> out = detail::header(recs.size());
  std::vector<uint8_t> payload;
  for (const auto& t : recs) {
    payload.clear();
    payload.push_back(kTripletKind);
    detail::put_image(payload, t.anchor);
    detail::put_image(payload, t.pos_style);
    detail::put_image(payload, t.pos_semantic);
    detail::append_record(out, payload);
  }
  return out;
}

inline std::vector<TripletRecord> decode_triplets(const std::vector<uint8_t>& bytes) {
  std::vector<TripletRecord> out;
  for (auto [pos, len] : detail::records(bytes)) {
    io::Reader r(bytes.data() + pos, len);
    if (r.get<uint8_t>() != kTripletKind) throw FormatError("expected a triplet record");
    TripletRecord t;
    t.anchor = detail::get_image(r);
    t.pos_style = detail::get_image(r);
    t.pos_semantic = detail::get_image(r);
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<uint8_t> encode_sessions(const std::vector<UserSession>& recs) {
  std::vector<uint8_t> out = detail::header(recs.size());
  std::vector<uint8_t> payload;
  for (const auto& s : recs) {
    payload.clear();
    payload.push_back(kSessionKind);
    io::put(payload, s.user_id);
    payload.push_back(static_cast<uint8_t>(s.history.size()));
    payload.push_back(static_cast<uint8_t>(s.reference_set.size()));
    payload.push_back(static_cast<uint8_t>(s.text_instruction.token_ids.size()));
    payload.insert(payload.end(), s.text_instruction.token_ids.begin(), s.text_instruction.token_ids.end());
    for (const auto& h : s.history) detail::put_image(payload, h);
    for (const auto& r : s.reference_set) detail::put_image(payload, r);
    detail::put_image(payload, s.target);
    detail::append_record(out, payload);
  }
  return out;
}

inline std::vector<UserSession> decode_sessions(const std::vector<uint8_t>& bytes) {
  std::vector<UserSession> out;
  for (auto [pos, len] : detail::records(bytes)) {
    io::Reader r(bytes.data() + pos, len);
    if (r.get<uint8_t>() != kSessionKind) throw FormatError("expected a session record");
    UserSession s;
    s.user_id = r.get<uint32_t>();
    const int n = r.get<uint8_t>();
    const int k = r.get<uint8_t>();
    const int t = r.get<uint8_t>();
    for (int i = 0; i < t; ++i) s.text_instruction.token_ids.push_back(r.get<uint8_t>());
    for (int i = 0; i < n; ++i) s.history.push_back(detail::get_image(r));
    for (int i = 0; i < k; ++i) s.reference_set.push_back(detail::get_image(r));
    s.target = detail::get_image(r);
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_triplets(const std::filesystem::path& p, const std::vector<TripletRecord>& r) {
  detail::write_file(p, encode_triplets(r));
}
inline std::vector<TripletRecord> load_triplets(const std::filesystem::path& p) {
  return decode_triplets(detail::read_file(p));
}
inline void save_sessions(const std::filesystem::path& p, const std::vector<UserSession>& r) {
  detail::write_file(p, encode_sessions(r));
}
inline std::vector<UserSession> load_sessions(const std::filesystem::path& p) {
  return decode_sessions(detail::read_file(p));
}

// ----------------------------------------------------------------------------
// Manifest: "key = value" lines.
// ----------------------------------------------------------------------------

struct DatasetManifest {
  uint32_t version = kDatasetVersion;
  uint64_t seed = 0;
  SplitSizes triplets;
  SplitSizes sessions;
  int num_users = 0;
  int history_len = 0;
  int reference_count = 0;
  std::map<std::string, std::string> file_hashes;

  std::string to_text() const {
    std::ostringstream o;
    o << "format_version = " << version << "\n"
      << "seed = " << seed << "\n"
      << "triplets_total = " << triplets.total() << "\n"
      << "triplets_train = " << triplets.train << "\n"
      << "triplets_valid = " << triplets.valid << "\n"
      << "triplets_test = " << triplets.test << "\n"
      << "sessions_total = " << sessions.total() << "\n"
      << "sessions_train = " << sessions.train << "\n"
      << "sessions_valid = " << sessions.valid << "\n"
      << "sessions_test = " << sessions.test << "\n"
      << "num_users = " << num_users << "\n"
      << "history_len = " << history_len << "\n"
      << "reference_count = " << reference_count << "\n";
    for (const auto& [k, v] : file_hashes) o << "hash." << k << " = " << v << "\n";
    return o.str();
  }

  static DatasetManifest from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (line.empty() || line[0] == '#' || eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        s.erase(0, s.find_first_not_of(" \t"));
        s.erase(s.find_last_not_of(" \t\r") + 1);
        return s;
      };
      kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto num = [&](const std::string& k) -> uint64_t {
      auto it = kv.find(k);
      if (it == kv.end()) throw FormatError("manifest missing key " + k);
      return std::stoull(it->second);
    };
    DatasetManifest m;
    m.version = static_cast<uint32_t>(num("format_version"));
    if (m.version != kDatasetVersion) throw VersionError("manifest version mismatch");
    m.seed = num("seed");
    m.triplets = {num("triplets_train"), num("triplets_valid"), num("triplets_test")};
    m.sessions = {num("sessions_train"), num("sessions_valid"), num("sessions_test")};
    if (m.triplets.total() != num("triplets_total") || m.sessions.total() != num("sessions_total"))
      throw FormatError("manifest split sizes do not sum to totals");
    m.num_users = static_cast<int>(num("num_users"));
    m.history_len = static_cast<int>(num("history_len"));
    m.reference_count = static_cast<int>(num("reference_count"));
    for (const auto& [k, v] : kv)
      if (k.rfind("hash.", 0) == 0) m.file_hashes[k.substr(5)] = v;
    return m;
  }
};

}  // namespace drc::world
