#include "drc/evalkit.hpp"
#include "drc/toyworld.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <queue>

using namespace drc;
using namespace drc::world;

namespace {

FactorSpec factors(int pal, int bg, int stroke, int shape, int count, int layout) {
  FactorSpec f;
  f.style = {static_cast<uint8_t>(pal), static_cast<uint8_t>(bg), static_cast<uint8_t>(stroke)};
  f.semantic = {static_cast<uint8_t>(shape), static_cast<uint8_t>(count), static_cast<uint8_t>(layout)};
  return f;
}

// 4-connected components of a pixel mask, with centroids.
struct Component {
  std::size_t size = 0;
  double cx = 0, cy = 0;
};

std::vector<Component> components(const std::vector<uint8_t>& mask) {
  std::vector<int> label(mask.size(), -1);
  std::vector<Component> out;
  for (int start = 0; start < static_cast<int>(mask.size()); ++start) {
    if (!mask[static_cast<std::size_t>(start)] || label[static_cast<std::size_t>(start)] >= 0) continue;
    Component c;
    std::queue<int> q;
    q.push(start);
    label[static_cast<std::size_t>(start)] = static_cast<int>(out.size());
    while (!q.empty()) {
      const int p = q.front();
      q.pop();
      const int y = p / kImageSize, x = p % kImageSize;
      ++c.size;
      c.cx += x;
      c.cy += y;
      const int nb[4][2] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}};
      for (const auto& d : nb) {
        const int ny = y + d[0], nx = x + d[1];
        if (ny < 0 || nx < 0 || ny >= kImageSize || nx >= kImageSize) continue;
        const int n = ny * kImageSize + nx;
        if (mask[static_cast<std::size_t>(n)] && label[static_cast<std::size_t>(n)] < 0) {
          label[static_cast<std::size_t>(n)] = static_cast<int>(out.size());
          q.push(n);
        }
      }
    }
    c.cx /= static_cast<double>(c.size);
    c.cy /= static_cast<double>(c.size);
    out.push_back(c);
  }
  return out;
}

// Which background pixels carry the secondary color, recovered from pixels.
std::vector<uint8_t> secondary_pattern(const ToyImage& img) {
  const auto& pal = world::detail::kPaletteTable[img.factors->style.palette];
  const auto sil = silhouette(img.factors->semantic, img.render_seed);
  std::vector<uint8_t> out(sil.size(), 2);
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) {
      const auto i = static_cast<std::size_t>(y * kImageSize + x);
      if (sil[i]) continue;
      double d1 = 0, d2 = 0;
      for (int c = 0; c < 3; ++c) {
        d1 += std::pow(img.at(y, x, c) - pal.bg[static_cast<std::size_t>(c)] / 255.0, 2);
        d2 += std::pow(img.at(y, x, c) - pal.bg2[static_cast<std::size_t>(c)] / 255.0, 2);
      }
      out[i] = d2 < d1;
    }
  return out;
}

}  // namespace

TEST(Render, DeterministicBytes) {
  const auto f = factors(3, 2, 1, 4, 2, 1);
  EXPECT_EQ(render(f, 99).to_bytes(), render(f, 99).to_bytes());
}

TEST(Render, PixelsInUnitRange) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto img = render(random_factors(rng), rng.next());
    for (float v : img.pixels) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Render, PaletteChangeKeepsSilhouette) {
  auto f = factors(0, 0, 0, 2, 3, 0);
  const auto a = render(f, 7);
  f.style.palette = 5;
  const auto b = render(f, 7);
  EXPECT_EQ(silhouette(a.factors->semantic, 7), silhouette(b.factors->semantic, 7));
  EXPECT_FALSE(a.same_pixels(b));
}

TEST(Render, SingleCircleUpperLeft) {
  const auto f = factors(1, 0, 0, 0, 1, 0);
  for (uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
    const auto comps = components(silhouette(f.semantic, seed));
    ASSERT_EQ(comps.size(), 1u);
    EXPECT_LT(comps[0].cx, kImageSize / 2.0);
    EXPECT_LT(comps[0].cy, kImageSize / 2.0);
  }
}

TEST(Render, OutOfRangeFactorIsInputError) {
  auto f = factors(0, 0, 0, 0, 1, 0);
  f.style.palette = 8;
  EXPECT_THROW(render(f, 1), InputError);
  f = factors(0, 0, 0, 0, 0, 0);
  EXPECT_THROW(render(f, 1), InputError);
  f = factors(0, 0, 0, 6, 1, 0);
  EXPECT_THROW(render(f, 1), InputError);
}

TEST(Render, FactorSeparationProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const FactorSpec f = random_factors(rng);
    const uint64_t seed = rng.next();
    FactorSpec g = f;
    g.style = StyleFactors::from_index(static_cast<int>(rng.below(kStyleCombos)));
    // Varying style never moves the foreground.
    EXPECT_EQ(silhouette(f.semantic, seed), silhouette(g.semantic, seed));
    EXPECT_EQ(render(g, seed).factors->semantic, f.semantic);

    // Varying semantics never changes the background pattern class on pixels
    // that are background in both renders.
    FactorSpec h = f;
    h.semantic = SemanticFactors::from_index(static_cast<int>(rng.below(kSemanticCombos)));
    const uint64_t seed2 = rng.next();
    const auto pf = secondary_pattern(render(f, seed));
    const auto ph = secondary_pattern(render(h, seed2));
    for (std::size_t i = 0; i < pf.size(); ++i)
      if (pf[i] != 2 && ph[i] != 2) {
        ASSERT_EQ(pf[i], ph[i]);
      }
  }
}

TEST(Triplet, InvariantsAndExamples) {
  Rng rng(3);
  auto f = factors(3, 1, 2, 0, 2, 3);
  for (int i = 0; i < 50; ++i) {
    const auto t = build_triplet(f, rng);
    EXPECT_TRUE(triplet_invariants_hold(t));
    EXPECT_EQ(t.pos_style.factors->style.palette, 3);
    EXPECT_EQ(t.pos_semantic.factors->semantic.shape, 0);
    EXPECT_NE(t.pos_semantic.factors->style.palette, 3);
  }
}

TEST(Triplet, PosStyleShapeUniformOverOtherClasses) {
  Rng rng(2024);
  const int n = 1000;
  std::array<int, kShapes> counts{};
  const auto f = factors(0, 0, 0, 2, 1, 0);
  for (int i = 0; i < n; ++i) ++counts[build_triplet(f, rng).pos_style.factors->semantic.shape];
  EXPECT_EQ(counts[2], 0);
  double chi2 = 0.0;
  for (int s = 0; s < kShapes; ++s) {
    if (s == 2) continue;
    const double expected = n / 5.0;
    EXPECT_NEAR(counts[static_cast<std::size_t>(s)] / static_cast<double>(n), 0.2, 0.05);
    chi2 += std::pow(counts[static_cast<std::size_t>(s)] - expected, 2) / expected;
  }
  // 4 degrees of freedom, 0.999 quantile.
  EXPECT_LT(chi2, 18.47);
}

TEST(StyleNN, CopySelectedWhenExclusionDisabled) {
  Rng rng(8);
  const auto anchor = render(random_factors(rng), 1);
  std::vector<ToyImage> pool;
  for (int i = 0; i < 5; ++i) pool.push_back(render(random_factors(rng), rng.next()));
  pool.insert(pool.begin() + 3, anchor);
  EXPECT_EQ(style_nn_select(anchor, pool, eval::gram_style_feature, false), 3u);
  EXPECT_NE(style_nn_select(anchor, pool, eval::gram_style_feature, true), 3u);
}

TEST(StyleNN, TiesGoToLowerIndexAndPermutationInvariance) {
  Rng rng(9);
  const auto anchor = render(random_factors(rng), 1);
  const auto other = render(random_factors(rng), 2);
  std::vector<ToyImage> pool{other, other, other};
  EXPECT_EQ(style_nn_select(anchor, pool, eval::gram_style_feature), 0u);

  std::vector<ToyImage> p2;
  for (int i = 0; i < 12; ++i) p2.push_back(render(random_factors(rng), rng.next()));
  const auto best = style_nn_select(anchor, p2, eval::gram_style_feature);
  std::vector<std::size_t> perm(p2.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<ToyImage> shuffled;
  for (auto i : perm) shuffled.push_back(p2[i]);
  const auto best2 = style_nn_select(anchor, shuffled, eval::gram_style_feature);
  EXPECT_TRUE(shuffled[best2].same_pixels(p2[best]));
}

TEST(StyleNN, EmptyPoolIsInputError) {
  const auto anchor = render(factors(0, 0, 0, 0, 1, 0), 1);
  EXPECT_THROW(style_nn_select(anchor, {}, eval::gram_style_feature), InputError);
}

TEST(StyleNN, FindsSameStyleImageInMostTrials) {
  Rng rng(77);
  const int trials = 500;
  int hits = 0;
  for (int t = 0; t < trials; ++t) {
    const FactorSpec af = random_factors(rng);
    const auto anchor = render(af, rng.next());
    FactorSpec sf = random_factors(rng);
    sf.style = af.style;
    while (sf.semantic == af.semantic) sf.semantic = SemanticFactors::from_index(static_cast<int>(rng.below(kSemanticCombos)));
    std::vector<ToyImage> pool;
    const std::size_t pos = rng.below(20);
    for (std::size_t i = 0; i < 20; ++i) {
      if (i == pos) {
        pool.push_back(render(sf, rng.next()));
        continue;
      }
      FactorSpec of = random_factors(rng);
      while (of.style == af.style) of.style = StyleFactors::from_index(static_cast<int>(rng.below(kStyleCombos)));
      pool.push_back(render(of, rng.next()));
    }
    hits += style_nn_select(anchor, pool, eval::gram_style_feature) == pos;
  }
  EXPECT_GE(hits, trials * 8 / 10) << hits << " of " << trials;
}

TEST(Augment, KeepsSemanticsChangesStyle) {
  Rng rng(4);
  const auto target = render(factors(2, 3, 1, 5, 2, 2), 42);
  const auto one = augment_semantic_preserving(target, 1, rng);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].factors->semantic, target.factors->semantic);
  EXPECT_NE(one[0].factors->style, target.factors->style);

  const auto three = augment_semantic_preserving(target, 3, rng);
  ASSERT_EQ(three.size(), 3u);
  std::set<int> styles;
  for (const auto& a : three) {
    EXPECT_EQ(a.factors->semantic, target.factors->semantic);
    EXPECT_EQ(silhouette(a.factors->semantic, a.render_seed), silhouette(target.factors->semantic, target.render_seed));
    styles.insert(a.factors->style.index());
  }
  EXPECT_EQ(styles.size(), 3u);
  EXPECT_EQ(augment_semantic_preserving(target, kStyleCombos - 1, rng).size(), static_cast<std::size_t>(kStyleCombos - 1));
  EXPECT_THROW(augment_semantic_preserving(target, kStyleCombos, rng), InputError);
  EXPECT_THROW(augment_semantic_preserving(target, 0, rng), InputError);
}

// The factor reader plays the semantic probe here: it must assign target and
// augmentation the same semantic labels.
TEST(Augment, SemanticReaderAgreesOnAugmentedPairs) {
  Rng rng(31);
  int same = 0;
  const int pairs = 200;
  for (int i = 0; i < pairs; ++i) {
    const auto target = render(random_factors(rng), rng.next());
    const auto aug = augment_semantic_preserving(target, 1, rng)[0];
    same += eval::read_factors(target).semantic == eval::read_factors(aug).semantic;
  }
  EXPECT_GE(same, pairs * 95 / 100);
}

TEST(Personal, SplitSizesForTenSessions) {
  PersonalConfig pc;
  pc.num_users = 1;
  pc.sessions_per_user = 10;
  const auto ds = build_personal_dataset(pc, 1);
  EXPECT_EQ(ds.train.size(), 8u);
  EXPECT_EQ(ds.valid.size(), 1u);
  EXPECT_EQ(ds.test.size(), 1u);
}

TEST(Personal, InvariantsNoLeakageAndConfigEcho) {
  PersonalConfig pc;
  pc.num_users = 12;
  pc.sessions_per_user = 30;
  pc.history_len = 4;
  const auto ds = build_personal_dataset(pc, 5);
  std::set<std::pair<int, std::array<uint8_t, kGrid * kGrid>>> keys;
  std::size_t total = 0;
  for (const auto* split : {&ds.train, &ds.valid, &ds.test})
    for (const auto& s : *split) {
      ++total;
      ASSERT_TRUE(session_invariants_hold(s));
      ASSERT_EQ(s.history.size(), 4u);
      for (const auto& h : s.history) EXPECT_EQ(h.factors->style.palette, s.history[0].factors->style.palette);
      EXPECT_EQ(s.text_instruction, text_instruction(s.target.factors->semantic));
      keys.insert({static_cast<int>(s.user_id) * 1000 + s.target.factors->semantic.index(),
                    foreground_cells(s.target.factors->semantic, s.target.render_seed)});
    }
  EXPECT_EQ(total, 360u);
  EXPECT_EQ(keys.size(), total);  // every target is distinct, so no split shares one
}

TEST(Personal, TooManyUsersIsInputError) {
  PersonalConfig pc;
  pc.num_users = kStyleCombos + 1;
  EXPECT_THROW(build_personal_dataset(pc, 1), InputError);
}

TEST(Personal, WorkerCountDoesNotChangeOutput) {
  PersonalConfig pc;
  pc.num_users = 5;
  pc.sessions_per_user = 6;
  auto a = build_personal_dataset(pc, 3);
  pc.workers = 3;
  auto b = build_personal_dataset(pc, 3);
  EXPECT_EQ(encode_sessions(a.train), encode_sessions(b.train));
  EXPECT_EQ(encode_sessions(a.test), encode_sessions(b.test));
  const auto t1 = build_triplet_dataset(40, 9, 1), t3 = build_triplet_dataset(40, 9, 3);
  EXPECT_EQ(encode_triplets(t1.train), encode_triplets(t3.train));
}

TEST(Text, TemplateIsDeterministicAndShort) {
  for (int i = 0; i < kSemanticCombos; ++i) {
    const auto sem = SemanticFactors::from_index(i);
    const auto t = text_instruction(sem);
    EXPECT_EQ(t, text_instruction(sem));
    EXPECT_LE(t.token_ids.size(), kMaxTextLength);
    for (auto id : t.token_ids) EXPECT_LT(id, kTextVocab);
  }
}

TEST(Format, RoundTripAndHeader) {
  const auto ds = build_triplet_dataset(30, 4);
  const auto bytes = encode_triplets(ds.train);
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DRCW");
  const auto back = decode_triplets(bytes);
  ASSERT_EQ(back.size(), ds.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_TRUE(triplet_invariants_hold(back[i]));
    EXPECT_EQ(back[i].anchor.to_bytes(), ds.train[i].anchor.to_bytes());
    EXPECT_EQ(back[i].anchor.factors, ds.train[i].anchor.factors);
    EXPECT_EQ(back[i].anchor.render_seed, ds.train[i].anchor.render_seed);
  }
  EXPECT_EQ(encode_triplets(back), bytes);

  PersonalConfig pc;
  pc.num_users = 2;
  pc.sessions_per_user = 10;
  const auto ps = build_personal_dataset(pc, 2);
  const auto sb = encode_sessions(ps.train);
  EXPECT_EQ(encode_sessions(decode_sessions(sb)), sb);
}

TEST(Format, VersionAndCorruptionErrors) {
  auto bytes = encode_triplets(build_triplet_dataset(10, 4).train);
  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(decode_triplets(bad_version), VersionError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_triplets(bad_magic), FormatError);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_triplets(bytes), FormatError);
}

TEST(Manifest, TextRoundTripAndSplitSums) {
  DatasetManifest m;
  m.seed = 12;
  m.triplets = split_sizes(15000);
  m.sessions = split_sizes(4800);
  m.num_users = 96;
  m.history_len = 4;
  m.reference_count = 4;
  m.file_hashes["a.drcw"] = "00ff";
  const auto back = DatasetManifest::from_text(m.to_text());
  EXPECT_EQ(back.to_text(), m.to_text());
  EXPECT_EQ(m.triplets.train, 12000u);
  EXPECT_EQ(m.triplets.valid, 1500u);
  EXPECT_EQ(m.triplets.total(), 15000u);
  auto text = m.to_text();
  text.replace(text.find("format_version = 1"), 18, "format_version = 7");
  EXPECT_THROW(DatasetManifest::from_text(text), VersionError);
}
