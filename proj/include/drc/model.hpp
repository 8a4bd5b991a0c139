#pragma once

// The full model (generator, towers, fusion, mask generator) and the Stage-1
// and Stage-2 forward/backward compositions.

#include "drc/disentangler.hpp"
#include "drc/fusion.hpp"
#include "drc/lmmcore.hpp"
#include "drc/maskgen.hpp"

#include <array>

namespace drc {

struct ModelConfig {
  int visual_vocab = 64;
  int text_vocab = 21;
  int seq_len = 64;
  int width = 64;
  int blocks = 2;
  int latent_rows = 8;
  int ffn_mult = 4;
  int context = kDefaultContext;
  DisentanglerKind disentangler = DisentanglerKind::attention;
  FusionKind fusion = FusionKind::full;

  VocabLayout vocab() const { return {visual_vocab, text_vocab}; }

  void validate() const {
    require(visual_vocab >= 2, "model: visual vocabulary must be >= 2");
    require(text_vocab >= 1, "model: text vocabulary must be >= 1");
    require(seq_len >= 1 && width >= 1 && blocks >= 1 && latent_rows >= 1 && ffn_mult >= 1, "model: sizes must be positive");
    require(context >= seq_len + latent_rows + 2, "model: context too small for one image");
  }
};

template <class T>
struct DrcModel {
  using Scalar = T;
  ModelConfig cfg;
  GeneratorW<T> gen;
  DisentanglerW<T> dis;
  FusionW<T> fusion;
  MaskGenW<T> maskgen;

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("gen", s.gen);
    f("dis", s.dis);
    f("fusion", s.fusion);
    f("maskgen", s.maskgen);
  }
};

// Each module draws from its own stream so changing one ablation switch
// leaves the other modules' initial weights untouched.
template <class T>
DrcModel<T> make_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  DrcModel<T> m;
  m.cfg = cfg;
  Rng r_gen = Rng::derive(seed, 1), r_dis = Rng::derive(seed, 2), r_fus = Rng::derive(seed, 3),
      r_mask = Rng::derive(seed, 4);
  m.gen = make_generator<T>(cfg.vocab(), cfg.width, cfg.blocks, cfg.ffn_mult, cfg.context, r_gen);
  m.dis = make_disentangler<T>(cfg.disentangler, cfg.width, cfg.seq_len, cfg.ffn_mult, r_dis);
  m.fusion = make_fusion<T>(cfg.fusion, cfg.width, cfg.latent_rows, r_fus);
  m.maskgen = make_maskgen<T>(cfg.width, cfg.ffn_mult, r_mask);
  return m;
}

template <class T>
void reset_maskgen(DrcModel<T>& m, uint64_t seed) {
  Rng r = Rng::derive(seed, 4);
  m.maskgen = make_maskgen<T>(m.cfg.width, m.cfg.ffn_mult, r);
}

// Gradient container with the same structure as the model.
template <class T>
DrcModel<T> zero_grads(const DrcModel<T>& m) {
  return zeros_like(m);
}

template <class T>
Mat<T> embed_visual(const DrcModel<T>& m, const std::vector<int>& tokens) {
  for (int t : tokens) require(t >= 0 && t < m.cfg.visual_vocab, "visual token " + std::to_string(t) + " out of range");
  return gather_rows(m.gen.emb, tokens);
}

// ----------------------------------------------------------------------------
// Stage 1
// ----------------------------------------------------------------------------

// Combination index -> (style source, semantic source):
//   0 (a,a)  1 (a,m)  2 (s,a)  3 (s,m)
inline constexpr std::array<const char*, 4> kComboNames{"aa", "am", "sa", "sm"};
inline constexpr int kCombos = 4;

struct TripletTokens {
  std::vector<int> a, s, m;
};

template <class T>
struct Stage1Forward {
  TripletTokens tok;
  TripletFeatures<T> feats;
  TripletFeatureCache<T> fcache;
  std::array<Mat<T>, kCombos> latent;
  std::array<FusionCache<T>, kCombos> fusion;
  std::array<GenCache<T>, kCombos> gen;
  std::array<double, kCombos> losses{};
};

template <class T>
const Mat<T>& combo_style(const TripletFeatures<T>& f, int z) {
  return z < 2 ? f.a_sty : f.s_sty;
}
template <class T>
const Mat<T>& combo_semantic(const TripletFeatures<T>& f, int z) {
  return (z % 2 == 0) ? f.a_sem : f.m_sem;
}

template <class T>
Mat<T> combo_latent(const DrcModel<T>& m, const TripletFeatures<T>& f, int z, FusionCache<T>* c = nullptr) {
  require(z >= 0 && z < kCombos, "combination index out of range");
  return fuse(m.fusion, combo_style(f, z), combo_semantic(f, z), c);
}

// Forward over all four combinations; caches are kept for the backward of
// whichever combination gets sampled.
template <class T>
Stage1Forward<T> stage1_forward(const DrcModel<T>& m, const TripletTokens& tok, const std::vector<int>& words) {
  Stage1Forward<T> fw;
  fw.tok = tok;
  const Mat<T> Ea = embed_visual(m, tok.a), Es = embed_visual(m, tok.s), Em = embed_visual(m, tok.m);
  fw.feats = extract_triplet_features(m.dis, Ea, Es, Em, &fw.fcache);
  for (int z = 0; z < kCombos; ++z) {
    fw.latent[static_cast<std::size_t>(z)] = combo_latent(m, fw.feats, z, &fw.fusion[static_cast<std::size_t>(z)]);
    const auto prompt = make_prompt(m.cfg.vocab(), words, fw.latent[static_cast<std::size_t>(z)]);
    fw.losses[static_cast<std::size_t>(z)] =
        static_cast<double>(nll_loss(m.gen, prompt, tok.a, &fw.gen[static_cast<std::size_t>(z)]));
  }
  return fw;
}

// Loss of one combination without caches.
template <class T>
double stage1_loss(const DrcModel<T>& m, const TripletTokens& tok, const std::vector<int>& words, int z) {
  const Mat<T> Ea = embed_visual(m, tok.a), Es = embed_visual(m, tok.s), Em = embed_visual(m, tok.m);
  const auto f = extract_triplet_features(m.dis, Ea, Es, Em);
  return static_cast<double>(nll_loss(m.gen, make_prompt(m.cfg.vocab(), words, combo_latent(m, f, z)), tok.a));
}

template <class T>
void stage1_backward(const DrcModel<T>& m, const Stage1Forward<T>& fw, int z, DrcModel<T>& g, T dloss = T(1)) {
  const auto zi = static_cast<std::size_t>(z);
  const Mat<T> dlat = nll_backward(m.gen, fw.gen[zi], g.gen, dloss);
  auto [dsty, dsem] = fuse_backward(m.fusion, fw.fusion[zi], dlat, g.fusion);

  const Eigen::Index L = static_cast<Eigen::Index>(fw.tok.a.size());
  Mat<T> dEa = Mat<T>::Zero(L, m.cfg.width), dEs = dEa, dEm = dEa;
  auto add = [](Mat<T>& dst, const Mat<T>& src) {
    if (src.size() != 0) dst += src;
  };
  if (z < 2) {  // style from a: q = Ea, kv = Es
    auto [dq, dkv] = extract_backward(m.dis, fw.fcache.a_sty, dsty, g.dis);
    add(dEa, dq);
    add(dEs, dkv);
  } else {  // style from s: q = Es, kv = Ea
    auto [dq, dkv] = extract_backward(m.dis, fw.fcache.s_sty, dsty, g.dis);
    add(dEs, dq);
    add(dEa, dkv);
  }
  if (z % 2 == 0) {  // semantics from a: q = Ea, kv = Em
    auto [dq, dkv] = extract_backward(m.dis, fw.fcache.a_sem, dsem, g.dis);
    add(dEa, dq);
    add(dEm, dkv);
  } else {  // semantics from m: q = Em, kv = Ea
    auto [dq, dkv] = extract_backward(m.dis, fw.fcache.m_sem, dsem, g.dis);
    add(dEm, dq);
    add(dEa, dkv);
  }
  scatter_rows(g.gen.emb, fw.tok.a, dEa);
  scatter_rows(g.gen.emb, fw.tok.s, dEs);
  scatter_rows(g.gen.emb, fw.tok.m, dEm);
}

// ----------------------------------------------------------------------------
// Stage 2
// ----------------------------------------------------------------------------

struct Stage2Inputs {
  std::vector<std::vector<int>> history;
  std::vector<int> reference;
  std::vector<int> words;   // text words, vocabulary-local
  std::vector<int> target;  // empty for pure inference
  MaskConfig mask;
};

template <class T>
struct Stage2Forward {
  std::vector<ExtractCache<T>> hist_cache;
  ExtractCache<T> ref_cache;
  std::vector<Mat<T>> F_sty;
  Mat<T> F_sem;
  MaskGenCache<T> mask_cache;
  MaskResult<T> masks;
  Mat<T> pooled, masked;
  FusionCache<T> fusion;
  Mat<T> latent;
  GenCache<T> gen;
  double loss = 0.0;
};

// Everything up to the latent instruction.
template <class T>
void stage2_latent(const DrcModel<T>& m, const Stage2Inputs& in, Stage2Forward<T>& fw,
                   const MaskOverride<T>* ov = nullptr) {
  require(!in.history.empty(), "stage2: empty history");
  require(!in.reference.empty(), "stage2: empty reference");
  const auto N = in.history.size();
  fw.hist_cache.resize(N);
  fw.F_sty.resize(N);
  for (std::size_t i = 0; i < N; ++i)
    fw.F_sty[i] = extract_self(m.dis, TowerId::style, embed_visual(m, in.history[i]), &fw.hist_cache[i]);
  fw.F_sem = extract_self(m.dis, TowerId::semantic, embed_visual(m, in.reference), &fw.ref_cache);
  fw.masks = generate_masks(m.maskgen, fw.F_sty, fw.F_sem, in.mask, ov, &fw.mask_cache);
  std::tie(fw.pooled, fw.masked) = apply_and_pool(fw.F_sty, fw.masks.style_m, fw.F_sem, fw.masks.sem_m);
  fw.latent = fuse(m.fusion, fw.pooled, fw.masked, &fw.fusion);
}

template <class T>
Stage2Forward<T> stage2_forward(const DrcModel<T>& m, const Stage2Inputs& in, const MaskOverride<T>* ov = nullptr) {
  require(!in.target.empty(), "stage2_forward: missing target");
  Stage2Forward<T> fw;
  stage2_latent(m, in, fw, ov);
  fw.loss = static_cast<double>(nll_loss(m.gen, make_prompt(m.cfg.vocab(), in.words, fw.latent), in.target, &fw.gen));
  return fw;
}

template <class T>
void stage2_backward(const DrcModel<T>& m, const Stage2Inputs& in, const Stage2Forward<T>& fw, DrcModel<T>& g,
                     T dloss = T(1)) {
  const Mat<T> dlat = nll_backward(m.gen, fw.gen, g.gen, dloss);
  auto [dpooled, dmasked] = fuse_backward(m.fusion, fw.fusion, dlat, g.fusion);

  const auto N = fw.F_sty.size();
  const auto L = fw.F_sem.rows();
  const T invN = T(1) / static_cast<T>(N);
  std::vector<Mat<T>> dF(N);
  ColVec<T> dscores((static_cast<Eigen::Index>(N) + 1) * L);
  for (std::size_t i = 0; i < N; ++i) {
    dF[i] = (dpooled.array().colwise() * fw.masks.style_m[i].array()) * invN;
    dscores.segment(static_cast<Eigen::Index>(i) * L, L) =
        (dpooled.array() * fw.F_sty[i].array()).rowwise().sum() * invN;
  }
  Mat<T> dFsem = dmasked.array().colwise() * fw.masks.sem_m.array();
  dscores.segment(static_cast<Eigen::Index>(N) * L, L) = (dmasked.array() * fw.F_sem.array()).rowwise().sum();

  // Straight-through: d mask = d score.
  auto [dF_enc, dFsem_enc] =
      generate_masks_backward(m.maskgen, fw.mask_cache, dscores, static_cast<Eigen::Index>(N), g.maskgen);
  for (std::size_t i = 0; i < N; ++i) {
    dF[i] += dF_enc[i];
    const Mat<T> dE = extract_self_backward(m.dis, fw.hist_cache[i], dF[i], g.dis);
    scatter_rows(g.gen.emb, in.history[i], dE);
  }
  dFsem += dFsem_enc;
  const Mat<T> dEr = extract_self_backward(m.dis, fw.ref_cache, dFsem, g.dis);
  scatter_rows(g.gen.emb, in.reference, dEr);
}

// Personalized generation for a given mask configuration.
template <class T>
std::vector<int> stage2_generate(const DrcModel<T>& m, const Stage2Inputs& in, DecodeMode mode = DecodeMode::greedy,
                                 double temperature = 1.0, uint64_t seed = 0) {
  Stage2Forward<T> fw;
  stage2_latent(m, in, fw);
  return decode_tokens(m.gen, make_prompt(m.cfg.vocab(), in.words, fw.latent), m.cfg.seq_len, mode, temperature, seed);
}

template <class T>
std::vector<int> stage1_generate(const DrcModel<T>& m, const TripletTokens& tok, const std::vector<int>& words, int z) {
  const Mat<T> Ea = embed_visual(m, tok.a), Es = embed_visual(m, tok.s), Em = embed_visual(m, tok.m);
  const auto f = extract_triplet_features(m.dis, Ea, Es, Em);
  return decode_tokens(m.gen, make_prompt(m.cfg.vocab(), words, combo_latent(m, f, z)), m.cfg.seq_len);
}

}  // namespace drc
