#pragma once

// Small causal decoder standing in for the multimodal LM. The unified
// vocabulary is [visual 0..V) [text V..V+T) [BOS] [BOI] [EOI]; the output head
// covers visual tokens only. A hybrid prompt is
//   [BOS][text ...][latent rows][BOI]
// followed by the target tokens shifted right by one.

#include "drc/nn.hpp"

namespace drc {

inline constexpr int kDefaultContext = 128;

struct VocabLayout {
  int visual = 64;
  int text = 21;

  int bos() const { return visual + text; }
  int boi() const { return visual + text + 1; }
  int eoi() const { return visual + text + 2; }
  int size() const { return visual + text + 3; }
  int text_id(int t) const {
    require(t >= 0 && t < text, "text token out of range: " + std::to_string(t));
    return visual + t;
  }
};

template <class T>
struct DecoderBlockW {
  using Scalar = T;
  nn::LayerNormW<T> ln1;
  nn::AttentionW<T> attn;
  nn::LayerNormW<T> ln2;
  nn::FeedForwardW<T> ffn;

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("ln1", s.ln1);
    f("attn", s.attn);
    f("ln2", s.ln2);
    f("ffn", s.ffn);
  }
};

template <class T>
struct GeneratorW {
  using Scalar = T;
  VocabLayout vocab;
  Mat<T> emb;  // vocab.size() x d
  Mat<T> pos;  // context x d
  std::vector<DecoderBlockW<T>> blocks;
  nn::LayerNormW<T> ln_f;
  Mat<T> head;      // d x V
  RowVec<T> head_b;  // V

  int width() const { return static_cast<int>(emb.cols()); }
  int context() const { return static_cast<int>(pos.rows()); }

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("emb", s.emb);
    f("pos", s.pos);
    for (std::size_t i = 0; i < s.blocks.size(); ++i) f("block" + std::to_string(i), s.blocks[i]);
    f("ln_f", s.ln_f);
    f("head", s.head);
    f("head_b", s.head_b);
  }
};

template <class T>
GeneratorW<T> make_generator(VocabLayout vocab, int d, int n_blocks, int ffn_mult, int context, Rng& rng) {
  require(n_blocks >= 1, "make_generator: need at least one block");
  GeneratorW<T> w;
  w.vocab = vocab;
  w.emb.resize(vocab.size(), d);
  init_normal(w.emb, rng, 0.02);
  w.pos.resize(context, d);
  init_normal(w.pos, rng, 0.02);
  const double res_scale = 1.0 / std::sqrt(2.0 * n_blocks);
  for (int b = 0; b < n_blocks; ++b) {
    DecoderBlockW<T> blk;
    blk.ln1 = nn::LayerNormW<T>(d);
    blk.attn = nn::make_attention<T>(d, rng, res_scale);
    blk.ln2 = nn::LayerNormW<T>(d);
    blk.ffn = nn::make_feed_forward<T>(d, ffn_mult * d, rng, res_scale);
    w.blocks.push_back(std::move(blk));
  }
  w.ln_f = nn::LayerNormW<T>(d);
  w.head.resize(d, vocab.visual);
  init_normal(w.head, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  w.head_b = RowVec<T>::Zero(vocab.visual);
  return w;
}

// Rows of the embedding table for a list of unified ids.
template <class T>
Mat<T> gather_rows(const Mat<T>& table, const std::vector<int>& ids) {
  Mat<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    require(id >= 0 && id < table.rows(), "token id " + std::to_string(id) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.row(id);
  }
  return out;
}

template <class T>
void scatter_rows(Mat<T>& table_grad, const std::vector<int>& ids, const Mat<T>& d) {
  for (std::size_t i = 0; i < ids.size(); ++i) table_grad.row(ids[i]) += d.row(static_cast<Eigen::Index>(i));
}

template <class T>
struct HybridPrompt {
  std::vector<int> text_ids;  // unified ids; begins with BOS
  Mat<T> latent;              // M x d soft prompt

  Eigen::Index length() const { return static_cast<Eigen::Index>(text_ids.size()) + latent.rows() + 1; }
};

// BOS + text words (vocabulary-local ids).
template <class T>
HybridPrompt<T> make_prompt(const VocabLayout& vocab, const std::vector<int>& words, Mat<T> latent) {
  HybridPrompt<T> p;
  p.text_ids.push_back(vocab.bos());
  for (int t : words) p.text_ids.push_back(vocab.text_id(t));
  p.latent = std::move(latent);
  return p;
}

template <class T>
struct BlockCache {
  nn::LnCache<T> ln1, ln2;
  nn::AttnCache<T> attn;
  nn::FfnCache<T> ffn;
};

template <class T>
struct GenCache {
  std::vector<int> ids;        // unified ids at non-latent positions, in order
  std::vector<int> id_pos;     // their sequence positions
  Eigen::Index latent_at = 0;  // first latent row position
  Eigen::Index latent_rows = 0;
  Eigen::Index first_pred = 0;  // position whose output predicts target[0]
  std::vector<BlockCache<T>> blocks;
  nn::LnCache<T> ln_f;
  Mat<T> hidden;  // L x d, final normalized states at prediction positions
  Mat<T> probs;   // L x V
  std::vector<int> target;
};

namespace detail {

// Assembles the input sequence; fills the id bookkeeping in `c`.
template <class T>
Mat<T> assemble(const GeneratorW<T>& w, const HybridPrompt<T>& prompt, const std::vector<int>& target_prefix,
                GenCache<T>& c) {
  const int d = w.width();
  require(prompt.latent.rows() == 0 || prompt.latent.cols() == d, "prompt latent width mismatch");
  c.ids.clear();
  c.id_pos.clear();
  const Eigen::Index n = prompt.length() + static_cast<Eigen::Index>(target_prefix.size());
  Mat<T> x(n, d);
  Eigen::Index p = 0;
  auto put_id = [&](int id) {
    require(id >= 0 && id < w.emb.rows(), "token id " + std::to_string(id) + " out of range");
    x.row(p) = w.emb.row(id);
    c.ids.push_back(id);
    c.id_pos.push_back(static_cast<int>(p));
    ++p;
  };
  for (int id : prompt.text_ids) put_id(id);
  c.latent_at = p;
  c.latent_rows = prompt.latent.rows();
  if (c.latent_rows > 0) x.middleRows(p, c.latent_rows) = prompt.latent;
  p += c.latent_rows;
  put_id(w.vocab.boi());
  c.first_pred = p - 1;
  for (int t : target_prefix) {
    require(t >= 0 && t < w.vocab.visual, "visual token " + std::to_string(t) + " out of range");
    put_id(t);
  }
  x += w.pos.topRows(n);
  return x;
}

template <class T>
Mat<T> run_blocks(const GeneratorW<T>& w, Mat<T> x, std::vector<BlockCache<T>>* caches) {
  if (caches) caches->resize(w.blocks.size());
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    const auto& blk = w.blocks[b];
    BlockCache<T>* c = caches ? &(*caches)[b] : nullptr;
    const Mat<T> h1 = nn::layer_norm(blk.ln1, x, c ? &c->ln1 : nullptr);
    x += nn::attention(blk.attn, h1, h1, true, c ? &c->attn : nullptr);
    const Mat<T> h2 = nn::layer_norm(blk.ln2, x, c ? &c->ln2 : nullptr);
    x += nn::feed_forward(blk.ffn, h2, c ? &c->ffn : nullptr);
  }
  return x;
}

}  // namespace detail

// Logits over the visual vocabulary at every position of the full sequence.
template <class T>
Mat<T> sequence_logits(const GeneratorW<T>& w, const HybridPrompt<T>& prompt, const std::vector<int>& target_prefix) {
  GenCache<T> c;
  Mat<T> x = detail::assemble(w, prompt, target_prefix, c);
  require(x.rows() <= w.context(), "sequence exceeds context cap");
  x = detail::run_blocks<T>(w, std::move(x), nullptr);
  const Mat<T> h = nn::layer_norm(w.ln_f, x);
  return (h * w.head).rowwise() + w.head_b;
}

// Summed next-token NLL of the target given the prompt.
template <class T>
T nll_loss(const GeneratorW<T>& w, const HybridPrompt<T>& prompt, const std::vector<int>& target,
           GenCache<T>* cache = nullptr) {
  require(!target.empty(), "nll_loss: empty target");
  const auto L = static_cast<Eigen::Index>(target.size());
  require(prompt.length() + L <= w.context(), "nll_loss: prompt length " + std::to_string(prompt.length()) + " + " +
                                                  std::to_string(L) + " exceeds context cap " +
                                                  std::to_string(w.context()));
  GenCache<T> local;
  GenCache<T>& c = cache ? *cache : local;
  const std::vector<int> prefix(target.begin(), target.end() - 1);
  Mat<T> x = detail::assemble(w, prompt, prefix, c);
  x = detail::run_blocks(w, std::move(x), cache ? &c.blocks : nullptr);
  const Mat<T> xs = x.middleRows(c.first_pred, L);
  c.hidden = nn::layer_norm(w.ln_f, xs, cache ? &c.ln_f : nullptr);
  Mat<T> logits = (c.hidden * w.head).rowwise() + w.head_b;
  const ColVec<T> lse = nn::logsumexp_rows(logits);
  T loss = 0;
  for (Eigen::Index j = 0; j < L; ++j) {
    const int t = target[static_cast<std::size_t>(j)];
    require(t >= 0 && t < w.vocab.visual, "target token out of range");
    loss += lse(j) - logits(j, t);
  }
  if (!std::isfinite(static_cast<double>(loss))) throw NumericError("non-finite generator loss");
  if (cache) {
    c.probs = (logits.colwise() - lse).array().exp();
    c.target = target;
  }
  return loss;
}

// Backward of nll_loss (scaled by dloss). Returns d latent.
template <class T>
Mat<T> nll_backward(const GeneratorW<T>& w, const GenCache<T>& c, GeneratorW<T>& g, T dloss = T(1)) {
  const auto L = static_cast<Eigen::Index>(c.target.size());
  Mat<T> dlogits = c.probs * dloss;
  for (Eigen::Index j = 0; j < L; ++j) dlogits(j, c.target[static_cast<std::size_t>(j)]) -= dloss;
  g.head.noalias() += c.hidden.transpose() * dlogits;
  g.head_b += dlogits.colwise().sum();
  const Mat<T> dh = dlogits * w.head.transpose();
  const Eigen::Index n = static_cast<Eigen::Index>(c.ids.size()) + c.latent_rows;
  Mat<T> dx = Mat<T>::Zero(n, w.width());
  dx.middleRows(c.first_pred, L) = nn::layer_norm_backward(w.ln_f, c.ln_f, dh, g.ln_f);
  for (std::size_t b = w.blocks.size(); b-- > 0;) {
    const auto& blk = w.blocks[b];
    const auto& bc = c.blocks[b];
    auto& gb = g.blocks[b];
    const Mat<T> dh2 = nn::feed_forward_backward(blk.ffn, bc.ffn, dx, gb.ffn);
    dx += nn::layer_norm_backward(blk.ln2, bc.ln2, dh2, gb.ln2);
    auto [dq, dkv] = nn::attention_backward(blk.attn, bc.attn, dx, gb.attn);
    dq += dkv;
    dx += nn::layer_norm_backward(blk.ln1, bc.ln1, dq, gb.ln1);
  }
  g.pos.topRows(n) += dx;
  for (std::size_t i = 0; i < c.ids.size(); ++i) g.emb.row(c.ids[i]) += dx.row(c.id_pos[i]);
  return dx.middleRows(c.latent_at, c.latent_rows);
}

// ----------------------------------------------------------------------------
// Decoding with per-block key/value caches.
// ----------------------------------------------------------------------------

enum class DecodeMode { greedy, temperature };

namespace detail {

template <class T>
struct KvState {
  std::vector<Mat<T>> k, v;  // per block, rows grow with the sequence
  Eigen::Index len = 0;
};

// Feeds rows x (already embedded + positioned) and returns the final
// normalized hidden state of the last row.
template <class T>
RowVec<T> feed(const GeneratorW<T>& w, KvState<T>& st, Mat<T> x) {
  const Eigen::Index n = x.rows();
  const int d = w.width();
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    const auto& blk = w.blocks[b];
    const Mat<T> h1 = nn::layer_norm(blk.ln1, x);
    const Mat<T> q = h1 * blk.attn.wq;
    Mat<T>& K = st.k[b];
    Mat<T>& Vv = st.v[b];
    K.conservativeResize(st.len + n, d);
    Vv.conservativeResize(st.len + n, d);
    K.bottomRows(n) = h1 * blk.attn.wk;
    Vv.bottomRows(n) = h1 * blk.attn.wv;
    Mat<T> a = (q * K.transpose()) * scale;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = st.len + i + 1; j < a.cols(); ++j) a(i, j) = -std::numeric_limits<T>::infinity();
    nn::softmax_rows_inplace(a);
    x += (a * Vv) * blk.attn.wo;
    const Mat<T> h2 = nn::layer_norm(blk.ln2, x);
    x += nn::feed_forward(blk.ffn, h2);
  }
  st.len += n;
  const Mat<T> last = x.bottomRows(1);
  return nn::layer_norm(w.ln_f, last);
}

}  // namespace detail

template <class T>
std::vector<int> decode_tokens(const GeneratorW<T>& w, const HybridPrompt<T>& prompt, int L,
                               DecodeMode mode = DecodeMode::greedy, double temperature = 1.0, uint64_t seed = 0) {
  require(L >= 1, "decode_tokens: L must be >= 1");
  require(prompt.length() + L <= w.context(), "decode_tokens: exceeds context cap");
  require(mode == DecodeMode::greedy || temperature >= 0.0, "decode_tokens: negative temperature");
  GenCache<T> scratch;
  const Mat<T> x0 = detail::assemble(w, prompt, {}, scratch);
  detail::KvState<T> st;
  st.k.resize(w.blocks.size());
  st.v.resize(w.blocks.size());
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    st.k[b].resize(0, w.width());
    st.v[b].resize(0, w.width());
  }
  Rng rng(seed);
  std::vector<int> out;
  RowVec<T> h = detail::feed(w, st, x0);
  for (int j = 0; j < L; ++j) {
    const RowVec<double> logits = ((h * w.head) + w.head_b).template cast<double>();
    if (!logits.allFinite()) throw NumericError("non-finite logits during decoding");
    int tok = 0;
    if (mode == DecodeMode::greedy || temperature == 0.0) {
      logits.maxCoeff(&tok);
    } else {
      const RowVec<double> z = (logits.array() - logits.maxCoeff()) / temperature;
      RowVec<double> p = z.array().exp();
      p /= p.sum();
      const double u = rng.uniform();
      double acc = 0.0;
      tok = static_cast<int>(p.size()) - 1;
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        acc += p(i);
        if (u < acc) {
          tok = static_cast<int>(i);
          break;
        }
      }
    }
    out.push_back(tok);
    if (j + 1 < L) {
      Mat<T> x = w.emb.row(tok) + w.pos.row(st.len);
      h = detail::feed(w, st, std::move(x));
    }
  }
  return out;
}

inline double token_accuracy(const std::vector<int>& a, const std::vector<int>& b) {
  require(a.size() == b.size() && !a.empty(), "token_accuracy: length mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hit += a[i] == b[i];
  return static_cast<double>(hit) / static_cast<double>(a.size());
}

}  // namespace drc
