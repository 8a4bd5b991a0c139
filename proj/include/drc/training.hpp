#pragma once

// Stage-1 disentanglement training with loss-proportional combination
// sampling, Stage-2 personalized fine-tuning, and the epoch loop with
// validation and best-checkpoint retention.

#include "drc/model.hpp"
#include "drc/optim.hpp"
#include "drc/toyworld.hpp"
#include "drc/vqtok.hpp"

#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

namespace drc {

using ComboDist = std::array<double, kCombos>;

// p(z) = l(z) / sum l; uniform when the total is below 1e-9.
inline ComboDist combo_probs(const ComboDist& losses) {
  double total = 0.0;
  for (double l : losses) {
    if (!(l >= 0.0)) throw InputError("combo_probs: losses must be non-negative and finite");
    total += l;
  }
  ComboDist p{};
  if (total < 1e-9) {
    p.fill(1.0 / kCombos);
    return p;
  }
  for (int z = 0; z < kCombos; ++z) p[static_cast<std::size_t>(z)] = losses[static_cast<std::size_t>(z)] / total;
  return p;
}

inline int sample_combo(const ComboDist& p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last = 0;
  for (int z = 0; z < kCombos; ++z) {
    const double pz = p[static_cast<std::size_t>(z)];
    if (pz <= 0.0) continue;
    last = z;
    acc += pz;
    if (u < acc) return z;
  }
  return last;
}

struct AblationFlags {
  bool importance_sampling = true;
  FusionKind fusion = FusionKind::full;
  DisentanglerKind disentangler = DisentanglerKind::attention;
};

struct LossRecord {
  long step = 0;
  int stage = 1;
  ComboDist losses{};  // stage 1: all four; stage 2: losses[0] only
  int z = -1;
  double alpha_m = 0.0;
  int reference = -1;
};

// ----------------------------------------------------------------------------
// Tokenized data
// ----------------------------------------------------------------------------

struct SessionTokens {
  std::vector<std::vector<int>> history;
  std::vector<std::vector<int>> references;
  std::vector<int> words;
  std::vector<int> target;
};

inline std::vector<int> to_words(const world::TextInstruction& t) {
  return {t.token_ids.begin(), t.token_ids.end()};
}

inline std::vector<int> stage1_words() { return to_words(world::prompt_prefix()); }

inline TripletTokens tokenize(const world::TripletRecord& t, const vq::Codebook& cb) {
  return {vq::encode(t.anchor, cb), vq::encode(t.pos_style, cb), vq::encode(t.pos_semantic, cb)};
}

inline SessionTokens tokenize(const world::UserSession& s, const vq::Codebook& cb) {
  SessionTokens out;
  for (const auto& h : s.history) out.history.push_back(vq::encode(h, cb));
  for (const auto& r : s.reference_set) out.references.push_back(vq::encode(r, cb));
  out.words = to_words(s.text_instruction);
  out.target = vq::encode(s.target, cb);
  return out;
}

template <class Rec>
auto tokenize_all(const std::vector<Rec>& recs, const vq::Codebook& cb, int workers = 1) {
  std::vector<decltype(tokenize(recs[0], cb))> out(recs.size());
  world::parallel_for(recs.size(), workers, [&](std::size_t i) { out[i] = tokenize(recs[i], cb); });
  return out;
}

inline Stage2Inputs stage2_inputs(const SessionTokens& s, int reference, double alpha_s, double alpha_m,
                                  bool with_target = true) {
  require(!s.references.empty(), "stage2: empty reference set");
  require(reference >= 0 && reference < static_cast<int>(s.references.size()), "stage2: reference index out of range");
  Stage2Inputs in;
  in.history = s.history;
  in.reference = s.references[static_cast<std::size_t>(reference)];
  in.words = s.words;
  if (with_target) in.target = s.target;
  in.mask = {alpha_s, alpha_m};
  return in;
}

// ----------------------------------------------------------------------------
// Steps
// ----------------------------------------------------------------------------

struct TrainConfig {
  int stage = 1;
  int epochs = 1;
  long max_steps = 0;  // 0: no cap beyond epochs
  int batch = 1;
  double lr = 1e-4;
  int eval_every = 1000;
  int val_samples = 64;
  int log_every = 50;
  double alpha_s = 0.2;
  bool freeze_towers = false;
  AblationFlags flags;
  uint64_t seed = 1;
};

// One optimizer step over a batch of triplets. Draw order per sample: z.
template <class T>
LossRecord stage1_step(DrcModel<T>& model, Adam<DrcModel<T>>& opt, const std::vector<const TripletTokens*>& batch,
                       const AblationFlags& flags, Rng& rng, const std::vector<int>& words) {
  require(!batch.empty(), "stage1_step: empty batch");
  DrcModel<T> grads = zero_grads(model);
  LossRecord rec;
  rec.stage = 1;
  const T scale = T(1) / static_cast<T>(batch.size());
  for (const TripletTokens* tok : batch) {
    const auto fw = stage1_forward(model, *tok, words);
    const ComboDist p = flags.importance_sampling ? combo_probs(fw.losses) : ComboDist{0.25, 0.25, 0.25, 0.25};
    const int z = sample_combo(p, rng);
    stage1_backward(model, fw, z, grads, scale);
    rec.losses = fw.losses;
    rec.z = z;
  }
  opt.step(model, grads);
  return rec;
}

// Draw order per sample: reference index, then alpha_m.
template <class T>
LossRecord stage2_step(DrcModel<T>& model, Adam<DrcModel<T>>& opt, const std::vector<const SessionTokens*>& batch,
                       double alpha_s, bool freeze_towers, Rng& rng) {
  require(!batch.empty(), "stage2_step: empty batch");
  DrcModel<T> grads = zero_grads(model);
  LossRecord rec;
  rec.stage = 2;
  const T scale = T(1) / static_cast<T>(batch.size());
  for (const SessionTokens* s : batch) {
    require(!s->references.empty(), "stage2_step: empty reference set");
    const int r = static_cast<int>(rng.below(s->references.size()));
    const double alpha_m = rng.uniform();
    const Stage2Inputs in = stage2_inputs(*s, r, alpha_s, alpha_m);
    const auto fw = stage2_forward(model, in);
    stage2_backward(model, in, fw, grads, scale);
    rec.losses = {fw.loss, 0.0, 0.0, 0.0};
    rec.reference = r;
    rec.alpha_m = alpha_m;
  }
  if (freeze_towers) zero_params(grads.dis);
  opt.step(model, grads);
  return rec;
}

// ----------------------------------------------------------------------------
// Validation
// ----------------------------------------------------------------------------

// Mean over the first n validation triplets of the mean four-combination loss.
template <class T>
double stage1_validation(const DrcModel<T>& model, const std::vector<TripletTokens>& valid, int n) {
  const auto words = stage1_words();
  const std::size_t count = std::min<std::size_t>(valid.size(), static_cast<std::size_t>(std::max(n, 1)));
  require(count > 0, "stage1_validation: empty validation set");
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto fw = stage1_forward(model, valid[i], words);
    for (double l : fw.losses) s += l;
  }
  return s / static_cast<double>(count * kCombos);
}

// Reference index and alpha_m per session come from a fixed stream, so the
// validation loss is a deterministic function of the weights.
template <class T>
double stage2_validation(const DrcModel<T>& model, const std::vector<SessionTokens>& valid, int n, double alpha_s) {
  const std::size_t count = std::min<std::size_t>(valid.size(), static_cast<std::size_t>(std::max(n, 1)));
  require(count > 0, "stage2_validation: empty validation set");
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    Rng r = Rng::derive(0x5EED'0002ull, i);
    const int ref = static_cast<int>(r.below(valid[i].references.size()));
    const double alpha_m = r.uniform();
    s += stage2_forward(model, stage2_inputs(valid[i], ref, alpha_s, alpha_m)).loss;
  }
  return s / static_cast<double>(count);
}

// ----------------------------------------------------------------------------
// Epoch loop
// ----------------------------------------------------------------------------

template <class T>
struct StageResult {
  DrcModel<T> best;
  double best_val = 0.0;
  long best_step = 0;
  double init_val = 0.0;
  long steps = 0;
  DrcModel<T> last;
};

inline std::string format_record(const LossRecord& r) {
  std::ostringstream o;
  o << std::setprecision(6) << "stage=" << r.stage << " step=" << r.step;
  if (r.stage == 1) {
    for (int z = 0; z < kCombos; ++z) o << " loss_" << kComboNames[static_cast<std::size_t>(z)] << "=" << r.losses[static_cast<std::size_t>(z)];
    o << " z=" << kComboNames[static_cast<std::size_t>(r.z)];
  } else {
    o << " loss=" << r.losses[0] << " reference=" << r.reference << " alpha_m=" << r.alpha_m;
  }
  return o.str();
}

// Trains one stage starting from `init`. The best checkpoint by validation
// loss (including the initial weights) is retained.
template <class T, class Sample>
StageResult<T> run_stage(const DrcModel<T>& init, const std::vector<Sample>& train, const std::vector<Sample>& valid,
                         const TrainConfig& cfg, std::ostream* log = nullptr) {
  require(cfg.stage == 1 || cfg.stage == 2, "run_stage: stage must be 1 or 2");
  require(!train.empty() && !valid.empty(), "run_stage: empty train or validation split");
  require(cfg.batch >= 1 && cfg.epochs >= 1, "run_stage: batch and epochs must be positive");
  constexpr bool is_stage1 = std::is_same_v<Sample, TripletTokens>;
  require(is_stage1 == (cfg.stage == 1), "run_stage: data does not match stage");

  auto validate = [&](const DrcModel<T>& m) {
    if constexpr (is_stage1)
      return stage1_validation(m, valid, cfg.val_samples);
    else
      return stage2_validation(m, valid, cfg.val_samples, cfg.alpha_s);
  };

  StageResult<T> res{init, 0.0, 0, 0.0, 0, init};
  DrcModel<T>& model = res.last;
  Adam<DrcModel<T>> opt(model, {cfg.lr});
  Rng rng(cfg.seed);
  const auto words = stage1_words();

  res.init_val = res.best_val = validate(model);
  if (log) *log << "stage=" << cfg.stage << " step=0 val_loss=" << std::setprecision(8) << res.best_val << "\n";

  std::vector<std::size_t> order(train.size());
  long step = 0;
  const long cap = cfg.max_steps > 0 ? cfg.max_steps : std::numeric_limits<long>::max();
  for (int epoch = 0; epoch < cfg.epochs && step < cap; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t off = 0; off < order.size() && step < cap; off += static_cast<std::size_t>(cfg.batch)) {
      LossRecord rec;
      if constexpr (is_stage1) {
        std::vector<const TripletTokens*> batch;
        for (std::size_t k = off; k < std::min(order.size(), off + static_cast<std::size_t>(cfg.batch)); ++k)
          batch.push_back(&train[order[k]]);
        rec = stage1_step(model, opt, batch, cfg.flags, rng, words);
      } else {
        std::vector<const SessionTokens*> batch;
        for (std::size_t k = off; k < std::min(order.size(), off + static_cast<std::size_t>(cfg.batch)); ++k)
          batch.push_back(&train[order[k]]);
        rec = stage2_step(model, opt, batch, cfg.alpha_s, cfg.freeze_towers, rng);
      }
      rec.step = ++step;
      if (log && cfg.log_every > 0 && step % cfg.log_every == 0) *log << format_record(rec) << "\n";
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
        const double v = validate(model);
        if (log) *log << "stage=" << cfg.stage << " step=" << step << " val_loss=" << std::setprecision(8) << v << std::endl;
        if (v < res.best_val) {
          res.best_val = v;
          res.best_step = step;
          res.best = model;
        }
      }
    }
  }
  if (cfg.eval_every <= 0 || step % cfg.eval_every != 0) {
    const double v = validate(model);
    if (log) *log << "stage=" << cfg.stage << " step=" << step << " val_loss=" << std::setprecision(8) << v << std::endl;
    if (v < res.best_val) {
      res.best_val = v;
      res.best_step = step;
      res.best = model;
    }
  }
  res.steps = step;
  return res;
}

}  // namespace drc
