#pragma once

// Run-directory orchestration behind the CLI subcommands. A run directory
// holds the exact config, run_info.txt, and one subdirectory per artifact:
//
//   data/       triplets_*.drcw, sessions_*.drcw, manifest.txt
//   tokenizer/  codebook.drcb
//   stage1/     checkpoint.drck, metrics.log, summary.txt
//   stage2/     checkpoint.drck, metrics.log, summary.txt
//   eval/       report.txt, sessions.csv, stage1_recon.txt, probes.txt, *.png
//   ablate/     <variant>_seed<k>/result.txt, table.csv
//   infer/      generated images and token files
//
// Every artifact directory carries stamp.txt with the hash of the config keys
// it depends on; stale or foreign artifacts are rejected.

#include "drc/checkpoint.hpp"
#include "drc/config.hpp"
#include "drc/evalkit.hpp"
#include "drc/image_io.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace drc {

namespace fs = std::filesystem;

inline fs::path default_run_root() {
  if (const char* env = std::getenv("DRC_RUN_ROOT"); env && *env) return env;
  return "drc_run";
}

struct StageHashes {
  uint64_t data, tokenizer, stage1, stage2;
};

inline StageHashes stage_hashes(const RunConfig& c) {
  return {c.section_hash({"world."}), c.section_hash({"world.", "tokenizer."}),
          c.section_hash({"world.", "tokenizer.", "model.", "stage1."}),
          c.section_hash({"world.", "tokenizer.", "model.", "stage1.", "stage2."})};
}

inline ModelConfig model_config(const RunConfig& c) {
  ModelConfig m;
  m.visual_vocab = c.vocab;
  m.text_vocab = world::kTextVocab;
  m.seq_len = vq::kSeqLen;
  m.width = c.width;
  m.blocks = c.blocks;
  m.latent_rows = c.latent_rows;
  m.ffn_mult = c.ffn_mult;
  m.context = c.context;
  m.disentangler = c.disentangler == "mlp" ? DisentanglerKind::mlp : DisentanglerKind::attention;
  m.fusion = c.fusion == "concat" ? FusionKind::concat : FusionKind::full;
  return m;
}

// Seeds for each consumer of randomness, all derived from the run seed.
struct RunSeeds {
  uint64_t triplets, sessions, model, stage1, stage2, maskgen;
};

inline RunSeeds run_seeds(uint64_t seed) {
  auto s = [&](uint64_t stream) { return Rng::derive(seed, stream).next(); };
  return {s(11), s(12), s(31), s(41), s(42), s(43)};
}

struct RunDir {
  fs::path root;

  fs::path data() const { return root / "data"; }
  fs::path tokenizer() const { return root / "tokenizer"; }
  fs::path stage1() const { return root / "stage1"; }
  fs::path stage2() const { return root / "stage2"; }
  fs::path eval() const { return root / "eval"; }
  fs::path ablate() const { return root / "ablate"; }
  fs::path infer() const { return root / "infer"; }
  fs::path codebook() const { return tokenizer() / "codebook.drcb"; }
  fs::path checkpoint(int stage) const { return (stage == 1 ? stage1() : stage2()) / "checkpoint.drck"; }
};

namespace detail {

inline void write_text(const fs::path& p, const std::string& s) {
  world::detail::write_file(p, std::vector<uint8_t>(s.begin(), s.end()));
}

inline std::string read_text(const fs::path& p) {
  const auto b = world::detail::read_file(p);
  return {b.begin(), b.end()};
}

inline std::string file_hash(const fs::path& p) { return hex64(fnv1a(read_text(p))); }

inline void write_stamp(const fs::path& dir, uint64_t h) { write_text(dir / "stamp.txt", "config_hash = " + hex64(h) + "\n"); }

inline bool stamp_matches(const fs::path& dir, uint64_t h) {
  std::ifstream in(dir / "stamp.txt");
  std::string line;
  return in && std::getline(in, line) && line == "config_hash = " + hex64(h);
}

inline void check_stamp(const fs::path& dir, uint64_t h, bool allow_mismatch, const char* what) {
  if (!fs::exists(dir / "stamp.txt")) throw MissingArtifact(std::string(what) + " not found in " + dir.string());
  if (!allow_mismatch && !stamp_matches(dir, h))
    throw VersionError(std::string(what) + " in " + dir.string() + " was produced with a different config");
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

struct Options {
  int workers = 1;
  bool allow_config_mismatch = false;
  std::ostream* log = nullptr;
};

// Writes config.txt and run_info.txt (tool version, seed, config hash,
// manifest hashes when data exists).
inline void write_run_info(const RunDir& rd, const RunConfig& cfg) {
  detail::write_text(rd.root / "config.txt", cfg.to_text(true));
  std::ostringstream o;
  o << "tool_version = " << kToolVersion << "\n"
    << "seed = " << cfg.seed << "\n"
    << "config_hash = " << hex64(cfg.hash()) << "\n";
  const auto manifest = rd.data() / "manifest.txt";
  if (fs::exists(manifest)) {
    o << "manifest_hash = " << detail::file_hash(manifest) << "\n";
    for (const auto& [k, v] : world::DatasetManifest::from_text(detail::read_text(manifest)).file_hashes)
      o << "data_hash." << k << " = " << v << "\n";
  }
  if (fs::exists(rd.codebook())) o << "codebook_hash = " << detail::file_hash(rd.codebook()) << "\n";
  for (int s : {1, 2})
    if (fs::exists(rd.checkpoint(s))) o << "stage" << s << "_checkpoint_hash = " << detail::file_hash(rd.checkpoint(s)) << "\n";
  detail::write_text(rd.root / "run_info.txt", o.str());
}

// ----------------------------------------------------------------------------
// Data
// ----------------------------------------------------------------------------

struct RunData {
  world::TripletDataset triplets;
  world::PersonalDataset sessions;
  world::DatasetManifest manifest;
};

inline void gen_data(const RunDir& rd, const RunConfig& cfg, const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunSeeds seeds = run_seeds(cfg.seed);
  const auto trip = world::build_triplet_dataset(static_cast<std::size_t>(cfg.triplets), seeds.triplets, opt.workers);
  world::PersonalConfig pc;
  pc.num_users = cfg.users;
  pc.sessions_per_user = cfg.sessions_per_user;
  pc.history_len = cfg.history;
  pc.reference_count = cfg.references;
  pc.persona_jitter = cfg.persona_jitter;
  pc.workers = opt.workers;
  const auto sess = world::build_personal_dataset(pc, seeds.sessions);

  world::DatasetManifest m;
  m.seed = cfg.seed;
  m.triplets = {trip.train.size(), trip.valid.size(), trip.test.size()};
  m.sessions = {sess.train.size(), sess.valid.size(), sess.test.size()};
  m.num_users = cfg.users;
  m.history_len = cfg.history;
  m.reference_count = cfg.references;
  auto save = [&](const std::string& name, const std::vector<uint8_t>& bytes) {
    world::detail::write_file(rd.data() / name, bytes);
    m.file_hashes[name] = hex64(fnv1a(bytes.data(), bytes.size()));
  };
  save("triplets_train.drcw", world::encode_triplets(trip.train));
  save("triplets_valid.drcw", world::encode_triplets(trip.valid));
  save("triplets_test.drcw", world::encode_triplets(trip.test));
  save("sessions_train.drcw", world::encode_sessions(sess.train));
  save("sessions_valid.drcw", world::encode_sessions(sess.valid));
  save("sessions_test.drcw", world::encode_sessions(sess.test));
  detail::write_text(rd.data() / "manifest.txt", m.to_text());
  detail::write_stamp(rd.data(), stage_hashes(cfg).data);
  write_run_info(rd, cfg);
  if (opt.log)
    *opt.log << "gen-data: " << cfg.triplets << " triplets, " << m.sessions.total() << " sessions in "
             << std::setprecision(3) << detail::seconds_since(t0) << "s\n";
}

inline RunData load_data(const RunDir& rd, const RunConfig& cfg, const Options& opt) {
  detail::check_stamp(rd.data(), stage_hashes(cfg).data, opt.allow_config_mismatch, "dataset");
  RunData d;
  d.manifest = world::DatasetManifest::from_text(detail::read_text(rd.data() / "manifest.txt"));
  auto bytes = [&](const std::string& name) {
    auto b = world::detail::read_file(rd.data() / name);
    const auto it = d.manifest.file_hashes.find(name);
    if (it == d.manifest.file_hashes.end() || it->second != hex64(fnv1a(b.data(), b.size())))
      throw FormatError("dataset file " + name + " does not match its manifest hash");
    return b;
  };
  d.triplets.train = world::decode_triplets(bytes("triplets_train.drcw"));
  d.triplets.valid = world::decode_triplets(bytes("triplets_valid.drcw"));
  d.triplets.test = world::decode_triplets(bytes("triplets_test.drcw"));
  d.sessions.train = world::decode_sessions(bytes("sessions_train.drcw"));
  d.sessions.valid = world::decode_sessions(bytes("sessions_valid.drcw"));
  d.sessions.test = world::decode_sessions(bytes("sessions_test.drcw"));
  return d;
}

// ----------------------------------------------------------------------------
// Tokenizer
// ----------------------------------------------------------------------------

// The first `count` images of the training triplets, in record order.
inline std::vector<world::ToyImage> tokenizer_corpus(const std::vector<world::TripletRecord>& train, int count) {
  std::vector<world::ToyImage> out;
  for (std::size_t i = 0; i < train.size() && static_cast<int>(out.size()) < count; ++i)
    for (const auto* img : {&train[i].anchor, &train[i].pos_style, &train[i].pos_semantic})
      if (static_cast<int>(out.size()) < count) out.push_back(*img);
  return out;
}

inline void fit_tokenizer(const RunDir& rd, const RunConfig& cfg, const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunData d = load_data(rd, cfg, opt);
  const auto cb = vq::fit_codebook(tokenizer_corpus(d.triplets.train, cfg.tokenizer_images), cfg.vocab, cfg.tokenizer_seed);
  vq::save_codebook(rd.codebook(), cb);
  std::vector<world::ToyImage> held;
  for (std::size_t i = 0; i < std::min<std::size_t>(200, d.triplets.test.size()); ++i) held.push_back(d.triplets.test[i].anchor);
  double mae = 0.0;
  for (const auto& h : held) mae += vq::mean_abs_error(h, vq::decode(vq::encode(h, cb), cb));
  mae /= static_cast<double>(held.size());
  std::ostringstream o;
  o << std::setprecision(10) << "vocab = " << cfg.vocab << "\nfit_images = " << cfg.tokenizer_images
    << "\nfit_seed = " << cfg.tokenizer_seed << "\nheldout_roundtrip_mae = " << mae << "\n";
  detail::write_text(rd.tokenizer() / "summary.txt", o.str());
  detail::write_stamp(rd.tokenizer(), stage_hashes(cfg).tokenizer);
  write_run_info(rd, cfg);
  if (opt.log)
    *opt.log << "fit-tokenizer: V=" << cfg.vocab << " held-out round-trip MAE " << mae << " in " << std::setprecision(3)
             << detail::seconds_since(t0) << "s\n";
}

inline vq::Codebook load_tokenizer(const RunDir& rd, const RunConfig& cfg, const Options& opt) {
  detail::check_stamp(rd.tokenizer(), stage_hashes(cfg).tokenizer, opt.allow_config_mismatch, "tokenizer");
  return vq::load_codebook(rd.codebook());
}

// ----------------------------------------------------------------------------
// Training
// ----------------------------------------------------------------------------

inline TrainConfig train_config(const RunConfig& cfg, int stage) {
  const RunSeeds seeds = run_seeds(cfg.seed);
  TrainConfig t;
  t.stage = stage;
  t.alpha_s = cfg.alpha_s;
  t.freeze_towers = cfg.freeze_towers;
  t.flags.importance_sampling = cfg.importance_sampling;
  t.log_every = 500;
  if (stage == 1) {
    t.epochs = cfg.s1_epochs;
    t.max_steps = cfg.s1_max_steps;
    t.batch = cfg.s1_batch;
    t.lr = cfg.s1_lr;
    t.eval_every = cfg.s1_eval_every;
    t.val_samples = cfg.s1_val_samples;
    t.seed = seeds.stage1;
  } else {
    t.epochs = cfg.s2_epochs;
    t.max_steps = cfg.s2_max_steps;
    t.batch = cfg.s2_batch;
    t.lr = cfg.s2_lr;
    t.eval_every = cfg.s2_eval_every;
    t.val_samples = cfg.s2_val_samples;
    t.seed = seeds.stage2;
  }
  return t;
}

template <class T>
void write_stage_summary(const fs::path& dir, const StageResult<T>& r, double seconds) {
  std::ostringstream o;
  o << std::setprecision(10) << "steps = " << r.steps << "\ninit_val_loss = " << r.init_val
    << "\nbest_val_loss = " << r.best_val << "\nbest_step = " << r.best_step << "\nparameters = " << param_count(r.best)
    << "\n";
  detail::write_text(dir / "summary.txt", o.str());
  if (seconds >= 0) detail::write_text(dir / "timing.txt", "seconds = " + std::to_string(seconds) + "\n");
}

inline Checkpoint<float> train_stage1_model(const RunConfig& cfg, const std::vector<TripletTokens>& train,
                                            const std::vector<TripletTokens>& valid, std::ostream* log,
                                            StageResult<float>* out = nullptr) {
  const auto init = make_model<float>(model_config(cfg), run_seeds(cfg.seed).model);
  auto res = run_stage(init, train, valid, train_config(cfg, 1), log);
  if (!all_finite(res.best)) throw NumericError("stage 1 produced non-finite parameters");
  Checkpoint<float> ck{1, static_cast<uint64_t>(res.best_step), stage_hashes(cfg).stage1, res.best};
  if (out) *out = std::move(res);
  return ck;
}

inline Checkpoint<float> train_stage2_model(const RunConfig& cfg, const Checkpoint<float>& s1,
                                            const std::vector<SessionTokens>& train,
                                            const std::vector<SessionTokens>& valid, std::ostream* log,
                                            StageResult<float>* out = nullptr) {
  DrcModel<float> init = s1.model;
  reset_maskgen(init, run_seeds(cfg.seed).maskgen);
  auto res = run_stage(init, train, valid, train_config(cfg, 2), log);
  if (!all_finite(res.best)) throw NumericError("stage 2 produced non-finite parameters");
  Checkpoint<float> ck{2, static_cast<uint64_t>(res.best_step), stage_hashes(cfg).stage2, res.best};
  if (out) *out = std::move(res);
  return ck;
}

inline void train_stage(const RunDir& rd, const RunConfig& cfg, int stage, const Options& opt) {
  if (stage != 1 && stage != 2) throw ConfigError("--stage must be 1 or 2");
  const auto t0 = std::chrono::steady_clock::now();
  const RunData d = load_data(rd, cfg, opt);
  const auto cb = load_tokenizer(rd, cfg, opt);
  const fs::path dir = stage == 1 ? rd.stage1() : rd.stage2();
  fs::create_directories(dir);
  std::ofstream metrics(dir / "metrics.log");
  StageResult<float> res;
  Checkpoint<float> ck;
  if (stage == 1) {
    ck = train_stage1_model(cfg, tokenize_all(d.triplets.train, cb, opt.workers),
                            tokenize_all(d.triplets.valid, cb, opt.workers), &metrics, &res);
  } else {
    const auto s1 = load_checkpoint<float>(rd.checkpoint(1), opt.allow_config_mismatch ? 0 : stage_hashes(cfg).stage1);
    ck = train_stage2_model(cfg, s1, tokenize_all(d.sessions.train, cb, opt.workers),
                            tokenize_all(d.sessions.valid, cb, opt.workers), &metrics, &res);
  }
  save_checkpoint(rd.checkpoint(stage), ck);
  write_stage_summary(dir, res, -1.0);
  detail::write_stamp(dir, stage == 1 ? stage_hashes(cfg).stage1 : stage_hashes(cfg).stage2);
  write_run_info(rd, cfg);
  if (opt.log)
    *opt.log << "train stage " << stage << ": " << res.steps << " steps, best validation loss " << res.best_val
             << " at step " << res.best_step << " (initial " << res.init_val << ") in " << std::setprecision(4)
             << detail::seconds_since(t0) << "s\n";
}

inline Checkpoint<float> load_stage(const RunDir& rd, const RunConfig& cfg, int stage, const Options& opt) {
  const auto h = stage_hashes(cfg);
  return load_checkpoint<float>(rd.checkpoint(stage), opt.allow_config_mismatch ? 0 : (stage == 1 ? h.stage1 : h.stage2));
}

// ----------------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------------

struct ReconAccuracy {
  std::array<double, kCombos> acc{};
  std::size_t samples = 0;

  double gap() const { return *std::max_element(acc.begin(), acc.end()) - *std::min_element(acc.begin(), acc.end()); }
};

// Greedy reconstruction of held-out anchors from each combination.
template <class T>
ReconAccuracy stage1_reconstruction(const DrcModel<T>& m, const std::vector<TripletTokens>& test, int n, int workers) {
  ReconAccuracy r;
  r.samples = std::min<std::size_t>(test.size(), static_cast<std::size_t>(n));
  require(r.samples > 0, "stage1_reconstruction: no samples");
  const auto words = stage1_words();
  std::vector<std::array<double, kCombos>> per(r.samples);
  world::parallel_for(r.samples, workers, [&](std::size_t i) {
    for (int z = 0; z < kCombos; ++z)
      per[i][static_cast<std::size_t>(z)] = token_accuracy(stage1_generate(m, test[i], words, z), test[i].a);
  });
  for (const auto& p : per)
    for (int z = 0; z < kCombos; ++z) r.acc[static_cast<std::size_t>(z)] += p[static_cast<std::size_t>(z)] / static_cast<double>(r.samples);
  return r;
}

inline std::string recon_text(const ReconAccuracy& r) {
  std::ostringstream o;
  o << std::setprecision(10) << "samples = " << r.samples << "\n";
  for (int z = 0; z < kCombos; ++z) o << "accuracy_" << kComboNames[static_cast<std::size_t>(z)] << " = " << r.acc[static_cast<std::size_t>(z)] << "\n";
  o << "gap = " << r.gap() << "\n";
  return o.str();
}

// Images for probe fitting (validation triplets) and scoring (test triplets).
inline std::vector<world::ToyImage> probe_images(const std::vector<world::TripletRecord>& recs, int count) {
  return tokenizer_corpus(recs, count);
}

struct ProbeReport {
  eval::ProbeAccuracy trained, untrained;
  eval::DisentanglementMatrix matrix, baseline;
};

template <class T>
ProbeReport run_probes(const DrcModel<T>& trained, const DrcModel<T>& untrained, const vq::Codebook& cb,
                       const std::vector<world::ToyImage>& fit, const std::vector<world::ToyImage>& score, int workers) {
  const std::vector<eval::Representation> reps{eval::Representation::style_tower, eval::Representation::semantic_tower,
                                               eval::Representation::pixels};
  ProbeReport r;
  r.trained = eval::probe_accuracy(eval::fit_probes(trained, cb, fit, reps, {}, workers), trained, cb, score, workers);
  const std::vector<eval::Representation> towers{eval::Representation::style_tower, eval::Representation::semantic_tower};
  r.untrained = eval::probe_accuracy(eval::fit_probes(untrained, cb, fit, towers, {}, workers), untrained, cb, score, workers);
  r.matrix = eval::disentanglement_matrix(r.trained);
  r.baseline = eval::disentanglement_matrix(r.untrained);
  return r;
}

inline std::string probe_text(const ProbeReport& p) {
  std::ostringstream o;
  o << std::setprecision(6);
  auto table = [&](const char* title, const eval::ProbeAccuracy& a) {
    o << "# " << title << "\nrepresentation";
    for (const char* f : world::kFactorNames) o << "," << f;
    o << "\n";
    for (const auto& [rep, acc] : a.acc) {
      o << eval::to_string(rep);
      for (double v : acc) o << "," << v;
      o << "\n";
    }
  };
  auto matrix = [&](const char* title, const eval::DisentanglementMatrix& m) {
    o << "# " << title << " (rows: style rep, semantic rep; columns: style factors, semantic factors)\n"
      << m.sty_on_sty << "," << m.sty_on_sem << "\n"
      << m.sem_on_sty << "," << m.sem_on_sem << "\n";
  };
  table("probe accuracy, trained towers", p.trained);
  table("probe accuracy, untrained towers", p.untrained);
  matrix("disentanglement matrix, trained", p.matrix);
  matrix("disentanglement matrix, untrained", p.baseline);
  o << "# chance\n" << p.matrix.chance_sty << "," << p.matrix.chance_sem << "\n";
  return o.str();
}

inline std::vector<world::UserSession> eval_subset(const std::vector<world::UserSession>& test, int n) {
  if (n <= 0 || static_cast<std::size_t>(n) >= test.size()) return test;
  return {test.begin(), test.begin() + n};
}

inline void evaluate(const RunDir& rd, const RunConfig& cfg, const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunData d = load_data(rd, cfg, opt);
  const auto cb = load_tokenizer(rd, cfg, opt);
  const auto s1 = load_stage(rd, cfg, 1, opt);
  const auto s2 = load_stage(rd, cfg, 2, opt);
  fs::create_directories(rd.eval());

  const auto recon = stage1_reconstruction(s1.model, tokenize_all(d.triplets.test, cb, opt.workers), cfg.recon_triplets, opt.workers);
  detail::write_text(rd.eval() / "stage1_recon.txt", recon_text(recon));

  const auto untrained = make_model<float>(s1.model.cfg, run_seeds(cfg.seed).model);
  const auto probes = run_probes(s1.model, untrained, cb, probe_images(d.triplets.valid, cfg.probe_images),
                                 probe_images(d.triplets.test, cfg.probe_images), opt.workers);
  detail::write_text(rd.eval() / "probes.txt", probe_text(probes));
  img::write_png(rd.eval() / "disentanglement.png",
                 img::heat_table({{probes.matrix.sty_on_sty, probes.matrix.sty_on_sem},
                                  {probes.matrix.sem_on_sty, probes.matrix.sem_on_sem}}));

  const auto rep = eval::evaluate_sessions(s2.model, cb, eval_subset(d.sessions.test, cfg.eval_sessions), cfg.alpha_s, opt.workers);
  detail::write_text(rd.eval() / "report.txt", rep.to_text());
  detail::write_text(rd.eval() / "sessions.csv", rep.table());
  img::write_png(rd.eval() / "alpha_curve.png", img::alpha_curve(rep.alpha, {rep.style_by_alpha, rep.semantic_by_alpha}));
  detail::write_stamp(rd.eval(), cfg.hash());
  write_run_info(rd, cfg);
  if (opt.log)
    *opt.log << std::setprecision(4) << "eval: stage-1 accuracy aa " << recon.acc[0] << " (gap " << recon.gap()
             << "); style alignment " << rep.style_alignment << " vs recon " << rep.recon_style_alignment
             << "; semantic alignment " << rep.semantic_alignment << "; in " << detail::seconds_since(t0) << "s\n";
}

// ----------------------------------------------------------------------------
// Ablations
// ----------------------------------------------------------------------------

inline constexpr std::array<const char*, 4> kVariants{"full", "no_imp", "no_fusion", "no_attn"};

inline RunConfig variant_config(const RunConfig& base, const std::string& variant, int seed_index) {
  RunConfig c = base;
  c.seed = base.seed + 1000 * static_cast<uint64_t>(seed_index + 1);
  c.s1_max_steps = base.ablate_s1_steps;
  c.s2_max_steps = base.ablate_s2_steps;
  c.s1_epochs = c.s2_epochs = 1000;
  if (variant == "no_imp") c.importance_sampling = false;
  else if (variant == "no_fusion") c.fusion = "concat";
  else if (variant == "no_attn") c.disentangler = "mlp";
  else require(variant == "full", "unknown ablation variant " + variant);
  return c;
}

struct VariantResult {
  double style = 0.0, semantic = 0.0;
  double composite() const { return 0.5 * (style + semantic); }
};

inline VariantResult parse_variant_result(const std::string& text) {
  VariantResult r;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = detail::trim(line.substr(0, eq));
    if (k == "style_alignment") r.style = std::stod(line.substr(eq + 1));
    if (k == "semantic_alignment") r.semantic = std::stod(line.substr(eq + 1));
  }
  return r;
}

struct AblationTable {
  std::map<std::string, std::vector<VariantResult>> runs;  // per seed

  VariantResult mean(const std::string& v) const {
    VariantResult m;
    const auto& rs = runs.at(v);
    for (const auto& r : rs) {
      m.style += r.style / static_cast<double>(rs.size());
      m.semantic += r.semantic / static_cast<double>(rs.size());
    }
    return m;
  }

  std::string csv() const {
    std::ostringstream o;
    o << std::setprecision(10) << "variant,style_alignment,semantic_alignment,composite,seeds\n";
    for (const char* v : kVariants) {
      if (!runs.count(v)) continue;
      const auto m = mean(v);
      o << v << "," << m.style << "," << m.semantic << "," << m.composite() << "," << runs.at(v).size() << "\n";
    }
    return o.str();
  }
};

// One ablation run at the reduced budget; cached by config hash.
inline VariantResult run_variant(const RunDir& rd, const RunConfig& base, const std::string& variant, int seed_index,
                                 const RunData& d, const vq::Codebook& cb, const Options& opt) {
  const RunConfig c = variant_config(base, variant, seed_index);
  const fs::path dir = rd.ablate() / (variant + "_seed" + std::to_string(seed_index));
  if (detail::stamp_matches(dir, c.hash()) && fs::exists(dir / "result.txt"))
    return parse_variant_result(detail::read_text(dir / "result.txt"));
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(dir);
  std::ofstream metrics(dir / "metrics.log");
  const auto s1 = train_stage1_model(c, tokenize_all(d.triplets.train, cb, opt.workers),
                                     tokenize_all(d.triplets.valid, cb, opt.workers), &metrics);
  const auto s2 = train_stage2_model(c, s1, tokenize_all(d.sessions.train, cb, opt.workers),
                                     tokenize_all(d.sessions.valid, cb, opt.workers), &metrics);
  const auto rep =
      eval::evaluate_sessions(s2.model, cb, eval_subset(d.sessions.test, base.ablate_eval_sessions), c.alpha_s, opt.workers);
  detail::write_text(dir / "config.txt", c.to_text(false));
  detail::write_text(dir / "result.txt", rep.to_text());
  detail::write_stamp(dir, c.hash());
  if (opt.log)
    *opt.log << "ablate " << variant << " seed " << seed_index << ": style " << rep.style_alignment << " semantic "
             << rep.semantic_alignment << " in " << std::setprecision(4) << detail::seconds_since(t0) << "s\n";
  // Same rounding as a cached read.
  return parse_variant_result(rep.to_text());
}

inline AblationTable ablate(const RunDir& rd, const RunConfig& cfg, const Options& opt) {
  const RunData d = load_data(rd, cfg, opt);
  const auto cb = load_tokenizer(rd, cfg, opt);
  AblationTable t;
  for (int k = 0; k < cfg.ablate_seeds; ++k)
    for (const char* v : kVariants) t.runs[v].push_back(run_variant(rd, cfg, v, k, d, cb, opt));
  detail::write_text(rd.ablate() / "table.csv", t.csv());
  write_run_info(rd, cfg);
  return t;
}

// ----------------------------------------------------------------------------
// Inference
// ----------------------------------------------------------------------------

struct InferRequest {
  std::size_t session = 0;
  int reference = 0;
  double alpha_m = 0.0;
  double temperature = 0.0;  // 0: greedy
  uint64_t sample_seed = 0;
};

struct InferResult {
  std::vector<int> tokens;
  world::FactorSpec read;
  fs::path image;
};

inline std::string tokens_text(const std::vector<int>& t) {
  std::ostringstream o;
  for (std::size_t i = 0; i < t.size(); ++i) o << t[i] << ((i + 1) % world::kGrid == 0 ? "\n" : " ");
  return o.str();
}

inline InferResult infer(const RunDir& rd, const RunConfig& cfg, const InferRequest& req, const Options& opt) {
  if (!(req.alpha_m >= 0.0 && req.alpha_m <= 1.0)) throw ConfigError("--alpha-m must lie in [0,1]");
  if (!(req.temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
  const RunData d = load_data(rd, cfg, opt);
  const auto cb = load_tokenizer(rd, cfg, opt);
  const auto s2 = load_stage(rd, cfg, 2, opt);
  if (req.session >= d.sessions.test.size())
    throw ConfigError("session " + std::to_string(req.session) + " out of range (test split has " +
                      std::to_string(d.sessions.test.size()) + ")");
  const auto& s = d.sessions.test[req.session];
  if (req.reference < 0 || req.reference >= static_cast<int>(s.reference_set.size()))
    throw ConfigError("reference index out of range");
  const auto tok = tokenize(s, cb);
  const auto in = stage2_inputs(tok, req.reference, cfg.alpha_s, req.alpha_m, false);
  InferResult r;
  r.tokens = req.temperature > 0.0 ? stage2_generate(s2.model, in, DecodeMode::temperature, req.temperature, req.sample_seed)
                                   : stage2_generate(s2.model, in);
  const auto image = vq::decode(r.tokens, cb);
  r.read = eval::read_factors(image);

  std::ostringstream stem;
  stem << "session" << req.session << "_ref" << req.reference << "_alpha" << std::fixed << std::setprecision(2) << req.alpha_m;
  if (req.temperature > 0.0) stem << "_t" << req.temperature << "_seed" << req.sample_seed;
  r.image = rd.infer() / (stem.str() + ".png");
  img::write_png(r.image, img::from_image(image, 8));
  detail::write_text(rd.infer() / (stem.str() + ".tokens"), tokens_text(r.tokens));
  img::write_png(rd.infer() / ("session" + std::to_string(req.session) + "_reference" + std::to_string(req.reference) + ".png"),
                 img::from_image(s.reference_set[static_cast<std::size_t>(req.reference)], 8));
  for (std::size_t i = 0; i < s.history.size(); ++i)
    img::write_png(rd.infer() / ("session" + std::to_string(req.session) + "_history" + std::to_string(i) + ".png"),
                   img::from_image(s.history[i], 8));
  write_run_info(rd, cfg);
  return r;
}

}  // namespace drc
