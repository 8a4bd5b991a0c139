#include "drc/pipeline.hpp"

#include <gtest/gtest.h>
#include <png.h>

#include <cstdio>
#include <sys/wait.h>

using namespace drc;

namespace {

const char* kTinyConfig = R"(# small enough for a unit test
seed = 5
world.triplets = 2000
world.users = 4
world.sessions_per_user = 10
tokenizer.images = 600
model.width = 16
model.blocks = 1
model.latent_rows = 4
stage1.max_steps = 40
stage1.eval_every = 20
stage1.val_samples = 4
stage2.max_steps = 20
stage2.eval_every = 10
stage2.val_samples = 4
eval.probe_images = 400
eval.recon_triplets = 8
ablate.seeds = 1
ablate.stage1_steps = 10
ablate.stage2_steps = 5
ablate.eval_sessions = 2
)";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("drc_test_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DRC_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::map<std::string, std::vector<uint8_t>> tree(const fs::path& root) {
  std::map<std::string, std::vector<uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = world::detail::read_file(e.path());
  return out;
}

struct Decoded {
  png_uint_32 width = 0, height = 0;
  std::vector<uint8_t> rgb;
};

// Decoded with libpng rather than the writer's own code.
Decoded read_png(const fs::path& p) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, p.c_str())) throw std::runtime_error(img.message);
  img.format = PNG_FORMAT_RGB;
  Decoded d{img.width, img.height, std::vector<uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, d.rgb.data(), 0, nullptr)) throw std::runtime_error(img.message);
  return d;
}

}  // namespace

TEST(Config, ParsesOverridesAndRejectsBadInput) {
  const auto c = parse_config(kTinyConfig);
  EXPECT_EQ(c.triplets, 2000);
  EXPECT_EQ(c.width, 16);
  EXPECT_EQ(c.s1_lr, 1e-4);
  EXPECT_EQ(parse_config(c.to_text()).to_text(), c.to_text());
  EXPECT_THROW(parse_config("bogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("stage1.lr = nan\n"), ConfigError);
  EXPECT_THROW(parse_config("stage2.alpha_s = 1.2\n"), ConfigError);
  EXPECT_THROW(parse_config("model.fusion = sum\n"), ConfigError);
  EXPECT_THROW(parse_config("config_version = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("seed 3\n"), ConfigError);
  RunConfig o = c;
  EXPECT_THROW(apply_override(o, "seed"), ConfigError);
  apply_override(o, "workers = 3");
  EXPECT_EQ(o.hash(), c.hash());
}

TEST(Config, SectionHashesTrackTheirKeysOnly) {
  const auto c = parse_config(kTinyConfig);
  const auto h = stage_hashes(c);
  RunConfig s2 = c;
  s2.s2_lr = 3e-5;
  EXPECT_EQ(stage_hashes(s2).stage1, h.stage1);
  EXPECT_NE(stage_hashes(s2).stage2, h.stage2);
  RunConfig m = c;
  m.width = 32;
  EXPECT_EQ(stage_hashes(m).tokenizer, h.tokenizer);
  EXPECT_NE(stage_hashes(m).stage1, h.stage1);
  RunConfig w = c;
  w.triplets = 2001;
  EXPECT_NE(stage_hashes(w).data, h.data);
}

TEST(Checkpoint, RoundTripAndErrors) {
  ModelConfig mc;
  mc.width = 8;
  mc.fusion = FusionKind::concat;
  const Checkpoint<float> ck{2, 123, 0xABCDull, make_model<float>(mc, 9)};
  const auto bytes = serialize_checkpoint(ck);
  const auto back = deserialize_checkpoint<float>(bytes, 0xABCDull);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(back.step, 123u);
  EXPECT_EQ(back.model.cfg.fusion, FusionKind::concat);
  EXPECT_THROW(deserialize_checkpoint<float>(bytes, 0x1234ull), VersionError);
  EXPECT_THROW(deserialize_checkpoint<double>(bytes), FormatError);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint<float>(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(deserialize_checkpoint<float>(bad), VersionError);
  EXPECT_THROW(deserialize_checkpoint<float>(std::vector<uint8_t>(bytes.begin(), bytes.end() - 3)), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(deserialize_checkpoint<float>(bad), FormatError);
  bad = bytes;
  const float nan = std::nanf("");
  std::memcpy(bad.data() + bad.size() - 4, &nan, 4);
  EXPECT_THROW(deserialize_checkpoint<float>(bad), NumericError);
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/checkpoint.drck"), MissingArtifact);
}

TEST(Png, DecodesToTheRenderedPixels) {
  const fs::path dir = scratch("png");
  Rng rng(3);
  const auto im = world::render(world::random_factors(rng), 11);
  img::write_png(dir / "a.png", img::from_image(im, 2));
  const auto d = read_png(dir / "a.png");
  ASSERT_EQ(d.width, 64u);
  ASSERT_EQ(d.height, 64u);
  const auto bytes = im.to_bytes();
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c)
        ASSERT_EQ(d.rgb[(static_cast<std::size_t>(y) * 64 + x) * 3 + c], bytes[(static_cast<std::size_t>(y / 2) * 32 + x / 2) * 3 + c]);
}

TEST(Cli, UsageAndConfigErrors) {
  const fs::path dir = scratch("errors");
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("--run-dir " + dir.string() + " --set bogus=1 gen-data"), 2);
  EXPECT_EQ(run_cli("--run-dir " + dir.string() + " --config " + (dir / "missing.txt").string() + " gen-data"), 3);
  EXPECT_EQ(run_cli("--run-dir " + dir.string() + " train --stage 3"), 2);
  EXPECT_EQ(run_cli("--run-dir " + dir.string() + " train --stage 1"), 3);
  EXPECT_EQ(run_cli("--run-dir " + dir.string() + " show-config"), 0);
}

// gen-data through infer on a tiny world, twice, in two run directories.
TEST(Cli, EndToEndIsReproducible) {
  const fs::path base = scratch("e2e");
  world::detail::write_file(base / "tiny.cfg", std::vector<uint8_t>(kTinyConfig, kTinyConfig + std::strlen(kTinyConfig)));
  const std::string cfg = " --config " + (base / "tiny.cfg").string();
  std::array<std::map<std::string, std::vector<uint8_t>>, 2> trees;
  for (int r = 0; r < 2; ++r) {
    const std::string rd = "--run-dir " + (base / ("run" + std::to_string(r))).string() + cfg +
                           (r == 1 ? " --workers 2" : "");
    for (const char* step : {"gen-data", "fit-tokenizer", "train --stage 1", "train --stage 2", "eval", "ablate",
                             "infer --alpha-m 0.3 --session 1", "infer --alpha-m 1 --session 0 --temperature 0.8 --sample-seed 4"})
      ASSERT_EQ(run_cli(rd + " " + step), 0) << step;
    trees[static_cast<std::size_t>(r)] = tree(base / ("run" + std::to_string(r)));
  }
  // Second ablate reads every variant back from its cached result.
  const auto table = world::detail::read_file(base / "run0" / "ablate" / "table.csv");
  ASSERT_EQ(run_cli("--run-dir " + (base / "run0").string() + cfg + " ablate"), 0);
  EXPECT_TRUE(world::detail::read_file(base / "run0" / "ablate" / "table.csv") == table);
  // config.txt records the worker count; everything else must match bitwise.
  trees[0].erase("config.txt");
  trees[1].erase("config.txt");
  ASSERT_EQ(trees[0].size(), trees[1].size());
  for (const auto& [name, bytes] : trees[0]) EXPECT_TRUE(trees[1].at(name) == bytes) << name;
  for (const char* f : {"data/manifest.txt", "tokenizer/codebook.drcb", "stage1/checkpoint.drck", "stage2/checkpoint.drck",
                        "eval/report.txt", "eval/probes.txt", "eval/stage1_recon.txt", "ablate/table.csv", "run_info.txt"})
    EXPECT_TRUE(trees[0].count(f)) << f;
  const auto png = read_png(base / "run0" / "infer" / "session1_ref0_alpha0.30.png");
  EXPECT_EQ(png.width, 256u);

  const std::string rd = "--run-dir " + (base / "run0").string() + cfg;
  EXPECT_EQ(run_cli(rd + " infer --alpha-m 1.5"), 2);
  EXPECT_EQ(run_cli(rd + " infer --alpha-m 0.5 --session 999"), 2);
  // Artifacts trained under a different model config are refused.
  EXPECT_EQ(run_cli(rd + " --set model.width=32 eval"), 5);
  EXPECT_EQ(run_cli(rd + " --set model.width=32 --allow-config-mismatch infer --alpha-m 0.5"), 0);

  // A checkpoint with a non-finite weight is a numeric failure.
  auto ck = world::detail::read_file(base / "run0" / "stage2" / "checkpoint.drck");
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(ck.data() + ck.size() - 4, &inf, 4);
  world::detail::write_file(base / "run0" / "stage2" / "checkpoint.drck", ck);
  EXPECT_EQ(run_cli(rd + " infer --alpha-m 0.5"), 4);
  fs::remove(base / "run0" / "stage2" / "checkpoint.drck");
  EXPECT_EQ(run_cli(rd + " infer --alpha-m 0.5"), 3);
  fs::remove_all(base);
}
