#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "cpmr/config.hpp"

using namespace cpmr;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream is(text);
  return parse_run_config(is);
}

const char* kMinimal = "dataset.path = /data/x.bin\noutput.dir = /tmp/out\n";

}  // namespace

TEST(RunConfig, MinimalConfigUsesDefaults) {
  RunConfig c = parse(kMinimal);
  EXPECT_EQ(c.dataset_path, "/data/x.bin");
  EXPECT_EQ(c.output_dir, "/tmp/out");
  EXPECT_EQ(c.model.d, ModelConfig{}.d);
  EXPECT_EQ(c.train.n_tbptt, 20);
  EXPECT_EQ(c.train.n_neg, 8);
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{0});
  EXPECT_EQ(c.eval_split, Split::test);
}

TEST(RunConfig, ParsesEveryKind) {
  RunConfig c = parse(std::string(kMinimal) +
                      "# comment line\n"
                      "model.d = 16   # trailing comment\n"
                      "model.scaling = rows\n"
                      "model.disable_ctx = true\n"
                      "train.lr = 0.005\n"
                      "dataset.format = amazon_csv\n"
                      "eval.split = val\n"
                      "eval.filter_seen = true\n"
                      "seeds = 1, 2,3\n");
  EXPECT_EQ(c.model.d, 16u);
  EXPECT_EQ(c.model.scaling, RadiusScaling::target_rows);
  EXPECT_TRUE(c.model.disable_ctx);
  EXPECT_EQ(c.train.lr, 0.005);
  EXPECT_EQ(c.dataset_format, DatasetFormat::amazon_csv);
  EXPECT_EQ(c.eval_split, Split::validation);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_TRUE(c.eval_filter_seen);
}

TEST(RunConfig, MissingFieldIsNamed) {
  try {
    parse("output.dir = /tmp/out\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'dataset.path'"), std::string::npos) << e.what();
  }
  try {
    parse("dataset.path = x\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'output.dir'"), std::string::npos) << e.what();
  }
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(parse(std::string(kMinimal) + "model.depth = 3\n"), ParseError);
  EXPECT_THROW(parse(std::string(kMinimal) + "model.d = 4\nmodel.d = 5\n"), ParseError);
  EXPECT_THROW(parse(std::string(kMinimal) + "just words\n"), ParseError);
  EXPECT_THROW(parse(std::string(kMinimal) + "model.d = four\n"), ConfigError);
  EXPECT_THROW(parse(std::string(kMinimal) + "model.disable_ctx = maybe\n"), ConfigError);
  EXPECT_THROW(parse(std::string(kMinimal) + "train.n_tbptt = 0\n"), ConfigError);
  EXPECT_THROW(parse(std::string(kMinimal) + "eval.unit = per_user_day\n"), ConfigError);
  EXPECT_THROW(parse(std::string(kMinimal) + "model.disable_ctx = true\nmodel.disable_his = true\n"), ConfigError);
  EXPECT_THROW(parse(std::string(kMinimal) + "seeds = \n"), ConfigError);
  try {
    parse(std::string(kMinimal) + "bogus = 1\n");
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(RunConfig, EchoCoversEveryKeyAndRoundTrips) {
  RunConfig c = parse(std::string(kMinimal) + "model.d = 12\nmodel.literal_update = true\ntrain.lr = 0.01\nseeds = 4,5\n");
  const auto echo = resolved_config(c);
  for (const char* k : {"dataset.path", "dataset.format", "dataset.k_core", "model.d", "model.s_days", "model.K",
                        "model.scaling", "model.fusion_bias", "model.disable_ctx", "model.disable_his",
                        "model.disable_fusion", "model.literal_update", "train.lr", "train.weight_decay",
                        "train.weight_decay_mode", "train.n_tbptt", "train.n_neg", "train.max_epochs",
                        "train.patience", "train.segment_loss_reduction", "eval.split", "eval.unit",
                        "eval.filter_seen", "output.dir", "seeds"})
    EXPECT_TRUE(echo.count(k)) << k;
  EXPECT_EQ(echo.at("seeds"), "4,5");
  EXPECT_EQ(echo.at("eval.unit"), "per_interaction");

  const RunConfig back = run_config_from(echo);
  EXPECT_EQ(resolved_config(back), echo);
  EXPECT_EQ(render_config(parse(render_config(c))), render_config(c));
}

TEST(RunConfig, LoadChecksDatasetPath) {
  const auto dir = std::filesystem::temp_directory_path() / "cpmr_test_config";
  std::filesystem::create_directories(dir);
  const auto cfg = dir / "run.cfg";
  std::ofstream(cfg) << "dataset.path = " << (dir / "nope.bin").string() << "\noutput.dir = " << dir.string() << "\n";
  EXPECT_THROW(load_run_config(cfg.string()), ConfigError);
  EXPECT_THROW(load_run_config((dir / "absent.cfg").string()), ConfigError);
  std::filesystem::remove_all(dir);
}
