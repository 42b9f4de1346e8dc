#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "rlaif/run_config.hpp"

using namespace rlaif;

namespace {

RunConfig loaded(const std::string& text) {
  RunConfig rc;
  std::istringstream in(text);
  rc.load(in, "test.config");
  return rc;
}

}  // namespace

TEST(RunConfig, DefaultsMatchModuleDefaults) {
  const RunConfig rc;
  EXPECT_EQ(dpo_config(rc).beta, DPOConfig{}.beta);
  EXPECT_EQ(dpo_config(rc).epochs, DPOConfig{}.epochs);
  EXPECT_EQ(dpo_config(rc).optimizer.learning_rate, DPOConfig{}.optimizer.learning_rate);
  // The library default is plain DPO; runs add the NLL term.
  EXPECT_EQ(DPOConfig{}.nll_weight, 0.0);
  EXPECT_EQ(dpo_config(rc).nll_weight, 1.0);
  EXPECT_EQ(ppo_config(rc).kl_coef, PPOConfig{}.kl_coef);
  EXPECT_EQ(ppo_config(rc).rollouts_per_update, PPOConfig{}.rollouts_per_update);
  EXPECT_EQ(rm_config(rc).optimizer.warmup_steps, RMTrainConfig{}.optimizer.warmup_steps);
  EXPECT_EQ(rm_config(rc).model, RMTrainConfig{}.model);
  EXPECT_EQ(lm_config(rc).model, LMTrainConfig{}.model);
  EXPECT_EQ(synthetic_config(rc).sessions, SyntheticConfig{}.sessions);
  EXPECT_EQ(synthetic_config(rc).seed, SyntheticConfig{}.seed);
  EXPECT_EQ(session_options(rc).items_per_metric, kDefaultItemsPerMetric);
  EXPECT_EQ(session_options(rc).instructions, Instructions{});
  EXPECT_NO_THROW(validate_config(rc));
}

TEST(RunConfig, ParsesCommentsAndWhitespace) {
  const auto rc = loaded("# header\n\n  dpo.beta =0.25  \nanno.ranking_instructions = Rank them = carefully\n");
  EXPECT_EQ(dpo_config(rc).beta, 0.25);
  EXPECT_EQ(rc.str("anno.ranking_instructions"), "Rank them = carefully");
}

TEST(RunConfig, RejectsUnknownDuplicateAndMalformed) {
  EXPECT_THROW(loaded("dpo.betta = 1\n"), FormatError);
  EXPECT_THROW(loaded("dpo.beta = 1\ndpo.beta = 2\n"), FormatError);
  EXPECT_THROW(loaded("just words\n"), FormatError);
  RunConfig rc;
  EXPECT_THROW(rc.set("nope", "1"), ValidationError);
  EXPECT_THROW(rc.set_assignment("dpo.beta"), ValidationError);
  rc.set("dpo.epochs", "12x");
  EXPECT_THROW(validate_config(rc), ValidationError);
  rc.set("dpo.epochs", "-3");
  EXPECT_THROW(validate_config(rc), ValidationError);
  rc.set("dpo.epochs", "3");
  rc.set("ppo.clip_epsilon", "1.5");
  EXPECT_THROW(validate_config(rc), ValidationError);
  rc.set("ppo.clip_epsilon", "0.2");
  rc.set("split.ratios", "8:1");
  EXPECT_THROW(validate_config(rc), ValidationError);
  rc.set("split.ratios", "8:1:1");
  rc.set("anno.port", "70000");
  EXPECT_THROW(validate_config(rc), ValidationError);
  rc.set("anno.port", "0");
  EXPECT_NO_THROW(validate_config(rc));
}

TEST(RunConfig, SeedsInheritTheGlobalSeed) {
  auto rc = loaded("run.seed = 42\ndpo.seed = 5\n");
  EXPECT_EQ(rc.seed("dpo"), 5u);
  EXPECT_EQ(rc.seed("ppo"), 42u);
  EXPECT_EQ(ppo_config(rc).seed, 42u);
  EXPECT_EQ(synthetic_config(rc).seed, 42u);
}

TEST(RunConfig, SnapshotReloadsToTheSameConfig) {
  auto rc = loaded("run.seed = 9\nmodel.width = 32\n");
  const auto snap = rc.snapshot("rlaif test");
  EXPECT_EQ(snap.rfind("# rlaif test\n", 0), 0u);
  EXPECT_NE(snap.find("lm.seed = 9\n"), std::string::npos);
  EXPECT_EQ(snap.find(kInheritSeed), std::string::npos);
  const auto again = loaded(snap);
  EXPECT_EQ(again.snapshot("rlaif test"), snap);
  EXPECT_EQ(lm_config(again).model.model_width, 32u);
  // Every schema key appears exactly once.
  for (const auto& k : config_schema()) EXPECT_NE(snap.find("\n" + k.key + " = "), std::string::npos) << k.key;
}

TEST(RunConfig, OutputDirectoryFromEnvironment) {
  ::setenv(kOutEnv, "/tmp/somewhere", 1);
  EXPECT_EQ(RunConfig{}.str("run.out"), "/tmp/somewhere");
  ::unsetenv(kOutEnv);
  EXPECT_EQ(RunConfig{}.str("run.out"), "runs");
}

TEST(RunConfig, DescriptionListsEveryKey) {
  const auto text = describe_config();
  for (const auto& k : config_schema()) EXPECT_NE(text.find(k.key + " = "), std::string::npos) << k.key;
  EXPECT_NO_THROW(loaded(text));
}
