#include "doctest.h"
#include "rwl/experiment.hpp"

using namespace rwl;
using namespace rwl::experiment;

TEST_CASE("defaults") {
  const ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.utterances == 2000);
  CHECK(c.pretrain.steps == 2000);
  CHECK(c.rewire.at(rewire::PairStrategy::kTwin).updates == 400);
  CHECK(c.rewire.at(rewire::PairStrategy::kNeutral).updates == 2800);
  CHECK(c.rewire.at(rewire::PairStrategy::kMixed).updates == 1200);
  CHECK(c.probe.budget(probes::TaskKind::kContentCls, 0.01) == 500);
  CHECK(c.probe.budget(probes::TaskKind::kContentCls, 0.05) == 1000);
  CHECK(c.probe.budget(probes::TaskKind::kIntentCls, 0.10) == 1000);
  CHECK(c.probe.budget(probes::TaskKind::kFrameLabeling, 1.0) == 2000);
  CHECK(fraction_label(0.1) == "10pct");
  CHECK_THROWS(fraction_label(0.2));
}

TEST_CASE("canonical text round-trips") {
  ExperimentConfig c;
  c.seed = 123;
  c.encoder.conv_strides = {5, 2, 4};
  c.pretrain.learning_rate = 0.1 + 0.2;
  c.rewire.at(rewire::PairStrategy::kMixed).pooling_level = 2;
  c.probe.budgets["5pct.intent_cls"] = 77;

  ExperimentConfig back;
  apply_ini(back, to_ini(c));
  CHECK(to_ini(back) == to_ini(c));
  CHECK(back.pretrain.learning_rate == c.pretrain.learning_rate);
  CHECK(back.encoder.conv_strides == c.encoder.conv_strides);
  CHECK(back.rewire.at(rewire::PairStrategy::kMixed).pooling_level == 2);
  CHECK_FALSE(back.rewire.at(rewire::PairStrategy::kTwin).pooling_level.has_value());
  CHECK(back.probe.budget(probes::TaskKind::kIntentCls, 0.05) == 77);
  CHECK(back.probe.budget(probes::TaskKind::kContentCls, 0.05) == 1000);
  CHECK(config_hash(back) == config_hash(c));
  c.seed = 124;
  CHECK(config_hash(back) != config_hash(c));
}

TEST_CASE("ini sections apply in order") {
  ExperimentConfig c;
  apply_ini(c,
            "# comment\n"
            "[rewire]\n"
            "temperature = 0.1  ; trailing comment\n"
            "[rewire.twin]\n"
            "temperature = 0.5\n"
            "\n"
            "[experiment]\n"
            "embedding_level = 2\n");
  CHECK(c.rewire.at(rewire::PairStrategy::kTwin).temperature == 0.5);
  CHECK(c.rewire.at(rewire::PairStrategy::kNeutral).temperature == 0.1);
  CHECK(c.rewire.at(rewire::PairStrategy::kMixed).temperature == 0.1);
  CHECK(c.diagnostic_level() == 2);
}

TEST_CASE("overrides") {
  ExperimentConfig c;
  apply_override(c, "pretrain.steps=50");
  apply_override(c, "rewire.neutral.updates = 9");
  apply_override(c, "rewire.batch_size=4");
  apply_override(c, "probe.budget_1pct.frame_labeling=3");
  CHECK(c.pretrain.steps == 50);
  CHECK(c.rewire.at(rewire::PairStrategy::kNeutral).updates == 9);
  CHECK(c.rewire.at(rewire::PairStrategy::kTwin).batch_size == 4);
  CHECK(c.probe.budget(probes::TaskKind::kFrameLabeling, 0.01) == 3);
  CHECK(c.probe.budget(probes::TaskKind::kContentCls, 0.01) == 500);

  CHECK_THROWS_AS(apply_override(c, "pretrain.steps"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(c, "nosuch.key=1"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(c, "pretrain.nosuch=1"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(c, "pretrain.steps=ten"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(c, "pretrain.learning_rate=inf"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(c, "probe.budget_3pct=4"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(c, "probe.budget_1pct.qbe=4"), std::invalid_argument);
}

TEST_CASE("ini errors name the line") {
  ExperimentConfig c;
  try {
    apply_ini(c, "[pretrain]\nsteps = 5\nbogus\n");
    FAIL("accepted");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK_THROWS_AS(apply_ini(c, "steps = 5\n"), std::invalid_argument);
  CHECK_THROWS_AS(apply_ini(c, "[nowhere]\n"), std::invalid_argument);
  CHECK_THROWS_AS(apply_ini(c, "[pretrain\n"), std::invalid_argument);
}

TEST_CASE("validate") {
  ExperimentConfig c;
  c.embedding_level = 9;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ExperimentConfig{};
  c.rewire.at(rewire::PairStrategy::kTwin).updates = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ExperimentConfig{};
  c.encoder.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("stage seeds derive from the master seed") {
  ExperimentConfig a, b;
  b.seed = a.seed + 1;
  CHECK(a.corpus_seed() != b.corpus_seed());
  CHECK(a.probe_seed() != b.probe_seed());
  CHECK(a.corpus_seed() != a.pretrain_seed());
  CHECK(a.probe_config(probes::TaskKind::kContentCls, 0.05).seed == a.probe_seed());
  CHECK(a.rewire_config(rewire::PairStrategy::kMixed).seed == a.rewire_seed());
  CHECK(a.pretrain_config().seed == a.pretrain_seed());
}
