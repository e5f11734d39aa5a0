#include "doctest.h"
#include "support.hpp"

#include "fuseclip/config.hpp"
#include "fuseclip/errors.hpp"

using namespace fuseclip;

TEST_CASE("the default tree round trips and validates") {
    const RunConfig d;
    CHECK_NOTHROW(d.validate());
    const Json j = to_json(d);
    CHECK(to_json(run_config_from_json(j)) == j);
    for (const char* section : {"world", "encoder", "data", "pretrain", "diffusion", "eval"}) CHECK(j.contains(section));
    // key order is stable, so dumps are byte-stable
    CHECK(to_json(run_config_from_json(j)).dump() == j.dump());
}

TEST_CASE("missing keys keep their defaults") {
    const auto cfg = run_config_from_json(Json::parse(R"({"pretrain": {"steps": 7}})"));
    CHECK(cfg.pretrain.steps == 7);
    CHECK(cfg.pretrain.batch == PretrainConfig{}.batch);
    CHECK(cfg.world == WorldConfig{});
}

TEST_CASE("unknown keys and sections are rejected") {
    CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"pretrain": {"stepz": 7}})")), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"training": {}})")), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"diffusion": {"denoiser": {"width": 3}}})")), ConfigError);
}

TEST_CASE("type errors are config errors") {
    CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"pretrain": {"steps": -1}})")), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"pretrain": {"lr": "fast"}})")), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"pretrain": {"loss_mask": "L9"}})")), ConfigError);
}

TEST_CASE("overrides parse JSON values and fall back to strings") {
    Json tree = to_json(RunConfig{});
    apply_override(tree, "pretrain.steps=12");
    apply_override(tree, "pretrain.loss_mask=L1");
    apply_override(tree, "world.vocab_sizes=[10,3]");
    apply_override(tree, "eval.metrics=[\"identity\"]");
    const auto cfg = run_config_from_json(tree);
    CHECK(cfg.pretrain.steps == 12);
    CHECK(cfg.pretrain.variant == LossVariant::L1);
    CHECK(cfg.pretrain.loss.mask == TermMask{true, false, false});
    CHECK(cfg.world.vocab_sizes == std::vector<std::size_t>{10, 3});
    CHECK(cfg.eval.metrics == std::vector<std::string>{"identity"});
    CHECK_THROWS_AS(apply_override(tree, "pretrain.steps"), ConfigError);
    CHECK_THROWS_AS(apply_override(tree, "=3"), ConfigError);
}

TEST_CASE("cross-field validation") {
    RunConfig c;
    SUBCASE("batch of one") {
        c.pretrain.batch = 1;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("guided mixing without guided data") {
        c.data.n_guided = 0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c.pretrain.loss.guided_probability = 0.0;
        CHECK_NOTHROW(c.validate());
    }
    SUBCASE("lambda outside [0, 1]") {
        c.pretrain.loss.guided_probability = -0.1;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("trainable encoder on top of a pretrained checkpoint needs force") {
        c.diffusion.encoder_checkpoint = "run/last.fck";
        c.diffusion.encoder_trainable = true;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c.diffusion.force_encoder_trainable = true;
        CHECK_NOTHROW(c.validate());
    }
    SUBCASE("heads must divide the width") {
        c.encoder.heads = 3;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("unknown metric") {
        c.eval.metrics = {"fid"};
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("one reference per identity leaves the silhouette undefined") {
        c.eval.n_per_id = 1;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    SUBCASE("invalid world") {
        c.world.d_face = 4;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
}
