#include <cmath>
#include <deque>

#include "doctest.h"
#include "support.hpp"

#include "fuseclip/errors.hpp"
#include "fuseclip/training.hpp"

using namespace fuseclip;

namespace {

struct Data {
    RunConfig cfg = test::quick_run_config();
    World world{cfg.world};
    Dataset main = generate_main_dataset(world, cfg.data.n_main, 1);
    Dataset guided = generate_guided_dataset(world, cfg.data.n_guided, 2);
};

std::vector<std::string> dump_all(const std::vector<Json>& recs) {
    std::vector<std::string> out;
    for (const auto& r : recs) out.push_back(r.dump());
    return out;
}

}  // namespace

TEST_CASE("guided substitution frequency stays within 4 sigma of lambda") {
    for (double lambda : {0.0, 0.3, 1.0}) {
        Rng rng(derive_seed(77, static_cast<std::uint64_t>(lambda * 10)));
        std::size_t guided = 0, slots = 0;
        for (int i = 0; i < 100; ++i) {
            const auto plan = draw_batch_plan(rng, 100, lambda, 50, 50);
            guided += plan.guided_count();
            slots += plan.guided.size();
            for (std::size_t k = 0; k < plan.index.size(); ++k) CHECK(plan.index[k] < 50);
        }
        const double p = static_cast<double>(guided) / static_cast<double>(slots);
        const double sigma = std::sqrt(lambda * (1.0 - lambda) / static_cast<double>(slots));
        INFO("lambda " << lambda << " observed " << p);
        CHECK(std::abs(p - lambda) <= 4.0 * sigma + 1e-12);
    }
    Rng rng(5);
    CHECK_THROWS_AS(draw_batch_plan(rng, 4, 1.2, 5, 5), ConfigError);
}

TEST_CASE("lambda = 0 never draws a guided row") {
    Rng rng(3);
    std::size_t guided = 0;
    for (int i = 0; i < 10000; ++i) guided += draw_batch_plan(rng, 64, 0.0, 100, 100).guided_count();
    CHECK(guided == 0);
    Data d;
    d.cfg.pretrain.loss.guided_probability = 0.0;
    Pretrainer p(d.cfg, d.main, nullptr);
    for (int i = 0; i < 5; ++i) CHECK(p.step()["guided"] == 0);
    CHECK(p.guided_drawn() == 0);
    CHECK(p.slots_drawn() == 5 * d.cfg.pretrain.batch);
}

TEST_CASE("lambda = 1 leaves the identity term at zero") {
    Data d;
    d.cfg.pretrain.loss.guided_probability = 1.0;
    Pretrainer p(d.cfg, d.main, &d.guided);
    for (int i = 0; i < 5; ++i) {
        const auto r = p.step();
        CHECK(r["id"].get<double>() == 0.0);
        CHECK(r["id_rows"] == 0);
    }
}

TEST_CASE("pretraining only updates the fusion module and heads") {
    Data d;
    Pretrainer p(d.cfg, d.main, &d.guided);
    for (const auto& t : p.trainable()) CHECK(t.name.rfind("encoder.", 0) == 0);
    const auto frozen_before = p.frozen_hash();
    const auto enc_before = p.encoder().hash();
    p.run({}, {});
    CHECK(p.frozen_hash() == frozen_before);
    CHECK(p.encoder().hash() != enc_before);
}

TEST_CASE("learnable temperature adds a trainable log scale") {
    Data d;
    d.cfg.pretrain.loss.learnable_temperature = true;
    Pretrainer p(d.cfg, d.main, &d.guided);
    bool found = false;
    for (const auto& t : p.trainable()) found = found || t.name == "encoder.log_scale";
    CHECK(found);
    const auto r = p.step();
    CHECK(r.contains("temperature"));
}

TEST_CASE("pretraining is deterministic and resumes exactly") {
    Data d;
    std::vector<Json> full_recs;
    std::vector<Checkpoint> full_cks;
    Pretrainer a(d.cfg, d.main, &d.guided);
    a.run([&](const Json& r) { full_recs.push_back(r); }, [&](const Checkpoint& c) { full_cks.push_back(c); });
    REQUIRE(full_recs.size() == d.cfg.pretrain.steps / d.cfg.pretrain.log_every);
    REQUIRE(full_cks.size() == 2);

    Pretrainer again(d.cfg, d.main, &d.guided);
    std::vector<Json> again_recs;
    again.run([&](const Json& r) { again_recs.push_back(r); }, {});
    CHECK(dump_all(again_recs) == dump_all(full_recs));
    CHECK(encode_checkpoint(again.checkpoint()) == encode_checkpoint(full_cks.back()));

    auto interrupted = d.cfg;
    interrupted.pretrain.stop_after = 7;
    std::vector<Json> part;
    std::optional<Checkpoint> last;
    Pretrainer b(interrupted, d.main, &d.guided);
    b.run([&](const Json& r) { part.push_back(r); }, [&](const Checkpoint& c) { last = c; });
    REQUIRE(last);
    CHECK(last->step == 7);
    Pretrainer c(d.cfg, d.main, &d.guided);
    c.restore(decode_checkpoint(encode_checkpoint(*last)));
    c.run([&](const Json& r) { part.push_back(r); }, {});
    CHECK(dump_all(part) == dump_all(full_recs));
    CHECK(encode_checkpoint(c.checkpoint()) == encode_checkpoint(full_cks.back()));
}

TEST_CASE("a restored trainer reproduces the next step loss") {
    Data d;
    Pretrainer a(d.cfg, d.main, &d.guided);
    for (int i = 0; i < 4; ++i) a.step();
    const auto ck = a.checkpoint();
    const auto next = a.step();
    Pretrainer b(d.cfg, d.main, &d.guided);
    b.restore(ck);
    CHECK(b.step().dump() == next.dump());
}

TEST_CASE("restoring rejects checkpoints from another world or stage") {
    Data d;
    Pretrainer a(d.cfg, d.main, &d.guided);
    auto ck = a.checkpoint();
    ck.world_seed += 1;
    CHECK_THROWS_AS(Pretrainer(d.cfg, d.main, &d.guided).restore(ck), CompatibilityError);
    DiffusionTrainer diff(d.cfg, d.main, nullptr, nullptr);
    CHECK_THROWS_AS(Pretrainer(d.cfg, d.main, &d.guided).restore(diff.checkpoint()), CompatibilityError);
}

TEST_CASE("non-finite training aborts with diagnostics") {
    Data d;
    d.cfg.pretrain.lr = 1e300;
    d.cfg.pretrain.clip_norm = 1e300;
    Pretrainer p(d.cfg, d.main, &d.guided);
    CHECK_THROWS_AS(p.run({}, {}), NumericError);
    CHECK_FALSE(p.diagnostics().is_null());
    CHECK(p.diagnostics()["stage"] == "pretrain");
}

TEST_CASE("frozen-encoder diffusion keeps the encoder hash") {
    Data d;
    Pretrainer pre(d.cfg, d.main, &d.guided);
    pre.run({}, {});
    const auto pre_ck = pre.checkpoint();
    DiffusionTrainer diff(d.cfg, d.main, &d.guided, &pre_ck);
    const auto enc = diff.encoder().hash();
    CHECK(enc == pre.encoder().hash());
    const auto frozen = diff.frozen_hash();
    diff.run({}, {});
    CHECK(diff.encoder().hash() == enc);
    CHECK(diff.frozen_hash() == frozen);

    const auto model = load_model(diff.checkpoint());
    REQUIRE(model.denoiser);
    CHECK(model.encoder->hash() == enc);
    CHECK(content_hash(model.denoiser->parameters()) == content_hash(diff.denoiser().parameters()));
    const auto pre_model = load_model(pre_ck);
    CHECK_FALSE(pre_model.denoiser);
}

TEST_CASE("joint mode trains the fusion module but not the heads") {
    Data d;
    d.cfg.diffusion.encoder_trainable = true;
    DiffusionTrainer diff(d.cfg, d.main, nullptr, nullptr);
    ParamList heads_before;
    diff.encoder().heads().collect(heads_before, "h");
    const auto heads_hash = content_hash(heads_before);
    const auto enc = diff.encoder().hash();
    const auto frozen = diff.frozen_hash();
    // Zero-initialized output projections need a few steps before the reference path opens.
    diff.run({}, {});
    CHECK(diff.encoder().hash() != enc);
    CHECK(diff.frozen_hash() == frozen);
    ParamList heads_after;
    diff.encoder().heads().collect(heads_after, "h");
    CHECK(content_hash(heads_after) == heads_hash);
}

TEST_CASE("diffusion rejects an encoder checkpoint from another world") {
    Data d;
    Pretrainer pre(d.cfg, d.main, &d.guided);
    const auto ck = pre.checkpoint();
    auto other = d.cfg;
    other.world.seed += 1;
    World w(other.world);
    const auto main = generate_main_dataset(w, 50, 1);
    CHECK_THROWS_AS(DiffusionTrainer(other, main, nullptr, &ck), CompatibilityError);
}

TEST_CASE("diffusion resumes exactly") {
    Data d;
    std::vector<Json> full;
    DiffusionTrainer a(d.cfg, d.main, nullptr, nullptr);
    a.run([&](const Json& r) { full.push_back(r); }, {});
    auto interrupted = d.cfg;
    interrupted.diffusion.stop_after = 12;
    std::vector<Json> part;
    std::optional<Checkpoint> last;
    DiffusionTrainer b(interrupted, d.main, nullptr, nullptr);
    b.run([&](const Json& r) { part.push_back(r); }, [&](const Checkpoint& c) { last = c; });
    DiffusionTrainer c(d.cfg, d.main, nullptr, nullptr);
    c.restore(*last);
    c.run([&](const Json& r) { part.push_back(r); }, {});
    CHECK(dump_all(part) == dump_all(full));
    CHECK(encode_checkpoint(c.checkpoint()) == encode_checkpoint(a.checkpoint()));
}

TEST_CASE("the first diffusion loss with a zero output head is about one") {
    Data d;
    d.cfg.diffusion.batch = 64;
    DiffusionTrainer diff(d.cfg, d.main, nullptr, nullptr);
    // 64 x 16 unit-variance draws: sd of the mean ~ 0.044
    CHECK(std::abs(diff.step()["loss"].get<double>() - 1.0) < 0.15);
}

TEST_CASE("diffusion training on a two-identity world halves the loss") {
    RunConfig cfg;
    cfg.world.n_identities = 2;
    cfg.world.vocab_sizes = {2, 2};
    cfg.world.main_slot0_values = 2;
    cfg.diffusion.steps = 2000;
    World w(cfg.world);
    const auto main = generate_main_dataset(w, 500, 3);
    DiffusionTrainer diff(cfg, main, nullptr, nullptr);
    std::vector<double> losses;
    for (std::size_t i = 0; i < cfg.diffusion.steps; ++i) losses.push_back(diff.step()["loss"].get<double>());
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 10; ++i) first += losses[i] / 10.0;
    for (std::size_t i = losses.size() - 100; i < losses.size(); ++i) last += losses[i] / 100.0;
    INFO("first " << first << " last " << last);
    CHECK(last <= 0.5 * first);
}

TEST_CASE("pretraining loss trends down under the default config") {
    RunConfig cfg;
    cfg.pretrain.steps = 2000;
    World w(cfg.world);
    const auto main = generate_main_dataset(w, cfg.data.n_main, 5);
    const auto guided = generate_guided_dataset(w, cfg.data.n_guided, 6);
    Pretrainer p(cfg, main, &guided);
    std::deque<double> window;
    double sum = 0.0, at100 = 0.0, at2000 = 0.0;
    for (std::size_t s = 1; s <= cfg.pretrain.steps; ++s) {
        const double l = p.step()["loss"].get<double>();
        window.push_back(l);
        sum += l;
        if (window.size() > 100) {
            sum -= window.front();
            window.pop_front();
        }
        if (s == 100) at100 = sum / 100.0;
        if (s == 2000) at2000 = sum / 100.0;
    }
    INFO("moving average at 100: " << at100 << ", at 2000: " << at2000);
    CHECK(at2000 < at100);
}
