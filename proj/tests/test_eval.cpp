#include <cmath>

#include "doctest.h"
#include "support.hpp"

#include "fuseclip/errors.hpp"
#include "fuseclip/eval.hpp"

using namespace fuseclip;

namespace {

Eigen::MatrixXd gaussian_rows(std::size_t n, std::size_t d, double shift, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal() + (j == 0 ? shift : 0.0);
    return m;
}

// Direct O(n^2) silhouette with cosine distance.
double silhouette_oracle(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
    const auto n = static_cast<std::size_t>(x.rows());
    auto dist = [&](std::size_t a, std::size_t b) {
        return 1.0 - x.row(static_cast<Eigen::Index>(a)).dot(x.row(static_cast<Eigen::Index>(b))) /
                         (x.row(static_cast<Eigen::Index>(a)).norm() * x.row(static_cast<Eigen::Index>(b)).norm());
    };
    int max_label = 0;
    for (int l : labels) max_label = std::max(max_label, l);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> sum(static_cast<std::size_t>(max_label + 1), 0.0);
        std::vector<int> cnt(sum.size(), 0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            sum[static_cast<std::size_t>(labels[j])] += dist(i, j);
            ++cnt[static_cast<std::size_t>(labels[j])];
        }
        const auto own = static_cast<std::size_t>(labels[i]);
        const double a = sum[own] / cnt[own];
        double b = 1e300;
        for (std::size_t l = 0; l < sum.size(); ++l)
            if (l != own && cnt[l] > 0) b = std::min(b, sum[l] / cnt[l]);
        total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

struct Trained {
    RunConfig cfg = test::quick_run_config();
    World world{cfg.world};
    Dataset main = generate_main_dataset(world, cfg.data.n_main, 1);
    Checkpoint pre_ck, diff_ck;

    Trained() {
        cfg.pretrain.loss.guided_probability = 0.0;
        Pretrainer pre(cfg, main, nullptr);
        pre.run({}, {});
        pre_ck = pre.checkpoint();
        DiffusionTrainer diff(cfg, main, nullptr, &pre_ck);
        diff.run({}, {});
        diff_ck = diff.checkpoint();
    }
};

}  // namespace

TEST_CASE("silhouette matches a direct computation and its extremes") {
    const auto x = gaussian_rows(30, 5, 0.0, 4);
    std::vector<int> labels;
    for (int i = 0; i < 30; ++i) labels.push_back(i % 3);
    CHECK(silhouette_score(x, labels) == doctest::Approx(silhouette_oracle(x, labels)).epsilon(1e-12));
    const auto per = silhouette_samples(x, labels);
    CHECK(per.size() == 30);

    // tight clusters on orthogonal axes
    Eigen::MatrixXd tight = Eigen::MatrixXd::Zero(9, 3);
    std::vector<int> tl;
    Rng rng(2);
    for (int i = 0; i < 9; ++i) {
        tight(i, i / 3) = 1.0;
        for (int j = 0; j < 3; ++j) tight(i, j) += 1e-3 * rng.normal();
        tl.push_back(i / 3);
    }
    CHECK(silhouette_score(tight, tl) > 0.99);
    CHECK(knn_recall_at_1(tight, tl) == 1.0);
    const double s = silhouette_score(x, labels);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);

    std::vector<int> singleton = tl;
    singleton[0] = 7;
    CHECK_THROWS_AS(silhouette_score(tight, singleton), ConfigError);
}

TEST_CASE("identity metrics reject one reference per identity") {
    const auto cfg = test::quick_run_config();
    World w(cfg.world);
    FaceClipEncoder enc(build_frozen_encoders(w, cfg.encoder), 3);
    CHECK_THROWS_AS(identity_cluster_metrics(enc, w, 4, 1, 1), ConfigError);
}

TEST_CASE("pca_2d keeps the leading axes with fixed signs") {
    Rng rng(8);
    Eigen::MatrixXd x(200, 4);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        x(i, 0) = 5.0 * rng.normal();
        x(i, 1) = 2.0 * rng.normal();
        x(i, 2) = 0.1 * rng.normal();
        x(i, 3) = 0.1 * rng.normal();
    }
    const auto p = pca_2d(x);
    REQUIRE(p.rows() == 200);
    REQUIRE(p.cols() == 2);
    const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
    // projection onto the first axis is (up to sign) the first coordinate
    const double corr0 = p.col(0).dot(c.col(0)) / (p.col(0).norm() * c.col(0).norm());
    const double corr1 = p.col(1).dot(c.col(1)) / (p.col(1).norm() * c.col(1).norm());
    CHECK(std::abs(corr0) > 0.99);
    CHECK(std::abs(corr1) > 0.99);
    // loadings are fixed by the covariance, so negated data projects to negated coordinates
    CHECK(pca_2d(-x).isApprox(-p, 1e-9));
}

TEST_CASE("MMD is near zero for one distribution and grows with a shift") {
    const auto a = gaussian_rows(100, 4, 0.0, 1);
    const auto b = gaussian_rows(100, 4, 0.0, 2);
    const auto c = gaussian_rows(100, 4, 1.5, 3);
    const double same = mmd2_unbiased(a, b);
    const double shifted = mmd2_unbiased(a, c);
    INFO("same " << same << " shifted " << shifted);
    CHECK(std::abs(same) < 0.02);
    CHECK(shifted > 0.1);

    // the shifted value sits far outside the permutation distribution of splits
    Eigen::MatrixXd pooled(200, 4);
    pooled << a, c;
    Rng rng(5);
    int exceed = 0;
    const double bw = median_pairwise_distance(pooled);
    for (int p = 0; p < 50; ++p) {
        std::vector<Eigen::Index> idx(200);
        for (Eigen::Index i = 0; i < 200; ++i) idx[static_cast<std::size_t>(i)] = i;
        for (std::size_t i = 199; i > 0; --i) std::swap(idx[i], idx[rng.uniform_index(i + 1)]);
        Eigen::MatrixXd pa(100, 4), pb(100, 4);
        for (Eigen::Index i = 0; i < 100; ++i) {
            pa.row(i) = pooled.row(idx[static_cast<std::size_t>(i)]);
            pb.row(i) = pooled.row(idx[static_cast<std::size_t>(i + 100)]);
        }
        if (mmd2_unbiased(pa, pb, bw) >= mmd2_unbiased(a, c, bw)) ++exceed;
    }
    CHECK(exceed == 0);
    CHECK_THROWS_AS(mmd2_unbiased(gaussian_rows(9, 4, 0, 1), b), ContractError);
}

TEST_CASE("paired bootstrap brackets the mean difference") {
    std::vector<double> a, b;
    Rng rng(11);
    for (int i = 0; i < 400; ++i) {
        const double base = rng.normal();
        b.push_back(base);
        a.push_back(base + 0.2 + 0.1 * rng.normal());
    }
    const auto ci = paired_bootstrap(a, b, 1000, 3);
    CHECK(ci.mean == doctest::Approx(0.2).epsilon(0.05));
    CHECK(ci.lower > 0.18);
    CHECK(ci.upper < 0.22);
    CHECK(ci.lower < ci.mean);
    CHECK(ci.mean < ci.upper);
    const auto again = paired_bootstrap(a, b, 1000, 3);
    CHECK(again.lower == ci.lower);
    CHECK(again.upper == ci.upper);
    // no difference at all: the interval collapses to zero
    const auto zero = paired_bootstrap(b, b, 200, 1);
    CHECK(zero.lower == 0.0);
    CHECK(zero.upper == 0.0);
}

TEST_CASE("cosine refuses zero vectors") {
    const std::vector<double> u{1.0, 2.0}, z{0.0, 0.0}, v{2.0, 4.0};
    CHECK(cosine(u, v) == doctest::Approx(1.0));
    CHECK_THROWS_AS(cosine(u, z), ContractError);
}

TEST_CASE("face similarity ranks the true identity first") {
    const auto cfg = test::quick_run_config();
    World w(cfg.world);
    const auto frozen = build_frozen_encoders(w, cfg.encoder);
    const auto attr = w.attribute({1, 0});
    int correct = 0;
    for (std::size_t i = 0; i < w.n_identities(); ++i) {
        const auto x0 = render_image(w, w.identity(i), attr, 40 + i, 0.0);
        double best = -2.0;
        std::size_t arg = 0;
        for (std::size_t j = 0; j < w.n_identities(); ++j) {
            const double s = face_similarity(w, *frozen, x0, render_reference(w, w.identity(j), 90 + j));
            if (s > best) {
                best = s;
                arg = j;
            }
        }
        correct += arg == i ? 1 : 0;
    }
    CHECK(correct == static_cast<int>(w.n_identities()));
}

TEST_CASE("an untrained encoder sits near chance at zero-shot classification") {
    RunConfig cfg;
    World w(cfg.world);
    FaceClipEncoder enc(build_frozen_encoders(w, cfg.encoder), 7);
    const auto z = zero_shot_accuracy(enc, w, 2000, 1);
    const double chance = 1.0 / static_cast<double>(z.n_classes);
    INFO("top1 " << z.top1 << " classes " << z.n_classes);
    CHECK(z.n_eval == 2000);
    CHECK(std::abs(z.top1 - chance) < 0.05);
    CHECK(z.top5 >= z.top1);
    CHECK(z.per_class_top1.size() == z.n_classes);
}

TEST_CASE("run_eval computes only the requested families and is reproducible") {
    Trained t;
    const auto model = load_model(t.diff_ck);
    auto ec = t.cfg.eval;
    ec.metrics = {"zero-shot"};
    const auto rep = run_eval(model, ec);
    CHECK(rep.metrics.size() == 2);
    CHECK(rep.metrics.contains("zero_shot_top1"));
    CHECK_FALSE(rep.has_identity);
    CHECK(rep.to_json().dump() == run_eval(model, ec).to_json().dump());

    ec.metrics.clear();
    const auto all = run_eval(model, ec);
    for (const char* key : {"zero_shot_top1", "silhouette", "recall_at_1", "face_sim", "face_sim_random_pair",
                            "text_align", "mmd"}) {
        REQUIRE(all.metrics.contains(key));
        CHECK(std::isfinite(all.metrics[key].get<double>()));
    }
    CHECK(all.has_identity);
    CHECK(all.identity.projection.rows() == static_cast<Eigen::Index>(ec.n_ids * ec.n_per_id));
    CHECK_FALSE(projection_csv(all.identity).empty());
    CHECK(all.to_csv().find("silhouette,") != std::string::npos);

    ec.metrics = {"generation"};
    CHECK_THROWS_AS(run_eval(load_model(t.pre_ck), ec), ConfigError);
    ec.metrics = {"bogus"};
    CHECK_THROWS_AS(run_eval(model, ec), ConfigError);
}

TEST_CASE("ablation checks follow the row values") {
    auto row = [](LossVariant v, double face, double base, double text) {
        AblationRow r;
        r.variant = v;
        r.face_sim = face;
        r.face_sim_random_pair = base;
        r.text_align = text;
        for (int i = 0; i < 50; ++i) r.text_aligns.push_back(text + 0.01 * ((i * 7) % 5 - 2));
        return r;
    };
    SUBCASE("expected ordering passes") {
        const auto res = judge_ablation(
            {row(LossVariant::L1, 0.02, 0.0, 0.5), row(LossVariant::L2, 0.6, 0.0, 0.5), row(LossVariant::L3, 0.6, 0.0, 0.6)},
            500, 1);
        REQUIRE(res.checks.size() == 4);
        for (const auto& c : res.checks) CHECK(c.status == "PASS");
        CHECK(res.verdict);
        CHECK(res.to_json()["verdict"] == "PASS");
    }
    SUBCASE("a weak identity term fails") {
        const auto res = judge_ablation(
            {row(LossVariant::L1, 0.02, 0.0, 0.5), row(LossVariant::L2, 0.2, 0.0, 0.5), row(LossVariant::L3, 0.6, 0.0, 0.5)},
            500, 1);
        CHECK(res.checks[1].status == "FAIL");
        CHECK(res.checks[2].status == "PASS");
        CHECK(res.checks[3].status == "FAIL");
        CHECK_FALSE(res.verdict);
    }
    SUBCASE("a failed row skips the checks that need it and fails the verdict") {
        auto bad = row(LossVariant::L2, 0, 0, 0);
        bad.failed = true;
        bad.error = "boom";
        const auto res = judge_ablation({row(LossVariant::L1, 0.02, 0.0, 0.5), bad, row(LossVariant::L3, 0.6, 0.0, 0.6)},
                                        500, 1);
        CHECK(res.checks[0].status == "PASS");
        CHECK(res.checks[1].status == "SKIPPED");
        CHECK(res.checks[2].status == "PASS");
        CHECK(res.checks[3].status == "SKIPPED");
        CHECK_FALSE(res.verdict);
        CHECK(res.to_json()["rows"][1]["status"] == "FAILED");
        CHECK(res.to_table().find("L2") != std::string::npos);
    }
}

TEST_CASE("worker count comes from the environment") {
    ::unsetenv("FUSECLIP_THREADS");
    CHECK(worker_threads() == 1);
    ::setenv("FUSECLIP_THREADS", "3", 1);
    CHECK(worker_threads() == 3);
    ::setenv("FUSECLIP_THREADS", "zero", 1);
    CHECK_THROWS_AS(worker_threads(), ConfigError);
    ::unsetenv("FUSECLIP_THREADS");
}
