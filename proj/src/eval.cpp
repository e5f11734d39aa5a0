#include "fuseclip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <future>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "fuseclip/errors.hpp"

namespace fuseclip {

namespace {

Eigen::MatrixXd normalized_rows(const Eigen::MatrixXd& x) {
    Eigen::MatrixXd out = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double n = x.row(i).norm();
        if (!(n > 0.0)) throw ContractError("cosine distance of a zero row");
        out.row(i) /= n;
    }
    return out;
}

Eigen::MatrixXd cosine_distances(const Eigen::MatrixXd& x) {
    auto u = normalized_rows(x);
    Eigen::MatrixXd d = Eigen::MatrixXd::Ones(x.rows(), x.rows()) - u * u.transpose();
    return d.cwiseMax(0.0);
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
    const auto rows = static_cast<Eigen::Index>(t.dim(0));
    const auto cols = static_cast<Eigen::Index>(t.numel() / t.dim(0));
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = t.at(static_cast<std::size_t>(i * cols + j));
    return m;
}

std::string fixed(double v, int digits = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::vector<std::size_t> random_slots(const WorldConfig& c, Rng& rng, std::size_t slot0_values) {
    std::vector<std::size_t> slots(c.n_slots());
    slots[0] = rng.uniform_index(slot0_values);
    for (std::size_t k = 1; k < slots.size(); ++k) slots[k] = rng.uniform_index(c.vocab_sizes[k]);
    return slots;
}

}  // namespace

// ---- statistics ----------------------------------------------------------

std::vector<double> silhouette_samples(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (labels.size() != n) throw DimensionError("silhouette: one label per row required");
    std::map<int, std::size_t> sizes;
    for (int l : labels) ++sizes[l];
    if (sizes.size() < 2) throw ConfigError("silhouette needs at least two clusters");
    for (auto& [l, s] : sizes)
        if (s < 2) throw ConfigError("silhouette is undefined for a cluster with a single member");
    const auto d = cosine_distances(x);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::map<int, double> sums;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) sums[labels[j]] += d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        const double a = sums[labels[i]] / static_cast<double>(sizes[labels[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (auto& [l, s] : sums)
            if (l != labels[i]) b = std::min(b, s / static_cast<double>(sizes[l]));
        const double m = std::max(a, b);
        out[i] = m > 0.0 ? (b - a) / m : 0.0;
    }
    return out;
}

double silhouette_score(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
    auto s = silhouette_samples(x, labels);
    return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

double knn_recall_at_1(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
    const auto n = x.rows();
    if (static_cast<std::size_t>(n) != labels.size()) throw DimensionError("knn: one label per row required");
    if (n < 2) throw ConfigError("knn recall needs at least two rows");
    const auto d = cosine_distances(x);
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index best = -1;
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i && (best < 0 || d(i, j) < d(i, best))) best = j;
        hits += labels[static_cast<std::size_t>(best)] == labels[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

Eigen::MatrixXd pca_2d(const Eigen::MatrixXd& x) {
    if (x.rows() < 2 || x.cols() < 2) throw ConfigError("pca_2d needs at least two rows and columns");
    Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centered.transpose() * centered);
    const auto k = eig.eigenvalues().size();
    Eigen::MatrixXd axes(x.cols(), 2);
    for (int c = 0; c < 2; ++c) {
        Eigen::VectorXd v = eig.eigenvectors().col(k - 1 - c);
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        axes.col(c) = v;
    }
    return centered * axes;
}

double median_pairwise_distance(const Eigen::MatrixXd& x) {
    std::vector<double> d;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = i + 1; j < x.rows(); ++j) d.push_back((x.row(i) - x.row(j)).norm());
    if (d.empty()) throw ContractError("median distance needs two rows");
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    if (d.size() % 2 == 1) return *mid;
    const double hi = *mid;
    const double lo = *std::max_element(d.begin(), mid);
    return 0.5 * (lo + hi);
}

double mmd2_unbiased(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth) {
    if (a.rows() < 10 || b.rows() < 10) throw ContractError("mmd needs at least 10 samples per set");
    if (a.cols() != b.cols()) throw DimensionError("mmd: feature widths differ");
    if (!(bandwidth > 0.0)) throw ContractError("mmd bandwidth must be positive");
    const double g = 1.0 / (2.0 * bandwidth * bandwidth);
    auto k = [&](const auto& u, const auto& v) { return std::exp(-g * (u - v).squaredNorm()); };
    const auto m = a.rows(), n = b.rows();
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            if (i != j) saa += k(a.row(i), a.row(j));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (i != j) sbb += k(b.row(i), b.row(j));
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < n; ++j) sab += k(a.row(i), b.row(j));
    const double dm = static_cast<double>(m), dn = static_cast<double>(n);
    return saa / (dm * (dm - 1.0)) + sbb / (dn * (dn - 1.0)) - 2.0 * sab / (dm * dn);
}

double mmd2_unbiased(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() < 10 || b.rows() < 10) throw ContractError("mmd needs at least 10 samples per set");
    Eigen::MatrixXd pooled(a.rows() + b.rows(), a.cols());
    pooled << a, b;
    const double h = median_pairwise_distance(pooled);
    return mmd2_unbiased(a, b, h > 0.0 ? h : 1.0);
}

BootstrapInterval paired_bootstrap(std::span<const double> a, std::span<const double> b, std::size_t n_resamples,
                                   std::uint64_t seed, double level) {
    if (a.size() != b.size() || a.empty()) throw DimensionError("paired bootstrap needs equal, non-empty samples");
    if (n_resamples < 10) throw ConfigError("paired bootstrap needs at least 10 resamples");
    const std::size_t n = a.size();
    std::vector<double> diff(n);
    for (std::size_t i = 0; i < n; ++i) diff[i] = a[i] - b[i];
    Rng rng(seed);
    std::vector<double> means(n_resamples);
    for (auto& m : means) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += diff[rng.uniform_index(n)];
        m = s / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    const double tail = (1.0 - level) / 2.0;
    auto q = [&](double p) {
        const auto idx = static_cast<std::size_t>(std::floor(p * static_cast<double>(n_resamples - 1)));
        return means[std::min(idx, n_resamples - 1)];
    };
    BootstrapInterval out;
    out.mean = std::accumulate(diff.begin(), diff.end(), 0.0) / static_cast<double>(n);
    out.lower = q(tail);
    out.upper = q(1.0 - tail);
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (!(aa > 0.0) || !(bb > 0.0)) throw ContractError("cosine of a zero vector");
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

// ---- experiments ---------------------------------------------------------

ZeroShotResult zero_shot_accuracy(const FaceClipEncoder& encoder, const World& world, std::size_t n_eval,
                                  std::uint64_t seed) {
    const auto& c = world.config();
    const std::size_t n_classes = c.vocab_sizes[0];
    if (n_classes < 5) throw ConfigError("zero-shot top-5 needs at least 5 classes");
    if (n_eval == 0) throw ConfigError("zero-shot evaluation needs at least one image");
    const auto& frozen = encoder.frozen();

    std::vector<std::vector<TokenId>> prompts;
    for (std::size_t k = 0; k < n_classes; ++k) {
        std::vector<std::size_t> slots(c.n_slots(), 0);
        slots[0] = k;
        prompts.push_back(caption_of(world, world.attribute(slots)));
    }
    auto tokens = TokenBatch::from_captions(prompts);
    auto e = encoder.encode(tokens, Tensor::zeros({n_classes, c.d_face}));
    Eigen::MatrixXd classifier = normalized_rows(to_matrix(encoder.project_to_text(e, tokens.mask())));

    std::vector<std::vector<double>> images;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < n_eval; ++i) {
        Rng rng(derive_seed(seed, i));
        auto slots = random_slots(c, rng, n_classes);
        labels.push_back(slots[0]);
        auto id = random_anonymous_identity(world, rng.next_u64());
        images.push_back(render_image(world, id, world.attribute(slots), rng.next_u64()));
    }
    Eigen::MatrixXd feats = normalized_rows(to_matrix(encode_image(frozen, rows_to_tensor(images))));
    Eigen::MatrixXd scores = feats * classifier.transpose();

    ZeroShotResult r;
    r.n_classes = n_classes;
    r.n_eval = n_eval;
    std::vector<std::size_t> class_hits(n_classes, 0), class_count(n_classes, 0);
    std::size_t top1 = 0, top5 = 0;
    for (std::size_t i = 0; i < n_eval; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const double truth = scores(row, static_cast<Eigen::Index>(labels[i]));
        std::size_t above = 0;
        for (std::size_t k = 0; k < n_classes; ++k)
            if (k != labels[i] && scores(row, static_cast<Eigen::Index>(k)) >= truth) ++above;
        ++class_count[labels[i]];
        if (above == 0) {
            ++top1;
            ++class_hits[labels[i]];
        }
        if (above < 5) ++top5;
    }
    r.top1 = static_cast<double>(top1) / static_cast<double>(n_eval);
    r.top5 = static_cast<double>(top5) / static_cast<double>(n_eval);
    for (std::size_t k = 0; k < n_classes; ++k)
        r.per_class_top1.push_back(class_count[k] ? static_cast<double>(class_hits[k]) / static_cast<double>(class_count[k])
                                                  : 0.0);
    return r;
}

IdentityClusterResult identity_cluster_metrics(const FaceClipEncoder& encoder, const World& world, std::size_t n_ids,
                                               std::size_t n_per_id, std::uint64_t seed) {
    if (n_ids < 2) throw ConfigError("identity metrics need at least two identities");
    if (n_per_id < 2) throw ConfigError("silhouette is undefined with one reference per identity");
    if (n_ids > world.n_identities())
        throw ConfigError("requested " + std::to_string(n_ids) + " identities, world has " +
                          std::to_string(world.n_identities()));
    const auto& c = world.config();
    const auto caption = caption_of(world, world.attribute(std::vector<std::size_t>(c.n_slots(), 0)));
    IdentityClusterResult r;
    std::vector<std::vector<double>> refs;
    for (std::size_t i = 0; i < n_ids; ++i)
        for (std::size_t j = 0; j < n_per_id; ++j) {
            refs.push_back(render_reference(world, world.identity(i), derive_seed(seed, i * n_per_id + j)));
            r.labels.push_back(static_cast<int>(i));
        }
    auto tokens = TokenBatch::from_captions(std::vector<std::vector<TokenId>>(refs.size(), caption));
    auto e = encoder.encode(tokens, rows_to_tensor(refs));
    r.embeddings = to_matrix(encoder.pool(e, tokens.mask()));
    auto samples = silhouette_samples(r.embeddings, r.labels);
    r.silhouette = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
    r.recall_at_1 = knn_recall_at_1(r.embeddings, r.labels);
    r.projection = pca_2d(r.embeddings);
    r.per_identity_silhouette.assign(n_ids, 0.0);
    for (std::size_t k = 0; k < samples.size(); ++k)
        r.per_identity_silhouette[static_cast<std::size_t>(r.labels[k])] += samples[k] / static_cast<double>(n_per_id);
    return r;
}

double face_similarity(const World& world, const FrozenEncoders& frozen, std::span<const double> x0,
                       std::span<const double> reference) {
    if (x0.size() != world.config().d_x || reference.size() != world.config().d_face)
        throw DimensionError("face_similarity: image or reference has the wrong width");
    auto [id_hat, attr_hat] = world.recover_factors(std::vector<double>(x0.begin(), x0.end()));
    Eigen::VectorXd view = world.face_matrix() * id_hat;
    std::vector<double> rows(static_cast<std::size_t>(view.size()));
    for (Eigen::Index i = 0; i < view.size(); ++i) rows[static_cast<std::size_t>(i)] = view(i);
    rows.insert(rows.end(), reference.begin(), reference.end());
    auto cls = encode_face(frozen, Tensor({2, world.config().d_face}, std::move(rows))).cls;
    const std::size_t d = cls.dim(1);
    return cosine(cls.data().subspan(0, d), cls.data().subspan(d, d));
}

double text_alignment_score(const FrozenEncoders& frozen, std::span<const double> x0,
                            const std::vector<TokenId>& caption) {
    auto img = encode_image(frozen, Tensor({1, x0.size()}, std::vector<double>(x0.begin(), x0.end())));
    auto text = encode_text(frozen, TokenBatch::from_captions({caption}));
    return cosine(img.data(), text.cls.data());
}

double mmd_score(const FrozenEncoders& frozen, const std::vector<std::vector<double>>& a,
                 const std::vector<std::vector<double>>& b) {
    if (a.size() < 10 || b.size() < 10) throw ContractError("mmd needs at least 10 images per set");
    return mmd2_unbiased(to_matrix(encode_image(frozen, rows_to_tensor(a))),
                         to_matrix(encode_image(frozen, rows_to_tensor(b))));
}

GenerationResult evaluate_generation(const World& world, const FaceClipEncoder& encoder, const Denoiser& denoiser,
                                     const NoiseSchedule& schedule, std::size_t n, std::uint64_t seed) {
    if (n < 10) throw ConfigError("generation metrics need at least 10 samples");
    const auto& c = world.config();
    const auto& frozen = encoder.frozen();
    std::vector<int> ids(n);
    std::vector<std::vector<double>> refs(n), real(n);
    std::vector<std::vector<TokenId>> captions(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, i));
        ids[i] = static_cast<int>(rng.uniform_index(world.n_identities()));
        const auto& id = world.identity(static_cast<std::size_t>(ids[i]));
        auto attr = world.attribute(random_slots(c, rng, c.main_slot0_values));
        captions[i] = caption_of(world, attr);
        refs[i] = render_reference(world, id, rng.next_u64());
        real[i] = render_image(world, id, attr, rng.next_u64());
    }

    GenerationResult r;
    constexpr std::size_t kBatch = 50;
    Rng sampler(derive_seed(seed, 0xD1FF));
    for (std::size_t start = 0; start < n; start += kBatch) {
        const std::size_t end = std::min(n, start + kBatch);
        std::vector<std::vector<TokenId>> cap(captions.begin() + start, captions.begin() + end);
        std::vector<std::vector<double>> ref(refs.begin() + start, refs.begin() + end);
        auto tokens = TokenBatch::from_captions(cap);
        Condition cond{encoder.encode(tokens, rows_to_tensor(ref)).detach(), tokens.mask()};
        auto x = ddpm_sample(denoiser.predictor(), cond, schedule, sampler, c.d_x);
        for (std::size_t i = 0; i < end - start; ++i)
            r.generated.emplace_back(x.data().begin() + i * c.d_x, x.data().begin() + (i + 1) * c.d_x);
    }

    for (std::size_t i = 0; i < n; ++i) {
        r.face_sims.push_back(face_similarity(world, frozen, r.generated[i], refs[i]));
        std::size_t j = (i + 1) % n;
        while (ids[j] == ids[i] && j != i) j = (j + 1) % n;
        r.random_pair_sims.push_back(face_similarity(world, frozen, r.generated[i], refs[j]));
        r.text_aligns.push_back(text_alignment_score(frozen, r.generated[i], captions[i]));
    }
    auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    r.face_sim = mean(r.face_sims);
    r.face_sim_random_pair = mean(r.random_pair_sims);
    r.text_align = mean(r.text_aligns);
    r.mmd = mmd_score(frozen, r.generated, real);
    return r;
}

// ---- reports -------------------------------------------------------------

Json EvalReport::to_json() const {
    return Json{{"seed", seed}, {"metrics", metrics}, {"breakdown", breakdown}, {"config", config}};
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "metric,value\n";
    for (auto it = metrics.begin(); it != metrics.end(); ++it) os << it.key() << ',' << it.value().dump() << '\n';
    return os.str();
}

std::string projection_csv(const IdentityClusterResult& r) {
    std::ostringstream os;
    os << "identity,pc1,pc2\n" << std::setprecision(10);
    for (Eigen::Index i = 0; i < r.projection.rows(); ++i)
        os << r.labels[static_cast<std::size_t>(i)] << ',' << r.projection(i, 0) << ',' << r.projection(i, 1) << '\n';
    return os.str();
}

EvalReport run_eval(const LoadedModel& model, const EvalConfig& cfg) {
    std::vector<std::string> metrics = cfg.metrics;
    if (metrics.empty()) {
        metrics = {"zero-shot", "identity"};
        if (model.denoiser) metrics.push_back("generation");
    }
    EvalReport rep;
    rep.seed = cfg.seed;
    rep.config = to_json(model.config);
    for (const auto& m : metrics) {
        if (m == "zero-shot") {
            auto z = zero_shot_accuracy(*model.encoder, *model.world, cfg.n_zero_shot, derive_seed(cfg.seed, 1));
            rep.metrics["zero_shot_top1"] = z.top1;
            rep.metrics["zero_shot_top5"] = z.top5;
            rep.breakdown["zero_shot_per_class_top1"] = z.per_class_top1;
        } else if (m == "identity") {
            rep.identity = identity_cluster_metrics(*model.encoder, *model.world, cfg.n_ids, cfg.n_per_id,
                                                    derive_seed(cfg.seed, 2));
            rep.has_identity = true;
            rep.metrics["silhouette"] = rep.identity.silhouette;
            rep.metrics["recall_at_1"] = rep.identity.recall_at_1;
            rep.breakdown["per_identity_silhouette"] = rep.identity.per_identity_silhouette;
        } else if (m == "generation") {
            if (!model.denoiser) throw ConfigError("generation metrics need a diffusion checkpoint");
            auto g = evaluate_generation(*model.world, *model.encoder, *model.denoiser, model.schedule, cfg.n_generate,
                                         derive_seed(cfg.seed, 3));
            rep.metrics["face_sim"] = g.face_sim;
            rep.metrics["face_sim_random_pair"] = g.face_sim_random_pair;
            rep.metrics["text_align"] = g.text_align;
            rep.metrics["mmd"] = g.mmd;
        } else {
            throw ConfigError("unknown metric '" + m + "'");
        }
    }
    for (auto it = rep.metrics.begin(); it != rep.metrics.end(); ++it)
        if (!std::isfinite(it.value().get<double>())) throw NumericError("metric " + it.key() + " is not finite");
    return rep;
}

// ---- ablation ------------------------------------------------------------

std::size_t worker_threads() {
    if (const char* v = std::getenv("FUSECLIP_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(v, &end, 10);
        if (end != v && *end == '\0' && n >= 1) return static_cast<std::size_t>(n);
        throw ConfigError("FUSECLIP_THREADS must be a positive integer");
    }
    return 1;
}

AblationResult judge_ablation(std::vector<AblationRow> rows, std::size_t n_bootstrap, std::uint64_t seed) {
    AblationResult out;
    out.rows = std::move(rows);
    auto find = [&](LossVariant v) -> const AblationRow* {
        for (const auto& r : out.rows)
            if (r.variant == v && !r.failed) return &r;
        return nullptr;
    };
    const auto *l1 = find(LossVariant::L1), *l2 = find(LossVariant::L2), *l3 = find(LossVariant::L3);
    auto add = [&](std::string name, bool available, bool pass, std::string detail) {
        out.checks.push_back({std::move(name), available ? (pass ? "PASS" : "FAIL") : "SKIPPED", std::move(detail)});
    };
    if (l1) {
        const double gap = l1->face_sim - l1->face_sim_random_pair;
        add("L1 face_sim within 0.1 of random-pair baseline", true, std::abs(gap) <= 0.1,
            "L1 " + fixed(l1->face_sim) + " vs baseline " + fixed(l1->face_sim_random_pair));
    } else {
        add("L1 face_sim within 0.1 of random-pair baseline", false, false, "needs L1");
    }
    for (const auto* r : {l2, l3}) {
        const std::string name = std::string(r == l2 ? "L2" : "L3") + " face_sim exceeds L1 by 0.3";
        if (r && l1)
            add(name, true, r->face_sim >= l1->face_sim + 0.3,
                fixed(r->face_sim) + " vs L1 " + fixed(l1->face_sim));
        else
            add(name, false, false, "needs L1 and " + std::string(r == l2 ? "L2" : "L3"));
    }
    if (l2 && l3) {
        out.text_gap = paired_bootstrap(l3->text_aligns, l2->text_aligns, n_bootstrap, seed);
        add("L3 text_align exceeds L2 (95% CI excludes 0)", true, out.text_gap.lower > 0.0,
            "gap " + fixed(out.text_gap.mean) + " CI [" + fixed(out.text_gap.lower) + ", " + fixed(out.text_gap.upper) +
                "]");
    } else {
        add("L3 text_align exceeds L2 (95% CI excludes 0)", false, false, "needs L2 and L3");
    }
    out.verdict = std::none_of(out.rows.begin(), out.rows.end(), [](const AblationRow& r) { return r.failed; }) &&
                  std::none_of(out.checks.begin(), out.checks.end(),
                               [](const AblationCheck& c) { return c.status == "FAIL"; });
    return out;
}

AblationResult run_ablation(const RunConfig& base, const std::vector<LossVariant>& variants, const Dataset& main,
                            const Dataset* guided, const VariantHook& hook) {
    if (variants.empty()) throw ConfigError("ablation needs at least one variant");
    std::vector<RunConfig> cfgs;
    for (auto v : variants) {
        RunConfig c = base;
        c.pretrain.variant = v;
        c.pretrain.loss.mask = TermMask::from_variant(v);
        c.diffusion.encoder_checkpoint = "pretrain-" + to_string(v);
        c.diffusion.encoder_trainable = false;
        cfgs.push_back(c);
    }
    // Only the term mask may differ between variants.
    auto masked = [](RunConfig c) {
        c.pretrain.variant = LossVariant::L3;
        c.pretrain.loss.mask = TermMask::from_variant(LossVariant::L3);
        c.diffusion.encoder_checkpoint = "";
        return to_json(c).dump();
    };
    for (const auto& c : cfgs)
        if (masked(c) != masked(cfgs.front())) throw ContractError("ablation variants differ beyond the loss mask");

    auto run_one = [&](std::size_t k) {
        AblationRow row;
        row.variant = variants[k];
        try {
            const auto& cfg = cfgs[k];
            Pretrainer pre(cfg, main, guided);
            pre.run({}, {});
            auto pre_ck = pre.checkpoint();
            DiffusionTrainer diff(cfg, main, guided, &pre_ck);
            diff.run({}, {});
            auto diff_ck = diff.checkpoint();
            auto g = evaluate_generation(pre.world(), diff.encoder(),
                                         diff.denoiser(), diff.schedule(), cfg.eval.n_generate,
                                         derive_seed(cfg.eval.seed, 3));
            row.face_sim = g.face_sim;
            row.face_sim_random_pair = g.face_sim_random_pair;
            row.text_align = g.text_align;
            row.mmd = g.mmd;
            row.text_aligns = std::move(g.text_aligns);
            if (hook) hook(variants[k], pre_ck, diff_ck);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        return row;
    };

    std::vector<AblationRow> rows(variants.size());
    const std::size_t workers = std::min(worker_threads(), variants.size());
    for (std::size_t start = 0; start < variants.size(); start += workers) {
        std::vector<std::future<AblationRow>> jobs;
        for (std::size_t k = start; k < std::min(variants.size(), start + workers); ++k)
            jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, run_one, k));
        for (std::size_t k = 0; k < jobs.size(); ++k) rows[start + k] = jobs[k].get();
    }
    return judge_ablation(std::move(rows), base.eval.n_bootstrap, derive_seed(base.eval.seed, 4));
}

Json AblationResult::to_json() const {
    Json rows_j = Json::array();
    for (const auto& r : rows) {
        Json j{{"variant", fuseclip::to_string(r.variant)}, {"status", r.failed ? "FAILED" : "OK"}};
        if (r.failed) {
            j["error"] = r.error;
        } else {
            j["face_sim"] = r.face_sim;
            j["face_sim_random_pair"] = r.face_sim_random_pair;
            j["text_align"] = r.text_align;
            j["mmd"] = r.mmd;
        }
        rows_j.push_back(j);
    }
    Json checks_j = Json::array();
    for (const auto& c : checks) checks_j.push_back(Json{{"check", c.name}, {"status", c.status}, {"detail", c.detail}});
    return Json{{"rows", rows_j},
                {"text_align_gap_L3_minus_L2",
                 Json{{"mean", text_gap.mean}, {"lower", text_gap.lower}, {"upper", text_gap.upper}}},
                {"checks", checks_j},
                {"verdict", verdict ? "PASS" : "FAIL"}};
}

std::string AblationResult::to_csv() const {
    std::ostringstream os;
    os << "variant,status,face_sim,face_sim_random_pair,text_align,mmd\n" << std::setprecision(10);
    for (const auto& r : rows) {
        os << fuseclip::to_string(r.variant) << ',' << (r.failed ? "FAILED" : "OK");
        if (r.failed)
            os << ",,,,\n";
        else
            os << ',' << r.face_sim << ',' << r.face_sim_random_pair << ',' << r.text_align << ',' << r.mmd << '\n';
    }
    return os.str();
}

std::string AblationResult::to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(8) << "variant" << std::right << std::setw(10) << "face_sim" << std::setw(13)
       << "random_pair" << std::setw(12) << "text_align" << std::setw(11) << "mmd" << '\n';
    for (const auto& r : rows) {
        os << std::left << std::setw(8) << fuseclip::to_string(r.variant) << std::right;
        if (r.failed) {
            os << "  FAILED: " << r.error << '\n';
            continue;
        }
        os << std::setw(10) << fixed(r.face_sim) << std::setw(13) << fixed(r.face_sim_random_pair) << std::setw(12)
           << fixed(r.text_align) << std::setw(11) << fixed(r.mmd, 5) << '\n';
    }
    for (const auto& c : checks) os << c.status << "  " << c.name << " (" << c.detail << ")\n";
    os << "verdict: " << (verdict ? "PASS" : "FAIL") << '\n';
    return os.str();
}

}  // namespace fuseclip
