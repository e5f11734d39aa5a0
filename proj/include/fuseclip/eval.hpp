#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fuseclip/config.hpp"
#include "fuseclip/dataset.hpp"
#include "fuseclip/diffusion.hpp"
#include "fuseclip/fusion.hpp"
#include "fuseclip/training.hpp"

namespace fuseclip {

// ---- generic statistics ---------------------------------------------------

// Mean silhouette over rows of X with cosine distance; every label needs >= 2 members.
double silhouette_score(const Eigen::MatrixXd& x, const std::vector<int>& labels);
std::vector<double> silhouette_samples(const Eigen::MatrixXd& x, const std::vector<int>& labels);
// Leave-one-out nearest neighbour (cosine) label agreement.
double knn_recall_at_1(const Eigen::MatrixXd& x, const std::vector<int>& labels);
// Rows projected onto the top two principal axes (signs fixed so the largest |loading| is positive).
Eigen::MatrixXd pca_2d(const Eigen::MatrixXd& x);

// Unbiased Gaussian-kernel MMD^2 between row sets; bandwidth is the median
// pairwise distance of the pooled rows. Each set needs at least 10 rows.
double mmd2_unbiased(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
double mmd2_unbiased(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth);
double median_pairwise_distance(const Eigen::MatrixXd& x);

struct BootstrapInterval {
    double mean = 0.0, lower = 0.0, upper = 0.0;
};
// Percentile interval of mean(a - b) over paired resamples.
BootstrapInterval paired_bootstrap(std::span<const double> a, std::span<const double> b, std::size_t n_resamples,
                                   std::uint64_t seed, double level = 0.95);

double cosine(std::span<const double> a, std::span<const double> b);  // ContractError on a zero vector

// ---- the three verification experiments ----------------------------------

struct ZeroShotResult {
    double top1 = 0.0, top5 = 0.0;
    std::size_t n_classes = 0, n_eval = 0;
    std::vector<double> per_class_top1;
};

// Classes are the values of attribute slot 0. Class weights: normalized
// project_to_text of the canonical caption (other slots at value 0) with a zero face.
ZeroShotResult zero_shot_accuracy(const FaceClipEncoder& encoder, const World& world, std::size_t n_eval,
                                  std::uint64_t seed);

struct IdentityClusterResult {
    double silhouette = 0.0, recall_at_1 = 0.0;
    std::vector<int> labels;
    Eigen::MatrixXd embeddings;  // pooled fused embeddings, one row per reference
    Eigen::MatrixXd projection;  // 2-d PCA coordinates
    std::vector<double> per_identity_silhouette;
};

IdentityClusterResult identity_cluster_metrics(const FaceClipEncoder& encoder, const World& world, std::size_t n_ids,
                                               std::size_t n_per_id, std::uint64_t seed);

// Identity agreement of a generated image with a reference: cosine of the frozen
// face class embeddings of the reference and of the face view W_face * id_hat(x0).
double face_similarity(const World& world, const FrozenEncoders& frozen, std::span<const double> x0,
                       std::span<const double> reference);
// cos(F_im(x0), text class embedding of the caption).
double text_alignment_score(const FrozenEncoders& frozen, std::span<const double> x0,
                            const std::vector<TokenId>& caption);
// MMD^2 between frozen image features of two image sets (rows of d_x values).
double mmd_score(const FrozenEncoders& frozen, const std::vector<std::vector<double>>& a,
                 const std::vector<std::vector<double>>& b);

struct GenerationResult {
    double face_sim = 0.0, face_sim_random_pair = 0.0, text_align = 0.0, mmd = 0.0;
    std::vector<double> face_sims, random_pair_sims, text_aligns;
    std::vector<std::vector<double>> generated;
};

// Samples n conditions (main-distribution identity, attributes and a fresh
// reference), generates x0 with ancestral sampling and scores them. The
// random-pair baseline scores each generation against the reference of a
// sample with a different identity.
GenerationResult evaluate_generation(const World& world, const FaceClipEncoder& encoder, const Denoiser& denoiser,
                                     const NoiseSchedule& schedule, std::size_t n, std::uint64_t seed);

// ---- reports ---------------------------------------------------------------

struct EvalReport {
    Json metrics = Json::object();
    Json breakdown = Json::object();
    Json config;
    std::uint64_t seed = 0;
    IdentityClusterResult identity;  // populated when identity metrics ran
    bool has_identity = false;

    Json to_json() const;
    std::string to_csv() const;  // metric,value rows
};

// Runs the requested metric families (empty list = all applicable to the model).
EvalReport run_eval(const LoadedModel& model, const EvalConfig& cfg);
std::string projection_csv(const IdentityClusterResult& r);

// ---- ablation ----------------------------------------------------------------

struct AblationRow {
    LossVariant variant = LossVariant::L3;
    double face_sim = 0.0, face_sim_random_pair = 0.0, text_align = 0.0, mmd = 0.0;
    bool failed = false;
    std::string error;
    std::vector<double> text_aligns;  // per-sample, paired across variants
};

struct AblationCheck {
    std::string name;
    std::string status;  // PASS, FAIL or SKIPPED
    std::string detail;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::vector<AblationCheck> checks;
    BootstrapInterval text_gap;  // L3 - L2
    bool verdict = false;        // every non-skipped check passed and no row failed

    Json to_json() const;
    std::string to_csv() const;
    std::string to_table() const;
};

// Per-variant artifacts, for callers that want to persist them.
using VariantHook = std::function<void(LossVariant, const Checkpoint& pretrain, const Checkpoint& diffusion)>;

// Pretrains one encoder per variant (only the term mask differs), trains one
// frozen-encoder diffusion model on each, and evaluates generation with shared seeds.
AblationResult run_ablation(const RunConfig& base, const std::vector<LossVariant>& variants, const Dataset& main,
                            const Dataset* guided, const VariantHook& hook = {});

// Evaluates the table checks on already computed rows.
AblationResult judge_ablation(std::vector<AblationRow> rows, std::size_t n_bootstrap, std::uint64_t seed);

// Worker cap from FUSECLIP_THREADS (default 1).
std::size_t worker_threads();

}  // namespace fuseclip
