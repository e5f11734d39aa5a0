#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace fuseclip {

using TokenId = std::uint16_t;
inline constexpr TokenId kPadToken = 0;

// Knobs of the synthetic generative process.
struct WorldConfig {
    std::uint64_t seed = 1;
    std::size_t n_identities = 20;
    std::size_t d_id = 16;
    std::size_t d_x = 64;
    std::size_t d_face = 32;
    std::size_t caption_len = 16;
    std::vector<std::size_t> vocab_sizes{16, 4, 4};
    std::size_t code_dim = 8;
    // Main (identity) data only ever shows the first this-many values of slot 0;
    // the guided image-text data covers the whole slot vocabulary.
    std::size_t main_slot0_values = 8;
    double sigma_x = 0.05;
    double sigma_r = 0.05;
    // Each reference photo also varies along a per-photo nuisance subspace
    // (pose, lighting) that the face recognizer ignores. Scale is relative to
    // the identity part of the reference.
    std::size_t ref_nuisance_dim = 8;
    double ref_nuisance_scale = 1.0;
    double min_angle_deg = 10.0;
    // Standard deviation of the identity render matrix entries relative to the
    // attribute block; below 1 identity is a fine-grained part of the image.
    double identity_strength = 1.0;
    // Strength of the identity component inside the frozen image features.
    double image_identity_weight = 0.0;

    std::size_t n_slots() const { return vocab_sizes.size(); }
    std::size_t d_attr() const { return n_slots() * code_dim; }
    bool operator==(const WorldConfig&) const = default;
};

struct IdentityFactor {
    int id_index = -1;  // -1 for anonymous identities (guided data)
    std::vector<double> latent;
};

struct AttributeFactor {
    std::vector<std::size_t> slots;
    std::vector<double> embedding;
};

// One caption template: non-negative entries are glue tokens, negative
// entries -(k+1) are the word of attribute slot k.
using CaptionTemplate = std::vector<int>;

// Everything fixed by the world seed: latents, codes, render matrices, vocabulary.
class World {
public:
    explicit World(WorldConfig config);

    const WorldConfig& config() const { return config_; }
    std::size_t n_identities() const { return identities_.size(); }
    const IdentityFactor& identity(std::size_t i) const { return identities_.at(i); }
    AttributeFactor attribute(std::vector<std::size_t> slots) const;
    const std::vector<double>& attribute_code(std::size_t slot, std::size_t value) const;

    const Eigen::MatrixXd& render_identity() const { return w_id_; }    // d_x x d_id
    const Eigen::MatrixXd& render_attribute() const { return w_attr_; } // d_x x d_attr
    const Eigen::MatrixXd& face_matrix() const { return w_face_; }      // d_face x d_id
    const Eigen::MatrixXd& reference_nuisance() const { return w_nuis_; }  // d_face x ref_nuisance_dim

    // Least-squares estimate of (identity latent, attribute embedding) from an image.
    std::pair<Eigen::VectorXd, Eigen::VectorXd> recover_factors(const std::vector<double>& x0) const;

    std::size_t vocab_size() const { return words_.size(); }
    const std::string& word(TokenId t) const { return words_.at(t); }
    TokenId attribute_token(std::size_t slot, std::size_t value) const;
    std::size_t n_glue_words() const { return n_glue_; }
    const std::vector<CaptionTemplate>& templates() const { return templates_; }

    // Stable digest of every generated quantity (used in world files and checks).
    std::uint64_t digest() const;

private:
    WorldConfig config_;
    std::vector<IdentityFactor> identities_;
    std::vector<std::vector<std::vector<double>>> codes_;  // [slot][value] -> code_dim
    Eigen::MatrixXd w_id_, w_attr_, w_face_, w_nuis_;
    Eigen::MatrixXd factor_pinv_;  // (d_id + d_attr) x d_x
    std::vector<std::string> words_;
    std::size_t n_glue_ = 0;
    std::vector<std::size_t> slot_token_offset_;
    std::vector<CaptionTemplate> templates_;
};

World make_world(const WorldConfig& config);

// x0 = W_id * latent + W_attr * embedding + sigma * noise
std::vector<double> render_image(const World& world, const IdentityFactor& id, const AttributeFactor& attr,
                                 std::uint64_t noise_seed, double sigma);
std::vector<double> render_image(const World& world, const IdentityFactor& id, const AttributeFactor& attr,
                                 std::uint64_t noise_seed);

// reference = W_face * latent + W_nuis * nuisance + sigma * noise, nuisance ~ N(0, I)
std::vector<double> render_reference(const World& world, const IdentityFactor& id, std::uint64_t noise_seed,
                                     double sigma);
std::vector<double> render_reference(const World& world, const IdentityFactor& id, std::uint64_t noise_seed);

std::vector<TokenId> caption_of(const World& world, const AttributeFactor& attr, std::size_t template_index = 0);

IdentityFactor random_anonymous_identity(const World& world, std::uint64_t seed);

}  // namespace fuseclip
