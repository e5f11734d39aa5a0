#include "fuseclip/world.hpp"

#include <cmath>
#include <cstring>

#include "fuseclip/errors.hpp"
#include "fuseclip/rng.hpp"

namespace fuseclip {

namespace {

const std::vector<std::string> kSlotNouns{"background", "pose", "light", "expression", "hair", "age"};
const std::vector<std::string> kLeadGlue{"a", "photo", "of", "person", "with"};
constexpr std::size_t kMaxVocab = 64;
constexpr std::size_t kMaxRejections = 100000;

Eigen::MatrixXd gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
    return m;
}

std::vector<double> unit_vector(Rng& rng, std::size_t d) {
    std::vector<double> v;
    double n2 = 0.0;
    do {
        v = rng.normal_vector(d);
        n2 = 0.0;
        for (double x : v) n2 += x * x;
    } while (n2 < 1e-12);
    const double inv = 1.0 / std::sqrt(n2);
    for (double& x : v) x *= inv;
    return v;
}

void validate(const WorldConfig& c) {
    if (c.n_identities < 2) throw ConfigError("world.n_identities must be at least 2");
    if (c.d_id == 0 || c.d_x == 0 || c.d_face == 0 || c.code_dim == 0) throw ConfigError("world dims must be positive");
    if (c.vocab_sizes.empty() || c.vocab_sizes.size() > kSlotNouns.size())
        throw ConfigError("world.vocab_sizes must list between 1 and 6 slots");
    for (auto v : c.vocab_sizes)
        if (v == 0) throw ConfigError("world.vocab_sizes entries must be positive");
    if (c.main_slot0_values == 0 || c.main_slot0_values > c.vocab_sizes[0])
        throw ConfigError("world.main_slot0_values must be in [1, vocab_sizes[0]]");
    if (c.d_id + c.d_attr() > c.d_x)
        throw ConfigError("world.d_x must be at least d_id + n_slots * code_dim so factors are recoverable");
    if (c.caption_len < kLeadGlue.size() - 1 + 2 * c.n_slots())
        throw ConfigError("world.caption_len too short for the caption templates");
    std::size_t vocab = 1 + kLeadGlue.size() + c.n_slots();
    for (auto v : c.vocab_sizes) vocab += v;
    if (vocab > kMaxVocab) throw ConfigError("caption vocabulary exceeds " + std::to_string(kMaxVocab) + " tokens");
    if (!(c.sigma_x >= 0.0) || !(c.sigma_r >= 0.0)) throw ConfigError("world noise levels must be non-negative");
    if (!(c.min_angle_deg >= 0.0 && c.min_angle_deg < 90.0)) throw ConfigError("world.min_angle_deg out of range");
    if (c.ref_nuisance_dim > 0 && c.d_id + c.ref_nuisance_dim > c.d_face)
        throw ConfigError("world.d_face must be at least d_id + ref_nuisance_dim");
    if (!(c.ref_nuisance_scale >= 0.0)) throw ConfigError("world.ref_nuisance_scale must be non-negative");
    if (!(c.identity_strength > 0.0)) throw ConfigError("world.identity_strength must be positive");
}

}  // namespace

World::World(WorldConfig config) : config_(std::move(config)) {
    validate(config_);
    const auto& c = config_;

    Rng id_rng(derive_seed(c.seed, 0));
    const double min_cos = std::cos(c.min_angle_deg * 3.14159265358979323846 / 180.0);
    std::size_t rejections = 0;
    while (identities_.size() < c.n_identities) {
        auto v = unit_vector(id_rng, c.d_id);
        bool ok = true;
        for (const auto& other : identities_) {
            double dot = 0.0;
            for (std::size_t i = 0; i < c.d_id; ++i) dot += v[i] * other.latent[i];
            if (dot > min_cos) {
                ok = false;
                break;
            }
        }
        if (ok) {
            identities_.push_back({static_cast<int>(identities_.size()), std::move(v)});
        } else if (++rejections > kMaxRejections) {
            throw ConfigError("cannot place identities with the requested minimum angle");
        }
    }

    Rng code_rng(derive_seed(c.seed, 1));
    codes_.resize(c.n_slots());
    for (std::size_t k = 0; k < c.n_slots(); ++k)
        for (std::size_t v = 0; v < c.vocab_sizes[k]; ++v) codes_[k].push_back(code_rng.normal_vector(c.code_dim));

    // Scales give each of identity and attributes about half of the per-pixel
    // variance, and references a squared norm near 4.
    Rng mat_rng(derive_seed(c.seed, 2));
    w_id_ = gaussian_matrix(mat_rng, c.d_x, c.d_id, c.identity_strength * std::sqrt(0.5));
    w_attr_ = gaussian_matrix(mat_rng, c.d_x, c.d_attr(), std::sqrt(0.5 / static_cast<double>(c.d_attr())));
    w_face_ = gaussian_matrix(mat_rng, c.d_face, c.d_id, std::sqrt(4.0 / static_cast<double>(c.d_face)));
    w_nuis_ = c.ref_nuisance_dim == 0
                  ? Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c.d_face), 0)
                  : gaussian_matrix(mat_rng, c.d_face, c.ref_nuisance_dim,
                                    c.ref_nuisance_scale *
                                        std::sqrt(4.0 / static_cast<double>(c.d_face * c.ref_nuisance_dim)));

    Eigen::MatrixXd factors(c.d_x, c.d_id + c.d_attr());
    factors << w_id_, w_attr_;
    factor_pinv_ = factors.completeOrthogonalDecomposition().pseudoInverse();

    words_.push_back("<pad>");
    for (const auto& w : kLeadGlue) words_.push_back(w);
    for (std::size_t k = 0; k < c.n_slots(); ++k) words_.push_back(kSlotNouns[k]);
    n_glue_ = words_.size() - 1;
    for (std::size_t k = 0; k < c.n_slots(); ++k) {
        slot_token_offset_.push_back(words_.size());
        for (std::size_t v = 0; v < c.vocab_sizes[k]; ++v) words_.push_back(kSlotNouns[k] + "_" + std::to_string(v));
    }

    auto glue = [&](const std::string& w) {
        for (std::size_t t = 0; t < words_.size(); ++t)
            if (words_[t] == w) return static_cast<int>(t);
        return 0;
    };
    const int noun0 = static_cast<int>(1 + kLeadGlue.size());
    // "a photo of person <v0> background <v1> pose ..."
    CaptionTemplate canonical{glue("a"), glue("photo"), glue("of"), glue("person")};
    for (std::size_t k = 0; k < c.n_slots(); ++k) {
        canonical.push_back(-static_cast<int>(k + 1));
        canonical.push_back(noun0 + static_cast<int>(k));
    }
    // "person with <vK> slotK ... <v0> background"
    CaptionTemplate paraphrase{glue("person"), glue("with")};
    for (std::size_t k = c.n_slots(); k-- > 0;) {
        paraphrase.push_back(-static_cast<int>(k + 1));
        paraphrase.push_back(noun0 + static_cast<int>(k));
    }
    templates_ = {canonical, paraphrase};
}

World make_world(const WorldConfig& config) { return World(config); }

AttributeFactor World::attribute(std::vector<std::size_t> slots) const {
    if (slots.size() != config_.n_slots()) throw ContractError("attribute: wrong number of slots");
    AttributeFactor a;
    for (std::size_t k = 0; k < slots.size(); ++k) {
        if (slots[k] >= config_.vocab_sizes[k]) throw ContractError("attribute: slot value out of range");
        const auto& code = codes_[k][slots[k]];
        a.embedding.insert(a.embedding.end(), code.begin(), code.end());
    }
    a.slots = std::move(slots);
    return a;
}

const std::vector<double>& World::attribute_code(std::size_t slot, std::size_t value) const {
    return codes_.at(slot).at(value);
}

TokenId World::attribute_token(std::size_t slot, std::size_t value) const {
    if (slot >= config_.n_slots() || value >= config_.vocab_sizes[slot])
        throw ContractError("attribute_token out of range");
    return static_cast<TokenId>(slot_token_offset_[slot] + value);
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> World::recover_factors(const std::vector<double>& x0) const {
    if (x0.size() != config_.d_x) throw ContractError("recover_factors: image has wrong dimension");
    Eigen::Map<const Eigen::VectorXd> x(x0.data(), static_cast<Eigen::Index>(x0.size()));
    Eigen::VectorXd z = factor_pinv_ * x;
    const auto did = static_cast<Eigen::Index>(config_.d_id);
    return {z.head(did), z.tail(z.size() - did)};
}

std::uint64_t World::digest() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& id : identities_) mix(id.latent.data(), id.latent.size() * sizeof(double));
    for (const auto& slot : codes_)
        for (const auto& code : slot) mix(code.data(), code.size() * sizeof(double));
    for (const auto* m : {&w_id_, &w_attr_, &w_face_, &w_nuis_}) mix(m->data(), static_cast<std::size_t>(m->size()) * sizeof(double));
    for (const auto& w : words_) mix(w.data(), w.size());
    return h;
}

std::vector<double> render_image(const World& world, const IdentityFactor& id, const AttributeFactor& attr,
                                 std::uint64_t noise_seed, double sigma) {
    const auto& c = world.config();
    if (id.latent.size() != c.d_id || attr.embedding.size() != c.d_attr())
        throw ContractError("render_image: factor dimension mismatch");
    Eigen::Map<const Eigen::VectorXd> u(id.latent.data(), static_cast<Eigen::Index>(c.d_id));
    Eigen::Map<const Eigen::VectorXd> a(attr.embedding.data(), static_cast<Eigen::Index>(c.d_attr()));
    Eigen::VectorXd x = world.render_identity() * u + world.render_attribute() * a;
    std::vector<double> out(x.data(), x.data() + x.size());
    if (sigma > 0.0) {
        Rng rng(noise_seed);
        for (double& v : out) v += sigma * rng.normal();
    }
    return out;
}

std::vector<double> render_image(const World& world, const IdentityFactor& id, const AttributeFactor& attr,
                                 std::uint64_t noise_seed) {
    return render_image(world, id, attr, noise_seed, world.config().sigma_x);
}

std::vector<double> render_reference(const World& world, const IdentityFactor& id, std::uint64_t noise_seed,
                                     double sigma) {
    const auto& c = world.config();
    if (id.latent.size() != c.d_id) throw ContractError("render_reference: latent dimension mismatch");
    Eigen::Map<const Eigen::VectorXd> u(id.latent.data(), static_cast<Eigen::Index>(c.d_id));
    Eigen::VectorXd r = world.face_matrix() * u;
    Rng rng(noise_seed);
    if (c.ref_nuisance_dim > 0) {
        Eigen::VectorXd n(static_cast<Eigen::Index>(c.ref_nuisance_dim));
        for (Eigen::Index i = 0; i < n.size(); ++i) n(i) = rng.normal();
        r += world.reference_nuisance() * n;
    }
    std::vector<double> out(r.data(), r.data() + r.size());
    if (sigma > 0.0)
        for (double& v : out) v += sigma * rng.normal();
    return out;
}

std::vector<double> render_reference(const World& world, const IdentityFactor& id, std::uint64_t noise_seed) {
    return render_reference(world, id, noise_seed, world.config().sigma_r);
}

std::vector<TokenId> caption_of(const World& world, const AttributeFactor& attr, std::size_t template_index) {
    const auto& templates = world.templates();
    if (template_index >= templates.size()) throw ContractError("caption_of: unknown template");
    if (attr.slots.size() != world.config().n_slots()) throw ContractError("caption_of: wrong number of slots");
    std::vector<TokenId> tokens;
    tokens.reserve(world.config().caption_len);
    for (int item : templates[template_index]) {
        if (item >= 0) {
            tokens.push_back(static_cast<TokenId>(item));
        } else {
            const auto slot = static_cast<std::size_t>(-item - 1);
            tokens.push_back(world.attribute_token(slot, attr.slots[slot]));
        }
    }
    tokens.resize(world.config().caption_len, kPadToken);
    return tokens;
}

IdentityFactor random_anonymous_identity(const World& world, std::uint64_t seed) {
    Rng rng(seed);
    return {-1, unit_vector(rng, world.config().d_id)};
}

}  // namespace fuseclip
