#include "fuseclip/config.hpp"

#include <set>

#include "fuseclip/errors.hpp"

namespace fuseclip {

namespace {

// Reads whitelisted keys of one section; anything else is a config error.
class SectionReader {
public:
    SectionReader(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
        if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& field) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            field = it->template get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config key '" + section_ + "." + key + "' has the wrong type");
        }
    }

    const Json* object(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + section_ + "." + it.key() + "'");
    }

private:
    const Json& j_;
    std::string section_;
    std::set<std::string> seen_;
};

// Unsigned fields must not silently wrap from negative JSON numbers.
template <typename T>
void get_unsigned(SectionReader& r, const Json& j, const char* key, T& field, const std::string& section) {
    auto it = j.find(key);
    if (it != j.end() && it->is_number_integer() && it->template get<long long>() < 0)
        throw ConfigError("config key '" + section + "." + key + "' must be non-negative");
    r.get(key, field);
}

WorldConfig world_from_json(const Json& j) {
    WorldConfig w;
    SectionReader r(j, "world");
    get_unsigned(r, j, "seed", w.seed, "world");
    get_unsigned(r, j, "n_identities", w.n_identities, "world");
    get_unsigned(r, j, "d_id", w.d_id, "world");
    get_unsigned(r, j, "d_x", w.d_x, "world");
    get_unsigned(r, j, "d_face", w.d_face, "world");
    get_unsigned(r, j, "caption_len", w.caption_len, "world");
    r.get("vocab_sizes", w.vocab_sizes);
    get_unsigned(r, j, "code_dim", w.code_dim, "world");
    get_unsigned(r, j, "main_slot0_values", w.main_slot0_values, "world");
    r.get("sigma_x", w.sigma_x);
    r.get("sigma_r", w.sigma_r);
    get_unsigned(r, j, "ref_nuisance_dim", w.ref_nuisance_dim, "world");
    r.get("ref_nuisance_scale", w.ref_nuisance_scale);
    r.get("min_angle_deg", w.min_angle_deg);
    r.get("identity_strength", w.identity_strength);
    r.get("image_identity_weight", w.image_identity_weight);
    r.finish();
    return w;
}

EncoderConfig encoder_from_json(const Json& j) {
    EncoderConfig e;
    SectionReader r(j, "encoder");
    get_unsigned(r, j, "width", e.width, "encoder");
    get_unsigned(r, j, "text_dim", e.text_dim, "encoder");
    get_unsigned(r, j, "face_dim", e.face_dim, "encoder");
    get_unsigned(r, j, "face_patches", e.face_patches, "encoder");
    get_unsigned(r, j, "face_hidden", e.face_hidden, "encoder");
    get_unsigned(r, j, "blocks", e.blocks, "encoder");
    get_unsigned(r, j, "heads", e.heads, "encoder");
    get_unsigned(r, j, "ffn_mult", e.ffn_mult, "encoder");
    r.get("sequential_dca", e.sequential_dca);
    r.finish();
    return e;
}

DataConfig data_from_json(const Json& j) {
    DataConfig d;
    SectionReader r(j, "data");
    r.get("dir", d.dir);
    get_unsigned(r, j, "seed", d.seed, "data");
    get_unsigned(r, j, "n_main", d.n_main, "data");
    get_unsigned(r, j, "n_guided", d.n_guided, "data");
    r.finish();
    return d;
}

PretrainConfig pretrain_from_json(const Json& j) {
    PretrainConfig p;
    SectionReader r(j, "pretrain");
    const std::string s = "pretrain";
    std::string mask = to_string(p.variant);
    r.get("loss_mask", mask);
    p.variant = parse_loss_variant(mask);
    p.loss.mask = TermMask::from_variant(p.variant);
    r.get("lambda", p.loss.guided_probability);
    r.get("temperature", p.loss.temperature);
    r.get("learnable_temperature", p.loss.learnable_temperature);
    get_unsigned(r, j, "batch", p.batch, s);
    get_unsigned(r, j, "steps", p.steps, s);
    r.get("lr", p.lr);
    r.get("weight_decay", p.weight_decay);
    r.get("beta1", p.beta1);
    r.get("beta2", p.beta2);
    r.get("clip_norm", p.clip_norm);
    get_unsigned(r, j, "seed", p.seed, s);
    get_unsigned(r, j, "log_every", p.log_every, s);
    get_unsigned(r, j, "checkpoint_every", p.checkpoint_every, s);
    get_unsigned(r, j, "stop_after", p.stop_after, s);
    r.finish();
    return p;
}

DiffusionTrainConfig diffusion_from_json(const Json& j) {
    DiffusionTrainConfig d;
    SectionReader r(j, "diffusion");
    const std::string s = "diffusion";
    r.get("encoder_checkpoint", d.encoder_checkpoint);
    r.get("encoder_trainable", d.encoder_trainable);
    r.get("force_encoder_trainable", d.force_encoder_trainable);
    r.get("use_guided", d.use_guided);
    get_unsigned(r, j, "schedule_steps", d.schedule_steps, s);
    get_unsigned(r, j, "batch", d.batch, s);
    get_unsigned(r, j, "steps", d.steps, s);
    r.get("lr", d.lr);
    r.get("weight_decay", d.weight_decay);
    r.get("beta1", d.beta1);
    r.get("beta2", d.beta2);
    r.get("clip_norm", d.clip_norm);
    get_unsigned(r, j, "seed", d.seed, s);
    get_unsigned(r, j, "log_every", d.log_every, s);
    get_unsigned(r, j, "checkpoint_every", d.checkpoint_every, s);
    get_unsigned(r, j, "stop_after", d.stop_after, s);
    if (const Json* den = r.object("denoiser")) {
        SectionReader dr(*den, "diffusion.denoiser");
        const std::string ds = "diffusion.denoiser";
        get_unsigned(dr, *den, "hidden", d.denoiser.hidden, ds);
        get_unsigned(dr, *den, "attn_dim", d.denoiser.attn_dim, ds);
        get_unsigned(dr, *den, "heads", d.denoiser.heads, ds);
        get_unsigned(dr, *den, "time_dim", d.denoiser.time_dim, ds);
        get_unsigned(dr, *den, "blocks", d.denoiser.blocks, ds);
        dr.finish();
    }
    r.finish();
    return d;
}

EvalConfig eval_from_json(const Json& j) {
    EvalConfig e;
    SectionReader r(j, "eval");
    const std::string s = "eval";
    get_unsigned(r, j, "seed", e.seed, s);
    r.get("metrics", e.metrics);
    get_unsigned(r, j, "n_zero_shot", e.n_zero_shot, s);
    get_unsigned(r, j, "n_ids", e.n_ids, s);
    get_unsigned(r, j, "n_per_id", e.n_per_id, s);
    get_unsigned(r, j, "n_generate", e.n_generate, s);
    get_unsigned(r, j, "n_bootstrap", e.n_bootstrap, s);
    r.finish();
    return e;
}

}  // namespace

Json world_to_json(const WorldConfig& w) {
    return Json{{"seed", w.seed},
                {"n_identities", w.n_identities},
                {"d_id", w.d_id},
                {"d_x", w.d_x},
                {"d_face", w.d_face},
                {"caption_len", w.caption_len},
                {"vocab_sizes", w.vocab_sizes},
                {"code_dim", w.code_dim},
                {"main_slot0_values", w.main_slot0_values},
                {"sigma_x", w.sigma_x},
                {"sigma_r", w.sigma_r},
                {"ref_nuisance_dim", w.ref_nuisance_dim},
                {"ref_nuisance_scale", w.ref_nuisance_scale},
                {"min_angle_deg", w.min_angle_deg},
                {"identity_strength", w.identity_strength},
                {"image_identity_weight", w.image_identity_weight}};
}

Json encoder_to_json(const EncoderConfig& e) {
    return Json{{"width", e.width},         {"text_dim", e.text_dim}, {"face_dim", e.face_dim},
                {"face_patches", e.face_patches}, {"face_hidden", e.face_hidden}, {"blocks", e.blocks},
                {"heads", e.heads},         {"ffn_mult", e.ffn_mult}, {"sequential_dca", e.sequential_dca}};
}

Json to_json(const RunConfig& c) {
    const auto& p = c.pretrain;
    const auto& d = c.diffusion;
    const auto& e = c.eval;
    Json j;
    j["world"] = world_to_json(c.world);
    j["encoder"] = encoder_to_json(c.encoder);
    j["data"] = Json{{"dir", c.data.dir}, {"seed", c.data.seed}, {"n_main", c.data.n_main}, {"n_guided", c.data.n_guided}};
    j["pretrain"] = Json{{"loss_mask", to_string(p.variant)},
                         {"lambda", p.loss.guided_probability},
                         {"temperature", p.loss.temperature},
                         {"learnable_temperature", p.loss.learnable_temperature},
                         {"batch", p.batch},
                         {"steps", p.steps},
                         {"lr", p.lr},
                         {"weight_decay", p.weight_decay},
                         {"beta1", p.beta1},
                         {"beta2", p.beta2},
                         {"clip_norm", p.clip_norm},
                         {"seed", p.seed},
                         {"log_every", p.log_every},
                         {"checkpoint_every", p.checkpoint_every},
                         {"stop_after", p.stop_after}};
    j["diffusion"] = Json{{"encoder_checkpoint", d.encoder_checkpoint},
                          {"encoder_trainable", d.encoder_trainable},
                          {"force_encoder_trainable", d.force_encoder_trainable},
                          {"use_guided", d.use_guided},
                          {"schedule_steps", d.schedule_steps},
                          {"batch", d.batch},
                          {"steps", d.steps},
                          {"lr", d.lr},
                          {"weight_decay", d.weight_decay},
                          {"beta1", d.beta1},
                          {"beta2", d.beta2},
                          {"clip_norm", d.clip_norm},
                          {"seed", d.seed},
                          {"log_every", d.log_every},
                          {"checkpoint_every", d.checkpoint_every},
                          {"stop_after", d.stop_after},
                          {"denoiser",
                           Json{{"hidden", d.denoiser.hidden},
                                {"attn_dim", d.denoiser.attn_dim},
                                {"heads", d.denoiser.heads},
                                {"time_dim", d.denoiser.time_dim},
                                {"blocks", d.denoiser.blocks}}}};
    j["eval"] = Json{{"seed", e.seed},
                     {"metrics", e.metrics},
                     {"n_zero_shot", e.n_zero_shot},
                     {"n_ids", e.n_ids},
                     {"n_per_id", e.n_per_id},
                     {"n_generate", e.n_generate},
                     {"n_bootstrap", e.n_bootstrap}};
    return j;
}

RunConfig run_config_from_json(const Json& j) {
    RunConfig c;
    SectionReader r(j, "<root>");
    if (const Json* s = r.object("world")) c.world = world_from_json(*s);
    if (const Json* s = r.object("encoder")) c.encoder = encoder_from_json(*s);
    if (const Json* s = r.object("data")) c.data = data_from_json(*s);
    if (const Json* s = r.object("pretrain")) c.pretrain = pretrain_from_json(*s);
    if (const Json* s = r.object("diffusion")) c.diffusion = diffusion_from_json(*s);
    if (const Json* s = r.object("eval")) c.eval = eval_from_json(*s);
    r.finish();
    c.validate();
    return c;
}

void RunConfig::validate() const {
    (void)World(world);  // throws ConfigError on an inconsistent world
    if (encoder.width == 0 || encoder.text_dim == 0 || encoder.face_dim == 0 || encoder.face_patches == 0 ||
        encoder.face_hidden == 0 || encoder.blocks == 0 || encoder.heads == 0 || encoder.ffn_mult == 0)
        throw ConfigError("encoder dims must be positive");
    if (encoder.width % encoder.heads != 0) throw ConfigError("encoder.width must be divisible by encoder.heads");
    if (data.n_main == 0) throw ConfigError("data.n_main must be positive");
    pretrain.loss.validate();
    if (pretrain.batch < 2) throw ConfigError("pretrain.batch must be at least 2");
    if (!(pretrain.lr > 0.0)) throw ConfigError("pretrain.lr must be positive");
    if (pretrain.loss.guided_probability > 0.0 && data.n_guided == 0)
        throw ConfigError("pretrain.lambda > 0 needs guided data (data.n_guided > 0)");
    if (diffusion.batch < 1) throw ConfigError("diffusion.batch must be positive");
    if (diffusion.schedule_steps == 0) throw ConfigError("diffusion.schedule_steps must be positive");
    if (!(diffusion.lr > 0.0)) throw ConfigError("diffusion.lr must be positive");
    if (diffusion.encoder_trainable && diffusion.encoder_checkpoint != "untrained" && !diffusion.force_encoder_trainable)
        throw ConfigError(
            "diffusion.encoder_trainable requires encoder_checkpoint \"untrained\" (or force_encoder_trainable)");
    if (diffusion.use_guided && data.n_guided == 0) throw ConfigError("diffusion.use_guided needs guided data");
    static const std::set<std::string> known{"zero-shot", "identity", "generation"};
    for (const auto& m : eval.metrics)
        if (!known.count(m)) throw ConfigError("unknown metric '" + m + "' (expected zero-shot, identity, generation)");
    if (eval.n_ids < 2) throw ConfigError("eval.n_ids must be at least 2");
    if (eval.n_per_id < 2) throw ConfigError("eval.n_per_id must be at least 2 for a silhouette");
}

void apply_override(Json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key.path=value");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    Json* node = &tree;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        Json& child = (*node)[key];
        if (child.is_null()) child = Json::object();
        node = &child;
        start = dot + 1;
    }
}

}  // namespace fuseclip
