#include "fuseclip/training.hpp"

#include <algorithm>
#include <cmath>

#include "fuseclip/errors.hpp"

namespace fuseclip {

namespace {

constexpr std::size_t kChunk = 256;

void append(std::vector<double>& dst, std::span<const double> src) { dst.insert(dst.end(), src.begin(), src.end()); }

// Gathers `rows` of a row-major n x stride table into a [rows, stride...] tensor.
Tensor gather(const std::vector<double>& table, std::size_t stride, const std::vector<std::size_t>& rows, Shape shape) {
    std::vector<double> out;
    out.reserve(rows.size() * stride);
    for (auto r : rows) out.insert(out.end(), table.begin() + r * stride, table.begin() + (r + 1) * stride);
    return Tensor(std::move(shape), std::move(out));
}

// Row-wise merge of main and guided sources according to a batch plan.
template <typename T>
std::vector<T> mix(const std::vector<T>& main, const std::vector<T>& guided, std::size_t stride, const BatchPlan& plan) {
    std::vector<T> out;
    out.reserve(plan.index.size() * stride);
    for (std::size_t i = 0; i < plan.index.size(); ++i) {
        const auto& src = plan.guided[i] ? guided : main;
        const auto r = plan.index[i];
        out.insert(out.end(), src.begin() + r * stride, src.begin() + (r + 1) * stride);
    }
    return out;
}

Mask mask_of(std::vector<std::uint8_t> flags, std::size_t batch, std::size_t length) {
    Mask m(batch, length, 0);
    m.valid = std::move(flags);
    return m;
}

void fill_missing_grads(ParamList& params) {
    for (auto& p : params)
        if (!p.tensor.has_grad()) (void)p.tensor.mutable_grad();
}

Json param_norms(const ParamList& params) {
    Json j = Json::object();
    for (const auto& p : params) {
        double s = 0.0;
        for (double v : p.tensor.data()) s += v * v;
        j[p.name] = std::sqrt(s);
    }
    return j;
}

void check_frozen(const FrozenEncoders& frozen, const ParamList& stored) {
    for (const auto& [name, t] : frozen.parameters()) {
        const Tensor* s = find_tensor(stored, name);
        if (!s) throw CompatibilityError("checkpoint lacks frozen tensor '" + name + "'");
        if (s->shape() != t.shape() || !std::equal(t.data().begin(), t.data().end(), s->data().begin()))
            throw CompatibilityError("frozen tensor '" + name + "' does not match the encoders rebuilt from the world");
    }
}

OptimizerState make_optimizer(double lr, double wd, double b1, double b2) {
    OptimizerState s;
    s.learning_rate = lr;
    s.weight_decay = wd;
    s.beta1 = b1;
    s.beta2 = b2;
    return s;
}

void restore_optimizer(OptimizerState& opt, const Checkpoint& ck, const ParamList& trainable) {
    if (ck.trainable.size() != trainable.size())
        throw CompatibilityError("checkpoint optimizer covers " + std::to_string(ck.trainable.size()) +
                                 " tensors, run expects " + std::to_string(trainable.size()));
    for (std::size_t i = 0; i < trainable.size(); ++i)
        if (ck.trainable[i] != trainable[i].name)
            throw CompatibilityError("checkpoint optimizer order differs at '" + ck.trainable[i] + "'");
    opt.first_moment = ck.optimizer.first_moment;
    opt.second_moment = ck.optimizer.second_moment;
    opt.step = ck.optimizer.step;
}

// Checkpoints own their values; live parameters keep changing after the snapshot.
void append_snapshot(ParamList& out, const ParamList& params) {
    for (const auto& p : params) out.push_back({p.name, p.tensor.detach()});
}

ParamList snapshot(const ParamList& params) {
    ParamList out;
    append_snapshot(out, params);
    return out;
}

bool params_finite(const ParamList& params) {
    for (const auto& p : params)
        for (double v : p.tensor.data())
            if (!std::isfinite(v)) return false;
    return true;
}

std::string snapshot_config(RunConfig cfg) {
    // Interruption is a property of one invocation, not of the run.
    cfg.pretrain.stop_after = 0;
    cfg.diffusion.stop_after = 0;
    return to_json(cfg).dump(2);
}

Checkpoint base_checkpoint(CheckpointKind kind, const RunConfig& cfg, std::uint64_t step, const Rng& rng,
                           const ParamList& trainable, const OptimizerState& opt) {
    Checkpoint ck;
    ck.kind = kind;
    ck.world_seed = cfg.world.seed;
    ck.step = step;
    ck.config_json = snapshot_config(cfg);
    ck.rng_state = rng.serialize();
    for (const auto& p : trainable) ck.trainable.push_back(p.name);
    ck.optimizer = opt;
    return ck;
}

template <typename Trainer>
void run_loop(Trainer& trainer, std::size_t steps, std::size_t stop_after, std::size_t log_every,
              std::size_t checkpoint_every, const MetricsSink& metrics, const CheckpointSink& checkpoints) {
    const std::size_t target = stop_after > 0 ? std::min(steps, stop_after) : steps;
    std::uint64_t last_saved = trainer.current_step();
    bool saved_any = false;
    while (trainer.current_step() < target) {
        auto rec = trainer.step();
        const auto s = trainer.current_step();
        if (metrics && ((log_every > 0 && s % log_every == 0) || s == steps)) metrics(rec);
        if (checkpoints && checkpoint_every > 0 && s % checkpoint_every == 0) {
            checkpoints(trainer.checkpoint());
            last_saved = s;
            saved_any = true;
        }
    }
    if (checkpoints && (!saved_any || last_saved != trainer.current_step())) checkpoints(trainer.checkpoint());
}

}  // namespace

FeatureCache build_feature_cache(const FrozenEncoders& frozen, const Dataset& ds) {
    if (ds.size() == 0) throw ContractError("feature cache of an empty dataset");
    FeatureCache c;
    c.n = ds.size();
    c.length = frozen.caption_len;
    c.width = frozen.dims.width;
    c.face_len = frozen.dims.face_patches;
    c.text_dim = frozen.dims.text_dim;
    c.face_dim = frozen.dims.face_dim;
    c.d_x = frozen.d_x;
    for (std::size_t start = 0; start < ds.size(); start += kChunk) {
        const std::size_t end = std::min(ds.size(), start + kChunk);
        std::vector<std::vector<TokenId>> captions;
        std::vector<std::vector<double>> refs, images;
        for (std::size_t i = start; i < end; ++i) {
            captions.push_back(ds.samples[i].caption);
            refs.push_back(ds.samples[i].reference);
            images.push_back(ds.samples[i].x0);
            append(c.x0, ds.samples[i].x0);
        }
        auto tokens = TokenBatch::from_captions(captions);
        auto text = encode_text(frozen, tokens);
        auto face = encode_face(frozen, rows_to_tensor(refs));
        auto image = encode_image(frozen, rows_to_tensor(images));
        append(c.text_patches, text.patches.data());
        c.mask.insert(c.mask.end(), text.mask.valid.begin(), text.mask.valid.end());
        append(c.text_cls, text.cls.data());
        append(c.face_patches, face.patches.data());
        append(c.face_cls, face.cls.data());
        append(c.image, image.data());
    }
    return c;
}

std::size_t BatchPlan::guided_count() const {
    return static_cast<std::size_t>(std::count(guided.begin(), guided.end(), std::uint8_t{1}));
}

BatchPlan draw_batch_plan(Rng& rng, std::size_t batch, double lambda, std::size_t n_main, std::size_t n_guided) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    BatchPlan plan;
    plan.guided.resize(batch);
    plan.index.resize(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        const bool g = rng.uniform() < lambda;
        const std::size_t n = g ? n_guided : n_main;
        if (n == 0) throw ContractError(g ? "guided slot drawn without guided data" : "no main data to draw from");
        plan.guided[i] = g ? 1 : 0;
        plan.index[i] = rng.uniform_index(n);
    }
    return plan;
}

// ---- pre-training --------------------------------------------------------

Pretrainer::Pretrainer(const RunConfig& cfg, const Dataset& main, const Dataset* guided)
    : cfg_(cfg), world_(cfg.world), rng_(derive_seed(cfg.pretrain.seed, 0)) {
    cfg_.validate();
    const auto& p = cfg_.pretrain;
    check_dataset_matches(main, world_);
    if (p.loss.guided_probability > 0.0 && !guided) throw ConfigError("lambda > 0 requires a guided dataset");
    frozen_ = build_frozen_encoders(world_, cfg_.encoder);
    encoder_ = std::make_unique<FaceClipEncoder>(frozen_, derive_seed(p.seed, 1));
    trainable_ = encoder_->parameters();
    if (p.loss.learnable_temperature) {
        log_scale_ = Tensor::scalar(std::log(1.0 / p.loss.temperature), true);
        trainable_.push_back({"encoder.log_scale", *log_scale_});
    }
    main_ = build_feature_cache(*frozen_, main);
    if (guided && p.loss.guided_probability > 0.0) {
        check_dataset_matches(*guided, world_);
        guided_ = build_feature_cache(*frozen_, *guided);
    }
    auto null_face = encode_face(*frozen_, Tensor::zeros({1, world_.config().d_face}));
    null_face_patches_.assign(null_face.patches.data().begin(), null_face.patches.data().end());
    null_face_cls_.assign(null_face.cls.data().begin(), null_face.cls.data().end());
    opt_ = make_optimizer(p.lr, p.weight_decay, p.beta1, p.beta2);
    initial_frozen_hash_ = frozen_->hash();
}

void Pretrainer::restore(const Checkpoint& ck) {
    if (ck.kind != CheckpointKind::Pretrain) throw CompatibilityError("not a pre-training checkpoint");
    if (ck.world_seed != cfg_.world.seed) throw CompatibilityError("checkpoint belongs to a different world seed");
    check_frozen(*frozen_, ck.tensors);
    copy_parameters(trainable_, ck.tensors);
    restore_optimizer(opt_, ck, trainable_);
    rng_.deserialize(ck.rng_state);
    step_ = ck.step;
}

Json Pretrainer::step() {
    diagnostics_ = Json();
    try {
        return step_impl();
    } catch (const NumericError& e) {
        if (diagnostics_.is_null())
            diagnostics_ = Json{{"stage", "pretrain"},
                                {"error", e.what()},
                                {"step", step_ + 1},
                                {"param_norms", param_norms(trainable_)}};
        throw;
    }
}

Json Pretrainer::step_impl() {
    const auto& p = cfg_.pretrain;
    const std::size_t b = p.batch;
    const auto plan = draw_batch_plan(rng_, b, p.loss.guided_probability, main_.n, guided_.n);
    slots_drawn_ += b;
    guided_drawn_ += plan.guided_count();

    const std::size_t L = main_.length, d = main_.width, Lr = main_.face_len;
    // Guided slots carry no face: their face input is the zero reference.
    std::vector<double> face_p, face_c;
    face_p.reserve(b * Lr * d);
    face_c.reserve(b * main_.face_dim);
    for (std::size_t i = 0; i < b; ++i) {
        const auto r = plan.index[i];
        if (plan.guided[i]) {
            append(face_p, null_face_patches_);
            append(face_c, null_face_cls_);
        } else {
            append(face_p, std::span<const double>(main_.face_patches).subspan(r * Lr * d, Lr * d));
            append(face_c, std::span<const double>(main_.face_cls).subspan(r * main_.face_dim, main_.face_dim));
        }
    }
    Tensor text_patches({b, L, d}, mix(main_.text_patches, guided_.text_patches, L * d, plan));
    Mask mask = mask_of(mix(main_.mask, guided_.mask, L, plan), b, L);
    Tensor text_cls({b, main_.text_dim}, mix(main_.text_cls, guided_.text_cls, main_.text_dim, plan));
    Tensor image({b, main_.text_dim}, mix(main_.image, guided_.image, main_.text_dim, plan));
    Tensor face_patches({b, Lr, d}, std::move(face_p));
    Tensor face_cls({b, main_.face_dim}, std::move(face_c));

    auto e = encoder_->fuse(text_patches, face_patches, mask);
    auto to_text = encoder_->project_to_text(e, mask);
    auto to_face = encoder_->project_to_face(e, mask);
    auto terms = alignment_loss(p.loss, to_text, to_face, image, face_cls, text_cls, plan.guided,
                                log_scale_ ? &*log_scale_ : nullptr);
    const double loss = terms.total.item();

    Json rec{{"step", step_ + 1},       {"loss", loss},           {"image", terms.image},
             {"id", terms.id},          {"text", terms.text},     {"id_rows", terms.id_rows},
             {"guided", plan.guided_count()}};
    auto fail = [&](const std::string& what) {
        diagnostics_ = Json{{"stage", "pretrain"},
                            {"error", what},
                            {"record", rec},
                            {"batch_index", plan.index},
                            {"batch_guided", plan.guided},
                            {"param_norms", param_norms(trainable_)}};
        throw NumericError(what + " at pre-training step " + std::to_string(step_ + 1));
    };
    if (!std::isfinite(loss)) fail("non-finite loss");

    if (terms.total.requires_grad()) backward(terms.total);
    fill_missing_grads(trainable_);
    const double norm = clip_grad_norm(trainable_, p.clip_norm);
    if (!std::isfinite(norm)) fail("non-finite gradient");
    optimizer_step(trainable_, opt_);
    if (!params_finite(trainable_)) fail("non-finite parameters after update");
    ++step_;
    rec["grad_norm"] = norm;
    if (log_scale_) rec["temperature"] = std::exp(-log_scale_->item());
    return rec;
}

void Pretrainer::run(const MetricsSink& metrics, const CheckpointSink& checkpoints) {
    const auto& p = cfg_.pretrain;
    run_loop(*this, p.steps, p.stop_after, p.log_every, p.checkpoint_every, metrics, checkpoints);
    if (frozen_->hash() != initial_frozen_hash_) throw ContractError("frozen encoder weights drifted during pre-training");
}

Checkpoint Pretrainer::checkpoint() const {
    auto ck = base_checkpoint(CheckpointKind::Pretrain, cfg_, step_, rng_, trainable_, opt_);
    ck.tensors = snapshot(trainable_);
    append_snapshot(ck.tensors, frozen_->parameters());
    return ck;
}

// ---- diffusion -----------------------------------------------------------

DiffusionTrainer::DiffusionTrainer(const RunConfig& cfg, const Dataset& main, const Dataset* guided,
                                   const Checkpoint* encoder_ck)
    : cfg_(cfg), world_(cfg.world), rng_(derive_seed(cfg.diffusion.seed, 0)) {
    cfg_.validate();
    const auto& d = cfg_.diffusion;
    check_dataset_matches(main, world_);
    frozen_ = build_frozen_encoders(world_, cfg_.encoder);
    if (encoder_ck) {
        if (encoder_ck->kind != CheckpointKind::Pretrain)
            throw CompatibilityError("diffusion.encoder_checkpoint must be a pre-training checkpoint");
        const auto src = run_config_from_json(Json::parse(encoder_ck->config_json));
        if (!(src.world == cfg_.world)) throw CompatibilityError("encoder checkpoint was trained on a different world");
        if (!(src.encoder == cfg_.encoder)) throw CompatibilityError("encoder checkpoint has different encoder dims");
        check_frozen(*frozen_, encoder_ck->tensors);
        encoder_ = std::make_unique<FaceClipEncoder>(frozen_, 0);
        auto params = encoder_->parameters();
        copy_parameters(params, encoder_ck->tensors);
    } else {
        encoder_ = std::make_unique<FaceClipEncoder>(frozen_, derive_seed(d.seed, 1));
    }
    denoiser_ = std::make_unique<Denoiser>(d.denoiser, world_.config().d_x, cfg_.encoder.width, derive_seed(d.seed, 2));
    schedule_ = NoiseSchedule::cosine(d.schedule_steps);

    trainable_ = denoiser_->parameters();
    if (d.encoder_trainable)
        for (auto& p : encoder_->parameters())
            if (p.name.rfind("encoder.fusion.", 0) == 0) trainable_.push_back(p);

    main_ = build_feature_cache(*frozen_, main);
    if (d.use_guided) {
        if (!guided) throw ConfigError("diffusion.use_guided requires a guided dataset");
        check_dataset_matches(*guided, world_);
        guided_ = build_feature_cache(*frozen_, *guided);
    }
    auto cache_e = [&](const FeatureCache& c, std::vector<double>& out) {
        out.clear();
        if (c.n == 0) return;
        const std::size_t L = c.length, w = c.width, Lr = c.face_len;
        for (std::size_t start = 0; start < c.n; start += kChunk) {
            const std::size_t n = std::min(c.n, start + kChunk) - start;
            std::vector<std::size_t> rows(n);
            for (std::size_t i = 0; i < n; ++i) rows[i] = start + i;
            auto e = encoder_->fuse(gather(c.text_patches, L * w, rows, {n, L, w}),
                                    gather(c.face_patches, Lr * w, rows, {n, Lr, w}),
                                    mask_of(std::vector<std::uint8_t>(c.mask.begin() + start * L,
                                                                      c.mask.begin() + (start + n) * L),
                                            n, L));
            append(out, e.data());
        }
    };
    if (!d.encoder_trainable) {
        cache_e(main_, main_e_);
        cache_e(guided_, guided_e_);
    }
    opt_ = make_optimizer(d.lr, d.weight_decay, d.beta1, d.beta2);
    initial_frozen_hash_ = frozen_->hash();
    initial_encoder_hash_ = encoder_->hash();
}

void DiffusionTrainer::restore(const Checkpoint& ck) {
    if (ck.kind != CheckpointKind::Diffusion) throw CompatibilityError("not a diffusion checkpoint");
    if (ck.world_seed != cfg_.world.seed) throw CompatibilityError("checkpoint belongs to a different world seed");
    check_frozen(*frozen_, ck.tensors);
    auto enc = encoder_->parameters();
    auto enc_before = encoder_->hash();
    copy_parameters(enc, ck.tensors);
    if (!cfg_.diffusion.encoder_trainable && encoder_->hash() != enc_before)
        throw CompatibilityError("checkpoint encoder differs from the configured frozen encoder");
    auto den = denoiser_->parameters();
    copy_parameters(den, ck.tensors);
    restore_optimizer(opt_, ck, trainable_);
    rng_.deserialize(ck.rng_state);
    step_ = ck.step;
    initial_encoder_hash_ = encoder_->hash();
}

Condition DiffusionTrainer::batch_condition(const std::vector<std::size_t>& rows,
                                            const std::vector<std::uint8_t>& from_guided) const {
    const std::size_t b = rows.size(), L = main_.length, w = main_.width, Lr = main_.face_len;
    BatchPlan plan{from_guided, rows};
    Mask mask = mask_of(mix(main_.mask, guided_.mask, L, plan), b, L);
    if (!cfg_.diffusion.encoder_trainable) return {Tensor({b, L, w}, mix(main_e_, guided_e_, L * w, plan)), mask};
    Tensor tp({b, L, w}, mix(main_.text_patches, guided_.text_patches, L * w, plan));
    Tensor fp({b, Lr, w}, mix(main_.face_patches, guided_.face_patches, Lr * w, plan));
    return {encoder_->fuse(tp, fp, mask), mask};
}

Json DiffusionTrainer::step() {
    diagnostics_ = Json();
    try {
        return step_impl();
    } catch (const NumericError& e) {
        if (diagnostics_.is_null())
            diagnostics_ = Json{{"stage", "diffusion"},
                                {"error", e.what()},
                                {"step", step_ + 1},
                                {"param_norms", param_norms(trainable_)}};
        throw;
    }
}

Json DiffusionTrainer::step_impl() {
    const auto& d = cfg_.diffusion;
    const double lambda = d.use_guided ? cfg_.pretrain.loss.guided_probability : 0.0;
    const auto plan = draw_batch_plan(rng_, d.batch, lambda, main_.n, guided_.n);
    Tensor x0({d.batch, main_.d_x}, mix(main_.x0, guided_.x0, main_.d_x, plan));
    auto cond = batch_condition(plan.index, plan.guided);
    auto loss_t = diffusion_loss(denoiser_->predictor(), x0, cond, schedule_, rng_);
    const double loss = loss_t.item();
    Json rec{{"step", step_ + 1}, {"loss", loss}};
    auto fail = [&](const std::string& what) {
        diagnostics_ = Json{{"stage", "diffusion"},
                            {"error", what},
                            {"record", rec},
                            {"batch_index", plan.index},
                            {"param_norms", param_norms(trainable_)}};
        throw NumericError(what + " at diffusion step " + std::to_string(step_ + 1));
    };
    if (!std::isfinite(loss)) fail("non-finite loss");
    backward(loss_t);
    fill_missing_grads(trainable_);
    const double norm = clip_grad_norm(trainable_, d.clip_norm);
    if (!std::isfinite(norm)) fail("non-finite gradient");
    optimizer_step(trainable_, opt_);
    if (!params_finite(trainable_)) fail("non-finite parameters after update");
    // The encoder's own leaves may hold gradients from the conditioning pass; drop them.
    if (!d.encoder_trainable) {
        auto enc = encoder_->parameters();
        zero_grad(enc);
    }
    ++step_;
    rec["grad_norm"] = norm;
    return rec;
}

void DiffusionTrainer::run(const MetricsSink& metrics, const CheckpointSink& checkpoints) {
    const auto& d = cfg_.diffusion;
    run_loop(*this, d.steps, d.stop_after, d.log_every, d.checkpoint_every, metrics, checkpoints);
    if (frozen_->hash() != initial_frozen_hash_) throw ContractError("frozen encoder weights drifted during diffusion");
    if (!d.encoder_trainable && encoder_->hash() != initial_encoder_hash_)
        throw ContractError("encoder changed although diffusion.encoder_trainable is false");
}

Checkpoint DiffusionTrainer::checkpoint() const {
    auto ck = base_checkpoint(CheckpointKind::Diffusion, cfg_, step_, rng_, trainable_, opt_);
    ck.tensors = snapshot(encoder_->parameters());
    append_snapshot(ck.tensors, denoiser_->parameters());
    append_snapshot(ck.tensors, frozen_->parameters());
    return ck;
}

// ---- loading -------------------------------------------------------------

LoadedModel load_model(const Checkpoint& ck) {
    LoadedModel m;
    try {
        m.config = run_config_from_json(Json::parse(ck.config_json));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    if (m.config.world.seed != ck.world_seed) throw CompatibilityError("checkpoint world seed disagrees with its config");
    m.world = std::make_unique<World>(m.config.world);
    m.frozen = build_frozen_encoders(*m.world, m.config.encoder);
    check_frozen(*m.frozen, ck.tensors);
    m.encoder = std::make_unique<FaceClipEncoder>(m.frozen, 0);
    auto enc = m.encoder->parameters();
    copy_parameters(enc, ck.tensors);
    m.schedule = NoiseSchedule::cosine(m.config.diffusion.schedule_steps);
    if (ck.kind == CheckpointKind::Diffusion) {
        m.denoiser = std::make_unique<Denoiser>(m.config.diffusion.denoiser, m.world->config().d_x,
                                                m.config.encoder.width, 0);
        auto den = m.denoiser->parameters();
        copy_parameters(den, ck.tensors);
    }
    return m;
}

}  // namespace fuseclip
