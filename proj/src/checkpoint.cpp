#include "fuseclip/checkpoint.hpp"

#include <array>
#include <cstring>

#include "fuseclip/binio.hpp"
#include "fuseclip/errors.hpp"

namespace fuseclip {

namespace {

constexpr std::array<char, 16> kMagic{'F', 'U', 'S', 'E', 'C', 'L', 'I', 'P', '-', 'C', 'K', 0, 0, 0, 0, 0};

void put_section(ByteWriter& out, const char (&tag)[5], const ByteWriter& payload) {
    out.bytes(tag, 4);
    out.u64(payload.buffer().size());
    out.bytes(payload.buffer().data(), payload.buffer().size());
    out.u64(fnv1a64(payload.buffer()));
}

std::vector<double> flatten_moment(const std::vector<std::vector<double>>& m, std::size_t i, std::size_t n) {
    if (i < m.size()) return m[i];
    return std::vector<double>(n, 0.0);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    ByteWriter meta;
    meta.u32(static_cast<std::uint32_t>(ck.kind));
    meta.u64(ck.world_seed);
    meta.u64(ck.step);
    meta.str(ck.rng_state);
    meta.f64(ck.optimizer.learning_rate);
    meta.f64(ck.optimizer.beta1);
    meta.f64(ck.optimizer.beta2);
    meta.f64(ck.optimizer.epsilon);
    meta.f64(ck.optimizer.weight_decay);
    meta.u64(ck.optimizer.step);

    ByteWriter conf;
    conf.str(ck.config_json);

    ByteWriter tens;
    tens.u32(static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        tens.str(name);
        tens.u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) tens.u64(d);
        tens.f64s(t.data());
    }

    ByteWriter optm;
    const bool has_moments = !ck.optimizer.first_moment.empty();
    optm.u32(static_cast<std::uint32_t>(ck.trainable.size()));
    optm.u8(has_moments ? 1 : 0);
    for (std::size_t i = 0; i < ck.trainable.size(); ++i) {
        optm.str(ck.trainable[i]);
        const Tensor* t = find_tensor(ck.tensors, ck.trainable[i]);
        if (!t) throw ContractError("checkpoint: trainable '" + ck.trainable[i] + "' has no tensor");
        if (has_moments) {
            if (ck.optimizer.first_moment.size() != ck.trainable.size() ||
                ck.optimizer.second_moment.size() != ck.trainable.size())
                throw ContractError("checkpoint: optimizer moments do not match the trainable list");
            optm.f64s(flatten_moment(ck.optimizer.first_moment, i, t->numel()));
            optm.f64s(flatten_moment(ck.optimizer.second_moment, i, t->numel()));
        }
    }

    ByteWriter out;
    out.bytes(kMagic.data(), kMagic.size());
    out.u32(ck.version);
    out.u32(4);
    put_section(out, "META", meta);
    put_section(out, "CONF", conf);
    put_section(out, "TENS", tens);
    put_section(out, "OPTM", optm);
    return std::move(out.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes);
    try {
        auto magic = in.bytes(kMagic.size());
        if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0) throw IoError("not a checkpoint file (bad magic)");
    } catch (const IoError&) {
        throw IoError("not a checkpoint file (bad magic)");
    }
    Checkpoint ck;
    try {
        ck.version = in.u32();
        if (ck.version != kCheckpointVersion)
            throw CompatibilityError("checkpoint version " + std::to_string(ck.version) + " is not supported (expected " +
                                     std::to_string(kCheckpointVersion) + ")");
        const auto n_sections = in.u32();
        std::vector<std::pair<std::string, std::span<const std::uint8_t>>> sections;
        for (std::uint32_t s = 0; s < n_sections; ++s) {
            auto tag = in.bytes(4);
            const auto len = in.u64();
            if (len > in.remaining()) throw IoError("checkpoint truncated: checksum section incomplete");
            auto payload = in.bytes(static_cast<std::size_t>(len));
            if (in.u64() != fnv1a64(payload)) throw IoError("checkpoint checksum mismatch");
            sections.emplace_back(std::string(tag.begin(), tag.end()), payload);
        }
        if (in.remaining() != 0) throw IoError("checkpoint has trailing bytes");
        auto section = [&](const std::string& tag) {
            for (auto& [t, p] : sections)
                if (t == tag) return p;
            throw IoError("checkpoint missing section " + tag);
        };

        ByteReader meta(section("META"));
        ck.kind = static_cast<CheckpointKind>(meta.u32());
        if (ck.kind != CheckpointKind::Pretrain && ck.kind != CheckpointKind::Diffusion)
            throw IoError("checkpoint has an unknown kind");
        ck.world_seed = meta.u64();
        ck.step = meta.u64();
        ck.rng_state = meta.str();
        ck.optimizer.learning_rate = meta.f64();
        ck.optimizer.beta1 = meta.f64();
        ck.optimizer.beta2 = meta.f64();
        ck.optimizer.epsilon = meta.f64();
        ck.optimizer.weight_decay = meta.f64();
        ck.optimizer.step = meta.u64();

        ByteReader conf(section("CONF"));
        ck.config_json = conf.str();

        ByteReader tens(section("TENS"));
        const auto n_tensors = tens.u32();
        for (std::uint32_t i = 0; i < n_tensors; ++i) {
            auto name = tens.str();
            const auto rank = tens.u32();
            Shape shape(rank);
            for (auto& d : shape) d = static_cast<std::size_t>(tens.u64());
            const auto n = shape_numel(shape);
            if (n * 8 > tens.remaining()) throw IoError("checkpoint tensor '" + name + "' overruns its section");
            ck.tensors.push_back({std::move(name), Tensor(std::move(shape), tens.f64s(n))});
        }

        ByteReader optm(section("OPTM"));
        const auto n_train = optm.u32();
        const bool has_moments = optm.u8() != 0;
        for (std::uint32_t i = 0; i < n_train; ++i) {
            auto name = optm.str();
            const Tensor* t = find_tensor(ck.tensors, name);
            if (!t) throw IoError("checkpoint trainable '" + name + "' has no tensor");
            if (has_moments) {
                ck.optimizer.first_moment.push_back(optm.f64s(t->numel()));
                ck.optimizer.second_moment.push_back(optm.f64s(t->numel()));
            }
            ck.trainable.push_back(std::move(name));
        }
    } catch (const DimensionError& e) {
        throw IoError(std::string("checkpoint corrupt: ") + e.what());
    }
    return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    write_file_bytes(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

const Tensor* find_tensor(const ParamList& list, const std::string& name) {
    for (const auto& nt : list)
        if (nt.name == name) return &nt.tensor;
    return nullptr;
}

void copy_parameters(ParamList& dst, const ParamList& src) {
    for (auto& [name, t] : dst) {
        const Tensor* s = find_tensor(src, name);
        if (!s) throw CompatibilityError("checkpoint lacks tensor '" + name + "'");
        if (s->shape() != t.shape())
            throw CompatibilityError("tensor '" + name + "' has shape " + shape_str(s->shape()) + ", model expects " +
                                     shape_str(t.shape()));
        auto out = t.mutable_data();
        std::copy(s->data().begin(), s->data().end(), out.begin());
    }
}

}  // namespace fuseclip
