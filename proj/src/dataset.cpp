#include "fuseclip/dataset.hpp"

#include <array>
#include <cstring>

#include "fuseclip/binio.hpp"
#include "fuseclip/errors.hpp"
#include "fuseclip/rng.hpp"

namespace fuseclip {

namespace {

constexpr std::array<char, 16> kMagic{'F', 'U', 'S', 'E', 'C', 'L', 'I', 'P', '-', 'D', 'S', 0, 0, 0, 0, 0};
constexpr std::uint16_t kAnonymous = 0xFFFF;

DatasetHeader header_for(const World& world, DatasetKind kind, std::uint64_t seed) {
    const auto& c = world.config();
    DatasetHeader h;
    h.kind = kind;
    h.d_x = static_cast<std::uint32_t>(c.d_x);
    h.d_face = static_cast<std::uint32_t>(c.d_face);
    h.caption_len = static_cast<std::uint32_t>(c.caption_len);
    h.n_slots = static_cast<std::uint32_t>(c.n_slots());
    h.world_seed = c.seed;
    h.generation_seed = seed;
    return h;
}

}  // namespace

bool Dataset::operator==(const Dataset& o) const {
    if (!(header == o.header) || size() != o.size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
        const auto &a = samples[i], &b = o.samples[i];
        if (a.x0 != b.x0 || a.caption != b.caption || a.reference != b.reference) return false;
        if (truth[i].identity != o.truth[i].identity || truth[i].slots != o.truth[i].slots) return false;
    }
    return true;
}

Dataset generate_main_dataset(const World& world, std::size_t n_samples, std::uint64_t seed) {
    if (n_samples == 0) throw ConfigError("main dataset needs at least one sample");
    const auto& c = world.config();
    Dataset ds;
    ds.header = header_for(world, DatasetKind::Main, seed);
    ds.samples.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        Rng rng(derive_seed(seed, i));
        const auto& id = world.identity(rng.uniform_index(world.n_identities()));
        std::vector<std::size_t> slots(c.n_slots());
        slots[0] = rng.uniform_index(c.main_slot0_values);
        for (std::size_t k = 1; k < slots.size(); ++k) slots[k] = rng.uniform_index(c.vocab_sizes[k]);
        auto attr = world.attribute(slots);
        const auto image_seed = rng.next_u64();
        const auto ref_seed = rng.next_u64();
        ds.samples.push_back({render_image(world, id, attr, image_seed), caption_of(world, attr),
                              render_reference(world, id, ref_seed)});
        ds.truth.push_back({id.id_index, std::move(slots)});
    }
    return ds;
}

Dataset generate_guided_dataset(const World& world, std::size_t n_samples, std::uint64_t seed) {
    if (n_samples == 0) throw ConfigError("guided dataset needs at least one sample");
    const auto& c = world.config();
    Dataset ds;
    ds.header = header_for(world, DatasetKind::Guided, seed);
    ds.samples.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        Rng rng(derive_seed(seed, i));
        auto id = random_anonymous_identity(world, rng.next_u64());
        std::vector<std::size_t> slots(c.n_slots());
        for (std::size_t k = 0; k < slots.size(); ++k) slots[k] = rng.uniform_index(c.vocab_sizes[k]);
        auto attr = world.attribute(slots);
        const auto image_seed = rng.next_u64();
        ds.samples.push_back(
            {render_image(world, id, attr, image_seed), caption_of(world, attr), std::vector<double>(c.d_face, 0.0)});
        ds.truth.push_back({-1, std::move(slots)});
    }
    return ds;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
    const auto& h = ds.header;
    ByteWriter w;
    w.bytes(kMagic.data(), kMagic.size());
    w.u32(h.version);
    w.u32(static_cast<std::uint32_t>(h.kind));
    w.u32(h.d_x);
    w.u32(h.d_face);
    w.u32(h.caption_len);
    w.u32(h.n_slots);
    w.u64(h.world_seed);
    w.u64(h.generation_seed);
    w.u64(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& s = ds.samples[i];
        const auto& t = ds.truth[i];
        if (s.x0.size() != h.d_x || s.reference.size() != h.d_face || s.caption.size() != h.caption_len ||
            t.slots.size() != h.n_slots)
            throw ContractError("dataset record " + std::to_string(i) + " does not match header dims");
        w.f64s(s.x0);
        w.f64s(s.reference);
        for (auto tok : s.caption) w.u16(tok);
        w.u16(t.identity < 0 ? kAnonymous : static_cast<std::uint16_t>(t.identity));
        for (auto v : t.slots) w.u16(static_cast<std::uint16_t>(v));
    }
    return std::move(w.buffer());
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    auto magic = r.bytes(kMagic.size());
    if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0) throw IoError("not a dataset file (bad magic)");
    Dataset ds;
    auto& h = ds.header;
    h.version = r.u32();
    if (h.version != kDatasetVersion) throw CompatibilityError("unsupported dataset version " + std::to_string(h.version));
    const auto kind = r.u32();
    if (kind > 1) throw IoError("unknown dataset kind");
    h.kind = static_cast<DatasetKind>(kind);
    h.d_x = r.u32();
    h.d_face = r.u32();
    h.caption_len = r.u32();
    h.n_slots = r.u32();
    h.world_seed = r.u64();
    h.generation_seed = r.u64();
    const auto count = r.u64();
    const std::size_t record_bytes = 8ull * (h.d_x + h.d_face) + 2ull * (h.caption_len + 1 + h.n_slots);
    if (count == 0 || r.remaining() != count * record_bytes)
        throw IoError("dataset size does not match its header (truncated or corrupt)");
    ds.samples.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        TrainingSample s;
        s.x0 = r.f64s(h.d_x);
        s.reference = r.f64s(h.d_face);
        s.caption.resize(h.caption_len);
        for (auto& tok : s.caption) tok = r.u16();
        GroundTruth t;
        const auto id = r.u16();
        t.identity = id == kAnonymous ? -1 : static_cast<int>(id);
        t.slots.resize(h.n_slots);
        for (auto& v : t.slots) v = r.u16();
        ds.samples.push_back(std::move(s));
        ds.truth.push_back(std::move(t));
    }
    return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) { write_file_bytes(path, encode_dataset(ds)); }

Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file_bytes(path)); }

void check_dataset_matches(const Dataset& ds, const World& world) {
    const auto& c = world.config();
    const auto& h = ds.header;
    if (h.d_x != c.d_x || h.d_face != c.d_face || h.caption_len != c.caption_len || h.n_slots != c.n_slots() ||
        h.world_seed != c.seed)
        throw CompatibilityError("dataset was generated for a different world");
}

}  // namespace fuseclip
