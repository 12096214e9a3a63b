#include "selfevolve/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "selfevolve/errors.hpp"

namespace selfevolve {

namespace {

constexpr std::array<std::uint8_t, 8> kMagic = {'S', 'E', 'L', 'F', 'E', 'V', 'O', '\0'};

}  // namespace

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::f64s(std::span<const double> v) {
    for (double x : v) f64(x);
}

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CorruptCheckpoint("checkpoint is truncated");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
}

std::uint8_t ByteReader::u8() { return take(1)[0]; }

std::uint32_t ByteReader::u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

std::uint64_t ByteReader::u64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::vector<double> ByteReader::f64s(std::size_t n) {
    if ((bytes_.size() - pos_) / 8 < n) throw CorruptCheckpoint("checkpoint is truncated");
    std::vector<double> out(n);
    for (double& x : out) x = f64();
    return out;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

ByteWriter begin_frame(CheckpointKind kind) {
    ByteWriter w;
    for (std::uint8_t b : kMagic) w.u8(b);
    w.u32(kCheckpointFormatVersion);
    w.u32(static_cast<std::uint32_t>(kind));
    return w;
}

std::vector<std::uint8_t> end_frame(ByteWriter&& w) {
    const std::uint64_t h = fnv1a(w.bytes());
    w.u64(h);
    return std::move(w.bytes());
}

ByteReader open_frame(std::span<const std::uint8_t> bytes, CheckpointKind kind) {
    if (bytes.size() < kMagic.size() + 16) throw CorruptCheckpoint("checkpoint is truncated");
    if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw CorruptCheckpoint("not a checkpoint (bad magic)");
    const auto body = bytes.first(bytes.size() - 8);
    ByteReader tail(bytes.last(8));
    if (fnv1a(body) != tail.u64()) throw CorruptCheckpoint("checkpoint hash mismatch (truncated or corrupted)");
    ByteReader r(body.subspan(kMagic.size()));
    const std::uint32_t version = r.u32();
    if (version != kCheckpointFormatVersion) {
        throw CorruptCheckpoint("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t k = r.u32();
    if (k != static_cast<std::uint32_t>(kind)) {
        throw CorruptCheckpoint("checkpoint kind " + std::to_string(k) + " where " +
                                std::to_string(static_cast<std::uint32_t>(kind)) + " was expected");
    }
    return r;
}

void expect_end(const ByteReader& r) {
    if (!r.at_end()) throw CorruptCheckpoint("trailing bytes after checkpoint payload");
}

std::vector<std::uint8_t> save_checkpoint(const Checkpoint& ckpt) {
    ByteWriter w = begin_frame(CheckpointKind::Policy);
    w.u64(ckpt.iteration);
    w.u64(ckpt.rng_state);
    const PolicyFeatureSpec& s = ckpt.params.spec;
    w.u32(static_cast<std::uint32_t>(s.hop_slots));
    w.u32(static_cast<std::uint32_t>(s.max_steps));
    w.f64(s.misread_rate);
    w.f64(s.blur_rate);
    w.u64(s.perception_seed);
    w.u64(ckpt.params.weights.size());
    w.f64s(ckpt.params.weights);
    w.u8(ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
        w.u64(ckpt.optimizer->step_count);
        w.f64s(ckpt.optimizer->first_moments);
        w.f64s(ckpt.optimizer->second_moments);
    }
    w.u8(ckpt.schedule ? 1 : 0);
    if (ckpt.schedule) {
        w.f64(ckpt.schedule->base_lr);
        w.f64(ckpt.schedule->warmup_ratio);
        w.u64(ckpt.schedule->total_steps);
        w.u64(ckpt.schedule->position);
    }
    return end_frame(std::move(w));
}

Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader r = open_frame(bytes, CheckpointKind::Policy);
    Checkpoint c;
    c.iteration = r.u64();
    c.rng_state = r.u64();
    c.params.spec.hop_slots = static_cast<int>(r.u32());
    c.params.spec.max_steps = static_cast<int>(r.u32());
    c.params.spec.misread_rate = r.f64();
    c.params.spec.blur_rate = r.f64();
    c.params.spec.perception_seed = r.u64();
    const std::uint64_t n = r.u64();
    if (n != c.params.spec.dimension()) throw CorruptCheckpoint("weight count disagrees with the feature map");
    c.params.weights = r.f64s(n);
    if (r.u8() != 0) {
        OptimizerState o;
        o.step_count = r.u64();
        o.first_moments = r.f64s(n);
        o.second_moments = r.f64s(n);
        c.optimizer = std::move(o);
    } else {
        c.optimizer = OptimizerState::zeros(n);
    }
    if (r.u8() != 0) {
        LrSchedule s;
        s.base_lr = r.f64();
        s.warmup_ratio = r.f64();
        s.total_steps = r.u64();
        s.position = r.u64();
        c.schedule = s;
    }
    expect_end(r);
    return c;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace selfevolve
