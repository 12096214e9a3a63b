#pragma once

// Versioned little-endian checkpoint format.
//
//   offset  size  field
//   0       8     magic "SELFEVO\0"
//   8       4     u32 format version (currently 1)
//   12      4     u32 kind tag (1 = policy, 2 = process reward model)
//   16      ...   kind-specific payload (see save_checkpoint / save_prm)
//   end-8   8     u64 FNV-1a hash of every preceding byte
//
// All integers are unsigned little-endian, all reals IEEE-754 binary64
// little-endian. Loading rejects a bad magic, version, kind, hash, short
// read or trailing bytes with CorruptCheckpoint.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selfevolve/policy.hpp"

namespace selfevolve {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

enum class CheckpointKind : std::uint32_t { Policy = 1, RewardModel = 2 };

class ByteWriter {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void f64s(std::span<const double> v);
    std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::vector<double> f64s(std::size_t n);
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> take(std::size_t n);
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

// Writes magic, version and kind; returns the writer for the payload.
ByteWriter begin_frame(CheckpointKind kind);
// Appends the trailing hash.
std::vector<std::uint8_t> end_frame(ByteWriter&& w);
// Validates framing and returns a reader positioned at the payload; the
// caller must consume the whole payload and then call expect_end.
ByteReader open_frame(std::span<const std::uint8_t> bytes, CheckpointKind kind);
void expect_end(const ByteReader& r);

struct Checkpoint {
    std::uint64_t iteration = 0;
    PolicyParams params;
    std::optional<OptimizerState> optimizer;
    std::optional<LrSchedule> schedule;
    std::uint64_t rng_state = 0;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// Policy payload:
//   u64 iteration, u64 rng_state,
//   u32 hop_slots, u32 max_steps, f64 misread_rate, f64 blur_rate, u64 perception_seed,
//   u64 n, f64[n] weights,
//   u8 has_optimizer [u64 step_count, f64[n] first, f64[n] second],
//   u8 has_schedule  [f64 base_lr, f64 warmup_ratio, u64 total_steps, u64 position]
std::vector<std::uint8_t> save_checkpoint(const Checkpoint& ckpt);

// A checkpoint saved without optimizer state loads with a zeroed optimizer.
Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace selfevolve
