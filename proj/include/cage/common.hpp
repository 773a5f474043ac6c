#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cage {

// 16-byte granules, one 4-bit allocation tag each.
inline constexpr uint64_t kGranuleBytes = 16;
inline constexpr unsigned kTagShift = 56;
inline constexpr uint64_t kTagFieldMask = 0xFull << kTagShift;     // bits 56-59
inline constexpr uint64_t kAddrMask = (1ull << 48) - 1;            // bits 0-47
inline constexpr uint64_t kIndexMask = (1ull << 56) - 1;           // bits 0-55
inline constexpr uint64_t kKernelBit = 1ull << 55;
// Signature field: bits 63-60 hold the high 4 bits, bits 54-49 the low 6.
inline constexpr uint64_t kPacLowMask = 0x3Full << 49;
inline constexpr uint64_t kPacHighMask = 0xFull << 60;
inline constexpr uint64_t kPacFieldMask = kPacLowMask | kPacHighMask;
inline constexpr unsigned kPacBits = 10;

inline constexpr uint64_t kPageBytes = 64 * 1024;

enum class TrapKind {
    TagMismatch,
    Unaligned,
    OutOfBounds,
    AuthFailure,
    IndirectTypeMismatch,
    TableOutOfBounds,
    Unreachable,
    StackOverflow,
};

inline const char* to_string(TrapKind k) {
    switch (k) {
    case TrapKind::TagMismatch: return "TagMismatch";
    case TrapKind::Unaligned: return "Unaligned";
    case TrapKind::OutOfBounds: return "OutOfBounds";
    case TrapKind::AuthFailure: return "AuthFailure";
    case TrapKind::IndirectTypeMismatch: return "IndirectTypeMismatch";
    case TrapKind::TableOutOfBounds: return "TableOutOfBounds";
    case TrapKind::Unreachable: return "Unreachable";
    case TrapKind::StackOverflow: return "StackOverflow";
    }
    return "?";
}

// Abnormal, state-preserving termination of an invocation. The faulting
// location is filled in by the engine that observes the trap.
struct Trap {
    TrapKind kind;
    std::string function;
    size_t instruction_index = 0;
    uint64_t address = 0;
    bool has_address = false;

    std::string describe() const {
        std::string s = "trap: ";
        s += to_string(kind);
        s += " at $" + function + ":" + std::to_string(instruction_index);
        return s;
    }
};

struct ParseError : std::runtime_error {
    size_t line, column;
    ParseError(size_t line, size_t column, const std::string& msg)
        : std::runtime_error(std::to_string(line) + ":" + std::to_string(column) + ": " + msg),
          line(line), column(column) {}
};

struct ValidationError : std::runtime_error {
    std::string function;
    size_t instruction_index;
    bool feature_gated;  // instruction outside the enabled feature set
    ValidationError(std::string func, size_t index, const std::string& msg, bool gated = false)
        : std::runtime_error(func.empty() ? msg
                                          : "$" + func + ":" + std::to_string(index) + ": " + msg),
          function(std::move(func)), instruction_index(index), feature_gated(gated) {}
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse (wrong export name, wrong argument count): not a guest trap.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InternalError : std::logic_error {
    using std::logic_error::logic_error;
};

// Deterministic 64-bit generator (SplitMix64). Drawing through a fixed,
// self-contained generator keeps tag draws and keys bit-identical across
// runs and across the two execution engines.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed = 0) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // n must be nonzero. Modulo bias is negligible for the pool sizes used.
    uint64_t next_below(uint64_t n) { return next() % n; }

private:
    uint64_t state_;
};

inline uint64_t round_up_granule(uint64_t n) {
    return (n + kGranuleBytes - 1) & ~(kGranuleBytes - 1);
}

}  // namespace cage
