#pragma once

#include <cstring>
#include <optional>
#include <vector>

#include "cage/common.hpp"

namespace cage {

// Feature combination a runtime executes under.
struct Mode {
    bool internal = false;  // tag-based memory safety inside a guest
    bool external = false;  // tag-based sandboxing between guests and runtime
    bool ptr_auth = false;  // pointer signing/authentication

    bool baseline() const { return !internal && !external && !ptr_auth; }
    bool combined() const { return internal && external; }
    bool tagged() const { return internal || external; }

    bool operator==(const Mode&) const = default;
};

// --- Tagged pointer codec -------------------------------------------------
//
// 64-bit layout (Linux aarch64, user space): bits 0-47 address, bit 48 zero,
// bits 49-54 signature low half, bit 55 zero, bits 56-59 allocation tag,
// bits 60-63 signature high half.

inline uint64_t pointer_address(uint64_t p) { return p & kAddrMask; }

inline uint8_t pointer_tag(uint64_t p) { return uint8_t((p >> kTagShift) & 0xF); }

inline uint64_t with_pointer_tag(uint64_t p, uint8_t tag) {
    return (p & ~kTagFieldMask) | (uint64_t(tag & 0xF) << kTagShift);
}

inline uint64_t encode_pointer(uint64_t address, uint8_t tag) {
    if (address > kAddrMask)
        throw ConfigError("address exceeds 48 bits");
    return address | (uint64_t(tag & 0xF) << kTagShift);
}

inline uint16_t pac_extract(uint64_t p) {
    return uint16_t(((p >> 49) & 0x3F) | (((p >> 60) & 0xF) << 6));
}

inline uint64_t pac_insert(uint64_t p, uint16_t sig) {
    p &= ~kPacFieldMask;
    p |= (uint64_t(sig) & 0x3F) << 49;
    p |= (uint64_t(sig >> 6) & 0xF) << 60;
    return p;
}

inline uint64_t pac_strip(uint64_t p) { return p & ~kPacFieldMask; }

// Clears the tag bits a guest must not control before the index enters
// address computation: bits 56-59 with sandboxing alone, bit 56 when the
// internal extension shares the tag space, identity otherwise.
inline uint64_t mask_index(uint64_t idx, const Mode& mode) {
    if (mode.external && !mode.internal)
        return idx & ~kTagFieldMask;
    if (mode.external && mode.internal)
        return idx & ~(1ull << kTagShift);
    return idx;
}

// --- Tag store ------------------------------------------------------------

// The flat byte arena plus one 4-bit allocation tag per 16-byte granule.
class TagStore {
public:
    enum class SetError { Unaligned, OutOfBounds };
    struct GetError {
        bool out_of_bounds = false;  // otherwise: heterogeneous tags
    };

    explicit TagStore(uint64_t arena_bytes) {
        if (arena_bytes == 0 || arena_bytes % kGranuleBytes != 0)
            throw ConfigError("arena size must be a nonzero multiple of 16");
        arena_.resize(arena_bytes, 0);
        tags_.resize(arena_bytes / kGranuleBytes, 0);
    }

    uint64_t size() const { return arena_.size(); }
    uint64_t granules() const { return tags_.size(); }
    // Logical 4-bit-per-granule accounting, independent of emulation overhead.
    uint64_t tag_storage_bytes() const { return arena_.size() / 32; }

    uint8_t granule_tag(uint64_t granule) const { return tags_[granule]; }

    // Single tag covering every granule intersecting [addr, addr+len), or an
    // error when the range leaves the arena / the tags differ.
    std::optional<uint8_t> granule_tags_get(uint64_t addr, uint64_t len, GetError* err = nullptr) const {
        if (len == 0 || addr + len > arena_.size() || addr + len < addr) {
            if (err) err->out_of_bounds = true;
            return std::nullopt;
        }
        uint64_t first = addr / kGranuleBytes;
        uint64_t last = (addr + len - 1) / kGranuleBytes;
        uint8_t tag = tags_[first];
        for (uint64_t g = first + 1; g <= last; ++g) {
            if (tags_[g] != tag) {
                if (err) err->out_of_bounds = false;
                return std::nullopt;
            }
        }
        return tag;
    }

    std::optional<SetError> granule_tags_set(uint64_t addr, uint64_t len, uint8_t tag) {
        if (addr % kGranuleBytes != 0 || len % kGranuleBytes != 0)
            return SetError::Unaligned;
        if (addr + len > arena_.size() || addr + len < addr)
            return SetError::OutOfBounds;
        for (uint64_t g = addr / kGranuleBytes; g < (addr + len) / kGranuleBytes; ++g)
            tags_[g] = tag & 0xF;
        return std::nullopt;
    }

    // Raw byte access. Callers have already performed bounds/tag checks.
    uint8_t* data() { return arena_.data(); }
    const uint8_t* data() const { return arena_.data(); }

    uint64_t load_le(uint64_t addr, unsigned width) const {
        uint64_t v = 0;
        std::memcpy(&v, arena_.data() + addr, width);
        return v;
    }

    void store_le(uint64_t addr, uint64_t value, unsigned width) {
        std::memcpy(arena_.data() + addr, &value, width);
    }

    void zero(uint64_t addr, uint64_t len) { std::memset(arena_.data() + addr, 0, len); }

    const std::vector<uint8_t>& tag_map() const { return tags_; }

    bool operator==(const TagStore& o) const { return arena_ == o.arena_ && tags_ == o.tags_; }

private:
    std::vector<uint8_t> arena_;
    std::vector<uint8_t> tags_;  // one byte per granule, values 0-15
};

// --- Tag pool -------------------------------------------------------------

// The set of allocation tags guests may receive, the ambient tag of
// un-instrumented memory, and the deterministic draw stream.
class TagPool {
public:
    // internal only: draws from {1..15}, ambient 0.
    // combined with sandboxing: draws from {9..15}, ambient 8 (sandbox bit set).
    static TagPool for_mode(const Mode& mode) {
        TagPool p;
        if (mode.combined()) {
            p.ambient_ = 8;
            for (uint8_t t = 9; t <= 15; ++t) p.allowed_.push_back(t);
        } else {
            p.ambient_ = 0;
            for (uint8_t t = 1; t <= 15; ++t) p.allowed_.push_back(t);
        }
        return p;
    }

    uint8_t ambient() const { return ambient_; }
    const std::vector<uint8_t>& allowed() const { return allowed_; }

    uint8_t draw(SplitMix64& rng) const {
        return allowed_[size_t(rng.next_below(allowed_.size()))];
    }

    // Deterministic successor within the allowed list; the ambient tag maps
    // to the first allowed tag. Guarantees next_cycle(t) != t.
    uint8_t next_cycle(uint8_t tag) const {
        for (size_t i = 0; i < allowed_.size(); ++i)
            if (allowed_[i] == tag)
                return allowed_[(i + 1) % allowed_.size()];
        return allowed_.front();
    }

    uint64_t new_tag(SplitMix64& rng, uint64_t p) const {
        return with_pointer_tag(p, draw(rng));
    }

    uint64_t free_tag(uint64_t p) const {
        return with_pointer_tag(p, next_cycle(pointer_tag(p)));
    }

private:
    uint8_t ambient_ = 0;
    std::vector<uint8_t> allowed_;
};

}  // namespace cage
