#pragma once

#include "cage/common.hpp"
#include "cage/tag_memory.hpp"

namespace cage {

// Runtime-wide signing key. Drawn from the seeded runtime generator at
// runtime creation and never reachable from guest code.
struct SigningKey {
    uint64_t k0 = 0;
    uint64_t k1 = 0;

    static SigningKey draw(SplitMix64& rng) {
        SigningKey k;
        k.k0 = rng.next();
        k.k1 = rng.next();
        return k;
    }
};

// Per-instance salt mixed into every signature so signed pointers are
// instance-bound.
using Modifier = uint64_t;

namespace pac {

inline uint64_t mix(uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
}

// Keyed 10-bit signature over the full 64-bit payload. A fixed finalizer
// chain stands in for a hardware cipher; it is deliberately not
// cryptographically strong, only bit-exact and key/modifier sensitive.
inline uint16_t prf(uint64_t payload, const SigningKey& key, Modifier mod) {
    uint64_t v = payload ^ key.k0;
    v = mix(v);
    v ^= mod + key.k1;
    v = mix(v);
    return uint16_t(v & ((1u << kPacBits) - 1));
}

// Replaces any existing signature; address and tag bits pass through.
inline uint64_t sign(uint64_t p, const SigningKey& key, Modifier mod) {
    uint64_t payload = pac_strip(p);
    return pac_insert(payload, prf(payload, key, mod));
}

// Returns the stripped pointer, or nothing when the signature does not
// match (the caller traps; FEAT_FPAC semantics).
inline std::optional<uint64_t> authenticate(uint64_t p, const SigningKey& key, Modifier mod) {
    uint64_t stripped = pac_strip(p);
    if (pac_extract(p) != prf(stripped, key, mod))
        return std::nullopt;
    return stripped;
}

}  // namespace pac
}  // namespace cage
