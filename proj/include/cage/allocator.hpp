#pragma once

#include "cage/runtime.hpp"

namespace cage {

// Runtime-hosted free-list heap for guest memory, exposed to guests as
// env.malloc / env.free / env.realloc.
//
// Block layout (guest-relative, everything 16-byte aligned):
//   [header granule][payload capacity bytes]
// The header granule is never tagged, so adjacent payloads are always
// separated by an ambient granule and a stray payload-tagged pointer can
// never reach allocator metadata. Header words:
//   word0 = capacity | state  (capacity is a multiple of 16; state in low bits)
//   word1 = tagged payload length when live, next free header when free
namespace heap {

inline constexpr uint64_t kStateLive = 1;
inline constexpr uint64_t kStateFree = 2;
inline constexpr uint64_t kStateMask = 0xF;

struct Header {
    uint64_t capacity;
    uint64_t state;
    uint64_t word1;
};

inline uint64_t abs_addr(const Instance& inst, uint64_t rel) { return inst.mem_base + rel; }

inline Header read_header(const Runtime& rt, const Instance& inst, uint64_t hdr_rel) {
    Header h;
    uint64_t w0 = rt.store.load_le(abs_addr(inst, hdr_rel), 8);
    h.capacity = w0 & ~kStateMask;
    h.state = w0 & kStateMask;
    h.word1 = rt.store.load_le(abs_addr(inst, hdr_rel) + 8, 8);
    return h;
}

inline void write_header(Runtime& rt, const Instance& inst, uint64_t hdr_rel, uint64_t capacity,
                         uint64_t state, uint64_t word1) {
    rt.store.store_le(abs_addr(inst, hdr_rel), capacity | state, 8);
    rt.store.store_le(abs_addr(inst, hdr_rel) + 8, word1, 8);
}

// A header is trustworthy only if it sits inside the heap, is aligned, and
// its capacity stays inside the heap. Guests can scribble over headers with
// untagged pointers; a failed check must never break the host.
inline bool header_sane(const Instance& inst, uint64_t hdr_rel, const Header& h) {
    if (hdr_rel < inst.heap_base || hdr_rel % kGranuleBytes != 0) return false;
    if (hdr_rel + kGranuleBytes > inst.heap_end) return false;
    if (h.capacity % kGranuleBytes != 0) return false;
    if (hdr_rel + kGranuleBytes + h.capacity > inst.heap_end) return false;
    return true;
}

inline void init_heap(Runtime& rt, Instance& inst) {
    uint64_t len = inst.heap_end - inst.heap_base;
    if (len < 2 * kGranuleBytes) {
        inst.free_head = 0;
        return;
    }
    write_header(rt, inst, inst.heap_base, len - kGranuleBytes, kStateFree, 0);
    inst.free_head = inst.heap_base;
}

inline uint8_t expected_tag(const Runtime& rt, const Instance& inst, uint64_t p) {
    return uint8_t(pointer_tag(mask_index(p, rt.mode())) | inst.base_tag);
}

// Checks that every granule of [rel, rel+len) carries `tag`; counts one tag
// check. Returns false on mismatch.
inline bool check_region_tag(Runtime& rt, const Instance& inst, uint64_t rel, uint64_t len,
                             uint8_t tag) {
    rt.stats.tag_checks++;
    if (len == 0) return true;
    uint64_t first = abs_addr(inst, rel) / kGranuleBytes;
    uint64_t last = (abs_addr(inst, rel) + len - 1) / kGranuleBytes;
    for (uint64_t g = first; g <= last; ++g)
        if (rt.store.granule_tag(g) != tag) {
            rt.stats.tag_check_failures++;
            return false;
        }
    return true;
}

inline uint64_t malloc_(Runtime& rt, Instance& inst, uint64_t size) {
    if (inst.free_head == 0) return 0;
    if (size > inst.heap_end - inst.heap_base) return 0;
    uint64_t want = round_up_granule(size == 0 ? 1 : size);

    uint64_t prev = 0;
    uint64_t cur = inst.free_head;
    while (cur != 0) {
        Header h = read_header(rt, inst, cur);
        if (!header_sane(inst, cur, h) || h.state != kStateFree)
            return 0;  // corrupted list: stop scanning
        if (h.capacity >= want) {
            uint64_t next = h.word1;
            if (h.capacity - want >= 2 * kGranuleBytes) {
                // Split: the tail keeps a header of its own.
                uint64_t tail = cur + kGranuleBytes + want;
                write_header(rt, inst, tail, h.capacity - want - kGranuleBytes, kStateFree, next);
                next = tail;
                h.capacity = want;
            }
            if (prev == 0)
                inst.free_head = next;
            else
                rt.store.store_le(abs_addr(inst, prev) + 8, next, 8);
            write_header(rt, inst, cur, h.capacity, kStateLive, want);

            uint64_t payload = cur + kGranuleBytes;
            rt.store.zero(abs_addr(inst, payload), want);
            if (rt.mode().internal) {
                uint8_t tag = rt.pool.draw(rt.rng);
                rt.store.granule_tags_set(abs_addr(inst, payload), want, tag);
                return payload | (uint64_t(tag) << kTagShift);
            }
            return payload;
        }
        prev = cur;
        cur = h.word1;
    }
    return 0;
}

// Locates a live block for p. Returns the header address or 0; internal
// modes trap on misuse, other modes treat it as a silent no-op.
inline uint64_t live_block_or_misuse(Runtime& rt, const Instance& inst, uint64_t p) {
    uint64_t rel = mask_index(p, rt.mode()) & kIndexMask;
    if (rel % kGranuleBytes != 0 || rel < inst.heap_base + kGranuleBytes || rel >= inst.heap_end)
        return 0;
    uint64_t hdr = rel - kGranuleBytes;
    Header h = read_header(rt, inst, hdr);
    if (!header_sane(inst, hdr, h) || h.state != kStateLive || h.word1 > h.capacity)
        return 0;
    return hdr;
}

[[noreturn]] inline void misuse_trap(uint64_t addr) {
    Trap t{TrapKind::TagMismatch};
    t.address = addr;
    t.has_address = true;
    throw t;
}

inline void insert_free(Runtime& rt, Instance& inst, uint64_t hdr, uint64_t capacity) {
    // Address-ordered insert with forward/backward coalescing.
    uint64_t prev = 0;
    uint64_t cur = inst.free_head;
    while (cur != 0 && cur < hdr) {
        Header h = read_header(rt, inst, cur);
        if (!header_sane(inst, cur, h) || h.state != kStateFree) {
            // Corrupted list: fall back to a head insert without coalescing.
            write_header(rt, inst, hdr, capacity, kStateFree, inst.free_head);
            inst.free_head = hdr;
            return;
        }
        prev = cur;
        cur = h.word1;
    }
    uint64_t next = cur;
    write_header(rt, inst, hdr, capacity, kStateFree, next);
    if (prev == 0)
        inst.free_head = hdr;
    else
        rt.store.store_le(abs_addr(inst, prev) + 8, hdr, 8);

    // Merge with the following block.
    if (next != 0 && hdr + kGranuleBytes + capacity == next) {
        Header hn = read_header(rt, inst, next);
        if (header_sane(inst, next, hn) && hn.state == kStateFree) {
            capacity += kGranuleBytes + hn.capacity;
            write_header(rt, inst, hdr, capacity, kStateFree, hn.word1);
        }
    }
    // Merge into the preceding block.
    if (prev != 0) {
        Header hp = read_header(rt, inst, prev);
        if (header_sane(inst, prev, hp) && hp.state == kStateFree &&
            prev + kGranuleBytes + hp.capacity == hdr) {
            Header self = read_header(rt, inst, hdr);
            write_header(rt, inst, prev, hp.capacity + kGranuleBytes + self.capacity, kStateFree,
                         self.word1);
        }
    }
}

inline void free_(Runtime& rt, Instance& inst, uint64_t p) {
    if (p == 0) return;
    bool internal = rt.mode().internal;
    uint64_t hdr = live_block_or_misuse(rt, inst, p);
    if (hdr == 0) {
        if (internal) misuse_trap(mask_index(p, rt.mode()) & kIndexMask);
        return;
    }
    Header h = read_header(rt, inst, hdr);
    uint64_t payload = hdr + kGranuleBytes;
    if (internal) {
        // segment.free semantics over the tagged payload: every granule must
        // still carry the pointer's tag, then the region moves to the cycle
        // successor so stale pointers keep trapping until reuse.
        uint8_t expect = expected_tag(rt, inst, p);
        if (!check_region_tag(rt, inst, payload, h.word1, expect))
            misuse_trap(abs_addr(inst, payload));
        rt.store.granule_tags_set(abs_addr(inst, payload), h.word1, rt.pool.next_cycle(expect));
    }
    insert_free(rt, inst, hdr, h.capacity);
}

inline uint64_t realloc_(Runtime& rt, Instance& inst, uint64_t p, uint64_t new_size) {
    if (p == 0) return malloc_(rt, inst, new_size);
    if (new_size == 0) {
        free_(rt, inst, p);
        return 0;
    }
    bool internal = rt.mode().internal;
    uint64_t hdr = live_block_or_misuse(rt, inst, p);
    if (hdr == 0) {
        if (internal) misuse_trap(mask_index(p, rt.mode()) & kIndexMask);
        return 0;
    }
    Header h = read_header(rt, inst, hdr);
    uint64_t old_payload = hdr + kGranuleBytes;
    // The copy reads through the old tagged pointer: verify before drawing
    // a tag for the new block, so a stale pointer traps without side effects.
    if (internal && !check_region_tag(rt, inst, old_payload, h.word1, expected_tag(rt, inst, p)))
        misuse_trap(abs_addr(inst, old_payload));

    uint64_t q = malloc_(rt, inst, new_size);
    if (q == 0) return 0;
    uint64_t new_payload = mask_index(q, rt.mode()) & kIndexMask;
    uint64_t n = std::min(h.word1, new_size);
    for (uint64_t i = 0; i < n; ++i)
        rt.store.store_le(abs_addr(inst, new_payload) + i,
                          rt.store.load_le(abs_addr(inst, old_payload) + i, 1), 1);
    free_(rt, inst, p);
    return q;
}

}  // namespace heap
}  // namespace cage
