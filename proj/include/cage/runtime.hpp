#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cage/pac.hpp"
#include "cage/tag_memory.hpp"
#include "cage/validator.hpp"

namespace cage {

struct RuntimeConfig {
    Mode mode;
    uint64_t seed = 0;
    uint64_t arena_bytes = 16ull * 1024 * 1024;
    uint64_t stack_bytes = 16 * 1024;   // shadow-stack region per instance
    uint64_t heap_bytes = ~0ull;        // cap; the heap takes the remainder of memory
    uint32_t max_call_depth = 1000;
};

// Arena offset of the first instance; everything below belongs to the
// runtime and keeps tag zero.
inline constexpr uint64_t kRuntimeRegionBytes = 64 * 1024;

struct RunStats {
    uint64_t instructions = 0;
    uint64_t tag_checks = 0;
    uint64_t tag_check_failures = 0;
    uint64_t bounds_checks = 0;  // baseline mode only
};

// Precompiled function: resolved control targets for direct dispatch.
struct ControlTargets {
    size_t end_pc = 0;
    size_t else_pc = SIZE_MAX;
};

struct CompiledFunction {
    const Function* fn = nullptr;
    const FuncType* type = nullptr;
    // Parallel to fn->body: index into `targets` for block/loop/if, else -1.
    std::vector<int32_t> ctrl;
    std::vector<ControlTargets> targets;
};

struct Instance {
    size_t index = 0;
    std::shared_ptr<const ValidatedModule> module;
    std::vector<CompiledFunction> functions;

    uint64_t mem_base = 0;  // arena offset of this instance's linear memory
    uint64_t mem_len = 0;
    uint8_t base_tag = 0;   // granule tag applied at instantiation
    Modifier modifier = 0;

    std::vector<uint64_t> globals;
    uint64_t sp = 0;         // $__sp, guest-relative
    uint64_t stack_top = 0;  // initial $__sp
    uint64_t ambient_global = 0;  // $__ambient value (ambient tag << 56)

    uint64_t heap_base = 0;  // guest-relative
    uint64_t heap_end = 0;
    uint64_t free_head = 0;  // guest-relative header address; 0 = empty
};

// Owns the arena, tag store, keys, RNG, configuration and instances.
// Single-threaded during execution; independent runtimes are independent.
class Runtime {
public:
    explicit Runtime(const RuntimeConfig& cfg)
        : config(cfg),
          store(validated_arena(cfg)),
          rng(cfg.seed),
          key(SigningKey::draw(rng)),
          pool(TagPool::for_mode(cfg.mode)) {}

    const Mode& mode() const { return config.mode; }

    uint64_t next_instance_offset() const {
        uint64_t off = kRuntimeRegionBytes;
        for (const auto& inst : instances)
            off = std::max(off, inst->mem_base + inst->mem_len);
        return off;
    }

    // Non-ambient granules relative to the region they belong to: the
    // runtime region and unassigned arena count against tag 0, each
    // instance range against its base tag.
    uint64_t granules_non_ambient() const {
        uint64_t count = 0;
        for (uint64_t g = 0; g < store.granules(); ++g)
            if (store.granule_tag(g) != region_ambient(g * kGranuleBytes)) ++count;
        return count;
    }

    uint8_t region_ambient(uint64_t arena_addr) const {
        for (const auto& inst : instances)
            if (arena_addr >= inst->mem_base && arena_addr < inst->mem_base + inst->mem_len)
                return inst->base_tag;
        return 0;
    }

    // `granule_index hex_tag` for non-ambient granules, ascending.
    std::string dump_tags() const {
        std::string out;
        for (uint64_t g = 0; g < store.granules(); ++g) {
            uint8_t t = store.granule_tag(g);
            if (t != region_ambient(g * kGranuleBytes)) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%llu %x\n", (unsigned long long)g, t);
                out += buf;
            }
        }
        return out;
    }

    RuntimeConfig config;
    TagStore store;
    SplitMix64 rng;
    SigningKey key;
    TagPool pool;
    std::vector<std::unique_ptr<Instance>> instances;
    RunStats stats;
    std::string output;  // env.print_i64 sink
    // Test observer fired on every env.print_i64 call.
    std::function<void(Runtime&, Instance&, uint64_t)> print_hook;

private:
    static uint64_t validated_arena(const RuntimeConfig& cfg) {
        if (cfg.arena_bytes % kGranuleBytes != 0)
            throw ConfigError("arena_bytes must be a multiple of 16");
        if (cfg.arena_bytes < 2 * kRuntimeRegionBytes)
            throw ConfigError("arena_bytes too small");
        if (cfg.stack_bytes % kGranuleBytes != 0)
            throw ConfigError("stack_bytes must be a multiple of 16");
        return cfg.arena_bytes;
    }
};

inline std::unique_ptr<Runtime> create_runtime(const RuntimeConfig& cfg) {
    return std::make_unique<Runtime>(cfg);
}

// Stats snapshot for reporting. tag_storage_bytes is the 4-bits-per-granule
// accounting: exactly arena/32.
struct StatsReport {
    uint64_t instructions;
    uint64_t tag_checks;
    uint64_t tag_check_failures;
    uint64_t bounds_checks;
    uint64_t granules_non_ambient;
    uint64_t tag_storage_bytes;
};

inline StatsReport stats(const Runtime& rt) {
    return StatsReport{
        rt.stats.instructions,
        rt.stats.tag_checks,
        rt.stats.tag_check_failures,
        rt.stats.bounds_checks,
        rt.granules_non_ambient(),
        rt.store.tag_storage_bytes(),
    };
}

}  // namespace cage
