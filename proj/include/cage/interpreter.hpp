#pragma once

#include <algorithm>

#include "cage/allocator.hpp"
#include "cage/runtime.hpp"

namespace cage {

namespace detail {

inline bool is_pseudo(Op op) {
    return op == Op::FrameAddr || op == Op::FuncptrMake || op == Op::FuncptrCall;
}

inline CompiledFunction compile_function(const Module& m, const Function& f) {
    CompiledFunction cf;
    cf.fn = &f;
    cf.type = &m.types[f.type_index].type;
    cf.ctrl.assign(f.body.size(), -1);
    std::vector<size_t> open;
    for (size_t pc = 0; pc < f.body.size(); ++pc) {
        switch (f.body[pc].op) {
        case Op::Block: case Op::Loop: case Op::If:
            cf.ctrl[pc] = int32_t(cf.targets.size());
            cf.targets.push_back({});
            open.push_back(pc);
            break;
        case Op::Else:
            cf.targets[size_t(cf.ctrl[open.back()])].else_pc = pc;
            break;
        case Op::End:
            cf.targets[size_t(cf.ctrl[open.back()])].end_pc = pc;
            open.pop_back();
            break;
        default:
            break;
        }
    }
    return cf;
}

}  // namespace detail

// One executing invocation tree. A machine borrows the runtime and one
// instance; create a fresh machine per invocation.
class Machine {
public:
    Machine(Runtime& rt, Instance& inst) : rt_(rt), inst_(inst) {}

    // 0 = unlimited. Counts executed instructions of this machine.
    uint64_t step_budget = 0;

    std::vector<uint64_t> invoke(const std::string& export_name,
                                 const std::vector<uint64_t>& args) {
        auto target = inst_.module->module.export_target(export_name);
        if (!target) throw UsageError("unknown export: " + export_name);
        return invoke_index(*target, args);
    }

    std::vector<uint64_t> invoke_index(uint32_t func_index, std::vector<uint64_t> args) {
        const CompiledFunction& cf = inst_.functions[func_index];
        if (args.size() != cf.type->params.size())
            throw UsageError("expected " + std::to_string(cf.type->params.size()) +
                             " arguments, got " + std::to_string(args.size()));
        for (size_t i = 0; i < args.size(); ++i)
            if (cf.type->params[i] == ValType::I32) args[i] &= 0xFFFFFFFFull;
        uint64_t sp_snapshot = inst_.sp;
        for (uint64_t a : args) stack_.push_back(a);
        try {
            run_call(func_index);
        } catch (...) {
            // The activation tree is abandoned wholesale; release its
            // shadow-stack space so the instance stays invocable.
            inst_.sp = sp_snapshot;
            stack_.clear();
            frames_.clear();
            throw;
        }
        std::vector<uint64_t> results(stack_.begin(), stack_.end());
        stack_.clear();
        return results;
    }

private:
    struct Frame {
        const CompiledFunction* fn;
        std::vector<uint64_t> locals;
        size_t pc = 0;
        size_t stack_base = 0;
        std::vector<size_t> labels;  // pc of each open block/loop/if
        // Slot ranges tagged while this frame is live (diagnostics).
        std::vector<std::pair<uint64_t, uint64_t>> tagged_ranges;
    };

    [[noreturn]] void trap(TrapKind kind) { throw Trap{kind}; }

    [[noreturn]] void trap_at(TrapKind kind, uint64_t addr) {
        Trap t{kind};
        t.address = addr;
        t.has_address = true;
        throw t;
    }

    uint64_t pop() {
        uint64_t v = stack_.back();
        stack_.pop_back();
        return v;
    }

    void push(uint64_t v) { stack_.push_back(v); }

    // --- memory ---

    // Effective arena address for a guest access; traps on bounds or tag
    // violations. Baseline checks the index against the instance memory;
    // tagged modes compare granule tags and bound only against the arena,
    // with bits 0-55 of the masked index contributing to the address so a
    // nonzero signature field lands far out of range.
    uint64_t mem_addr(uint64_t idx, uint64_t offset, unsigned width) {
        const Mode& mode = rt_.mode();
        if (mode.baseline()) {
            rt_.stats.bounds_checks++;
            unsigned __int128 end = (unsigned __int128)idx + offset + width;
            if (end > inst_.mem_len)
                trap_at(TrapKind::OutOfBounds, idx + offset);
            return inst_.mem_base + idx + offset;
        }
        uint64_t masked = mask_index(idx, mode);
        unsigned __int128 rel = (unsigned __int128)(masked & kIndexMask) + offset;
        if ((unsigned __int128)inst_.mem_base + rel + width > rt_.store.size())
            trap_at(TrapKind::OutOfBounds, uint64_t(rel));
        uint64_t ea = inst_.mem_base + uint64_t(rel);
        uint8_t expected = uint8_t(pointer_tag(masked) | inst_.base_tag);
        rt_.stats.tag_checks++;
        for (uint64_t g = ea / kGranuleBytes; g <= (ea + width - 1) / kGranuleBytes; ++g) {
            if (rt_.store.granule_tag(g) != expected) {
                rt_.stats.tag_check_failures++;
                trap_at(TrapKind::TagMismatch, ea);
            }
        }
        return ea;
    }

    // Segment target: guest-relative address, aligned, inside the instance
    // linear memory. Alignment is diagnosed before bounds.
    uint64_t seg_addr(uint64_t k, uint64_t offset, uint64_t len) {
        uint64_t masked = mask_index(k, rt_.mode());
        unsigned __int128 rel = (unsigned __int128)(masked & kIndexMask) + offset;
        if (rel % kGranuleBytes != 0 || len % kGranuleBytes != 0)
            trap_at(TrapKind::Unaligned, uint64_t(rel));
        if (rel + len > inst_.mem_len)
            trap_at(TrapKind::OutOfBounds, uint64_t(rel));
        return inst_.mem_base + uint64_t(rel);
    }

    uint8_t pointer_expected_tag(uint64_t p) {
        return uint8_t(pointer_tag(mask_index(p, rt_.mode())) | inst_.base_tag);
    }

    // --- globals ---

    uint64_t global_get(uint64_t idx) {
        if (idx == kGlobalSp) return inst_.sp;
        if (idx == kGlobalAmbient) return inst_.ambient_global;
        return inst_.globals[size_t(idx)];
    }

    void global_set(uint64_t idx, uint64_t v) {
        if (idx == kGlobalSp) {
            if (v > inst_.stack_top)
                trap_at(TrapKind::StackOverflow, v);
            inst_.sp = v;
            return;
        }
        const Global& g = inst_.module->module.globals[size_t(idx)];
        inst_.globals[size_t(idx)] = g.type == ValType::I32 ? (v & 0xFFFFFFFFull) : v;
    }

    // --- calls ---

    void push_frame(uint32_t func_index) {
        if (frames_.size() >= rt_.config.max_call_depth)
            trap(TrapKind::StackOverflow);
        const CompiledFunction& cf = inst_.functions[func_index];
        Frame fr;
        fr.fn = &cf;
        size_t nparams = cf.type->params.size();
        fr.stack_base = stack_.size() - nparams;
        fr.locals.assign(stack_.end() - long(nparams), stack_.end());
        stack_.resize(fr.stack_base);
        fr.locals.resize(nparams + cf.fn->locals.size(), 0);
        frames_.push_back(std::move(fr));
    }

    void pop_frame() {
        Frame& fr = frames_.back();
        size_t arity = fr.fn->type->results.size();
        uint64_t result = arity ? stack_.back() : 0;
        stack_.resize(fr.stack_base);
        if (arity) stack_.push_back(result);
        frames_.pop_back();
    }

    void host_call(HostFunc f) {
        switch (f) {
        case HostFunc::Malloc: {
            uint64_t size = pop();
            push(heap::malloc_(rt_, inst_, size));
            break;
        }
        case HostFunc::Free:
            heap::free_(rt_, inst_, pop());
            break;
        case HostFunc::Realloc: {
            uint64_t n = pop();
            uint64_t p = pop();
            push(heap::realloc_(rt_, inst_, p, n));
            break;
        }
        case HostFunc::PrintI64: {
            uint64_t v = pop();
            rt_.output += std::to_string(int64_t(v));
            rt_.output += '\n';
            if (rt_.print_hook) rt_.print_hook(rt_, inst_, v);
            break;
        }
        }
    }

    // Runs func_index to completion; leaves its results on stack_.
    void run_call(uint32_t func_index) {
        push_frame(func_index);
        size_t base_depth = frames_.size();
        while (frames_.size() >= base_depth) {
            Frame& fr = frames_.back();
            const auto& body = fr.fn->fn->body;
            if (fr.pc >= body.size()) {
                pop_frame();
                continue;
            }
            rt_.stats.instructions++;
            if (step_budget && ++steps_ > step_budget)
                throw InternalError("step budget exhausted");
            const Instruction& ins = body[fr.pc];
            try {
                exec(fr, ins);
            } catch (Trap& t) {
                if (t.function.empty()) {
                    t.function = fr.fn->fn->name;
                    t.instruction_index = fr.pc;
                }
                throw;
            }
        }
    }

    void branch(Frame& fr, uint64_t depth) {
        size_t idx = fr.labels.size() - 1 - size_t(depth);
        size_t open_pc = fr.labels[idx];
        const ControlTargets& t = fr.fn->targets[size_t(fr.fn->ctrl[open_pc])];
        if (fr.fn->fn->body[open_pc].op == Op::Loop) {
            fr.labels.resize(idx + 1);
            fr.pc = open_pc + 1;
        } else {
            fr.labels.resize(idx);
            fr.pc = t.end_pc + 1;
        }
    }

    void exec(Frame& fr, const Instruction& ins) {
        switch (ins.op) {
        case Op::I32Const:
        case Op::I64Const:
            push(ins.imm);
            break;

        case Op::I64Add: { uint64_t b = pop(), a = pop(); push(a + b); break; }
        case Op::I64Sub: { uint64_t b = pop(), a = pop(); push(a - b); break; }
        case Op::I64Mul: { uint64_t b = pop(), a = pop(); push(a * b); break; }
        case Op::I64And: { uint64_t b = pop(), a = pop(); push(a & b); break; }
        case Op::I64Or:  { uint64_t b = pop(), a = pop(); push(a | b); break; }
        case Op::I64Xor: { uint64_t b = pop(), a = pop(); push(a ^ b); break; }
        case Op::I64Shl: { uint64_t b = pop(), a = pop(); push(a << (b & 63)); break; }
        case Op::I64ShrU:{ uint64_t b = pop(), a = pop(); push(a >> (b & 63)); break; }

        case Op::I64Eq:  { uint64_t b = pop(), a = pop(); push(a == b ? 1 : 0); break; }
        case Op::I64Ne:  { uint64_t b = pop(), a = pop(); push(a != b ? 1 : 0); break; }
        case Op::I64LtU: { uint64_t b = pop(), a = pop(); push(a < b ? 1 : 0); break; }
        case Op::I64GeU: { uint64_t b = pop(), a = pop(); push(a >= b ? 1 : 0); break; }

        case Op::I32WrapI64: push(pop() & 0xFFFFFFFFull); break;
        case Op::I64ExtendI32U: push(pop() & 0xFFFFFFFFull); break;

        case Op::LocalGet: push(fr.locals[size_t(ins.imm)]); break;
        case Op::LocalSet: fr.locals[size_t(ins.imm)] = pop(); break;
        case Op::LocalTee: fr.locals[size_t(ins.imm)] = stack_.back(); break;

        case Op::GlobalGet: push(global_get(ins.imm)); break;
        case Op::GlobalSet: global_set(ins.imm, pop()); break;

        case Op::Drop: pop(); break;

        case Op::Block:
        case Op::Loop:
            fr.labels.push_back(fr.pc);
            break;
        case Op::If: {
            uint64_t cond = pop();
            const ControlTargets& t = fr.fn->targets[size_t(fr.fn->ctrl[fr.pc])];
            if (cond != 0) {
                fr.labels.push_back(fr.pc);
            } else if (t.else_pc != SIZE_MAX) {
                fr.labels.push_back(fr.pc);
                fr.pc = t.else_pc;  // ++ below lands on the first else instr
            } else {
                fr.pc = t.end_pc;  // ++ below skips the construct
            }
            break;
        }
        case Op::Else: {
            // Falling into else means the then-branch finished: jump to end.
            size_t open_pc = fr.labels.back();
            fr.pc = fr.fn->targets[size_t(fr.fn->ctrl[open_pc])].end_pc;
            return exec_end(fr);
        }
        case Op::End:
            return exec_end(fr);

        case Op::Br:
            return branch(fr, ins.imm);
        case Op::BrIf:
            if (pop() != 0) return branch(fr, ins.imm);
            break;

        case Op::Return:
            pop_frame();
            return;

        case Op::Call: {
            if (ins.imm & kHostFlag) {
                host_call(HostFunc(ins.imm & 0xFF));
                break;
            }
            fr.pc++;  // resume after the call
            push_frame(uint32_t(ins.imm));
            return;
        }

        case Op::CallIndirect: {
            uint32_t idx = uint32_t(pop());
            const Module& m = inst_.module->module;
            if (idx >= m.table.size())
                trap(TrapKind::TableOutOfBounds);
            uint32_t callee = m.table[idx];
            const FuncType& expect = m.types[size_t(ins.imm)].type;
            if (!(*inst_.functions[callee].type == expect))
                trap(TrapKind::IndirectTypeMismatch);
            fr.pc++;
            push_frame(callee);
            return;
        }

        case Op::Unreachable:
            trap(TrapKind::Unreachable);

        case Op::I64Load: case Op::I32Load: case Op::I64Load8U: {
            unsigned w = access_width(ins.op);
            uint64_t idx = pop();
            uint64_t ea = mem_addr(idx, ins.imm, w);
            push(rt_.store.load_le(ea, w));
            break;
        }
        case Op::I64Store: case Op::I32Store: case Op::I64Store8: {
            unsigned w = access_width(ins.op);
            uint64_t value = pop();
            uint64_t idx = pop();
            uint64_t ea = mem_addr(idx, ins.imm, w);
            rt_.store.store_le(ea, value, w);
            break;
        }

        case Op::SegmentNew: {
            uint64_t len = pop();
            uint64_t k = pop();
            uint64_t ea = seg_addr(k, ins.imm, len);
            uint8_t tag = rt_.pool.draw(rt_.rng);
            rt_.store.granule_tags_set(ea, len, tag);
            rt_.store.zero(ea, len);
            if (len) fr.tagged_ranges.push_back({ea, len});
            push(with_pointer_tag(k, tag));
            break;
        }
        case Op::SegmentSetTag: {
            uint64_t len = pop();
            uint64_t t = pop();
            uint64_t k = pop();
            uint64_t ea = seg_addr(k, ins.imm, len);
            uint8_t tagv = pointer_expected_tag(t);
            rt_.store.granule_tags_set(ea, len, tagv);
            if (len) {
                if (tagv == rt_.pool.ambient())
                    std::erase(fr.tagged_ranges, std::pair<uint64_t, uint64_t>{ea, len});
                else
                    fr.tagged_ranges.push_back({ea, len});
            }
            break;
        }
        case Op::SegmentFree: {
            uint64_t len = pop();
            uint64_t k = pop();
            uint64_t ea = seg_addr(k, ins.imm, len);
            uint8_t expected = pointer_expected_tag(k);
            rt_.stats.tag_checks++;
            for (uint64_t g = ea / kGranuleBytes; g < (ea + len) / kGranuleBytes; ++g) {
                if (rt_.store.granule_tag(g) != expected) {
                    rt_.stats.tag_check_failures++;
                    trap_at(TrapKind::TagMismatch, g * kGranuleBytes);
                }
            }
            rt_.store.granule_tags_set(ea, len, rt_.pool.next_cycle(expected));
            break;
        }

        case Op::PointerSign:
            push(pac::sign(pop(), rt_.key, inst_.modifier));
            break;
        case Op::PointerAuth: {
            uint64_t p = pop();
            auto stripped = pac::authenticate(p, rt_.key, inst_.modifier);
            if (!stripped) trap(TrapKind::AuthFailure);
            push(*stripped);
            break;
        }

        case Op::FrameAddr: case Op::FuncptrMake: case Op::FuncptrCall:
            throw InternalError("surface pseudo-instruction reached the interpreter");
        }
        fr.pc++;
    }

    void exec_end(Frame& fr) {
        fr.labels.pop_back();
        fr.pc++;
    }

    Runtime& rt_;
    Instance& inst_;
    std::vector<uint64_t> stack_;
    std::vector<Frame> frames_;
    uint64_t steps_ = 0;
};

// Registers a guest for a validated module: reserves and tags its memory
// range, seeds globals and the heap, draws the signing modifier, and runs
// the start function.
inline Instance& instantiate(Runtime& rt, std::shared_ptr<const ValidatedModule> vm) {
    const Module& m = vm->module;
    for (const auto& f : m.functions)
        for (const auto& ins : f.body)
            if (detail::is_pseudo(ins.op))
                throw ConfigError("module contains surface pseudo-instructions; run a lowering pass first");

    const Mode& mode = rt.mode();
    uint8_t base_tag = 0;
    if (mode.external && !mode.internal) {
        // Tag zero stays with the runtime, leaving 15 sandbox tags.
        if (rt.instances.size() >= 15)
            throw CapacityError("external sandboxing supports at most 15 instances");
        base_tag = uint8_t(rt.instances.size() + 1);
    } else if (mode.combined()) {
        if (!rt.instances.empty())
            throw CapacityError("combined mode isolates a single instance");
        base_tag = 8;
    }

    auto inst = std::make_unique<Instance>();
    inst->index = rt.instances.size();
    inst->module = vm;
    inst->base_tag = base_tag;
    if (m.has_memory) {
        uint64_t len = m.memory_pages * kPageBytes;
        uint64_t base = rt.next_instance_offset();
        if (base + len > rt.store.size() || base + len < base)
            throw CapacityError("arena exhausted");
        inst->mem_base = base;
        inst->mem_len = len;
        if (base_tag != 0)
            rt.store.granule_tags_set(base, len, base_tag);
    }
    inst->stack_top = std::min(rt.config.stack_bytes, inst->mem_len);
    inst->sp = inst->stack_top;
    inst->heap_base = inst->stack_top;
    inst->heap_end = inst->mem_len;
    if (rt.config.heap_bytes < inst->heap_end - inst->heap_base)
        inst->heap_end = inst->heap_base + (rt.config.heap_bytes & ~(kGranuleBytes - 1));
    inst->ambient_global = uint64_t(rt.pool.ambient()) << kTagShift;
    for (const auto& g : m.globals)
        inst->globals.push_back(g.type == ValType::I32 ? (g.init & 0xFFFFFFFFull) : g.init);
    inst->modifier = rt.rng.next();
    inst->functions.reserve(m.functions.size());
    for (const auto& f : m.functions)
        inst->functions.push_back(detail::compile_function(m, f));
    heap::init_heap(rt, *inst);

    rt.instances.push_back(std::move(inst));
    Instance& ref = *rt.instances.back();
    if (m.start) {
        Machine machine(rt, ref);
        machine.invoke_index(*m.start, {});
    }
    return ref;
}

inline Instance& add_instance(Runtime& rt, std::shared_ptr<const ValidatedModule> vm) {
    return instantiate(rt, std::move(vm));
}

inline std::vector<uint64_t> invoke(Runtime& rt, Instance& inst, const std::string& export_name,
                                    const std::vector<uint64_t>& args) {
    Machine machine(rt, inst);
    return machine.invoke(export_name, args);
}

}  // namespace cage
