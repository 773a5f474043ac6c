#pragma once

#include <algorithm>

#include "cage/ast.hpp"
#include "cage/validator.hpp"

namespace cage {

struct HardenOptions {
    bool stack_safety = false;
    bool ptr_auth = false;
};

struct SlotClassification {
    std::vector<bool> escapes;
    std::vector<bool> unsafe_gep;

    bool instrument(size_t slot) const { return escapes[slot] || unsafe_gep[slot]; }
    bool any_instrumented() const {
        for (size_t i = 0; i < escapes.size(); ++i)
            if (instrument(i)) return true;
        return false;
    }
};

namespace detail {

// Abstract value for the escape/index analysis. Constants are tracked so
// slot offsets stay known through add/sub chains; everything else is opaque.
struct AV {
    enum Kind : uint8_t { Opaque, Const, Slot } kind = Opaque;
    uint64_t value = 0;      // Const
    uint32_t slot = 0;       // Slot
    bool offset_known = false;
    int64_t offset = 0;

    static AV opaque() { return {}; }
    static AV constant(uint64_t v) { return {Const, v, 0, false, 0}; }
    static AV slot_addr(uint32_t s, int64_t off) { return {Slot, 0, s, true, off}; }
    static AV slot_unknown(uint32_t s) { return {Slot, 0, s, false, 0}; }
};

class SlotAnalyzer {
public:
    SlotAnalyzer(const Module& m, const Function& f) : m_(m), f_(f) {
        cls_.escapes.assign(f.frame_slots.size(), false);
        cls_.unsafe_gep.assign(f.frame_slots.size(), false);
        nparams_ = m.types[f.type_index].type.params.size();
        nresults_ = m.types[f.type_index].type.results.size();
    }

    SlotClassification run() {
        ctrls_.push_back({0, false});
        for (const auto& ins : f_.body) step(ins);
        if (!ctrls_.back().unreachable)
            mark_returned(nresults_);
        return cls_;
    }

private:
    struct Ctrl {
        size_t height;
        bool unreachable;
    };

    void escape(const AV& v) {
        if (v.kind == AV::Slot) cls_.escapes[v.slot] = true;
    }

    void mark_unsafe(const AV& v) {
        if (v.kind == AV::Slot) cls_.unsafe_gep[v.slot] = true;
    }

    AV pop() {
        if (stack_.size() <= ctrls_.back().height)
            throw InternalError("slot analysis underflow (module not validated?)");
        AV v = stack_.back();
        stack_.pop_back();
        return v;
    }

    void push(const AV& v) { stack_.push_back(v); }

    // Pop n call operands; any slot address handed to a callee escapes.
    void pop_args_escaping(size_t n) {
        for (size_t i = 0; i < n; ++i) escape(pop());
    }

    void mark_returned(size_t arity) {
        for (size_t i = 0; i < arity && stack_.size() > ctrls_.back().height; ++i)
            escape(pop());
    }

    const FuncType& callee_type(const Instruction& ins) {
        if (ins.imm & kHostFlag) {
            static thread_local FuncType ft;
            ft = host_func_type(HostFunc(ins.imm & 0xFF));
            return ft;
        }
        return m_.types[m_.functions[size_t(ins.imm)].type_index].type;
    }

    void access_check(const AV& addr, uint64_t imm_offset, unsigned width) {
        if (addr.kind != AV::Slot) return;
        if (!addr.offset_known) {
            cls_.unsafe_gep[addr.slot] = true;
            return;
        }
        int64_t begin = addr.offset + int64_t(imm_offset);
        int64_t end = begin + int64_t(width);
        if (begin < 0 || end > int64_t(f_.frame_slots[addr.slot].size_bytes))
            cls_.unsafe_gep[addr.slot] = true;
    }

    void step(const Instruction& ins) {
        bool dead = ctrls_.back().unreachable;
        switch (ins.op) {
        case Op::Block:
        case Op::Loop:
            ctrls_.push_back({stack_.size(), dead});
            return;
        case Op::If:
            if (!dead) pop();
            ctrls_.push_back({stack_.size(), dead});
            return;
        case Op::Else: {
            Ctrl& c = ctrls_.back();
            stack_.resize(c.height);
            c.unreachable = ctrls_[ctrls_.size() - 2].unreachable;
            return;
        }
        case Op::End: {
            size_t h = ctrls_.back().height;
            stack_.resize(h);
            ctrls_.pop_back();
            return;
        }
        default:
            break;
        }
        if (dead) return;

        switch (ins.op) {
        case Op::I32Const:
        case Op::I64Const:
            push(AV::constant(ins.imm));
            break;

        case Op::FrameAddr:
            push(AV::slot_addr(uint32_t(ins.imm), 0));
            break;

        case Op::I64Add: {
            AV b = pop(), a = pop();
            push(combine_add_sub(a, b, /*sub=*/false));
            break;
        }
        case Op::I64Sub: {
            AV b = pop(), a = pop();
            push(combine_add_sub(a, b, /*sub=*/true));
            break;
        }

        case Op::I64Mul: case Op::I64And: case Op::I64Or: case Op::I64Xor:
        case Op::I64Shl: case Op::I64ShrU: {
            AV b = pop(), a = pop();
            // A slot address flowing into opaque arithmetic is unanalyzable.
            escape(a);
            escape(b);
            if (a.kind == AV::Const && b.kind == AV::Const)
                push(AV::constant(fold(ins.op, a.value, b.value)));
            else
                push(AV::opaque());
            break;
        }

        case Op::I64Eq: case Op::I64Ne: case Op::I64LtU: case Op::I64GeU:
            // Address comparisons yield booleans; the address itself does
            // not leave the stack.
            pop();
            pop();
            push(AV::opaque());
            break;

        case Op::I32WrapI64: {
            AV a = pop();
            escape(a);
            push(a.kind == AV::Const ? AV::constant(a.value & 0xFFFFFFFFull) : AV::opaque());
            break;
        }
        case Op::I64ExtendI32U: {
            AV a = pop();
            push(a.kind == AV::Const ? AV::constant(a.value & 0xFFFFFFFFull) : AV::opaque());
            break;
        }

        case Op::LocalGet:
            push(AV::opaque());
            break;
        case Op::LocalSet:
            escape(pop());
            break;
        case Op::LocalTee:
            escape(stack_.back());
            break;

        case Op::GlobalGet:
            push(AV::opaque());
            break;
        case Op::GlobalSet:
            escape(pop());
            break;

        case Op::Drop:
            pop();
            break;

        case Op::Br:
            ctrls_.back().unreachable = true;
            stack_.resize(ctrls_.back().height);
            break;
        case Op::BrIf:
            pop();
            break;
        case Op::Return:
            mark_returned(nresults_);
            ctrls_.back().unreachable = true;
            stack_.resize(ctrls_.back().height);
            break;
        case Op::Unreachable:
            ctrls_.back().unreachable = true;
            stack_.resize(ctrls_.back().height);
            break;

        case Op::Call: {
            const FuncType& ft = callee_type(ins);
            pop_args_escaping(ft.params.size());
            for (size_t i = 0; i < ft.results.size(); ++i) push(AV::opaque());
            break;
        }
        case Op::CallIndirect: {
            pop();  // i32 table index
            const FuncType& ft = m_.types[size_t(ins.imm)].type;
            pop_args_escaping(ft.params.size());
            for (size_t i = 0; i < ft.results.size(); ++i) push(AV::opaque());
            break;
        }
        case Op::FuncptrCall: {
            escape(pop());  // the pointer operand
            const FuncType& ft = m_.types[size_t(ins.imm)].type;
            pop_args_escaping(ft.params.size());
            for (size_t i = 0; i < ft.results.size(); ++i) push(AV::opaque());
            break;
        }
        case Op::FuncptrMake:
            push(AV::opaque());
            break;

        case Op::I64Load: case Op::I32Load: case Op::I64Load8U: {
            AV addr = pop();
            access_check(addr, ins.imm, access_width(ins.op));
            push(AV::opaque());
            break;
        }
        case Op::I64Store: case Op::I32Store: case Op::I64Store8: {
            AV value = pop();
            AV addr = pop();
            escape(value);
            access_check(addr, ins.imm, access_width(ins.op));
            break;
        }

        // Manual segment/signing operations on a slot address take it out
        // of the analyzable world.
        case Op::SegmentNew: {
            AV len = pop(), k = pop();
            (void)len;
            escape(k);
            push(AV::opaque());
            break;
        }
        case Op::SegmentSetTag: {
            AV l = pop(), t = pop(), k = pop();
            (void)l;
            escape(t);
            escape(k);
            break;
        }
        case Op::SegmentFree: {
            AV l = pop(), k = pop();
            (void)l;
            escape(k);
            break;
        }
        case Op::PointerSign: case Op::PointerAuth: {
            escape(pop());
            push(AV::opaque());
            break;
        }

        case Op::Block: case Op::Loop: case Op::If: case Op::Else: case Op::End:
            break;  // handled above
        }
    }

    AV combine_add_sub(const AV& a, const AV& b, bool sub) {
        if (a.kind == AV::Const && b.kind == AV::Const)
            return AV::constant(sub ? a.value - b.value : a.value + b.value);
        if (a.kind == AV::Slot && b.kind == AV::Const) {
            if (!a.offset_known) return AV::slot_unknown(a.slot);
            int64_t d = int64_t(b.value);
            return AV::slot_addr(a.slot, sub ? a.offset - d : a.offset + d);
        }
        if (!sub && b.kind == AV::Slot && a.kind == AV::Const) {
            if (!b.offset_known) return AV::slot_unknown(b.slot);
            return AV::slot_addr(b.slot, b.offset + int64_t(a.value));
        }
        // A slot combined with a non-constant (or negated) operand.
        mark_unsafe(a);
        mark_unsafe(b);
        return AV::opaque();
    }

    static uint64_t fold(Op op, uint64_t a, uint64_t b) {
        switch (op) {
        case Op::I64Mul: return a * b;
        case Op::I64And: return a & b;
        case Op::I64Or: return a | b;
        case Op::I64Xor: return a ^ b;
        case Op::I64Shl: return a << (b & 63);
        case Op::I64ShrU: return a >> (b & 63);
        default: return 0;
        }
    }

    const Module& m_;
    const Function& f_;
    SlotClassification cls_;
    size_t nparams_ = 0, nresults_ = 0;
    std::vector<AV> stack_;
    std::vector<Ctrl> ctrls_;
};

}  // namespace detail

inline SlotClassification classify_slots(const Module& m, const Function& f) {
    return detail::SlotAnalyzer(m, f).run();
}

namespace detail {

struct FrameLayout {
    bool guard = false;
    uint64_t frame_size = 0;
    std::vector<uint64_t> offset;       // per original slot
    std::vector<uint64_t> padded_size;  // per original slot
    std::vector<uint32_t> instrumented; // original slot indices, declared order
};

inline FrameLayout frame_layout(const Function& f, const SlotClassification& cls) {
    FrameLayout lay;
    for (uint32_t i = 0; i < f.frame_slots.size(); ++i)
        if (cls.instrument(i)) lay.instrumented.push_back(i);
    lay.guard = !lay.instrumented.empty() && !cls.instrument(0);
    uint64_t off = lay.guard ? kGranuleBytes : 0;
    for (const auto& s : f.frame_slots) {
        lay.offset.push_back(off);
        lay.padded_size.push_back(round_up_granule(s.size_bytes));
        off += lay.padded_size.back();
    }
    lay.frame_size = off;
    return lay;
}

inline void emit(std::vector<Instruction>& out, Op op, uint64_t imm = 0) {
    out.push_back({op, imm});
}

// addr-of-slot: $__sp + offset
inline void emit_slot_addr(std::vector<Instruction>& out, uint64_t offset) {
    emit(out, Op::GlobalGet, kGlobalSp);
    emit(out, Op::I64Const, offset);
    emit(out, Op::I64Add);
}

// Tag value of the pointer in local `src`, advanced `dist` steps along the
// allowed pool and re-attached to the address on the stack. dist < 7 so a
// single conditional wrap covers both pool sizes; the pool size is derived
// from $__ambient (15 allowed tags when ambient is 0, 7 when it is 8), which
// keeps hardened modules mode-agnostic.
inline void emit_cycled_tag(std::vector<Instruction>& out, uint64_t src_local,
                            uint64_t scratch_local, uint64_t dist) {
    emit(out, Op::LocalGet, src_local);
    emit(out, Op::I64Const, 56);
    emit(out, Op::I64ShrU);
    emit(out, Op::I64Const, 15);
    emit(out, Op::I64And);           // t
    emit(out, Op::I64Const, dist);
    emit(out, Op::I64Add);           // x = t + dist
    emit(out, Op::LocalSet, scratch_local);
    emit(out, Op::LocalGet, scratch_local);
    emit(out, Op::LocalGet, scratch_local);
    emit(out, Op::I64Const, 16);
    emit(out, Op::I64GeU);           // wrapped past the pool?
    emit(out, Op::I64ExtendI32U);
    emit(out, Op::I64Const, 15);
    emit(out, Op::GlobalGet, kGlobalAmbient);
    emit(out, Op::I64Const, 56);
    emit(out, Op::I64ShrU);
    emit(out, Op::I64Sub);           // pool size = 15 - ambient tag
    emit(out, Op::I64Mul);
    emit(out, Op::I64Sub);           // tag value
    emit(out, Op::I64Const, 56);
    emit(out, Op::I64Shl);
    emit(out, Op::I64Or);            // addr | tag bits
}

}  // namespace detail

// Rewrites one function: reserves the frame, tags instrumented slots on
// entry (first slot draws, followers are cycle successors), untags them on
// every exit path, inserts the guard slot per the detection rule, and
// lowers frame.addr. With an all-false classification this degenerates to
// the plain frame lowering every executable module needs.
inline Function instrument_stack(const Module& m, const Function& f,
                                 const SlotClassification& cls) {
    detail::FrameLayout lay = detail::frame_layout(f, cls);
    Function out;
    out.name = f.name;
    out.type_index = f.type_index;
    out.locals = f.locals;
    out.frame_slots = f.frame_slots;

    size_t nparams = m.types[f.type_index].type.params.size();
    uint64_t local_base = nparams + f.locals.size();
    // One synthesized i64 local per instrumented slot plus one scratch.
    std::vector<uint64_t> slot_local(f.frame_slots.size(), 0);
    for (size_t k = 0; k < lay.instrumented.size(); ++k) {
        slot_local[lay.instrumented[k]] = local_base + k;
        out.locals.push_back(ValType::I64);
    }
    uint64_t scratch = local_base + lay.instrumented.size();
    if (lay.instrumented.size() > 1) out.locals.push_back(ValType::I64);

    auto& body = out.body;
    using detail::emit;

    if (lay.frame_size > 0) {
        emit(body, Op::GlobalGet, kGlobalSp);
        emit(body, Op::I64Const, lay.frame_size);
        emit(body, Op::I64Sub);
        emit(body, Op::GlobalSet, kGlobalSp);
    }
    for (size_t k = 0; k < lay.instrumented.size(); ++k) {
        uint32_t slot = lay.instrumented[k];
        detail::emit_slot_addr(body, lay.offset[slot]);
        if (k == 0) {
            emit(body, Op::I64Const, lay.padded_size[slot]);
            emit(body, Op::SegmentNew, 0);
            emit(body, Op::LocalSet, slot_local[slot]);
        } else {
            detail::emit_cycled_tag(body, slot_local[lay.instrumented[0]], scratch, k % 7);
            emit(body, Op::LocalTee, slot_local[slot]);
            emit(body, Op::LocalGet, slot_local[slot]);
            emit(body, Op::I64Const, lay.padded_size[slot]);
            emit(body, Op::SegmentSetTag, 0);
        }
    }

    auto emit_epilogue = [&](std::vector<Instruction>& b) {
        for (uint32_t slot : lay.instrumented) {
            emit(b, Op::LocalGet, slot_local[slot]);
            emit(b, Op::GlobalGet, kGlobalAmbient);
            emit(b, Op::I64Const, lay.padded_size[slot]);
            emit(b, Op::SegmentSetTag, 0);
        }
        if (lay.frame_size > 0) {
            emit(b, Op::GlobalGet, kGlobalSp);
            emit(b, Op::I64Const, lay.frame_size);
            emit(b, Op::I64Add);
            emit(b, Op::GlobalSet, kGlobalSp);
        }
    };

    for (const auto& ins : f.body) {
        switch (ins.op) {
        case Op::FrameAddr: {
            uint32_t slot = uint32_t(ins.imm);
            if (cls.instrument(slot))
                emit(body, Op::LocalGet, slot_local[slot]);
            else
                detail::emit_slot_addr(body, lay.offset[slot]);
            break;
        }
        case Op::Return:
            emit_epilogue(body);
            body.push_back(ins);
            break;
        default:
            body.push_back(ins);
            break;
        }
    }
    emit_epilogue(body);

    if (lay.guard)
        out.frame_slots.insert(out.frame_slots.begin(), FrameSlot{"__guard", kGranuleBytes});
    return out;
}

// funcptr.make -> table index, zero-extended (and signed when enabled);
// funcptr.call -> (authenticate,) truncate, call_indirect.
inline void lower_funcptrs(Module& m, bool ptr_auth) {
    for (auto& f : m.functions) {
        std::vector<Instruction> body;
        body.reserve(f.body.size());
        for (const auto& ins : f.body) {
            switch (ins.op) {
            case Op::FuncptrMake: {
                auto tidx = m.table_index_of(uint32_t(ins.imm));
                if (!tidx)
                    throw ValidationError(f.name, 0, "funcptr.make target is not in the table");
                detail::emit(body, Op::I32Const, *tidx);
                detail::emit(body, Op::I64ExtendI32U);
                if (ptr_auth) detail::emit(body, Op::PointerSign);
                break;
            }
            case Op::FuncptrCall:
                if (ptr_auth) detail::emit(body, Op::PointerAuth);
                detail::emit(body, Op::I32WrapI64);
                detail::emit(body, Op::CallIndirect, ins.imm);
                break;
            default:
                body.push_back(ins);
                break;
            }
        }
        f.body = std::move(body);
    }
}

// Full module transformation. Always expands the surface pseudo-instructions
// (they never reach the interpreter); stack_safety additionally classifies
// and tags frame slots. The output carries the hardened marker and always
// revalidates.
inline Module harden(const Module& m, const HardenOptions& opts) {
    if (m.hardened)
        throw ConfigError("module is already hardened (marker present)");
    Module out = m;
    for (size_t i = 0; i < m.functions.size(); ++i) {
        SlotClassification cls;
        if (opts.stack_safety) {
            cls = classify_slots(m, m.functions[i]);
        } else {
            cls.escapes.assign(m.functions[i].frame_slots.size(), false);
            cls.unsafe_gep.assign(m.functions[i].frame_slots.size(), false);
        }
        out.functions[i] = instrument_stack(m, m.functions[i], cls);
    }
    lower_funcptrs(out, opts.ptr_auth);
    out.hardened = true;
    return out;
}

// Minimal lowering for direct execution of surface modules.
inline Module default_lower(const Module& m, bool ptr_auth) {
    return harden(m, HardenOptions{false, ptr_auth});
}

}  // namespace cage
