#pragma once

#include "cage/allocator.hpp"
#include "cage/runtime.hpp"

namespace cage {

// Rule-by-rule reference evaluator. It executes the same configuration
// space (store, tag map, instances) as the main engine but reduces a nested
// term one rule at a time, reading region tags through the homogeneity
// premise instead of the main engine's per-granule scan. Used as the
// differential oracle; slow and simple on purpose.
class ReferenceMachine {
public:
    ReferenceMachine(Runtime& rt, Instance& inst) : rt_(rt), inst_(inst) {
        const Module& m = inst.module->module;
        funcs_.reserve(m.functions.size());
        for (const auto& f : m.functions) funcs_.push_back(build(m, f));
    }

    uint64_t step_limit = 0;  // 0 = unlimited

    std::vector<uint64_t> invoke(const std::string& export_name,
                                 const std::vector<uint64_t>& args) {
        auto target = inst_.module->module.export_target(export_name);
        if (!target) throw UsageError("unknown export: " + export_name);
        return invoke_index(*target, args);
    }

    std::vector<uint64_t> invoke_index(uint32_t func_index, std::vector<uint64_t> args) {
        const RefFunction& rf = funcs_[func_index];
        if (args.size() != rf.type->params.size())
            throw UsageError("argument count mismatch");
        for (size_t i = 0; i < args.size(); ++i)
            if (rf.type->params[i] == ValType::I32) args[i] &= 0xFFFFFFFFull;
        uint64_t sp_snapshot = inst_.sp;
        for (uint64_t a : args) values_.push_back(a);
        try {
            enter(func_index);
            while (!acts_.empty()) step();
        } catch (...) {
            inst_.sp = sp_snapshot;
            values_.clear();
            acts_.clear();
            throw;
        }
        std::vector<uint64_t> results(values_.begin(), values_.end());
        values_.clear();
        return results;
    }

private:
    struct Node {
        Instruction ins;
        std::vector<Node> body;       // block/loop/if-then
        std::vector<Node> else_body;  // if-else
    };

    struct RefFunction {
        const Function* fn;
        const FuncType* type;
        std::vector<Node> body;
    };

    struct SeqFrame {
        const std::vector<Node>* nodes;
        size_t idx;
        const Node* label;  // nullptr for the function body sequence
    };

    struct Activation {
        uint32_t func;
        std::vector<uint64_t> locals;
        std::vector<SeqFrame> seq;
        size_t value_base;
    };

    // --- term construction ---

    static RefFunction build(const Module& m, const Function& f) {
        RefFunction rf;
        rf.fn = &f;
        rf.type = &m.types[f.type_index].type;
        size_t pos = 0;
        rf.body = build_seq(f.body, pos, /*stop_at_else=*/false, nullptr);
        return rf;
    }

    static std::vector<Node> build_seq(const std::vector<Instruction>& body, size_t& pos,
                                       bool in_if, bool* saw_else) {
        std::vector<Node> out;
        while (pos < body.size()) {
            const Instruction& ins = body[pos];
            if (ins.op == Op::End) {
                ++pos;
                return out;
            }
            if (ins.op == Op::Else) {
                if (!in_if) throw InternalError("stray else");
                if (saw_else) *saw_else = true;
                ++pos;
                return out;
            }
            ++pos;
            Node n{ins, {}, {}};
            if (ins.op == Op::Block || ins.op == Op::Loop) {
                n.body = build_seq(body, pos, false, nullptr);
            } else if (ins.op == Op::If) {
                bool had_else = false;
                n.body = build_seq(body, pos, true, &had_else);
                if (had_else) n.else_body = build_seq(body, pos, false, nullptr);
            }
            out.push_back(std::move(n));
        }
        return out;
    }

    // --- machine ---

    [[noreturn]] void rule_trap(TrapKind kind, uint64_t addr = 0, bool has_addr = false) {
        Trap t{kind};
        t.function = funcs_[acts_.back().func].fn->name;
        t.address = addr;
        t.has_address = has_addr;
        throw t;
    }

    uint64_t take() {
        uint64_t v = values_.back();
        values_.pop_back();
        return v;
    }

    void give(uint64_t v) { values_.push_back(v); }

    void enter(uint32_t func_index) {
        if (acts_.size() >= rt_.config.max_call_depth) {
            if (acts_.empty()) throw Trap{TrapKind::StackOverflow};
            rule_trap(TrapKind::StackOverflow);
        }
        const RefFunction& rf = funcs_[func_index];
        Activation act;
        act.func = func_index;
        size_t nparams = rf.type->params.size();
        act.value_base = values_.size() - nparams;
        act.locals.assign(values_.end() - long(nparams), values_.end());
        values_.resize(act.value_base);
        act.locals.resize(nparams + rf.fn->locals.size(), 0);
        act.seq.push_back({&rf.body, 0, nullptr});
        acts_.push_back(std::move(act));
    }

    void leave() {
        Activation& act = acts_.back();
        size_t arity = funcs_[act.func].type->results.size();
        uint64_t result = arity ? values_.back() : 0;
        values_.resize(act.value_base);
        if (arity) values_.push_back(result);
        acts_.pop_back();
    }

    void step() {
        if (step_limit && ++steps_ > step_limit)
            throw InternalError("reference step limit exhausted");
        Activation& act = acts_.back();
        SeqFrame& sf = act.seq.back();
        if (sf.idx >= sf.nodes->size()) {
            // Sequence exhausted: leave the label, or return from the body.
            if (sf.label == nullptr) {
                leave();
            } else {
                act.seq.pop_back();
            }
            return;
        }
        const Node& node = (*sf.nodes)[sf.idx++];
        reduce(act, node);
    }

    void branch(Activation& act, uint64_t depth) {
        // The d-th enclosing labeled frame, innermost first.
        size_t remaining = depth;
        size_t i = act.seq.size();
        while (i-- > 0) {
            if (act.seq[i].label == nullptr) break;
            if (remaining == 0) {
                if (act.seq[i].label->ins.op == Op::Loop) {
                    act.seq.resize(i + 1);
                    act.seq.back().idx = 0;  // continue: restart the loop body
                } else {
                    act.seq.resize(i);  // break: fall out past the label
                }
                return;
            }
            --remaining;
        }
        throw InternalError("branch depth out of range");
    }

    uint8_t expected_tag(uint64_t pointer) const {
        return uint8_t(pointer_tag(mask_index(pointer, rt_.mode())) | inst_.base_tag);
    }

    // Eq. 1-4: the access reduces to a value/state update iff the region's
    // tag is homogeneous and equals the pointer's tag; otherwise trap.
    uint64_t access_address(uint64_t k, uint64_t offset, unsigned width) {
        const Mode& mode = rt_.mode();
        if (mode.baseline()) {
            rt_.stats.bounds_checks++;
            if ((unsigned __int128)k + offset + width > inst_.mem_len)
                rule_trap(TrapKind::OutOfBounds, k + offset, true);
            return inst_.mem_base + k + offset;
        }
        uint64_t masked = mask_index(k, mode);
        unsigned __int128 ea128 =
            (unsigned __int128)inst_.mem_base + (masked & kIndexMask) + offset;
        if (ea128 + width > rt_.store.size())
            rule_trap(TrapKind::OutOfBounds, uint64_t(ea128 - inst_.mem_base), true);
        uint64_t ea = uint64_t(ea128);
        rt_.stats.tag_checks++;
        TagStore::GetError err;
        auto region = rt_.store.granule_tags_get(ea, width, &err);
        if (!region || *region != expected_tag(k)) {
            rt_.stats.tag_check_failures++;
            rule_trap(TrapKind::TagMismatch, ea, true);
        }
        return ea;
    }

    // Shared premise of Eq. 5-8 and the free rules: 16-byte aligned address
    // and length, region inside the instance linear memory.
    uint64_t segment_address(uint64_t k, uint64_t offset, uint64_t len) {
        uint64_t masked = mask_index(k, rt_.mode());
        unsigned __int128 rel = (unsigned __int128)(masked & kIndexMask) + offset;
        if (rel % kGranuleBytes != 0 || len % kGranuleBytes != 0)
            rule_trap(TrapKind::Unaligned, uint64_t(rel), true);
        if (rel + len > inst_.mem_len)
            rule_trap(TrapKind::OutOfBounds, uint64_t(rel), true);
        return inst_.mem_base + uint64_t(rel);
    }

    void host_call(HostFunc f) {
        switch (f) {
        case HostFunc::Malloc: give(heap::malloc_(rt_, inst_, take())); break;
        case HostFunc::Free: heap::free_(rt_, inst_, take()); break;
        case HostFunc::Realloc: {
            uint64_t n = take();
            uint64_t p = take();
            give(heap::realloc_(rt_, inst_, p, n));
            break;
        }
        case HostFunc::PrintI64: {
            uint64_t v = take();
            rt_.output += std::to_string(int64_t(v));
            rt_.output += '\n';
            if (rt_.print_hook) rt_.print_hook(rt_, inst_, v);
            break;
        }
        }
    }

    void reduce(Activation& act, const Node& node) {
        const Instruction& ins = node.ins;
        rt_.stats.instructions++;
        switch (ins.op) {
        case Op::I32Const: case Op::I64Const: give(ins.imm); break;

        case Op::I64Add: { uint64_t b = take(), a = take(); give(a + b); break; }
        case Op::I64Sub: { uint64_t b = take(), a = take(); give(a - b); break; }
        case Op::I64Mul: { uint64_t b = take(), a = take(); give(a * b); break; }
        case Op::I64And: { uint64_t b = take(), a = take(); give(a & b); break; }
        case Op::I64Or:  { uint64_t b = take(), a = take(); give(a | b); break; }
        case Op::I64Xor: { uint64_t b = take(), a = take(); give(a ^ b); break; }
        case Op::I64Shl: { uint64_t b = take(), a = take(); give(a << (b & 63)); break; }
        case Op::I64ShrU:{ uint64_t b = take(), a = take(); give(a >> (b & 63)); break; }
        case Op::I64Eq:  { uint64_t b = take(), a = take(); give(a == b); break; }
        case Op::I64Ne:  { uint64_t b = take(), a = take(); give(a != b); break; }
        case Op::I64LtU: { uint64_t b = take(), a = take(); give(a < b); break; }
        case Op::I64GeU: { uint64_t b = take(), a = take(); give(a >= b); break; }
        case Op::I32WrapI64: give(take() & 0xFFFFFFFFull); break;
        case Op::I64ExtendI32U: give(take() & 0xFFFFFFFFull); break;

        case Op::LocalGet: give(act.locals[size_t(ins.imm)]); break;
        case Op::LocalSet: act.locals[size_t(ins.imm)] = take(); break;
        case Op::LocalTee: act.locals[size_t(ins.imm)] = values_.back(); break;

        case Op::GlobalGet:
            if (ins.imm == kGlobalSp) give(inst_.sp);
            else if (ins.imm == kGlobalAmbient) give(inst_.ambient_global);
            else give(inst_.globals[size_t(ins.imm)]);
            break;
        case Op::GlobalSet: {
            uint64_t v = take();
            if (ins.imm == kGlobalSp) {
                if (v > inst_.stack_top) rule_trap(TrapKind::StackOverflow, v, true);
                inst_.sp = v;
            } else {
                const Global& g = inst_.module->module.globals[size_t(ins.imm)];
                inst_.globals[size_t(ins.imm)] = g.type == ValType::I32 ? (v & 0xFFFFFFFFull) : v;
            }
            break;
        }

        case Op::Drop: take(); break;

        case Op::Block: case Op::Loop:
            act.seq.push_back({&node.body, 0, &node});
            break;
        case Op::If: {
            uint64_t cond = take();
            if (cond != 0)
                act.seq.push_back({&node.body, 0, &node});
            else if (!node.else_body.empty())
                act.seq.push_back({&node.else_body, 0, &node});
            break;
        }
        case Op::Else: case Op::End:
            throw InternalError("structural opcode in reference term");

        case Op::Br:
            branch(act, ins.imm);
            break;
        case Op::BrIf:
            if (take() != 0) branch(act, ins.imm);
            break;

        case Op::Return:
            leave();
            break;

        case Op::Call:
            if (ins.imm & kHostFlag)
                host_call(HostFunc(ins.imm & 0xFF));
            else
                enter(uint32_t(ins.imm));
            break;

        case Op::CallIndirect: {
            uint32_t idx = uint32_t(take());
            const Module& m = inst_.module->module;
            if (idx >= m.table.size()) rule_trap(TrapKind::TableOutOfBounds);
            uint32_t callee = m.table[idx];
            if (!(*funcs_[callee].type == m.types[size_t(ins.imm)].type))
                rule_trap(TrapKind::IndirectTypeMismatch);
            enter(callee);
            break;
        }

        case Op::Unreachable:
            rule_trap(TrapKind::Unreachable);

        case Op::I64Load: case Op::I32Load: case Op::I64Load8U: {
            unsigned w = access_width(ins.op);
            uint64_t k = take();
            give(rt_.store.load_le(access_address(k, ins.imm, w), w));
            break;
        }
        case Op::I64Store: case Op::I32Store: case Op::I64Store8: {
            unsigned w = access_width(ins.op);
            uint64_t c = take();
            uint64_t k = take();
            rt_.store.store_le(access_address(k, ins.imm, w), c, w);
            break;
        }

        // Eq. 5/6: fresh pool tag, region retagged and zeroed, pointer
        // reduced to the retagged input.
        case Op::SegmentNew: {
            uint64_t l = take();
            uint64_t k = take();
            uint64_t ea = segment_address(k, ins.imm, l);
            uint64_t tagged = rt_.pool.new_tag(rt_.rng, k);
            if (rt_.store.granule_tags_set(ea, l, pointer_tag(tagged)))
                throw InternalError("segment.new set failed after premise check");
            rt_.store.zero(ea, l);
            give(tagged);
            break;
        }
        // Eq. 7/8: unconditional retag with the tag pointer's (masked) tag.
        case Op::SegmentSetTag: {
            uint64_t l = take();
            uint64_t t = take();
            uint64_t k = take();
            uint64_t ea = segment_address(k, ins.imm, l);
            if (rt_.store.granule_tags_set(ea, l, expected_tag(t)))
                throw InternalError("segment.set_tag set failed after premise check");
            break;
        }
        // Free rules: the whole region must still carry the pointer's tag,
        // then it moves to free_tag(tag(k)).
        case Op::SegmentFree: {
            uint64_t l = take();
            uint64_t k = take();
            uint64_t ea = segment_address(k, ins.imm, l);
            uint8_t expect = expected_tag(k);
            if (l > 0) {
                rt_.stats.tag_checks++;
                auto region = rt_.store.granule_tags_get(ea, l);
                if (!region || *region != expect) {
                    rt_.stats.tag_check_failures++;
                    rule_trap(TrapKind::TagMismatch, ea, true);
                }
                uint64_t freed = rt_.pool.free_tag(with_pointer_tag(k, expect));
                rt_.store.granule_tags_set(ea, l, pointer_tag(freed));
            }
            break;
        }

        // Eq. 9: k' = sign(k, k_s).
        case Op::PointerSign:
            give(pac::sign(take(), rt_.key, inst_.modifier));
            break;
        // Eq. 10/11: succeed iff k = sign(strip(k), k_s), else trap.
        case Op::PointerAuth: {
            uint64_t k = take();
            uint64_t stripped = pac_strip(k);
            if (k != pac::sign(stripped, rt_.key, inst_.modifier))
                rule_trap(TrapKind::AuthFailure);
            give(stripped);
            break;
        }

        case Op::FrameAddr: case Op::FuncptrMake: case Op::FuncptrCall:
            throw InternalError("surface pseudo-instruction reached the reference machine");
        }
    }

    Runtime& rt_;
    Instance& inst_;
    std::vector<RefFunction> funcs_;
    std::vector<uint64_t> values_;
    std::vector<Activation> acts_;
    uint64_t steps_ = 0;
};

}  // namespace cage
