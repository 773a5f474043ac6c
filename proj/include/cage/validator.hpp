#pragma once

#include <string>
#include <vector>

#include "cage/ast.hpp"
#include "cage/tag_memory.hpp"

namespace cage {

// Instruction gating. Segment instructions exist only with the internal
// safety extension; sign/auth only with pointer authentication.
struct FeatureSet {
    bool segments = false;
    bool pointer_auth = false;

    static FeatureSet for_mode(const Mode& m) { return {m.internal, m.ptr_auth}; }
    static FeatureSet all() { return {true, true}; }
};

struct ValidatedModule {
    Module module;
    FeatureSet features;
};

namespace detail {

enum class VT : uint8_t { I32, I64, Unknown };

inline VT vt(ValType t) { return t == ValType::I32 ? VT::I32 : VT::I64; }

inline const char* vt_name(VT t) {
    switch (t) {
    case VT::I32: return "i32";
    case VT::I64: return "i64";
    default: return "unknown";
    }
}

class FunctionChecker {
public:
    FunctionChecker(const Module& m, const Function& f, const FeatureSet& feats)
        : m_(m), f_(f), feats_(feats) {
        const FuncType& ft = m.types[f.type_index].type;
        for (auto p : ft.params) locals_.push_back(vt(p));
        for (auto l : f.locals) locals_.push_back(vt(l));
        for (auto r : ft.results) results_.push_back(vt(r));
        ctrls_.push_back({Op::Call /* function frame */, 0, false});
    }

    void run() {
        for (idx_ = 0; idx_ < f_.body.size(); ++idx_)
            step(f_.body[idx_]);
        idx_ = f_.body.size();
        if (ctrls_.size() != 1)
            error("unclosed block at end of function");
        // Implicit function end: exactly the declared results remain.
        for (size_t i = results_.size(); i-- > 0;)
            pop(results_[i]);
        if (vals_.size() != ctrls_.back().height && !ctrls_.back().unreachable)
            error("values left on operand stack at end of function");
    }

private:
    struct Ctrl {
        Op opcode;
        size_t height;
        bool unreachable;
    };

    [[noreturn]] void error(const std::string& msg, bool gated = false) const {
        throw ValidationError(f_.name, idx_, msg, gated);
    }

    void push(VT v) { vals_.push_back(v); }

    VT pop() {
        Ctrl& c = ctrls_.back();
        if (vals_.size() == c.height) {
            if (c.unreachable) return VT::Unknown;
            error("operand stack underflow");
        }
        VT v = vals_.back();
        vals_.pop_back();
        return v;
    }

    VT pop(VT expect) {
        VT v = pop();
        if (v != expect && v != VT::Unknown)
            error(std::string("expected ") + vt_name(expect) + ", found " + vt_name(v));
        return v;
    }

    void set_unreachable() {
        Ctrl& c = ctrls_.back();
        vals_.resize(c.height);
        c.unreachable = true;
    }

    void require_memory(const char* what) {
        if (!m_.has_memory)
            error(std::string(what) + " requires a declared memory");
    }

    void require_table(const char* what) {
        if (!m_.has_table)
            error(std::string(what) + " requires a declared table");
    }

    VT local_type(uint64_t i) {
        if (i >= locals_.size()) error("local index out of range");
        return locals_[size_t(i)];
    }

    // Reserved runtime globals resolve here alongside module globals.
    std::pair<VT, bool> global_type(uint64_t i) {
        if (i == kGlobalSp) return {VT::I64, true};
        if (i == kGlobalAmbient) return {VT::I64, false};
        if (i >= m_.globals.size()) error("global index out of range");
        const Global& g = m_.globals[size_t(i)];
        return {vt(g.type), g.is_mutable};
    }

    const FuncType& type_at(uint64_t i) {
        if (i >= m_.types.size()) error("type index out of range");
        return m_.types[size_t(i)].type;
    }

    void apply_call(const FuncType& ft) {
        for (size_t i = ft.params.size(); i-- > 0;)
            pop(vt(ft.params[i]));
        for (auto r : ft.results)
            push(vt(r));
    }

    void step(const Instruction& ins) {
        switch (ins.op) {
        case Op::I32Const: push(VT::I32); break;
        case Op::I64Const: push(VT::I64); break;

        case Op::I64Add: case Op::I64Sub: case Op::I64Mul:
        case Op::I64And: case Op::I64Or: case Op::I64Xor:
        case Op::I64Shl: case Op::I64ShrU:
            pop(VT::I64); pop(VT::I64); push(VT::I64);
            break;

        case Op::I64Eq: case Op::I64Ne: case Op::I64LtU: case Op::I64GeU:
            pop(VT::I64); pop(VT::I64); push(VT::I32);
            break;

        case Op::I32WrapI64: pop(VT::I64); push(VT::I32); break;
        case Op::I64ExtendI32U: pop(VT::I32); push(VT::I64); break;

        case Op::LocalGet: push(local_type(ins.imm)); break;
        case Op::LocalSet: pop(local_type(ins.imm)); break;
        case Op::LocalTee: {
            VT t = local_type(ins.imm);
            pop(t);
            push(t);
            break;
        }

        case Op::GlobalGet: push(global_type(ins.imm).first); break;
        case Op::GlobalSet: {
            auto [t, is_mut] = global_type(ins.imm);
            if (!is_mut) error("global.set of immutable global");
            pop(t);
            break;
        }

        case Op::Drop: pop(); break;

        case Op::Block: case Op::Loop:
            ctrls_.push_back({ins.op, vals_.size(), false});
            break;
        case Op::If:
            pop(VT::I32);
            ctrls_.push_back({Op::If, vals_.size(), false});
            break;
        case Op::Else: {
            Ctrl& c = ctrls_.back();
            if (ctrls_.size() < 2 || c.opcode != Op::If)
                error("else without matching if");
            if (vals_.size() != c.height && !c.unreachable)
                error("values left on operand stack at else");
            vals_.resize(c.height);
            c.opcode = Op::Else;
            c.unreachable = false;
            break;
        }
        case Op::End: {
            if (ctrls_.size() < 2)
                error("end without matching block");
            Ctrl& c = ctrls_.back();
            if (vals_.size() != c.height && !c.unreachable)
                error("values left on operand stack at end");
            vals_.resize(c.height);
            ctrls_.pop_back();
            break;
        }

        // Branches target explicit blocks only (labels carry no values).
        case Op::Br:
            if (ins.imm + 2 > ctrls_.size()) error("branch target out of range");
            set_unreachable();
            break;
        case Op::BrIf:
            pop(VT::I32);
            if (ins.imm + 2 > ctrls_.size()) error("branch target out of range");
            break;

        case Op::Return:
            for (size_t i = results_.size(); i-- > 0;)
                pop(results_[i]);
            set_unreachable();
            break;

        case Op::Call: {
            if (ins.imm & kHostFlag) {
                uint64_t id = ins.imm & ~kHostFlag;
                if (id >= kHostFuncCount) error("unknown host function");
                apply_call(host_func_type(HostFunc(id)));
            } else {
                if (ins.imm >= m_.functions.size()) error("function index out of range");
                apply_call(m_.types[m_.functions[size_t(ins.imm)].type_index].type);
            }
            break;
        }

        case Op::CallIndirect: {
            require_table("call_indirect");
            const FuncType& ft = type_at(ins.imm);
            pop(VT::I32);
            apply_call(ft);
            break;
        }

        case Op::FuncptrCall: {
            require_table("funcptr.call");
            const FuncType& ft = type_at(ins.imm);
            pop(VT::I64);
            apply_call(ft);
            break;
        }

        case Op::FuncptrMake: {
            require_table("funcptr.make");
            if (ins.imm & kHostFlag) error("funcptr.make of host function");
            if (ins.imm >= m_.functions.size()) error("function index out of range");
            if (!m_.table_index_of(uint32_t(ins.imm)))
                error("funcptr.make target is not in the table");
            push(VT::I64);
            break;
        }

        case Op::Unreachable:
            set_unreachable();
            break;

        case Op::I64Load: case Op::I32Load: case Op::I64Load8U:
            require_memory(op_info(ins.op).name);
            pop(VT::I64);
            push(ins.op == Op::I32Load ? VT::I32 : VT::I64);
            break;
        case Op::I64Store: case Op::I64Store8:
            require_memory(op_info(ins.op).name);
            pop(VT::I64);
            pop(VT::I64);
            break;
        case Op::I32Store:
            require_memory("i32.store");
            pop(VT::I32);
            pop(VT::I64);
            break;

        case Op::FrameAddr:
            if (ins.imm >= f_.frame_slots.size()) error("frame slot index out of range");
            push(VT::I64);
            break;

        // segment.new : i64 i64 -> i64
        case Op::SegmentNew:
            gate_segments();
            require_memory("segment.new");
            pop(VT::I64); pop(VT::I64);
            push(VT::I64);
            break;
        // segment.set_tag : i64 i64 i64 -> e
        case Op::SegmentSetTag:
            gate_segments();
            require_memory("segment.set_tag");
            pop(VT::I64); pop(VT::I64); pop(VT::I64);
            break;
        // segment.free : i64 i64 -> e
        case Op::SegmentFree:
            gate_segments();
            require_memory("segment.free");
            pop(VT::I64); pop(VT::I64);
            break;

        // i64.pointer_sign / i64.pointer_auth : i64 -> i64
        case Op::PointerSign: case Op::PointerAuth:
            if (!feats_.pointer_auth)
                error(std::string(op_info(ins.op).name) + " requires the pointer-auth feature", true);
            pop(VT::I64);
            push(VT::I64);
            break;
        }
    }

    void gate_segments() {
        if (!feats_.segments)
            error(std::string(op_info(f_.body[idx_].op).name) + " requires the internal-safety feature", true);
    }

    const Module& m_;
    const Function& f_;
    FeatureSet feats_;
    std::vector<VT> locals_;
    std::vector<VT> results_;
    std::vector<VT> vals_;
    std::vector<Ctrl> ctrls_;
    size_t idx_ = 0;
};

}  // namespace detail

inline void check_function(const Module& m, const Function& f, const FeatureSet& features) {
    detail::FunctionChecker(m, f, features).run();
}

// Whole-module validation: structure first, then per-function stack typing.
inline ValidatedModule validate(Module m, FeatureSet features) {
    for (size_t i = 0; i < m.types.size(); ++i)
        if (m.types[i].type.results.size() > 1)
            throw ValidationError("", i, "at most one result is supported");
    for (const auto& f : m.functions) {
        if (f.type_index >= m.types.size())
            throw ValidationError(f.name, 0, "function type index out of range");
        for (const auto& s : f.frame_slots)
            if (s.size_bytes < 1)
                throw ValidationError(f.name, 0, "frame slot size must be >= 1");
    }
    for (uint32_t idx : m.table)
        if (idx >= m.functions.size())
            throw ValidationError("", 0, "table entry names an undeclared function");
    for (size_t i = 0; i < m.exports.size(); ++i) {
        if (m.exports[i].func_index >= m.functions.size())
            throw ValidationError("", 0, "export targets an undeclared function");
        for (size_t j = 0; j < i; ++j)
            if (m.exports[j].name == m.exports[i].name)
                throw ValidationError("", 0, "duplicate export name: " + m.exports[i].name);
    }
    if (m.start) {
        if (*m.start >= m.functions.size())
            throw ValidationError("", 0, "start names an undeclared function");
        const FuncType& ft = m.types[m.functions[*m.start].type_index].type;
        if (!ft.params.empty() || !ft.results.empty())
            throw ValidationError(m.functions[*m.start].name, 0, "start function must have type () -> ()");
    }
    for (const auto& f : m.functions)
        check_function(m, f, features);
    return ValidatedModule{std::move(m), features};
}

}  // namespace cage
