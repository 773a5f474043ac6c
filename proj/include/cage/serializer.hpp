#pragma once

#include <sstream>
#include <string>

#include "cage/ast.hpp"

namespace cage {

namespace detail {

inline void write_const(std::ostream& os, const Instruction& ins) {
    if (ins.op == Op::I32Const)
        os << int32_t(uint32_t(ins.imm));
    else
        os << int64_t(ins.imm);
}

inline void write_instruction(std::ostream& os, const Module& m, const Function& f,
                              const Instruction& ins) {
    const OpInfo& info = op_info(ins.op);
    os << info.name;
    switch (info.imm) {
    case ImmKind::None:
        break;
    case ImmKind::ConstI32:
    case ImmKind::ConstI64:
        os << ' ';
        write_const(os, ins);
        break;
    case ImmKind::LocalIdx:
    case ImmKind::Depth:
    case ImmKind::Offset:
    case ImmKind::TypeRef:
        os << ' ' << ins.imm;
        break;
    case ImmKind::GlobalRef:
        if (ins.imm == kGlobalSp) os << " $__sp";
        else if (ins.imm == kGlobalAmbient) os << " $__ambient";
        else os << " $" << m.globals[size_t(ins.imm)].name;
        break;
    case ImmKind::FuncRef:
        if (ins.imm & kHostFlag)
            os << " $" << host_func_name(HostFunc(ins.imm & 0xFF));
        else
            os << " $" << m.functions[size_t(ins.imm)].name;
        break;
    case ImmKind::SlotRef:
        os << " $" << f.frame_slots[size_t(ins.imm)].name;
        break;
    }
}

}  // namespace detail

// Canonical text form; the output reparses to an identical module.
inline std::string serialize(const Module& m) {
    std::ostringstream os;
    if (m.hardened) os << ";;! hardened\n";
    os << "(module\n";
    for (const auto& t : m.types) {
        os << "  (type ";
        if (!t.name.empty()) os << '$' << t.name << ' ';
        os << "(func";
        if (!t.type.params.empty()) {
            os << " (param";
            for (auto p : t.type.params) os << ' ' << to_string(p);
            os << ')';
        }
        if (!t.type.results.empty()) {
            os << " (result";
            for (auto r : t.type.results) os << ' ' << to_string(r);
            os << ')';
        }
        os << "))\n";
    }
    if (m.has_memory) os << "  (memory " << m.memory_pages << ")\n";
    for (const auto& g : m.globals) {
        os << "  (global $" << g.name << ' ';
        if (g.is_mutable)
            os << "(mut " << to_string(g.type) << ")";
        else
            os << to_string(g.type);
        os << ' ';
        if (g.type == ValType::I32) os << int32_t(uint32_t(g.init));
        else os << int64_t(g.init);
        os << ")\n";
    }
    if (m.has_table) {
        os << "  (table";
        for (uint32_t idx : m.table) os << " $" << m.functions[idx].name;
        os << ")\n";
    }
    for (const auto& f : m.functions) {
        os << "  (func $" << f.name << " (type " << f.type_index << ")";
        if (!f.locals.empty()) {
            os << "\n    (local";
            for (auto t : f.locals) os << ' ' << to_string(t);
            os << ')';
        }
        for (const auto& s : f.frame_slots)
            os << "\n    (frame $" << s.name << ' ' << s.size_bytes << ')';
        os << '\n';
        int depth = 1;
        for (const auto& ins : f.body) {
            if (ins.op == Op::End || ins.op == Op::Else) --depth;
            for (int i = 0; i <= depth; ++i) os << "  ";
            detail::write_instruction(os, m, f, ins);
            os << '\n';
            if (ins.op == Op::Block || ins.op == Op::Loop || ins.op == Op::If || ins.op == Op::Else)
                ++depth;
        }
        os << "  )\n";
    }
    for (const auto& e : m.exports)
        os << "  (export \"" << e.name << "\" $" << m.functions[e.func_index].name << ")\n";
    if (m.start)
        os << "  (start $" << m.functions[*m.start].name << ")\n";
    os << ")\n";
    return os.str();
}

}  // namespace cage
