#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cage/common.hpp"

namespace cage {

enum class ValType : uint8_t { I32, I64 };

inline const char* to_string(ValType t) { return t == ValType::I32 ? "i32" : "i64"; }

enum class Op : uint8_t {
    I32Const, I64Const,
    I64Add, I64Sub, I64Mul, I64And, I64Or, I64Xor, I64Shl, I64ShrU,
    I64Eq, I64Ne, I64LtU, I64GeU,
    I32WrapI64, I64ExtendI32U,
    LocalGet, LocalSet, LocalTee,
    GlobalGet, GlobalSet,
    Drop,
    Block, Loop, If, Else, End,
    Br, BrIf, Return,
    Call, CallIndirect,
    Unreachable,
    I64Load, I64Store, I32Load, I32Store, I64Load8U, I64Store8,
    FrameAddr, FuncptrMake, FuncptrCall,
    SegmentNew, SegmentSetTag, SegmentFree,
    PointerSign, PointerAuth,
};

// Host functions the runtime provides to every guest.
enum class HostFunc : uint8_t { Malloc, Free, Realloc, PrintI64 };
inline constexpr uint64_t kHostFlag = 1ull << 32;
inline constexpr size_t kHostFuncCount = 4;

inline const char* host_func_name(HostFunc f) {
    switch (f) {
    case HostFunc::Malloc: return "env.malloc";
    case HostFunc::Free: return "env.free";
    case HostFunc::Realloc: return "env.realloc";
    case HostFunc::PrintI64: return "env.print_i64";
    }
    return "?";
}

// Reserved globals provided by the runtime at instantiation.
inline constexpr uint64_t kGlobalSp = ~0ull;        // $__sp, mutable i64
inline constexpr uint64_t kGlobalAmbient = ~0ull - 1;  // $__ambient, immutable i64

// One instruction: opcode plus up to one immediate.
//   consts            imm = value bits
//   local.*           imm = local index (params first, then locals)
//   global.*          imm = global index or kGlobalSp/kGlobalAmbient
//   br/br_if          imm = label depth (innermost explicit block = 0)
//   call              imm = function index, or kHostFlag | HostFunc
//   call_indirect     imm = type index
//   funcptr.call      imm = type index
//   funcptr.make      imm = function index
//   frame.addr        imm = frame-slot index within the function
//   loads/stores      imm = constant byte offset
//   segment.*         imm = constant unsigned byte offset
struct Instruction {
    Op op;
    uint64_t imm = 0;

    bool operator==(const Instruction&) const = default;
};

struct FuncType {
    std::vector<ValType> params;
    std::vector<ValType> results;  // at most one

    bool operator==(const FuncType&) const = default;
};

struct TypeDef {
    std::string name;  // may be empty
    FuncType type;

    bool operator==(const TypeDef&) const = default;
};

struct FrameSlot {
    std::string name;
    uint64_t size_bytes = 0;  // >= 1; declared order = position in the list

    bool operator==(const FrameSlot&) const = default;
};

struct Global {
    std::string name;
    bool is_mutable = false;
    ValType type = ValType::I64;
    uint64_t init = 0;

    bool operator==(const Global&) const = default;
};

struct Function {
    std::string name;
    uint32_t type_index = 0;
    std::vector<ValType> locals;  // beyond the parameters
    std::vector<FrameSlot> frame_slots;
    std::vector<Instruction> body;

    bool operator==(const Function&) const = default;
};

struct Export {
    std::string name;
    uint32_t func_index = 0;

    bool operator==(const Export&) const = default;
};

struct Module {
    std::vector<TypeDef> types;
    std::vector<Function> functions;
    bool has_table = false;
    std::vector<uint32_t> table;  // function indices
    bool has_memory = false;
    uint64_t memory_pages = 0;
    std::vector<Global> globals;
    std::vector<Export> exports;
    std::optional<uint32_t> start;
    bool hardened = false;  // set by the marker directive / hardening pass

    bool operator==(const Module&) const = default;

    const Function* find_function(const std::string& name) const {
        for (const auto& f : functions)
            if (f.name == name) return &f;
        return nullptr;
    }

    std::optional<uint32_t> function_index(const std::string& name) const {
        for (uint32_t i = 0; i < functions.size(); ++i)
            if (functions[i].name == name) return i;
        return std::nullopt;
    }

    std::optional<uint32_t> export_target(const std::string& name) const {
        for (const auto& e : exports)
            if (e.name == name) return e.func_index;
        return std::nullopt;
    }

    // First table slot holding the function, if any.
    std::optional<uint32_t> table_index_of(uint32_t func_index) const {
        for (uint32_t i = 0; i < table.size(); ++i)
            if (table[i] == func_index) return i;
        return std::nullopt;
    }
};

inline FuncType host_func_type(HostFunc f) {
    using VT = ValType;
    switch (f) {
    case HostFunc::Malloc: return {{VT::I64}, {VT::I64}};
    case HostFunc::Free: return {{VT::I64}, {}};
    case HostFunc::Realloc: return {{VT::I64, VT::I64}, {VT::I64}};
    case HostFunc::PrintI64: return {{VT::I64}, {}};
    }
    return {};
}

inline std::optional<HostFunc> host_func_by_name(const std::string& name) {
    for (size_t i = 0; i < kHostFuncCount; ++i)
        if (name == host_func_name(HostFunc(i))) return HostFunc(i);
    return std::nullopt;
}

// Immediate classes shared by the parser, serializer and validator.
enum class ImmKind : uint8_t {
    None,
    ConstI32,
    ConstI64,
    LocalIdx,
    GlobalRef,
    Depth,
    FuncRef,   // call / funcptr.make
    TypeRef,   // call_indirect / funcptr.call
    SlotRef,   // frame.addr
    Offset,    // loads/stores/segment ops: constant unsigned offset
};

struct OpInfo {
    Op op;
    const char* name;
    ImmKind imm;
};

inline const std::vector<OpInfo>& op_table() {
    static const std::vector<OpInfo> table = {
        {Op::I32Const, "i32.const", ImmKind::ConstI32},
        {Op::I64Const, "i64.const", ImmKind::ConstI64},
        {Op::I64Add, "i64.add", ImmKind::None},
        {Op::I64Sub, "i64.sub", ImmKind::None},
        {Op::I64Mul, "i64.mul", ImmKind::None},
        {Op::I64And, "i64.and", ImmKind::None},
        {Op::I64Or, "i64.or", ImmKind::None},
        {Op::I64Xor, "i64.xor", ImmKind::None},
        {Op::I64Shl, "i64.shl", ImmKind::None},
        {Op::I64ShrU, "i64.shr_u", ImmKind::None},
        {Op::I64Eq, "i64.eq", ImmKind::None},
        {Op::I64Ne, "i64.ne", ImmKind::None},
        {Op::I64LtU, "i64.lt_u", ImmKind::None},
        {Op::I64GeU, "i64.ge_u", ImmKind::None},
        {Op::I32WrapI64, "i32.wrap_i64", ImmKind::None},
        {Op::I64ExtendI32U, "i64.extend_i32_u", ImmKind::None},
        {Op::LocalGet, "local.get", ImmKind::LocalIdx},
        {Op::LocalSet, "local.set", ImmKind::LocalIdx},
        {Op::LocalTee, "local.tee", ImmKind::LocalIdx},
        {Op::GlobalGet, "global.get", ImmKind::GlobalRef},
        {Op::GlobalSet, "global.set", ImmKind::GlobalRef},
        {Op::Drop, "drop", ImmKind::None},
        {Op::Block, "block", ImmKind::None},
        {Op::Loop, "loop", ImmKind::None},
        {Op::If, "if", ImmKind::None},
        {Op::Else, "else", ImmKind::None},
        {Op::End, "end", ImmKind::None},
        {Op::Br, "br", ImmKind::Depth},
        {Op::BrIf, "br_if", ImmKind::Depth},
        {Op::Return, "return", ImmKind::None},
        {Op::Call, "call", ImmKind::FuncRef},
        {Op::CallIndirect, "call_indirect", ImmKind::TypeRef},
        {Op::Unreachable, "unreachable", ImmKind::None},
        {Op::I64Load, "i64.load", ImmKind::Offset},
        {Op::I64Store, "i64.store", ImmKind::Offset},
        {Op::I32Load, "i32.load", ImmKind::Offset},
        {Op::I32Store, "i32.store", ImmKind::Offset},
        {Op::I64Load8U, "i64.load8_u", ImmKind::Offset},
        {Op::I64Store8, "i64.store8", ImmKind::Offset},
        {Op::FrameAddr, "frame.addr", ImmKind::SlotRef},
        {Op::FuncptrMake, "funcptr.make", ImmKind::FuncRef},
        {Op::FuncptrCall, "funcptr.call", ImmKind::TypeRef},
        {Op::SegmentNew, "segment.new", ImmKind::Offset},
        {Op::SegmentSetTag, "segment.set_tag", ImmKind::Offset},
        {Op::SegmentFree, "segment.free", ImmKind::Offset},
        {Op::PointerSign, "i64.pointer_sign", ImmKind::None},
        {Op::PointerAuth, "i64.pointer_auth", ImmKind::None},
    };
    return table;
}

inline const OpInfo& op_info(Op op) { return op_table()[size_t(op)]; }

inline const OpInfo* op_info_by_name(const std::string& name) {
    for (const auto& info : op_table())
        if (name == info.name) return &info;
    return nullptr;
}

// Memory access width in bytes; 0 for non-memory opcodes.
inline unsigned access_width(Op op) {
    switch (op) {
    case Op::I64Load: case Op::I64Store: return 8;
    case Op::I32Load: case Op::I32Store: return 4;
    case Op::I64Load8U: case Op::I64Store8: return 1;
    default: return 0;
    }
}

inline bool is_load(Op op) {
    return op == Op::I64Load || op == Op::I32Load || op == Op::I64Load8U;
}

inline bool is_store(Op op) {
    return op == Op::I64Store || op == Op::I32Store || op == Op::I64Store8;
}

}  // namespace cage
