#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cage/ast.hpp"

namespace cage {

namespace detail {

struct Token {
    enum Kind { LParen, RParen, Atom, String } kind;
    std::string text;
    size_t line, col;
};

// `;;` starts a line comment. `;;!` introduces a directive line; the only
// directive is `hardened`, the double-instrumentation guard marker.
inline std::vector<Token> tokenize(std::string_view src, bool* hardened) {
    std::vector<Token> out;
    size_t line = 1, col = 1;
    size_t i = 0;
    auto advance = [&](size_t n) {
        for (size_t k = 0; k < n; ++k) {
            if (src[i + k] == '\n') { ++line; col = 1; } else { ++col; }
        }
        i += n;
    };
    while (i < src.size()) {
        char c = src[i];
        if (c == ';' && i + 1 < src.size() && src[i + 1] == ';') {
            size_t end = src.find('\n', i);
            std::string_view comment = src.substr(i, end == std::string_view::npos ? src.size() - i : end - i);
            if (comment.rfind(";;!", 0) == 0) {
                std::string body(comment.substr(3));
                size_t b = body.find_first_not_of(" \t");
                size_t e = body.find_last_not_of(" \t\r");
                body = b == std::string::npos ? "" : body.substr(b, e - b + 1);
                if (body == "hardened") {
                    if (hardened) *hardened = true;
                } else {
                    throw ParseError(line, col, "unknown directive: " + body);
                }
            }
            advance(comment.size());
            continue;
        }
        if (c == '\n' || c == ' ' || c == '\t' || c == '\r') { advance(1); continue; }
        if (c == '(') { out.push_back({Token::LParen, "(", line, col}); advance(1); continue; }
        if (c == ')') { out.push_back({Token::RParen, ")", line, col}); advance(1); continue; }
        if (c == '"') {
            size_t end = i + 1;
            while (end < src.size() && src[end] != '"' && src[end] != '\n') ++end;
            if (end >= src.size() || src[end] != '"')
                throw ParseError(line, col, "unterminated string");
            out.push_back({Token::String, std::string(src.substr(i + 1, end - i - 1)), line, col});
            advance(end - i + 1);
            continue;
        }
        size_t end = i;
        while (end < src.size() && !std::isspace((unsigned char)src[end]) && src[end] != '(' &&
               src[end] != ')' && src[end] != '"' && src[end] != ';')
            ++end;
        out.push_back({Token::Atom, std::string(src.substr(i, end - i)), line, col});
        advance(end - i);
    }
    return out;
}

}  // namespace detail

class Parser {
public:
    static Module parse(std::string_view source) {
        Parser p(source);
        return p.run();
    }

private:
    using Token = detail::Token;

    explicit Parser(std::string_view source) {
        tokens_ = detail::tokenize(source, &hardened_);
    }

    Module run() {
        expect(Token::LParen, "expected (module");
        expect_atom("module");
        Module m;
        m.hardened = hardened_;
        while (!check(Token::RParen)) {
            expect(Token::LParen, "expected declaration or )");
            const Token& head = expect(Token::Atom, "expected declaration keyword");
            if (head.text == "type") parse_type(m);
            else if (head.text == "memory") parse_memory(m, head);
            else if (head.text == "global") parse_global(m, head);
            else if (head.text == "table") parse_table(m, head);
            else if (head.text == "export") parse_export(m, head);
            else if (head.text == "start") parse_start(m, head);
            else if (head.text == "func") parse_func(m, head);
            else fail(head, "unknown declaration: " + head.text);
        }
        next();  // module )
        if (pos_ != tokens_.size())
            fail(tokens_[pos_], "trailing content after module");
        resolve(m);
        return m;
    }

    // --- token helpers ---

    [[noreturn]] void fail(const Token& t, const std::string& msg) const {
        throw ParseError(t.line, t.col, msg);
    }

    [[noreturn]] void fail_eof(const std::string& msg) const {
        if (tokens_.empty()) throw ParseError(1, 1, msg);
        const Token& t = tokens_.back();
        throw ParseError(t.line, t.col, msg + " (unexpected end of input)");
    }

    bool check(Token::Kind k) const { return pos_ < tokens_.size() && tokens_[pos_].kind == k; }

    const Token& peek() const {
        if (pos_ >= tokens_.size()) fail_eof("unexpected end of input");
        return tokens_[pos_];
    }

    const Token& next() {
        if (pos_ >= tokens_.size()) fail_eof("unexpected end of input");
        return tokens_[pos_++];
    }

    const Token& expect(Token::Kind k, const std::string& msg) {
        const Token& t = next();
        if (t.kind != k) fail(t, msg);
        return t;
    }

    const Token& expect_atom(const std::string& text) {
        const Token& t = next();
        if (t.kind != Token::Atom || t.text != text)
            fail(t, "expected " + text);
        return t;
    }

    void expect_rparen() { expect(Token::RParen, "expected )"); }

    // --- small parsers ---

    std::string parse_name(const char* what) {
        const Token& t = next();
        if (t.kind != Token::Atom || t.text.size() < 2 || t.text[0] != '$')
            fail(t, std::string("expected $name for ") + what);
        std::string name = t.text.substr(1);
        for (char c : name)
            if (!std::isalnum((unsigned char)c) && c != '_' && c != '.' && c != '-')
                fail(t, "invalid character in name: " + t.text);
        // The __ namespace belongs to the tooling (guard slots, reserved
        // globals); hardened modules are machine-written and may use it.
        if (name.rfind("__", 0) == 0 && !hardened_)
            fail(t, "names starting with __ are reserved: " + t.text);
        return name;
    }

    ValType parse_valtype() {
        const Token& t = next();
        if (t.kind == Token::Atom && t.text == "i32") return ValType::I32;
        if (t.kind == Token::Atom && t.text == "i64") return ValType::I64;
        fail(t, "expected value type i32 or i64");
    }

    static bool looks_numeric(const std::string& s) {
        if (s.empty()) return false;
        if (s[0] == '-' && s.size() > 1) return std::isdigit((unsigned char)s[1]);
        return std::isdigit((unsigned char)s[0]);
    }

    uint64_t parse_uint(const Token& t, const char* what) {
        if (t.kind != Token::Atom || !looks_numeric(t.text))
            fail(t, std::string("expected unsigned integer for ") + what);
        if (t.text[0] == '-')
            fail(t, std::string(what) + " must be unsigned");
        errno = 0;
        char* end = nullptr;
        unsigned long long v = std::strtoull(t.text.c_str(), &end, 0);
        if (errno != 0 || end != t.text.c_str() + t.text.size())
            fail(t, "malformed integer: " + t.text);
        return v;
    }

    uint64_t parse_const(const Token& t, bool is32) {
        if (t.kind != Token::Atom || !looks_numeric(t.text))
            fail(t, "expected integer constant");
        errno = 0;
        char* end = nullptr;
        uint64_t bits;
        if (t.text[0] == '-') {
            long long v = std::strtoll(t.text.c_str(), &end, 0);
            if (errno != 0 || end != t.text.c_str() + t.text.size())
                fail(t, "malformed integer: " + t.text);
            if (is32 && (v < INT32_MIN)) fail(t, "constant out of i32 range");
            bits = uint64_t(v);
        } else {
            unsigned long long v = std::strtoull(t.text.c_str(), &end, 0);
            if (errno != 0 || end != t.text.c_str() + t.text.size())
                fail(t, "malformed integer: " + t.text);
            if (is32 && v > 0xFFFFFFFFull) fail(t, "constant out of i32 range");
            bits = v;
        }
        return is32 ? (bits & 0xFFFFFFFFull) : bits;
    }

    // --- declarations ---

    void parse_type(Module& m) {
        TypeDef td;
        if (check(Token::Atom) && peek().text[0] == '$') td.name = parse_name("type");
        expect(Token::LParen, "expected (func ...)");
        expect_atom("func");
        while (check(Token::LParen)) {
            next();
            const Token& kw = expect(Token::Atom, "expected param or result");
            if (kw.text == "param") {
                while (!check(Token::RParen)) td.type.params.push_back(parse_valtype());
            } else if (kw.text == "result") {
                while (!check(Token::RParen)) td.type.results.push_back(parse_valtype());
                if (td.type.results.size() > 1) fail(kw, "at most one result is supported");
            } else {
                fail(kw, "expected param or result");
            }
            expect_rparen();
        }
        expect_rparen();  // func
        expect_rparen();  // type
        if (!td.name.empty())
            for (const auto& t : m.types)
                if (t.name == td.name) fail_dup("type", td.name);
        m.types.push_back(std::move(td));
    }

    void parse_memory(Module& m, const Token& head) {
        if (m.has_memory) fail(head, "duplicate memory declaration");
        uint64_t pages = parse_uint(next(), "memory pages");
        if (pages < 1) fail(head, "memory must declare at least one page");
        m.has_memory = true;
        m.memory_pages = pages;
        expect_rparen();
    }

    void parse_global(Module& m, const Token& head) {
        Global g;
        g.name = parse_name("global");
        if (check(Token::LParen)) {
            next();
            expect_atom("mut");
            g.is_mutable = true;
            g.type = parse_valtype();
            expect_rparen();
        } else {
            g.type = parse_valtype();
        }
        g.init = parse_const(next(), g.type == ValType::I32);
        expect_rparen();
        for (const auto& other : m.globals)
            if (other.name == g.name) fail_dup("global", g.name);
        (void)head;
        m.globals.push_back(std::move(g));
    }

    void parse_table(Module& m, const Token& head) {
        if (m.has_table) fail(head, "duplicate table declaration");
        m.has_table = true;
        while (!check(Token::RParen))
            table_names_.push_back({parse_name("table entry"), head.line, head.col});
        expect_rparen();
    }

    void parse_export(Module& m, const Token& head) {
        const Token& name = expect(Token::String, "expected export name string");
        std::string func = parse_name("export target");
        expect_rparen();
        for (const auto& e : export_names_)
            if (e.first == name.text) fail_dup("export", name.text);
        export_names_.push_back({name.text, {func, head.line, head.col}});
        (void)m;
    }

    void parse_start(Module& m, const Token& head) {
        if (start_name_) fail(head, "duplicate start declaration");
        start_name_ = {parse_name("start function"), head.line, head.col};
        expect_rparen();
        (void)m;
    }

    void parse_func(Module& m, const Token& head) {
        Function f;
        f.name = parse_name("function");
        for (const auto& other : m.functions)
            if (other.name == f.name) fail_dup("function", f.name);
        bool saw_type = false;
        bool saw_instruction = false;
        while (true) {
            if (check(Token::RParen)) { next(); break; }
            if (check(Token::LParen)) {
                const Token& lp = next();
                if (saw_instruction)
                    fail(lp, "declarations must precede instructions");
                const Token& kw = expect(Token::Atom, "expected type, local or frame");
                if (kw.text == "type") {
                    if (saw_type) fail(kw, "duplicate type declaration");
                    saw_type = true;
                    const Token& ref = next();
                    if (ref.kind == Token::Atom && ref.text.size() > 1 && ref.text[0] == '$')
                        func_type_names_[m.functions.size()] = {ref.text.substr(1), ref.line, ref.col};
                    else
                        f.type_index = uint32_t(parse_uint(ref, "type index"));
                    expect_rparen();
                } else if (kw.text == "local") {
                    while (!check(Token::RParen)) f.locals.push_back(parse_valtype());
                    expect_rparen();
                } else if (kw.text == "frame") {
                    FrameSlot slot;
                    slot.name = parse_name("frame slot");
                    slot.size_bytes = parse_uint(next(), "frame slot size");
                    if (slot.size_bytes < 1) fail(kw, "frame slot size must be >= 1");
                    for (const auto& s : f.frame_slots)
                        if (s.name == slot.name) fail_dup("frame slot", slot.name);
                    f.frame_slots.push_back(std::move(slot));
                    expect_rparen();
                } else {
                    fail(kw, "expected type, local or frame");
                }
                continue;
            }
            // Flat instruction stream.
            saw_instruction = true;
            parse_instruction(m, f);
        }
        if (!saw_type && func_type_names_.find(m.functions.size()) == func_type_names_.end())
            f.type_index = implicit_void_type(m);
        check_balance(f, head);
        m.functions.push_back(std::move(f));
    }

    uint32_t implicit_void_type(Module& m) {
        for (uint32_t i = 0; i < m.types.size(); ++i)
            if (m.types[i].type == FuncType{})
                return i;
        m.types.push_back(TypeDef{});
        return uint32_t(m.types.size() - 1);
    }

    void parse_instruction(Module& m, Function& f) {
        const Token& t = next();
        if (t.kind != Token::Atom) fail(t, "expected instruction");
        const OpInfo* info = op_info_by_name(t.text);
        if (!info) fail(t, "unknown opcode: " + t.text);
        Instruction ins{info->op, 0};
        switch (info->imm) {
        case ImmKind::None:
            break;
        case ImmKind::ConstI32:
            ins.imm = parse_const(next(), true);
            break;
        case ImmKind::ConstI64:
            ins.imm = parse_const(next(), false);
            break;
        case ImmKind::LocalIdx:
            ins.imm = parse_uint(next(), "local index");
            break;
        case ImmKind::Depth:
            ins.imm = parse_uint(next(), "label depth");
            break;
        case ImmKind::Offset: {
            // Optional; defaults to 0. A following numeric atom is the offset.
            if (check(Token::Atom) && looks_numeric(peek().text))
                ins.imm = parse_uint(next(), "offset");
            break;
        }
        case ImmKind::GlobalRef: {
            const Token& ref = next();
            if (ref.kind == Token::Atom && ref.text.size() > 1 && ref.text[0] == '$') {
                std::string name = ref.text.substr(1);
                if (name == "__sp") ins.imm = kGlobalSp;
                else if (name == "__ambient") ins.imm = kGlobalAmbient;
                else {
                    pending_globals_.push_back({m.functions.size(), f.body.size(), name, ref.line, ref.col});
                }
            } else {
                ins.imm = parse_uint(ref, "global index");
            }
            break;
        }
        case ImmKind::FuncRef: {
            const Token& ref = next();
            if (ref.kind == Token::Atom && ref.text.size() > 1 && ref.text[0] == '$')
                pending_funcs_.push_back({m.functions.size(), f.body.size(), ref.text.substr(1), ref.line, ref.col});
            else
                ins.imm = parse_uint(ref, "function index");
            break;
        }
        case ImmKind::TypeRef: {
            const Token& ref = next();
            if (ref.kind == Token::Atom && ref.text.size() > 1 && ref.text[0] == '$')
                pending_types_.push_back({m.functions.size(), f.body.size(), ref.text.substr(1), ref.line, ref.col});
            else
                ins.imm = parse_uint(ref, "type index");
            break;
        }
        case ImmKind::SlotRef: {
            const Token& ref = next();
            if (ref.kind != Token::Atom || ref.text.size() < 2 || ref.text[0] != '$')
                fail(ref, "expected $slot for frame.addr");
            std::string name = ref.text.substr(1);
            bool found = false;
            for (uint32_t i = 0; i < f.frame_slots.size(); ++i)
                if (f.frame_slots[i].name == name) { ins.imm = i; found = true; break; }
            if (!found) fail(ref, "unknown frame slot: $" + name);
            break;
        }
        }
        f.body.push_back(ins);
    }

    // Every block/loop/if needs a matching end, closed before the function ends.
    void check_balance(const Function& f, const Token& head) {
        long depth = 0;
        std::vector<Op> stack;
        for (const auto& ins : f.body) {
            switch (ins.op) {
            case Op::Block: case Op::Loop: case Op::If:
                stack.push_back(ins.op);
                ++depth;
                break;
            case Op::Else:
                if (stack.empty() || stack.back() != Op::If)
                    fail(head, "else without matching if in $" + f.name);
                stack.back() = Op::Else;
                break;
            case Op::End:
                if (stack.empty())
                    fail(head, "end without matching block in $" + f.name);
                stack.pop_back();
                --depth;
                break;
            default:
                break;
            }
        }
        if (depth != 0)
            fail(head, "unclosed block in $" + f.name);
    }

    [[noreturn]] void fail_dup(const char* what, const std::string& name) {
        const Token& t = tokens_[pos_ > 0 ? pos_ - 1 : 0];
        fail(t, std::string("duplicate ") + what + " name: " + name);
    }

    // --- late name resolution (declarations may appear in any order) ---

    struct PendingRef {
        size_t func, instr;
        std::string name;
        size_t line, col;
    };
    struct NamedRef {
        std::string name;
        size_t line, col;
    };

    void resolve(Module& m) {
        for (const auto& r : table_names_) {
            auto idx = m.function_index(r.name);
            if (!idx) throw ParseError(r.line, r.col, "table entry names unknown function: $" + r.name);
            m.table.push_back(*idx);
        }
        for (const auto& [name, ref] : export_names_) {
            auto idx = m.function_index(ref.name);
            if (!idx) throw ParseError(ref.line, ref.col, "export targets unknown function: $" + ref.name);
            m.exports.push_back({name, *idx});
        }
        if (start_name_) {
            auto idx = m.function_index(start_name_->name);
            if (!idx)
                throw ParseError(start_name_->line, start_name_->col,
                                 "start names unknown function: $" + start_name_->name);
            m.start = *idx;
        }
        for (auto& [fidx, ref] : func_type_names_) {
            bool found = false;
            for (uint32_t i = 0; i < m.types.size(); ++i)
                if (m.types[i].name == ref.name) {
                    m.functions[fidx].type_index = i;
                    found = true;
                    break;
                }
            if (!found) throw ParseError(ref.line, ref.col, "unknown type: $" + ref.name);
        }
        for (const auto& r : pending_funcs_) {
            Instruction& ins = m.functions[r.func].body[r.instr];
            if (auto idx = m.function_index(r.name)) {
                ins.imm = *idx;
            } else if (auto host = host_func_by_name(r.name)) {
                if (ins.op != Op::Call)
                    throw ParseError(r.line, r.col, "host functions cannot be used here: $" + r.name);
                ins.imm = kHostFlag | uint64_t(*host);
            } else {
                throw ParseError(r.line, r.col, "unknown function: $" + r.name);
            }
        }
        for (const auto& r : pending_types_) {
            bool found = false;
            for (uint32_t i = 0; i < m.types.size(); ++i)
                if (m.types[i].name == r.name) {
                    m.functions[r.func].body[r.instr].imm = i;
                    found = true;
                    break;
                }
            if (!found) throw ParseError(r.line, r.col, "unknown type: $" + r.name);
        }
        for (const auto& r : pending_globals_) {
            bool found = false;
            for (uint32_t i = 0; i < m.globals.size(); ++i)
                if (m.globals[i].name == r.name) {
                    m.functions[r.func].body[r.instr].imm = i;
                    found = true;
                    break;
                }
            if (!found) throw ParseError(r.line, r.col, "unknown global: $" + r.name);
        }
    }

    std::vector<Token> tokens_;
    size_t pos_ = 0;
    bool hardened_ = false;

    std::vector<NamedRef> table_names_;
    std::vector<std::pair<std::string, NamedRef>> export_names_;
    std::optional<NamedRef> start_name_;
    std::unordered_map<size_t, NamedRef> func_type_names_;
    std::vector<PendingRef> pending_funcs_;
    std::vector<PendingRef> pending_types_;
    std::vector<PendingRef> pending_globals_;
};

inline Module parse(std::string_view source) { return Parser::parse(source); }

}  // namespace cage
