#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cage/harden.hpp"
#include "cage/interpreter.hpp"
#include "cage/parser.hpp"
#include "cage/runtime.hpp"
#include "cage/serializer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitTrap = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitUsage = 3;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw cage::UsageError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw cage::UsageError("cannot write " + path);
    out << content;
}

cage::Mode parse_mode(const std::string& spec) {
    cage::Mode mode;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        if (tok == "internal") mode.internal = true;
        else if (tok == "external") mode.external = true;
        else if (tok == "ptrauth") mode.ptr_auth = true;
        else throw cage::UsageError("unknown mode: " + tok + " (expected internal, external, ptrauth)");
    }
    return mode;
}

uint64_t seed_from_env() {
    const char* env = std::getenv("CAGE_SEED");
    if (!env) return 0;
    return std::strtoull(env, nullptr, 0);
}

// `key = value` lines, # comments. Mirrors the run flags.
void apply_config_file(const std::string& path, cage::RuntimeConfig& cfg, bool& mode_set) {
    std::istringstream in(read_file(path));
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        size_t eq = line.find('=');
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (eq == std::string::npos)
            throw cage::UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
        auto trim = [](std::string s) {
            size_t b = s.find_first_not_of(" \t\r");
            size_t e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key == "mode") {
            cfg.mode = parse_mode(value);
            mode_set = true;
        } else if (key == "seed") {
            cfg.seed = std::strtoull(value.c_str(), nullptr, 0);
        } else if (key == "arena_bytes") {
            cfg.arena_bytes = std::strtoull(value.c_str(), nullptr, 0);
        } else if (key == "stack_bytes") {
            cfg.stack_bytes = std::strtoull(value.c_str(), nullptr, 0);
        } else if (key == "heap_bytes") {
            cfg.heap_bytes = std::strtoull(value.c_str(), nullptr, 0);
        } else if (key == "max_call_depth") {
            cfg.max_call_depth = uint32_t(std::strtoull(value.c_str(), nullptr, 0));
        } else {
            throw cage::UsageError(path + ":" + std::to_string(lineno) + ": unknown key " + key);
        }
    }
}

struct RunArgs {
    std::vector<std::string> files;
    std::string mode_spec;
    bool mode_given = false;
    uint64_t seed = 0;
    bool seed_given = false;
    std::vector<std::string> invoke;
    bool stats = false;
    std::string dump_tags;
    std::string config_file;
    uint64_t arena_bytes = 0, stack_bytes = 0, heap_bytes = 0;
    uint32_t max_call_depth = 0;
};

int cmd_run(const RunArgs& a) {
    cage::RuntimeConfig cfg;
    cfg.seed = seed_from_env();
    bool mode_set = false;
    if (!a.config_file.empty()) apply_config_file(a.config_file, cfg, mode_set);
    if (a.mode_given) cfg.mode = parse_mode(a.mode_spec);
    if (a.seed_given) cfg.seed = a.seed;
    if (a.arena_bytes) cfg.arena_bytes = a.arena_bytes;
    if (a.stack_bytes) cfg.stack_bytes = a.stack_bytes;
    if (a.heap_bytes) cfg.heap_bytes = a.heap_bytes;
    if (a.max_call_depth) cfg.max_call_depth = a.max_call_depth;

    auto rt = cage::create_runtime(cfg);
    auto features = cage::FeatureSet::for_mode(cfg.mode);

    auto finish = [&](int code, const std::vector<uint64_t>& results = {}) {
        std::cout << rt->output;
        for (uint64_t r : results) std::cout << int64_t(r) << '\n';
        if (a.stats && code != kExitInvalid) {
            auto s = cage::stats(*rt);
            std::cout << "instructions=" << s.instructions << '\n'
                      << "tag_checks=" << s.tag_checks << '\n'
                      << "tag_check_failures=" << s.tag_check_failures << '\n'
                      << "bounds_checks=" << s.bounds_checks << '\n'
                      << "granules_non_ambient=" << s.granules_non_ambient << '\n'
                      << "tag_storage_bytes=" << s.tag_storage_bytes << '\n';
        }
        if (!a.dump_tags.empty()) write_file(a.dump_tags, rt->dump_tags());
        return code;
    };

    try {
        cage::Instance* last = nullptr;
        for (const auto& file : a.files) {
            cage::Module mod = cage::parse(read_file(file));
            cage::validate(mod, features);
            if (!mod.hardened)
                mod = cage::default_lower(mod, cfg.mode.ptr_auth);
            auto vm = std::make_shared<const cage::ValidatedModule>(
                cage::validate(std::move(mod), features));
            last = &cage::instantiate(*rt, vm);
        }
        if (!a.invoke.empty()) {
            if (!last) throw cage::UsageError("no module to invoke");
            std::vector<uint64_t> args;
            for (size_t i = 1; i < a.invoke.size(); ++i)
                args.push_back(uint64_t(std::strtoll(a.invoke[i].c_str(), nullptr, 0)));
            auto results = cage::invoke(*rt, *last, a.invoke[0], args);
            return finish(kExitOk, results);
        }
        return finish(kExitOk);
    } catch (const cage::Trap& t) {
        int code = finish(kExitTrap);
        std::cerr << t.describe() << '\n';
        return code;
    } catch (const cage::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const cage::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const cage::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const cage::CapacityError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    }
}

int cmd_validate(const std::string& file, const std::string& mode_spec, bool mode_given) {
    // Without --mode the gate is fully open; --mode narrows it.
    cage::FeatureSet features = cage::FeatureSet::all();
    if (mode_given) features = cage::FeatureSet::for_mode(parse_mode(mode_spec));
    try {
        cage::Module mod = cage::parse(read_file(file));
        try {
            cage::validate(mod, features);
        } catch (const cage::ValidationError& e) {
            if (e.feature_gated) {
                // List every gated instruction, not just the first.
                std::cerr << "error: feature-gated instructions present:\n";
                for (const auto& f : mod.functions)
                    for (size_t i = 0; i < f.body.size(); ++i) {
                        cage::Op op = f.body[i].op;
                        bool seg = op == cage::Op::SegmentNew || op == cage::Op::SegmentSetTag ||
                                   op == cage::Op::SegmentFree;
                        bool pac = op == cage::Op::PointerSign || op == cage::Op::PointerAuth;
                        if ((seg && !features.segments) || (pac && !features.pointer_auth))
                            std::cerr << "  $" << f.name << ":" << i << ": "
                                      << cage::op_info(op).name << '\n';
                    }
                return kExitInvalid;
            }
            throw;
        }
        std::cout << "ok\n";
        return kExitOk;
    } catch (const cage::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const cage::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    }
}

int cmd_harden(const std::string& in, const std::string& out, bool stack_safety, bool ptr_auth) {
    try {
        cage::Module mod = cage::parse(read_file(in));
        if (mod.hardened) {
            std::cerr << "error: module is already hardened (marker present)\n";
            return kExitInvalid;
        }
        cage::validate(mod, cage::FeatureSet::all());
        cage::Module hardened = cage::harden(mod, {stack_safety, ptr_auth});
        cage::validate(hardened, cage::FeatureSet::all());
        write_file(out, cage::serialize(hardened));
        return kExitOk;
    } catch (const cage::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const cage::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const cage::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    }
}

int cmd_inspect_tags(const std::string& file) {
    try {
        std::istringstream in(read_file(file));
        uint64_t g;
        std::string tag;
        struct Run { uint64_t first, last; std::string tag; };
        std::vector<Run> runs;
        while (in >> g >> tag) {
            if (!runs.empty() && runs.back().tag == tag && runs.back().last + 1 == g)
                runs.back().last = g;
            else
                runs.push_back({g, g, tag});
        }
        for (const auto& r : runs)
            std::cout << "granules " << r.first << ".." << r.last << " tag " << r.tag << " ("
                      << (r.last - r.first + 1) << ")\n";
        return kExitOk;
    } catch (const cage::UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tag-aware wasm64 runtime with software MTE/PAC emulation"};
    app.require_subcommand(1);

    RunArgs run_args;
    auto* run = app.add_subcommand("run", "instantiate modules and invoke an export");
    run->add_option("files", run_args.files, "module files (.cwat), first instantiated first")
        ->required();
    auto* mode_opt = run->add_option("--mode", run_args.mode_spec,
                                     "comma list of internal,external,ptrauth (empty = baseline)");
    auto* seed_opt = run->add_option("--seed", run_args.seed, "runtime seed (default $CAGE_SEED or 0)");
    run->add_option("--invoke", run_args.invoke, "export name followed by integer arguments")
        ->expected(-1);
    run->add_flag("--stats", run_args.stats, "print runtime statistics");
    run->add_option("--dump-tags", run_args.dump_tags, "write the tag map to a file after the run");
    run->add_option("--config", run_args.config_file, "key = value configuration file");
    run->add_option("--arena-bytes", run_args.arena_bytes, "arena size");
    run->add_option("--stack-bytes", run_args.stack_bytes, "shadow stack bytes per instance");
    run->add_option("--heap-bytes", run_args.heap_bytes, "heap cap per instance");
    run->add_option("--max-call-depth", run_args.max_call_depth, "call depth limit");

    std::string validate_file, validate_mode;
    auto* val = app.add_subcommand("validate", "parse and type-check a module");
    val->add_option("file", validate_file)->required();
    auto* val_mode_opt = val->add_option("--mode", validate_mode, "feature gate (default: all enabled)");

    std::string harden_in, harden_out;
    bool opt_stack = false, opt_pauth = false;
    auto* hard = app.add_subcommand("harden", "instrument a module");
    hard->add_option("input", harden_in)->required();
    hard->add_option("-o,--output", harden_out)->required();
    hard->add_flag("--stack-safety", opt_stack, "tag escaping/unsafe stack slots");
    hard->add_flag("--ptr-auth", opt_pauth, "sign and authenticate function pointers");

    std::string inspect_file;
    auto* inspect = app.add_subcommand("inspect-tags", "pretty-print a tag map dump");
    inspect->add_option("file", inspect_file)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (run->parsed()) {
            run_args.mode_given = mode_opt->count() > 0;
            run_args.seed_given = seed_opt->count() > 0;
            return cmd_run(run_args);
        }
        if (val->parsed())
            return cmd_validate(validate_file, validate_mode, val_mode_opt->count() > 0);
        if (hard->parsed())
            return cmd_harden(harden_in, harden_out, opt_stack, opt_pauth);
        if (inspect->parsed())
            return cmd_inspect_tags(inspect_file);
    } catch (const cage::UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
