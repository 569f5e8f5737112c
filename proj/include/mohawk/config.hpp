#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mohawk/approx.hpp"
#include "mohawk/distill.hpp"
#include "mohawk/model.hpp"
#include "mohawk/train.hpp"

namespace mohawk::config {

// INI-style run configuration: [section] headers and key=value pairs, full-line
// comments starting with '#' or ';'. Unknown sections or keys are rejected
// with their line number; relative paths resolve against the config file.

namespace detail {

struct Entry {
    std::string value;
    int line = 0;
    mutable bool used = false;
};

using Section = std::map<std::string, Entry>;

struct Ini {
    std::map<std::string, Section> sections;
    std::map<std::string, int> section_lines;
    std::filesystem::path dir;
};

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline Ini parse_ini(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    Ini ini;
    ini.dir = std::filesystem::absolute(std::filesystem::path(path)).parent_path();
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ParseError("config: malformed section header", lineno);
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) throw ParseError("config: empty section name", lineno);
            ini.sections[section];  // created even when empty
            ini.section_lines.emplace(section, lineno);
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ParseError("config: expected key=value", lineno);
        if (section.empty()) throw ParseError("config: key outside any section", lineno);
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw ParseError("config: empty key", lineno);
        auto [it, inserted] = ini.sections[section].emplace(key, Entry{value, lineno});
        if (!inserted) throw ParseError("config: duplicate key '" + key + "'", lineno);
    }
    return ini;
}

class SectionReader {
public:
    SectionReader(const Ini& ini, const std::string& name) : ini_(ini), name_(name) {
        auto it = ini.sections.find(name);
        section_ = it == ini.sections.end() ? nullptr : &it->second;
    }

    bool present() const { return section_ != nullptr; }

    const Entry* find(const std::string& key) const {
        if (!section_) return nullptr;
        auto it = section_->find(key);
        if (it == section_->end()) return nullptr;
        it->second.used = true;
        return &it->second;
    }

    std::string get_string(const std::string& key, const std::string& def) const {
        const Entry* e = find(key);
        return e ? e->value : def;
    }

    std::string get_path(const std::string& key, const std::string& def = "") const {
        const Entry* e = find(key);
        if (!e) return def;
        std::filesystem::path p(e->value);
        if (p.is_absolute()) return p.string();
        return (ini_.dir / p).string();
    }

    i64 get_i64(const std::string& key, i64 def) const {
        const Entry* e = find(key);
        if (!e) return def;
        return parse_number<i64>(e);
    }

    u64 get_u64(const std::string& key, u64 def) const {
        const Entry* e = find(key);
        if (!e) return def;
        return parse_number<u64>(e);
    }

    double get_double(const std::string& key, double def) const {
        const Entry* e = find(key);
        if (!e) return def;
        return parse_number<double>(e);
    }

    std::vector<std::string> get_list(const std::string& key,
                                      const std::vector<std::string>& def) const {
        const Entry* e = find(key);
        if (!e) return def;
        std::vector<std::string> out;
        std::stringstream ss(e->value);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    std::vector<i64> get_list_i64(const std::string& key, const std::vector<i64>& def) const {
        const Entry* e = find(key);
        if (!e) return def;
        std::vector<i64> out;
        for (const std::string& s : get_list_raw(e))
            out.push_back(parse_token<i64>(s, e->line));
        return out;
    }

    std::vector<u64> get_list_u64(const std::string& key, const std::vector<u64>& def) const {
        const Entry* e = find(key);
        if (!e) return def;
        std::vector<u64> out;
        for (const std::string& s : get_list_raw(e))
            out.push_back(parse_token<u64>(s, e->line));
        return out;
    }

    std::vector<double> get_list_double(const std::string& key,
                                        const std::vector<double>& def) const {
        const Entry* e = find(key);
        if (!e) return def;
        std::vector<double> out;
        for (const std::string& s : get_list_raw(e))
            out.push_back(parse_token<double>(s, e->line));
        return out;
    }

    void reject_unknown() const {
        if (!section_) return;
        for (const auto& [key, entry] : *section_)
            if (!entry.used)
                throw ParseError("config: unknown key '" + key + "' in [" + name_ + "]",
                                 entry.line);
    }

private:
    static std::vector<std::string> get_list_raw(const Entry* e) {
        std::vector<std::string> out;
        std::stringstream ss(e->value);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    template <typename T>
    static T parse_token(const std::string& s, int line) {
        std::stringstream ss(s);
        T v;
        ss >> v;
        if (ss.fail() || !ss.eof()) throw ParseError("config: cannot parse value '" + s + "'", line);
        return v;
    }

    template <typename T>
    static T parse_number(const Entry* e) {
        return parse_token<T>(e->value, e->line);
    }

    const Ini& ini_;
    std::string name_;
    const Section* section_;
};

}  // namespace detail

struct ApproxSettings {
    std::string teacher_checkpoint;
    std::string corpus;
    std::string matrices;  // optional import container with an "attn" array
    i64 num_matrices = 64;
    i64 seq_len = 256;
    std::vector<approx::Family> families;
    std::vector<i64> state_sizes{4, 8, 16};
    approx::GdConfig gd;
};

struct SweepSettings {
    distill::SweepConfig sweep;
};

struct RunConfig {
    model::ModelConfig model_cfg;
    // teacher training
    std::string teacher_corpus;
    model::TeacherTrainConfig teacher;
    // distillation
    std::string distill_corpus;
    std::string distill_teacher_checkpoint;
    distill::DistillConfig distill_cfg;
    // projections and sweep
    ApproxSettings approx_cfg;
    SweepSettings sweep_cfg;
};

inline std::vector<model::LayerKind> parse_layer_kinds(const std::vector<std::string>& items,
                                                       i64 n_layers, int line_hint) {
    std::vector<model::LayerKind> kinds;
    if (items.size() == 1 && items[0] == "all_ssd")
        return model::ModelConfig::all(model::LayerKind::Ssd, n_layers);
    if (items.size() == 1 && items[0] == "all_attention")
        return model::ModelConfig::all(model::LayerKind::Attention, n_layers);
    for (const std::string& s : items) {
        if (s == "ssd")
            kinds.push_back(model::LayerKind::Ssd);
        else if (s == "attention")
            kinds.push_back(model::LayerKind::Attention);
        else
            throw ParseError("config: layer kind must be 'ssd' or 'attention', got '" + s + "'",
                             line_hint);
    }
    if (static_cast<i64>(kinds.size()) != n_layers)
        throw ParseError("config: layer_kinds length must equal n_layers", line_hint);
    return kinds;
}

inline RunConfig load_run_config(const std::string& path) {
    detail::Ini ini = detail::parse_ini(path);
    for (const auto& [name, line] : ini.section_lines) {
        if (name != "model" && name != "teacher_training" && name != "distill" &&
            name != "approx" && name != "sweep")
            throw ParseError("config: unknown section [" + name + "]", line);
    }

    RunConfig rc;
    {
        detail::SectionReader s(ini, "model");
        model::ModelConfig& m = rc.model_cfg;
        m.vocab_size = s.get_i64("vocab_size", 256);
        m.d_model = s.get_i64("d_model", 64);
        m.n_layers = s.get_i64("n_layers", 2);
        m.n_heads = s.get_i64("n_heads", 4);
        m.d_mlp = s.get_i64("d_mlp", 256);
        m.max_seq_len = s.get_i64("max_seq_len", 256);
        const detail::Entry* kinds = s.find("layer_kinds");
        if (kinds) {
            std::vector<std::string> items;
            std::stringstream ss(kinds->value);
            std::string item;
            while (std::getline(ss, item, ',')) {
                item = detail::trim(item);
                if (!item.empty()) items.push_back(item);
            }
            m.layer_kinds = parse_layer_kinds(items, m.n_layers, kinds->line);
        } else {
            m.layer_kinds = model::ModelConfig::all(model::LayerKind::Ssd, m.n_layers);
        }
        s.reject_unknown();
        m.validate();
    }
    {
        detail::SectionReader s(ini, "teacher_training");
        rc.teacher_corpus = s.get_path("corpus");
        model::TeacherTrainConfig& t = rc.teacher;
        t.budget_tokens = s.get_i64("budget_tokens", 2000000);
        t.batch_sequences = s.get_i64("batch_sequences", 16);
        t.seq_len = s.get_i64("seq_len", rc.model_cfg.max_seq_len);
        t.lr = s.get_double("lr", 1e-3);
        t.warmup_frac = s.get_double("warmup_frac", 0.10);
        t.decay_frac = s.get_double("decay_frac", 0.10);
        t.weight_decay = s.get_double("weight_decay", 0.1);
        t.beta1 = s.get_double("beta1", 0.9);
        t.beta2 = s.get_double("beta2", 0.95);
        t.clip_norm = s.get_double("clip_norm", 1.0);
        t.eval_interval_steps = s.get_i64("eval_interval_steps", 50);
        t.heldout_frac = s.get_double("heldout_frac", 0.05);
        t.eval_sequences = s.get_i64("eval_sequences", 32);
        t.seed = s.get_u64("seed", 0);
        s.reject_unknown();
    }
    {
        detail::SectionReader s(ini, "distill");
        rc.distill_corpus = s.get_path("corpus");
        rc.distill_teacher_checkpoint = s.get_path("teacher_checkpoint");
        distill::DistillConfig& d = rc.distill_cfg;
        d.stage1_tokens = s.get_i64("stage1_tokens", 100000);
        d.stage2_tokens = s.get_i64("stage2_tokens", 200000);
        d.stage3_tokens = s.get_i64("stage3_tokens", 2000000);
        d.batch_sequences = s.get_i64("batch_sequences", 16);
        d.seq_len = s.get_i64("seq_len", rc.model_cfg.max_seq_len);
        d.stage1_lr = s.get_double("stage1_lr", 5e-4);
        d.stage2_lr = s.get_double("stage2_lr", 2e-3);
        d.stage3_lr = s.get_double("stage3_lr", 5e-4);
        d.stage3_lr_after_stage12 = s.get_double("stage3_lr_after_stage12", 2e-4);
        d.weight_decay = s.get_double("weight_decay", 0.1);
        d.beta1 = s.get_double("beta1", 0.9);
        d.beta2 = s.get_double("beta2", 0.95);
        d.clip_norm = s.get_double("clip_norm", 1.0);
        d.warmup_frac = s.get_double("warmup_frac", 0.10);
        d.decay_frac = s.get_double("decay_frac", 0.10);
        const detail::Entry* freeze = s.find("freeze");
        if (freeze) {
            std::stringstream ss(freeze->value);
            std::string item;
            while (std::getline(ss, item, ',')) {
                item = detail::trim(item);
                if (item.empty()) continue;
                distill::Component c;
                if (!distill::parse_component(item, c))
                    throw ParseError("config: unknown freeze component '" + item + "'",
                                     freeze->line);
                d.freeze.insert(c);
            }
        }
        d.layer_kinds = rc.model_cfg.layer_kinds;
        d.seed = s.get_u64("seed", 0);
        d.eval_interval_steps = s.get_i64("eval_interval_steps", 50);
        d.checkpoint_interval_steps = s.get_i64("checkpoint_interval_steps", 100);
        d.heldout_frac = s.get_double("heldout_frac", 0.05);
        d.eval_sequences = s.get_i64("eval_sequences", 8);
        s.reject_unknown();
    }
    {
        detail::SectionReader s(ini, "approx");
        ApproxSettings& a = rc.approx_cfg;
        a.teacher_checkpoint = s.get_path("teacher_checkpoint");
        a.corpus = s.get_path("corpus");
        a.matrices = s.get_path("matrices");
        a.num_matrices = s.get_i64("num_matrices", 64);
        a.seq_len = s.get_i64("seq_len", rc.model_cfg.max_seq_len);
        const detail::Entry* fams = s.find("families");
        std::vector<std::string> names =
            fams ? std::vector<std::string>{} : std::vector<std::string>{
                "toeplitz", "lowrank", "retnet", "ssd_no_d", "ssd", "semisep"};
        if (fams) {
            std::stringstream ss(fams->value);
            std::string item;
            while (std::getline(ss, item, ',')) {
                item = detail::trim(item);
                if (!item.empty()) names.push_back(item);
            }
        }
        for (const std::string& n : names) {
            approx::Family f;
            if (!approx::parse_family(n, f))
                throw ParseError("config: unknown family '" + n + "'",
                                 fams ? fams->line : 0);
            a.families.push_back(f);
        }
        a.state_sizes = s.get_list_i64("state_sizes", {4, 8, 16});
        a.gd.steps = s.get_i64("gd_steps", 10000);
        a.gd.lrs = s.get_list_double("gd_lrs", {0.1, 0.01, 0.001});
        a.gd.seed = s.get_u64("seed", 0);
        s.reject_unknown();
    }
    {
        detail::SectionReader s(ini, "sweep");
        distill::SweepConfig& w = rc.sweep_cfg.sweep;
        w.stage_a = static_cast<int>(s.get_i64("stage_a", 2));
        w.stage_a_budgets = s.get_list_i64("stage_a_budgets", {0});
        w.stage_b_budgets = s.get_list_i64("stage_b_budgets", {});
        w.seeds = s.get_list_u64("seeds", {0});
        s.reject_unknown();
    }
    return rc;
}

}  // namespace mohawk::config
