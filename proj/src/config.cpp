#include "omat/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "omat/checkpoint.hpp"
#include "omat/error.hpp"
#include "omat/rng.hpp"

namespace omat::harness {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(trim(cur));
    return out;
}

[[noreturn]] void bad(const std::string& msg) { throw ConfigError("config: " + msg); }

double parse_double(const std::string& sec, const std::string& key, const std::string& v) {
    const char* begin = v.c_str();
    char* end = nullptr;
    const double x = std::strtod(begin, &end);
    if (end == begin || *end != '\0' || !std::isfinite(x))
        bad("[" + sec + "] " + key + ": '" + v + "' is not a finite number");
    return x;
}

std::uint64_t parse_u64(const std::string& sec, const std::string& key, const std::string& v) {
    if (v.empty() || v[0] == '-') bad("[" + sec + "] " + key + ": '" + v + "' is not a non-negative integer");
    const char* begin = v.c_str();
    char* end = nullptr;
    const unsigned long long x = std::strtoull(begin, &end, 10);
    if (end == begin || *end != '\0')
        bad("[" + sec + "] " + key + ": '" + v + "' is not a non-negative integer");
    return static_cast<std::uint64_t>(x);
}

// One section's keys with consume-tracking so leftovers are reported.
class SectionReader {
public:
    SectionReader(const RawConfig& raw, std::string name) : name_(std::move(name)) {
        auto it = raw.find(name_);
        if (it != raw.end()) pending_ = it->second;
    }

    std::string str(const std::string& key, const std::string& dflt) {
        auto it = pending_.find(key);
        if (it == pending_.end()) return dflt;
        std::string v = it->second;
        pending_.erase(it);
        return v;
    }
    double num(const std::string& key, double dflt) {
        auto it = pending_.find(key);
        if (it == pending_.end()) return dflt;
        const double v = parse_double(name_, key, it->second);
        pending_.erase(it);
        return v;
    }
    std::uint64_t u64(const std::string& key, std::uint64_t dflt) {
        auto it = pending_.find(key);
        if (it == pending_.end()) return dflt;
        const std::uint64_t v = parse_u64(name_, key, it->second);
        pending_.erase(it);
        return v;
    }
    std::size_t size(const std::string& key, std::size_t dflt) {
        return static_cast<std::size_t>(u64(key, dflt));
    }
    std::vector<std::size_t> size_list(const std::string& key, std::vector<std::size_t> dflt) {
        auto it = pending_.find(key);
        if (it == pending_.end()) return dflt;
        std::vector<std::size_t> out;
        for (const auto& part : split(it->second, ',')) {
            if (part.empty()) continue; // allows "": empty list
            out.push_back(static_cast<std::size_t>(parse_u64(name_, key, part)));
        }
        pending_.erase(it);
        return out;
    }
    std::vector<double> num_list(const std::string& key, std::vector<double> dflt) {
        auto it = pending_.find(key);
        if (it == pending_.end()) return dflt;
        std::vector<double> out;
        for (const auto& part : split(it->second, ','))
            if (!part.empty()) out.push_back(parse_double(name_, key, part));
        pending_.erase(it);
        return out;
    }

    void finish() const {
        if (!pending_.empty())
            bad("unknown key [" + name_ + "] " + pending_.begin()->first);
    }

private:
    std::string name_;
    std::map<std::string, std::string> pending_;
};

attacks::PixelAttackConfig parse_pixel_entry(attacks::PixelKind kind, const std::string& sec,
                                             const std::string& key, const std::string& entry) {
    attacks::PixelAttackConfig p;
    p.kind = kind;
    const auto parts = split(entry, ':');
    const std::size_t expected = kind == attacks::PixelKind::Fgsm ? 1 : 3;
    if (parts.size() != expected)
        bad("[" + sec + "] " + key + ": entry '" + entry + "' needs " +
            (expected == 1 ? std::string("a single epsilon") : std::string("eps:alpha:iters")));
    p.epsilon = parse_double(sec, key, parts[0]);
    if (kind != attacks::PixelKind::Fgsm) {
        p.alpha = parse_double(sec, key, parts[1]);
        p.iters = static_cast<std::size_t>(parse_u64(sec, key, parts[2]));
        if (!(p.alpha > 0.0) || p.iters < 1)
            bad("[" + sec + "] " + key + ": entry '" + entry + "' needs alpha > 0 and iters >= 1");
    } else {
        p.iters = 1;
    }
    if (!(p.epsilon > 0.0)) bad("[" + sec + "] " + key + ": epsilon must be > 0");
    return p;
}

std::vector<attacks::PixelAttackConfig> default_pixel_grid() {
    using attacks::PixelAttackConfig;
    using attacks::PixelKind;
    auto fgsm = [](double e) { return PixelAttackConfig{PixelKind::Fgsm, e, 0.0, 1, 1.0}; };
    auto iter = [](PixelKind k, double e, double a, std::size_t it) {
        return PixelAttackConfig{k, e, a, it, 1.0};
    };
    return {
        fgsm(0.03), fgsm(0.05), fgsm(0.1),
        iter(PixelKind::Pgd, 0.03, 0.005, 20),
        iter(PixelKind::Pgd, 0.05, 0.01, 20),
        iter(PixelKind::Pgd, 0.1, 0.02, 40),
        iter(PixelKind::MiFgsm, 0.03, 0.005, 20),
        iter(PixelKind::MiFgsm, 0.05, 0.01, 20),
        iter(PixelKind::MiFgsm, 0.1, 0.015, 30),
    };
}

} // namespace

RawConfig parse_config_text(const std::string& text) {
    RawConfig out;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']' || t.size() < 3)
                bad("line " + std::to_string(lineno) + ": malformed section header '" + t + "'");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) bad("line " + std::to_string(lineno) + ": empty section name");
            out[section]; // sections may legitimately be empty
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            bad("line " + std::to_string(lineno) + ": expected key = value, got '" + t + "'");
        if (section.empty())
            bad("line " + std::to_string(lineno) + ": key before any [section]");
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));
        if (key.empty()) bad("line " + std::to_string(lineno) + ": empty key");
        if (out[section].count(key))
            bad("duplicate key [" + section + "] " + key);
        out[section][key] = val;
    }
    return out;
}

RawConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) bad("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

std::string config_digest(const RawConfig& raw) {
    std::string canon;
    for (const auto& [sec, kv] : raw) {
        canon += "[" + sec + "]\n";
        for (const auto& [k, v] : kv) {
            if (sec == "run" && (k == "out_dir" || k == "threads")) continue;
            canon += k + "=" + v + "\n";
        }
    }
    return ckpt::digest_hex(fnv1a64(canon));
}

ExperimentConfig make_experiment_config(RawConfig raw, const ConfigOverrides& ov) {
    static const std::map<std::string, int> known_sections = {
        {"run", 0},    {"data", 0},    {"zoo", 0},   {"detector", 0}, {"attack", 0},
        {"harvest", 0}, {"reattack", 0}, {"omat", 0}, {"sweep", 0},   {"pixel", 0}};
    for (const auto& [sec, kv] : raw) {
        (void)kv;
        if (!known_sections.count(sec)) bad("unknown section [" + sec + "]");
    }

    if (ov.seed) raw["run"]["master_seed"] = std::to_string(*ov.seed);
    if (ov.out_dir) raw["run"]["out_dir"] = *ov.out_dir;
    if (ov.threads) raw["run"]["threads"] = std::to_string(*ov.threads);

    ExperimentConfig cfg;
    cfg.digest = config_digest(raw);

    {
        SectionReader run(raw, "run");
        cfg.master_seed = run.u64("master_seed", 42);
        cfg.out_dir = run.str("out_dir", "out");
        cfg.threads = run.size("threads", 1);
        if (cfg.threads < 1) bad("[run] threads must be >= 1");
        run.finish();
    }
    {
        SectionReader data(raw, "data");
        cfg.data.n_classes = data.size("n_classes", 6);
        cfg.data.image_hw = data.size("image_hw", 8);
        cfg.data.noise_sigma = data.num("noise_sigma", 0.08);
        cfg.train_per_class = data.size("train_per_class", 40);
        cfg.eval_per_class = data.size("eval_per_class", 12);
        data.finish();
        if (cfg.data.n_classes < 2) bad("[data] n_classes must be >= 2");
        if (cfg.data.image_hw != 8) bad("[data] image_hw must be 8 (fixed 4x4 -> 8x8 decoders)");
        if (cfg.data.noise_sigma < 0.0) bad("[data] noise_sigma must be >= 0");
        if (cfg.train_per_class < 1 || cfg.eval_per_class < 1)
            bad("[data] per-class counts must be >= 1");
    }
    {
        SectionReader zoo(raw, "zoo");
        cfg.zoo.dn.steps = zoo.size("denoiser_steps", 1200);
        cfg.zoo.dn.batch_size = zoo.size("denoiser_batch", 64);
        cfg.zoo.dn.lr = zoo.num("denoiser_lr", 2e-3);
        cfg.zoo.dn.weight_decay = zoo.num("denoiser_weight_decay", 0.0);
        cfg.zoo.dn.per_class = zoo.size("denoiser_per_class", 40);
        cfg.zoo.distill_pairs = zoo.size("distill_pairs", 1200);
        cfg.zoo.distill_steps = zoo.size("distill_steps", 900);
        cfg.zoo.distill_batch = zoo.size("distill_batch", 32);
        cfg.zoo.distill_lr = zoo.num("distill_lr", 2e-3);
        zoo.finish();
        if (cfg.zoo.dn.steps < 1 || cfg.zoo.dn.batch_size < 1 || cfg.zoo.dn.per_class < 1 ||
            cfg.zoo.distill_pairs < 1 || cfg.zoo.distill_steps < 1 || cfg.zoo.distill_batch < 1)
            bad("[zoo] counts must be >= 1");
        if (!(cfg.zoo.dn.lr > 0.0) || !(cfg.zoo.distill_lr > 0.0)) bad("[zoo] learning rates must be > 0");
    }
    {
        SectionReader det(raw, "detector");
        const std::string arch = det.str("arch", "frozen_head");
        try {
            cfg.det.arch = detector::arch_from_name(arch);
        } catch (const DomainError&) {
            bad("[detector] arch: unknown value '" + arch + "'");
        }
        cfg.det.backbone_hidden = det.size_list("backbone_hidden", {96});
        cfg.det.feat_dim = det.size("feat_dim", 64);
        cfg.det.pre.levels = static_cast<int>(det.u64("levels", 255));
        cfg.det.pre.mean = det.num("mean", 0.5);
        cfg.det.pre.std = det.num("std", 0.5);
        cfg.det.epochs = det.size("epochs", 6);
        cfg.det.batch_size = det.size("batch_size", 32);
        cfg.det.lr = det.num("lr", 1e-3);
        cfg.det.weight_decay = det.num("weight_decay", 0.0);
        det.finish();
        if (cfg.det.feat_dim < 1) bad("[detector] feat_dim must be >= 1");
        if (cfg.det.pre.levels < 1) bad("[detector] levels must be >= 1");
        if (cfg.det.pre.std == 0.0) bad("[detector] std must be nonzero");
        if (cfg.det.epochs < 1 || cfg.det.batch_size < 1) bad("[detector] epochs and batch_size must be >= 1");
        if (!(cfg.det.lr > 0.0)) bad("[detector] lr must be > 0");
    }
    {
        SectionReader atk(raw, "attack");
        cfg.attack.max_steps = atk.size("max_steps", 100);
        cfg.attack.lr = atk.num("lr", 1e-3);
        cfg.attack.tau = atk.num("tau", 0.5);
        cfg.probe_seeds = atk.size("probe_seeds", 200);
        cfg.probe_class = atk.size("probe_class", 0);
        cfg.probe_seed_base = atk.u64("probe_seed_base", 2000000);
        atk.finish();
        if (cfg.attack.max_steps < 1) bad("[attack] max_steps must be >= 1");
        if (!(cfg.attack.lr >= 0.0)) bad("[attack] lr must be >= 0");
        if (!(cfg.attack.tau > 0.0 && cfg.attack.tau < 1.0)) bad("[attack] tau must lie in (0, 1)");
        if (cfg.probe_seeds < 1) bad("[attack] probe_seeds must be >= 1");
        if (cfg.probe_class >= cfg.data.n_classes) bad("[attack] probe_class out of range");
    }
    {
        SectionReader hv(raw, "harvest");
        cfg.harvest_per_class = hv.size("per_class", 6);
        cfg.budget_factor = hv.size("budget_factor", 50);
        cfg.harvest_taus = hv.num_list("tau", {cfg.attack.tau});
        cfg.harvest_max_steps = hv.size("max_steps", cfg.attack.max_steps);
        cfg.harvest_lr = hv.num("lr", cfg.attack.lr);
        hv.finish();
        if (cfg.harvest_per_class < 1) bad("[harvest] per_class must be >= 1");
        if (cfg.budget_factor < 1) bad("[harvest] budget_factor must be >= 1");
        if (cfg.harvest_taus.empty()) bad("[harvest] tau must name at least one threshold");
        for (double t : cfg.harvest_taus)
            if (!(t > 0.0 && t <= cfg.attack.tau)) bad("[harvest] tau must lie in (0, attack tau]");
        if (cfg.harvest_taus.size() > cfg.harvest_per_class)
            bad("[harvest] more taus than per_class examples");
        if (cfg.harvest_max_steps < 1) bad("[harvest] max_steps must be >= 1");
        if (!(cfg.harvest_lr >= 0.0)) bad("[harvest] lr must be >= 0");
    }
    {
        SectionReader re(raw, "reattack");
        cfg.reattack_max_steps = re.size("max_steps", 100);
        cfg.reattack_seeds_per_class = re.size("seeds_per_class", 20);
        cfg.reattack_seed_base = re.u64("seed_base", 1000000);
        re.finish();
        if (cfg.reattack_max_steps < 1) bad("[reattack] max_steps must be >= 1");
        if (cfg.reattack_seeds_per_class < 1) bad("[reattack] seeds_per_class must be >= 1");
    }
    {
        SectionReader om(raw, "omat");
        const std::string strat = om.str("strategy", "lora");
        try {
            cfg.omat.strategy = finetune::strategy_from_name(strat);
        } catch (const DomainError&) {
            bad("[omat] strategy: unknown value '" + strat + "'");
        }
        cfg.omat.lora_rank = om.size("lora_rank", 4);
        cfg.omat.lora_targets = om.size_list("lora_targets", {});
        cfg.omat.lora_dropout = om.num("lora_dropout", 0.1);
        cfg.omat.epochs = om.size("epochs", 20);
        cfg.omat.weight_decay = om.num("weight_decay", 1e-4);
        cfg.omat.learning_rate = om.num("lr", 0.0);
        cfg.omat.batch_size = om.size("batch_size", 0);
        cfg.omat.lambda_base = om.num("lambda_base", 1.0);
        cfg.omat.lambda_slope = om.num("lambda_slope", 0.2);
        cfg.omat.lambda_cap = om.num("lambda_cap", 3.0);
        cfg.omat.w_val = om.num("w_val", 0.6);
        cfg.omat.w_adv = om.num("w_adv", 0.4);
        om.finish();
        if (cfg.omat.epochs < 1) bad("[omat] epochs must be >= 1");
        if (cfg.omat.lora_rank < 1) bad("[omat] lora_rank must be >= 1");
        if (!(cfg.omat.lora_dropout >= 0.0 && cfg.omat.lora_dropout < 1.0))
            bad("[omat] lora_dropout must lie in [0, 1)");
        if (std::abs(cfg.omat.w_val + cfg.omat.w_adv - 1.0) > 1e-12)
            bad("[omat] w_val + w_adv must equal 1");
    }
    {
        SectionReader sw(raw, "sweep");
        const std::string list = sw.str("strategies", "full,head_only,lora:4");
        sw.finish();
        for (const auto& entry : split(list, ',')) {
            if (entry.empty()) continue;
            finetune::OmatConfig c = cfg.omat;
            const auto parts = split(entry, ':');
            if (parts.size() > 2) bad("[sweep] strategies: malformed entry '" + entry + "'");
            try {
                c.strategy = finetune::strategy_from_name(parts[0]);
            } catch (const DomainError&) {
                bad("[sweep] strategies: unknown strategy '" + parts[0] + "'");
            }
            if (parts.size() == 2) {
                if (c.strategy != finetune::Strategy::Lora)
                    bad("[sweep] strategies: only lora takes a rank ('" + entry + "')");
                c.lora_rank = static_cast<std::size_t>(parse_u64("sweep", "strategies", parts[1]));
                if (c.lora_rank < 1) bad("[sweep] strategies: rank must be >= 1");
            }
            cfg.sweep.push_back(c);
        }
        if (cfg.sweep.empty()) bad("[sweep] strategies must name at least one strategy");
        for (std::size_t i = 0; i < cfg.sweep.size(); ++i)
            for (std::size_t j = i + 1; j < cfg.sweep.size(); ++j)
                if (finetune::sweep_row_name(cfg.sweep[i]) == finetune::sweep_row_name(cfg.sweep[j]))
                    bad("[sweep] strategies: duplicate entry '" +
                        finetune::sweep_row_name(cfg.sweep[i]) + "'");
        bool has_primary = false;
        for (const auto& c : cfg.sweep)
            has_primary |= finetune::sweep_row_name(c) == finetune::sweep_row_name(cfg.omat);
        if (!has_primary) cfg.sweep.push_back(cfg.omat);
    }
    {
        SectionReader px(raw, "pixel");
        const std::string fgsm = px.str("fgsm", "");
        const std::string pgd = px.str("pgd", "");
        const std::string mifgsm = px.str("mifgsm", "");
        px.finish();
        if (fgsm.empty() && pgd.empty() && mifgsm.empty()) {
            cfg.pixel_grid = default_pixel_grid();
        } else {
            auto add = [&](attacks::PixelKind kind, const char* key, const std::string& v) {
                if (v.empty()) return;
                for (const auto& entry : split(v, ','))
                    if (!entry.empty())
                        cfg.pixel_grid.push_back(parse_pixel_entry(kind, "pixel", key, entry));
            };
            add(attacks::PixelKind::Fgsm, "fgsm", fgsm);
            add(attacks::PixelKind::Pgd, "pgd", pgd);
            add(attacks::PixelKind::MiFgsm, "mifgsm", mifgsm);
            if (cfg.pixel_grid.empty()) bad("[pixel] grid resolved to no variants");
        }
    }
    return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const ConfigOverrides& ov) {
    return make_experiment_config(load_config_file(path), ov);
}

std::string file_token(const std::string& row_name) {
    std::string out;
    for (char ch : row_name)
        if (ch != '(' && ch != ')' && ch != ' ') out.push_back(ch == ',' ? '_' : ch);
    return out;
}

} // namespace omat::harness
