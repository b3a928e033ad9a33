#pragma once

// Run configuration: every tunable field of the data generator, corruption
// protocols, model, kernel, objective, trainer and benchmarks, addressable as
// `section.key`. Text format:
//
//   # comment
//   [train]
//   lr_encoder = 1e-3
//
// Sources apply in order: defaults, config file, environment (DIB_SECTION_KEY),
// then `--set section.key=value`. Unknown keys are errors everywhere.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dib/bench.hpp"

extern char** environ;

namespace dib::config {

inline constexpr const char* kEnvPrefix = "DIB_";

/// Single-file corruption applied by the `corrupt` subcommand.
struct CorruptionSpec {
    std::string kind = "gaussian";  // token | gaussian | missing
    double rate = 0.1;              // token and missing
    double intensity = 1.0;         // gaussian std
    std::vector<std::string> modalities;  // empty: protocol default
    data::SplitSet splits;
    std::uint64_t seed = 7;
};

struct BenchConfig {
    std::size_t seeds = 5;
    std::uint64_t master_seed = 1;
    std::vector<double> betas{1e-6, 1e-5, 1e-4, 1e-2};
    std::vector<double> missing_rates{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::vector<std::string> missing_modalities;  // empty: all
    std::vector<double> intensities{0.06, 0.07, 0.08, 0.09, 0.10};
    std::vector<std::string> intensity_modalities{"a", "v"};
    std::uint64_t corrupt_seed = 11;
};

struct RunConfig {
    data::SyntheticSpec data;
    train::TrainConfig train;
    bench::NoiseProtocol noise;
    CorruptionSpec corrupt;
    BenchConfig bench;
};

// ---------------------------------------------------------------------------
// Value codecs
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(trim(item));
    return out;
}

inline std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& value, const std::string& want) {
    throw Error("invalid_config", "'" + key + "': cannot parse '" + value + "' as " + want);
}

inline double to_double(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_value(key, raw, "a number");
    return v;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& raw) {
    std::string s = trim(raw);
    int base = 10;
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
        s = s.substr(2);
        base = 16;
    }
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v, base);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_value(key, raw, "a non-negative integer");
    return v;
}

inline bool to_bool(const std::string& key, const std::string& raw) {
    std::string s = trim(raw);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "off" || s == "no") return false;
    bad_value(key, raw, "a boolean");
}

/// Shortest text that parses back to the same double.
inline std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string fmt(const std::vector<double>& v) {
    std::vector<std::string> s;
    for (double x : v) s.push_back(fmt(x));
    return join(s);
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& raw) {
    std::vector<double> out;
    for (const auto& s : split_list(raw)) out.push_back(to_double(key, s));
    return out;
}

inline std::string fmt(const std::set<std::string>& s) { return join({s.begin(), s.end()}); }

inline std::set<std::string> to_set(const std::string& raw) {
    const auto v = split_list(raw);
    return {v.begin(), v.end()};
}

/// Modalities as `name:LxD` items, e.g. `t:12x16,a:20x8`.
inline std::string fmt(const std::vector<model::ModalitySpec>& ms) {
    std::vector<std::string> s;
    for (const auto& m : ms) s.push_back(m.name + ":" + std::to_string(m.seq_len) + "x" + std::to_string(m.feat_dim));
    return join(s);
}

inline std::vector<model::ModalitySpec> to_modalities(const std::string& key, const std::string& raw) {
    std::vector<model::ModalitySpec> out;
    for (const auto& item : split_list(raw)) {
        const auto colon = item.find(':');
        const auto x = item.find('x', colon == std::string::npos ? 0 : colon);
        if (colon == std::string::npos || x == std::string::npos || colon == 0) bad_value(key, item, "name:LxD");
        out.push_back({item.substr(0, colon), static_cast<std::size_t>(to_u64(key, item.substr(colon + 1, x - colon - 1))),
                       static_cast<std::size_t>(to_u64(key, item.substr(x + 1)))});
    }
    return out;
}

inline std::string fmt(const std::map<std::string, double>& m) {
    std::vector<std::string> s;
    for (const auto& [k, v] : m) s.push_back(k + ":" + fmt(v));
    return join(s);
}

inline std::map<std::string, double> to_beta_map(const std::string& key, const std::string& raw) {
    std::map<std::string, double> out;
    for (const auto& item : split_list(raw)) {
        const auto colon = item.find(':');
        if (colon == std::string::npos || colon == 0) bad_value(key, item, "name:beta");
        out[trim(item.substr(0, colon))] = to_double(key, item.substr(colon + 1));
    }
    return out;
}

inline std::string fmt(const data::SplitSet& s) {
    std::vector<std::string> v;
    for (const auto& x : s.to_json()) v.push_back(x.get<std::string>());
    return join(v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Field registry
// ---------------------------------------------------------------------------

struct Field {
    std::string section, key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;

    std::string path() const { return section + "." + key; }
    std::string env_name() const {
        std::string s = kEnvPrefix + section + "_" + key;
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
        return s;
    }
};

/// Every addressable field of `c`, in echo order. The closures refer to `c`.
inline std::vector<Field> registry(RunConfig& c) {
    using namespace detail;
    std::vector<Field> f;
    auto add = [&](std::string sec, std::string key, std::function<std::string()> get,
                   std::function<void(const std::string&, const std::string&)> set) {
        const std::string path = sec + "." + key;
        f.push_back({std::move(sec), std::move(key), std::move(get), [set, path](const std::string& v) { set(path, v); }});
    };
    auto num = [&](std::string sec, std::string key, double& v) {
        add(sec, key, [&v] { return fmt(v); }, [&v](const std::string& k, const std::string& s) { v = to_double(k, s); });
    };
    auto size = [&](std::string sec, std::string key, std::size_t& v) {
        add(sec, key, [&v] { return std::to_string(v); },
            [&v](const std::string& k, const std::string& s) { v = static_cast<std::size_t>(to_u64(k, s)); });
    };
    auto u64 = [&](std::string sec, std::string key, std::uint64_t& v) {
        add(sec, key, [&v] { return std::to_string(v); }, [&v](const std::string& k, const std::string& s) { v = to_u64(k, s); });
    };
    auto flag = [&](std::string sec, std::string key, bool& v) {
        add(sec, key, [&v] { return std::string(v ? "true" : "false"); },
            [&v](const std::string& k, const std::string& s) { v = to_bool(k, s); });
    };
    auto text = [&](std::string sec, std::string key, std::string& v) {
        add(sec, key, [&v] { return v; }, [&v](const std::string&, const std::string& s) { v = trim(s); });
    };
    auto nums = [&](std::string sec, std::string key, std::vector<double>& v) {
        add(sec, key, [&v] { return fmt(v); }, [&v](const std::string& k, const std::string& s) { v = to_doubles(k, s); });
    };
    auto names = [&](std::string sec, std::string key, std::vector<std::string>& v) {
        add(sec, key, [&v] { return join(v); }, [&v](const std::string&, const std::string& s) { v = split_list(s); });
    };
    auto name_set = [&](std::string sec, std::string key, std::set<std::string>& v) {
        add(sec, key, [&v] { return fmt(v); }, [&v](const std::string&, const std::string& s) { v = to_set(s); });
    };
    auto splits = [&](std::string sec, std::string key, data::SplitSet& v) {
        add(sec, key, [&v] { return fmt(v); }, [&v](const std::string&, const std::string& s) { v = data::SplitSet::parse(s); });
    };

    auto& d = c.data;
    add("data", "modalities", [&d] { return fmt(d.modalities); },
        [&d](const std::string& k, const std::string& s) { d.modalities = to_modalities(k, s); });
    size("data", "n_samples", d.n_samples);
    nums("data", "strengths", d.strengths);
    num("data", "nuisance_std", d.nuisance_std);
    num("data", "distractor_scale", d.distractor_scale);
    add("data", "label_kind", [&d] { return model::to_string(d.label_kind); },
        [&d](const std::string&, const std::string& s) { d.label_kind = model::task_from_string(trim(s)); });
    u64("data", "seed", d.seed);
    u64("data", "split_seed", d.split_seed);
    num("data", "train_fraction", d.train_fraction);
    num("data", "val_fraction", d.val_fraction);

    auto& m = c.train.model;
    size("model", "hidden", m.hidden);
    size("model", "heads", m.heads);
    size("model", "fusion_layers", m.fusion_layers);
    size("model", "bottleneck_len", m.bottleneck_len);
    num("model", "dropout", m.dropout);
    num("model", "gamma_init", m.gamma_init);
    num("model", "bottleneck_init_std", m.bottleneck_init_std);
    text("model", "sigma_head", m.sigma_head);
    num("model", "log_sigma_bias_init", m.log_sigma_bias_init);
    text("model", "dominant", m.dominant);

    auto& k = c.train.objective.kernel;
    num("kernel", "alpha", k.alpha);
    size("kernel", "k_rank", k.k_rank);
    add("kernel", "bandwidth", [&k] { return std::string(k.bandwidth_rule == entropy::BandwidthRule::fixed ? "fixed" : "top5"); },
        [&k](const std::string& key, const std::string& s) {
            const std::string v = trim(s);
            if (v == "top5") k.bandwidth_rule = entropy::BandwidthRule::top5_nearest;
            else if (v == "fixed") k.bandwidth_rule = entropy::BandwidthRule::fixed;
            else bad_value(key, s, "'top5' or 'fixed'");
        });
    num("kernel", "sigma2", k.fixed_sigma2);
    flag("kernel", "lanczos", k.use_lanczos);
    size("kernel", "lanczos_probes", k.lanczos_probes);
    u64("kernel", "lanczos_seed", k.lanczos_seed);

    auto& o = c.train.objective;
    add("objective", "beta_on", [&o] { return objective::to_string(o.beta_on); },
        [&o](const std::string&, const std::string& s) { o.beta_on = objective::beta_on_from_string(trim(s)); });
    num("objective", "beta_uni", o.beta_uni);
    num("objective", "beta_multi", o.beta_multi);
    add("objective", "beta_modality", [&o] { return fmt(o.beta_modality); },
        [&o](const std::string& key, const std::string& s) { o.beta_modality = to_beta_map(key, s); });
    flag("objective", "uni_lrib", o.uni_lrib);
    flag("objective", "multi_lrib", o.multi_lrib);
    name_set("objective", "uni_lrib_off", o.uni_lrib_off);

    auto& t = c.train;
    num("train", "lr_encoder", t.lr_encoder);
    num("train", "lr_model", t.lr_model);
    size("train", "batch_size", t.batch_size);
    size("train", "epochs", t.epochs);
    num("train", "adam_beta1", t.adam.beta1);
    num("train", "adam_beta2", t.adam.beta2);
    num("train", "adam_eps", t.adam.eps);
    flag("train", "info_on_mean", t.info_on_mean);
    name_set("train", "drop_modalities", t.drop_modalities);
    u64("train", "seed", t.seed);
    size("train", "eval_chunk", t.eval_chunk);

    auto& n = c.noise;
    text("noise", "token_modality", n.token_modality);
    num("noise", "token_rate", n.token_rate);
    names("noise", "gaussian_modalities", n.gaussian_modalities);
    num("noise", "gaussian_std", n.gaussian_std);
    splits("noise", "splits", n.splits);
    u64("noise", "seed", n.seed);

    auto& cr = c.corrupt;
    text("corrupt", "kind", cr.kind);
    num("corrupt", "rate", cr.rate);
    num("corrupt", "intensity", cr.intensity);
    names("corrupt", "modalities", cr.modalities);
    splits("corrupt", "splits", cr.splits);
    u64("corrupt", "seed", cr.seed);

    auto& b = c.bench;
    size("bench", "seeds", b.seeds);
    u64("bench", "master_seed", b.master_seed);
    nums("bench", "betas", b.betas);
    nums("bench", "missing_rates", b.missing_rates);
    names("bench", "missing_modalities", b.missing_modalities);
    nums("bench", "intensities", b.intensities);
    names("bench", "intensity_modalities", b.intensity_modalities);
    u64("bench", "corrupt_seed", b.corrupt_seed);
    return f;
}

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

inline Field& find_field(std::vector<Field>& reg, const std::string& path, const std::string& origin) {
    for (auto& f : reg)
        if (f.path() == path) return f;
    throw Error("unknown_key", origin + ": unknown config key '" + path + "'");
}

/// Apply sectioned key/value text. `origin` labels error messages.
inline void apply_text(RunConfig& c, const std::string& content, const std::string& origin) {
    auto reg = registry(c);
    std::istringstream in(content);
    std::string line, section;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        const std::string where = origin + ":" + std::to_string(lineno);
        const auto hash = line.find_first_of("#;");
        const std::string s = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw Error("invalid_config", where + ": malformed section header '" + s + "'");
            section = detail::trim(s.substr(1, s.size() - 2));
            bool known = false;
            for (const auto& f : reg) known = known || f.section == section;
            if (!known) throw Error("unknown_key", where + ": unknown config section '" + section + "'");
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw Error("invalid_config", where + ": expected 'key = value', got '" + s + "'");
        if (section.empty()) throw Error("invalid_config", where + ": key outside of any [section]");
        find_field(reg, section + "." + detail::trim(s.substr(0, eq)), where).set(s.substr(eq + 1));
    }
}

inline void load_file(RunConfig& c, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("missing_input", "cannot read config file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    apply_text(c, ss.str(), path);
}

/// One `section.key=value` override.
inline void apply_set(RunConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw Error("invalid_config", "--set expects section.key=value, got '" + assignment + "'");
    auto reg = registry(c);
    find_field(reg, detail::trim(assignment.substr(0, eq)), "--set").set(assignment.substr(eq + 1));
}

/// Apply DIB_SECTION_KEY variables from `env` (a null-terminated
/// NAME=VALUE array); any other DIB_ variable is rejected.
inline void apply_env(RunConfig& c, char** env = environ) {
    if (!env) return;
    auto reg = registry(c);
    const std::string prefix = kEnvPrefix;
    for (char** e = env; *e; ++e) {
        const std::string kv = *e;
        if (kv.rfind(prefix, 0) != 0) continue;
        const auto eq = kv.find('=');
        const std::string name = kv.substr(0, eq);
        auto it = std::find_if(reg.begin(), reg.end(), [&](const Field& f) { return f.env_name() == name; });
        if (it == reg.end()) throw Error("unknown_key", "environment: unknown config variable '" + name + "'");
        it->set(eq == std::string::npos ? std::string() : kv.substr(eq + 1));
    }
}

/// Effective configuration as text accepted by `apply_text`.
inline std::string to_text(const RunConfig& c) {
    RunConfig copy = c;
    std::string out, section;
    for (const auto& f : registry(copy)) {
        if (f.section != section) {
            out += (section.empty() ? "" : "\n") + std::string("[") + f.section + "]\n";
            section = f.section;
        }
        out += f.key + " = " + f.get() + "\n";
    }
    return out;
}

/// Cross-section checks that the per-struct validators cannot see. Modality
/// names are checked against `ds` when given, otherwise against
/// data.modalities.
inline void validate(const RunConfig& c, const data::Dataset* ds = nullptr) {
    c.data.validate();
    c.train.validate();
    std::set<std::string> names;
    for (const auto& m : ds ? ds->modalities : c.data.modalities) names.insert(m.name);
    auto known = [&](const std::string& m, const std::string& key) {
        if (!names.count(m)) throw Error("config_conflict", key + " names modality '" + m + "' not in data.modalities");
    };
    for (const auto& m : c.train.drop_modalities) known(m, "train.drop_modalities");
    for (const auto& m : c.train.objective.uni_lrib_off) known(m, "objective.uni_lrib_off");
    for (const auto& [m, b] : c.train.objective.beta_modality) known(m, "objective.beta_modality");
    if (c.train.model.dominant != "all") known(c.train.model.dominant, "model.dominant");
    if (c.train.drop_modalities.size() >= names.size())
        throw Error("config_conflict", "train.drop_modalities removes every modality");
    if (c.bench.seeds < 1) throw Error("invalid_config", "bench.seeds must be >= 1");
    if (c.corrupt.kind != "token" && c.corrupt.kind != "gaussian" && c.corrupt.kind != "missing")
        throw Error("invalid_config", "corrupt.kind must be token, gaussian or missing, got '" + c.corrupt.kind + "'");
}

}  // namespace dib::config
