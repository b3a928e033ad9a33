#pragma once

// Synthetic multimodal sentiment data and corruption protocols.
//
// Each sample draws a latent score s ~ U[-3, 3] and a shared distractor
// r ~ N(0, 1). Token t of modality m is
//
//   x[t] = strength_m * s * P_m[t] + distractor_scale * r * D_m[t] + nuisance,
//
// with fixed per-modality patterns P_m, D_m and i.i.d. Gaussian nuisance.
// Labels derive from s only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dib/autodiff.hpp"
#include "dib/common.hpp"
#include "dib/model.hpp"

namespace dib::data {

using ad::Tensor;
using model::ModalitySpec;
using model::TaskKind;
using json = nlohmann::ordered_json;

inline constexpr double kScoreMin = -3.0;
inline constexpr double kScoreMax = 3.0;

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw Error("invalid_config", "unknown split '" + s + "' (train, val, test)");
}

struct SyntheticSpec {
    std::size_t n_samples = 200;
    std::vector<ModalitySpec> modalities{{"t", 12, 16}, {"a", 20, 8}, {"v", 20, 8}};
    std::vector<double> strengths{1.0, 0.4, 0.4};
    double nuisance_std = 0.5;
    double distractor_scale = 1.0;
    TaskKind label_kind = TaskKind::regression;
    std::uint64_t seed = 1;
    /// Seed of the train/val/test assignment; 0 reuses `seed`.
    std::uint64_t split_seed = 0;
    double train_fraction = 0.6;
    double val_fraction = 0.2;

    void validate() const {
        if (n_samples == 0) throw Error("invalid_config", "data.n_samples must be positive");
        if (modalities.empty()) throw Error("invalid_config", "data needs at least one modality");
        if (strengths.size() != modalities.size())
            throw Error("invalid_config", "data.strengths needs one value per modality");
        for (double s : strengths)
            if (!(s >= 0.0) || !std::isfinite(s)) throw Error("invalid_config", "data.strengths must be finite and >= 0");
        for (const auto& m : modalities)
            if (m.seq_len < 1 || m.feat_dim < 1) throw Error("invalid_config", "modality shapes must be positive");
        if (!(nuisance_std >= 0.0) || !(distractor_scale >= 0.0))
            throw Error("invalid_config", "data noise scales must be >= 0");
        if (!(train_fraction > 0.0) || !(val_fraction >= 0.0) || train_fraction + val_fraction > 1.0)
            throw Error("invalid_config", "data split fractions must be positive and sum to at most 1");
    }
};

struct Dataset {
    std::vector<ModalitySpec> modalities;
    TaskKind label_kind = TaskKind::regression;
    std::vector<Tensor> features;                 // per modality, [N, l, d]
    std::vector<std::vector<double>> available;   // per modality, [N] of 0/1
    std::vector<double> labels;                   // score, 0/1, or bin index
    std::vector<Split> split;                     // per sample
    json generation;                              // spec and seeds used
    json corruption_log = json::array();          // applied in order

    std::size_t size() const { return labels.size(); }

    std::size_t modality_index(const std::string& name) const {
        for (std::size_t i = 0; i < modalities.size(); ++i)
            if (modalities[i].name == name) return i;
        throw Error("invalid_argument", "dataset has no modality '" + name + "'");
    }

    std::vector<std::size_t> indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < split.size(); ++i)
            if (split[i] == s) out.push_back(i);
        return out;
    }

    bool operator==(const Dataset& o) const {
        if (modalities.size() != o.modalities.size()) return false;
        for (std::size_t i = 0; i < modalities.size(); ++i)
            if (modalities[i].name != o.modalities[i].name || modalities[i].seq_len != o.modalities[i].seq_len ||
                modalities[i].feat_dim != o.modalities[i].feat_dim)
                return false;
        return label_kind == o.label_kind && features == o.features && available == o.available &&
               labels == o.labels && split == o.split && generation == o.generation &&
               corruption_log == o.corruption_log;
    }
};

/// Label for a latent score. Bins split [-3, 3] into seven equal widths.
inline double label_for(double s, TaskKind kind) {
    switch (kind) {
        case TaskKind::binary: return s > 0.0 ? 1.0 : 0.0;
        case TaskKind::multiclass: {
            const double w = (kScoreMax - kScoreMin) / 7.0;
            const auto bin = static_cast<long>(std::floor((s - kScoreMin) / w));
            return static_cast<double>(std::clamp<long>(bin, 0, 6));
        }
        case TaskKind::regression: return s;
    }
    return s;
}

namespace streams {
inline constexpr std::uint64_t pattern = 0x70617474;
inline constexpr std::uint64_t sample = 0x73616d70;
inline constexpr std::uint64_t split = 0x73706c74;
inline constexpr std::uint64_t tokens = 0x746f6b6e;
inline constexpr std::uint64_t gaussian = 0x67617573;
inline constexpr std::uint64_t missing = 0x6d697373;
}  // namespace streams

/// Seeded train/val/test assignment with exact counts.
inline std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed, double train_fraction, double val_fraction) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, streams::split));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
    std::vector<Split> out(n, Split::test);
    for (std::size_t i = 0; i < n; ++i)
        out[order[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    return out;
}

inline Dataset generate(const SyntheticSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.modalities = spec.modalities;
    ds.label_kind = spec.label_kind;
    const std::size_t n = spec.n_samples;
    const std::size_t nm = spec.modalities.size();

    std::vector<Tensor> signal, distract;
    for (std::size_t m = 0; m < nm; ++m) {
        const auto& ms = spec.modalities[m];
        Rng prng(derive_seed(spec.seed, streams::pattern, m));
        Tensor p({ms.seq_len, ms.feat_dim}), d({ms.seq_len, ms.feat_dim});
        for (double& v : p.values()) v = prng.normal();
        for (double& v : d.values()) v = prng.normal();
        signal.push_back(std::move(p));
        distract.push_back(std::move(d));
        ds.features.emplace_back(ad::Shape{n, ms.seq_len, ms.feat_dim});
        ds.available.emplace_back(n, 1.0);
    }
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(spec.seed, streams::sample, i));
        const double s = kScoreMin + (kScoreMax - kScoreMin) * rng.uniform();
        const double r = rng.normal();
        ds.labels[i] = label_for(s, spec.label_kind);
        for (std::size_t m = 0; m < nm; ++m) {
            const std::size_t len = signal[m].size();
            double* x = ds.features[m].data() + i * len;
            for (std::size_t j = 0; j < len; ++j)
                x[j] = spec.strengths[m] * s * signal[m][j] + spec.distractor_scale * r * distract[m][j] +
                       spec.nuisance_std * rng.normal();
        }
    }
    const std::uint64_t split_seed = spec.split_seed == 0 ? spec.seed : spec.split_seed;
    ds.split = assign_splits(n, split_seed, spec.train_fraction, spec.val_fraction);

    json mods = json::array();
    for (const auto& m : spec.modalities) mods.push_back({{"name", m.name}, {"seq_len", m.seq_len}, {"feat_dim", m.feat_dim}});
    ds.generation = {{"generator", "synthetic-latent-score"},
                     {"n_samples", n},
                     {"modalities", mods},
                     {"strengths", spec.strengths},
                     {"nuisance_std", spec.nuisance_std},
                     {"distractor_scale", spec.distractor_scale},
                     {"label_kind", model::to_string(spec.label_kind)},
                     {"seed", spec.seed},
                     {"split_seed", split_seed},
                     {"train_fraction", spec.train_fraction},
                     {"val_fraction", spec.val_fraction}};
    return ds;
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

struct SplitSet {
    bool train = true, val = true, test = true;

    bool contains(Split s) const {
        return s == Split::train ? train : (s == Split::val ? val : test);
    }
    json to_json() const {
        json a = json::array();
        if (train) a.push_back("train");
        if (val) a.push_back("val");
        if (test) a.push_back("test");
        return a;
    }
    static SplitSet parse(const std::string& csv) {
        SplitSet s{false, false, false};
        std::stringstream ss(csv);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
            if (a == std::string::npos) continue;
            switch (split_from_string(item.substr(a, b - a + 1))) {
                case Split::train: s.train = true; break;
                case Split::val: s.val = true; break;
                case Split::test: s.test = true; break;
            }
        }
        return s;
    }
};

inline void check_rate(double rate, const std::string& what) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw Error("invalid_config", what + " rate must be in [0, 1]");
}

/// Number of token positions altered per sequence of length `len`.
inline std::size_t tokens_altered(double rate, std::size_t len) {
    return std::min(len, static_cast<std::size_t>(std::llround(rate * static_cast<double>(len))));
}

/// Token noise on one modality: exactly round(rate * l) positions per
/// sequence are altered. Each chosen position is either replaced by a token
/// drawn from the dataset's empirical token distribution (another sample,
/// any position) or joins a set of positions that are cyclically permuted
/// among themselves, with equal probability. A lone swap position falls
/// back to replacement so every chosen position changes.
inline Dataset corrupt_tokens(Dataset ds, const std::string& modality, double rate, std::uint64_t seed,
                              SplitSet splits = {}) {
    check_rate(rate, "token noise");
    const std::size_t m = ds.modality_index(modality);
    const std::size_t n = ds.size();
    const std::size_t len = ds.modalities[m].seq_len, d = ds.modalities[m].feat_dim;
    const std::size_t k = tokens_altered(rate, len);
    const Tensor original = ds.features[m];
    std::size_t altered_total = 0;
    if (k > 0)
        for (std::size_t i = 0; i < n; ++i) {
            if (!splits.contains(ds.split[i])) continue;
            Rng rng(derive_seed(seed, streams::tokens, i));
            std::vector<std::size_t> pos(len);
            for (std::size_t p = 0; p < len; ++p) pos[p] = p;
            for (std::size_t p = 0; p < k; ++p) std::swap(pos[p], pos[p + rng.index(len - p)]);
            pos.resize(k);
            std::sort(pos.begin(), pos.end());
            std::vector<std::size_t> replace, swap;
            for (std::size_t p : pos) (rng.bernoulli(0.5) ? swap : replace).push_back(p);
            if (swap.size() == 1) {
                replace.push_back(swap[0]);
                swap.clear();
            }
            double* x = ds.features[m].data() + i * len * d;
            const double* src = original.data() + i * len * d;
            for (std::size_t q = 0; q < swap.size(); ++q)
                std::copy_n(src + swap[(q + 1) % swap.size()] * d, d, x + swap[q] * d);
            for (std::size_t p : replace) {
                std::size_t j = i, t = 0;
                if (n > 1) {
                    j = rng.index(n - 1);
                    if (j >= i) ++j;
                    t = rng.index(len);
                } else {
                    t = (p + 1 + rng.index(len - 1 > 0 ? len - 1 : 1)) % len;
                }
                std::copy_n(original.data() + (j * len + t) * d, d, x + p * d);
            }
            altered_total += k;
        }
    ds.corruption_log.push_back({{"kind", "token_noise"},
                                 {"modality", modality},
                                 {"rate", rate},
                                 {"positions_per_sequence", k},
                                 {"positions_altered", altered_total},
                                 {"seed", seed},
                                 {"splits", splits.to_json()}});
    return ds;
}

/// Additive N(0, std^2) noise on the given modalities. Samples whose
/// modality is missing stay zero.
inline Dataset corrupt_gaussian(Dataset ds, const std::vector<std::string>& modalities, double std,
                                std::uint64_t seed, SplitSet splits = {}) {
    if (!(std >= 0.0) || !std::isfinite(std)) throw Error("invalid_config", "gaussian noise std must be >= 0");
    for (const auto& name : modalities) {
        const std::size_t m = ds.modality_index(name);
        const std::size_t len = ds.modalities[m].seq_len * ds.modalities[m].feat_dim;
        if (std > 0.0)
            for (std::size_t i = 0; i < ds.size(); ++i) {
                if (!splits.contains(ds.split[i]) || ds.available[m][i] < 0.5) continue;
                Rng rng(derive_seed(seed, streams::gaussian ^ (m << 32), i));
                double* x = ds.features[m].data() + i * len;
                for (std::size_t j = 0; j < len; ++j) x[j] += std * rng.normal();
            }
    }
    ds.corruption_log.push_back({{"kind", "gaussian_noise"},
                                 {"modalities", modalities},
                                 {"std", std},
                                 {"seed", seed},
                                 {"splits", splits.to_json()}});
    return ds;
}

/// Per sample and modality, with probability `rate`, zero the modality and
/// clear its availability flag.
inline Dataset mask_missing(Dataset ds, double rate, std::uint64_t seed, std::vector<std::string> modalities = {},
                            SplitSet splits = {}) {
    check_rate(rate, "missing");
    if (modalities.empty())
        for (const auto& m : ds.modalities) modalities.push_back(m.name);
    std::vector<std::size_t> ids;
    for (const auto& name : modalities) ids.push_back(ds.modality_index(name));
    std::size_t masked = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (!splits.contains(ds.split[i])) continue;
        Rng rng(derive_seed(seed, streams::missing, i));
        for (std::size_t m : ids) {
            if (!rng.bernoulli(rate)) continue;
            const std::size_t len = ds.modalities[m].seq_len * ds.modalities[m].feat_dim;
            std::fill_n(ds.features[m].data() + i * len, len, 0.0);
            if (ds.available[m][i] > 0.5) ++masked;
            ds.available[m][i] = 0.0;
        }
    }
    ds.corruption_log.push_back({{"kind", "missing"},
                                 {"modalities", modalities},
                                 {"rate", rate},
                                 {"masked", masked},
                                 {"seed", seed},
                                 {"splits", splits.to_json()}});
    return ds;
}

/// Fraction of (sample, modality) slots currently marked missing.
inline double missing_fraction(const Dataset& ds) {
    std::size_t miss = 0, total = 0;
    for (const auto& a : ds.available)
        for (double v : a) {
            ++total;
            miss += v < 0.5;
        }
    return total ? static_cast<double>(miss) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline constexpr int kFormatVersion = 1;

namespace io {

inline void write_u32(std::ostream& f, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& f, const std::string& path) {
    unsigned char b[4] = {};
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw Error("bad_dataset", "truncated tensor file '" + path + "'");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

/// Tensor file: u32 rank, u32 dims, then f64 payload, all little-endian.
inline void write_tensor(const std::string& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("io_error", "cannot write '" + path + "'");
    write_u32(f, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_u32(f, static_cast<std::uint32_t>(d));
    for (double v : t.values()) {
        std::uint64_t u;
        std::memcpy(&u, &v, 8);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
        f.write(reinterpret_cast<const char*>(b), 8);
    }
    if (!f) throw Error("io_error", "failed writing '" + path + "'");
}

inline Tensor read_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("io_error", "cannot read '" + path + "'");
    ad::Shape shape(read_u32(f, path));
    for (auto& d : shape) d = read_u32(f, path);
    Tensor t(shape);
    for (double& v : t.values()) {
        unsigned char b[8] = {};
        f.read(reinterpret_cast<char*>(b), 8);
        if (!f) throw Error("bad_dataset", "truncated tensor file '" + path + "'");
        std::uint64_t u = 0;
        for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        std::memcpy(&v, &u, 8);
    }
    return t;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace io

inline void save(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json mods = json::array();
    json avail = json::object();
    for (std::size_t m = 0; m < ds.modalities.size(); ++m) {
        const auto& ms = ds.modalities[m];
        mods.push_back({{"name", ms.name}, {"seq_len", ms.seq_len}, {"feat_dim", ms.feat_dim}});
        std::vector<int> flags;
        for (double v : ds.available[m]) flags.push_back(v > 0.5 ? 1 : 0);
        avail[ms.name] = flags;
        io::write_tensor((fs::path(dir) / (ms.name + ".bin")).string(), ds.features[m]);
    }
    std::vector<std::string> split;
    for (Split s : ds.split) split.push_back(to_string(s));
    json meta = {{"format_version", kFormatVersion},
                 {"n_samples", ds.size()},
                 {"label_kind", model::to_string(ds.label_kind)},
                 {"modalities", mods},
                 {"generation", ds.generation},
                 {"corruption_log", ds.corruption_log},
                 {"available", avail},
                 {"split", split}};
    std::ofstream mf(fs::path(dir) / "meta.json");
    mf << meta.dump(2) << '\n';
    std::ofstream lf(fs::path(dir) / "labels.csv");
    lf << "sample_id,label\n";
    for (std::size_t i = 0; i < ds.size(); ++i) lf << i << ',' << io::format_double(ds.labels[i]) << '\n';
    if (!mf || !lf) throw Error("io_error", "failed writing dataset '" + dir + "'");
}

inline Dataset load(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path meta_path = fs::path(dir) / "meta.json";
    std::ifstream mf(meta_path);
    if (!mf) throw Error("io_error", "dataset directory '" + dir + "' has no meta.json");
    json meta;
    try {
        meta = json::parse(mf);
    } catch (const std::exception& e) {
        throw Error("bad_dataset", "cannot parse '" + meta_path.string() + "': " + e.what());
    }
    if (meta.value("format_version", 0) != kFormatVersion) throw Error("bad_dataset", "unsupported dataset format");
    Dataset ds;
    ds.label_kind = model::task_from_string(meta.at("label_kind").get<std::string>());
    const auto n = meta.at("n_samples").get<std::size_t>();
    for (const auto& m : meta.at("modalities")) {
        ModalitySpec ms{m.at("name").get<std::string>(), m.at("seq_len").get<std::size_t>(),
                        m.at("feat_dim").get<std::size_t>()};
        Tensor t = io::read_tensor((fs::path(dir) / (ms.name + ".bin")).string());
        if (t.shape() != ad::Shape{n, ms.seq_len, ms.feat_dim})
            throw Error("bad_dataset", "modality '" + ms.name + "' tensor has shape " + ad::shape_str(t.shape()));
        std::vector<double> flags;
        for (int v : meta.at("available").at(ms.name).get<std::vector<int>>()) flags.push_back(v ? 1.0 : 0.0);
        if (flags.size() != n) throw Error("bad_dataset", "availability flags for '" + ms.name + "' have wrong length");
        ds.modalities.push_back(ms);
        ds.features.push_back(std::move(t));
        ds.available.push_back(std::move(flags));
    }
    for (const auto& s : meta.at("split").get<std::vector<std::string>>()) ds.split.push_back(split_from_string(s));
    if (ds.split.size() != n) throw Error("bad_dataset", "split assignment has wrong length");
    ds.generation = meta.at("generation");
    ds.corruption_log = meta.at("corruption_log");

    std::ifstream lf(fs::path(dir) / "labels.csv");
    if (!lf) throw Error("io_error", "dataset directory '" + dir + "' has no labels.csv");
    std::string line;
    std::getline(lf, line);
    ds.labels.assign(n, 0.0);
    std::size_t seen = 0;
    while (std::getline(lf, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw Error("bad_dataset", "malformed labels.csv line '" + line + "'");
        const auto id = std::stoul(line.substr(0, comma));
        if (id >= n) throw Error("bad_dataset", "labels.csv sample id out of range");
        ds.labels[id] = std::strtod(line.c_str() + comma + 1, nullptr);
        ++seen;
    }
    if (seen != n) throw Error("bad_dataset", "labels.csv has " + std::to_string(seen) + " rows, expected " + std::to_string(n));
    return ds;
}

}  // namespace dib::data
