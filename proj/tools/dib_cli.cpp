// dib: entropy estimation, data generation, training, evaluation and the
// robustness benchmarks from the command line. Every run writes its outputs
// into --out together with the effective config, seed list and version.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dib/config.hpp"

#ifndef DIB_VERSION
#define DIB_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace dib;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string data_dir;
};

void add_common(CLI::App* sub, Common& c, bool needs_out = true) {
    sub->add_option("--config", c.config_path, "Config file (sectioned key = value)");
    sub->add_option("--set", c.sets, "Override one field: section.key=value")->allow_extra_args(false);
    sub->add_option("--seed", c.seed, "Seed (training seed, or master seed for benchmarks)");
    if (needs_out) sub->add_option("--out", c.out, "Run directory")->required();
}

config::RunConfig resolve(const Common& c, config::RunConfig rc = {}) {
    if (!c.config_path.empty()) config::load_file(rc, c.config_path);
    config::apply_env(rc);
    for (const auto& s : c.sets) config::apply_set(rc, s);
    return rc;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error("io_error", "cannot write '" + p.string() + "'");
    f << s;
}

fs::path open_run_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw Error("io_error", "cannot create run directory '" + out + "': " + ec.message());
    return fs::path(out);
}

void write_run_files(const fs::path& dir, const config::RunConfig& rc, const std::vector<std::uint64_t>& seeds) {
    write_text(dir / "config.ini", config::to_text(rc));
    write_text(dir / "seeds.json", json(seeds).dump(2) + "\n");
    write_text(dir / "version.txt", std::string(DIB_VERSION) + "\n");
}

std::string num(double v) { return std::isfinite(v) ? data::io::format_double(v) : std::string("nan"); }

std::string metrics_header() {
    std::string h;
    for (const auto& n : train::MetricsReport::names()) h += "," + n;
    return h;
}

std::string metrics_cells(const train::MetricsReport& r) {
    std::string s;
    for (double v : r.values()) s += "," + num(v);
    return s;
}

data::Dataset acquire_data(const Common& c, const config::RunConfig& rc) {
    if (!c.data_dir.empty()) {
        if (!fs::exists(c.data_dir)) throw Error("missing_input", "dataset directory '" + c.data_dir + "' does not exist");
        return data::load(c.data_dir);
    }
    return data::generate(rc.data);
}

std::vector<std::uint64_t> bench_seeds(const config::RunConfig& rc) {
    std::vector<std::uint64_t> s;
    for (std::size_t i = 0; i < rc.bench.seeds; ++i) s.push_back(bench::run_seed(rc.bench.master_seed, i));
    return s;
}

std::vector<std::vector<double>> read_rows(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("missing_input", "cannot read batch file '" + path + "'");
    std::vector<std::vector<double>> rows;
    std::string line;
    for (std::size_t lineno = 1; std::getline(f, line); ++lineno) {
        for (char& ch : line)
            if (ch == ',' || ch == ';' || ch == '\t') ch = ' ';
        std::istringstream in(line);
        std::vector<double> row;
        std::string tok;
        while (in >> tok) {
            if (tok[0] == '#') break;
            try {
                std::size_t used = 0;
                row.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw Error("bad_input", path + ":" + std::to_string(lineno) + ": not a number '" + tok + "'");
            }
        }
        if (!row.empty()) rows.push_back(std::move(row));
    }
    if (rows.empty()) throw Error("bad_input", "batch file '" + path + "' has no rows");
    return rows;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct EntropyArgs {
    std::string input, input2;
    std::optional<double> alpha;
    std::optional<std::size_t> k;
    bool full = false;
    std::string bandwidth;
    std::optional<double> sigma2;
    bool lanczos = false;
};

void cmd_entropy(const Common& c, const EntropyArgs& a) {
    config::RunConfig rc = resolve(c);
    auto& kc = rc.train.objective.kernel;
    if (a.alpha) kc.alpha = *a.alpha;
    if (a.k) kc.k_rank = *a.k;
    if (!a.bandwidth.empty()) config::apply_set(rc, "kernel.bandwidth=" + a.bandwidth);
    if (a.sigma2) kc.fixed_sigma2 = *a.sigma2;
    if (a.lanczos) kc.use_lanczos = true;
    kc.validate();

    const linalg::Matrix x = entropy::rows_as_matrix(read_rows(a.input));
    const auto n = static_cast<std::size_t>(x.rows());
    auto h_of = [&](const linalg::SymMatrix& g) {
        if (!a.full) return entropy::entropy_of(g, kc);
        return entropy::renyi_entropy_full(entropy::gram_spectrum(g, kc, false), kc);
    };
    const auto gx = entropy::gram_from_batch(x, kc, "input");
    json out{{"n", n}, {"alpha", kc.alpha}, {"k", a.full ? n : kc.k_rank}, {"estimator", a.full ? "full" : "lowrank"},
             {"sigma2_x", gx.sigma2}};
    if (!a.full) kc.check_rank(n);
    const double hx = h_of(gx.base);
    if (a.input2.empty()) {
        out["H"] = hx;
    } else {
        const linalg::Matrix y = entropy::rows_as_matrix(read_rows(a.input2));
        if (static_cast<std::size_t>(y.rows()) != n)
            throw Error("shape_mismatch", "entropy: batches have " + std::to_string(n) + " and " +
                                              std::to_string(y.rows()) + " rows");
        const auto gy = entropy::gram_from_batch(y, kc, "input2");
        const double hy = h_of(gy.base);
        const double hj = h_of(linalg::hadamard_normalized(gx.base, gy.base));
        out["sigma2_y"] = gy.sigma2;
        out["H_x"] = hx;
        out["H_y"] = hy;
        out["H_joint"] = hj;
        out["I"] = (std::min(hx, hy) + std::max(hx, hy)) - hj;
    }
    const std::string text = out.dump(2) + "\n";
    std::cout << text;
    if (!c.out.empty()) {
        const auto dir = open_run_dir(c.out);
        write_run_files(dir, rc, {});
        write_text(dir / "entropy.json", text);
    }
}

void cmd_gen_data(const Common& c) {
    config::RunConfig rc = resolve(c);
    if (c.seed) rc.data.seed = *c.seed;
    rc.data.validate();
    const auto ds = data::generate(rc.data);
    const auto dir = open_run_dir(c.out);
    data::save(ds, c.out);
    write_run_files(dir, rc, {rc.data.seed});
    std::cout << json{{"out", c.out}, {"n_samples", ds.size()}}.dump() << "\n";
}

void cmd_corrupt(const Common& c) {
    config::RunConfig rc = resolve(c);
    if (c.seed) rc.corrupt.seed = *c.seed;
    config::validate(rc);
    if (c.data_dir.empty()) throw Error("missing_input", "corrupt: --data is required");
    data::Dataset ds = acquire_data(c, rc);
    const auto& cs = rc.corrupt;
    if (cs.kind == "token") {
        const std::string m = cs.modalities.empty() ? rc.noise.token_modality : cs.modalities.front();
        if (cs.modalities.size() > 1) throw Error("config_conflict", "corrupt.kind=token takes one modality");
        ds = data::corrupt_tokens(std::move(ds), m, cs.rate, cs.seed, cs.splits);
    } else if (cs.kind == "gaussian") {
        ds = data::corrupt_gaussian(std::move(ds), cs.modalities.empty() ? rc.noise.gaussian_modalities : cs.modalities,
                                    cs.intensity, cs.seed, cs.splits);
    } else {
        ds = data::mask_missing(std::move(ds), cs.rate, cs.seed, cs.modalities, cs.splits);
    }
    const auto dir = open_run_dir(c.out);
    data::save(ds, c.out);
    write_run_files(dir, rc, {cs.seed});
    std::cout << json{{"out", c.out}, {"corruption", ds.corruption_log.back()}}.dump() << "\n";
}

std::string history_csv(const train::TrainResult& r) {
    std::string s = "epoch,steps,loss_total" + metrics_header() + "\n";
    for (const auto& e : r.history)
        s += std::to_string(e.epoch) + "," + std::to_string(e.steps) + "," + num(e.mean_loss.total) +
             metrics_cells(e.val) + "\n";
    return s;
}

void cmd_train(const Common& c) {
    config::RunConfig rc = resolve(c);
    if (c.seed) rc.train.seed = *c.seed;
    const data::Dataset ds = acquire_data(c, rc);
    config::validate(rc, &ds);
    const auto dir = open_run_dir(c.out);
    write_run_files(dir, rc, {rc.train.seed});
    train::TrainConfig tc = rc.train;
    tc.log_path = (dir / "train_log.jsonl").string();
    const auto r = train::train(ds, tc);
    r.model.save((dir / "model.bin").string());
    const auto val = train::evaluate(r.model, ds, tc, data::Split::val);
    const auto test = train::evaluate(r.model, ds, tc, data::Split::test);
    write_text(dir / "history.csv", history_csv(r));
    write_text(dir / "metrics.csv", "split" + metrics_header() + "\nval" + metrics_cells(val) + "\ntest" +
                                        metrics_cells(test) + "\n");
    const json summary{{"best_epoch", r.best_epoch},
                       {"parameters", r.model.parameter_count()},
                       {"detached", r.detached},
                       {"val", val.to_json()},
                       {"test", test.to_json()}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump() << "\n";
}

void cmd_eval(const Common& c, const std::string& model_dir, const std::string& split_name) {
    if (model_dir.empty()) throw Error("missing_input", "eval: --model is required");
    const fs::path md(model_dir);
    if (!fs::exists(md / "model.bin")) throw Error("missing_input", "eval: no model.bin in '" + model_dir + "'");
    config::RunConfig base;
    if (fs::exists(md / "config.ini")) config::load_file(base, (md / "config.ini").string());
    const config::RunConfig rc = resolve(c, base);
    const data::Dataset ds = acquire_data(c, rc);
    config::validate(rc, &ds);
    model::DibModel m = train::build_model(ds, rc.train);
    m.load((md / "model.bin").string());
    const auto split = data::split_from_string(split_name);
    const auto rep = train::evaluate(m, ds, rc.train, split);
    const auto dir = open_run_dir(c.out);
    write_run_files(dir, rc, {rc.train.seed});
    write_text(dir / "metrics.csv", "split" + metrics_header() + "\n" + split_name + metrics_cells(rep) + "\n");
    const json summary{{"split", split_name}, {"metrics", rep.to_json()}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump() << "\n";
}

std::vector<std::pair<std::string, train::TrainConfig>> noise_variants(const config::RunConfig& rc) {
    train::TrainConfig ablation = rc.train;
    ablation.objective.uni_lrib = false;
    ablation.objective.multi_lrib = false;
    return {{"dib", rc.train}, {"no_ib", ablation}};
}

void cmd_bench_noise(const Common& c) {
    config::RunConfig rc = resolve(c);
    if (c.seed) rc.bench.master_seed = *c.seed;
    const data::Dataset ds = acquire_data(c, rc);
    config::validate(rc, &ds);
    const auto seeds = bench_seeds(rc);
    const auto dir = open_run_dir(c.out);
    write_run_files(dir, rc, seeds);
    const auto res = bench::bench_noise(ds, rc.noise, noise_variants(rc), seeds);
    std::string csv = "variant,seed,condition" + metrics_header() + ",average_decline\n";
    for (const auto& r : res.rows) {
        const std::string head = r.variant + "," + std::to_string(r.seed) + ",";
        csv += head + "clean" + metrics_cells(r.clean) + ",\n";
        csv += head + "noisy" + metrics_cells(r.noisy) + ",\n";
        csv += head + "decline";
        for (double d : r.declines) csv += "," + num(d);
        csv += "," + num(r.average_decline) + "\n";
    }
    write_text(dir / "noise.csv", csv);
    write_text(dir / "summary.json", res.summary.dump(2) + "\n");
    std::cout << res.summary["paired"].dump() << "\n";
}

json sweep_summary(const std::vector<bench::SweepRow>& rows, const std::vector<double>& grid, const std::string& var) {
    json means = json::array();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        json m{{var, grid[i]}};
        for (const auto& name : train::MetricsReport::names()) {
            const double v = bench::sweep_means(rows, grid, name)[i];
            if (std::isfinite(v)) m[name] = v;
            else m[name] = nullptr;
        }
        means.push_back(m);
    }
    return {{"variable", var}, {"means", means}};
}

void write_sweep(const fs::path& dir, const std::string& file, const std::string& var,
                 const std::vector<bench::SweepRow>& rows, const std::vector<double>& grid) {
    std::string csv = var + ",seed" + metrics_header() + "\n";
    for (const auto& r : rows) csv += num(r.x) + "," + std::to_string(r.seed) + metrics_cells(r.test) + "\n";
    write_text(dir / file, csv);
    const json s = sweep_summary(rows, grid, var);
    write_text(dir / "summary.json", s.dump(2) + "\n");
    std::cout << s.dump() << "\n";
}

void check_grid(const std::vector<double>& grid, const std::string& what, double lo, double hi) {
    if (grid.empty()) throw Error("invalid_grid", what + ": grid is empty");
    for (double x : grid)
        if (!(x >= lo && x <= hi))
            throw Error("invalid_grid", what + ": value " + num(x) + " outside [" + num(lo) + ", " + num(hi) + "]");
}

void cmd_bench_intensity(const Common& c, const std::optional<std::vector<double>>& grid_flag) {
    config::RunConfig rc = resolve(c);
    if (c.seed) rc.bench.master_seed = *c.seed;
    if (grid_flag) rc.bench.intensities = *grid_flag;
    check_grid(rc.bench.intensities, "bench-intensity", 0.0, 1e6);
    const data::Dataset ds = acquire_data(c, rc);
    config::validate(rc, &ds);
    const auto seeds = bench_seeds(rc);
    const auto dir = open_run_dir(c.out);
    write_run_files(dir, rc, seeds);
    const auto mods = rc.bench.intensity_modalities;
    const auto cseed = rc.bench.corrupt_seed;
    const auto rows = bench::sweep(ds, rc.train, rc.bench.intensities, seeds, [&](const data::Dataset& d, double s) {
        return bench::intensity_corruption(d, s, mods, cseed);
    });
    write_sweep(dir, "intensity.csv", "intensity", rows, rc.bench.intensities);
}

void cmd_bench_missing(const Common& c, const std::optional<std::vector<double>>& grid_flag) {
    config::RunConfig rc = resolve(c);
    if (c.seed) rc.bench.master_seed = *c.seed;
    if (grid_flag) rc.bench.missing_rates = *grid_flag;
    check_grid(rc.bench.missing_rates, "bench-missing", 0.0, 1.0);
    const data::Dataset ds = acquire_data(c, rc);
    config::validate(rc, &ds);
    const auto seeds = bench_seeds(rc);
    const auto dir = open_run_dir(c.out);
    write_run_files(dir, rc, seeds);
    const auto mods = rc.bench.missing_modalities;
    const auto cseed = rc.bench.corrupt_seed;
    const auto rows = bench::sweep(ds, rc.train, rc.bench.missing_rates, seeds, [&](const data::Dataset& d, double r) {
        return r == 0.0 ? d : data::mask_missing(d, r, cseed, mods);
    });
    write_sweep(dir, "missing.csv", "missing_rate", rows, rc.bench.missing_rates);
}

void cmd_sweep_beta(const Common& c, const std::optional<std::vector<double>>& grid_flag) {
    config::RunConfig rc = resolve(c);
    if (c.seed) rc.bench.master_seed = *c.seed;
    if (grid_flag) rc.bench.betas = *grid_flag;
    check_grid(rc.bench.betas, "sweep-beta", 0.0, 1e12);
    const data::Dataset ds = acquire_data(c, rc);
    config::validate(rc, &ds);
    const auto seeds = bench_seeds(rc);
    const auto dir = open_run_dir(c.out);
    write_run_files(dir, rc, seeds);
    const auto res = bench::sweep_beta(ds, rc.train, rc.bench.betas, seeds);
    std::string csv = "beta,seed,i_xt,i_ty,i_ty_variational,task\n";
    for (const auto& p : res.points)
        csv += num(p.beta) + "," + std::to_string(p.seed) + "," + num(p.i_xt) + "," + num(p.i_ty) + "," +
               num(p.i_ty_var) + "," + num(p.task) + "\n";
    write_text(dir / "frontier.csv", csv);
    json means = json::array();
    for (std::size_t i = 0; i < rc.bench.betas.size(); ++i)
        means.push_back({{"beta", rc.bench.betas[i]}, {"i_xt", res.mean_i_xt[i]}, {"i_ty", res.mean_i_ty[i]}});
    json summary{{"means", means}};
    if (rc.bench.betas.size() >= 2) summary["spearman"] = res.spearman;
    else summary["spearman"] = nullptr;
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Double information bottleneck: entropy estimation, training and robustness benchmarks"};
    app.set_version_flag("--version", std::string(DIB_VERSION));
    app.require_subcommand(1);

    Common common;
    EntropyArgs ea;
    std::string model_dir, split_name = "test";
    std::optional<std::vector<double>> grid;

    auto* ent = app.add_subcommand("entropy", "Low-rank Renyi entropy of a batch, or joint entropy and MI of two");
    add_common(ent, common, false);
    ent->add_option("--out", common.out, "Optional run directory");
    ent->add_option("--input", ea.input, "Batch file: one sample per line, numbers separated by spaces or commas")
        ->required();
    ent->add_option("--input2", ea.input2, "Second batch with the same number of rows");
    ent->add_option("--alpha", ea.alpha, "Entropy order");
    ent->add_option("--k", ea.k, "Truncation rank");
    ent->add_flag("--full", ea.full, "Use the full spectrum instead of the low-rank estimate");
    ent->add_option("--bandwidth", ea.bandwidth, "top5 or fixed");
    ent->add_option("--sigma2", ea.sigma2, "Kernel width for --bandwidth fixed");
    ent->add_flag("--lanczos", ea.lanczos, "Top-k eigenvalues by Lanczos");

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multimodal dataset");
    add_common(gen, common);

    auto* cor = app.add_subcommand("corrupt", "Apply one corruption (token, gaussian or missing) to a dataset");
    add_common(cor, common);
    cor->add_option("--data", common.data_dir, "Input dataset directory")->required();

    auto* tr = app.add_subcommand("train", "Train a model and evaluate it on val and test");
    add_common(tr, common);
    tr->add_option("--data", common.data_dir, "Dataset directory (default: generate from [data])");

    auto* ev = app.add_subcommand("eval", "Evaluate a trained model");
    add_common(ev, common);
    ev->add_option("--data", common.data_dir, "Dataset directory (default: generate from [data])");
    ev->add_option("--model", model_dir, "Run directory of a train command")->required();
    ev->add_option("--split", split_name, "train, val or test");

    auto* bn = app.add_subcommand("bench-noise", "Clean vs noisy training for DIB and the no-IB ablation");
    add_common(bn, common);
    bn->add_option("--data", common.data_dir, "Dataset directory (default: generate from [data])");

    auto* bi = app.add_subcommand("bench-intensity", "Sweep Gaussian noise intensity");
    add_common(bi, common);
    bi->add_option("--data", common.data_dir, "Dataset directory (default: generate from [data])");
    bi->add_option("--grid", grid, "Noise standard deviations")->delimiter(',');

    auto* bm = app.add_subcommand("bench-missing", "Sweep the missing-modality rate");
    add_common(bm, common);
    bm->add_option("--data", common.data_dir, "Dataset directory (default: generate from [data])");
    bm->add_option("--rates", grid, "Missing rates")->delimiter(',');

    auto* sb = app.add_subcommand("sweep-beta", "Information-plane coordinates per beta");
    add_common(sb, common);
    sb->add_option("--data", common.data_dir, "Dataset directory (default: generate from [data])");
    sb->add_option("--betas", grid, "Beta values")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", {{"code", "usage"}, {"message", e.what()}}}}.dump() << "\n";
        return 2;
    }

    try {
        if (ent->parsed()) cmd_entropy(common, ea);
        else if (gen->parsed()) cmd_gen_data(common);
        else if (cor->parsed()) cmd_corrupt(common);
        else if (tr->parsed()) cmd_train(common);
        else if (ev->parsed()) cmd_eval(common, model_dir, split_name);
        else if (bn->parsed()) cmd_bench_noise(common);
        else if (bi->parsed()) cmd_bench_intensity(common, grid);
        else if (bm->parsed()) cmd_bench_missing(common, grid);
        else if (sb->parsed()) cmd_sweep_beta(common, grid);
    } catch (const Error& e) {
        std::cerr << json{{"error", {{"code", e.code()}, {"message", e.what()}}}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << "\n";
        return 1;
    }
    return 0;
}
