// geobeam: batch front-end for the ray, beam and reconstruction experiments.

#include "readers.hpp"
#include "geobeam/validate.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace geobeam;
using geobeam::cli::ConfigError;
using geobeam::cli::FlatConfig;
using namespace geobeam::cli;
using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Global {
    std::string config;
    std::string out;
    int threads = 1;
    bool json = false;
    bool dry_run = false;
    std::string check;
    std::string metric;
    std::string inject;
};

uint64_t env_seed() {
    const char* s = std::getenv("GEOBEAM_SEED");
    if (!s || !*s) return 7;
    try {
        return std::stoull(s);
    } catch (const std::exception&) {
        throw ConfigError(std::string("GEOBEAM_SEED: expected an unsigned integer, got '") + s + "'");
    }
}

std::string file_hash(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::string s((std::istreambuf_iterator<char>(f)), {});
    Hasher h;
    h.add(s);
    return h.hex();
}

// One manifest per output directory: written before the heavy work, completed
// with content hashes of the outputs at the end.
class RunManifest {
public:
    RunManifest(const std::string& sub, const Global& g, const std::string& config_text, fs::path dir)
        : dir_(std::move(dir)), t0_(std::chrono::steady_clock::now()) {
        fs::create_directories(dir_);
        Hasher h;
        h.add(config_text);
        j_ = {{"subcommand", sub},
              {"config", g.config},
              {"config_hash", h.hex()},
              {"output_dir", dir_.string()},
              {"tool_version", kVersion},
              {"seed", env_seed()},
              {"threads", g.threads},
              {"status", "running"},
              {"hashes", json::object()}};
        save();
    }

    void hash(const std::string& key, const json& value) { j_["hashes"][key] = value; }

    void finish() {
        json outs = json::object();
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(dir_))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& p : files) {
            const auto rel = fs::relative(p, dir_).generic_string();
            if (rel == "manifest.json" || rel.find("timings") != std::string::npos) continue;
            outs[rel] = file_hash(p);
        }
        j_["outputs"] = outs;
        j_["status"] = "complete";
        j_["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
        save();
    }

private:
    void save() const {
        std::ofstream f(dir_ / "manifest.json", std::ios::binary);
        f << j_.dump(2) << "\n";
    }

    fs::path dir_;
    std::chrono::steady_clock::time_point t0_;
    json j_;
};

void put(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error("cannot write " + p.string());
    f << s;
}

FlatConfig load_config(const Global& g) {
    return g.config.empty() ? FlatConfig::parse("", "<defaults>") : FlatConfig::load(g.config);
}

fs::path out_dir(const Global& g, const std::string& sub) { return g.out.empty() ? fs::path("out") / sub : fs::path(g.out); }

// --- raytransform ------------------------------------------------------------

int cmd_raytransform(const Global& g) {
    FlatConfig c = load_config(g);
    const MetricField m = read_metric(c, g.metric, false);
    const int n = c.integer("grid.n", 64);
    const int ns = c.integer("fan.n_s", 64), nt = c.integer("fan.n_theta", 64);
    const std::string kind = c.str("phantom.kind", "gaussian");
    const double sigma = c.num("phantom.sigma", 0.2);
    const Vec2 center = c.vec2("phantom.center", Vec2::Zero());
    const PotentialSpec bumps = read_potential(c, "phantom.bumps");
    const int modes = c.integer("phantom.modes", 3);
    InversionOptions io;
    io.reg_factor = c.num("invert.reg_factor", io.reg_factor);
    io.max_iter = c.integer("invert.max_iter", io.max_iter);
    io.tol = c.num("invert.tol", io.tol);
    c.reject_unknown();
    if (n < 8) throw ConfigError(c.at("grid.n") + ": field 'grid.n' must be >= 8");
    if (ns < 4 || nt < 4) throw ConfigError(c.at("fan.n_s") + ": fan resolution must be >= 4");
    if (kind != "gaussian" && kind != "bumps" && kind != "random")
        throw ConfigError(c.at("phantom.kind") + ": field 'phantom.kind' must be gaussian, bumps or random");

    if (g.dry_run) {
        std::cout << "raytransform plan: metric " << m.id() << ", grid " << n << "x" << n << ", fan " << ns << "x"
                  << nt << ", phantom " << kind << "\n";
        return 0;
    }
    const fs::path dir = out_dir(g, "raytransform");
    RunManifest man("raytransform", g, c.text(), dir);
    man.hash("metric", m.fingerprint());

    auto fan = std::make_shared<const InfluxGrid>(sample_influx(m, ns, nt));
    RayTransform T(m, grid_for(m, n), fan);
    GridFunction f;
    RayData d;
    if (kind == "random") {
        std::mt19937_64 rng(env_seed());
        f = random_phantom(m, n, rng, modes);
        d = T.forward(f);
    } else {
        ScalarField fn = kind == "gaussian"
                             ? ScalarField([=](const Vec2& x) { return std::exp(-(x - center).squaredNorm() / (2 * sigma * sigma)); })
                             : bumps.field();
        if (!fn) fn = [](const Vec2&) { return 0.0; };
        f = GridFunction::sample(m, n, fn);
        d = T.forward_exact(fn);
    }
    const InversionResult r = invert_ray(m, T, d, io);
    const GridFunction e = f.like(r.f.values - f.values);
    const double fn2 = grid_inner(m, f, f);
    const double rel = fn2 > 0 ? std::sqrt(grid_inner(m, e, e) / fn2) : std::sqrt(grid_inner(m, r.f, r.f));

    json s{{"metric", m.id()},
           {"grid_n", n},
           {"fan", {ns, nt}},
           {"phantom", kind},
           {"rel_l2_error", rel},
           {"cg_iterations", r.iterations},
           {"rel_residual", r.rel_residual},
           {"reg", r.reg}};
    if (g.check == "adjoint") {
        const auto a = check_adjoint(m, env_seed(), 10, n);
        s["adjoint_rel_error"] = a.value;
        std::cout << "adjoint identity relative error: " << a.value << " (" << a.detail << ")\n";
    } else if (!g.check.empty()) {
        throw ConfigError("--check: unknown check '" + g.check + "' (known: adjoint)");
    }
    std::ostringstream a, b, cc;
    f.write_csv(a);
    d.write_csv(b);
    r.f.write_csv(cc);
    put(dir / "phantom.csv", a.str());
    put(dir / "sinogram.csv", b.str());
    put(dir / "recovered.csv", cc.str());
    put(dir / "summary.json", s.dump(2) + "\n");
    man.finish();
    if (g.json)
        std::cout << s.dump(2) << "\n";
    else
        std::cout << "raytransform: rel L2 error " << rel << " after " << r.iterations << " CG iterations; wrote "
                  << dir.string() << "\n";
    return 0;
}

// --- beam ----------------------------------------------------------------------

int cmd_beam(const Global& g) {
    FlatConfig c = load_config(g);
    const MetricField m = read_metric(c, g.metric, true);
    BeamSweepOptions o;
    const auto lambdas = c.list("beam.lambdas", {50, 100, 200, 400});
    o.beam.a = read_exponent(c, "beam.a");
    o.beam.c_delta = c.num("beam.c_delta", o.beam.c_delta);
    o.beam.q_terms = c.integer("beam.q_terms", o.beam.q_terms);
    const double angle = c.num("beam.angle", 0);
    const Vec2 e(std::cos(angle), std::sin(angle));
    const Vec2 x0 = c.vec2("beam.start", -m.rho1() * e);
    const Vec2 v0 = c.vec2("beam.direction", e);
    o.cross = c.flag("beam.cross", true);
    o.lambda_h = c.num("mesh.lambda_h", 0.6);
    o.h = c.num("mesh.h", 0);
    const PotentialSpec q = read_potential(c, "beam.potential");
    c.reject_unknown();
    if (o.beam.q_terms < 0 || o.beam.q_terms > 2)
        throw ConfigError(c.at("beam.q_terms") + ": field 'beam.q_terms' must be 0, 1 or 2");
    o.q = q.field();
    o.beam.potential = o.q;
    for (size_t k = 1; k < lambdas.size(); ++k)
        if (!(lambdas[k] > lambdas[k - 1])) throw ConfigError(c.at("beam.lambdas") + ": lambdas must increase");

    if (g.dry_run) {
        std::cout << "beam plan: metric " << m.id() << ", " << lambdas.size() << " frequencies, a = " << o.beam.a
                  << ", c_delta = " << o.beam.c_delta << ", N = " << o.beam.q_terms << "\n";
        return 0;
    }
    const fs::path dir = out_dir(g, "beam");
    RunManifest man("beam", g, c.text(), dir);
    man.hash("metric", m.fingerprint());
    GeodesicPath gamma;
    gamma.t = {0};
    gamma.x = {x0};
    gamma.v = {v0};
    o.log = &std::cerr;
    const auto rows = beam_sweep(m, gamma, lambdas, o);

    std::vector<double> L, gap, res, cross;
    bool strictly = true;
    for (size_t k = 0; k < rows.size(); ++k) {
        L.push_back(rows[k].lambda);
        gap.push_back(std::abs(rows[k].gap));
        res.push_back(rows[k].residual);
        cross.push_back(rows[k].cross);
        if (k && !(rows[k].residual < rows[k - 1].residual)) strictly = false;
    }
    json s{{"metric", m.id()}, {"a", o.beam.a}, {"c_delta", o.beam.c_delta}, {"q_terms", o.beam.q_terms},
           {"rows", sweep_json(rows)}, {"residual_strictly_decreasing", strictly}};
    if (rows.size() >= 2) {
        s["gap_slope"] = loglog_slope(L, gap);
        s["residual_slope"] = loglog_slope(L, res);
        if (o.cross) s["cross_slope"] = loglog_slope(L, cross);
    }
    std::ostringstream csv;
    csv << "lambda,delta,mass,gap,residual,cross\n" << std::setprecision(17);
    for (const auto& r : rows)
        csv << r.lambda << ',' << r.delta << ',' << r.mass << ',' << r.gap << ',' << r.residual << ',' << r.cross
            << '\n';
    put(dir / "sweep.csv", csv.str());
    put(dir / "sweep.json", s.dump(2) + "\n");
    man.finish();
    if (g.json) {
        std::cout << s.dump(2) << "\n";
    } else {
        for (const auto& r : rows)
            std::cout << "lambda " << r.lambda << ": gap " << r.gap << ", residual " << r.residual << ", cross "
                      << r.cross << "\n";
        if (s.contains("gap_slope"))
            std::cout << "slopes: gap " << s["gap_slope"].get<double>() << ", residual "
                      << s["residual_slope"].get<double>() << "\n";
    }
    return 0;
}

// --- recover -------------------------------------------------------------------

int cmd_recover(const Global& g) {
    FlatConfig c = load_config(g);
    const ExperimentConfig e = read_experiment(c, g.metric);
    const MetricField m = e.make_metric();
    check_admissible(e, m);
    if (g.dry_run) {
        const auto fan = sample_influx(m, e.fan_s, e.fan_theta);
        size_t used = 0;
        for (const auto& nd : fan.nodes) used += nd.mu > e.mu_min;
        const double Ns = frequency_function(e.p.sample(m, e.grid_n), e.sobolev_s, m.rho());
        std::cout << "recover plan (dry run, nothing solved)\n"
                  << "  metric " << m.id() << " rho " << m.rho() << "\n"
                  << "  q = " << e.q.text() << "\n  p = " << e.p.text() << "\n"
                  << "  N_s(p) = " << Ns << " (s = " << e.sobolev_s << ", B = " << e.bound_B << ")\n"
                  << "  fan " << e.fan_s << "x" << e.fan_theta << ", " << used << " geodesics with mu > " << e.mu_min
                  << "\n  grid " << e.grid_n << "x" << e.grid_n << "\n";
        for (double lam : e.lambdas) {
            const int rings = static_cast<int>(std::ceil(m.rho() * lam / e.lambda_h));
            std::cout << "  lambda " << lam << ": ~" << 3L * rings * (rings + 1) + 1 << " vertices (estimated), "
                      << 6 * rings << " boundary nodes, 2 DN maps\n";
        }
        if (e.control) std::cout << "  control run p = 0 at lambda " << e.lambdas.front() << "\n";
        return 0;
    }
    const fs::path dir = out_dir(g, "recover");
    RunManifest man("recover", g, c.text(), dir);
    man.hash("metric", m.fingerprint());
    const RecoveryReport R = recover_potential(e, &std::cerr);
    json meshes = json::array();
    for (const auto& s : R.stages) meshes.push_back(s.mesh_hash);
    man.hash("meshes", meshes);
    R.write(dir);
    man.finish();
    const json s = R.summary();
    if (g.json) {
        std::cout << s.dump(2) << "\n";
    } else {
        for (const auto& st : R.stages)
            std::cout << "lambda " << st.lambda << ": rel L2 error " << st.rel_l2 << ", data rel error "
                      << st.data_rel_error << "\n";
        std::cout << "data decay slope " << R.data_slope << ", errors non-increasing "
                  << (R.errors_non_increasing ? "yes" : "no") << "\n";
        if (R.control)
            std::cout << "control: |p_hat| " << R.control->p_hat_norm << " vs floor " << R.control->p_hat_floor
                      << (R.control->at_floor ? " (at floor)" : " (ABOVE floor)") << "\n";
        std::cout << "wrote " << dir.string() << "\n";
    }
    return 0;
}

// --- validate ------------------------------------------------------------------

int cmd_validate(const Global& g) {
    if (!g.config.empty()) throw ConfigError("validate takes no config");
    ValidateOptions o;
    o.seed = env_seed();
    if (g.inject == "mu-sign")
        o.inject_mu_sign = true;
    else if (!g.inject.empty())
        throw ConfigError("--inject: unknown fault '" + g.inject + "' (known: mu-sign)");
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = run_validation(o);
    const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool ok = true;
    for (const auto& r : res) ok = ok && r.ok;
    if (g.json) {
        json a = json::array();
        for (const auto& r : res) a.push_back(r.to_json());
        std::cout << json{{"ok", ok}, {"seconds", total}, {"checks", a}}.dump(2) << "\n";
    } else {
        for (const auto& r : res)
            std::cout << (r.ok ? "PASS " : "FAIL ") << std::left << std::setw(22) << r.name << " value "
                      << std::setw(12) << r.value << " limit " << std::setw(8) << r.limit << " " << std::fixed
                      << std::setprecision(2) << r.seconds << " s  " << std::defaultfloat << r.detail << "\n";
        std::cout << (ok ? "validate: all checks passed" : "validate: FAILED") << " in " << total << " s\n";
    }
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"geobeam: geodesic ray transforms, Gaussian beams and potential recovery from DN data"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    Global g;
    app.add_option("--threads", g.threads, "worker threads (0 = hardware)")->check(CLI::NonNegativeNumber);
    app.add_flag("--json", g.json, "machine-readable summary on stdout");

    auto add_common = [&](CLI::App* s, bool config) {
        if (config) {
            s->add_option("--config", g.config, "flat key = value config file");
            s->add_option("--out", g.out, "output directory");
            s->add_flag("--dry-run", g.dry_run, "validate the config and print the plan");
        }
        s->add_flag("--json", g.json, "machine-readable summary on stdout");
        s->add_option("--threads", g.threads, "worker threads (0 = hardware)")->check(CLI::NonNegativeNumber);
    };
    auto* rt = app.add_subcommand("raytransform", "forward, adjoint and inversion on a configured phantom");
    add_common(rt, true);
    rt->add_option("--check", g.check, "extra check to run (adjoint)");
    rt->add_option("--metric", g.metric, "metric id, overrides metric.id");
    auto* bm = app.add_subcommand("beam", "quasimode lambda-sweep (concentration, residual, cross term)");
    add_common(bm, true);
    bm->add_option("--metric", g.metric, "metric id, overrides metric.id");
    auto* rc = app.add_subcommand("recover", "recover p from DN data of q and q + p");
    add_common(rc, true);
    rc->add_option("--metric", g.metric, "metric id, overrides metric.id");
    auto* va = app.add_subcommand("validate", "fast invariant suite");
    add_common(va, false);
    va->add_option("--inject", g.inject, "fault injection fixture (mu-sign)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    thread_count() = g.threads;
    try {
        if (*rt) return cmd_raytransform(g);
        if (*bm) return cmd_beam(g);
        if (*rc) return cmd_recover(g);
        if (*va) return cmd_validate(g);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const AdmissibilityError& e) {
        std::cerr << "refused: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
