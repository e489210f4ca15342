#ifndef GEOBEAM_TOOLS_READERS_HPP
#define GEOBEAM_TOOLS_READERS_HPP

// Typed readers for the config keys shared by the CLI and the acceptance runner.

#include "flat_config.hpp"
#include "geobeam/reconstruct.hpp"

namespace geobeam::cli {

// metric.id is required in config files; --metric overrides it.
// allow_default lets an empty config (no file) fall back to the Euclidean disk.
inline MetricField read_metric(FlatConfig& c, const std::string& override_id, bool allow_default) {
    std::string id;
    if (c.has("metric.id")) id = c.require("metric.id");
    if (!override_id.empty()) id = override_id;
    if (id.empty()) {
        if (!allow_default || !c.text().empty()) c.require("metric.id");
        id = "euclidean";
    }
    const double rho = c.num("metric.rho", id == "hyperbolic" ? 0.6 : 1.0);
    try {
        return metric_by_id(id, rho);
    } catch (const ArgumentError& e) {
        throw ConfigError(c.at("metric.id") + ": field 'metric.id': " + e.what());
    }
}

inline double read_exponent(FlatConfig& c, const std::string& key) {
    const double a = c.num(key, 0.4);
    if (!(a > 1.0 / 3 && a < 0.5)) {
        std::ostringstream os;
        os << c.at(key) << ": field '" << key << "' = " << a << " outside the open interval (1/3, 1/2)";
        throw ConfigError(os.str());
    }
    return a;
}

inline PotentialSpec read_potential(FlatConfig& c, const std::string& key) {
    try {
        return PotentialSpec::parse(c.str(key, "0"));
    } catch (const ArgumentError& e) {
        throw ConfigError(c.at(key) + ": field '" + key + "': " + e.what());
    }
}

// recover subcommand keys; rejects leftovers
inline ExperimentConfig read_experiment(FlatConfig& c, const std::string& override_id = "") {
    ExperimentConfig e;
    const MetricField m = read_metric(c, override_id, false);
    e.metric = m.id();
    e.rho = m.rho();
    const bool pair = c.has("pair.q1") || c.has("pair.q2");
    if (pair) {
        if (c.has("potential.q") || c.has("potential.p"))
            throw ConfigError(c.at("pair.q1") + ": give either pair.q1/pair.q2 or potential.q/potential.p");
        e.set_pair(read_potential(c, "pair.q1"), read_potential(c, "pair.q2"));
    } else {
        e.q = read_potential(c, "potential.q");
        e.p = read_potential(c, "potential.p");
    }
    e.lambdas = c.list("recover.lambdas", e.lambdas);
    e.a = read_exponent(c, "beam.a");
    e.c_delta = c.num("beam.c_delta", e.c_delta);
    e.q_terms = c.integer("beam.q_terms", e.q_terms);
    e.fan_s = c.integer("fan.n_s", e.fan_s);
    e.fan_theta = c.integer("fan.n_theta", e.fan_theta);
    e.mu_min = c.num("fan.mu_min", e.mu_min);
    e.grid_n = c.integer("grid.n", e.grid_n);
    e.sobolev_s = c.num("sobolev.s", e.sobolev_s);
    e.bound_B = c.num("sobolev.B", e.bound_B);
    e.support_margin = c.num("support.margin", e.support_margin);
    e.lambda_h = c.num("mesh.lambda_h", e.lambda_h);
    e.reg_factor = c.num("invert.reg_factor", e.reg_factor);
    e.max_iter = c.integer("invert.max_iter", e.max_iter);
    e.control = c.flag("control.enabled", e.control);
    c.reject_unknown();
    try {
        e.validate();
    } catch (const ArgumentError& err) {
        throw ConfigError(c.source() + ": " + err.what());
    }
    return e;
}

} // namespace geobeam::cli

#endif // GEOBEAM_TOOLS_READERS_HPP
