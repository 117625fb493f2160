#include "homogelast/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "json.hpp"

namespace homogelast {

std::string format_g17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

DensityModel DensitySpec::build() const {
    if (kind == "layered") {
        return DensityModel::make_layered(breakpoints, stiffness, {alpha, p});
    }
    if (kind == "well") {
        Modulation mod;
        if (modulation == "constant") {
            mod = {Modulation::Kind::Constant, base, 0.0};
        } else if (modulation == "sine") {
            mod = {Modulation::Kind::SineProduct, base, amplitude};
        } else {
            throw ConfigError("density.modulation: unknown profile '" + modulation + "'");
        }
        return DensityModel::make_well({alpha, p}, mod);
    }
    throw ConfigError("density.kind: expected 'layered' or 'well', got '" + kind + "'");
}

std::vector<Mat2> FSampleSpec::sample() const {
    std::vector<Mat2> out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (int i = 0; i < count; ++i) {
        double theta = 2.0 * M_PI * (i % std::max(theta_count, 1)) / std::max(theta_count, 1);
        Mat2 dir;
        dir << nd(rng), nd(rng), nd(rng), nd(rng);
        dir /= dir.norm();
        double r = radius * (0.25 + 0.75 * ud(rng));
        out.push_back(rotation(theta) + r * dir);
    }
    return out;
}

namespace {

std::vector<double> parse_list(const std::string& value, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (...) {
            throw ConfigError(key + ": cannot parse number '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

std::string join_list(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += format_g17(v[i]);
    }
    return out;
}

using KvMap = std::map<std::string, std::string>;

KvMap parse_keyvalue(const std::string& text) {
    KvMap kv;
    std::stringstream ss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto notspace = [](unsigned char c) { return !std::isspace(c); };
        line.erase(line.begin(), std::find_if(line.begin(), line.end(), notspace));
        line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(), line.end());
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = line.substr(1, line.size() - 2);
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        key.erase(std::find_if(key.rbegin(), key.rend(), notspace).base(), key.end());
        value.erase(value.begin(), std::find_if(value.begin(), value.end(), notspace));
        kv[section.empty() ? key : section + "." + key] = value;
    }
    return kv;
}

KvMap flatten_json(const nlohmann::json& j) {
    KvMap kv;
    for (auto& [section, body] : j.items()) {
        if (!body.is_object()) throw ConfigError("json config: top level must hold sections");
        for (auto& [key, value] : body.items()) {
            std::string full = section + "." + key;
            if (value.is_array()) {
                std::string list;
                for (std::size_t i = 0; i < value.size(); ++i) {
                    if (i) list += ",";
                    list += format_g17(value[i].get<double>());
                }
                kv[full] = list;
            } else if (value.is_string()) {
                kv[full] = value.get<std::string>();
            } else if (value.is_number_integer()) {
                kv[full] = std::to_string(value.get<long long>());
            } else if (value.is_number()) {
                kv[full] = format_g17(value.get<double>());
            } else {
                throw ConfigError("json config: unsupported value type at " + full);
            }
        }
    }
    return kv;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
    std::size_t first = text.find_first_not_of(" \t\r\n");
    KvMap kv;
    if (first != std::string::npos && text[first] == '{') {
        kv = flatten_json(nlohmann::json::parse(text));
    } else {
        kv = parse_keyvalue(text);
    }

    ExperimentConfig cfg;
    auto get = [&](const std::string& key) -> const std::string* {
        auto it = kv.find(key);
        return it == kv.end() ? nullptr : &it->second;
    };
    auto want_double = [&](const std::string& key, double& slot) {
        if (const std::string* v = get(key)) {
            try {
                slot = std::stod(*v);
            } catch (...) {
                throw ConfigError(key + ": cannot parse number '" + *v + "'");
            }
        }
    };
    auto want_int = [&](const std::string& key, int& slot) {
        if (const std::string* v = get(key)) slot = std::stoi(*v);
    };
    auto want_u64 = [&](const std::string& key, std::uint64_t& slot) {
        if (const std::string* v = get(key)) slot = std::stoull(*v);
    };
    auto want_list = [&](const std::string& key, std::vector<double>& slot) {
        if (const std::string* v = get(key)) slot = parse_list(*v, key);
    };
    auto want_string = [&](const std::string& key, std::string& slot) {
        if (const std::string* v = get(key)) slot = *v;
    };

    want_string("density.kind", cfg.density.kind);
    want_list("density.breakpoints", cfg.density.breakpoints);
    want_list("density.stiffness", cfg.density.stiffness);
    want_double("density.alpha", cfg.density.alpha);
    want_double("density.p", cfg.density.p);
    want_string("density.modulation", cfg.density.modulation);
    want_double("density.base", cfg.density.base);
    want_double("density.amplitude", cfg.density.amplitude);

    want_list("calibration.mu_grid", cfg.calibration.mu_grid);
    want_list("calibration.delta_grid", cfg.calibration.delta_grid);
    want_u64("calibration.seed", cfg.calibration.seed);
    want_double("calibration.mollify_width", cfg.calibration.mollify_width);

    want_int("cell.grid_n", cfg.grid_n);
    want_int("cell.k", cfg.k);

    want_int("fsample.theta_count", cfg.fsample.theta_count);
    want_double("fsample.radius", cfg.fsample.radius);
    want_int("fsample.count", cfg.fsample.count);
    want_u64("fsample.seed", cfg.fsample.seed);

    want_list("eps.list", cfg.eps_list);
    want_int("eps.mesh_factor", cfg.mesh_factor);

    if (const std::string* v = get("load.f")) {
        std::vector<double> f = parse_list(*v, "load.f");
        if (f.size() != 2) throw ConfigError("load.f: expected two components");
        cfg.load.f = Vec2(f[0], f[1]);
    }
    std::string g_kind = "identity";
    want_string("load.g_kind", g_kind);
    if (g_kind == "identity") {
        cfg.load.g_kind = LoadData::BoundaryKind::Identity;
    } else if (g_kind == "rigid") {
        cfg.load.g_kind = LoadData::BoundaryKind::Rigid;
    } else if (g_kind == "sheared_rigid") {
        cfg.load.g_kind = LoadData::BoundaryKind::ShearedRigid;
    } else {
        throw ConfigError("load.g_kind: unknown kind '" + g_kind + "'");
    }
    want_double("load.g_theta", cfg.load.g_theta);
    if (const std::string* v = get("load.g_shift")) {
        std::vector<double> s = parse_list(*v, "load.g_shift");
        if (s.size() != 2) throw ConfigError("load.g_shift: expected two components");
        cfg.load.g_shift = Vec2(s[0], s[1]);
    }
    want_double("load.g_shear", cfg.load.g_shear);
    want_double("load.r", cfg.load.r);

    want_string("output.dir", cfg.output_dir);
    want_int("output.threads", cfg.threads);
    want_u64("output.seed", cfg.seed);

    // structural validation with key context
    if (cfg.density.kind == "layered") {
        if (cfg.density.breakpoints.size() < 2 || cfg.density.breakpoints.front() != 0.0 ||
            cfg.density.breakpoints.back() != 1.0)
            throw ConfigError("density.breakpoints: must run from 0 to 1");
        for (std::size_t i = 1; i < cfg.density.breakpoints.size(); ++i)
            if (cfg.density.breakpoints[i] <= cfg.density.breakpoints[i - 1])
                throw ConfigError("density.breakpoints: must be strictly increasing");
        if (cfg.density.stiffness.size() + 1 != cfg.density.breakpoints.size())
            throw ConfigError("density.stiffness: need one value per layer");
    }
    if (cfg.grid_n < 4) throw ConfigError("cell.grid_n: must be at least 4");
    if (cfg.k < 1 || cfg.k > 3) throw ConfigError("cell.k: must be 1, 2 or 3");
    if (cfg.load.r <= 2.0) throw ConfigError("load.r: requires r > d = 2");
    for (std::size_t i = 1; i < cfg.eps_list.size(); ++i)
        if (cfg.eps_list[i] >= cfg.eps_list[i - 1])
            throw ConfigError("eps.list: values must be strictly decreasing");
    return cfg;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

std::string ExperimentConfig::serialize() const {
    std::ostringstream os;
    os << "[density]\n";
    os << "kind = " << density.kind << "\n";
    os << "breakpoints = " << join_list(density.breakpoints) << "\n";
    os << "stiffness = " << join_list(density.stiffness) << "\n";
    os << "alpha = " << format_g17(density.alpha) << "\n";
    os << "p = " << format_g17(density.p) << "\n";
    os << "modulation = " << density.modulation << "\n";
    os << "base = " << format_g17(density.base) << "\n";
    os << "amplitude = " << format_g17(density.amplitude) << "\n";
    os << "\n[calibration]\n";
    os << "mu_grid = " << join_list(calibration.mu_grid) << "\n";
    os << "delta_grid = " << join_list(calibration.delta_grid) << "\n";
    os << "seed = " << calibration.seed << "\n";
    os << "mollify_width = " << format_g17(calibration.mollify_width) << "\n";
    os << "\n[cell]\n";
    os << "grid_n = " << grid_n << "\n";
    os << "k = " << k << "\n";
    os << "\n[fsample]\n";
    os << "theta_count = " << fsample.theta_count << "\n";
    os << "radius = " << format_g17(fsample.radius) << "\n";
    os << "count = " << fsample.count << "\n";
    os << "seed = " << fsample.seed << "\n";
    os << "\n[eps]\n";
    os << "list = " << join_list(eps_list) << "\n";
    os << "mesh_factor = " << mesh_factor << "\n";
    os << "\n[load]\n";
    os << "f = " << format_g17(load.f(0)) << "," << format_g17(load.f(1)) << "\n";
    os << "g_kind = "
       << (load.g_kind == LoadData::BoundaryKind::Identity
               ? "identity"
               : (load.g_kind == LoadData::BoundaryKind::Rigid ? "rigid" : "sheared_rigid"))
       << "\n";
    os << "g_theta = " << format_g17(load.g_theta) << "\n";
    os << "g_shift = " << format_g17(load.g_shift(0)) << "," << format_g17(load.g_shift(1)) << "\n";
    os << "g_shear = " << format_g17(load.g_shear) << "\n";
    os << "r = " << format_g17(load.r) << "\n";
    os << "\n[output]\n";
    os << "dir = " << output_dir << "\n";
    os << "threads = " << threads << "\n";
    os << "seed = " << seed << "\n";
    return os.str();
}

std::uint64_t ExperimentConfig::hash() const {
    std::string s = serialize();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace homogelast
