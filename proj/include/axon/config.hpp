#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "axon/error.hpp"

namespace axon {

struct StageTraining {
    std::size_t epochs = 10;
    double lr = 1e-3;
    std::size_t batch = 1;
};

/// Every tunable of a run. Text form: `key = value` lines, `# comments`, and
/// `[section]` headers that prefix the following keys with `section.`.
struct PipelineConfig {
    std::uint64_t seed = 1;

    // paths (relative ones resolve against the config file's directory)
    std::string work_dir = ".";
    std::string dataset_dir = "data";
    std::string checkpoint_dir = "checkpoints";
    std::string output_dir = "output";

    // data
    std::size_t n_phantoms = 80;
    std::size_t h = 16, w = 16, d = 16; // generation grid
    std::size_t H = 16, W = 16, D = 16; // target grid
    std::size_t gamma = 1;
    std::size_t r = 4;
    double fov_mm = 320.0;
    double sid_factor = 4.0;
    double window_lo = -100.0, window_hi = 900.0;
    double cxr_noise = 0.002;    // detector noise on the X-ray stand-ins (intensity units)
    double cxr_max_shift = 1.5;  // misalignment of the stand-ins before registration (px)
    std::size_t register_radius = 3;

    // variant switches
    bool bi_planar = true;
    bool use_drr_mix = false;
    bool clamp_output = false;

    // schedules
    int bridge_T = 1000;
    double bridge_s_max = 1.0;
    int ddpm_T = 1000;
    double beta_start = 1e-4, beta_end = 2e-2;

    // networks
    std::vector<std::size_t> unet_mults{1, 2, 4};
    std::size_t coarse_base_channels = 8;
    std::size_t encoder_channels = 8;
    std::size_t fusion_channels = 8;
    std::size_t fine_base_channels = 8;
    std::size_t sr_n_rrdb = 2;
    std::size_t sr_base_features = 8;

    // training
    StageTraining coarse{10, 1e-3, 1};
    StageTraining prior{10, 1e-3, 1};
    StageTraining fine{10, 1e-3, 1};
    StageTraining sr{20, 1e-3, 1};
    bool sr_use_synthetic = false;
    std::string fine_condition = "coarse"; // coarse | rc

    // sampling
    int coarse_ddim_steps = 10;
    double coarse_eta = 0.0;
    int fine_ddim_steps = 10;
    double fine_eta = 0.0;

    std::filesystem::path base_dir; // directory of the config file

    std::filesystem::path resolve(const std::string& p) const {
        std::filesystem::path q(p);
        if (q.is_absolute()) return q;
        return (base_dir / std::filesystem::path(work_dir) / q).lexically_normal();
    }
    std::filesystem::path dataset_path() const { return resolve(dataset_dir); }
    std::filesystem::path checkpoint_path() const { return resolve(checkpoint_dir); }
    std::filesystem::path output_path() const { return resolve(output_dir); }

    /// Checkpoint tag of the projection/conditioning variant: pa|bi, plus _drr.
    std::string variant_tag() const { return std::string(bi_planar ? "bi" : "pa") + (use_drr_mix ? "_drr" : ""); }

    void validate() const {
        auto pow2 = [](std::size_t v) { return v > 0 && (v & (v - 1)) == 0; };
        if (h == 0 || w == 0 || d == 0) throw ConfigError("h, w, d must be positive");
        if (H != gamma * h || W != gamma * w || D != gamma * d)
            throw ConfigError("target grid must equal gamma x generation grid (H = gamma h, W = gamma w, D = gamma d)");
        if (h != w || w != d) throw ConfigError("only cubic grids are supported (h = w = d)");
        if (gamma != 1 && gamma != 2)
            throw ConfigError("gamma must be 1 (no SR) or 2; got " + std::to_string(gamma));
        if (!pow2(r)) throw ConfigError("r must be a power of two");
        if (unet_mults.empty()) throw ConfigError("unet_mults must not be empty");
        const std::size_t f = std::size_t(1) << (unet_mults.size() - 1);
        if (h % f != 0) throw ConfigError("h must be divisible by 2^(levels-1) = " + std::to_string(f));
        if (!(window_lo < window_hi)) throw ConfigError("window_lo must be below window_hi");
        if (n_phantoms < 1) throw ConfigError("n_phantoms must be >= 1");
        if (fine_condition != "coarse" && fine_condition != "rc")
            throw ConfigError("fine.condition must be 'coarse' or 'rc'");
        for (const auto* s : {&coarse, &prior, &fine, &sr})
            if (s->batch == 0 || !(s->lr > 0)) throw ConfigError("training batch and lr must be positive");
        if (coarse_ddim_steps < 1 || coarse_ddim_steps > bridge_T) throw ConfigError("coarse.ddim_steps out of range");
        if (fine_ddim_steps < 1 || fine_ddim_steps > ddpm_T) throw ConfigError("fine.ddim_steps out of range");
        if (register_radius < 1) throw ConfigError("register_radius must be >= 1");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

/// Removes a trailing `# comment` that is not inside quotes.
inline std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') quoted = !quoted;
        if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* e = v.data() + v.size();
    const auto r = std::from_chars(v.data(), e, out);
    if (r.ec != std::errc() || r.ptr != e || v.empty())
        throw ConfigError("config key '" + key + "': bad number '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::string parse_string(const std::string& v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    return v;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
        throw ConfigError("config key '" + key + "': expected a list like [1, 2, 4]");
    std::vector<std::size_t> out;
    std::stringstream ss(v.substr(1, v.size() - 2));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_number<std::size_t>(key, item));
    }
    return out;
}

inline std::string fmt_double(double x) {
    std::ostringstream o;
    o.precision(17);
    o << x;
    return o.str();
}

struct Field {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

inline std::map<std::string, Field> config_fields(PipelineConfig& c) {
    std::map<std::string, Field> f;
    auto num = [&](const std::string& k, auto& ref) {
        using T = std::remove_reference_t<decltype(ref)>;
        f[k] = {[&ref, k](const std::string& v) { ref = parse_number<T>(k, v); },
                [&ref]() {
                    if constexpr (std::is_floating_point_v<T>) return fmt_double(ref);
                    else return std::to_string(ref);
                }};
    };
    auto boolean = [&](const std::string& k, bool& ref) {
        f[k] = {[&ref, k](const std::string& v) { ref = parse_bool(k, v); },
                [&ref]() { return std::string(ref ? "true" : "false"); }};
    };
    auto str = [&](const std::string& k, std::string& ref) {
        f[k] = {[&ref](const std::string& v) { ref = parse_string(v); }, [&ref]() { return "\"" + ref + "\""; }};
    };
    auto stage = [&](const std::string& s, StageTraining& t) {
        num(s + ".epochs", t.epochs);
        num(s + ".lr", t.lr);
        num(s + ".batch", t.batch);
    };
    num("seed", c.seed);
    str("work_dir", c.work_dir);
    str("dataset_dir", c.dataset_dir);
    str("checkpoint_dir", c.checkpoint_dir);
    str("output_dir", c.output_dir);
    num("n_phantoms", c.n_phantoms);
    num("h", c.h);
    num("w", c.w);
    num("d", c.d);
    num("H", c.H);
    num("W", c.W);
    num("D", c.D);
    num("gamma", c.gamma);
    num("r", c.r);
    num("fov_mm", c.fov_mm);
    num("sid_factor", c.sid_factor);
    num("window_lo", c.window_lo);
    num("window_hi", c.window_hi);
    num("cxr_noise", c.cxr_noise);
    num("cxr_max_shift", c.cxr_max_shift);
    num("register_radius", c.register_radius);
    boolean("bi_planar", c.bi_planar);
    boolean("use_drr_mix", c.use_drr_mix);
    boolean("clamp_output", c.clamp_output);
    num("bridge.T", c.bridge_T);
    num("bridge.s_max", c.bridge_s_max);
    num("ddpm.T", c.ddpm_T);
    num("ddpm.beta_start", c.beta_start);
    num("ddpm.beta_end", c.beta_end);
    f["unet_mults"] = {[&c](const std::string& v) { c.unet_mults = parse_list("unet_mults", v); },
                       [&c]() {
                           std::string s = "[";
                           for (std::size_t i = 0; i < c.unet_mults.size(); ++i)
                               s += (i ? ", " : "") + std::to_string(c.unet_mults[i]);
                           return s + "]";
                       }};
    num("coarse.base_channels", c.coarse_base_channels);
    num("coarse.encoder_channels", c.encoder_channels);
    num("coarse.fusion_channels", c.fusion_channels);
    num("coarse.ddim_steps", c.coarse_ddim_steps);
    num("coarse.eta", c.coarse_eta);
    stage("coarse", c.coarse);
    stage("prior", c.prior);
    num("fine.base_channels", c.fine_base_channels);
    num("fine.ddim_steps", c.fine_ddim_steps);
    num("fine.eta", c.fine_eta);
    str("fine.condition", c.fine_condition);
    stage("fine", c.fine);
    num("sr.n_rrdb", c.sr_n_rrdb);
    num("sr.base_features", c.sr_base_features);
    boolean("sr.use_synthetic", c.sr_use_synthetic);
    stage("sr", c.sr);
    return f;
}

} // namespace detail

/// Parses config text; unknown or repeated keys are errors.
inline PipelineConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {}) {
    PipelineConfig c;
    c.base_dir = base_dir;
    auto fields = detail::config_fields(c);
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::trim(detail::strip_comment(line));
        if (line.empty()) continue;
        const std::string where = " (line " + std::to_string(lineno) + ")";
        if (line.front() == '[' && line.back() == ']' && line.find('=') == std::string::npos) {
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("expected key = value" + where);
        std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (!section.empty()) key = section + "." + key;
        auto it = fields.find(key);
        if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'" + where);
        if (!seen.insert(key).second) throw ConfigError("repeated config key '" + key + "'" + where);
        it->second.set(value);
    }
    return c;
}

/// Applies the AXON_SEED environment override.
inline void apply_env_overrides(PipelineConfig& c) {
    if (const char* s = std::getenv("AXON_SEED"); s && *s) c.seed = detail::parse_number<std::uint64_t>("AXON_SEED", s);
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(IoErrorKind::Open, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    PipelineConfig c = parse_config(ss.str(), std::filesystem::absolute(path).parent_path());
    apply_env_overrides(c);
    c.validate();
    return c;
}

/// Canonical text of every key (sorted), reparseable by parse_config.
inline std::string config_to_text(const PipelineConfig& c) {
    PipelineConfig copy = c;
    std::string out;
    for (auto& [k, f] : detail::config_fields(copy)) out += k + " = " + f.get() + "\n";
    return out;
}

} // namespace axon
