#include "distill/config.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>

#include "distill/error.hpp"

namespace distill {

using nlohmann::json;

TimeGrid GridSpec::build(const NoiseSchedule& schedule) const {
    if (spacing == Spacing::custom) return make_custom_grid(schedule, times);
    return make_grid(schedule, m_steps, spacing);
}

TimeGrid GridSpec::build(const NoiseSchedule& schedule, int steps) const {
    if (spacing == Spacing::custom) {
        if (steps + 1 != static_cast<int>(times.size())) {
            throw ValidationError("custom grids cannot be resized to " + std::to_string(steps) + " steps");
        }
        return make_custom_grid(schedule, times);
    }
    return make_grid(schedule, steps, spacing);
}

namespace {

std::size_t line_of_offset(const std::string& text, std::size_t offset) {
    offset = std::min(offset, text.size());
    std::size_t line = 1;
    for (std::size_t i = 0; i < offset; ++i) {
        if (text[i] == '\n') ++line;
    }
    return line;
}

// Walks the parsed tree keeping the key path, so type problems can be
// reported with the path and an approximate source line.
class Reader {
public:
    explicit Reader(const std::string& text) : text_(text) {}

    [[noreturn]] void fail(const std::string& path, const std::string& what) const {
        const auto leaf = path.substr(path.find_last_of('.') + 1);
        const auto bracket = leaf.find('[');
        const std::string key = leaf.substr(0, bracket);
        std::size_t line = 0;
        const auto pos = text_.find("\"" + key + "\"");
        if (pos != std::string::npos) line = line_of_offset(text_, pos);
        std::string msg = "config error at '" + path + "'";
        if (line) msg += " (line " + std::to_string(line) + ")";
        throw ParseError(msg + ": " + what, line, path);
    }

    const json& object(const json& j, const std::string& path) const {
        if (!j.is_object()) fail(path, "expected an object");
        return j;
    }

    void allow(const json& j, const std::string& path, std::initializer_list<const char*> keys) const {
        std::set<std::string> ok(keys.begin(), keys.end());
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!ok.count(it.key())) fail(join(path, it.key()), "unknown key");
        }
    }

    double number(const json& j, const std::string& path) const {
        if (!j.is_number()) fail(path, "expected a number");
        return j.get<double>();
    }

    std::int64_t integer(const json& j, const std::string& path) const {
        if (j.is_number_integer()) return j.get<std::int64_t>();
        if (j.is_number_float()) {
            const double d = j.get<double>();
            if (d == static_cast<double>(static_cast<std::int64_t>(d))) return static_cast<std::int64_t>(d);
        }
        fail(path, "expected an integer");
    }

    std::uint64_t unsigned_integer(const json& j, const std::string& path) const {
        if (j.is_number_unsigned()) return j.get<std::uint64_t>();
        if (j.is_number_integer()) fail(path, "expected a non-negative integer");
        fail(path, "expected an integer");
    }

    std::string string(const json& j, const std::string& path) const {
        if (!j.is_string()) fail(path, "expected a string");
        return j.get<std::string>();
    }

    bool boolean(const json& j, const std::string& path) const {
        if (!j.is_boolean()) fail(path, "expected true or false");
        return j.get<bool>();
    }

    std::vector<double> numbers(const json& j, const std::string& path) const {
        if (!j.is_array()) fail(path, "expected an array of numbers");
        std::vector<double> out;
        for (std::size_t i = 0; i < j.size(); ++i) out.push_back(number(j[i], path + "[" + std::to_string(i) + "]"));
        return out;
    }

    Vec vector(const json& j, const std::string& path) const {
        const auto v = numbers(j, path);
        return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }

    // Converts enum-string errors into keyed errors.
    template <class F>
    auto parse_enum(const json& j, const std::string& path, F&& from_string) const {
        const std::string s = string(j, path);
        try {
            return from_string(s);
        } catch (const ValidationError& e) {
            fail(path, e.what());
        }
    }

    static std::string join(const std::string& a, const std::string& b) { return a.empty() ? b : a + "." + b; }

private:
    const std::string& text_;
};

Component read_component(const Reader& rd, const json& j, const std::string& path) {
    rd.object(j, path);
    rd.allow(j, path, {"weight", "mean", "var", "condition"});
    Component c;
    if (!j.contains("weight") || !j.contains("mean") || !j.contains("var")) {
        rd.fail(path, "a component needs weight, mean and var");
    }
    c.weight = rd.number(j.at("weight"), path + ".weight");
    c.mean = rd.vector(j.at("mean"), path + ".mean");
    c.var = rd.vector(j.at("var"), path + ".var");
    if (j.contains("condition")) c.condition = static_cast<int>(rd.integer(j.at("condition"), path + ".condition"));
    return c;
}

StudentSpec read_student(const Reader& rd, const json& j, const std::string& path) {
    rd.object(j, path);
    rd.allow(j, path, {"kind", "params"});
    StudentSpec s;
    if (!j.contains("kind")) rd.fail(path, "student.kind is required");
    s.kind = rd.parse_enum(j.at("kind"), path + ".kind", student_kind_from_string);
    if (j.contains("params")) {
        const std::string pp = path + ".params";
        const json& p = rd.object(j.at("params"), pp);
        rd.allow(p, pp, {"delta_std", "mean_shift", "weight_perturbation", "n_inner"});
        if (p.contains("delta_std")) s.delta_std = rd.number(p.at("delta_std"), pp + ".delta_std");
        if (p.contains("mean_shift")) {
            const json& ms = p.at("mean_shift");
            if (!ms.is_array()) rd.fail(pp + ".mean_shift", "expected an array of vectors");
            for (std::size_t i = 0; i < ms.size(); ++i) {
                s.mean_shift.push_back(rd.vector(ms[i], pp + ".mean_shift[" + std::to_string(i) + "]"));
            }
        }
        if (p.contains("weight_perturbation")) {
            s.weight_perturbation = rd.numbers(p.at("weight_perturbation"), pp + ".weight_perturbation");
        }
        if (p.contains("n_inner")) s.n_inner = static_cast<int>(rd.integer(p.at("n_inner"), pp + ".n_inner"));
    }
    return s;
}

ExperimentConfig from_tree(const Reader& rd, const json& root) {
    rd.object(root, "");
    rd.allow(root, "", {"world", "student", "schedule", "grid", "solver", "guidance", "cfg", "condition", "n_samples",
                        "seed", "output", "reference", "metrics", "sweep", "convergence"});
    ExperimentConfig c;

    if (!root.contains("world")) rd.fail("world", "world is required");
    {
        const json& w = rd.object(root.at("world"), "world");
        rd.allow(w, "world", {"components"});
        if (!w.contains("components") || !w.at("components").is_array()) {
            rd.fail("world.components", "expected an array of components");
        }
        const json& comps = w.at("components");
        for (std::size_t i = 0; i < comps.size(); ++i) {
            c.world.push_back(read_component(rd, comps[i], "world.components[" + std::to_string(i) + "]"));
        }
    }
    if (!root.contains("student")) rd.fail("student", "student is required");
    c.student = read_student(rd, root.at("student"), "student");

    if (root.contains("schedule")) {
        const json& s = rd.object(root.at("schedule"), "schedule");
        rd.allow(s, "schedule", {"kind", "n_train", "beta_min", "beta_max"});
        if (s.contains("kind")) c.schedule.kind = rd.parse_enum(s.at("kind"), "schedule.kind", schedule_kind_from_string);
        if (s.contains("n_train")) c.schedule.n_train = static_cast<int>(rd.integer(s.at("n_train"), "schedule.n_train"));
        if (s.contains("beta_min")) c.schedule.beta_min = rd.number(s.at("beta_min"), "schedule.beta_min");
        if (s.contains("beta_max")) c.schedule.beta_max = rd.number(s.at("beta_max"), "schedule.beta_max");
    }
    if (root.contains("grid")) {
        const json& g = rd.object(root.at("grid"), "grid");
        rd.allow(g, "grid", {"m_steps", "spacing", "times"});
        if (g.contains("m_steps")) c.grid.m_steps = static_cast<int>(rd.integer(g.at("m_steps"), "grid.m_steps"));
        if (g.contains("spacing")) c.grid.spacing = rd.parse_enum(g.at("spacing"), "grid.spacing", spacing_from_string);
        if (g.contains("times")) c.grid.times = rd.numbers(g.at("times"), "grid.times");
        if (c.grid.spacing == Spacing::custom && g.contains("times") && !g.contains("m_steps")) {
            c.grid.m_steps = static_cast<int>(c.grid.times.size()) - 1;
        }
    }
    if (root.contains("solver")) {
        const json& s = rd.object(root.at("solver"), "solver");
        rd.allow(s, "solver", {"kind", "eta", "r", "cfg_mode"});
        if (s.contains("kind")) c.solver.kind = rd.parse_enum(s.at("kind"), "solver.kind", solver_kind_from_string);
        if (s.contains("eta")) c.solver.options.eta = rd.number(s.at("eta"), "solver.eta");
        if (s.contains("r")) c.solver.options.r = rd.number(s.at("r"), "solver.r");
        if (s.contains("cfg_mode")) {
            c.solver.options.cfg_mode = rd.parse_enum(s.at("cfg_mode"), "solver.cfg_mode", cfg_mode_from_string);
        }
    }
    if (root.contains("guidance")) {
        const json& g = rd.object(root.at("guidance"), "guidance");
        rd.allow(g, "guidance", {"lambda", "k", "renoise", "mode", "teacher_w", "gamma"});
        if (g.contains("lambda")) c.guidance.lambda = rd.number(g.at("lambda"), "guidance.lambda");
        if (g.contains("k")) c.guidance.k = static_cast<int>(rd.integer(g.at("k"), "guidance.k"));
        if (g.contains("renoise")) {
            c.guidance.renoise = rd.parse_enum(g.at("renoise"), "guidance.renoise", renoise_kind_from_string);
        }
        if (g.contains("mode")) c.guidance.mode = rd.parse_enum(g.at("mode"), "guidance.mode", guidance_mode_from_string);
        if (g.contains("teacher_w")) c.guidance.teacher_w = rd.number(g.at("teacher_w"), "guidance.teacher_w");
        if (g.contains("gamma") && !g.at("gamma").is_null()) c.guidance.gamma = rd.number(g.at("gamma"), "guidance.gamma");
    }
    if (root.contains("cfg")) {
        const json& g = rd.object(root.at("cfg"), "cfg");
        rd.allow(g, "cfg", {"w"});
        if (g.contains("w")) c.cfg.w = rd.number(g.at("w"), "cfg.w");
    }
    if (root.contains("condition") && !root.at("condition").is_null()) {
        c.condition = static_cast<int>(rd.integer(root.at("condition"), "condition"));
    }
    if (root.contains("n_samples")) c.n_samples = rd.integer(root.at("n_samples"), "n_samples");
    if (root.contains("seed")) c.seed = rd.unsigned_integer(root.at("seed"), "seed");
    if (root.contains("output")) c.output = rd.string(root.at("output"), "output");
    if (root.contains("reference")) {
        const json& r = rd.object(root.at("reference"), "reference");
        rd.allow(r, "reference", {"m_steps"});
        if (r.contains("m_steps")) c.reference.m_steps = static_cast<int>(rd.integer(r.at("m_steps"), "reference.m_steps"));
    }
    if (root.contains("metrics")) {
        const json& m = rd.object(root.at("metrics"), "metrics");
        rd.allow(m, "metrics", {"n_projections"});
        if (m.contains("n_projections")) {
            c.metrics.n_projections = static_cast<int>(rd.integer(m.at("n_projections"), "metrics.n_projections"));
        }
    }
    if (root.contains("sweep")) {
        const json& s = rd.object(root.at("sweep"), "sweep");
        rd.allow(s, "sweep", {"lambdas"});
        if (s.contains("lambdas")) c.sweep.lambdas = rd.numbers(s.at("lambdas"), "sweep.lambdas");
    }
    if (root.contains("convergence")) {
        const json& s = rd.object(root.at("convergence"), "convergence");
        rd.allow(s, "convergence", {"solvers", "steps", "reference_steps", "t_floor", "n_trajectories"});
        if (s.contains("solvers")) {
            const json& a = s.at("solvers");
            if (!a.is_array()) rd.fail("convergence.solvers", "expected an array of solver names");
            c.convergence.solvers.clear();
            for (std::size_t i = 0; i < a.size(); ++i) {
                c.convergence.solvers.push_back(rd.parse_enum(a[i], "convergence.solvers[" + std::to_string(i) + "]",
                                                              solver_kind_from_string));
            }
        }
        if (s.contains("steps")) {
            c.convergence.steps.clear();
            for (double v : rd.numbers(s.at("steps"), "convergence.steps")) c.convergence.steps.push_back(static_cast<int>(v));
        }
        if (s.contains("reference_steps")) {
            c.convergence.reference_steps =
                static_cast<int>(rd.integer(s.at("reference_steps"), "convergence.reference_steps"));
        }
        if (s.contains("t_floor")) c.convergence.t_floor = rd.number(s.at("t_floor"), "convergence.t_floor");
        if (s.contains("n_trajectories")) {
            c.convergence.n_trajectories =
                static_cast<int>(rd.integer(s.at("n_trajectories"), "convergence.n_trajectories"));
        }
    }
    return c;
}

json vec_json(const Vec& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

} // namespace

ExperimentConfig parse_config(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t line = line_of_offset(text, e.byte == 0 ? 0 : e.byte - 1);
        throw ParseError("malformed config (line " + std::to_string(line) + "): " + e.what(), line, "");
    }
    Reader rd(text);
    ExperimentConfig c = from_tree(rd, root);
    validate_config(c);
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

json to_json(const ExperimentConfig& c) {
    json root;
    json comps = json::array();
    for (const auto& comp : c.world) {
        comps.push_back({{"weight", comp.weight},
                         {"mean", vec_json(comp.mean)},
                         {"var", vec_json(comp.var)},
                         {"condition", comp.condition}});
    }
    root["world"] = {{"components", comps}};

    json params = json::object();
    if (c.student.delta_std) params["delta_std"] = *c.student.delta_std;
    if (!c.student.mean_shift.empty()) {
        json ms = json::array();
        for (const auto& v : c.student.mean_shift) ms.push_back(vec_json(v));
        params["mean_shift"] = ms;
    }
    if (!c.student.weight_perturbation.empty()) params["weight_perturbation"] = c.student.weight_perturbation;
    params["n_inner"] = c.student.n_inner;
    root["student"] = {{"kind", to_string(c.student.kind)}, {"params", params}};

    root["schedule"] = {{"kind", to_string(c.schedule.kind)},
                        {"n_train", c.schedule.n_train},
                        {"beta_min", c.schedule.beta_min},
                        {"beta_max", c.schedule.beta_max}};
    root["grid"] = {{"m_steps", c.grid.m_steps}, {"spacing", to_string(c.grid.spacing)}};
    if (!c.grid.times.empty()) root["grid"]["times"] = c.grid.times;
    root["solver"] = {{"kind", to_string(c.solver.kind)},
                      {"eta", c.solver.options.eta},
                      {"r", c.solver.options.r},
                      {"cfg_mode", to_string(c.solver.options.cfg_mode)}};
    root["guidance"] = {{"lambda", c.guidance.lambda},
                        {"k", c.guidance.k},
                        {"renoise", to_string(c.guidance.renoise)},
                        {"mode", to_string(c.guidance.mode)},
                        {"teacher_w", c.guidance.teacher_w}};
    if (c.guidance.gamma) root["guidance"]["gamma"] = *c.guidance.gamma;
    root["cfg"] = {{"w", c.cfg.w}};
    root["condition"] = c.condition ? json(*c.condition) : json(nullptr);
    root["n_samples"] = c.n_samples;
    root["seed"] = c.seed;
    root["output"] = c.output;
    root["reference"] = {{"m_steps", c.reference.m_steps}};
    root["metrics"] = {{"n_projections", c.metrics.n_projections}};
    root["sweep"] = {{"lambdas", c.sweep.lambdas}};
    json solvers = json::array();
    for (auto s : c.convergence.solvers) solvers.push_back(to_string(s));
    root["convergence"] = {{"solvers", solvers},
                           {"steps", c.convergence.steps},
                           {"reference_steps", c.convergence.reference_steps},
                           {"t_floor", c.convergence.t_floor},
                           {"n_trajectories", c.convergence.n_trajectories}};
    return root;
}

std::string serialize_config(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

void validate_config(const ExperimentConfig& c) {
    if (c.world.empty()) throw ValidationError("world.components must not be empty");
    const MixtureWorld world(c.world);
    if (c.condition && !world.has_label(*c.condition)) {
        throw ValidationError("condition " + std::to_string(*c.condition) + " owns no world component");
    }
    if (c.student.n_inner < 8) throw ValidationError("student.params.n_inner must be >= 8");
    if (c.student.delta_std && !std::isfinite(*c.student.delta_std)) {
        throw ValidationError("student.params.delta_std must be finite");
    }
    const NoiseSchedule schedule = c.schedule.build();
    // Building the student checks shift and perturbation shapes.
    (void)make_student(c.student, world, schedule);
    if (c.grid.spacing == Spacing::custom) {
        if (c.grid.times.empty()) throw ValidationError("custom grid spacing needs grid.times");
    } else if (c.grid.m_steps < 1 || c.grid.m_steps > c.schedule.n_train) {
        throw ValidationError("grid.m_steps must lie in [1, n_train]");
    }
    (void)c.grid.build(schedule);
    if (!(c.solver.options.eta >= 0.0 && c.solver.options.eta <= 1.0)) throw ValidationError("solver.eta must lie in [0, 1]");
    if (!(c.solver.options.r > 0.0 && c.solver.options.r < 1.0)) throw ValidationError("solver.r must lie in (0, 1)");
    c.guidance.validate();
    const int steps = c.grid.spacing == Spacing::custom ? static_cast<int>(c.grid.times.size()) - 1 : c.grid.m_steps;
    if (c.guidance.k > steps) throw ValidationError("guidance.k must not exceed the number of grid steps");
    if (!(c.cfg.w >= 0.0 && std::isfinite(c.cfg.w))) throw ValidationError("cfg.w must be >= 0");
    if (c.n_samples < 2) throw ValidationError("n_samples must be >= 2");
    if (c.reference.m_steps < 1) throw ValidationError("reference.m_steps must be >= 1");
    if (c.metrics.n_projections < 16) throw ValidationError("metrics.n_projections must be >= 16");
    for (double l : c.sweep.lambdas) {
        if (!(l >= 0.0 && l <= 1.0)) throw ValidationError("sweep.lambdas entries must lie in [0, 1]");
    }
    if (c.convergence.solvers.empty() || c.convergence.steps.empty()) {
        throw ValidationError("convergence needs at least one solver and one step count");
    }
    for (int m : c.convergence.steps) {
        if (m < 2) throw ValidationError("convergence.steps entries must be >= 2");
    }
    if (c.convergence.reference_steps < 2) throw ValidationError("convergence.reference_steps must be >= 2");
    if (!(c.convergence.t_floor > 0.0 && c.convergence.t_floor < c.schedule.n_train)) {
        throw ValidationError("convergence.t_floor must lie in (0, n_train)");
    }
    if (c.convergence.n_trajectories < 1) throw ValidationError("convergence.n_trajectories must be >= 1");
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string config_hash(const ExperimentConfig& config) {
    json j = to_json(config);
    j.erase("output");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a64(j.dump()));
    return buf;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json(a) == to_json(b); }

} // namespace distill
