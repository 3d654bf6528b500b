#include "arflow/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace arflow {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void type_error(const std::string& key, const std::string& value,
                             const std::string& expected) {
    throw TensorError("config: key '" + key + "' expects " + expected + ", got '" + value + "'");
}

long long parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        long long out = std::stoll(v, &pos);
        if (pos != v.size()) type_error(key, v, "an integer");
        return out;
    } catch (const TensorError&) {
        throw;
    } catch (...) {
        type_error(key, v, "an integer");
    }
}

int parse_int(const std::string& key, const std::string& v) {
    return static_cast<int>(parse_i64(key, v));
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) type_error(key, v, "an unsigned integer");
        return out;
    } catch (const TensorError&) {
        throw;
    } catch (...) {
        type_error(key, v, "an unsigned integer");
    }
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) type_error(key, v, "a number");
        return out;
    } catch (const TensorError&) {
        throw;
    } catch (...) {
        type_error(key, v, "a number");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    type_error(key, v, "a bool (true/false)");
}

std::string iso_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::filesystem::path out_path(const ExperimentConfig& cfg, const std::string& name) {
    return std::filesystem::path(cfg.out) / name;
}

}  // namespace

// ---- ExperimentConfig ---------------------------------------------------------

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "a",           "asd_first_frame", "batch",        "bidir_teacher", "chunk",
        "context_units", "ema_beta",      "eval_rollouts", "fake_per_gen",  "frame_dim",
        "full_depth_grad", "grid_k",      "hidden",       "layers",        "lr1",
        "lr2",         "lr3",            "lr_fake",      "mu",            "num_frames",
        "ode_pairs",   "out",            "s",            "s0",            "schedule",
        "seed",        "stage2",         "stage3_fake_init", "stage3_real", "steps1",
        "steps2",      "steps3",         "world",
    };
    return keys;
}

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "world") {
        cfg.world = value;
    } else if (key == "frame_dim") {
        cfg.frame_dim = parse_int(key, value);
    } else if (key == "num_frames") {
        cfg.num_frames = parse_int(key, value);
    } else if (key == "chunk") {
        cfg.chunk = parse_int(key, value);
    } else if (key == "a") {
        cfg.a = parse_f64(key, value);
        cfg.a_explicit = true;
    } else if (key == "s") {
        cfg.s = parse_f64(key, value);
        cfg.s_explicit = true;
    } else if (key == "s0") {
        cfg.s0 = parse_f64(key, value);
    } else if (key == "mu") {
        cfg.mu = parse_f64(key, value);
    } else if (key == "hidden") {
        cfg.hidden = parse_int(key, value);
    } else if (key == "layers") {
        cfg.layers = parse_int(key, value);
    } else if (key == "context_units") {
        cfg.context_units = parse_int(key, value);
    } else if (key == "schedule") {
        cfg.schedule = value;
    } else if (key == "grid_k") {
        cfg.grid_k = parse_int(key, value);
    } else if (key == "stage2") {
        cfg.stage2 = value;
    } else if (key == "steps1") {
        cfg.steps1 = parse_i64(key, value);
    } else if (key == "steps2") {
        cfg.steps2 = parse_i64(key, value);
    } else if (key == "steps3") {
        cfg.steps3 = parse_i64(key, value);
    } else if (key == "batch") {
        cfg.batch = parse_int(key, value);
    } else if (key == "lr1") {
        cfg.lr1 = parse_f64(key, value);
    } else if (key == "lr2") {
        cfg.lr2 = parse_f64(key, value);
    } else if (key == "lr3") {
        cfg.lr3 = parse_f64(key, value);
    } else if (key == "lr_fake") {
        cfg.lr_fake = parse_f64(key, value);
    } else if (key == "ema_beta") {
        cfg.ema_beta = parse_f64(key, value);
    } else if (key == "ode_pairs") {
        cfg.ode_pairs = parse_int(key, value);
    } else if (key == "fake_per_gen") {
        cfg.fake_per_gen = parse_int(key, value);
    } else if (key == "asd_first_frame") {
        cfg.asd_first_frame = parse_bool(key, value);
    } else if (key == "full_depth_grad") {
        cfg.full_depth_grad = parse_bool(key, value);
    } else if (key == "stage3_real") {
        cfg.stage3_real = value;
    } else if (key == "stage3_fake_init") {
        cfg.stage3_fake_init = value;
    } else if (key == "bidir_teacher") {
        cfg.bidir_teacher = value;
    } else if (key == "seed") {
        cfg.seed = parse_u64(key, value);
    } else if (key == "out") {
        cfg.out = value;
    } else if (key == "eval_rollouts") {
        cfg.eval_rollouts = parse_int(key, value);
    } else {
        std::string keys;
        for (const auto& k : config_keys()) keys += (keys.empty() ? "" : ", ") + k;
        throw TensorError("config: unknown key '" + key + "'; valid keys: " + keys);
    }
}

std::string ExperimentConfig::canonical_text() const {
    // alphabetical key order, canonical value formatting; `out` and `seed`
    // are run identity, not config semantics
    std::ostringstream os;
    os << "a=" << fmt_double(effective_a()) << "\n";
    os << "asd_first_frame=" << (asd_first_frame ? "true" : "false") << "\n";
    os << "batch=" << batch << "\n";
    os << "bidir_teacher=" << bidir_teacher << "\n";
    os << "chunk=" << chunk << "\n";
    os << "context_units=" << context_units << "\n";
    os << "ema_beta=" << fmt_double(ema_beta) << "\n";
    os << "eval_rollouts=" << eval_rollouts << "\n";
    os << "fake_per_gen=" << fake_per_gen << "\n";
    os << "frame_dim=" << frame_dim << "\n";
    os << "full_depth_grad=" << (full_depth_grad ? "true" : "false") << "\n";
    os << "grid_k=" << grid_k << "\n";
    os << "hidden=" << hidden << "\n";
    os << "layers=" << layers << "\n";
    os << "lr1=" << fmt_double(lr1) << "\n";
    os << "lr2=" << fmt_double(lr2) << "\n";
    os << "lr3=" << fmt_double(lr3) << "\n";
    os << "lr_fake=" << fmt_double(lr_fake) << "\n";
    os << "mu=" << fmt_double(mu) << "\n";
    os << "num_frames=" << num_frames << "\n";
    os << "ode_pairs=" << ode_pairs << "\n";
    os << "s=" << fmt_double(effective_s()) << "\n";
    os << "s0=" << fmt_double(s0) << "\n";
    os << "schedule=" << schedule << "\n";
    os << "stage2=" << stage2 << "\n";
    os << "stage3_fake_init=" << stage3_fake_init << "\n";
    os << "stage3_real=" << stage3_real << "\n";
    os << "steps1=" << steps1 << "\n";
    os << "steps2=" << steps2 << "\n";
    os << "steps3=" << steps3 << "\n";
    os << "world=" << world << "\n";
    return os.str();
}

uint64_t ExperimentConfig::hash() const {
    uint64_t h = 14695981039346656037ULL;  // FNV-1a
    for (unsigned char c : canonical_text()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void ExperimentConfig::validate() const {
    world_spec().validate();
    (void)step_schedule();
    static const std::vector<std::string> variants = {"causal_cd", "causal_ode", "causal_dmd",
                                                      "bidir_ode", "none"};
    if (std::find(variants.begin(), variants.end(), stage2) == variants.end()) {
        throw TensorError("config: stage2 must be one of causal_cd, causal_ode, causal_dmd, "
                          "bidir_ode, none");
    }
    if (stage3_real != "oracle" && stage3_real != "learned") {
        throw TensorError("config: stage3_real must be oracle or learned");
    }
    if (stage3_fake_init != "teacher" && stage3_fake_init != "student") {
        throw TensorError("config: stage3_fake_init must be teacher or student");
    }
    if (bidir_teacher != "oracle" && bidir_teacher != "learned") {
        throw TensorError("config: bidir_teacher must be oracle or learned");
    }
    if (steps1 < 0 || steps2 < 0 || steps3 < 0) throw TensorError("config: negative step budget");
    if (batch < 1) throw TensorError("config: batch must be >= 1");
    if (grid_k < 2) throw TensorError("config: grid_k must be >= 2");
    if (eval_rollouts < 100) throw TensorError("config: eval_rollouts must be >= 100");
    if (!(ema_beta >= 0.0 && ema_beta < 1.0)) throw TensorError("config: ema_beta in [0,1)");
    if (hidden < 1 || layers < 1 || context_units < 1) {
        throw TensorError("config: model sizes must be positive");
    }
    if (ode_pairs < 1 || fake_per_gen < 0) throw TensorError("config: bad stage-2 knobs");
}

WorldSpec ExperimentConfig::world_spec() const {
    WorldSpec spec;
    spec.kind = world_kind_from_string(world);
    spec.frame_dim = frame_dim;
    spec.num_frames = num_frames;
    spec.chunk = chunk;
    spec.a = effective_a();
    spec.s = effective_s();
    spec.s0 = s0;
    spec.mu = mu;
    spec.validate();
    return spec;
}

NetConfig ExperimentConfig::net_config(NetMode mode) const {
    NetConfig nc;
    nc.unit_dim = chunk * frame_dim;
    nc.context_units = context_units;
    nc.num_units = num_frames / chunk;
    nc.mode = mode;
    nc.hidden = hidden;
    nc.layers = layers;
    return nc;
}

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') continue;  // section header
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw TensorError("config: line " + std::to_string(lineno) +
                              " is not key = value: '" + line + "'");
        }
        apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos) {
            throw TensorError("config: override is not key=value: '" + ov + "'");
        }
        apply_override(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::string text;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw TensorError("config: cannot open '" + path + "'");
        std::ostringstream os;
        os << is.rdbuf();
        text = os.str();
    }
    return parse_config_text(text, overrides);
}

// ---- RunManifest -------------------------------------------------------------

std::string RunManifest::to_json() const {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["artifact_version"] = artifact_version;
    j["seed"] = seed;
    j["world"] = world;
    j["schedule"] = schedule;
    j["stage2_variant"] = stage2_variant;
    j["status"] = status;
    j["timestamp"] = timestamp;
    j["checkpoints"] = checkpoints;
    j["reports"] = reports;
    j["metrics_csv"] = metrics_csv;
    j["metrics"] = metrics;
    return j.dump(2);
}

void RunManifest::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw TensorError("RunManifest::save: cannot open '" + path + "'");
    os << to_json() << "\n";
}

RunManifest RunManifest::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw TensorError("RunManifest::load: cannot open '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(is);
    RunManifest m;
    m.config_hash = j.value("config_hash", 0ULL);
    m.artifact_version = j.value("artifact_version", 1U);
    m.seed = j.value("seed", 0ULL);
    m.world = j.value("world", "");
    m.schedule = j.value("schedule", "");
    m.stage2_variant = j.value("stage2_variant", "");
    m.status = j.value("status", "");
    m.timestamp = j.value("timestamp", "");
    if (j.contains("checkpoints")) {
        m.checkpoints = j["checkpoints"].get<std::map<std::string, std::string>>();
    }
    if (j.contains("reports")) {
        m.reports = j["reports"].get<std::map<std::string, std::string>>();
    }
    m.metrics_csv = j.value("metrics_csv", "");
    if (j.contains("metrics")) m.metrics = j["metrics"].get<std::map<std::string, double>>();
    return m;
}

// ---- stages -------------------------------------------------------------------

namespace {

void stamp(const ExperimentConfig& cfg, RunManifest& m) {
    m.config_hash = cfg.hash();
    m.seed = cfg.seed;
    m.world = cfg.world;
    m.schedule = cfg.schedule;
    m.stage2_variant = cfg.stage2;
    if (m.timestamp.empty()) m.timestamp = iso_now();
}

VelocityNet load_net(const ExperimentConfig& cfg, NetMode mode, const std::string& ckpt) {
    VelocityNet net(cfg.net_config(mode), cfg.seed);
    load_checkpoint(ckpt, net.params());
    return net;
}

// train-or-load the learned bidirectional teacher
VelocityNet bidir_net(const ExperimentConfig& cfg, const WorldSpec& world) {
    VelocityNet net(cfg.net_config(NetMode::bidirectional), cfg.seed ^ 0xB1D1ULL);
    auto path = out_path(cfg, "bidir.ckpt");
    if (std::filesystem::exists(path)) {
        load_checkpoint(path.string(), net.params());
    } else {
        stage1_train(net, world, cfg.steps1, cfg.batch, cfg.lr1, cfg.seed + 101,
                     TimeGrid(cfg.grid_k));
        save_checkpoint(path.string(), net.params());
    }
    return net;
}

RolloutConfig rollout_config(const ExperimentConfig& cfg, const WorldSpec& world) {
    RolloutConfig rc;
    rc.schedule = cfg.step_schedule();
    rc.asd_first_frame = cfg.asd_first_frame;
    rc.chunk = cfg.chunk;
    rc.num_units = world.num_units();
    rc.full_depth_grad = cfg.full_depth_grad;
    return rc;
}

}  // namespace

void run_stage1(const ExperimentConfig& cfg, RunManifest& manifest) {
    stamp(cfg, manifest);
    std::filesystem::create_directories(cfg.out);
    WorldSpec world = cfg.world_spec();
    VelocityNet teacher(cfg.net_config(NetMode::causal), cfg.seed);
    auto rep = stage1_train(teacher, world, cfg.steps1, cfg.batch, cfg.lr1, cfg.seed,
                            TimeGrid(cfg.grid_k));
    auto ckpt = out_path(cfg, "stage1.ckpt").string();
    auto repp = out_path(cfg, "stage1.report.json").string();
    save_checkpoint(ckpt, teacher.params());
    rep.save_json(repp);
    manifest.checkpoints["stage1"] = ckpt;
    manifest.reports["stage1"] = repp;
}

void run_stage2(const ExperimentConfig& cfg, RunManifest& manifest) {
    stamp(cfg, manifest);
    WorldSpec world = cfg.world_spec();
    TimeGrid grid(cfg.grid_k);
    VelocityNet teacher = load_net(cfg, NetMode::causal, out_path(cfg, "stage1.ckpt").string());
    VelocityNet student(cfg.net_config(NetMode::causal), cfg.seed + 1);
    student.copy_params_from(teacher);

    StageReport rep;
    if (cfg.stage2 == "none") {
        rep.stage = "stage2_none";
    } else if (cfg.stage2 == "causal_cd") {
        NetUnitVelocity src(teacher);
        CdConfig cc;
        cc.steps = cfg.steps2;
        cc.batch = cfg.batch;
        cc.lr = cfg.lr2;
        cc.ema_beta = cfg.ema_beta;
        cc.seed = cfg.seed + 2;
        rep = stage2_causal_cd(student, src, world, grid, cc);
    } else if (cfg.stage2 == "causal_ode") {
        NetUnitVelocity src(teacher);
        StageReport gen;
        auto pairs = generate_ode_pairs(src, world, cfg.ode_pairs, grid, cfg.seed + 3, &gen);
        pairs.save(out_path(cfg, "pairs.bin").string());
        rep = stage2_causal_ode(student, pairs, cfg.steps2, cfg.batch, cfg.lr2, cfg.seed + 4);
        rep.teacher_evals += gen.teacher_evals;
        rep.aux_bytes += gen.aux_bytes;
        rep.wall_ms += gen.wall_ms;
    } else if (cfg.stage2 == "causal_dmd") {
        NetUnitVelocity src(teacher);
        VelocityNet fake(cfg.net_config(NetMode::causal), cfg.seed + 5);
        fake.copy_params_from(teacher);
        DmdConfig dc;
        dc.steps = cfg.steps2;
        dc.batch = cfg.batch;
        dc.lr_gen = cfg.lr2;
        dc.lr_fake = cfg.lr_fake;
        dc.fake_per_gen = cfg.fake_per_gen;
        dc.seed = cfg.seed + 6;
        rep = stage2_causal_dmd(student, src, fake, world, grid, dc);
        save_checkpoint(out_path(cfg, "stage2_fake.ckpt").string(), fake.params());
    } else if (cfg.stage2 == "bidir_ode") {
        if (cfg.bidir_teacher == "oracle") {
            AnalyticOracle oracle(world);
            OracleSeqVelocity src(oracle);
            rep = stage2_bidir_ode(student, src, world, cfg.ode_pairs, grid, cfg.steps2,
                                   cfg.batch, cfg.lr2, cfg.seed + 7);
        } else {
            VelocityNet bidir = bidir_net(cfg, world);
            NetSeqVelocity src(bidir);
            rep = stage2_bidir_ode(student, src, world, cfg.ode_pairs, grid, cfg.steps2,
                                   cfg.batch, cfg.lr2, cfg.seed + 7);
        }
    } else {
        throw TensorError("run_stage2: unknown variant '" + cfg.stage2 + "'");
    }

    auto ckpt = out_path(cfg, "stage2.ckpt").string();
    auto repp = out_path(cfg, "stage2.report.json").string();
    save_checkpoint(ckpt, student.params());
    rep.save_json(repp);
    manifest.checkpoints["stage2"] = ckpt;
    manifest.reports["stage2"] = repp;
    manifest.metrics["stage2_teacher_evals"] = static_cast<double>(rep.teacher_evals);
    manifest.metrics["stage2_aux_bytes"] = static_cast<double>(rep.aux_bytes);
}

void run_stage3(const ExperimentConfig& cfg, RunManifest& manifest) {
    stamp(cfg, manifest);
    WorldSpec world = cfg.world_spec();
    TimeGrid grid(cfg.grid_k);
    VelocityNet student = load_net(cfg, NetMode::causal, out_path(cfg, "stage2.ckpt").string());
    VelocityNet fake(cfg.net_config(NetMode::causal), cfg.seed + 8);
    if (cfg.stage3_fake_init == "teacher") {
        VelocityNet teacher =
            load_net(cfg, NetMode::causal, out_path(cfg, "stage1.ckpt").string());
        fake.copy_params_from(teacher);
    } else {
        fake.copy_params_from(student);
    }

    Stage3Config sc;
    sc.steps = cfg.steps3;
    sc.batch = cfg.batch;
    sc.lr_gen = cfg.lr3;
    sc.lr_fake = cfg.lr_fake;
    sc.fake_per_gen = cfg.fake_per_gen;
    sc.seed = cfg.seed + 9;
    sc.rollout = rollout_config(cfg, world);

    StageReport rep;
    if (cfg.stage3_real == "oracle") {
        AnalyticOracle oracle(world);
        OracleSeqVelocity real(oracle);
        rep = stage3_asymmetric_dmd(student, real, fake, world, grid, sc);
    } else {
        VelocityNet bidir = bidir_net(cfg, world);
        NetSeqVelocity real(bidir);
        rep = stage3_asymmetric_dmd(student, real, fake, world, grid, sc);
    }

    auto ckpt = out_path(cfg, "stage3.ckpt").string();
    auto repp = out_path(cfg, "stage3.report.json").string();
    save_checkpoint(ckpt, student.params());
    save_checkpoint(out_path(cfg, "stage3_fake.ckpt").string(), fake.params());
    rep.save_json(repp);
    manifest.checkpoints["stage3"] = ckpt;
    manifest.reports["stage3"] = repp;
}

void run_eval(const ExperimentConfig& cfg, RunManifest& manifest) {
    stamp(cfg, manifest);
    WorldSpec world = cfg.world_spec();
    std::string ckpt;
    for (const char* stage : {"stage3", "stage2", "stage1"}) {
        auto p = out_path(cfg, std::string(stage) + ".ckpt");
        if (std::filesystem::exists(p)) {
            ckpt = p.string();
            break;
        }
    }
    if (ckpt.empty()) throw TensorError("run_eval: no checkpoint found under '" + cfg.out + "'");
    VelocityNet model = load_net(cfg, NetMode::causal, ckpt);
    auto rep = exposure_bias_curve(model, world, rollout_config(cfg, world), cfg.eval_rollouts,
                                   cfg.seed + 10);
    auto csv = out_path(cfg, "metrics.csv").string();
    rep.save_csv(csv);
    std::ofstream js(out_path(cfg, "metrics.json"));
    js << rep.to_json() << "\n";
    manifest.metrics_csv = csv;
    for (const auto& [name, v] : rep.scalars) manifest.metrics[name] = v;
}

RunManifest run_pipeline(const ExperimentConfig& cfg) {
    RunManifest manifest;
    stamp(cfg, manifest);
    std::filesystem::create_directories(cfg.out);
    auto mpath = out_path(cfg, "manifest.json").string();
    struct StageFn {
        const char* name;
        void (*fn)(const ExperimentConfig&, RunManifest&);
    };
    const StageFn stages[] = {
        {"stage1", run_stage1}, {"stage2", run_stage2}, {"stage3", run_stage3}, {"eval", run_eval}};
    for (const auto& st : stages) {
        try {
            st.fn(cfg, manifest);
        } catch (const std::exception& e) {
            manifest.status = std::string("failed:") + st.name + ": " + e.what();
            manifest.save(mpath);
            return manifest;
        }
        manifest.save(mpath);  // partial artifacts stay reachable
    }
    manifest.status = "ok";
    manifest.save(mpath);
    return manifest;
}

// ---- comparison -----------------------------------------------------------------

std::string compare_runs(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    if (run_dirs.size() < 2) throw TensorError("compare_runs: needs at least two runs");
    std::vector<RunManifest> ms;
    for (const auto& dir : run_dirs) {
        ms.push_back(RunManifest::load((std::filesystem::path(dir) / "manifest.json").string()));
    }
    for (size_t i = 1; i < ms.size(); ++i) {
        std::string diff;
        if (ms[i].world != ms[0].world) diff += " world";
        if (ms[i].schedule != ms[0].schedule) diff += " schedule";
        if (!diff.empty()) {
            throw TensorError("compare_runs: incompatible manifests '" + run_dirs[0] + "' vs '" +
                              run_dirs[i] + "'; differing fields:" + diff);
        }
    }

    auto metric = [](const RunManifest& m, const std::string& key) {
        auto it = m.metrics.find(key);
        return it == m.metrics.end() ? 0.0 : it->second;
    };
    std::string csv =
        "run,variant,seed,mean_w2,slope,slope_se,stage2_teacher_evals,stage2_aux_bytes,"
        "delta_mean_w2\n";
    std::ostringstream txt;
    txt << "run  variant  seed  mean_w2  slope  slope_se  evals  aux_bytes  d_mean_w2\n";
    double base = metric(ms[0], "mean_w2");
    for (size_t i = 0; i < ms.size(); ++i) {
        const auto& m = ms[i];
        double mw = metric(m, "mean_w2");
        csv += run_dirs[i] + "," + m.stage2_variant + "," + std::to_string(m.seed) + "," +
               fmt_double(mw) + "," + fmt_double(metric(m, "slope")) + "," +
               fmt_double(metric(m, "slope_se")) + "," +
               fmt_double(metric(m, "stage2_teacher_evals")) + "," +
               fmt_double(metric(m, "stage2_aux_bytes")) + "," + fmt_double(mw - base) + "\n";
        char line[512];
        std::snprintf(line, sizeof(line), "%s  %s  %llu  %.4f  %.5f  %.5f  %.3g  %.3g  %.4f\n",
                      run_dirs[i].c_str(), m.stage2_variant.c_str(),
                      static_cast<unsigned long long>(m.seed), mw, metric(m, "slope"),
                      metric(m, "slope_se"), metric(m, "stage2_teacher_evals"),
                      metric(m, "stage2_aux_bytes"), mw - base);
        txt << line;
    }
    std::filesystem::create_directories(out_dir);
    std::ofstream csvf(std::filesystem::path(out_dir) / "compare.csv", std::ios::binary);
    csvf << csv;
    std::ofstream txtf(std::filesystem::path(out_dir) / "compare.txt", std::ios::binary);
    txtf << txt.str();
    return txt.str();
}

}  // namespace arflow
