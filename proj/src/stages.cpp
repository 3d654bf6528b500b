#include "arflow/stages.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

namespace arflow {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

uint64_t mix_seed(uint64_t seed, uint64_t k) {
    uint64_t z = seed ^ (k * 0x9E3779B97F4A7C15ULL + 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void check_loss(double v, const std::string& stage, long long step) {
    if (!std::isfinite(v) || v > 1e3) {
        throw NumericError(stage + ": diverged at step " + std::to_string(step) +
                           " (loss=" + std::to_string(v) + ")");
    }
}

// fixed k-unit window of a flattened clean prefix, zero-padded on the left
std::vector<double> window_prefix(const std::vector<double>& prefix, int k, int unit_dim) {
    std::vector<double> out(static_cast<size_t>(k) * unit_dim, 0.0);
    int have = static_cast<int>(prefix.size()) / unit_dim;
    int used = std::min(have, k);
    std::copy(prefix.end() - static_cast<size_t>(used) * unit_dim, prefix.end(),
              out.begin() + static_cast<size_t>(k - used) * unit_dim);
    return out;
}

void load_values(VelocityNet& dst, const ParamSet& src) {
    for (const auto& name : dst.params().names()) {
        dst.params().at(name).mutable_values() = src.at(name).values();
    }
}

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint32_t read_u32(std::istream& is) {
    uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t read_u64(std::istream& is) {
    uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
double read_f64(std::istream& is) {
    double v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

constexpr char kStoreMagic[8] = {'A', 'R', 'F', 'L', 'O', 'W', 'O', 'P'};

}  // namespace

// ---- StageReport ---------------------------------------------------------

std::string StageReport::to_json() const {
    nlohmann::json j;
    j["stage"] = stage;
    j["steps"] = steps;
    j["teacher_evals"] = teacher_evals;
    j["aux_bytes"] = aux_bytes;
    j["wall_ms"] = wall_ms;
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [s, v] : loss_curve) curve.push_back({s, v});
    j["loss_curve"] = curve;
    return j.dump(2);
}

void StageReport::save_json(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw TensorError("StageReport::save_json: cannot open '" + path + "'");
    os << to_json() << "\n";
}

// ---- OdePairStore ----------------------------------------------------------

void OdePairStore::append(Record r) {
    if (static_cast<int>(r.prefix.size()) != context_units_ * unit_dim_ ||
        static_cast<int>(r.x_t.size()) != unit_dim_ ||
        static_cast<int>(r.x0.size()) != unit_dim_) {
        throw ShapeError("OdePairStore::append: record width mismatch");
    }
    records_.push_back(std::move(r));
}

long long OdePairStore::record_bytes() const {
    return 4 + 8LL * (1 + static_cast<long long>(context_units_) * unit_dim_ + 2LL * unit_dim_);
}

long long OdePairStore::total_bytes() const {
    return static_cast<long long>(records_.size()) * record_bytes();
}

void OdePairStore::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw TensorError("OdePairStore::save: cannot open '" + path + "'");
    os.write(kStoreMagic, 8);
    write_u32(os, 1);  // version
    write_u32(os, static_cast<uint32_t>(grid_k_));
    write_u32(os, static_cast<uint32_t>(unit_dim_));
    write_u32(os, static_cast<uint32_t>(context_units_));
    write_u64(os, records_.size());
    for (const auto& r : records_) {
        write_u32(os, r.unit);
        write_f64(os, r.t);
        for (double v : r.prefix) write_f64(os, v);
        for (double v : r.x_t) write_f64(os, v);
        for (double v : r.x0) write_f64(os, v);
    }
    if (!os) throw TensorError("OdePairStore::save: write failed");
}

OdePairStore OdePairStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw TensorError("OdePairStore::load: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kStoreMagic, 8) != 0) {
        throw TensorError("OdePairStore::load: bad magic");
    }
    uint32_t version = read_u32(is);
    if (version != 1) throw TensorError("OdePairStore::load: unsupported version");
    int k = static_cast<int>(read_u32(is));
    int d = static_cast<int>(read_u32(is));
    int ctx = static_cast<int>(read_u32(is));
    uint64_t count = read_u64(is);
    OdePairStore store(k, d, ctx);
    for (uint64_t i = 0; i < count; ++i) {
        Record r;
        r.unit = read_u32(is);
        r.t = read_f64(is);
        r.prefix.resize(static_cast<size_t>(ctx) * d);
        r.x_t.resize(d);
        r.x0.resize(d);
        for (auto& v : r.prefix) v = read_f64(is);
        for (auto& v : r.x_t) v = read_f64(is);
        for (auto& v : r.x0) v = read_f64(is);
        if (!is) throw TensorError("OdePairStore::load: truncated file");
        store.append(std::move(r));
    }
    return store;
}

// ---- Stage 1 -----------------------------------------------------------------

StageReport stage1_train(VelocityNet& net, const WorldSpec& world, long long steps, int batch,
                         double lr, uint64_t seed, const TimeGrid& grid) {
    StageReport rep;
    rep.stage = "stage1";
    if (steps == 0) return rep;
    auto start = Clock::now();

    const NetConfig& cfg = net.cfg();
    int ud = cfg.unit_dim;
    int num_units = world.num_units();
    auto interior = grid.interior();
    Rng rng(seed);
    Optimizer opt = Optimizer::adam();

    for (long long step = 0; step < steps; ++step) {
        auto gt = sample_sequences(world, batch, mix_seed(seed, step));
        size_t rows = cfg.mode == NetMode::causal ? batch : static_cast<size_t>(batch) * num_units;
        std::vector<double> xs, ctxs, ts, targets;
        std::vector<int> units;
        xs.reserve(rows * ud);
        ctxs.reserve(rows * cfg.context_dim());
        targets.reserve(rows * ud);

        for (int b = 0; b < batch; ++b) {
            if (cfg.mode == NetMode::causal) {
                int i = rng.uniform_int(0, num_units - 1);
                double t = interior[rng.uniform_int(0, static_cast<int>(interior.size()) - 1)];
                auto x0 = gt.unit_vec(b, i, world.chunk);
                auto eps = rng.normal_vec(ud);
                auto x_t = forward_diffuse(x0, eps, t);
                auto ctx = net.context_from_prefix(gt.prefix_vec(b, i, world.chunk));
                auto v = velocity_target(x0, eps);
                xs.insert(xs.end(), x_t.begin(), x_t.end());
                ctxs.insert(ctxs.end(), ctx.begin(), ctx.end());
                targets.insert(targets.end(), v.begin(), v.end());
                ts.push_back(t);
                units.push_back(i);
            } else {
                // one shared time per sequence; every unit is a row
                double t = interior[rng.uniform_int(0, static_cast<int>(interior.size()) - 1)];
                std::vector<double> seq(gt.frame(b, 0), gt.frame(b, 0) + num_units * ud);
                auto eps = rng.normal_vec(seq.size());
                auto seq_t = forward_diffuse(seq, eps, t);
                for (int i = 0; i < num_units; ++i) {
                    auto ctx = VelocityNet::bidir_context(seq_t, i, ud);
                    xs.insert(xs.end(), seq_t.begin() + i * ud, seq_t.begin() + (i + 1) * ud);
                    ctxs.insert(ctxs.end(), ctx.begin(), ctx.end());
                    for (int j = 0; j < ud; ++j) {
                        targets.push_back(eps[i * ud + j] - seq[i * ud + j]);
                    }
                    ts.push_back(t);
                    units.push_back(i);
                }
            }
        }

        Tensor pred = net.forward(Tensor::from(rows, ud, std::move(xs)),
                                  Tensor::from(rows, cfg.context_dim(), std::move(ctxs)), ts,
                                  units);
        Tensor loss = flow_matching_loss(pred, Tensor::from(rows, ud, std::move(targets)));
        double lv = loss.at(0, 0);
        check_loss(lv, "stage1_train", step);
        rep.loss_curve.emplace_back(step, lv);
        loss.backward();
        opt.step(net.params(), lr);
    }

    rep.steps = steps;
    rep.wall_ms = elapsed_ms(start);
    return rep;
}

// ---- ODE pair generation --------------------------------------------------

OdePairStore generate_ode_pairs(UnitVelocitySource& teacher, const WorldSpec& world,
                                int num_trajectories, const TimeGrid& grid, uint64_t seed,
                                StageReport* report) {
    auto start = Clock::now();
    int ud = world.unit_dim();
    int k = 4;  // matches the causal context window default
    OdePairStore store(grid.steps(), ud, k);
    Rng rng(seed);
    long long evals0 = teacher.evals();
    auto descending = grid.descending();

    for (int n = 0; n < num_trajectories; ++n) {
        auto gt = sample_sequences(world, 1, mix_seed(seed, n));
        int i = rng.uniform_int(0, world.num_units() - 1);
        auto prefix = gt.prefix_vec(0, i, world.chunk);
        VelocityField field = [&](const std::vector<double>& x, double t) {
            return teacher.eval(prefix, x, t, i);
        };
        auto traj = pf_ode_solve(field, rng.normal_vec(ud), descending, OdeMethod::euler);
        const auto& x0 = traj.back().x;
        auto wprefix = window_prefix(prefix, k, ud);
        for (size_t j = 0; j + 1 < traj.size(); ++j) {  // every state with t > 0
            OdePairStore::Record r;
            r.unit = static_cast<uint32_t>(i);
            r.t = traj[j].t;
            r.prefix = wprefix;
            r.x_t = traj[j].x;
            r.x0 = x0;
            store.append(std::move(r));
        }
    }

    if (report) {
        report->stage = "generate_ode_pairs";
        report->steps = num_trajectories;
        report->teacher_evals = teacher.evals() - evals0;
        report->aux_bytes = store.total_bytes();
        report->wall_ms = elapsed_ms(start);
    }
    return store;
}

// ---- Stage 2: ODE distillation ---------------------------------------------

StageReport stage2_causal_ode(VelocityNet& student, const OdePairStore& pairs, long long steps,
                              int batch, double lr, uint64_t seed) {
    if (pairs.size() == 0) throw TensorError("stage2_causal_ode: empty pair store");
    StageReport rep;
    rep.stage = "stage2_causal_ode";
    if (steps == 0) return rep;
    auto start = Clock::now();

    const NetConfig& cfg = student.cfg();
    int ud = cfg.unit_dim;
    if (ud != pairs.unit_dim() || cfg.context_units != pairs.context_units()) {
        throw ShapeError("stage2_causal_ode: store/student geometry mismatch");
    }
    Rng rng(seed);
    Optimizer opt = Optimizer::adam();

    for (long long step = 0; step < steps; ++step) {
        std::vector<double> xs, ctxs, ts, tmat, diff;
        std::vector<int> units;
        for (int b = 0; b < batch; ++b) {
            const auto& r = pairs.record(rng.uniform_int(0, static_cast<int>(pairs.size()) - 1));
            xs.insert(xs.end(), r.x_t.begin(), r.x_t.end());
            ctxs.insert(ctxs.end(), r.prefix.begin(), r.prefix.end());
            ts.push_back(r.t);
            units.push_back(static_cast<int>(r.unit));
            for (int j = 0; j < ud; ++j) {
                tmat.push_back(r.t);
                diff.push_back(r.x_t[j] - r.x0[j]);
            }
        }
        Tensor v = student.forward(Tensor::from(batch, ud, std::move(xs)),
                                   Tensor::from(batch, cfg.context_dim(), std::move(ctxs)), ts,
                                   units);
        // || G - x0 ||^2 = || t*v - (x_t - x0) ||^2, with per-row t
        Tensor loss = reduce_mean(squared_error(mul(v, Tensor::from(batch, ud, std::move(tmat))),
                                                Tensor::from(batch, ud, std::move(diff))));
        double lv = loss.at(0, 0);
        check_loss(lv, "stage2_causal_ode", step);
        rep.loss_curve.emplace_back(step, lv);
        loss.backward();
        opt.step(student.params(), lr);
    }

    rep.steps = steps;
    rep.wall_ms = elapsed_ms(start);
    return rep;
}

// ---- Stage 2: causal consistency distillation -------------------------------

StageReport stage2_causal_cd(VelocityNet& student, UnitVelocitySource& teacher,
                             const WorldSpec& world, const TimeGrid& grid, const CdConfig& cfg) {
    StageReport rep;
    rep.stage = "stage2_causal_cd";
    if (cfg.steps == 0) return rep;
    auto start = Clock::now();

    const NetConfig& ncfg = student.cfg();
    int ud = ncfg.unit_dim;
    if (ud != world.unit_dim()) throw ShapeError("stage2_causal_cd: student/world dim mismatch");
    int num_units = world.num_units();
    Rng rng(cfg.seed);
    Optimizer opt = Optimizer::adam();
    EmaParamSet ema(cfg.ema_beta, student.params());
    VelocityNet target(ncfg, cfg.seed);
    long long evals0 = teacher.evals();

    for (long long step = 0; step < cfg.steps; ++step) {
        load_values(target, ema.shadow());
        auto gt = sample_sequences(world, cfg.batch, mix_seed(cfg.seed, step));
        std::vector<double> xs, ctxs, ts, tmat, diff;
        std::vector<int> units;
        for (int b = 0; b < cfg.batch; ++b) {
            int i = rng.uniform_int(0, num_units - 1);
            int j = rng.uniform_int(1, grid.steps());
            double t = grid.at(j), t_prev = grid.at(j - 1);
            auto x0 = gt.unit_vec(b, i, world.chunk);
            auto eps = rng.normal_vec(ud);
            auto x_t = forward_diffuse(x0, eps, t);
            auto prefix = gt.prefix_vec(b, i, world.chunk);
            auto ctx = student.context_from_prefix(prefix);

            // one euler teacher step, then the EMA student's generator at t_prev
            auto v_t = teacher.eval(prefix, x_t, t, i);
            std::vector<double> x_hat(ud);
            for (int d = 0; d < ud; ++d) x_hat[d] = x_t[d] - (t - t_prev) * v_t[d];
            std::vector<double> tgt = x_hat;
            if (t_prev > 0.0) {
                tgt = generator_transform(x_hat, t_prev, target.eval_raw(x_hat, ctx, t_prev, i));
            }

            xs.insert(xs.end(), x_t.begin(), x_t.end());
            ctxs.insert(ctxs.end(), ctx.begin(), ctx.end());
            ts.push_back(t);
            units.push_back(i);
            for (int d = 0; d < ud; ++d) {
                tmat.push_back(t);
                diff.push_back(x_t[d] - tgt[d]);
            }
        }
        Tensor v = student.forward(Tensor::from(cfg.batch, ud, std::move(xs)),
                                   Tensor::from(cfg.batch, ncfg.context_dim(), std::move(ctxs)),
                                   ts, units);
        Tensor loss =
            reduce_mean(squared_error(mul(v, Tensor::from(cfg.batch, ud, std::move(tmat))),
                                      Tensor::from(cfg.batch, ud, std::move(diff))));
        double lv = loss.at(0, 0);
        check_loss(lv, "stage2_causal_cd", step);
        rep.loss_curve.emplace_back(step, lv);
        loss.backward();
        opt.step(student.params(), cfg.lr);
        ema.update(student.params());
    }

    rep.steps = cfg.steps;
    rep.teacher_evals = teacher.evals() - evals0;
    rep.aux_bytes = 0;  // fully online: no pair store
    rep.wall_ms = elapsed_ms(start);
    return rep;
}

// ---- Stage 2: causal distribution matching ----------------------------------

namespace {

// one fake-score flow-matching step on fresh one-step student samples
// (teacher forcing); returns the fake loss
double fake_score_step(VelocityNet& fake, Optimizer& opt, const VelocityNet& student,
                       const WorldSpec& world, const TimeGrid& grid, int batch, double lr,
                       Rng& rng, uint64_t data_seed) {
    const NetConfig& cfg = fake.cfg();
    int ud = cfg.unit_dim;
    auto interior = grid.interior();
    auto gt = sample_sequences(world, batch, data_seed);
    std::vector<double> xs, ctxs, ts, targets;
    std::vector<int> units;
    for (int b = 0; b < batch; ++b) {
        int i = rng.uniform_int(0, world.num_units() - 1);
        auto ctx = student.context_from_prefix(gt.prefix_vec(b, i, world.chunk));
        auto noise = rng.normal_vec(ud);
        auto v1 = student.eval_raw(noise, ctx, 1.0, i);
        auto x_tilde = generator_transform(noise, 1.0, v1);

        double t = interior[rng.uniform_int(0, static_cast<int>(interior.size()) - 1)];
        auto eps = rng.normal_vec(ud);
        auto x_t = forward_diffuse(x_tilde, eps, t);
        xs.insert(xs.end(), x_t.begin(), x_t.end());
        ctxs.insert(ctxs.end(), ctx.begin(), ctx.end());
        ts.push_back(t);
        units.push_back(i);
        for (int d = 0; d < ud; ++d) targets.push_back(eps[d] - x_tilde[d]);
    }
    Tensor pred = fake.forward(Tensor::from(batch, ud, std::move(xs)),
                               Tensor::from(batch, cfg.context_dim(), std::move(ctxs)), ts, units);
    Tensor loss = flow_matching_loss(pred, Tensor::from(batch, ud, std::move(targets)));
    double lv = loss.at(0, 0);
    loss.backward();
    opt.step(fake.params(), lr);
    return lv;
}

}  // namespace

StageReport stage2_causal_dmd(VelocityNet& student, UnitVelocitySource& real_teacher,
                              VelocityNet& fake, const WorldSpec& world, const TimeGrid& grid,
                              const DmdConfig& cfg) {
    StageReport rep;
    rep.stage = "stage2_causal_dmd";
    if (cfg.steps == 0) return rep;
    auto start = Clock::now();

    const NetConfig& ncfg = student.cfg();
    int ud = ncfg.unit_dim;
    auto interior = grid.interior();
    Rng rng(cfg.seed);
    Optimizer opt_gen = Optimizer::adam();
    Optimizer opt_fake = Optimizer::adam();
    long long evals0 = real_teacher.evals();

    for (long long step = 0; step < cfg.steps; ++step) {
        // -- generator update (teacher-forced one-step samples) --
        auto gt = sample_sequences(world, cfg.batch, mix_seed(cfg.seed, 2 * step));
        std::vector<double> noises, ctxs, ts(cfg.batch, 1.0), coeff;
        std::vector<int> units;
        std::vector<std::vector<double>> ctx_rows(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            int i = rng.uniform_int(0, world.num_units() - 1);
            ctx_rows[b] = student.context_from_prefix(gt.prefix_vec(b, i, world.chunk));
            auto noise = rng.normal_vec(ud);
            noises.insert(noises.end(), noise.begin(), noise.end());
            ctxs.insert(ctxs.end(), ctx_rows[b].begin(), ctx_rows[b].end());
            units.push_back(i);
        }
        Tensor noise_t = Tensor::from(cfg.batch, ud, noises);
        Tensor v1 = student.forward(noise_t, Tensor::from(cfg.batch, ncfg.context_dim(), ctxs),
                                    ts, units);
        Tensor x_tilde = generator_transform(noise_t, 1.0, v1);

        for (int b = 0; b < cfg.batch; ++b) {
            std::vector<double> xt_clean(ud);
            for (int d = 0; d < ud; ++d) xt_clean[d] = x_tilde.at(b, d);
            double t = interior[rng.uniform_int(0, static_cast<int>(interior.size()) - 1)];
            auto eps = rng.normal_vec(ud);
            auto x_t = forward_diffuse(xt_clean, eps, t);
            auto s_real =
                velocity_to_score(x_t, t, real_teacher.eval(ctx_rows[b], x_t, t, units[b]));
            auto s_fake =
                velocity_to_score(x_t, t, fake.eval_raw(x_t, ctx_rows[b], t, units[b]));
            double gap = 0.0;
            for (int d = 0; d < ud; ++d) gap += std::abs(s_real[d] - s_fake[d]);
            gap = std::max(gap / ud, 1e-8);
            // dKL/dx_tilde = -(s_real - s_fake) * dx_t/dx_tilde, normalized
            for (int d = 0; d < ud; ++d) {
                coeff.push_back(-(1.0 - t) * (s_real[d] - s_fake[d]) / gap);
            }
        }
        Tensor surrogate = scale(
            reduce_sum(mul(x_tilde, Tensor::from(cfg.batch, ud, std::move(coeff)))),
            1.0 / cfg.batch);
        surrogate.backward();
        opt_gen.step(student.params(), cfg.lr_gen);

        // -- fake-score updates --
        double fl = 0.0;
        for (int r = 0; r < cfg.fake_per_gen; ++r) {
            fl = fake_score_step(fake, opt_fake, student, world, grid, cfg.batch, cfg.lr_fake,
                                 rng, mix_seed(cfg.seed, 2 * step + 1) + r);
            check_loss(fl, "stage2_causal_dmd[fake]", step);
        }
        rep.loss_curve.emplace_back(step, fl);
    }

    rep.steps = cfg.steps;
    rep.teacher_evals = real_teacher.evals() - evals0;
    rep.aux_bytes = 0;
    rep.wall_ms = elapsed_ms(start);
    return rep;
}

// ---- Stage 2: bidirectional-teacher ODE distillation -------------------------

StageReport stage2_bidir_ode(VelocityNet& student, SeqVelocitySource& bidir_teacher,
                             const WorldSpec& world, int num_trajectories, const TimeGrid& grid,
                             long long steps, int batch, double lr, uint64_t seed,
                             OdePairStore* pairs_out) {
    auto start = Clock::now();
    int ud = world.unit_dim();
    int num_units = world.num_units();
    int k = student.cfg().context_units;
    OdePairStore store(grid.steps(), ud, k);
    Rng rng(seed);
    long long evals0 = bidir_teacher.evals();
    auto descending = grid.descending();
    VelocityField field = [&](const std::vector<double>& x, double t) {
        return bidir_teacher.eval(x, t);
    };

    for (int n = 0; n < num_trajectories; ++n) {
        auto eps = rng.normal_vec(static_cast<size_t>(num_units) * ud);
        auto traj = pf_ode_solve(field, eps, descending, OdeMethod::euler);
        const auto& x0_seq = traj.back().x;
        for (int i = 0; i < num_units; ++i) {
            // the stored prefix is the trajectory's own clean endpoint: the
            // causal student sees a consistent history it cannot use to
            // disambiguate the endpoint
            std::vector<double> prefix(x0_seq.begin(), x0_seq.begin() + i * ud);
            auto wprefix = window_prefix(prefix, k, ud);
            for (size_t j = 0; j + 1 < traj.size(); ++j) {
                OdePairStore::Record r;
                r.unit = static_cast<uint32_t>(i);
                r.t = traj[j].t;
                r.prefix = wprefix;
                r.x_t.assign(traj[j].x.begin() + i * ud, traj[j].x.begin() + (i + 1) * ud);
                r.x0.assign(x0_seq.begin() + i * ud, x0_seq.begin() + (i + 1) * ud);
                store.append(std::move(r));
            }
        }
    }

    StageReport rep = stage2_causal_ode(student, store, steps, batch, lr, mix_seed(seed, 0x5e));
    rep.stage = "stage2_bidir_ode";
    rep.teacher_evals = bidir_teacher.evals() - evals0;
    rep.aux_bytes = store.total_bytes();
    rep.wall_ms = elapsed_ms(start);
    if (pairs_out) *pairs_out = std::move(store);
    return rep;
}

// ---- Stage 3: asymmetric distribution matching --------------------------------

StageReport stage3_asymmetric_dmd(VelocityNet& student, SeqVelocitySource& real_teacher,
                                  VelocityNet& fake, const WorldSpec& world, const TimeGrid& grid,
                                  const Stage3Config& cfg) {
    StageReport rep;
    rep.stage = "stage3_asymmetric_dmd";
    if (cfg.steps == 0) return rep;
    auto start = Clock::now();

    const NetConfig& ncfg = student.cfg();
    int ud = ncfg.unit_dim;
    int num_units = cfg.rollout.num_units;
    int k = ncfg.context_units;
    auto interior = grid.interior();
    Rng rng(cfg.seed);
    Optimizer opt_gen = Optimizer::adam();
    Optimizer opt_fake = Optimizer::adam();
    long long evals0 = real_teacher.evals();

    for (long long step = 0; step < cfg.steps; ++step) {
        // -- generator update from full self-rollouts --
        DiffRollout roll = self_rollout_diff(student, cfg.batch, cfg.rollout,
                                             mix_seed(cfg.seed, 3 * step));
        std::vector<Tensor> terms;
        for (int b = 0; b < cfg.batch; ++b) {
            std::vector<double> seq(static_cast<size_t>(num_units) * ud);
            for (int u = 0; u < num_units; ++u) {
                for (int d = 0; d < ud; ++d) seq[u * ud + d] = roll.units[b][u].at(0, d);
            }
            double t = interior[rng.uniform_int(0, static_cast<int>(interior.size()) - 1)];
            auto eps = rng.normal_vec(seq.size());
            auto seq_t = forward_diffuse(seq, eps, t);
            auto s_real = velocity_to_score(seq_t, t, real_teacher.eval(seq_t, t));

            // causal fake score, conditioned on the generated clean prefix
            std::vector<double> s_fake(seq.size());
            for (int u = 0; u < num_units; ++u) {
                std::vector<double> prefix(seq.begin(), seq.begin() + u * ud);
                std::vector<double> x_u(seq_t.begin() + u * ud, seq_t.begin() + (u + 1) * ud);
                auto v = fake.eval_raw(x_u, window_prefix(prefix, k, ud), t, u);
                auto s = velocity_to_score(x_u, t, v);
                std::copy(s.begin(), s.end(), s_fake.begin() + u * ud);
            }
            double gap = 0.0;
            for (size_t d = 0; d < seq.size(); ++d) gap += std::abs(s_real[d] - s_fake[d]);
            gap = std::max(gap / seq.size(), 1e-8);

            for (int u = 0; u < num_units; ++u) {
                if (!roll.units[b][u].requires_grad()) continue;  // truncated: constant
                std::vector<double> c(ud);
                for (int d = 0; d < ud; ++d) {
                    c[d] = -(1.0 - t) * (s_real[u * ud + d] - s_fake[u * ud + d]) / gap;
                }
                terms.push_back(reduce_sum(mul(roll.units[b][u], Tensor::row(c))));
            }
        }
        if (!terms.empty()) {
            Tensor surrogate = terms[0];
            for (size_t i = 1; i < terms.size(); ++i) surrogate = add(surrogate, terms[i]);
            surrogate = scale(surrogate, 1.0 / cfg.batch);
            surrogate.backward();
            opt_gen.step(student.params(), cfg.lr_gen);
        }

        // -- fake-score updates on fresh rollouts --
        double fl = 0.0;
        for (int r = 0; r < cfg.fake_per_gen; ++r) {
            auto gen = self_rollout(student, world, cfg.batch, cfg.rollout,
                                    mix_seed(cfg.seed, 3 * step + 1) + r);
            std::vector<double> xs, ctxs, ts, targets;
            std::vector<int> units;
            for (int b = 0; b < cfg.batch; ++b) {
                int i = rng.uniform_int(0, num_units - 1);
                auto x0 = gen.unit_vec(b, i, cfg.rollout.chunk);
                auto prefix = gen.prefix_vec(b, i, cfg.rollout.chunk);
                double t = interior[rng.uniform_int(0, static_cast<int>(interior.size()) - 1)];
                auto eps = rng.normal_vec(ud);
                auto x_t = forward_diffuse(x0, eps, t);
                auto ctx = window_prefix(prefix, k, ud);
                xs.insert(xs.end(), x_t.begin(), x_t.end());
                ctxs.insert(ctxs.end(), ctx.begin(), ctx.end());
                ts.push_back(t);
                units.push_back(i);
                for (int d = 0; d < ud; ++d) targets.push_back(eps[d] - x0[d]);
            }
            Tensor pred = fake.forward(Tensor::from(cfg.batch, ud, std::move(xs)),
                                       Tensor::from(cfg.batch, fake.cfg().context_dim(),
                                                    std::move(ctxs)),
                                       ts, units);
            Tensor loss = flow_matching_loss(pred, Tensor::from(cfg.batch, ud, std::move(targets)));
            fl = loss.at(0, 0);
            check_loss(fl, "stage3_asymmetric_dmd[fake]", step);
            loss.backward();
            opt_fake.step(fake.params(), cfg.lr_fake);
        }
        rep.loss_curve.emplace_back(step, fl);
    }

    rep.steps = cfg.steps;
    rep.teacher_evals = real_teacher.evals() - evals0;
    rep.aux_bytes = 0;
    rep.wall_ms = elapsed_ms(start);
    return rep;
}

}  // namespace arflow
