#include "arflow/models.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace arflow {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
}  // namespace

// ---- ContextCache -----------------------------------------------------------

void ContextCache::push(std::vector<double> unit) {
    if (static_cast<int>(unit.size()) != unit_dim_) {
        throw ShapeError("ContextCache::push: wrong unit size");
    }
    units_.push_back(std::move(unit));
    while (static_cast<int>(units_.size()) > capacity_) units_.pop_front();
    ++next_unit_;
}

void ContextCache::reset() {
    units_.clear();
    next_unit_ = 0;
}

std::vector<double> ContextCache::encode(int k) const {
    std::vector<double> out(static_cast<size_t>(k) * unit_dim_, 0.0);
    int have = std::min<int>(k, static_cast<int>(units_.size()));
    for (int j = 0; j < have; ++j) {
        // newest ends up rightmost
        const auto& u = units_[units_.size() - have + j];
        std::copy(u.begin(), u.end(), out.begin() + static_cast<size_t>(k - have + j) * unit_dim_);
    }
    return out;
}

std::vector<double> encode_context(const ContextCache& cache, int k) { return cache.encode(k); }

// ---- VelocityNet -------------------------------------------------------------

VelocityNet::VelocityNet(NetConfig cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    int in = cfg_.input_dim();
    for (int l = 0; l < cfg_.layers; ++l) {
        int fan_in = l == 0 ? in : cfg_.hidden;
        double sd = std::sqrt(2.0 / fan_in);
        auto w = rng.normal_vec(static_cast<size_t>(fan_in) * cfg_.hidden);
        for (auto& v : w) v *= sd;
        params_.add("w" + std::to_string(l),
                    Tensor::from(fan_in, cfg_.hidden, std::move(w), true));
        params_.add("b" + std::to_string(l), Tensor::zeros(1, cfg_.hidden, true));
    }
    // zero-initialized head: the initial velocity field is identically zero
    params_.add("w_out", Tensor::zeros(cfg_.hidden, cfg_.unit_dim, true));
    params_.add("b_out", Tensor::zeros(1, cfg_.unit_dim, true));
    auto e = rng.normal_vec(static_cast<size_t>(cfg_.num_units) * cfg_.index_emb);
    for (auto& v : e) v *= 0.1;
    params_.add("index_emb", Tensor::from(cfg_.num_units, cfg_.index_emb, std::move(e), true));
}

std::vector<double> VelocityNet::time_features(double t) const {
    std::vector<double> out(2 * cfg_.time_freqs);
    double w = 3.14159265358979323846;
    for (int j = 0; j < cfg_.time_freqs; ++j) {
        out[2 * j] = std::sin(w * t);
        out[2 * j + 1] = std::cos(w * t);
        w *= 2.0;
    }
    return out;
}

Tensor VelocityNet::forward(const Tensor& x_t, const Tensor& context,
                            const std::vector<double>& ts, const std::vector<int>& units) const {
    size_t b = x_t.rows();
    if (context.rows() != b || ts.size() != b || units.size() != b) {
        throw ShapeError("VelocityNet::forward: batch size mismatch");
    }
    if (static_cast<int>(x_t.cols()) != cfg_.unit_dim ||
        static_cast<int>(context.cols()) != cfg_.context_dim()) {
        throw ShapeError("VelocityNet::forward: input width mismatch");
    }
    std::vector<double> tf(b * 2 * cfg_.time_freqs);
    for (size_t r = 0; r < b; ++r) {
        auto f = time_features(ts[r]);
        std::copy(f.begin(), f.end(), tf.begin() + r * f.size());
    }
    Tensor temb = Tensor::from(b, 2 * cfg_.time_freqs, std::move(tf));
    Tensor femb = embed_rows(params_.at("index_emb"), units);
    Tensor h = concat_cols({x_t, context, temb, femb});
    for (int l = 0; l < cfg_.layers; ++l) {
        h = silu(add(matmul(h, params_.at("w" + std::to_string(l))),
                     params_.at("b" + std::to_string(l))));
    }
    Tensor out = add(matmul(h, params_.at("w_out")), params_.at("b_out"));
    evals_ += static_cast<long long>(b);
    return out;
}

std::vector<double> VelocityNet::eval_raw(const std::vector<double>& x_t,
                                          const std::vector<double>& context, double t,
                                          int unit) const {
    if (static_cast<int>(x_t.size()) != cfg_.unit_dim ||
        static_cast<int>(context.size()) != cfg_.context_dim()) {
        throw ShapeError("VelocityNet::eval_raw: input width mismatch");
    }
    Eigen::RowVectorXd in(cfg_.input_dim());
    int off = 0;
    for (double v : x_t) in[off++] = v;
    for (double v : context) in[off++] = v;
    for (double v : time_features(t)) in[off++] = v;
    const Tensor& emb = params_.at("index_emb");
    for (int j = 0; j < cfg_.index_emb; ++j) in[off++] = emb.at(unit, j);

    Eigen::RowVectorXd h = in;
    for (int l = 0; l < cfg_.layers; ++l) {
        const Tensor& w = params_.at("w" + std::to_string(l));
        const Tensor& bb = params_.at("b" + std::to_string(l));
        CMap W(w.values().data(), w.rows(), w.cols());
        CMap B(bb.values().data(), 1, bb.cols());
        Eigen::RowVectorXd z = h * W + B;
        h = z.array() / (1.0 + (-z.array()).exp());
    }
    const Tensor& wo = params_.at("w_out");
    const Tensor& bo = params_.at("b_out");
    CMap W(wo.values().data(), wo.rows(), wo.cols());
    CMap B(bo.values().data(), 1, bo.cols());
    Eigen::RowVectorXd out = h * W + B;
    for (int i = 0; i < out.size(); ++i) {
        if (!std::isfinite(out[i])) {
            throw NumericError("VelocityNet::eval_raw: non-finite velocity at unit " +
                               std::to_string(unit) + ", t=" + std::to_string(t));
        }
    }
    ++evals_;
    return std::vector<double>(out.data(), out.data() + out.size());
}

std::vector<double> VelocityNet::context_from_prefix(const std::vector<double>& prefix) const {
    if (cfg_.mode != NetMode::causal) {
        throw TensorError("context_from_prefix: causal-mode nets only");
    }
    int ud = cfg_.unit_dim, k = cfg_.context_units;
    if (prefix.size() % ud != 0) throw ShapeError("context_from_prefix: prefix not unit-aligned");
    int have = static_cast<int>(prefix.size()) / ud;
    int used = std::min(have, k);
    std::vector<double> ctx(static_cast<size_t>(k) * ud, 0.0);
    std::copy(prefix.end() - static_cast<size_t>(used) * ud, prefix.end(),
              ctx.begin() + static_cast<size_t>(k - used) * ud);
    return ctx;
}

std::vector<double> VelocityNet::predict_from_prefix(const std::vector<double>& prefix,
                                                     const std::vector<double>& x_t, double t,
                                                     int unit) const {
    return eval_raw(x_t, context_from_prefix(prefix), t, unit);
}

std::vector<double> VelocityNet::bidir_context(const std::vector<double>& seq_x_t, int unit,
                                               int unit_dim) {
    std::vector<double> ctx = seq_x_t;
    std::fill(ctx.begin() + static_cast<size_t>(unit) * unit_dim,
              ctx.begin() + static_cast<size_t>(unit + 1) * unit_dim, 0.0);
    return ctx;
}

void VelocityNet::copy_params_from(const VelocityNet& other) {
    for (const auto& name : params_.names()) {
        Tensor& dst = params_.at(name);
        const Tensor& src = other.params().at(name);
        if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
            throw ShapeError("copy_params_from: shape mismatch for '" + name + "'");
        }
        dst.mutable_values() = src.values();
    }
}

// ---- sampling -----------------------------------------------------------------

const StepSchedule& RolloutConfig::schedule_for_unit(int unit) const {
    static const StepSchedule four = StepSchedule::four_step();
    if (asd_first_frame && unit == 0) return four;
    return schedule;
}

std::vector<double> few_step_sample_unit(const VelocityNet& model, const ContextCache& cache,
                                         const StepSchedule& schedule,
                                         const std::vector<double>& noise, int unit,
                                         Rng& renoise_rng) {
    if (schedule.size() == 0) throw TensorError("few_step_sample_unit: empty schedule");
    std::vector<double> ctx = cache.encode(model.cfg().context_units);
    std::vector<double> x = noise;
    std::vector<double> x0;
    for (size_t j = 0; j < schedule.size(); ++j) {
        double t = schedule.at(j);
        auto v = model.eval_raw(x, ctx, t, unit);
        x0 = generator_transform(x, t, v);
        if (j + 1 < schedule.size()) {
            auto eps = renoise_rng.normal_vec(x0.size());
            x = forward_diffuse(x0, eps, schedule.at(j + 1));
        }
    }
    return x0;
}

std::vector<double> teacher_forced_sample(const VelocityNet& model, const SequenceBatch& gt,
                                          int seq, const StepSchedule& schedule, int unit,
                                          const std::vector<double>& noise, Rng& renoise_rng) {
    int chunk = model.cfg().unit_dim / gt.frame_dim;
    int num_units = gt.num_frames / chunk;
    if (unit < 0 || unit >= num_units) {
        throw TensorError("teacher_forced_sample: unit index out of range");
    }
    ContextCache cache(model.cfg().context_units, model.cfg().unit_dim);
    for (int u = 0; u < unit; ++u) cache.push(gt.unit_vec(seq, u, chunk));
    return few_step_sample_unit(model, cache, schedule, noise, unit, renoise_rng);
}

SequenceBatch self_rollout(const VelocityNet& model, const WorldSpec& world, int batch,
                           const RolloutConfig& cfg, uint64_t seed) {
    int ud = cfg.chunk * world.frame_dim;
    if (ud != model.cfg().unit_dim) throw ShapeError("self_rollout: chunk/unit dim mismatch");
    SequenceBatch out;
    out.batch = batch;
    out.num_frames = cfg.num_units * cfg.chunk;
    out.frame_dim = world.frame_dim;
    out.seed = seed;
    out.data.assign(static_cast<size_t>(batch) * out.num_frames * out.frame_dim, 0.0);
    Rng root(seed);
    for (int b = 0; b < batch; ++b) {
        Rng rng = root.fork(b);
        ContextCache cache(model.cfg().context_units, ud);
        for (int u = 0; u < cfg.num_units; ++u) {
            auto noise = rng.normal_vec(ud);
            auto unit = few_step_sample_unit(model, cache, cfg.schedule_for_unit(u), noise, u, rng);
            std::copy(unit.begin(), unit.end(), out.frame(b, u * cfg.chunk));
            cache.push(std::move(unit));
        }
    }
    return out;
}

namespace {

// tape-carrying version of few_step_sample_unit; ctx is 1 x context_dim
Tensor sample_unit_diff(const VelocityNet& model, const Tensor& ctx, const StepSchedule& schedule,
                        const std::vector<double>& noise, int unit, Rng& renoise_rng) {
    Tensor x = Tensor::row(noise);
    Tensor x0;
    for (size_t j = 0; j < schedule.size(); ++j) {
        double t = schedule.at(j);
        Tensor v = model.forward(x, ctx, {t}, {unit});
        x0 = generator_transform(x, t, v);
        if (j + 1 < schedule.size()) {
            Tensor eps = Tensor::row(renoise_rng.normal_vec(noise.size()));
            x = forward_diffuse(x0, eps, schedule.at(j + 1));
        }
    }
    return x0;
}

}  // namespace

DiffRollout self_rollout_diff(const VelocityNet& model, int batch, const RolloutConfig& cfg,
                              uint64_t seed) {
    int ud = model.cfg().unit_dim;
    int k = model.cfg().context_units;
    DiffRollout out;
    out.units.resize(batch);
    Rng root(seed);
    for (int b = 0; b < batch; ++b) {
        Rng rng = root.fork(b);
        out.units[b].reserve(cfg.num_units);
        std::vector<Tensor> history;
        for (int u = 0; u < cfg.num_units; ++u) {
            // window context, zero-padded on the left
            std::vector<Tensor> parts;
            int have = std::min<int>(k, static_cast<int>(history.size()));
            if (have < k) parts.push_back(Tensor::zeros(1, static_cast<size_t>(k - have) * ud));
            for (int j = have; j > 0; --j) {
                const Tensor& unit = history[history.size() - j];
                parts.push_back(cfg.full_depth_grad ? unit : unit.detach());
            }
            Tensor ctx = parts.size() == 1 ? parts[0] : concat_cols(parts);

            auto noise = rng.normal_vec(ud);
            bool needs_tape = cfg.full_depth_grad || u + 1 == cfg.num_units;
            Tensor unit_out;
            if (needs_tape) {
                unit_out = sample_unit_diff(model, ctx, cfg.schedule_for_unit(u), noise, u, rng);
            } else {
                // truncated-gradient path: tape-free sampling, constant result
                std::vector<double> ctx_raw = ctx.values();
                std::vector<double> x = noise, x0;
                const StepSchedule& sched = cfg.schedule_for_unit(u);
                for (size_t j = 0; j < sched.size(); ++j) {
                    double t = sched.at(j);
                    auto v = model.eval_raw(x, ctx_raw, t, u);
                    x0 = generator_transform(x, t, v);
                    if (j + 1 < sched.size()) {
                        x = forward_diffuse(x0, rng.normal_vec(ud), sched.at(j + 1));
                    }
                }
                unit_out = Tensor::row(x0);
            }
            history.push_back(unit_out);
            out.units[b].push_back(unit_out);
        }
    }
    return out;
}

std::vector<double> NetSeqVelocity::eval(const std::vector<double>& seq_x_t, double t) {
    int ud = net_->cfg().unit_dim;
    int n = net_->cfg().num_units;
    if (seq_x_t.size() != static_cast<size_t>(n) * ud) {
        throw ShapeError("NetSeqVelocity: bad sequence length");
    }
    std::vector<double> out(seq_x_t.size());
    for (int u = 0; u < n; ++u) {
        std::vector<double> x(seq_x_t.begin() + static_cast<size_t>(u) * ud,
                              seq_x_t.begin() + static_cast<size_t>(u + 1) * ud);
        auto ctx = VelocityNet::bidir_context(seq_x_t, u, ud);
        auto v = net_->eval_raw(x, ctx, t, u);
        std::copy(v.begin(), v.end(), out.begin() + static_cast<size_t>(u) * ud);
    }
    ++evals_;  // one bidirectional teacher forward covers the whole sequence
    return out;
}

}  // namespace arflow
