#include "arflow/diffusion.hpp"

#include <cmath>

namespace arflow {

TimeGrid::TimeGrid(int k) : k_(k) {
    if (k < 1) throw TensorError("TimeGrid: step count must be >= 1");
    points_.resize(k + 1);
    for (int j = 0; j <= k; ++j) points_[j] = static_cast<double>(j) / static_cast<double>(k);
    points_.front() = 0.0;
    points_.back() = 1.0;
}

std::vector<double> TimeGrid::interior() const {
    return std::vector<double>(points_.begin() + 1, points_.end());
}

std::vector<double> TimeGrid::descending() const {
    std::vector<double> out(points_.rbegin(), points_.rend());
    return out;
}

StepSchedule::StepSchedule(std::vector<double> times) : times_(std::move(times)) {
    if (times_.empty()) throw TensorError("StepSchedule: empty schedule");
    if (times_.front() != 1.0) throw TensorError("StepSchedule: first entry must be 1.0");
    for (size_t j = 0; j < times_.size(); ++j) {
        if (times_[j] <= 0.0 || times_[j] > 1.0) {
            throw TensorError("StepSchedule: entries must lie in (0, 1]");
        }
        if (j > 0 && times_[j] >= times_[j - 1]) {
            throw TensorError("StepSchedule: entries must be strictly descending");
        }
    }
}

StepSchedule StepSchedule::named(const std::string& name) {
    if (name == "four_step" || name == "4") return four_step();
    if (name == "two_step" || name == "2") return two_step();
    if (name == "one_step" || name == "1") return one_step();
    throw TensorError("StepSchedule: unknown preset '" + name + "'");
}

std::vector<double> forward_diffuse(const std::vector<double>& x0,
                                    const std::vector<double>& eps, double t) {
    if (x0.size() != eps.size()) throw ShapeError("forward_diffuse: shape mismatch");
    if (t < 0.0 || t > 1.0) throw TensorError("forward_diffuse: t out of [0,1]");
    std::vector<double> out(x0.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * eps[i];
    return out;
}

Tensor forward_diffuse(const Tensor& x0, const Tensor& eps, double t) {
    if (t < 0.0 || t > 1.0) throw TensorError("forward_diffuse: t out of [0,1]");
    return add(scale(x0, 1.0 - t), scale(eps, t));
}

std::vector<double> velocity_target(const std::vector<double>& x0,
                                    const std::vector<double>& eps) {
    if (x0.size() != eps.size()) throw ShapeError("velocity_target: shape mismatch");
    std::vector<double> out(x0.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = eps[i] - x0[i];
    return out;
}

std::vector<double> generator_transform(const std::vector<double>& x_t, double t,
                                        const std::vector<double>& v) {
    if (x_t.size() != v.size()) throw ShapeError("generator_transform: shape mismatch");
    if (t < 0.0 || t > 1.0) throw TensorError("generator_transform: t out of [0,1]");
    std::vector<double> out(x_t.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x_t[i] - t * v[i];
    return out;
}

Tensor generator_transform(const Tensor& x_t, double t, const Tensor& v) {
    if (t < 0.0 || t > 1.0) throw TensorError("generator_transform: t out of [0,1]");
    return sub(x_t, scale(v, t));
}

std::vector<double> velocity_to_score(const std::vector<double>& x_t, double t,
                                      const std::vector<double>& v) {
    if (t <= 0.0) throw TensorError("velocity_to_score: requires t > 0");
    if (x_t.size() != v.size()) throw ShapeError("velocity_to_score: size mismatch");
    std::vector<double> s(x_t.size());
    for (size_t i = 0; i < s.size(); ++i) s[i] = -(x_t[i] + (1.0 - t) * v[i]) / t;
    return s;
}

Tensor flow_matching_loss(const Tensor& predictions, const Tensor& targets) {
    if (predictions.size() == 0) throw TensorError("flow_matching_loss: empty batch");
    return reduce_mean(squared_error(predictions, targets));
}

OdeMethod ode_method_from_string(const std::string& s) {
    if (s == "euler") return OdeMethod::euler;
    if (s == "heun") return OdeMethod::heun;
    throw TensorError("unknown ODE method '" + s + "'");
}

namespace {
void check_velocity(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError("pf_ode_step: velocity evaluator returned non-finite value");
    }
}
}  // namespace

DiffusionState pf_ode_step(const VelocityField& v_fn, const DiffusionState& state,
                           double t_next, OdeMethod method) {
    if (t_next >= state.t) throw TensorError("pf_ode_step: t_next must be < current t");
    double h = t_next - state.t;  // negative
    std::vector<double> v1 = v_fn(state.x, state.t);
    check_velocity(v1);
    DiffusionState out;
    out.t = t_next;
    out.x.resize(state.x.size());
    if (method == OdeMethod::euler) {
        for (size_t i = 0; i < out.x.size(); ++i) out.x[i] = state.x[i] + h * v1[i];
    } else {
        std::vector<double> xe(state.x.size());
        for (size_t i = 0; i < xe.size(); ++i) xe[i] = state.x[i] + h * v1[i];
        std::vector<double> v2 = v_fn(xe, t_next);
        check_velocity(v2);
        for (size_t i = 0; i < out.x.size(); ++i) {
            out.x[i] = state.x[i] + 0.5 * h * (v1[i] + v2[i]);
        }
    }
    return out;
}

std::vector<DiffusionState> pf_ode_solve(const VelocityField& v_fn,
                                         const std::vector<double>& x1,
                                         const std::vector<double>& grid,
                                         OdeMethod method) {
    if (grid.size() < 2 || grid.front() != 1.0 || grid.back() != 0.0) {
        throw TensorError("pf_ode_solve: grid must descend from 1.0 to 0.0");
    }
    for (size_t j = 1; j < grid.size(); ++j) {
        if (grid[j] >= grid[j - 1]) throw TensorError("pf_ode_solve: grid not strictly descending");
    }
    std::vector<DiffusionState> traj;
    traj.reserve(grid.size());
    traj.push_back({x1, 1.0});
    for (size_t j = 1; j < grid.size(); ++j) {
        traj.push_back(pf_ode_step(v_fn, traj.back(), grid[j], method));
    }
    return traj;
}

}  // namespace arflow
