#pragma once

#include <functional>
#include <string>
#include <vector>

#include "arflow/tensor.hpp"

namespace arflow {

// Rectified-flow schedule: alpha(t) = 1 - t, sigma(t) = t on [0, 1].
struct NoiseSchedule {
    static double alpha(double t) { return 1.0 - t; }
    static double sigma(double t) { return t; }
};

// Uniform training grid t_0 = 0 < t_1 < ... < t_K = 1.
class TimeGrid {
public:
    explicit TimeGrid(int k = 48);

    int steps() const { return k_; }
    double dt() const { return 1.0 / static_cast<double>(k_); }
    double at(int j) const { return points_[j]; }  // j in [0, K]
    const std::vector<double>& points() const { return points_; }
    // interior grid times t_1..t_K (everything but t_0 = 0)
    std::vector<double> interior() const;
    // full descending list 1 -> 0 for solving
    std::vector<double> descending() const;

private:
    int k_;
    std::vector<double> points_;
};

// Descending sampling times, first entry 1.0.
class StepSchedule {
public:
    explicit StepSchedule(std::vector<double> times);

    static StepSchedule four_step() { return StepSchedule({1.0, 0.9375, 0.8333, 0.625}); }
    static StepSchedule two_step() { return StepSchedule({1.0, 0.8333}); }
    static StepSchedule one_step() { return StepSchedule({1.0}); }
    static StepSchedule named(const std::string& name);

    size_t size() const { return times_.size(); }
    double at(size_t j) const { return times_[j]; }
    const std::vector<double>& times() const { return times_; }

private:
    std::vector<double> times_;
};

struct DiffusionState {
    std::vector<double> x;
    double t = 1.0;
};

// x_t = (1-t) x0 + t eps
std::vector<double> forward_diffuse(const std::vector<double>& x0,
                                    const std::vector<double>& eps, double t);
Tensor forward_diffuse(const Tensor& x0, const Tensor& eps, double t);

// v = eps - x0
std::vector<double> velocity_target(const std::vector<double>& x0,
                                    const std::vector<double>& eps);

// G = x_t - t * v  (consistency boundary: identity at t = 0)
std::vector<double> generator_transform(const std::vector<double>& x_t, double t,
                                        const std::vector<double>& v);
Tensor generator_transform(const Tensor& x_t, double t, const Tensor& v);

// Mean squared error between model predictions and velocity targets.
// `predictions` must be differentiable w.r.t. model parameters.
Tensor flow_matching_loss(const Tensor& predictions, const Tensor& targets);

// score = -(x_t + (1-t) v) / t, exact for this schedule; requires t > 0
std::vector<double> velocity_to_score(const std::vector<double>& x_t, double t,
                                      const std::vector<double>& v);

using VelocityField = std::function<std::vector<double>(const std::vector<double>&, double)>;

enum class OdeMethod { euler, heun };

OdeMethod ode_method_from_string(const std::string& s);

DiffusionState pf_ode_step(const VelocityField& v_fn, const DiffusionState& state,
                           double t_next, OdeMethod method);

// Full trajectory over a descending grid starting at 1.0 and ending at 0.0;
// trajectory[j] is the state at grid[j].
std::vector<DiffusionState> pf_ode_solve(const VelocityField& v_fn,
                                         const std::vector<double>& x1,
                                         const std::vector<double>& grid,
                                         OdeMethod method = OdeMethod::euler);

}  // namespace arflow
