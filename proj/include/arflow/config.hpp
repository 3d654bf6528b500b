#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arflow/models.hpp"
#include "arflow/worlds.hpp"

namespace arflow {

// Flat key = value experiment configuration. Every field has a documented
// default; unknown keys are rejected with the list of valid keys. `[section]`
// headers and '#' comments are ignored.
struct ExperimentConfig {
    // world
    std::string world = "gaussian_ar";  // gaussian_ar | branching_gmm
    int frame_dim = 2;
    int num_frames = 8;
    int chunk = 1;
    double a = 0.9;   // default 0.8 for branching_gmm unless set explicitly
    double s = 0.3;   // default 0.15 for branching_gmm unless set explicitly
    double s0 = 1.0;  // gaussian_ar first-frame std
    double mu = 1.0;  // branching_gmm mode offset

    // model
    int hidden = 256;
    int layers = 4;
    int context_units = 4;

    // schedule / grids
    std::string schedule = "two_step";  // four_step | two_step | one_step
    int grid_k = 48;

    // stage budgets (paper-shaped defaults: 20k / 5k / 1k, batch 64)
    std::string stage2 = "causal_cd";  // causal_cd|causal_ode|causal_dmd|bidir_ode|none
    long long steps1 = 20000;
    long long steps2 = 5000;
    long long steps3 = 1000;
    int batch = 64;
    double lr1 = 1e-3;
    double lr2 = 1e-3;
    double lr3 = 1e-4;
    double lr_fake = 1e-3;
    double ema_beta = 0.99;
    int ode_pairs = 2000;   // trajectories for the ODE-distillation variants
    int fake_per_gen = 5;   // fake-score updates per generator update

    // stage-3 rollout
    bool asd_first_frame = true;   // unit 0 uses the four-step preset
    bool full_depth_grad = false;  // backprop through the whole rollout
    std::string stage3_real = "oracle";       // oracle | learned
    std::string stage3_fake_init = "teacher";  // teacher | student
    std::string bidir_teacher = "oracle";      // oracle | learned (bidir_ode variant)

    // run
    uint64_t seed = 0;
    std::string out = "run";
    int eval_rollouts = 400;

    // set when `a` / `s` appear explicitly, so world defaults can differ
    bool a_explicit = false;
    bool s_explicit = false;

    double effective_a() const {
        return (!a_explicit && world == "branching_gmm") ? 0.8 : a;
    }
    double effective_s() const {
        return (!s_explicit && world == "branching_gmm") ? 0.15 : s;
    }

    // canonical sorted key=value text of every semantic field (excludes
    // `out` and `seed`); the FNV-1a hash of this text stamps all outputs
    std::string canonical_text() const;
    uint64_t hash() const;

    void validate() const;
    WorldSpec world_spec() const;
    NetConfig net_config(NetMode mode) const;
    StepSchedule step_schedule() const { return StepSchedule::named(schedule); }
};

// sorted list of recognized keys (for error messages and docs)
const std::vector<std::string>& config_keys();

// apply one  key=value  assignment; throws on unknown key or type mismatch
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

// parse a config file (empty path = all defaults), then apply inline
// key=value overrides in order
ExperimentConfig parse_config(const std::string& path,
                              const std::vector<std::string>& overrides = {});
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides = {});

}  // namespace arflow
