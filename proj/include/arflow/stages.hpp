#pragma once

#include <string>
#include <utility>
#include <vector>

#include "arflow/diffusion.hpp"
#include "arflow/models.hpp"
#include "arflow/tensor.hpp"
#include "arflow/worlds.hpp"

namespace arflow {

// Accounting record every stage emits: training budget, teacher forwards,
// bytes of auxiliary artifacts created, wall clock, and the loss curve.
struct StageReport {
    std::string stage;
    long long steps = 0;
    long long teacher_evals = 0;
    long long aux_bytes = 0;
    double wall_ms = 0.0;
    std::vector<std::pair<long long, double>> loss_curve;  // (step, loss)

    std::string to_json() const;
    void save_json(const std::string& path) const;
};

// Offline store of teacher PF-ODE supervision pairs. The prefix slot is a
// fixed window of k units, zero-padded on the left exactly as the causal
// nets encode their context.
class OdePairStore {
public:
    struct Record {
        uint32_t unit = 0;
        double t = 1.0;
        std::vector<double> prefix;  // k * d, zero-padded
        std::vector<double> x_t;     // d
        std::vector<double> x0;      // d
    };

    OdePairStore() = default;
    OdePairStore(int grid_k, int unit_dim, int context_units)
        : grid_k_(grid_k), unit_dim_(unit_dim), context_units_(context_units) {}

    int grid_k() const { return grid_k_; }
    int unit_dim() const { return unit_dim_; }
    int context_units() const { return context_units_; }
    size_t size() const { return records_.size(); }
    const Record& record(size_t i) const { return records_[i]; }
    void append(Record r);

    // fixed-width little-endian record size in bytes
    long long record_bytes() const;
    long long total_bytes() const;

    void save(const std::string& path) const;
    static OdePairStore load(const std::string& path);

private:
    int grid_k_ = 0;
    int unit_dim_ = 0;
    int context_units_ = 0;
    std::vector<Record> records_;
};

// Stage 1: teacher-forcing flow matching. Causal nets condition on the
// ground-truth prefix window; bidirectional nets condition on the noisy
// sequence with the unit's own slot masked.
StageReport stage1_train(VelocityNet& net, const WorldSpec& world, long long steps, int batch,
                         double lr, uint64_t seed, const TimeGrid& grid = TimeGrid(48));

// Offline trajectory generation for ODE distillation: each trajectory draws
// a fresh ground-truth prefix and noise, solves the teacher PF-ODE over the
// full grid, and stores one record per interior grid time.
OdePairStore generate_ode_pairs(UnitVelocitySource& teacher, const WorldSpec& world,
                                int num_trajectories, const TimeGrid& grid, uint64_t seed,
                                StageReport* report = nullptr);

// Stage 2, ODE-distillation variant: regress the student generator onto the
// stored teacher endpoints.
StageReport stage2_causal_ode(VelocityNet& student, const OdePairStore& pairs, long long steps,
                              int batch, double lr, uint64_t seed);

struct CdConfig {
    long long steps = 5000;
    int batch = 64;
    double lr = 1e-3;
    double ema_beta = 0.99;
    uint64_t seed = 0;
};

// Stage 2, causal consistency distillation: online targets from one euler
// teacher step plus the EMA student at the earlier grid time. Creates no
// auxiliary storage.
StageReport stage2_causal_cd(VelocityNet& student, UnitVelocitySource& teacher,
                             const WorldSpec& world, const TimeGrid& grid, const CdConfig& cfg);

struct DmdConfig {
    long long steps = 5000;  // generator updates
    int batch = 64;
    double lr_gen = 1e-4;
    double lr_fake = 1e-3;
    int fake_per_gen = 5;
    uint64_t seed = 0;
};

// Stage 2, causal distribution matching: teacher-forced one-step generator
// trained against the real/fake score difference; the fake score net is
// trained by flow matching on current generator samples.
StageReport stage2_causal_dmd(VelocityNet& student, UnitVelocitySource& real_teacher,
                              VelocityNet& fake, const WorldSpec& world, const TimeGrid& grid,
                              const DmdConfig& cfg);

// Stage 2 baseline: ODE distillation from a bidirectional (whole-sequence)
// teacher. Pairs come from joint PF-ODE trajectories; the prefix stored for
// unit i is the trajectory's own clean endpoint before unit i.
StageReport stage2_bidir_ode(VelocityNet& student, SeqVelocitySource& bidir_teacher,
                             const WorldSpec& world, int num_trajectories, const TimeGrid& grid,
                             long long steps, int batch, double lr, uint64_t seed,
                             OdePairStore* pairs_out = nullptr);

struct Stage3Config {
    long long steps = 1000;  // generator updates
    int batch = 16;
    double lr_gen = 1e-4;
    double lr_fake = 1e-3;
    int fake_per_gen = 5;
    uint64_t seed = 0;
    RolloutConfig rollout;
};

// Stage 3: asymmetric distribution matching. The generator is the student's
// full self-rollout; the real score sees whole sequences; the fake score is
// causal and trained on the rollouts.
StageReport stage3_asymmetric_dmd(VelocityNet& student, SeqVelocitySource& real_teacher,
                                  VelocityNet& fake, const WorldSpec& world, const TimeGrid& grid,
                                  const Stage3Config& cfg);

}  // namespace arflow
