#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "arflow/diffusion.hpp"
#include "arflow/rng.hpp"
#include "arflow/tensor.hpp"

namespace arflow {

enum class WorldKind { gaussian_ar, branching_gmm };

WorldKind world_kind_from_string(const std::string& s);
std::string to_string(WorldKind k);

// Generative law of a synthetic sequential world. Frames are d-vectors;
// an AR unit groups `chunk` consecutive frames.
//
// gaussian_ar:    x_0 ~ N(0, s0^2 I),  x_i = a x_{i-1} + s z
// branching_gmm:  x_i = a x_{i-1} + b_i mu e0 + s z,  b_i = +/-1 w.p. 1/2
//                 (x_{-1} = 0; the mixture offset acts along dim 0 only)
struct WorldSpec {
    WorldKind kind = WorldKind::gaussian_ar;
    int frame_dim = 2;
    int num_frames = 8;
    double a = 0.9;
    double s = 0.3;
    double s0 = 1.0;
    double mu = 1.0;
    int chunk = 1;

    static WorldSpec gaussian_ar_default();
    static WorldSpec branching_gmm_default();

    void validate() const;
    int num_units() const { return num_frames / chunk; }
    int unit_dim() const { return chunk * frame_dim; }
    // innovation std of frame i
    double frame_std(int i) const { return (kind == WorldKind::gaussian_ar && i == 0) ? s0 : s; }
};

// Batch of sequences sampled from a world, row-major [B][N][d].
struct SequenceBatch {
    int batch = 0;
    int num_frames = 0;
    int frame_dim = 0;
    uint64_t seed = 0;
    std::vector<double> data;

    double* frame(int b, int i) { return data.data() + (static_cast<size_t>(b) * num_frames + i) * frame_dim; }
    const double* frame(int b, int i) const {
        return data.data() + (static_cast<size_t>(b) * num_frames + i) * frame_dim;
    }
    std::vector<double> frame_vec(int b, int i) const {
        const double* p = frame(b, i);
        return std::vector<double>(p, p + frame_dim);
    }
    // flattened frames [unit*chunk, (unit+1)*chunk) of sequence b
    std::vector<double> unit_vec(int b, int unit, int chunk) const;
    // flattened frames [0, unit*chunk) of sequence b
    std::vector<double> prefix_vec(int b, int unit, int chunk) const;
};

SequenceBatch sample_sequences(const WorldSpec& spec, int batch, uint64_t seed);

void write_sequence_csv(const std::string& path, const SequenceBatch& batch);

// Closed-form conditional and joint laws of a world under the rectified-flow
// perturbation x_t = (1-t) x0 + t eps. All per-unit quantities condition on
// the flattened clean prefix frames (empty for unit 0); only the most recent
// frame matters (the worlds are first-order Markov).
class AnalyticOracle {
public:
    explicit AnalyticOracle(WorldSpec spec);

    const WorldSpec& spec() const { return spec_; }

    // exact conditional velocity E[eps - x0 | x_t, prefix]; valid on t in [0,1]
    std::vector<double> cond_velocity(const std::vector<double>& prefix,
                                      const std::vector<double>& x_t, double t) const;
    // exact grad_x log p_t(x_t | prefix)
    std::vector<double> cond_score(const std::vector<double>& prefix,
                                   const std::vector<double>& x_t, double t) const;
    // exact posterior mean E[x0 | x_t, prefix]
    std::vector<double> cond_expectation(const std::vector<double>& prefix,
                                         const std::vector<double>& x_t, double t) const;
    // exact PF-ODE endpoint at t_to (default 0) reached from (x_t, t).
    // Gaussian worlds use the closed form; the mixture world integrates the
    // oracle velocity with Heun on `refine_steps` substeps.
    std::vector<double> flow_map(const std::vector<double>& prefix, const std::vector<double>& x_t,
                                 double t, double t_to = 0.0, int refine_steps = 2048) const;
    // log p_t(x_t | prefix) up to nothing (fully normalized)
    double cond_log_density(const std::vector<double>& prefix, const std::vector<double>& x_t,
                            double t) const;

    // conditional moments of the clean unit
    Eigen::VectorXd cond_mean_clean(const std::vector<double>& prefix) const;  // mixture: overall mean
    // full clean-unit covariance given the prefix (gaussian_ar only)
    Eigen::MatrixXd cond_clean_cov(const std::vector<double>& prefix) const;
    // mixture mode centers along dim 0 for the unit's first frame
    std::pair<double, double> mixture_modes(const std::vector<double>& prefix) const;

    // draw one clean unit from the conditional law
    std::vector<double> sample_unit(const std::vector<double>& prefix, Rng& rng) const;

    // whole-sequence (bidirectional) law: x_t is the flattened noisy sequence
    std::vector<double> joint_velocity(const std::vector<double>& seq_x_t, double t) const;
    std::vector<double> joint_score(const std::vector<double>& seq_x_t, double t) const;

private:
    WorldSpec spec_;

    // chain covariance (per dim) for a run of `len` frames whose first frame
    // has innovation std `first_std`; later frames use spec_.s
    Eigen::MatrixXd chain_cov(int len, double first_std) const;

    struct GaussianCond {
        Eigen::VectorXd mean;
        Eigen::MatrixXd cov;
    };
    // Gaussian conditional of one unit given the previous clean frame
    GaussianCond unit_gaussian(const std::vector<double>& prefix, int dim) const;

    // set of joint mixture component means along dim 0 (branching_gmm)
    const std::vector<Eigen::VectorXd>& joint_dim0_means() const;
    mutable std::vector<Eigen::VectorXd> joint_means_cache_;
};

// Velocity evaluators with a teacher-call counter; these are the plug points
// for oracle-vs-learned teachers across the distillation stages.
class UnitVelocitySource {
public:
    virtual ~UnitVelocitySource() = default;
    // conditional velocity of one unit given clean prefix frames
    virtual std::vector<double> eval(const std::vector<double>& prefix,
                                     const std::vector<double>& x_t, double t, int unit) = 0;
    long long evals() const { return evals_; }
    void reset_evals() { evals_ = 0; }

protected:
    long long evals_ = 0;
};

class SeqVelocitySource {
public:
    virtual ~SeqVelocitySource() = default;
    // joint velocity over the flattened noisy sequence
    virtual std::vector<double> eval(const std::vector<double>& seq_x_t, double t) = 0;
    long long evals() const { return evals_; }
    void reset_evals() { evals_ = 0; }

protected:
    long long evals_ = 0;
};

class OracleUnitVelocity final : public UnitVelocitySource {
public:
    explicit OracleUnitVelocity(const AnalyticOracle& oracle) : oracle_(&oracle) {}
    std::vector<double> eval(const std::vector<double>& prefix, const std::vector<double>& x_t,
                             double t, int /*unit*/) override {
        ++evals_;
        return oracle_->cond_velocity(prefix, x_t, t);
    }

private:
    const AnalyticOracle* oracle_;
};

class OracleSeqVelocity final : public SeqVelocitySource {
public:
    explicit OracleSeqVelocity(const AnalyticOracle& oracle) : oracle_(&oracle) {}
    std::vector<double> eval(const std::vector<double>& seq_x_t, double t) override {
        ++evals_;
        return oracle_->joint_velocity(seq_x_t, t);
    }

private:
    const AnalyticOracle* oracle_;
};

}  // namespace arflow
