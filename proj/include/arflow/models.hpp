#pragma once

#include <deque>
#include <string>
#include <vector>

#include "arflow/diffusion.hpp"
#include "arflow/rng.hpp"
#include "arflow/tensor.hpp"
#include "arflow/worlds.hpp"

namespace arflow {

enum class NetMode { causal, bidirectional };

struct NetConfig {
    int unit_dim = 2;       // chunk * frame_dim
    int context_units = 4;  // causal window k, in units
    int num_units = 8;      // AR units per sequence (index embedding size)
    NetMode mode = NetMode::causal;
    int hidden = 256;
    int layers = 4;      // hidden layers
    int time_freqs = 8;  // sinusoidal features -> 2 * time_freqs dims
    int index_emb = 8;

    int context_dim() const {
        return mode == NetMode::causal ? context_units * unit_dim : num_units * unit_dim;
    }
    int input_dim() const { return unit_dim + context_dim() + 2 * time_freqs + index_emb; }
};

// Ring buffer of the most recent clean units produced for one sequence.
class ContextCache {
public:
    ContextCache(int capacity, int unit_dim) : capacity_(capacity), unit_dim_(unit_dim) {}

    void push(std::vector<double> unit);
    void reset();
    int next_unit() const { return next_unit_; }
    int size() const { return static_cast<int>(units_.size()); }

    // last k units, zero-padded on the left, flattened (oldest first)
    std::vector<double> encode(int k) const;

private:
    int capacity_;
    int unit_dim_;
    int next_unit_ = 0;
    std::deque<std::vector<double>> units_;
};

std::vector<double> encode_context(const ContextCache& cache, int k);

// Conditional velocity MLP v(x_t, context, t, unit). Causal mode conditions
// on a window of previous clean units; bidirectional mode conditions on the
// current noisy states of every unit in the sequence (its own slot zeroed).
// Final layer is zero-initialized so the initial field is identically zero.
class VelocityNet {
public:
    VelocityNet(NetConfig cfg, uint64_t seed);

    const NetConfig& cfg() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    // differentiable batch forward; rows of x_t / context pair with ts / units
    Tensor forward(const Tensor& x_t, const Tensor& context, const std::vector<double>& ts,
                   const std::vector<int>& units) const;

    // fast tape-free evaluation of a single row (agrees with forward())
    std::vector<double> eval_raw(const std::vector<double>& x_t, const std::vector<double>& context,
                                 double t, int unit) const;

    // causal-mode convenience: builds the window context from flattened
    // clean prefix frames
    std::vector<double> predict_from_prefix(const std::vector<double>& prefix,
                                            const std::vector<double>& x_t, double t,
                                            int unit) const;
    // bidirectional-mode context: flattened noisy sequence with unit's own
    // slot zeroed
    static std::vector<double> bidir_context(const std::vector<double>& seq_x_t, int unit,
                                             int unit_dim);
    std::vector<double> context_from_prefix(const std::vector<double>& prefix) const;

    std::vector<double> time_features(double t) const;

    // model-evaluation counter (one increment per row evaluated)
    long long evals() const { return evals_; }
    void reset_evals() { evals_ = 0; }

    // deep copy of parameter values into this net
    void copy_params_from(const VelocityNet& other);

private:
    NetConfig cfg_;
    ParamSet params_;
    mutable long long evals_ = 0;
};

struct RolloutConfig {
    StepSchedule schedule = StepSchedule::one_step();
    bool asd_first_frame = false;  // unit 0 always uses the four-step preset
    int chunk = 1;
    int num_units = 8;
    bool full_depth_grad = false;  // stage-3 backprop depth through the rollout

    const StepSchedule& schedule_for_unit(int unit) const;
};

// One AR unit by iterated consistency sampling: at each schedule time the
// generator transform produces a clean estimate which is re-noised to the
// next time with fresh noise.
std::vector<double> few_step_sample_unit(const VelocityNet& model, const ContextCache& cache,
                                         const StepSchedule& schedule,
                                         const std::vector<double>& noise, int unit,
                                         Rng& renoise_rng);

// Same sampling path but conditioned on ground-truth prefix frames.
std::vector<double> teacher_forced_sample(const VelocityNet& model, const SequenceBatch& gt,
                                          int seq, const StepSchedule& schedule, int unit,
                                          const std::vector<double>& noise, Rng& renoise_rng);

// Full self-rollout (no gradients) for evaluation.
SequenceBatch self_rollout(const VelocityNet& model, const WorldSpec& world, int batch,
                           const RolloutConfig& cfg, uint64_t seed);

// Differentiable self-rollout for stage-3 training. Under the default
// truncation rule only the final unit of each sequence carries a tape;
// earlier units are generated tape-free and treated as constants.
struct DiffRollout {
    // [batch][unit] clean units as 1 x unit_dim tensors
    std::vector<std::vector<Tensor>> units;
};
DiffRollout self_rollout_diff(const VelocityNet& model, int batch, const RolloutConfig& cfg,
                              uint64_t seed);

// Causal velocity source backed by a trained net (teacher plug point).
class NetUnitVelocity final : public UnitVelocitySource {
public:
    explicit NetUnitVelocity(const VelocityNet& net) : net_(&net) {}
    std::vector<double> eval(const std::vector<double>& prefix, const std::vector<double>& x_t,
                             double t, int unit) override {
        ++evals_;
        return net_->predict_from_prefix(prefix, x_t, t, unit);
    }

private:
    const VelocityNet* net_;
};

// Whole-sequence velocity source backed by a bidirectional net; one eval
// covers all units of the sequence (one teacher forward).
class NetSeqVelocity final : public SeqVelocitySource {
public:
    explicit NetSeqVelocity(const VelocityNet& net) : net_(&net) {}
    std::vector<double> eval(const std::vector<double>& seq_x_t, double t) override;

private:
    const VelocityNet* net_;
};

}  // namespace arflow
