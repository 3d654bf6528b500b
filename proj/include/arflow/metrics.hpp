#pragma once

#include <map>
#include <string>
#include <vector>

#include "arflow/models.hpp"
#include "arflow/stages.hpp"
#include "arflow/worlds.hpp"

namespace arflow {

struct FrameSeries {
    std::vector<double> value;
    std::vector<double> se;
};

// Per-frame metric arrays plus scalar roll-ups (means, fitted slopes).
struct MetricReport {
    long long samples = 0;
    std::map<std::string, FrameSeries> series;
    std::map<std::string, double> scalars;

    // rows: frame,metric,value,se (deterministic order)
    void save_csv(const std::string& path) const;
    std::string to_csv() const;
    std::string to_json() const;
};

// Closed-form W2 between two Gaussians.
double gaussian_w2(const Eigen::VectorXd& m1, const Eigen::MatrixXd& c1, const Eigen::VectorXd& m2,
                   const Eigen::MatrixXd& c2);

// Quantile of the symmetric two-component mixture (1/2) N(m_plus, sd^2) +
// (1/2) N(m_minus, sd^2).
double mixture_quantile(double p, double m_plus, double m_minus, double sd);

// 1-D sorted-quantile W2 of samples against the same mixture.
double mixture_w2_1d(std::vector<double> samples, double m_plus, double m_minus, double sd);

// Conditional W2 of sampled clean units against the oracle law given the
// prefix: closed-form Gaussian W2 for gaussian_ar, dim-0 quantile W2 against
// the mixture for branching_gmm. Requires >= 100 samples.
double conditional_w2(const std::vector<std::vector<double>>& samples, const AnalyticOracle& oracle,
                      const std::vector<double>& prefix);

// Per-frame conditional W2 of rolled-out sequences against the oracle law
// given each rollout's own generated prefix, evaluated on pooled one-step
// residuals; reports per-frame values with bootstrap SEs and the fitted
// slope vs frame index ("w2_conditional", scalars mean/slope/slope_se).
MetricReport exposure_bias_curve(const SequenceBatch& rollouts, const AnalyticOracle& oracle,
                                 int bootstrap = 100, uint64_t seed = 1);
MetricReport exposure_bias_curve(const VelocityNet& model, const WorldSpec& world,
                                 const RolloutConfig& cfg, int num_rollouts, uint64_t seed,
                                 int bootstrap = 100);

struct ModeCoverage {
    double p_plus = 0.0;
    double p_minus = 0.0;
    double coverage = 0.0;  // min(p_plus, p_minus) / 0.5
};

// Nearest-mode occupancy of dim-0 values against the two mode centers.
ModeCoverage mode_coverage(const std::vector<double>& dim0_values, double mode_plus,
                           double mode_minus);
// Convenience: samples are clean units; modes come from the oracle mixture
// (throws on non-mixture worlds).
ModeCoverage mode_coverage(const std::vector<std::vector<double>>& samples,
                           const AnalyticOracle& oracle, const std::vector<double>& prefix);

struct SolverOrder {
    std::vector<int> ks;
    std::vector<double> errors;  // max-over-trajectory error, averaged over starts
    double p_hat = 0.0;          // mean log2 error ratio per grid doubling
};

// mean log2(err[i] / err[i+1]); zero errors give a degenerate 0 estimate
double order_estimate(const std::vector<double>& errors);

// Error of the PF-ODE solver against the oracle's closed-form flow map on a
// gaussian_ar conditional, measured as the max over the whole trajectory.
SolverOrder solver_order_check(const AnalyticOracle& oracle, const std::vector<double>& prefix,
                               OdeMethod method, uint64_t seed,
                               std::vector<int> ks = {12, 24, 48, 96}, int num_starts = 8);

struct EfficiencySummary {
    long long ode_evals = 0;
    long long cd_evals = 0;
    double eval_ratio = 0.0;  // ODE pipeline / CD pipeline
    long long ode_aux_bytes = 0;
    long long cd_aux_bytes = 0;
};

// Teacher-eval and storage roll-up of a matched-budget ODE pipeline
// (pair generation + training reports) against a CD pipeline.
EfficiencySummary efficiency_rollup(const std::vector<StageReport>& ode_pipeline,
                                    const std::vector<StageReport>& cd_pipeline);

// Exact one-sided Wilcoxon signed-rank p-value for the alternative
// "x tends to exceed y" (paired). Zero differences are dropped; ties get
// average ranks. n after zero-dropping must be in [1, 20].
double wilcoxon_one_sided(const std::vector<double>& x, const std::vector<double>& y);

// 1-D differential entropy estimate (nearest-neighbor estimator).
double sample_entropy_1d(std::vector<double> samples);

// ordinary least-squares slope of y against 0..n-1
double ls_slope(const std::vector<double>& y);

}  // namespace arflow
