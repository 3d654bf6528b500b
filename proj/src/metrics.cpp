#include "arflow/metrics.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace arflow {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// W2 of the one-step innovations of frame i (x_{-1} = 0) over the chosen
// sequence indices. The innovation law does not depend on the prefix, so the
// conditional comparison pools residuals across sequences.
double residual_w2(const SequenceBatch& batch, const WorldSpec& world, int i,
                   const std::vector<int>& idx) {
    int d = batch.frame_dim;
    size_t n = idx.size();
    if (world.kind == WorldKind::gaussian_ar) {
        Eigen::MatrixXd x(n, d);
        for (size_t r = 0; r < n; ++r) {
            const double* cur = batch.frame(idx[r], i);
            const double* prev = i > 0 ? batch.frame(idx[r], i - 1) : nullptr;
            for (int q = 0; q < d; ++q) x(r, q) = cur[q] - (prev ? world.a * prev[q] : 0.0);
        }
        Eigen::VectorXd mean = x.colwise().mean();
        Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
        Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
        double sd = world.frame_std(i);
        return gaussian_w2(mean, cov, Eigen::VectorXd::Zero(d),
                           sd * sd * Eigen::MatrixXd::Identity(d, d));
    }
    // branching_gmm: dim-0 residual against the +-mu mixture
    std::vector<double> r0(n);
    for (size_t r = 0; r < n; ++r) {
        double cur = batch.frame(idx[r], i)[0];
        double prev = i > 0 ? batch.frame(idx[r], i - 1)[0] : 0.0;
        r0[r] = cur - world.a * prev;
    }
    return mixture_w2_1d(std::move(r0), world.mu, -world.mu, world.s);
}

}  // namespace

// ---- MetricReport -----------------------------------------------------------

std::string MetricReport::to_csv() const {
    std::string out = "frame,metric,value,se\n";
    for (const auto& [name, s] : series) {
        for (size_t i = 0; i < s.value.size(); ++i) {
            out += std::to_string(i) + "," + name + "," + fmt_double(s.value[i]) + "," +
                   fmt_double(i < s.se.size() ? s.se[i] : 0.0) + "\n";
        }
    }
    for (const auto& [name, v] : scalars) {
        out += "-1," + name + "," + fmt_double(v) + ",0\n";
    }
    return out;
}

void MetricReport::save_csv(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw TensorError("MetricReport::save_csv: cannot open '" + path + "'");
    os << to_csv();
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["samples"] = samples;
    for (const auto& [name, s] : series) {
        j["series"][name]["value"] = s.value;
        j["series"][name]["se"] = s.se;
    }
    for (const auto& [name, v] : scalars) j["scalars"][name] = v;
    return j.dump(2);
}

// ---- W2 ---------------------------------------------------------------------

double gaussian_w2(const Eigen::VectorXd& m1, const Eigen::MatrixXd& c1, const Eigen::VectorXd& m2,
                   const Eigen::MatrixXd& c2) {
    Eigen::MatrixXd s2 = sqrtm_psd(c2);
    Eigen::MatrixXd cross = sqrtm_psd(s2 * c1 * s2);
    double b2 = (c1 + c2 - 2.0 * cross).trace();
    double w2 = (m1 - m2).squaredNorm() + std::max(b2, 0.0);
    return std::sqrt(std::max(w2, 0.0));
}

double mixture_quantile(double p, double m_plus, double m_minus, double sd) {
    if (p <= 0.0 || p >= 1.0) throw TensorError("mixture_quantile: p must be in (0,1)");
    double lo = std::min(m_plus, m_minus) - 12.0 * sd;
    double hi = std::max(m_plus, m_minus) + 12.0 * sd;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        double c = 0.5 * (normal_cdf((mid - m_plus) / sd) + normal_cdf((mid - m_minus) / sd));
        (c < p ? lo : hi) = mid;
        if (hi - lo < 1e-13 * (1.0 + std::abs(mid))) break;
    }
    return 0.5 * (lo + hi);
}

double mixture_w2_1d(std::vector<double> samples, double m_plus, double m_minus, double sd) {
    if (samples.empty()) throw TensorError("mixture_w2_1d: empty sample set");
    std::sort(samples.begin(), samples.end());
    size_t n = samples.size();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double q = mixture_quantile((i + 0.5) / n, m_plus, m_minus, sd);
        acc += (samples[i] - q) * (samples[i] - q);
    }
    return std::sqrt(acc / n);
}

double conditional_w2(const std::vector<std::vector<double>>& samples, const AnalyticOracle& oracle,
                      const std::vector<double>& prefix) {
    if (samples.size() < 100) throw TensorError("conditional_w2: needs at least 100 samples");
    const WorldSpec& world = oracle.spec();
    size_t n = samples.size();
    int ud = world.unit_dim();
    if (world.kind == WorldKind::gaussian_ar) {
        Eigen::MatrixXd x(n, ud);
        for (size_t r = 0; r < n; ++r) {
            if (static_cast<int>(samples[r].size()) != ud) {
                throw ShapeError("conditional_w2: sample width mismatch");
            }
            for (int q = 0; q < ud; ++q) x(r, q) = samples[r][q];
        }
        Eigen::VectorXd mean = x.colwise().mean();
        Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
        Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
        return gaussian_w2(mean, cov, oracle.cond_mean_clean(prefix),
                           oracle.cond_clean_cov(prefix));
    }
    auto [mp, mm] = oracle.mixture_modes(prefix);
    std::vector<double> dim0(n);
    for (size_t r = 0; r < n; ++r) dim0[r] = samples[r][0];
    return mixture_w2_1d(std::move(dim0), mp, mm, world.s);
}

// ---- exposure bias ------------------------------------------------------------

MetricReport exposure_bias_curve(const SequenceBatch& rollouts, const AnalyticOracle& oracle,
                                 int bootstrap, uint64_t seed) {
    if (rollouts.batch < 100) throw TensorError("exposure_bias_curve: needs >= 100 rollouts");
    const WorldSpec& world = oracle.spec();
    if (rollouts.frame_dim != world.frame_dim) {
        throw ShapeError("exposure_bias_curve: frame dim mismatch");
    }
    int frames = rollouts.num_frames;
    std::vector<int> all(rollouts.batch);
    std::iota(all.begin(), all.end(), 0);

    MetricReport rep;
    rep.samples = rollouts.batch;
    FrameSeries& s = rep.series["w2_conditional"];
    s.value.resize(frames);
    for (int i = 0; i < frames; ++i) s.value[i] = residual_w2(rollouts, world, i, all);
    double slope = ls_slope(s.value);
    double mean = std::accumulate(s.value.begin(), s.value.end(), 0.0) / frames;

    // bootstrap over rollouts for per-frame SEs and the slope SE
    s.se.assign(frames, 0.0);
    double slope_se = 0.0;
    if (bootstrap > 1) {
        Rng rng(seed);
        std::vector<std::vector<double>> boots(frames);
        std::vector<double> slopes;
        for (int rep_i = 0; rep_i < bootstrap; ++rep_i) {
            std::vector<int> idx(rollouts.batch);
            for (auto& v : idx) v = rng.uniform_int(0, rollouts.batch - 1);
            std::vector<double> vals(frames);
            for (int i = 0; i < frames; ++i) {
                vals[i] = residual_w2(rollouts, world, i, idx);
                boots[i].push_back(vals[i]);
            }
            slopes.push_back(ls_slope(vals));
        }
        auto stdev = [](const std::vector<double>& v) {
            double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
            double acc = 0.0;
            for (double x : v) acc += (x - m) * (x - m);
            return std::sqrt(acc / (v.size() - 1));
        };
        for (int i = 0; i < frames; ++i) s.se[i] = stdev(boots[i]);
        slope_se = stdev(slopes);
    }

    rep.scalars["mean_w2"] = mean;
    rep.scalars["slope"] = slope;
    rep.scalars["slope_se"] = slope_se;
    return rep;
}

MetricReport exposure_bias_curve(const VelocityNet& model, const WorldSpec& world,
                                 const RolloutConfig& cfg, int num_rollouts, uint64_t seed,
                                 int bootstrap) {
    AnalyticOracle oracle(world);
    auto rollouts = self_rollout(model, world, num_rollouts, cfg, seed);
    return exposure_bias_curve(rollouts, oracle, bootstrap, seed + 1);
}

// ---- mode coverage -------------------------------------------------------------

ModeCoverage mode_coverage(const std::vector<double>& dim0_values, double mode_plus,
                           double mode_minus) {
    if (dim0_values.empty()) throw TensorError("mode_coverage: empty sample set");
    ModeCoverage mc;
    for (double v : dim0_values) {
        if (std::abs(v - mode_plus) <= std::abs(v - mode_minus)) {
            mc.p_plus += 1.0;
        } else {
            mc.p_minus += 1.0;
        }
    }
    mc.p_plus /= dim0_values.size();
    mc.p_minus /= dim0_values.size();
    mc.coverage = std::min(mc.p_plus, mc.p_minus) / 0.5;
    return mc;
}

ModeCoverage mode_coverage(const std::vector<std::vector<double>>& samples,
                           const AnalyticOracle& oracle, const std::vector<double>& prefix) {
    auto [mp, mm] = oracle.mixture_modes(prefix);  // throws on non-mixture worlds
    std::vector<double> dim0(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) dim0[i] = samples[i][0];
    return mode_coverage(dim0, mp, mm);
}

// ---- solver order -----------------------------------------------------------------

double order_estimate(const std::vector<double>& errors) {
    if (errors.size() < 2) throw TensorError("order_estimate: needs at least two errors");
    double acc = 0.0;
    int n = 0;
    for (size_t i = 0; i + 1 < errors.size(); ++i) {
        if (errors[i] <= 0.0 || errors[i + 1] <= 0.0) continue;  // degenerate: exact solver
        acc += std::log2(errors[i] / errors[i + 1]);
        ++n;
    }
    return n > 0 ? acc / n : 0.0;
}

SolverOrder solver_order_check(const AnalyticOracle& oracle, const std::vector<double>& prefix,
                               OdeMethod method, uint64_t seed, std::vector<int> ks,
                               int num_starts) {
    if (oracle.spec().kind != WorldKind::gaussian_ar) {
        throw TensorError("solver_order_check: needs a gaussian_ar conditional");
    }
    int ud = oracle.spec().unit_dim();
    Rng rng(seed);
    VelocityField field = [&](const std::vector<double>& x, double t) {
        return oracle.cond_velocity(prefix, x, t);
    };
    SolverOrder out;
    out.ks = ks;
    out.errors.assign(ks.size(), 0.0);
    for (int s = 0; s < num_starts; ++s) {
        auto x1 = rng.normal_vec(ud);
        for (size_t m = 0; m < ks.size(); ++m) {
            // max error over the whole trajectory against the closed form
            TimeGrid grid(ks[m]);
            auto traj = pf_ode_solve(field, x1, grid.descending(), method);
            double worst = 0.0;
            for (const auto& st : traj) {
                auto exact = oracle.flow_map(prefix, x1, 1.0, st.t);
                double e2 = 0.0;
                for (int d = 0; d < ud; ++d) e2 += (st.x[d] - exact[d]) * (st.x[d] - exact[d]);
                worst = std::max(worst, std::sqrt(e2));
            }
            out.errors[m] += worst / num_starts;
        }
    }
    out.p_hat = order_estimate(out.errors);
    return out;
}

// ---- efficiency ---------------------------------------------------------------------

EfficiencySummary efficiency_rollup(const std::vector<StageReport>& ode_pipeline,
                                    const std::vector<StageReport>& cd_pipeline) {
    auto training_steps = [](const std::vector<StageReport>& reports) {
        long long s = 0;
        for (const auto& r : reports) {
            if (r.stage.rfind("stage2", 0) == 0) s += r.steps;
        }
        return s;
    };
    long long ode_steps = training_steps(ode_pipeline), cd_steps = training_steps(cd_pipeline);
    if (ode_steps != cd_steps) {
        throw TensorError("efficiency_rollup: mismatched stage-2 budgets (ode=" +
                          std::to_string(ode_steps) + ", cd=" + std::to_string(cd_steps) + ")");
    }
    EfficiencySummary out;
    for (const auto& r : ode_pipeline) {
        out.ode_evals += r.teacher_evals;
        out.ode_aux_bytes += r.aux_bytes;
    }
    for (const auto& r : cd_pipeline) {
        out.cd_evals += r.teacher_evals;
        out.cd_aux_bytes += r.aux_bytes;
    }
    if (out.cd_evals == 0) throw TensorError("efficiency_rollup: CD pipeline has zero evals");
    out.eval_ratio = static_cast<double>(out.ode_evals) / static_cast<double>(out.cd_evals);
    return out;
}

// ---- Wilcoxon ------------------------------------------------------------------------

double wilcoxon_one_sided(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ShapeError("wilcoxon_one_sided: length mismatch");
    std::vector<double> diffs;
    for (size_t i = 0; i < x.size(); ++i) {
        double d = x[i] - y[i];
        if (d != 0.0) diffs.push_back(d);
    }
    size_t n = diffs.size();
    if (n == 0) return 1.0;
    if (n > 20) throw TensorError("wilcoxon_one_sided: exact test limited to n <= 20");

    // average ranks of |d|, doubled so ties stay integral
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return std::abs(diffs[a]) < std::abs(diffs[b]); });
    std::vector<long long> rank2(n, 0);
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j < n && std::abs(diffs[order[j]]) == std::abs(diffs[order[i]])) ++j;
        long long avg2 = static_cast<long long>(i + 1 + j);  // 2 * average rank
        for (size_t q = i; q < j; ++q) rank2[order[q]] = avg2;
        i = j;
    }

    long long w_plus2 = 0, total2 = 0;
    for (size_t i = 0; i < n; ++i) {
        total2 += rank2[i];
        if (diffs[i] > 0.0) w_plus2 += rank2[i];
    }

    // exact null distribution of the doubled statistic by subset-sum counting
    std::vector<double> counts(total2 + 1, 0.0);
    counts[0] = 1.0;
    for (size_t i = 0; i < n; ++i) {
        for (long long w = total2; w >= rank2[i]; --w) counts[w] += counts[w - rank2[i]];
    }
    double tail = 0.0, all = std::pow(2.0, static_cast<double>(n));
    for (long long w = w_plus2; w <= total2; ++w) tail += counts[w];
    return tail / all;
}

// ---- entropy -------------------------------------------------------------------------

double sample_entropy_1d(std::vector<double> samples) {
    size_t n = samples.size();
    if (n < 10) throw TensorError("sample_entropy_1d: needs at least 10 samples");
    std::sort(samples.begin(), samples.end());
    constexpr double gamma = 0.57721566490153286;
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double rho;
        if (i == 0) {
            rho = samples[1] - samples[0];
        } else if (i == n - 1) {
            rho = samples[n - 1] - samples[n - 2];
        } else {
            rho = std::min(samples[i] - samples[i - 1], samples[i + 1] - samples[i]);
        }
        acc += std::log(std::max(rho, 1e-12));
    }
    return acc / n + std::log(2.0 * (n - 1)) + gamma;
}

double ls_slope(const std::vector<double>& y) {
    size_t n = y.size();
    if (n < 2) throw TensorError("ls_slope: needs at least two points");
    double mx = (n - 1) / 2.0, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < n; ++i) {
        num += (i - mx) * (y[i] - my);
        den += (i - mx) * (i - mx);
    }
    return num / den;
}

}  // namespace arflow
