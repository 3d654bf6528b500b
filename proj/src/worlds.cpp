#include "arflow/worlds.hpp"

#include <cmath>
#include <fstream>
#include <functional>

namespace arflow {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Gaussian mixture with a shared covariance across components; all the
// rectified-flow conditionals used here have this form.
struct GaussMixture {
    std::vector<Eigen::VectorXd> means;
    std::vector<double> logw;
    Eigen::MatrixXd cov;

    int dim() const { return static_cast<int>(cov.rows()); }

    struct AtTime {
        Eigen::LDLT<Eigen::MatrixXd> A;  // (1-t)^2 C + t^2 I
        double logdetA = 0.0;
    };

    AtTime factor(double t) const {
        AtTime f;
        Eigen::MatrixXd A = (1.0 - t) * (1.0 - t) * cov +
                            t * t * Eigen::MatrixXd::Identity(dim(), dim());
        f.A.compute(A);
        f.logdetA = f.A.vectorD().array().log().sum();
        return f;
    }

    // responsibilities r_j(x) at time t
    std::vector<double> responsibilities(const AtTime& f, const Eigen::VectorXd& x,
                                         double t) const {
        std::vector<double> lg(means.size());
        double mx = -1e300;
        for (size_t j = 0; j < means.size(); ++j) {
            Eigen::VectorXd r = x - (1.0 - t) * means[j];
            lg[j] = logw[j] - 0.5 * r.dot(f.A.solve(r));
            mx = std::max(mx, lg[j]);
        }
        double z = 0.0;
        for (double& v : lg) {
            v = std::exp(v - mx);
            z += v;
        }
        for (double& v : lg) v /= z;
        return lg;
    }

    // velocity E[eps - x0 | x_t]; regular on all of [0,1]
    Eigen::VectorXd velocity(const Eigen::VectorXd& x, double t) const {
        AtTime f = factor(t);
        auto r = responsibilities(f, x, t);
        Eigen::VectorXd base = t * x - (1.0 - t) * (cov * x);
        Eigen::VectorXd out = Eigen::VectorXd::Zero(dim());
        for (size_t j = 0; j < means.size(); ++j) {
            out += r[j] * f.A.solve(base - t * means[j]);
        }
        return out;
    }

    Eigen::VectorXd score(const Eigen::VectorXd& x, double t) const {
        AtTime f = factor(t);
        auto r = responsibilities(f, x, t);
        Eigen::VectorXd out = Eigen::VectorXd::Zero(dim());
        for (size_t j = 0; j < means.size(); ++j) {
            out -= r[j] * f.A.solve(x - (1.0 - t) * means[j]);
        }
        return out;
    }

    Eigen::VectorXd posterior_mean(const Eigen::VectorXd& x, double t) const {
        AtTime f = factor(t);
        auto r = responsibilities(f, x, t);
        Eigen::VectorXd out = Eigen::VectorXd::Zero(dim());
        for (size_t j = 0; j < means.size(); ++j) {
            out += r[j] * (means[j] + (1.0 - t) * (cov * f.A.solve(x - (1.0 - t) * means[j])));
        }
        return out;
    }

    double log_density(const Eigen::VectorXd& x, double t) const {
        AtTime f = factor(t);
        double mx = -1e300;
        std::vector<double> lg(means.size());
        for (size_t j = 0; j < means.size(); ++j) {
            Eigen::VectorXd r = x - (1.0 - t) * means[j];
            lg[j] = logw[j] - 0.5 * r.dot(f.A.solve(r)) - 0.5 * (f.logdetA + dim() * kLog2Pi);
            mx = std::max(mx, lg[j]);
        }
        double z = 0.0;
        for (double v : lg) z += std::exp(v - mx);
        return mx + std::log(z);
    }

    // closed-form PF-ODE transport from (x, t) to t_to; single component only
    Eigen::VectorXd gaussian_flow(const Eigen::VectorXd& x, double t, double t_to) const {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
        const Eigen::VectorXd& lam = es.eigenvalues();
        Eigen::VectorXd y = es.eigenvectors().transpose() * (x - (1.0 - t) * means[0]);
        for (int i = 0; i < dim(); ++i) {
            double st = (1.0 - t) * (1.0 - t) * lam[i] + t * t;
            double sto = (1.0 - t_to) * (1.0 - t_to) * lam[i] + t_to * t_to;
            y[i] *= std::sqrt(sto / st);
        }
        return (1.0 - t_to) * means[0] + es.eigenvectors() * y;
    }
};

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> to_std(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

WorldKind world_kind_from_string(const std::string& s) {
    if (s == "gaussian_ar") return WorldKind::gaussian_ar;
    if (s == "branching_gmm") return WorldKind::branching_gmm;
    throw TensorError("unknown world kind '" + s + "'");
}

std::string to_string(WorldKind k) {
    return k == WorldKind::gaussian_ar ? "gaussian_ar" : "branching_gmm";
}

WorldSpec WorldSpec::gaussian_ar_default() {
    WorldSpec w;
    w.kind = WorldKind::gaussian_ar;
    w.frame_dim = 2;
    w.num_frames = 8;
    w.a = 0.9;
    w.s = 0.3;
    w.s0 = 1.0;
    return w;
}

WorldSpec WorldSpec::branching_gmm_default() {
    WorldSpec w;
    w.kind = WorldKind::branching_gmm;
    w.frame_dim = 2;
    w.num_frames = 8;
    w.a = 0.8;
    w.s = 0.15;
    w.mu = 1.0;
    return w;
}

void WorldSpec::validate() const {
    if (std::abs(a) >= 1.0) throw TensorError("WorldSpec: |a| must be < 1");
    if (s < 0.0 || s0 < 0.0 || mu <= 0.0) throw TensorError("WorldSpec: s, s0 >= 0 and mu > 0 required");
    if (frame_dim < 1 || num_frames < 1) throw TensorError("WorldSpec: positive dims required");
    if (chunk < 1 || num_frames % chunk != 0) {
        throw TensorError("WorldSpec: chunk must divide num_frames");
    }
    if (kind == WorldKind::branching_gmm && chunk != 1) {
        throw TensorError("WorldSpec: branching_gmm oracles support chunk = 1 only");
    }
}

std::vector<double> SequenceBatch::unit_vec(int b, int unit, int chunk) const {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(chunk) * frame_dim);
    for (int f = unit * chunk; f < (unit + 1) * chunk; ++f) {
        const double* p = frame(b, f);
        out.insert(out.end(), p, p + frame_dim);
    }
    return out;
}

std::vector<double> SequenceBatch::prefix_vec(int b, int unit, int chunk) const {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(unit) * chunk * frame_dim);
    for (int f = 0; f < unit * chunk; ++f) {
        const double* p = frame(b, f);
        out.insert(out.end(), p, p + frame_dim);
    }
    return out;
}

SequenceBatch sample_sequences(const WorldSpec& spec, int batch, uint64_t seed) {
    spec.validate();
    if (batch < 1) throw TensorError("sample_sequences: batch must be >= 1");
    SequenceBatch out;
    out.batch = batch;
    out.num_frames = spec.num_frames;
    out.frame_dim = spec.frame_dim;
    out.seed = seed;
    out.data.assign(static_cast<size_t>(batch) * spec.num_frames * spec.frame_dim, 0.0);
    Rng rng(seed);
    for (int b = 0; b < batch; ++b) {
        for (int i = 0; i < spec.num_frames; ++i) {
            double* cur = out.frame(b, i);
            const double* prev = i > 0 ? out.frame(b, i - 1) : nullptr;
            double offset = 0.0;
            if (spec.kind == WorldKind::branching_gmm) {
                offset = rng.uniform() < 0.5 ? spec.mu : -spec.mu;
            }
            double innov = spec.frame_std(i);
            for (int q = 0; q < spec.frame_dim; ++q) {
                double mean = prev ? spec.a * prev[q] : 0.0;
                if (q == 0) mean += offset;
                cur[q] = mean + innov * rng.normal();
            }
        }
    }
    return out;
}

void write_sequence_csv(const std::string& path, const SequenceBatch& batch) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw TensorError("cannot open '" + path + "' for writing");
    f << "seq_id,frame_idx";
    for (int q = 0; q < batch.frame_dim; ++q) f << ",dim_" << q;
    f << "\n";
    f.precision(17);
    for (int b = 0; b < batch.batch; ++b) {
        for (int i = 0; i < batch.num_frames; ++i) {
            f << b << "," << i;
            const double* p = batch.frame(b, i);
            for (int q = 0; q < batch.frame_dim; ++q) f << "," << p[q];
            f << "\n";
        }
    }
}

// ---- AnalyticOracle --------------------------------------------------------

AnalyticOracle::AnalyticOracle(WorldSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
}

Eigen::MatrixXd AnalyticOracle::chain_cov(int len, double first_std) const {
    // L L^T with L lower-triangular: L(p, r) = a^(p-r) * std_r
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(len, len);
    for (int p = 0; p < len; ++p) {
        for (int r = 0; r <= p; ++r) {
            double sd = (r == 0) ? first_std : spec_.s;
            L(p, r) = std::pow(spec_.a, p - r) * sd;
        }
    }
    return L * L.transpose();
}

namespace {

// per-dim decomposition of a unit vector laid out frame-major
Eigen::VectorXd extract_dim(const std::vector<double>& unit, int c, int d, int q) {
    Eigen::VectorXd out(c);
    for (int p = 0; p < c; ++p) out[p] = unit[static_cast<size_t>(p) * d + q];
    return out;
}

void insert_dim(std::vector<double>& unit, const Eigen::VectorXd& v, int c, int d, int q) {
    for (int p = 0; p < c; ++p) unit[static_cast<size_t>(p) * d + q] = v[p];
}

}  // namespace

AnalyticOracle::GaussianCond AnalyticOracle::unit_gaussian(const std::vector<double>& prefix,
                                                           int dim) const {
    int c = spec_.chunk;
    bool first_unit = prefix.empty();
    double xprev = first_unit ? 0.0 : prefix[prefix.size() - spec_.frame_dim + dim];
    GaussianCond g;
    g.mean.resize(c);
    for (int p = 0; p < c; ++p) g.mean[p] = std::pow(spec_.a, p + 1) * xprev;
    if (first_unit) g.mean.setZero();
    // innovation std of the unit's first frame: s0 for the very first frame
    // of a gaussian_ar sequence, s otherwise
    double first_std = first_unit ? spec_.frame_std(0) : spec_.s;
    g.cov = chain_cov(c, first_std);
    return g;
}

std::pair<double, double> AnalyticOracle::mixture_modes(const std::vector<double>& prefix) const {
    if (spec_.kind != WorldKind::branching_gmm) {
        throw TensorError("mixture_modes: world is not branching_gmm");
    }
    double xprev = prefix.empty() ? 0.0 : prefix[prefix.size() - spec_.frame_dim];
    double center = spec_.a * xprev;
    return {center + spec_.mu, center - spec_.mu};
}

Eigen::VectorXd AnalyticOracle::cond_mean_clean(const std::vector<double>& prefix) const {
    int c = spec_.chunk, d = spec_.frame_dim;
    Eigen::VectorXd out(static_cast<Eigen::Index>(c) * d);
    for (int q = 0; q < d; ++q) {
        auto g = unit_gaussian(prefix, q);
        for (int p = 0; p < c; ++p) out[static_cast<Eigen::Index>(p) * d + q] = g.mean[p];
    }
    return out;
}

Eigen::MatrixXd AnalyticOracle::cond_clean_cov(const std::vector<double>& prefix) const {
    if (spec_.kind != WorldKind::gaussian_ar) {
        throw TensorError("cond_clean_cov: world is not gaussian_ar");
    }
    int c = spec_.chunk, d = spec_.frame_dim;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c) * d,
                                                static_cast<Eigen::Index>(c) * d);
    for (int q = 0; q < d; ++q) {
        auto g = unit_gaussian(prefix, q);
        for (int p = 0; p < c; ++p) {
            for (int r = 0; r < c; ++r) out(p * d + q, r * d + q) = g.cov(p, r);
        }
    }
    return out;
}

namespace {

std::vector<GaussMixture> make_unit_mixtures(const WorldSpec& spec,
                                             const std::vector<double>& prefix,
                                             const std::function<Eigen::MatrixXd(int, double)>& cov_fn) {
    int c = spec.chunk, d = spec.frame_dim;
    bool first_unit = prefix.empty();
    std::vector<GaussMixture> out(d);
    for (int q = 0; q < d; ++q) {
        double xprev = first_unit ? 0.0 : prefix[prefix.size() - d + q];
        Eigen::VectorXd mean(c);
        for (int p = 0; p < c; ++p) mean[p] = std::pow(spec.a, p + 1) * xprev;
        if (first_unit) mean.setZero();
        double first_std = (spec.kind == WorldKind::gaussian_ar && first_unit) ? spec.s0 : spec.s;
        GaussMixture& m = out[q];
        m.cov = cov_fn(c, first_std);
        if (spec.kind == WorldKind::branching_gmm && q == 0) {
            Eigen::VectorXd up = mean, dn = mean;
            up[0] += spec.mu;
            dn[0] -= spec.mu;
            m.means = {up, dn};
            m.logw = {std::log(0.5), std::log(0.5)};
        } else {
            m.means = {mean};
            m.logw = {0.0};
        }
    }
    return out;
}

}  // namespace

std::vector<double> AnalyticOracle::cond_velocity(const std::vector<double>& prefix,
                                                  const std::vector<double>& x_t, double t) const {
    if (t < 0.0 || t > 1.0) throw TensorError("cond_velocity: t out of [0,1]");
    int c = spec_.chunk, d = spec_.frame_dim;
    auto mixes = make_unit_mixtures(spec_, prefix,
                                    [this](int len, double fs) { return chain_cov(len, fs); });
    std::vector<double> out(x_t.size());
    for (int q = 0; q < d; ++q) {
        insert_dim(out, mixes[q].velocity(extract_dim(x_t, c, d, q), t), c, d, q);
    }
    return out;
}

std::vector<double> AnalyticOracle::cond_score(const std::vector<double>& prefix,
                                               const std::vector<double>& x_t, double t) const {
    if (t <= 0.0 || t > 1.0) throw TensorError("cond_score: t out of (0,1]");
    int c = spec_.chunk, d = spec_.frame_dim;
    auto mixes = make_unit_mixtures(spec_, prefix,
                                    [this](int len, double fs) { return chain_cov(len, fs); });
    std::vector<double> out(x_t.size());
    for (int q = 0; q < d; ++q) {
        insert_dim(out, mixes[q].score(extract_dim(x_t, c, d, q), t), c, d, q);
    }
    return out;
}

std::vector<double> AnalyticOracle::cond_expectation(const std::vector<double>& prefix,
                                                     const std::vector<double>& x_t,
                                                     double t) const {
    if (t < 0.0 || t > 1.0) throw TensorError("cond_expectation: t out of [0,1]");
    int c = spec_.chunk, d = spec_.frame_dim;
    auto mixes = make_unit_mixtures(spec_, prefix,
                                    [this](int len, double fs) { return chain_cov(len, fs); });
    std::vector<double> out(x_t.size());
    for (int q = 0; q < d; ++q) {
        insert_dim(out, mixes[q].posterior_mean(extract_dim(x_t, c, d, q), t), c, d, q);
    }
    return out;
}

double AnalyticOracle::cond_log_density(const std::vector<double>& prefix,
                                        const std::vector<double>& x_t, double t) const {
    int c = spec_.chunk, d = spec_.frame_dim;
    auto mixes = make_unit_mixtures(spec_, prefix,
                                    [this](int len, double fs) { return chain_cov(len, fs); });
    double lp = 0.0;
    for (int q = 0; q < d; ++q) {
        lp += mixes[q].log_density(extract_dim(x_t, c, d, q), t);
    }
    return lp;
}

std::vector<double> AnalyticOracle::flow_map(const std::vector<double>& prefix,
                                             const std::vector<double>& x_t, double t,
                                             double t_to, int refine_steps) const {
    if (t < 0.0 || t > 1.0 || t_to < 0.0 || t_to > t) {
        throw TensorError("flow_map: need 0 <= t_to <= t <= 1");
    }
    if (t == t_to) return x_t;
    int c = spec_.chunk, d = spec_.frame_dim;
    if (spec_.kind == WorldKind::gaussian_ar) {
        auto mixes = make_unit_mixtures(spec_, prefix,
                                        [this](int len, double fs) { return chain_cov(len, fs); });
        std::vector<double> out(x_t.size());
        for (int q = 0; q < d; ++q) {
            insert_dim(out, mixes[q].gaussian_flow(extract_dim(x_t, c, d, q), t, t_to), c, d, q);
        }
        return out;
    }
    // mixture world: integrate the oracle velocity
    DiffusionState st{x_t, t};
    auto vf = [&](const std::vector<double>& x, double tt) { return cond_velocity(prefix, x, tt); };
    double h = (t - t_to) / static_cast<double>(refine_steps);
    for (int j = 0; j < refine_steps; ++j) {
        double t_next = (j + 1 == refine_steps) ? t_to : t - h * (j + 1);
        st = pf_ode_step(vf, st, t_next, OdeMethod::heun);
    }
    return st.x;
}

std::vector<double> AnalyticOracle::sample_unit(const std::vector<double>& prefix,
                                                Rng& rng) const {
    int c = spec_.chunk, d = spec_.frame_dim;
    bool first_unit = prefix.empty();
    std::vector<double> prev(d, 0.0);
    if (!first_unit) {
        prev.assign(prefix.end() - d, prefix.end());
    }
    std::vector<double> out(static_cast<size_t>(c) * d);
    for (int p = 0; p < c; ++p) {
        double offset = 0.0;
        if (spec_.kind == WorldKind::branching_gmm) {
            offset = rng.uniform() < 0.5 ? spec_.mu : -spec_.mu;
        }
        double innov = (first_unit && p == 0) ? spec_.frame_std(0) : spec_.s;
        bool base = first_unit && p == 0;
        for (int q = 0; q < d; ++q) {
            double mean = base ? 0.0 : spec_.a * prev[q];
            if (q == 0) mean += offset;
            out[static_cast<size_t>(p) * d + q] = mean + innov * rng.normal();
            prev[q] = out[static_cast<size_t>(p) * d + q];
        }
    }
    return out;
}

const std::vector<Eigen::VectorXd>& AnalyticOracle::joint_dim0_means() const {
    if (!joint_means_cache_.empty()) return joint_means_cache_;
    int n = spec_.num_frames;
    int count = 1 << n;
    joint_means_cache_.reserve(count);
    for (int mask = 0; mask < count; ++mask) {
        Eigen::VectorXd m(n);
        double prev = 0.0;
        for (int i = 0; i < n; ++i) {
            double b = (mask >> i) & 1 ? spec_.mu : -spec_.mu;
            prev = spec_.a * prev + b;
            m[i] = prev;
        }
        joint_means_cache_.push_back(std::move(m));
    }
    return joint_means_cache_;
}

namespace {

GaussMixture joint_mixture_for_dim(const WorldSpec& spec, const AnalyticOracle& oracle,
                                   const Eigen::MatrixXd& cov,
                                   const std::vector<Eigen::VectorXd>* dim0_means, int q) {
    (void)oracle;
    GaussMixture m;
    m.cov = cov;
    if (spec.kind == WorldKind::branching_gmm && q == 0) {
        m.means = *dim0_means;
        m.logw.assign(m.means.size(), -std::log(static_cast<double>(m.means.size())));
    } else {
        m.means = {Eigen::VectorXd::Zero(cov.rows())};
        m.logw = {0.0};
    }
    return m;
}

}  // namespace

std::vector<double> AnalyticOracle::joint_velocity(const std::vector<double>& seq_x_t,
                                                   double t) const {
    int n = spec_.num_frames, d = spec_.frame_dim;
    if (seq_x_t.size() != static_cast<size_t>(n) * d) {
        throw ShapeError("joint_velocity: bad sequence length");
    }
    Eigen::MatrixXd cov = chain_cov(n, spec_.frame_std(0));
    const auto* dm = spec_.kind == WorldKind::branching_gmm ? &joint_dim0_means() : nullptr;
    std::vector<double> out(seq_x_t.size());
    for (int q = 0; q < d; ++q) {
        GaussMixture m = joint_mixture_for_dim(spec_, *this, cov, dm, q);
        insert_dim(out, m.velocity(extract_dim(seq_x_t, n, d, q), t), n, d, q);
    }
    return out;
}

std::vector<double> AnalyticOracle::joint_score(const std::vector<double>& seq_x_t,
                                                double t) const {
    int n = spec_.num_frames, d = spec_.frame_dim;
    if (seq_x_t.size() != static_cast<size_t>(n) * d) {
        throw ShapeError("joint_score: bad sequence length");
    }
    Eigen::MatrixXd cov = chain_cov(n, spec_.frame_std(0));
    const auto* dm = spec_.kind == WorldKind::branching_gmm ? &joint_dim0_means() : nullptr;
    std::vector<double> out(seq_x_t.size());
    for (int q = 0; q < d; ++q) {
        GaussMixture m = joint_mixture_for_dim(spec_, *this, cov, dm, q);
        insert_dim(out, m.score(extract_dim(seq_x_t, n, d, q), t), n, d, q);
    }
    return out;
}

}  // namespace arflow
