#include "arflow/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

namespace arflow {

namespace {

using MapM = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMapM = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

std::string shape_str(const Tensor& t) {
    return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

std::shared_ptr<Tensor::Node> make_node(size_t r, size_t c) {
    auto n = std::make_shared<Tensor::Node>();
    n->rows = r;
    n->cols = c;
    n->values.assign(r * c, 0.0);
    return n;
}

// Marks the result as requiring grad if any parent does, and records parents.
Tensor finish(std::shared_ptr<Tensor::Node> n, std::vector<Tensor> parents,
              std::function<void(Tensor::Node&)> backprop, const char* op) {
    check_finite(n->values, op);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(std::move(n));
}

}  // namespace

Tensor Tensor::zeros(size_t rows, size_t cols, bool requires_grad) {
    auto n = make_node(rows, cols);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(size_t rows, size_t cols, double v, bool requires_grad) {
    auto n = make_node(rows, cols);
    std::fill(n->values.begin(), n->values.end(), v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from(size_t rows, size_t cols, std::vector<double> values, bool requires_grad) {
    if (values.size() != rows * cols) {
        throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
    check_finite(values, "from");
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from(1, 1, {v}, requires_grad);
}

Tensor Tensor::row(const std::vector<double>& values, bool requires_grad) {
    return from(1, values.size(), values, requires_grad);
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw TensorError("grad requested but not populated");
    return n_->grad;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(*this));
    return n_->values[0];
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<Node>();
    n->rows = n_->rows;
    n->cols = n_->cols;
    n->values = n_->values;
    n->requires_grad = false;
    return Tensor(std::move(n));
}

void Tensor::backward() const {
    if (!n_) throw TensorError("backward on empty tensor");
    if (size() != 1) throw TensorError("backward requires a scalar output");
    if (!n_->requires_grad) throw TensorError("backward on a tensor with no tape");

    // topological order over the recorded graph (iterative DFS post-order)
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    {
        std::vector<std::pair<Node*, size_t>> dfs{{n_.get(), 0}};
        seen.insert(n_.get());
        while (!dfs.empty()) {
            auto& [node, idx] = dfs.back();
            if (idx < node->parents.size()) {
                Node* p = node->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    dfs.push_back({p, 0});
                }
            } else {
                order.push_back(node);
                dfs.pop_back();
            }
        }
    }

    for (Node* node : order) node->ensure_grad();
    n_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
    }
    auto n = make_node(a.rows(), b.cols());
    CMapM A(a.values().data(), a.rows(), a.cols());
    CMapM B(b.values().data(), b.rows(), b.cols());
    MapM C(n->values.data(), n->rows, n->cols);
    C.noalias() = A * B;

    auto an = a.node();
    auto bn = b.node();
    return finish(
        std::move(n), {a, b},
        [an, bn](Tensor::Node& out) {
            CMapM G(out.grad.data(), out.rows, out.cols);
            if (an->requires_grad) {
                an->ensure_grad();
                CMapM B(bn->values.data(), bn->rows, bn->cols);
                MapM GA(an->grad.data(), an->rows, an->cols);
                GA.noalias() += G * B.transpose();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                CMapM A(an->values.data(), an->rows, an->cols);
                MapM GB(bn->grad.data(), bn->rows, bn->cols);
                GB.noalias() += A.transpose() * G;
            }
        },
        "matmul");
}

Tensor add(const Tensor& a, const Tensor& b) {
    bool broadcast = (b.rows() == 1 && b.cols() == a.cols() && a.rows() > 1);
    if (!broadcast && (a.rows() != b.rows() || a.cols() != b.cols())) {
        throw ShapeError("add: " + shape_str(a) + " vs " + shape_str(b));
    }
    auto n = make_node(a.rows(), a.cols());
    const auto& av = a.values();
    const auto& bv = b.values();
    size_t c = a.cols();
    for (size_t i = 0; i < n->values.size(); ++i) {
        n->values[i] = av[i] + (broadcast ? bv[i % c] : bv[i]);
    }
    auto an = a.node();
    auto bn = b.node();
    return finish(
        std::move(n), {a, b},
        [an, bn, broadcast, c](Tensor::Node& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                if (broadcast) {
                    for (size_t i = 0; i < out.grad.size(); ++i) bn->grad[i % c] += out.grad[i];
                } else {
                    for (size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] += out.grad[i];
                }
            }
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("sub: " + shape_str(a) + " vs " + shape_str(b));
    }
    auto n = make_node(a.rows(), a.cols());
    for (size_t i = 0; i < n->values.size(); ++i) n->values[i] = a.values()[i] - b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    return finish(
        std::move(n), {a, b},
        [an, bn](Tensor::Node& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] -= out.grad[i];
            }
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("mul: " + shape_str(a) + " vs " + shape_str(b));
    }
    auto n = make_node(a.rows(), a.cols());
    for (size_t i = 0; i < n->values.size(); ++i) n->values[i] = a.values()[i] * b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    return finish(
        std::move(n), {a, b},
        [an, bn](Tensor::Node& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i)
                    an->grad[i] += out.grad[i] * bn->values[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i)
                    bn->grad[i] += out.grad[i] * an->values[i];
            }
        },
        "mul");
}

Tensor scale(const Tensor& a, double cfac) {
    auto n = make_node(a.rows(), a.cols());
    for (size_t i = 0; i < n->values.size(); ++i) n->values[i] = a.values()[i] * cfac;
    auto an = a.node();
    return finish(
        std::move(n), {a},
        [an, cfac](Tensor::Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i] * cfac;
        },
        "scale");
}

Tensor silu(const Tensor& a) {
    auto n = make_node(a.rows(), a.cols());
    for (size_t i = 0; i < n->values.size(); ++i) {
        double x = a.values()[i];
        n->values[i] = x / (1.0 + std::exp(-x));
    }
    auto an = a.node();
    return finish(
        std::move(n), {a},
        [an](Tensor::Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) {
                double x = an->values[i];
                double s = 1.0 / (1.0 + std::exp(-x));
                an->grad[i] += out.grad[i] * (s + x * s * (1.0 - s));
            }
        },
        "silu");
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    size_t rows = parts[0].rows();
    size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: mismatched row counts");
        cols += p.cols();
    }
    auto n = make_node(rows, cols);
    size_t off = 0;
    for (const auto& p : parts) {
        for (size_t r = 0; r < rows; ++r) {
            for (size_t c = 0; c < p.cols(); ++c) {
                n->values[r * cols + off + c] = p.at(r, c);
            }
        }
        off += p.cols();
    }
    std::vector<std::shared_ptr<Tensor::Node>> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    return finish(
        std::move(n), parts,
        [pnodes, cols](Tensor::Node& out) {
            size_t off = 0;
            for (auto& pn : pnodes) {
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (size_t r = 0; r < pn->rows; ++r) {
                        for (size_t c = 0; c < pn->cols; ++c) {
                            pn->grad[r * pn->cols + c] += out.grad[r * cols + off + c];
                        }
                    }
                }
                off += pn->cols;
            }
        },
        "concat_cols");
}

Tensor reduce_mean(const Tensor& a) {
    auto n = make_node(1, 1);
    double s = 0.0;
    for (double v : a.values()) s += v;
    double inv = 1.0 / static_cast<double>(a.size());
    n->values[0] = s * inv;
    auto an = a.node();
    return finish(
        std::move(n), {a},
        [an, inv](Tensor::Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (auto& g : an->grad) g += out.grad[0] * inv;
        },
        "reduce_mean");
}

Tensor reduce_sum(const Tensor& a) {
    auto n = make_node(1, 1);
    double s = 0.0;
    for (double v : a.values()) s += v;
    n->values[0] = s;
    auto an = a.node();
    return finish(
        std::move(n), {a},
        [an](Tensor::Node& out) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (auto& g : an->grad) g += out.grad[0];
        },
        "reduce_sum");
}

Tensor squared_error(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("squared_error: " + shape_str(a) + " vs " + shape_str(b));
    }
    auto n = make_node(a.rows(), a.cols());
    for (size_t i = 0; i < n->values.size(); ++i) {
        double d = a.values()[i] - b.values()[i];
        n->values[i] = d * d;
    }
    auto an = a.node();
    auto bn = b.node();
    return finish(
        std::move(n), {a, b},
        [an, bn](Tensor::Node& out) {
            for (size_t i = 0; i < out.grad.size(); ++i) {
                double d = an->values[i] - bn->values[i];
                if (an->requires_grad) {
                    an->ensure_grad();
                    an->grad[i] += out.grad[i] * 2.0 * d;
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    bn->grad[i] -= out.grad[i] * 2.0 * d;
                }
            }
        },
        "squared_error");
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& indices) {
    size_t e = table.cols();
    auto n = make_node(indices.size(), e);
    for (size_t r = 0; r < indices.size(); ++r) {
        int idx = indices[r];
        if (idx < 0 || static_cast<size_t>(idx) >= table.rows()) {
            throw ShapeError("embed_rows: index " + std::to_string(idx) + " out of range");
        }
        for (size_t c = 0; c < e; ++c) n->values[r * e + c] = table.at(idx, c);
    }
    auto tn = table.node();
    auto idxs = indices;
    return finish(
        std::move(n), {table},
        [tn, idxs, e](Tensor::Node& out) {
            if (!tn->requires_grad) return;
            tn->ensure_grad();
            for (size_t r = 0; r < idxs.size(); ++r) {
                for (size_t c = 0; c < e; ++c) {
                    tn->grad[idxs[r] * e + c] += out.grad[r * e + c];
                }
            }
        },
        "embed_rows");
}

// ---- ParamSet ---------------------------------------------------------------

Tensor& ParamSet::add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw TensorError("duplicate parameter id '" + name + "'");
    order_.push_back(name);
    return index_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamSet::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw TensorError("unknown parameter id '" + name + "'");
    return it->second;
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw TensorError("unknown parameter id '" + name + "'");
    return it->second;
}

size_t ParamSet::num_scalars() const {
    size_t n = 0;
    for (const auto& name : order_) n += at(name).size();
    return n;
}

void ParamSet::zero_grads() {
    for (const auto& name : order_) at(name).zero_grad();
}

// ---- Optimizer ----------------------------------------------------------------

void Optimizer::step(ParamSet& params, double lr) {
    if (!(lr > 0.0)) throw TensorError("opt_step: learning rate must be positive");
    for (const auto& name : params.names()) {
        if (!params.at(name).has_grad()) {
            throw TensorError("opt_step: missing gradient for parameter '" + name + "'");
        }
    }
    ++t_;
    for (const auto& name : params.names()) {
        Tensor& p = params.at(name);
        auto& vals = p.mutable_values();
        const auto& g = p.grad();
        if (kind_ == Kind::sgd) {
            for (size_t i = 0; i < vals.size(); ++i) vals[i] -= lr * g[i];
        } else {
            auto& slot = state_[name];
            if (slot.m.size() != vals.size()) {
                slot.m.assign(vals.size(), 0.0);
                slot.v.assign(vals.size(), 0.0);
            }
            double b1 = hyper_.beta1, b2 = hyper_.beta2;
            double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
            double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
            for (size_t i = 0; i < vals.size(); ++i) {
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                double mh = slot.m[i] / bc1;
                double vh = slot.v[i] / bc2;
                vals[i] -= lr * mh / (std::sqrt(vh) + hyper_.eps);
            }
        }
        p.zero_grad();
    }
}

// ---- EMA ------------------------------------------------------------------------

EmaParamSet::EmaParamSet(double beta, const ParamSet& source) : beta_(beta) {
    if (beta < 0.0 || beta >= 1.0) throw TensorError("EMA decay must lie in [0,1)");
    for (const auto& name : source.names()) {
        shadow_.add(name, source.at(name).detach());
    }
}

void EmaParamSet::update(const ParamSet& source) {
    for (const auto& name : shadow_.names()) {
        Tensor& sh = shadow_.at(name);
        const Tensor& src = source.at(name);
        if (sh.rows() != src.rows() || sh.cols() != src.cols()) {
            throw ShapeError("ema_update: shape mismatch for '" + name + "'");
        }
        auto& sv = sh.mutable_values();
        const auto& xv = src.values();
        for (size_t i = 0; i < sv.size(); ++i) sv[i] = beta_ * sv[i] + (1.0 - beta_) * xv[i];
    }
}

// ---- checkpoint io ----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'A', 'R', 'F', 'L', 'O', 'W', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw TensorError("checkpoint: truncated file");
    return v;
}
void put_vec(std::ofstream& f, const std::vector<double>& v) {
    put<uint64_t>(f, v.size());
    f.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}
std::vector<double> get_vec(std::ifstream& f) {
    auto n = get<uint64_t>(f);
    std::vector<double> v(n);
    f.read(reinterpret_cast<char*>(v.data()), sizeof(double) * n);
    if (!f) throw TensorError("checkpoint: truncated payload");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params, const Optimizer* opt) {
    static_assert(std::endian::native == std::endian::little, "checkpoint payload is little-endian");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw TensorError("checkpoint: cannot open '" + path + "' for writing");
    f.write(kMagic, sizeof(kMagic));
    put<uint32_t>(f, kVersion);
    put<uint32_t>(f, static_cast<uint32_t>(params.size()));
    for (const auto& name : params.names()) {
        const Tensor& p = params.at(name);
        put<uint32_t>(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint64_t>(f, p.rows());
        put<uint64_t>(f, p.cols());
        put_vec(f, p.values());
    }
    put<uint8_t>(f, opt ? 1 : 0);
    if (opt) {
        put<uint32_t>(f, opt->kind() == Optimizer::Kind::adam ? 1 : 0);
        put<uint64_t>(f, opt->steps_taken());
        auto& st = const_cast<Optimizer*>(opt)->state();
        put<uint32_t>(f, static_cast<uint32_t>(st.size()));
        std::vector<std::string> keys;
        for (auto& [k, _] : st) keys.push_back(k);
        std::sort(keys.begin(), keys.end());
        for (const auto& k : keys) {
            put<uint32_t>(f, static_cast<uint32_t>(k.size()));
            f.write(k.data(), static_cast<std::streamsize>(k.size()));
            put_vec(f, st[k].m);
            put_vec(f, st[k].v);
        }
    }
}

void load_checkpoint(const std::string& path, ParamSet& params, Optimizer* opt) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw TensorError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw TensorError("checkpoint: bad magic in '" + path + "'");
    }
    auto version = get<uint32_t>(f);
    if (version != kVersion) throw TensorError("checkpoint: unsupported version");
    auto count = get<uint32_t>(f);
    for (uint32_t i = 0; i < count; ++i) {
        auto len = get<uint32_t>(f);
        std::string name(len, '\0');
        f.read(name.data(), len);
        auto rows = get<uint64_t>(f);
        auto cols = get<uint64_t>(f);
        auto vals = get_vec(f);
        if (!params.contains(name)) {
            throw TensorError("checkpoint: parameter '" + name + "' not present in target set");
        }
        Tensor& p = params.at(name);
        if (p.rows() != rows || p.cols() != cols) {
            throw ShapeError("checkpoint: shape mismatch for '" + name + "'");
        }
        p.mutable_values() = std::move(vals);
    }
    auto has_opt = get<uint8_t>(f);
    if (has_opt && opt) {
        get<uint32_t>(f);  // kind recorded for inspection; target decides
        opt->set_steps_taken(get<uint64_t>(f));
        auto nslots = get<uint32_t>(f);
        for (uint32_t i = 0; i < nslots; ++i) {
            auto len = get<uint32_t>(f);
            std::string name(len, '\0');
            f.read(name.data(), len);
            Optimizer::Slot slot;
            slot.m = get_vec(f);
            slot.v = get_vec(f);
            opt->state()[name] = std::move(slot);
        }
    }
}

}  // namespace arflow
