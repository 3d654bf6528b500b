#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace arflow {

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : TensorError {
    using TensorError::TensorError;
};
struct NumericError : TensorError {
    using TensorError::TensorError;
};

// Dense f64 matrix with reverse-mode gradient tracking. Everything is
// treated as 2-D (rows x cols); scalars are 1x1, frame vectors 1xd.
// Each forward call builds a fresh graph; backward() walks it once and
// accumulates into the grad buffers of requires_grad leaves.
class Tensor {
public:
    struct Node {
        size_t rows = 0, cols = 0;
        std::vector<double> values;
        std::vector<double> grad;  // allocated lazily, same size as values
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backprop;  // pushes this->grad into parents

        size_t size() const { return rows * cols; }
        void ensure_grad() {
            if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(size_t rows, size_t cols, bool requires_grad = false);
    static Tensor full(size_t rows, size_t cols, double v, bool requires_grad = false);
    static Tensor from(size_t rows, size_t cols, std::vector<double> values,
                       bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor row(const std::vector<double>& values, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    size_t rows() const { return n_->rows; }
    size_t cols() const { return n_->cols; }
    size_t size() const { return n_->size(); }
    bool requires_grad() const { return n_->requires_grad; }

    const std::vector<double>& values() const { return n_->values; }
    std::vector<double>& mutable_values() { return n_->values; }
    const std::vector<double>& grad() const;
    bool has_grad() const { return n_ && n_->grad.size() == n_->values.size(); }
    void zero_grad() {
        if (n_) n_->grad.assign(n_->values.size(), 0.0);
    }

    double item() const;
    double at(size_t r, size_t c) const { return n_->values[r * n_->cols + c]; }

    // Stops gradient flow: same values, no graph history.
    Tensor detach() const;

    std::shared_ptr<Node> node() const { return n_; }

    // Runs reverse-mode accumulation from a scalar output. Repeated calls
    // without zeroing accumulate.
    void backward() const;

private:
    std::shared_ptr<Node> n_;
};

// ---- differentiable ops ------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// add: equal shapes, or b a 1xC row broadcast over a's rows (bias add)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor silu(const Tensor& a);  // x * sigmoid(x)
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reduce_mean(const Tensor& a);        // -> scalar
Tensor reduce_sum(const Tensor& a);         // -> scalar
Tensor squared_error(const Tensor& a, const Tensor& b);  // elementwise (a-b)^2
// Row lookup into an embedding table [V x E] -> [B x E]; gradients scatter.
Tensor embed_rows(const Tensor& table, const std::vector<int>& indices);

// ---- parameters ---------------------------------------------------------

// Named map of trainable tensors with stable (insertion) iteration order.
class ParamSet {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }
    size_t num_scalars() const;
    void zero_grads();

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> index_;
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// SGD / Adam with per-parameter state. step() consumes and zeroes grads.
class Optimizer {
public:
    enum class Kind { sgd, adam };

    static Optimizer sgd() { return Optimizer(Kind::sgd, {}); }
    static Optimizer adam(AdamHyper h = {}) { return Optimizer(Kind::adam, h); }

    void step(ParamSet& params, double lr);

    Kind kind() const { return kind_; }
    uint64_t steps_taken() const { return t_; }
    const AdamHyper& hyper() const { return hyper_; }

    // exposed for checkpointing
    struct Slot {
        std::vector<double> m, v;
    };
    std::unordered_map<std::string, Slot>& state() { return state_; }
    void set_steps_taken(uint64_t t) { t_ = t; }

private:
    Optimizer(Kind k, AdamHyper h) : kind_(k), hyper_(h) {}
    Kind kind_;
    AdamHyper hyper_;
    uint64_t t_ = 0;
    std::unordered_map<std::string, Slot> state_;
};

// Exponential moving average shadow of a ParamSet: shadow <- b*shadow + (1-b)*src.
class EmaParamSet {
public:
    EmaParamSet() = default;
    EmaParamSet(double beta, const ParamSet& source);

    void update(const ParamSet& source);
    const ParamSet& shadow() const { return shadow_; }
    ParamSet& shadow() { return shadow_; }
    double beta() const { return beta_; }

private:
    double beta_ = 0.99;
    ParamSet shadow_;
};

// ---- checkpoint container ------------------------------------------------
// Self-describing binary: magic "ARFLOWCK", version u32, little-endian
// payload of named (shape, f64 data) entries plus optional optimizer state.

void save_checkpoint(const std::string& path, const ParamSet& params,
                     const Optimizer* opt = nullptr);
void load_checkpoint(const std::string& path, ParamSet& params,
                     Optimizer* opt = nullptr);

}  // namespace arflow
