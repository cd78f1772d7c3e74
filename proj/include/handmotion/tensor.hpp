#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace handmotion {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Raised when a forward operation produces NaN/Inf. Training loops catch
// this to abort with diagnostics instead of silently diverging.
struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Padding { Same, Valid };
enum class NormMode { Batch, Frozen };

class Tape;

// Lightweight handle to a node on a Tape. Values are immutable after
// creation; gradients are filled in by Tape::backward.
class Tensor {
public:
    Tensor() = default;

    const Shape& shape() const;
    const std::vector<double>& values() const;
    const std::vector<double>& grad() const;
    double scalar() const;
    std::int64_t size() const;
    bool defined() const { return tape_ != nullptr; }
    int id() const { return id_; }

private:
    friend class Tape;
    Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in creation order, so every
// node's parents precede it and backward runs in reverse index order.
// One tape is owned by exactly one training step/run.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad);
    Tensor constant(Shape shape, std::vector<double> values);
    Tensor scalar_const(double v);

    Tensor matmul(Tensor a, Tensor b);
    Tensor conv2d(Tensor x, Tensor w, Tensor bias, Padding pad);
    // Batch normalization over axis 0 for [N,F] input or axes (0,2,3) for
    // [N,C,H,W]. In Batch mode the running statistics are updated in place;
    // in Frozen mode they are read and the output is batch-independent.
    Tensor batchnorm(Tensor x, Tensor gamma, Tensor beta,
                     std::vector<double>& running_mean,
                     std::vector<double>& running_var,
                     NormMode mode, double momentum = 0.1, double eps = 1e-5);
    Tensor leaky_relu(Tensor x, double alpha = 0.01);
    Tensor sigmoid(Tensor x);
    Tensor tanh_op(Tensor x);
    Tensor add(Tensor a, Tensor b);
    Tensor sub(Tensor a, Tensor b);
    Tensor mul(Tensor a, Tensor b);
    Tensor add_bias(Tensor x, Tensor bias); // [N,F]+[F] or [N,C,H,W]+[C]
    Tensor abs_op(Tensor x);
    Tensor square(Tensor x);
    Tensor mean(Tensor x);
    Tensor sum(Tensor x);
    Tensor scale(Tensor x, double k);
    Tensor add_scalar(Tensor x, double k);
    Tensor reshape(Tensor x, Shape shape);
    Tensor concat(const std::vector<Tensor>& parts); // along axis 0
    Tensor slice_rows(Tensor x, int r0, int r1);     // axis 0
    Tensor slice_cols(Tensor x, int c0, int c1);     // axis 1 of a 2D tensor
    Tensor detach(Tensor x);

    // Extension point for composite primitives with hand-derived backward.
    // `back` receives the tape and the new node's id; it must accumulate
    // into the parents' grad buffers.
    Tensor custom(Shape shape, std::vector<double> values,
                  std::vector<Tensor> parents,
                  std::function<void(Tape&, int)> back);

    // Accumulates gradients for every reachable node that requires grad.
    // Leaf gradients persist across calls (repeated backward accumulates);
    // interior gradients are recomputed from scratch each call.
    void backward(Tensor loss);
    void zero_grad();

    std::size_t num_nodes() const { return nodes_.size(); }

    // node access (used by op implementations and custom backwards)
    const Shape& shape_of(int id) const { return nodes_[id].shape; }
    const std::vector<double>& values_of(int id) const { return nodes_[id].value; }
    std::vector<double>& grad_of(int id);

private:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        std::vector<int> parents;
        std::function<void(Tape&, int)> back;
        bool requires_grad = false;
        bool is_leaf = false;
    };

    Tensor make(Shape shape, std::vector<double> values, std::vector<int> parents,
                std::function<void(Tape&, int)> back);
    void check_finite(const std::vector<double>& values, const char* op) const;
    bool any_requires_grad(const std::vector<int>& parents) const;

    std::vector<Node> nodes_;

    friend class Tensor;
};

} // namespace handmotion
