#ifndef HEIGHTFUSION_TENSOR_HPP
#define HEIGHTFUSION_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hf {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the recorded compute graph. Leaf tensors have an empty op and
// no parents; op outputs carry a backward rule that scatters this node's
// grad into its parents' grads.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;   // allocated lazily, same length as data
    bool has_grad = false;

    std::string op;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major f64 tensor with reverse-mode autodiff. Value-semantics
// handle over a shared node; copies alias the same storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t dim(int axis) const;
    int ndim() const;
    std::int64_t numel() const;
    double item() const;  // scalar tensors only

    std::span<const double> data() const;
    std::span<double> mutable_data();  // direct parameter access (init, surgery)

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Reverse pass from a scalar root; accumulates into every
    // requires-grad leaf reachable through the recorded graph.
    void backward() const;

    detail::TensorNode* node() const { return node_.get(); }
    std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor make_op_output(std::string op, Shape shape, std::vector<double> data,
                                 std::vector<Tensor> inputs,
                                 std::function<void(detail::TensorNode&)> backward_fn);
};

// Scoped autograd switch; forwards made inside a NoGradGuard record no graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---- operations ----------------------------------------------------------

// input NCHW, weight OIHW, optional bias O. Cross-correlation.
Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias, int stride, int padding);

Tensor relu(const Tensor& input);

Tensor max_pool2d(const Tensor& input, int kernel, int stride);

// Mean over bins [floor(i*H/out), ceil((i+1)*H/out)). Requires out <= in.
Tensor adaptive_avg_pool2d(const Tensor& input, int out_h, int out_w);

// Half-pixel-center bilinear interpolation (align_corners = false).
// Upscaling only; constant planes stay constant to the last bit.
Tensor bilinear_upsample(const Tensor& input, int out_h, int out_w);

Tensor concat(const std::vector<Tensor>& inputs, int axis);

Tensor slice(const Tensor& input, int axis, std::int64_t start, std::int64_t length);

Tensor add(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& input, double factor);

Tensor sum(const Tensor& input);

// Mean over elements of 0.5*d^2/beta  (|d| <  beta)
//                       |d| - 0.5*beta (|d| >= beta), d = pred - target.
Tensor smooth_l1_loss(const Tensor& pred, const Tensor& target, double beta);

}  // namespace hf

#endif
