#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace fedshade::ad {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;

// One node of the computation graph. Nodes are reference counted through
// Tensor handles; the vjp callback produces gradients for each parent,
// expressed with Tensor ops so that backward itself is differentiable.
struct Node {
    std::vector<double> value;
    Shape shape;
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<std::vector<Tensor>(const Tensor& upstream)> vjp;
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor from(std::vector<double> v, Shape s, bool requires_grad = false);
    static Tensor zeros(Shape s, bool requires_grad = false);
    static Tensor full(Shape s, double v, bool requires_grad = false);
    static Tensor scalar(double v);
    static Tensor randn(const Shape& s, std::mt19937_64& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& raw() { return node_->value; }  // in-place parameter updates
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    double item() const;
    double max_abs() const;
    double max_value() const;
    bool all_finite() const;

    Tensor detach() const;
    Tensor clone() const;  // deep copy, detached leaf

    Node* node() const { return node_.get(); }

  private:
    std::shared_ptr<Node> node_;
};

// Thread-local flag; when disabled, ops do not record the graph.
bool grad_enabled();
void set_grad_enabled(bool on);
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev); }
};

// ---- elementwise (numpy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape s);
Tensor broadcast_to(const Tensor& a, const Shape& s);
Tensor sum_to(const Tensor& a, const Shape& s);
Tensor sum(const Tensor& a, std::vector<int64_t> axes, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mean(const Tensor& a, std::vector<int64_t> axes, bool keepdim = false);
Tensor slice(const Tensor& a, const std::vector<int64_t>& starts,
             const std::vector<int64_t>& ends);
Tensor scatter_into(const Tensor& g, const Shape& full_shape,
                    const std::vector<int64_t>& starts);
Tensor transpose_last2(const Tensor& a);

// ---- linear algebra / convolution ----
// bmm: [m,k]x[k,n], [B,m,k]x[B,k,n], or mixed 2D/3D with batch broadcast.
Tensor bmm(const Tensor& a, const Tensor& b);
Tensor im2col(const Tensor& x, int64_t kh, int64_t kw, int64_t stride, int64_t pad);
Tensor col2im(const Tensor& cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
              int64_t stride, int64_t pad);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride,
              int64_t pad);
// weight layout [Cin, Cout, kh, kw]; output size (H-1)*stride - 2*pad + kh
Tensor conv_transpose2d(const Tensor& y, const Tensor& w, const Tensor& bias, int64_t stride,
                        int64_t pad);
Tensor avg_pool2d(const Tensor& x, int64_t k);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[B,I] w[O,I] b[O]

// ---- composites ----
Tensor softmax(const Tensor& logits, int64_t axis);
Tensor log_softmax(const Tensor& logits, int64_t axis);
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);

// Reverse-mode gradient of `output` (scalar unless grad_output given) w.r.t.
// `inputs`. With create_graph the returned tensors carry their own graph and
// can be differentiated again.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_graph = false, Tensor grad_output = {});

}  // namespace fedshade::ad
