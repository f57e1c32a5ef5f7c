#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace gift {

class Tensor;

namespace detail {

/// Shared storage plus reverse-mode tape node. Ops that see a grad-requiring
/// input record parent links and a backward closure; backward() replays the
/// closures in reverse topological order.
struct TensorNode {
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    std::vector<double> grad;   // same length as data once touched by backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn; // empty for leaves

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

} // namespace detail

/// Dense row-major tensor of 64-bit floats with optional gradient tracking.
/// Copying a Tensor copies the handle, not the storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::int64_t> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<std::int64_t> shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor scalar_value(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::int64_t>& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    std::int64_t dim(int i) const;
    std::int64_t numel() const;
    bool requires_grad() const;

    double* data();
    const double* data() const;

    /// Gradient buffer; null until backward() has touched this tensor.
    const double* grad_data() const;
    std::vector<double>& grad();
    void zero_grad();

    double at(std::initializer_list<std::int64_t> idx) const;
    void set(std::initializer_list<std::int64_t> idx, double v);
    double scalar() const;

    /// Value copy detached from the tape.
    Tensor detach() const;

    bool all_finite() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// ---- layer primitives -----------------------------------------------------

/// 2-D cross-correlation. input [N,C,H,W], weight [OC,IC,kh,kw], bias [OC].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding);

/// Per (sample, channel) plane normalization followed by a per-channel affine.
/// input [N,C,H,W], gamma/beta [C]. When mask (same spatial extents, [N,1,H,W])
/// is given, the plane statistics are computed over mask>0.5 cells only; the
/// normalization is still applied to every cell.
Tensor instance_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                     double eps, const Tensor& mask = Tensor());

Tensor relu(const Tensor& input);

/// Average pooling, no padding. input [N,C,H,W].
Tensor avg_pool2d(const Tensor& input, int window, int stride);

/// Matrix product [M,K] x [K,N] -> [M,N].
Tensor matmul(const Tensor& a, const Tensor& b);

/// [M,N] -> [N,M].
Tensor transpose2d(const Tensor& a);

/// Four-neighbor bilinear interpolation of map [C,H,W] at continuous (x, y)
/// with x along width. Points outside [0,W-1]x[0,H-1] yield a zero vector and
/// set *valid to false.
Tensor bilinear_sample(const Tensor& map, double x, double y, bool* valid = nullptr);

/// Stencil convolution over a feature grid f [A,B,IC] with weight [OC,IC,3,3]
/// and bias [OC]: out[a,b,i] = sum_{da,db in {-1,0,1}} f[a+da, b+db]^T
/// weight[i,:,da+1,db+1] + bias[i]. Reads outside the grid contribute zero.
/// No nonlinearity is applied here.
Tensor group_stencil_conv(const Tensor& f, const Tensor& weight, const Tensor& bias);

// ---- elementwise / reduction glue ------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor sum_all(const Tensor& a);            // -> [1]
Tensor sqrt_elem(const Tensor& a);          // d/dx at x=0 taken as 0
Tensor div_by_scalar(const Tensor& a, const Tensor& s); // s has numel 1
Tensor stack_rows(const std::vector<Tensor>& rows);     // k tensors [C] -> [k,C]
Tensor reshape(const Tensor& a, std::vector<std::int64_t> new_shape);
Tensor max_over_rows(const Tensor& a);      // [R,C] -> [C], first-max ties

/// Euclidean distance between two same-shape tensors, as a [1] tensor.
Tensor l2_distance(const Tensor& a, const Tensor& b);

/// v / ||v||2. A zero vector is returned unchanged and flagged degenerate.
Tensor l2_normalize(const Tensor& v, bool* degenerate = nullptr);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into the grad
/// buffers of every reachable grad-requiring tensor; repeated calls accumulate
/// unless the buffers are zeroed.
void backward(const Tensor& loss);

} // namespace gift
