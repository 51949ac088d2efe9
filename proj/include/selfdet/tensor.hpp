#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

// Dense 64-bit tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Leaves own their values and
// accumulate gradients across backward passes until zero_grad(). Interior
// nodes record their inputs and a backward rule; backward() consumes the
// graph it traverses, so a second backward() through the same interior
// nodes throws instead of reusing freed state.

namespace selfdet::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class BackwardContext;
using BackwardFn = std::function<void(BackwardContext&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward_fn;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int dim(int i) const;
  std::size_t size() const;

  std::span<const double> data() const;
  /// Writable values; leaves only.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  bool is_leaf() const;
  /// Leaves only.
  void set_requires_grad(bool on);
  bool has_grad() const;
  /// Accumulated gradient (empty span when nothing has been accumulated).
  std::span<const double> grad() const;
  void zero_grad();
  const char* op() const;

  /// Reverse-mode sweep from this scalar. Throws std::logic_error for a
  /// non-scalar or already-consumed graph.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Passed to backward rules: incoming gradient, output and input values,
/// and lazily-zeroed gradient accumulators of the inputs that need one.
class BackwardContext {
 public:
  BackwardContext(Node& self, std::span<const double> grad_out) : self_(self), grad_out_(grad_out) {}

  std::span<const double> grad_out() const { return grad_out_; }
  std::span<const double> output() const { return self_.value; }
  std::span<const double> input(std::size_t i) const { return self_.parents[i]->value; }
  const Shape& input_shape(std::size_t i) const { return self_.parents[i]->shape; }
  bool needs_grad(std::size_t i) const { return self_.parents[i]->requires_grad; }
  std::span<double> grad(std::size_t i);

 private:
  Node& self_;
  std::span<const double> grad_out_;
};

/// Builds an interior node. Inputs that do not require gradients (or all
/// inputs, while a NoGradGuard is alive) are not recorded.
Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::vector<Tensor> inputs, BackwardFn backward);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Records the branch decisions of non-smooth ops (relu, max-pool, clamp,
/// smooth-L1) on this thread while alive; two evaluations with equal
/// signatures took the same piecewise-smooth branch everywhere.
class KinkRecording {
 public:
  KinkRecording();
  ~KinkRecording();
  KinkRecording(const KinkRecording&) = delete;
  KinkRecording& operator=(const KinkRecording&) = delete;

  std::uint64_t signature() const { return hash_; }
  void mix(std::uint64_t v);

 private:
  KinkRecording* previous_;
  std::uint64_t hash_ = 1469598103934665603ULL;
};

/// Active recorder on this thread, or nullptr.
KinkRecording* kink_recorder();

/// Test hook: scales the gradient flowing into every node whose op tag
/// equals `op` by 1.5, emulating a wrong backward rule. Empty disables.
void set_backward_fault(const std::string& op);
const std::string& backward_fault();

// ---- forward ops -------------------------------------------------------

Tensor detach(const Tensor& x);

/// Elementwise; a 0-d operand broadcasts against the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x (n, k) plus bias (k) on every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

/// x (C, H, W), weight (O, C, kh, kw), optional bias (O).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);
Tensor max_pool2d(const Tensor& x, int kernel = 2, int stride = 2);
/// Nearest-neighbour 2x upsampling of (C, H, W).
Tensor upsample_nearest2x(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
Tensor smooth_l1(const Tensor& x);
/// Softmax along the last axis (1-d or 2-d).
Tensor softmax(const Tensor& x);
/// Divides by max(||x||, eps) along `axis` (1-d: axis 0; 2-d: 0 or 1).
Tensor l2_normalize(const Tensor& x, int axis, double eps = 1e-12);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum of a 2-d tensor along `axis`.
Tensor sum_axis(const Tensor& x, int axis);

Tensor reshape(const Tensor& x, Shape shape);
/// 1-d tensor of x's flattened elements at `indices`.
Tensor gather(const Tensor& x, std::span<const std::size_t> indices);
/// Flattened concatenation into one 1-d tensor.
Tensor concat(std::span<const Tensor> parts);

/// Samples (C, H, W) at lattice coordinates (y, x) -> (C, N). Points more
/// than one cell outside the map read zero; others are clamped to the border.
Tensor bilinear_sample(const Tensor& x, std::span<const std::array<double, 2>> points);

struct RoiRequest {
  std::size_t level;  // index into the `levels` span
  double x1, y1, x2, y2;  // feature-map coordinates (box * spatial scale)
};

/// Pools every roi to (C, out, out) with sampling x sampling bilinear
/// samples per bin, half-pixel aligned. Output (n, C, out, out).
Tensor roi_align(std::span<const Tensor> levels, std::span<const RoiRequest> rois,
                 int out_size = 7, int sampling = 2);

}  // namespace selfdet::nn
