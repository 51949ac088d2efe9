#include "selfdet/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace selfdet::nn {

namespace {

thread_local bool g_grad_enabled = true;
thread_local KinkRecording* g_kink_recorder = nullptr;
std::string g_backward_fault;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

namespace {
const Node& checked(const std::shared_ptr<Node>& n) {
  if (!n) throw std::logic_error("use of an undefined tensor");
  return *n;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(node_).shape; }

int Tensor::dim(int i) const {
  const Shape& s = shape();
  if (i < 0) i += static_cast<int>(s.size());
  if (i < 0 || i >= static_cast<int>(s.size())) throw std::out_of_range("tensor dim index");
  return s[static_cast<std::size_t>(i)];
}

std::size_t Tensor::size() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
  checked(node_);
  if (!node_->leaf) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
bool Tensor::is_leaf() const { return checked(node_).leaf; }

void Tensor::set_requires_grad(bool on) {
  checked(node_);
  if (!node_->leaf) throw std::logic_error("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }
std::span<const double> Tensor::grad() const { return checked(node_).grad; }

void Tensor::zero_grad() {
  checked(node_);
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

const char* Tensor::op() const { return checked(node_).op; }

std::span<double> BackwardContext::grad(std::size_t i) {
  Node& p = *self_.parents[i];
  if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
  return p.grad;
}

void Tensor::backward() const {
  const Node& root = checked(node_);
  if (root.value.size() != 1) {
    throw std::logic_error("backward() needs a scalar loss, got shape " + shape_str(root.shape));
  }
  if (root.consumed) throw std::logic_error("backward() called twice on the same graph");
  if (!root.requires_grad) throw std::logic_error("backward() on a tensor that requires no grad");

  // Iterative post-order DFS over interior nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !p->leaf && visited.insert(p).second) {
        if (p->consumed) throw std::logic_error("backward() through an already-consumed graph");
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  if (root.leaf) {
    if (node_->grad.empty()) node_->grad.assign(1, 0.0);
    node_->grad[0] += 1.0;
    return;
  }
  node_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->leaf || !n->backward_fn || n->grad.empty()) continue;
    if (!g_backward_fault.empty() && g_backward_fault == n->op) {
      for (double& g : n->grad) g *= 1.5;
    }
    BackwardContext ctx(*n, n->grad);
    n->backward_fn(ctx);
  }
  for (Node* n : order) {
    if (n->leaf) continue;
    n->consumed = true;
    n->backward_fn = nullptr;
    n->parents.clear();
    if (n != node_.get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::vector<Tensor> inputs, BackwardFn backward) {
  if (numel(shape) != value.size()) {
    throw std::logic_error(std::string(op) + ": output size does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  node->op = op;
  bool any = false;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) any = any || t.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

KinkRecording::KinkRecording() : previous_(g_kink_recorder) { g_kink_recorder = this; }
KinkRecording::~KinkRecording() { g_kink_recorder = previous_; }

void KinkRecording::mix(std::uint64_t v) {
  hash_ ^= v + 0x9e3779b97f4a7c15ULL + (hash_ << 6) + (hash_ >> 2);
  hash_ *= 1099511628211ULL;
}

KinkRecording* kink_recorder() { return g_kink_recorder; }

void set_backward_fault(const std::string& op) { g_backward_fault = op; }
const std::string& backward_fault() { return g_backward_fault; }

}  // namespace selfdet::nn
