#include "archscale/tensor.hpp"

#include <cmath>
#include <numeric>

#include "archscale/errors.hpp"

namespace archscale {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local std::vector<std::string> g_tags;

const std::string kUntagged = "untagged";

}  // namespace

namespace detail {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

}  // namespace detail

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (detail::shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape does not match number of values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) {
  const std::size_t n = detail::shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  const auto& s = node_->shape;
  if (s.size() != 2) throw DimensionError("tensor: expected a 2-D tensor");
  return s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = node_->shape;
  if (s.size() != 2) throw DimensionError("tensor: expected a 2-D tensor");
  return s[1];
}

std::span<const double> Tensor::data() const { return node_->value; }

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->value[r * cols() + c];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("tensor: item() on a non-scalar");
  return node_->value[0];
}

std::span<double> Tensor::mutable_data() {
  if (!node_->leaf) throw ContractError("tensor: only leaf tensors are writable");
  return node_->value;
}

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::is_leaf() const { return node_->leaf; }

Tape* Tape::active() { return g_active_tape; }

void Tape::add_multiplies(std::uint64_t count) {
  if (count == 0) return;
  multiply_count_ += count;
  const std::string& tag = g_tags.empty() ? kUntagged : g_tags.back();
  auto it = by_tag_.find(tag);
  if (it == by_tag_.end()) {
    by_tag_.emplace(tag, count);
  } else {
    it->second += count;
  }
}

void Tape::record(const std::shared_ptr<detail::Node>& node) {
  node->tape = this;
  nodes_.push_back(node);
}

void Tape::clear() {
  nodes_.clear();
  by_tag_.clear();
  multiply_count_ = 0;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  const auto& root = loss.node();
  if (!root->requires_grad || root->leaf) {
    throw ContractError("backward: loss does not depend on any parameter");
  }
  if (root->tape != this) {
    throw ContractError("backward: loss was not produced on this tape");
  }
  for (auto& node : nodes_) {
    if (!node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), 0.0);
  }
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& node = **it;
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

CostTag::CostTag(std::string_view tag) { g_tags.emplace_back(tag); }

CostTag::~CostTag() { g_tags.pop_back(); }

}  // namespace archscale
