#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace archscale {

using Shape = std::vector<std::size_t>;

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool leaf = true;
  const Tape* tape = nullptr;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

std::size_t shape_numel(const Shape& shape);

}  // namespace detail

// Dense row-major float64 value. Copies are cheap handles onto the same node;
// ops never mutate their inputs. Parameters are leaf tensors that require grad
// and are the only tensors whose storage may be written in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double value);
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  // Writable storage; only for parameter leaves (optimizer, checkpoint, tests).
  std::span<double> mutable_data();

  std::span<const double> grad() const;
  void zero_grad();

  bool requires_grad() const;
  bool is_leaf() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Op plumbing.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ordered op record plus multiply-accumulate instrumentation. A tape becomes
// active on the current thread through TapeScope; ops executed while a tape is
// active add their multiply counts to it and, if it records gradients, append
// their nodes (inputs always precede consumers).
class Tape {
 public:
  explicit Tape(bool record_gradients = true) : record_gradients_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t multiply_count() const { return multiply_count_; }
  const std::map<std::string, std::uint64_t, std::less<>>& multiplies_by_tag() const {
    return by_tag_;
  }
  std::size_t size() const { return nodes_.size(); }
  bool records_gradients() const { return record_gradients_; }

  // Reverse sweep from a scalar loss. Interior gradients are cleared first so a
  // second call on the same tape reproduces the first (leaf grads accumulate).
  void backward(const Tensor& loss);

  void clear();

  static Tape* active();

  void add_multiplies(std::uint64_t count);
  void record(const std::shared_ptr<detail::Node>& node);

 private:
  bool record_gradients_;
  std::uint64_t multiply_count_ = 0;
  std::map<std::string, std::uint64_t, std::less<>> by_tag_;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Attributes multiplies recorded inside the scope to a named component.
class CostTag {
 public:
  explicit CostTag(std::string_view tag);
  ~CostTag();
  CostTag(const CostTag&) = delete;
  CostTag& operator=(const CostTag&) = delete;
};

}  // namespace archscale
