#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace thgen::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first needed; same length as value after
  bool requires_grad = false;
  bool leaf = true;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Dense n-dimensional array of 64-bit floats, row-major, with an optional
// gradient buffer. Copying a Tensor copies the handle; the storage is shared.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);              // shape {1}
  static Tensor row(std::vector<double> data); // shape {1, n}

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t size() const { return s_->value.size(); }
  std::size_t rank() const { return s_->shape.size(); }
  // Rank-2 accessors.
  std::size_t rows() const;
  std::size_t cols() const;

  std::vector<double>& data() { return s_->value; }
  const std::vector<double>& data() const { return s_->value; }
  double& at(std::size_t i) { return s_->value[i]; }
  double at(std::size_t i) const { return s_->value[i]; }
  double& at2(std::size_t r, std::size_t c) { return s_->value[r * cols() + c]; }
  double at2(std::size_t r, std::size_t c) const { return s_->value[r * cols() + c]; }
  // Value of a single-element tensor.
  double item() const;

  bool requires_grad() const { return s_->requires_grad; }
  bool leaf() const { return s_->leaf; }

  // Gradient buffer, allocated (zeroed) on first access.
  std::vector<double>& grad() { s_->ensure_grad(); return s_->grad; }
  const std::vector<double>& grad() const;
  bool has_grad() const { return !s_->grad.empty(); }
  void zero_grad();

  std::shared_ptr<detail::Storage> impl() const { return s_; }

 private:
  friend Tensor make_result(Shape shape, bool requires_grad);
  explicit Tensor(std::shared_ptr<detail::Storage> s) : s_(std::move(s)) {}
  std::shared_ptr<detail::Storage> s_;
};

// Leaf tensor with requires_grad set: a trainable parameter.
Tensor parameter(Shape shape, std::vector<double> data);

// Record of one forward pass. Ops executed inside a TapeScope append their
// backward rules here in execution order; backward() replays them once, in
// reverse. A tape and its tensors belong to one thread while a pass runs.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients of
  // tensors produced on this tape are reset first; leaf gradients accumulate
  // across calls until zero_grad().
  void backward(const Tensor& loss);

  std::size_t num_ops() const { return records_.size(); }
  void clear();

  void record(std::function<void()> fn, const std::shared_ptr<detail::Storage>& output);

 private:
  std::vector<std::function<void()>> records_;
  std::vector<std::shared_ptr<detail::Storage>> produced_;
};

// Installs a tape as the thread's active tape for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* active_tape();

// ---- operations ----
// Elementwise binary ops require identical shapes (no broadcasting beyond the
// *_scalar forms); violations throw std::invalid_argument naming both shapes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// The one broadcasting form: adds a {1, n} row to every row of an {m, n}
// matrix (bias addition over a batch of rows).
Tensor add_rows(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // strictly positive input
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sqrt(const Tensor& a);  // strictly positive input

Tensor matmul(const Tensor& a, const Tensor& b);

// Stable softmax (max subtraction) along the given axis; rank 1 or 2.
Tensor softmax(const Tensor& a, std::size_t axis = 0);

Tensor sum(const Tensor& a);   // -> {1}
Tensor mean(const Tensor& a);  // -> {1}
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
Tensor row_of(const Tensor& a, std::size_t i);  // -> {1, cols}

// Averages each group of `window` consecutive rows; trailing rows that do not
// fill a group are dropped.
Tensor avg_pool_rows(const Tensor& a, std::size_t window);
Tensor mean_rows(const Tensor& a);  // -> {1, cols}

// cos(u, v) with norms floored by adding 1e-8, so zero vectors never divide
// by zero. Inputs are vectors ({n} or {1, n}); result is a {1} scalar in
// [-1, 1] up to the epsilon.
Tensor cosine_similarity(const Tensor& u, const Tensor& v);

// Stable log(sum(exp(x))) over all elements of a vector, via a detached max.
Tensor logsumexp(const Tensor& x);

// Same values, no gradient connection.
Tensor detach(const Tensor& a);

constexpr double kCosineNormEpsilon = 1e-8;

}  // namespace thgen::ad
