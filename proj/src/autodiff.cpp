#include "thgen/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace thgen::ad {

namespace {

thread_local Tape* g_active_tape = nullptr;

using StoragePtr = std::shared_ptr<detail::Storage>;

bool recording(const Tensor& a) {
  return g_active_tape != nullptr && a.requires_grad();
}
bool recording(const Tensor& a, const Tensor& b) {
  return g_active_tape != nullptr && (a.requires_grad() || b.requires_grad());
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void accumulate(const StoragePtr& s, std::size_t i, double v) {
  s->ensure_grad();
  s->grad[i] += v;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

// ---- Tensor ----

Tensor make_result(Shape shape, bool requires_grad) {
  auto s = std::make_shared<detail::Storage>();
  s->value.assign(shape_numel(shape), 0.0);
  s->shape = std::move(shape);
  s->requires_grad = requires_grad;
  s->leaf = false;
  return Tensor(std::move(s));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), fill);
  return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  for (auto e : shape) {
    if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape));
  }
  if (data.empty()) data.assign(n, 0.0);
  if (data.size() != n) {
    throw std::invalid_argument("Tensor: data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto s = std::make_shared<detail::Storage>();
  s->shape = std::move(shape);
  s->value = std::move(data);
  s->requires_grad = requires_grad;
  s->leaf = true;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::row(std::vector<double> data) {
  std::size_t n = data.size();
  return from_data({1, n}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw std::invalid_argument("Tensor::rows: rank-2 required, got " + shape_str(shape()));
  return s_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw std::invalid_argument("Tensor::cols: rank-2 required, got " + shape_str(shape()));
  return s_->shape[1];
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("Tensor::item: expected a single element, shape is " + shape_str(shape()));
  }
  return s_->value[0];
}

const std::vector<double>& Tensor::grad() const {
  s_->ensure_grad();
  return s_->grad;
}

void Tensor::zero_grad() {
  if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tensor parameter(Shape shape, std::vector<double> data) {
  return Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

// ---- Tape ----

void Tape::record(std::function<void()> fn, const StoragePtr& output) {
  records_.push_back(std::move(fn));
  produced_.push_back(output);
}

void Tape::clear() {
  records_.clear();
  produced_.clear();
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be a scalar tensor");
  }
  auto target = loss.impl();
  bool on_tape = std::any_of(produced_.begin(), produced_.end(),
                             [&](const StoragePtr& s) { return s == target; });
  if (!on_tape) {
    throw std::invalid_argument("Tape::backward: loss was not produced on this tape");
  }
  // Intermediate gradients are transient per pass; leaf gradients accumulate.
  for (auto& s : produced_) {
    s->ensure_grad();
    std::fill(s->grad.begin(), s->grad.end(), 0.0);
  }
  target->grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

Tape* active_tape() { return g_active_tape; }

// ---- elementwise binary ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_result(a.shape(), recording(a, b));
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), sb = b.impl(), so = out.impl();
    g_active_tape->record(
        [sa, sb, so, n] {
          if (sa->requires_grad)
            for (std::size_t i = 0; i < n; ++i) accumulate(sa, i, so->grad[i]);
          if (sb->requires_grad)
            for (std::size_t i = 0; i < n; ++i) accumulate(sb, i, so->grad[i]);
        },
        so);
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_result(a.shape(), recording(a, b));
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), sb = b.impl(), so = out.impl();
    g_active_tape->record(
        [sa, sb, so, n] {
          if (sa->requires_grad)
            for (std::size_t i = 0; i < n; ++i) accumulate(sa, i, so->grad[i]);
          if (sb->requires_grad)
            for (std::size_t i = 0; i < n; ++i) accumulate(sb, i, -so->grad[i]);
        },
        so);
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_result(a.shape(), recording(a, b));
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), sb = b.impl(), so = out.impl();
    g_active_tape->record(
        [sa, sb, so, n] {
          if (sa->requires_grad)
            for (std::size_t i = 0; i < n; ++i) accumulate(sa, i, so->grad[i] * sb->value[i]);
          if (sb->requires_grad)
            for (std::size_t i = 0; i < n; ++i) accumulate(sb, i, so->grad[i] * sa->value[i]);
        },
        so);
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  Tensor out = make_result(a.shape(), recording(a, b));
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) / b.at(i);
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), sb = b.impl(), so = out.impl();
    g_active_tape->record(
        [sa, sb, so, n] {
          for (std::size_t i = 0; i < n; ++i) {
            const double g = so->grad[i];
            const double bi = sb->value[i];
            if (sa->requires_grad) accumulate(sa, i, g / bi);
            if (sb->requires_grad) accumulate(sb, i, -g * sa->value[i] / (bi * bi));
          }
        },
        so);
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = make_result(a.shape(), recording(a));
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + s;
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), so = out.impl();
    g_active_tape->record(
        [sa, so, n] {
          for (std::size_t i = 0; i < n; ++i) accumulate(sa, i, so->grad[i]);
        },
        so);
  }
  return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = make_result(a.shape(), recording(a));
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * s;
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), so = out.impl();
    g_active_tape->record(
        [sa, so, n, s] {
          for (std::size_t i = 0; i < n; ++i) accumulate(sa, i, so->grad[i] * s);
        },
        so);
  }
  return out;
}

Tensor add_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || b.rows() != 1 || b.cols() != a.cols()) {
    throw std::invalid_argument("add_rows: expected {m, n} + {1, n}, got " +
                                shape_str(a.shape()) + " + " + shape_str(b.shape()));
  }
  const std::size_t rows = a.rows(), cols = a.cols();
  Tensor out = make_result(a.shape(), recording(a, b));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.at(r * cols + c) = a.at(r * cols + c) + b.at(c);
  }
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), sb = b.impl(), so = out.impl();
    g_active_tape->record(
        [sa, sb, so, rows, cols] {
          if (sa->requires_grad) {
            for (std::size_t i = 0; i < rows * cols; ++i) accumulate(sa, i, so->grad[i]);
          }
          if (sb->requires_grad) {
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < cols; ++c) accumulate(sb, c, so->grad[r * cols + c]);
            }
          }
        },
        so);
  }
  return out;
}

// ---- elementwise unary ----

namespace {

// out = f(a); backward accumulates g * dfn(a_value, out_value).
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF dfn) {
  Tensor out = make_result(a.shape(), recording(a));
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = f(a.at(i));
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), so = out.impl();
    g_active_tape->record(
        [sa, so, n, dfn] {
          for (std::size_t i = 0; i < n; ++i)
            accumulate(sa, i, so->grad[i] * dfn(sa->value[i], so->value[i]));
        },
        so);
  }
  return out;
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a.at(i) > 0.0)) {
      throw std::domain_error("log: nonpositive input " + std::to_string(a.at(i)));
    }
  }
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, stable_sigmoid,
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_op(a, stable_softplus,
                  [](double x, double) { return stable_sigmoid(x); });
}

Tensor sqrt(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a.at(i) > 0.0)) {
      throw std::domain_error("sqrt: nonpositive input " + std::to_string(a.at(i)));
    }
  }
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = make_result({m, n}, recording(a, b));
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        if (av == 0.0) continue;
        const double* brow = pb + p * n;
        double* orow = po + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), sb = b.impl(), so = out.impl();
    g_active_tape->record(
        [sa, sb, so, m, k, n] {
          const double* go = so->grad.data();
          if (sa->requires_grad) {
            sa->ensure_grad();
            // dA = dC * B^T
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                double acc = 0.0;
                const double* grow = go + i * n;
                const double* brow = sb->value.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                sa->grad[i * k + p] += acc;
              }
          }
          if (sb->requires_grad) {
            sb->ensure_grad();
            // dB = A^T * dC
            for (std::size_t i = 0; i < m; ++i) {
              const double* arow = sa->value.data() + i * k;
              const double* grow = go + i * n;
              for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                if (av == 0.0) continue;
                double* brow = sb->grad.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
              }
            }
          }
        },
        so);
  }
  return out;
}

// ---- softmax ----

namespace {

struct LineIter {
  std::size_t count;   // number of lines
  std::size_t length;  // elements per line
  std::size_t stride;  // step between consecutive elements of a line
  std::size_t base_step;  // step between line starts
};

LineIter lines_along(const Tensor& a, std::size_t axis) {
  if (a.rank() == 1) {
    if (axis != 0) throw std::invalid_argument("softmax: axis out of range for rank-1 tensor");
    return {1, a.shape()[0], 1, 0};
  }
  if (a.rank() == 2) {
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    if (axis == 0) return {c, r, c, 1};
    if (axis == 1) return {r, c, 1, c};
    throw std::invalid_argument("softmax: axis out of range for rank-2 tensor");
  }
  throw std::invalid_argument("softmax: rank must be 1 or 2, got " + shape_str(a.shape()));
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isnan(a.at(i))) throw std::domain_error("softmax: NaN input");
  }
  const LineIter it = lines_along(a, axis);
  Tensor out = make_result(a.shape(), recording(a));
  for (std::size_t l = 0; l < it.count; ++l) {
    const std::size_t base = l * it.base_step;
    double mx = a.at(base);
    for (std::size_t i = 1; i < it.length; ++i) mx = std::max(mx, a.at(base + i * it.stride));
    double denom = 0.0;
    for (std::size_t i = 0; i < it.length; ++i) {
      const double e = std::exp(a.at(base + i * it.stride) - mx);
      out.at(base + i * it.stride) = e;
      denom += e;
    }
    for (std::size_t i = 0; i < it.length; ++i) out.at(base + i * it.stride) /= denom;
  }
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), so = out.impl();
    g_active_tape->record(
        [sa, so, it] {
          sa->ensure_grad();
          for (std::size_t l = 0; l < it.count; ++l) {
            const std::size_t base = l * it.base_step;
            double dot = 0.0;
            for (std::size_t i = 0; i < it.length; ++i) {
              const std::size_t idx = base + i * it.stride;
              dot += so->grad[idx] * so->value[idx];
            }
            for (std::size_t i = 0; i < it.length; ++i) {
              const std::size_t idx = base + i * it.stride;
              sa->grad[idx] += so->value[idx] * (so->grad[idx] - dot);
            }
          }
        },
        so);
  }
  return out;
}

// ---- reductions / shape ----

Tensor sum(const Tensor& a) {
  Tensor out = make_result({1}, recording(a));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.at(i);
  out.at(0) = acc;
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), so = out.impl();
    const std::size_t n = a.size();
    g_active_tape->record(
        [sa, so, n] {
          const double g = so->grad[0];
          for (std::size_t i = 0; i < n; ++i) accumulate(sa, i, g);
        },
        so);
  }
  return out;
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  return mul_scalar(sum(a), inv);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor out = make_result(shape, recording(a));
  out.data() = a.data();
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), so = out.impl();
    const std::size_t n = a.size();
    g_active_tape->record(
        [sa, so, n] {
          for (std::size_t i = 0; i < n; ++i) accumulate(sa, i, so->grad[i]);
        },
        so);
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t rank = parts[0].rank();
  if (rank != 1 && rank != 2) throw std::invalid_argument("concat: rank must be 1 or 2");
  if (axis >= rank) throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  bool any_grad = parts[0].requires_grad();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (s.size() != rank) throw std::invalid_argument("concat: mixed ranks");
    for (std::size_t d = 0; d < rank; ++d) {
      if (d == axis) continue;
      if (s[d] != out_shape[d]) {
        throw std::invalid_argument("concat: extent mismatch " + shape_str(out_shape) + " vs " +
                                    shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
    any_grad = any_grad || parts[p].requires_grad();
  }

  Tensor out = make_result(out_shape, g_active_tape != nullptr && any_grad);
  // Copy, remembering (offset within out, length, strides) per part.
  struct Placement {
    StoragePtr src;
    std::size_t offset;  // flat offset of the part's first element in out
  };
  std::vector<Placement> placed;
  placed.reserve(parts.size());

  if (rank == 1 || axis == 0) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
      placed.push_back({p.impl(), off});
      off += p.size();
    }
  } else {
    // rank 2, axis 1: interleave rows.
    const std::size_t rows = out_shape[0], out_cols = out_shape[1];
    std::size_t col_off = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.shape()[1];
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy(p.data().begin() + r * c, p.data().begin() + (r + 1) * c,
                  out.data().begin() + r * out_cols + col_off);
      }
      placed.push_back({p.impl(), col_off});
      col_off += c;
    }
  }

  if (out.requires_grad()) {
    StoragePtr so = out.impl();
    const bool along_rows = (rank == 1 || axis == 0);
    const std::size_t out_cols = (rank == 2) ? out_shape[1] : 0;
    g_active_tape->record(
        [placed, so, along_rows, out_cols] {
          for (const auto& pl : placed) {
            if (!pl.src->requires_grad) continue;
            pl.src->ensure_grad();
            if (along_rows) {
              for (std::size_t i = 0; i < pl.src->value.size(); ++i)
                pl.src->grad[i] += so->grad[pl.offset + i];
            } else {
              const std::size_t rows = pl.src->shape[0], c = pl.src->shape[1];
              for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j)
                  pl.src->grad[r * c + j] += so->grad[r * out_cols + pl.offset + j];
            }
          }
        },
        so);
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  const std::size_t rank = a.rank();
  if (rank != 1 && rank != 2) throw std::invalid_argument("slice: rank must be 1 or 2");
  if (axis >= rank) throw std::invalid_argument("slice: axis out of range");
  if (len == 0 || start + len > a.shape()[axis]) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of bounds for " +
                                shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  Tensor out = make_result(out_shape, recording(a));

  const std::size_t src_cols = (rank == 2) ? a.shape()[1] : 1;
  // Flat copy parameters: slicing is a strided block copy in all cases.
  std::size_t block, count, src_stride, src_off;
  if (rank == 1 || axis == 0) {
    block = (rank == 2) ? len * src_cols : len;
    count = 1;
    src_stride = 0;
    src_off = start * src_cols;
    if (rank == 1) src_off = start;
  } else {
    block = len;
    count = a.shape()[0];
    src_stride = src_cols;
    src_off = start;
  }
  for (std::size_t r = 0; r < count; ++r) {
    std::copy(a.data().begin() + src_off + r * src_stride,
              a.data().begin() + src_off + r * src_stride + block,
              out.data().begin() + r * block);
  }
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), so = out.impl();
    g_active_tape->record(
        [sa, so, block, count, src_stride, src_off] {
          sa->ensure_grad();
          for (std::size_t r = 0; r < count; ++r)
            for (std::size_t i = 0; i < block; ++i)
              sa->grad[src_off + r * src_stride + i] += so->grad[r * block + i];
        },
        so);
  }
  return out;
}

Tensor row_of(const Tensor& a, std::size_t i) { return slice(a, 0, i, 1); }

Tensor avg_pool_rows(const Tensor& a, std::size_t window) {
  if (a.rank() != 2) throw std::invalid_argument("avg_pool_rows: rank-2 required");
  if (window == 0 || a.rows() < window) {
    throw std::invalid_argument("avg_pool_rows: window " + std::to_string(window) +
                                " does not fit " + shape_str(a.shape()));
  }
  const std::size_t groups = a.rows() / window;
  const std::size_t c = a.cols();
  Tensor out = make_result({groups, c}, recording(a));
  const double inv = 1.0 / static_cast<double>(window);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t w = 0; w < window; ++w)
      for (std::size_t j = 0; j < c; ++j) out.at2(g, j) += a.at2(g * window + w, j) * inv;
  if (out.requires_grad()) {
    StoragePtr sa = a.impl(), so = out.impl();
    g_active_tape->record(
        [sa, so, groups, window, c, inv] {
          sa->ensure_grad();
          for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t w = 0; w < window; ++w)
              for (std::size_t j = 0; j < c; ++j)
                sa->grad[(g * window + w) * c + j] += so->grad[g * c + j] * inv;
        },
        so);
  }
  return out;
}

Tensor mean_rows(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("mean_rows: rank-2 required");
  return avg_pool_rows(a, a.rows());
}

// ---- cosine similarity ----

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_similarity: size mismatch " + shape_str(u.shape()) +
                                " vs " + shape_str(v.shape()));
  }
  const std::size_t n = u.size();
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += u.at(i) * v.at(i);
    uu += u.at(i) * u.at(i);
    vv += v.at(i) * v.at(i);
  }
  const double nu = std::sqrt(uu) + kCosineNormEpsilon;
  const double nv = std::sqrt(vv) + kCosineNormEpsilon;
  const double cosv = dot / (nu * nv);

  Tensor out = make_result({1}, recording(u, v));
  out.at(0) = cosv;
  if (out.requires_grad()) {
    StoragePtr su = u.impl(), sv = v.impl(), so = out.impl();
    g_active_tape->record(
        [su, sv, so, n, nu, nv, cosv, uu, vv] {
          const double g = so->grad[0];
          const double norm_u = std::sqrt(uu), norm_v = std::sqrt(vv);
          if (su->requires_grad) {
            su->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
              double d = sv->value[i] / (nu * nv);
              if (norm_u > 0.0) d -= cosv * su->value[i] / (norm_u * nu);
              su->grad[i] += g * d;
            }
          }
          if (sv->requires_grad) {
            sv->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
              double d = su->value[i] / (nu * nv);
              if (norm_v > 0.0) d -= cosv * sv->value[i] / (norm_v * nv);
              sv->grad[i] += g * d;
            }
          }
        },
        so);
  }
  return out;
}

Tensor logsumexp(const Tensor& x) {
  if (x.size() == 0) throw std::invalid_argument("logsumexp: empty input");
  double mx = x.at(0);
  for (std::size_t i = 1; i < x.size(); ++i) mx = std::max(mx, x.at(i));
  // The max shift is a constant; the gradient of the composite is exact.
  Tensor flat = reshape(x, {x.size()});
  return add_scalar(log(sum(exp(add_scalar(flat, -mx)))), mx);
}

Tensor detach(const Tensor& a) {
  return Tensor::from_data(a.shape(), a.data(), /*requires_grad=*/false);
}

}  // namespace thgen::ad
