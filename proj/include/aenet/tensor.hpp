#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aenet {

// Error taxonomy. The CLI maps ContractError subclasses to exit code 2 and
// NumericError to exit code 3.
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DimensionError : ContractError {
  using ContractError::ContractError;
};
struct EmptyMaskError : ContractError {
  using ContractError::ContractError;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Allocation accounting.
//
// Every tensor buffer goes through CountingAllocator, which reports to a
// thread-local ledger while an AllocationScope is alive. Used to assert
// working-memory bounds of whole computations.
// ---------------------------------------------------------------------------

struct AllocStats {
  std::size_t live = 0;      // elements currently allocated
  std::size_t peak = 0;      // max of live during the scope
  std::size_t total = 0;     // sum of all allocations
  std::size_t largest = 0;   // largest single buffer
  std::size_t count = 0;     // number of allocations
  bool active = false;
};

inline AllocStats& alloc_stats() {
  thread_local AllocStats stats;
  return stats;
}

class AllocationScope {
 public:
  AllocationScope() : saved_(alloc_stats()) { alloc_stats() = AllocStats{.active = true}; }
  ~AllocationScope() { alloc_stats() = saved_; }
  AllocationScope(const AllocationScope&) = delete;
  AllocationScope& operator=(const AllocationScope&) = delete;

  const AllocStats& stats() const { return alloc_stats(); }

 private:
  AllocStats saved_;
};

template <typename T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() noexcept = default;
  template <typename U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto& s = alloc_stats();
    if (s.active) {
      s.live += n;
      s.total += n;
      s.peak = std::max(s.peak, s.live);
      s.largest = std::max(s.largest, n);
      ++s.count;
    }
    return std::allocator<T>{}.allocate(n);
  }

  void deallocate(T* p, std::size_t n) noexcept {
    auto& s = alloc_stats();
    if (s.active) s.live -= std::min(s.live, n);
    std::allocator<T>{}.deallocate(p, n);
  }

  template <typename U>
  bool operator==(const CountingAllocator<U>&) const noexcept { return true; }
};

// ---------------------------------------------------------------------------
// Tensor: dense row-major value type.
// ---------------------------------------------------------------------------

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, CountingAllocator<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
    if (values.size() != shape_numel(shape_))
      throw DimensionError("tensor: " + std::to_string(values.size()) +
                           " values for shape " + shape_str(shape_));
    data_.assign(values.begin(), values.end());
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{}, v); }
  static Tensor vector(std::initializer_list<T> values) {
    return Tensor(Shape{values.size()}, values);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
    return Tensor(Shape{rows, cols}, values);
  }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw DimensionError("tensor: axis out of range");
    return shape_[i];
  }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return {data_.data(), data_.size()}; }
  std::span<const T> values() const { return {data_.data(), data_.size()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  const T& at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  // Scalar value of a single-element tensor.
  T item() const {
    if (data_.size() != 1) throw DimensionError("tensor: item() on " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw DimensionError("tensor: cannot reshape " + shape_str(shape_) + " to " +
                           shape_str(shape));
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && std::equal(a.data_.begin(), a.data_.end(), b.data_.begin());
  }

 private:
  Shape shape_;
  Storage data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace aenet
