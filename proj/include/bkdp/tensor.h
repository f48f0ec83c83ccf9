//
// Copyright 2026 The bkdp Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

// Dense row-major tensors of doubles with operation and memory accounting.
//
// Every arithmetic kernel in the library goes through this header so that a
// single OpCounters context sees the complete multiply-add count of a step.
// Counting convention: a matrix product of shapes m x k and k x n adds
// 2*m*k*n (one multiply plus one add per term). Fused scale-and-accumulate
// elementwise work adds 2 per scalar, other elementwise arithmetic adds 1.
// Data movement (copies, gathers, im2col, permutes) is not counted.
//
// Memory accounting covers tensor payload only (8 bytes per scalar). A tensor
// attached to an OpCounters context registers its bytes on construction and
// releases them on destruction. Shape-only tensors carry no payload but are
// accounted exactly as if they did; kernels accept them and produce
// shape-only results, which lets an entire training step be replayed for its
// counts without the memory.

#ifndef BKDP_TENSOR_H_
#define BKDP_TENSOR_H_

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace bkdp {

using Shape = std::vector<int64_t>;

std::string ShapeToString(const Shape& shape);
int64_t NumElements(const Shape& shape);

namespace internal {
struct CounterState;
}  // namespace internal

inline constexpr int kGlobalScope = -1;

class OpCounters {
 public:
  OpCounters();

  int64_t mul_adds() const;
  int64_t peak_live_bytes() const;
  int64_t current_live_bytes() const;

  void AddMulAdds(int64_t n);

  // Starts a new peak window at the current live total.
  void ResetPeak();

  // Multiply-adds are also attributed to the active scope (a layer index, or
  // kGlobalScope for work that belongs to no layer).
  int scope() const;
  void set_scope(int scope);
  std::map<int, int64_t> scoped_mul_adds() const;

  // Two handles are equal when they refer to the same context.
  bool SameContext(const OpCounters& other) const {
    return state_ == other.state_;
  }

 private:
  friend class Tensor;
  std::shared_ptr<internal::CounterState> state_;
};

// Sets the attribution scope for the lifetime of the guard.
class CounterScope {
 public:
  CounterScope(OpCounters& counters, int scope)
      : counters_(counters), saved_(counters.scope()) {
    counters_.set_scope(scope);
  }
  ~CounterScope() { counters_.set_scope(saved_); }
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

 private:
  OpCounters& counters_;
  int saved_;
};

class Tensor {
 public:
  // An absent tensor: no shape, no payload.
  Tensor() = default;

  static Tensor Zeros(Shape shape, OpCounters* counters = nullptr);
  static Tensor Filled(Shape shape, double value,
                       OpCounters* counters = nullptr);
  static Tensor FromVector(Shape shape, std::vector<double> values,
                           OpCounters* counters = nullptr);
  static Tensor ShapeOnly(Shape shape, OpCounters* counters = nullptr);

  // Zeros, or a shape-only tensor when `shape_only` is set.
  static Tensor Like(Shape shape, bool shape_only, OpCounters* counters);

  Tensor(const Tensor& other);
  Tensor& operator=(const Tensor& other);
  Tensor(Tensor&& other) noexcept;
  Tensor& operator=(Tensor&& other) noexcept;
  ~Tensor();

  bool empty() const { return shape_.empty(); }
  bool shape_only() const { return shape_only_; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const;
  int64_t numel() const { return numel_; }
  int64_t bytes() const {
    return numel_ * static_cast<int64_t>(sizeof(double));
  }

  std::span<double> data();
  std::span<const double> data() const;
  double& operator[](int64_t i) { return values_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return values_[static_cast<size_t>(i)]; }

  // Metadata-only reshape; the element count must not change.
  void Reshape(Shape shape);
  Tensor Reshaped(Shape shape) &&;

  // Attaches the tensor to a counter context (detaching from any previous).
  void Track(OpCounters& counters);
  bool tracked() const { return tracker_ != nullptr; }

  // Copies the tensor, attaching the copy to `counters`.
  Tensor CopyTo(OpCounters& counters) const;

  // Returns the values; empty for shape-only tensors.
  std::vector<double> ToVector() const;

 private:
  void Register();
  void Release();

  Shape shape_;
  int64_t numel_ = 0;
  bool shape_only_ = false;
  std::vector<double> values_;
  std::shared_ptr<internal::CounterState> tracker_;
};

// Deterministic Gaussian source. The same seed yields the same stream within
// one build.
class SeededRng {
 public:
  explicit SeededRng(uint64_t seed) : seed_(seed), engine_(seed) {}

  uint64_t seed() const { return seed_; }
  double Normal();
  double Uniform();
  std::mt19937_64& engine() { return engine_; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Matrix products. Leading dimensions of the left operand are flattened into
// rows; the right operand is a matrix.

// a[..., k] * b[k, n] -> [..., n]
Tensor MatMul(const Tensor& a, const Tensor& b, OpCounters& counters);
// a[..., k] * b[n, k]^T -> [..., n]
Tensor MatMulNT(const Tensor& a, const Tensor& b, OpCounters& counters);
// a[..., m]^T * b[..., n] -> [m, n], contracting all leading dimensions.
Tensor MatMulTN(const Tensor& a, const Tensor& b, OpCounters& counters);
// Same as MatMulTN but scales row r of both operands' product by
// row_weights[r / rows_per_weight]. Adds 2*m*k*n plus 2*k*n for the scaling.
Tensor WeightedMatMulTN(const Tensor& a, const Tensor& b,
                        std::span<const double> row_weights,
                        int64_t rows_per_weight, bool shape_only,
                        OpCounters& counters);

// out[m, n] += a^T b, with rows optionally scaled as in WeightedMatMulTN
// (pass an empty span for no scaling). Writes into an existing tensor.
void MatMulTNAccumulate(const Tensor& a, const Tensor& b,
                        std::span<const double> row_weights,
                        int64_t rows_per_weight, Tensor& out,
                        OpCounters& counters);

// Per-sample products over a shared leading batch dimension.
// a[B, T, d]^T * b[B, T, p] -> [B, d, p]
Tensor BatchedMatMulTN(const Tensor& a, const Tensor& b, OpCounters& counters);
// a[B, T, k] * b[B, S, k]^T -> [B, T, S]
Tensor BatchedMatMulNT(const Tensor& a, const Tensor& b, OpCounters& counters);

// ---------------------------------------------------------------------------
// Convolution lowering.

struct Conv2dGeometry {
  int64_t kernel_h = 1;
  int64_t kernel_w = 1;
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t dilation = 1;

  int64_t OutputSize(int64_t input, int64_t kernel) const;
};

// input[B, C, H, W] -> columns[B, H_out * W_out, C * kh * kw]. Column index
// is c * kh * kw + i * kw + j.
Tensor Im2Col(const Tensor& input, const Conv2dGeometry& geometry,
              OpCounters& counters);
// Adjoint of Im2Col: accumulates columns back into an image of `image_shape`.
Tensor Col2Im(const Tensor& columns, const Shape& image_shape,
              const Conv2dGeometry& geometry, OpCounters& counters);

// ---------------------------------------------------------------------------
// Elementwise helpers.

Tensor Gaussian(const Shape& shape, double stddev, SeededRng& rng,
                OpCounters& counters);

// y += x (1 per scalar).
void AddInPlace(Tensor& y, const Tensor& x, OpCounters& counters);
// y += alpha * x (2 per scalar).
void AxpyInPlace(Tensor& y, double alpha, const Tensor& x,
                 OpCounters& counters);
// y *= x elementwise (1 per scalar).
void MultiplyInPlace(Tensor& y, const Tensor& x, OpCounters& counters);
// y *= alpha (1 per scalar).
void ScaleInPlace(Tensor& y, double alpha, OpCounters& counters);
// x[B, ...] -> [B] sums of squares over each sample (2 per scalar).
Tensor RowSquaredNorms(const Tensor& x, OpCounters& counters);
// x[B, T, n] -> [B, n] sum over T, counted as a product with a ones vector
// (2 per scalar).
Tensor SumOverMiddle(const Tensor& x, OpCounters& counters);

// [B, C, H, W] <-> [B, H * W, C] relayouts (not counted).
Tensor ChannelsToTokens(const Tensor& x, OpCounters& counters);
Tensor TokensToChannels(const Tensor& x, int64_t height, int64_t width,
                        OpCounters& counters);

// Largest absolute difference relative to the largest absolute reference
// entry; 0 when both are identically zero.
double MaxRelativeDeviation(const Tensor& value, const Tensor& reference);

}  // namespace bkdp

#endif  // BKDP_TENSOR_H_
