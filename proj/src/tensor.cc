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

#include "bkdp/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

#include "bkdp/status.h"

namespace bkdp {
namespace internal {

struct CounterState {
  int64_t mul_adds = 0;
  int64_t current_bytes = 0;
  int64_t peak_bytes = 0;
  int scope = kGlobalScope;
  std::map<int, int64_t> scoped;

  void Allocate(int64_t bytes) {
    current_bytes += bytes;
    peak_bytes = std::max(peak_bytes, current_bytes);
  }
  void Free(int64_t bytes) { current_bytes -= bytes; }
};

}  // namespace internal

std::string ShapeToString(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << "x";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

int64_t NumElements(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

// ---------------------------------------------------------------------------
// OpCounters

OpCounters::OpCounters()
    : state_(std::make_shared<internal::CounterState>()) {}

int64_t OpCounters::mul_adds() const { return state_->mul_adds; }
int64_t OpCounters::peak_live_bytes() const { return state_->peak_bytes; }
int64_t OpCounters::current_live_bytes() const {
  return state_->current_bytes;
}

void OpCounters::AddMulAdds(int64_t n) {
  state_->mul_adds += n;
  state_->scoped[state_->scope] += n;
}

void OpCounters::ResetPeak() { state_->peak_bytes = state_->current_bytes; }

int OpCounters::scope() const { return state_->scope; }
void OpCounters::set_scope(int scope) { state_->scope = scope; }
std::map<int, int64_t> OpCounters::scoped_mul_adds() const {
  return state_->scoped;
}

// ---------------------------------------------------------------------------
// Tensor

namespace {

void ValidateShape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must be non-empty");
  for (int64_t d : shape) {
    if (d <= 0) {
      throw DimensionError("tensor dimensions must be positive, got " +
                           ShapeToString(shape));
    }
  }
}

}  // namespace

Tensor Tensor::Zeros(Shape shape, OpCounters* counters) {
  return Filled(std::move(shape), 0.0, counters);
}

Tensor Tensor::Filled(Shape shape, double value, OpCounters* counters) {
  ValidateShape(shape);
  Tensor t;
  t.numel_ = NumElements(shape);
  t.shape_ = std::move(shape);
  t.values_.assign(static_cast<size_t>(t.numel_), value);
  if (counters != nullptr) t.Track(*counters);
  return t;
}

Tensor Tensor::FromVector(Shape shape, std::vector<double> values,
                          OpCounters* counters) {
  ValidateShape(shape);
  if (NumElements(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("shape " + ShapeToString(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  Tensor t;
  t.numel_ = NumElements(shape);
  t.shape_ = std::move(shape);
  t.values_ = std::move(values);
  if (counters != nullptr) t.Track(*counters);
  return t;
}

Tensor Tensor::ShapeOnly(Shape shape, OpCounters* counters) {
  ValidateShape(shape);
  Tensor t;
  t.numel_ = NumElements(shape);
  t.shape_ = std::move(shape);
  t.shape_only_ = true;
  if (counters != nullptr) t.Track(*counters);
  return t;
}

Tensor Tensor::Like(Shape shape, bool shape_only, OpCounters* counters) {
  return shape_only ? ShapeOnly(std::move(shape), counters)
                    : Zeros(std::move(shape), counters);
}

Tensor::Tensor(const Tensor& other)
    : shape_(other.shape_),
      numel_(other.numel_),
      shape_only_(other.shape_only_),
      values_(other.values_),
      tracker_(other.tracker_) {
  Register();
}

Tensor& Tensor::operator=(const Tensor& other) {
  if (this == &other) return *this;
  Release();
  shape_ = other.shape_;
  numel_ = other.numel_;
  shape_only_ = other.shape_only_;
  values_ = other.values_;
  tracker_ = other.tracker_;
  Register();
  return *this;
}

Tensor::Tensor(Tensor&& other) noexcept
    : shape_(std::move(other.shape_)),
      numel_(other.numel_),
      shape_only_(other.shape_only_),
      values_(std::move(other.values_)),
      tracker_(std::move(other.tracker_)) {
  other.shape_.clear();
  other.numel_ = 0;
  other.shape_only_ = false;
  other.values_.clear();
  other.tracker_.reset();
}

Tensor& Tensor::operator=(Tensor&& other) noexcept {
  if (this == &other) return *this;
  Release();
  shape_ = std::move(other.shape_);
  numel_ = other.numel_;
  shape_only_ = other.shape_only_;
  values_ = std::move(other.values_);
  tracker_ = std::move(other.tracker_);
  other.shape_.clear();
  other.numel_ = 0;
  other.shape_only_ = false;
  other.values_.clear();
  other.tracker_.reset();
  return *this;
}

Tensor::~Tensor() { Release(); }

void Tensor::Register() {
  if (tracker_ != nullptr) tracker_->Allocate(bytes());
}

void Tensor::Release() {
  if (tracker_ != nullptr) {
    tracker_->Free(bytes());
    tracker_.reset();
  }
}

int64_t Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) {
    throw DimensionError("axis " + std::to_string(i) + " out of range for " +
                         ShapeToString(shape_));
  }
  return shape_[static_cast<size_t>(i)];
}

std::span<double> Tensor::data() {
  return {values_.data(), values_.size()};
}

std::span<const double> Tensor::data() const {
  return {values_.data(), values_.size()};
}

void Tensor::Reshape(Shape shape) {
  ValidateShape(shape);
  if (NumElements(shape) != numel_) {
    throw DimensionError("cannot reshape " + ShapeToString(shape_) + " to " +
                         ShapeToString(shape));
  }
  shape_ = std::move(shape);
}

Tensor Tensor::Reshaped(Shape shape) && {
  Reshape(std::move(shape));
  return std::move(*this);
}

void Tensor::Track(OpCounters& counters) {
  if (tracker_ == counters.state_) return;
  Release();
  tracker_ = counters.state_;
  Register();
}

Tensor Tensor::CopyTo(OpCounters& counters) const {
  Tensor copy;
  copy.shape_ = shape_;
  copy.numel_ = numel_;
  copy.shape_only_ = shape_only_;
  copy.values_ = values_;
  copy.Track(counters);
  return copy;
}

std::vector<double> Tensor::ToVector() const { return values_; }

// ---------------------------------------------------------------------------
// SeededRng

double SeededRng::Normal() { return normal_(engine_); }

double SeededRng::Uniform() {
  return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
}

// ---------------------------------------------------------------------------
// Matrix products

namespace {

int64_t LeadingRows(const Tensor& t) { return t.numel() / t.dim(-1); }

Shape LeadingShapeWith(const Tensor& t, int64_t last) {
  Shape s = t.shape();
  s.back() = last;
  return s;
}

void RequireRank(const Tensor& t, int min_rank, const char* what) {
  if (t.empty() || t.rank() < min_rank) {
    throw DimensionError(std::string(what) + " needs rank >= " +
                         std::to_string(min_rank) + ", got " +
                         ShapeToString(t.shape()));
  }
}

bool AnyShapeOnly(const Tensor& a, const Tensor& b) {
  return a.shape_only() || b.shape_only();
}

// 4-way unrolled dot product; keeps the reduction vector-friendly without
// relaxing floating-point semantics.
double Dot(const double* x, const double* y, int64_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
  }
  for (; i < n; ++i) s0 += x[i] * y[i];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace

Tensor MatMul(const Tensor& a, const Tensor& b, OpCounters& counters) {
  RequireRank(a, 2, "matmul lhs");
  if (b.rank() != 2 || a.dim(-1) != b.dim(0)) {
    throw DimensionError("matmul shapes " + ShapeToString(a.shape()) +
                         " and " + ShapeToString(b.shape()) +
                         " do not agree");
  }
  const int64_t m = LeadingRows(a), k = a.dim(-1), n = b.dim(1);
  counters.AddMulAdds(2 * m * k * n);
  Tensor c = Tensor::Like(LeadingShapeWith(a, n), AnyShapeOnly(a, b),
                          &counters);
  if (c.shape_only()) return c;
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (int64_t i = 0; i < m; ++i) {
    double* ci = pc + i * n;
    const double* ai = pa + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double aik = ai[kk];
      const double* bk = pb + kk * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Tensor MatMulNT(const Tensor& a, const Tensor& b, OpCounters& counters) {
  RequireRank(a, 2, "matmul lhs");
  if (b.rank() != 2 || a.dim(-1) != b.dim(1)) {
    throw DimensionError("matmul (rhs transposed) shapes " +
                         ShapeToString(a.shape()) + " and " +
                         ShapeToString(b.shape()) + " do not agree");
  }
  const int64_t m = LeadingRows(a), k = a.dim(-1), n = b.dim(0);
  counters.AddMulAdds(2 * m * k * n);
  Tensor c = Tensor::Like(LeadingShapeWith(a, n), AnyShapeOnly(a, b),
                          &counters);
  if (c.shape_only()) return c;
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      pc[i * n + j] = Dot(pa + i * k, pb + j * k, k);
    }
  }
  return c;
}

namespace {

// c[m, n] += sum_r w_r * a[r, :]^T b[r, :]
void AccumulateTN(const double* pa, const double* pb, int64_t rows, int64_t m,
                  int64_t n, std::span<const double> weights,
                  int64_t rows_per_weight, double* pc) {
  std::vector<double> scaled;
  if (!weights.empty()) scaled.resize(static_cast<size_t>(n));
  for (int64_t r = 0; r < rows; ++r) {
    const double* ar = pa + r * m;
    const double* br = pb + r * n;
    if (!weights.empty()) {
      const double w = weights[static_cast<size_t>(r / rows_per_weight)];
      for (int64_t j = 0; j < n; ++j) {
        scaled[static_cast<size_t>(j)] = w * br[j];
      }
      br = scaled.data();
    }
    for (int64_t i = 0; i < m; ++i) {
      const double ari = ar[i];
      if (ari == 0.0) continue;
      double* ci = pc + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += ari * br[j];
    }
  }
}

void CheckTN(const Tensor& a, const Tensor& b) {
  RequireRank(a, 2, "transposed matmul lhs");
  RequireRank(b, 2, "transposed matmul rhs");
  if (LeadingRows(a) != LeadingRows(b) || a.rank() != b.rank()) {
    throw DimensionError("transposed matmul shapes " +
                         ShapeToString(a.shape()) + " and " +
                         ShapeToString(b.shape()) + " do not agree");
  }
  for (int i = 0; i + 1 < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw DimensionError("transposed matmul shapes " +
                           ShapeToString(a.shape()) + " and " +
                           ShapeToString(b.shape()) + " do not agree");
    }
  }
}

}  // namespace

Tensor MatMulTN(const Tensor& a, const Tensor& b, OpCounters& counters) {
  CheckTN(a, b);
  const int64_t rows = LeadingRows(a), m = a.dim(-1), n = b.dim(-1);
  counters.AddMulAdds(2 * rows * m * n);
  Tensor c = Tensor::Like({m, n}, AnyShapeOnly(a, b), &counters);
  if (c.shape_only()) return c;
  AccumulateTN(a.data().data(), b.data().data(), rows, m, n, {}, 1,
               c.data().data());
  return c;
}

Tensor WeightedMatMulTN(const Tensor& a, const Tensor& b,
                        std::span<const double> row_weights,
                        int64_t rows_per_weight, bool shape_only,
                        OpCounters& counters) {
  CheckTN(a, b);
  const int64_t rows = LeadingRows(a), m = a.dim(-1), n = b.dim(-1);
  if (rows_per_weight <= 0 || rows % rows_per_weight != 0) {
    throw DimensionError("row weights do not tile " + std::to_string(rows) +
                         " rows");
  }
  const int64_t groups = rows / rows_per_weight;
  shape_only = shape_only || AnyShapeOnly(a, b);
  if (!shape_only && static_cast<int64_t>(row_weights.size()) != groups) {
    throw DimensionError("expected " + std::to_string(groups) +
                         " row weights, got " +
                         std::to_string(row_weights.size()));
  }
  counters.AddMulAdds(2 * rows * m * n + 2 * rows * n);
  Tensor c = Tensor::Like({m, n}, shape_only, &counters);
  if (c.shape_only()) return c;
  AccumulateTN(a.data().data(), b.data().data(), rows, m, n, row_weights,
               rows_per_weight, c.data().data());
  return c;
}

void MatMulTNAccumulate(const Tensor& a, const Tensor& b,
                        std::span<const double> row_weights,
                        int64_t rows_per_weight, Tensor& out,
                        OpCounters& counters) {
  CheckTN(a, b);
  const int64_t rows = LeadingRows(a), m = a.dim(-1), n = b.dim(-1);
  if (out.rank() != 2 || out.dim(0) != m || out.dim(1) != n) {
    throw DimensionError("accumulator " + ShapeToString(out.shape()) +
                         " does not match [" + std::to_string(m) + "x" +
                         std::to_string(n) + "]");
  }
  const bool weighted = rows_per_weight > 0;
  if (weighted && rows % rows_per_weight != 0) {
    throw DimensionError("row weights do not tile " + std::to_string(rows) +
                         " rows");
  }
  const bool shape_only = AnyShapeOnly(a, b) || out.shape_only();
  if (weighted && !shape_only &&
      static_cast<int64_t>(row_weights.size()) != rows / rows_per_weight) {
    throw DimensionError("expected " +
                         std::to_string(rows / rows_per_weight) +
                         " row weights, got " +
                         std::to_string(row_weights.size()));
  }
  counters.AddMulAdds(2 * rows * m * n + (weighted ? 2 * rows * n : 0));
  if (shape_only) return;
  AccumulateTN(a.data().data(), b.data().data(), rows, m, n,
               weighted ? row_weights : std::span<const double>(),
               weighted ? rows_per_weight : 1, out.data().data());
}

Tensor BatchedMatMulTN(const Tensor& a, const Tensor& b,
                       OpCounters& counters) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(1) != b.dim(1)) {
    throw DimensionError("batched product shapes " + ShapeToString(a.shape()) +
                         " and " + ShapeToString(b.shape()) +
                         " do not agree");
  }
  const int64_t batch = a.dim(0), t = a.dim(1), m = a.dim(2), n = b.dim(2);
  counters.AddMulAdds(2 * batch * t * m * n);
  Tensor c = Tensor::Like({batch, m, n}, AnyShapeOnly(a, b), &counters);
  if (c.shape_only()) return c;
  for (int64_t i = 0; i < batch; ++i) {
    AccumulateTN(a.data().data() + i * t * m, b.data().data() + i * t * n, t,
                 m, n, {}, 1, c.data().data() + i * m * n);
  }
  return c;
}

Tensor BatchedMatMulNT(const Tensor& a, const Tensor& b,
                       OpCounters& counters) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2)) {
    throw DimensionError("batched product shapes " + ShapeToString(a.shape()) +
                         " and " + ShapeToString(b.shape()) +
                         " do not agree");
  }
  const int64_t batch = a.dim(0), t = a.dim(1), k = a.dim(2), s = b.dim(1);
  counters.AddMulAdds(2 * batch * t * k * s);
  Tensor c = Tensor::Like({batch, t, s}, AnyShapeOnly(a, b), &counters);
  if (c.shape_only()) return c;
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (int64_t i = 0; i < batch; ++i) {
    for (int64_t x = 0; x < t; ++x) {
      for (int64_t y = 0; y < s; ++y) {
        pc[(i * t + x) * s + y] =
            Dot(pa + (i * t + x) * k, pb + (i * s + y) * k, k);
      }
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Convolution lowering

int64_t Conv2dGeometry::OutputSize(int64_t input, int64_t kernel) const {
  const int64_t span = dilation * (kernel - 1) + 1;
  const int64_t padded = input + 2 * padding;
  if (span > padded) return 0;
  return (padded - span) / stride + 1;
}

namespace {

void CheckGeometry(const Conv2dGeometry& g) {
  if (g.kernel_h <= 0 || g.kernel_w <= 0 || g.stride <= 0 || g.padding < 0 ||
      g.dilation <= 0) {
    throw DimensionError("invalid convolution geometry");
  }
}

}  // namespace

Tensor Im2Col(const Tensor& input, const Conv2dGeometry& g,
              OpCounters& counters) {
  CheckGeometry(g);
  if (input.rank() != 4) {
    throw DimensionError("im2col expects [B, C, H, W], got " +
                         ShapeToString(input.shape()));
  }
  const int64_t batch = input.dim(0), channels = input.dim(1),
                height = input.dim(2), width = input.dim(3);
  const int64_t out_h = g.OutputSize(height, g.kernel_h);
  const int64_t out_w = g.OutputSize(width, g.kernel_w);
  if (out_h <= 0 || out_w <= 0) {
    throw DimensionError("kernel " + std::to_string(g.kernel_h) + "x" +
                         std::to_string(g.kernel_w) +
                         " larger than padded input " +
                         ShapeToString(input.shape()));
  }
  const int64_t tokens = out_h * out_w;
  const int64_t cols = channels * g.kernel_h * g.kernel_w;
  Tensor out = Tensor::Like({batch, tokens, cols}, input.shape_only(),
                            &counters);
  if (out.shape_only()) return out;
  const double* px = input.data().data();
  double* po = out.data().data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t oy = 0; oy < out_h; ++oy) {
      for (int64_t ox = 0; ox < out_w; ++ox) {
        double* row = po + (b * tokens + oy * out_w + ox) * cols;
        for (int64_t c = 0; c < channels; ++c) {
          for (int64_t ky = 0; ky < g.kernel_h; ++ky) {
            const int64_t iy = oy * g.stride - g.padding + ky * g.dilation;
            for (int64_t kx = 0; kx < g.kernel_w; ++kx) {
              const int64_t ix = ox * g.stride - g.padding + kx * g.dilation;
              double v = 0.0;
              if (iy >= 0 && iy < height && ix >= 0 && ix < width) {
                v = px[((b * channels + c) * height + iy) * width + ix];
              }
              row[(c * g.kernel_h + ky) * g.kernel_w + kx] = v;
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor Col2Im(const Tensor& columns, const Shape& image_shape,
              const Conv2dGeometry& g, OpCounters& counters) {
  CheckGeometry(g);
  if (image_shape.size() != 4 || columns.rank() != 3) {
    throw DimensionError("col2im expects [B, T, C*kh*kw] columns and a "
                         "[B, C, H, W] image shape");
  }
  const int64_t batch = image_shape[0], channels = image_shape[1],
                height = image_shape[2], width = image_shape[3];
  const int64_t out_h = g.OutputSize(height, g.kernel_h);
  const int64_t out_w = g.OutputSize(width, g.kernel_w);
  const int64_t cols = channels * g.kernel_h * g.kernel_w;
  if (columns.dim(0) != batch || columns.dim(1) != out_h * out_w ||
      columns.dim(2) != cols) {
    throw DimensionError("columns " + ShapeToString(columns.shape()) +
                         " do not match image " + ShapeToString(image_shape));
  }
  // Overlapping windows sum; that is the only arithmetic here.
  counters.AddMulAdds(columns.numel());
  Tensor out = Tensor::Like(image_shape, columns.shape_only(), &counters);
  if (out.shape_only()) return out;
  const double* pc = columns.data().data();
  double* po = out.data().data();
  const int64_t tokens = out_h * out_w;
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t oy = 0; oy < out_h; ++oy) {
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const double* row = pc + (b * tokens + oy * out_w + ox) * cols;
        for (int64_t c = 0; c < channels; ++c) {
          for (int64_t ky = 0; ky < g.kernel_h; ++ky) {
            const int64_t iy = oy * g.stride - g.padding + ky * g.dilation;
            if (iy < 0 || iy >= height) continue;
            for (int64_t kx = 0; kx < g.kernel_w; ++kx) {
              const int64_t ix = ox * g.stride - g.padding + kx * g.dilation;
              if (ix < 0 || ix >= width) continue;
              po[((b * channels + c) * height + iy) * width + ix] +=
                  row[(c * g.kernel_h + ky) * g.kernel_w + kx];
            }
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor Gaussian(const Shape& shape, double stddev, SeededRng& rng,
                OpCounters& counters) {
  if (!(stddev >= 0.0) || !std::isfinite(stddev)) {
    throw ParameterError("gaussian standard deviation must be a finite "
                         "non-negative number");
  }
  Tensor out = Tensor::Zeros(shape, &counters);
  if (stddev == 0.0) return out;
  for (double& v : out.data()) v = stddev * rng.Normal();
  return out;
}

namespace {

void RequireSameSize(const Tensor& y, const Tensor& x, const char* op) {
  if (y.numel() != x.numel()) {
    throw DimensionError(std::string(op) + " size mismatch " +
                         ShapeToString(y.shape()) + " vs " +
                         ShapeToString(x.shape()));
  }
}

}  // namespace

void AddInPlace(Tensor& y, const Tensor& x, OpCounters& counters) {
  RequireSameSize(y, x, "add");
  counters.AddMulAdds(y.numel());
  if (y.shape_only() || x.shape_only()) return;
  auto py = y.data();
  auto px = x.data();
  for (size_t i = 0; i < py.size(); ++i) py[i] += px[i];
}

void AxpyInPlace(Tensor& y, double alpha, const Tensor& x,
                 OpCounters& counters) {
  RequireSameSize(y, x, "axpy");
  counters.AddMulAdds(2 * y.numel());
  if (y.shape_only() || x.shape_only()) return;
  auto py = y.data();
  auto px = x.data();
  for (size_t i = 0; i < py.size(); ++i) py[i] += alpha * px[i];
}

void MultiplyInPlace(Tensor& y, const Tensor& x, OpCounters& counters) {
  RequireSameSize(y, x, "multiply");
  counters.AddMulAdds(y.numel());
  if (y.shape_only() || x.shape_only()) return;
  auto py = y.data();
  auto px = x.data();
  for (size_t i = 0; i < py.size(); ++i) py[i] *= px[i];
}

void ScaleInPlace(Tensor& y, double alpha, OpCounters& counters) {
  counters.AddMulAdds(y.numel());
  if (y.shape_only()) return;
  for (double& v : y.data()) v *= alpha;
}

Tensor RowSquaredNorms(const Tensor& x, OpCounters& counters) {
  RequireRank(x, 1, "row norms");
  const int64_t batch = x.dim(0);
  const int64_t per = x.numel() / batch;
  counters.AddMulAdds(2 * x.numel());
  Tensor out = Tensor::Like({batch}, x.shape_only(), &counters);
  if (out.shape_only()) return out;
  const double* px = x.data().data();
  for (int64_t i = 0; i < batch; ++i) {
    out[i] = Dot(px + i * per, px + i * per, per);
  }
  return out;
}

Tensor SumOverMiddle(const Tensor& x, OpCounters& counters) {
  if (x.rank() != 3) {
    throw DimensionError("sum over middle axis expects rank 3, got " +
                         ShapeToString(x.shape()));
  }
  const int64_t batch = x.dim(0), t = x.dim(1), n = x.dim(2);
  counters.AddMulAdds(2 * batch * t * n);
  Tensor out = Tensor::Like({batch, n}, x.shape_only(), &counters);
  if (out.shape_only()) return out;
  const double* px = x.data().data();
  double* po = out.data().data();
  for (int64_t i = 0; i < batch; ++i) {
    for (int64_t s = 0; s < t; ++s) {
      const double* row = px + (i * t + s) * n;
      for (int64_t j = 0; j < n; ++j) po[i * n + j] += row[j];
    }
  }
  return out;
}

Tensor ChannelsToTokens(const Tensor& x, OpCounters& counters) {
  if (x.rank() != 4) {
    throw DimensionError("expected [B, C, H, W], got " +
                         ShapeToString(x.shape()));
  }
  const int64_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out = Tensor::Like({batch, hw, c}, x.shape_only(), &counters);
  if (out.shape_only()) return out;
  const double* px = x.data().data();
  double* po = out.data().data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t s = 0; s < hw; ++s) {
        po[(b * hw + s) * c + ch] = px[(b * c + ch) * hw + s];
      }
    }
  }
  return out;
}

Tensor TokensToChannels(const Tensor& x, int64_t height, int64_t width,
                        OpCounters& counters) {
  if (x.rank() != 3 || x.dim(1) != height * width) {
    throw DimensionError("expected [B, " + std::to_string(height * width) +
                         ", C], got " + ShapeToString(x.shape()));
  }
  const int64_t batch = x.dim(0), hw = x.dim(1), c = x.dim(2);
  Tensor out = Tensor::Like({batch, c, height, width}, x.shape_only(),
                            &counters);
  if (out.shape_only()) return out;
  const double* px = x.data().data();
  double* po = out.data().data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t s = 0; s < hw; ++s) {
      for (int64_t ch = 0; ch < c; ++ch) {
        po[(b * c + ch) * hw + s] = px[(b * hw + s) * c + ch];
      }
    }
  }
  return out;
}

double MaxRelativeDeviation(const Tensor& value, const Tensor& reference) {
  if (value.numel() != reference.numel()) {
    throw DimensionError("cannot compare " + ShapeToString(value.shape()) +
                         " with " + ShapeToString(reference.shape()));
  }
  double scale = 0.0, worst = 0.0;
  auto pv = value.data();
  auto pr = reference.data();
  for (size_t i = 0; i < pr.size(); ++i) {
    scale = std::max(scale, std::abs(pr[i]));
    worst = std::max(worst, std::abs(pv[i] - pr[i]));
  }
  if (scale == 0.0) return worst == 0.0 ? 0.0 : HUGE_VAL;
  return worst / scale;
}

}  // namespace bkdp
