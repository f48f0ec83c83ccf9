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

// Independent reference computations shared by the tests. Everything here is
// written with plain loops and does not call library kernels.

#ifndef BKDP_TESTS_TEST_UTIL_H_
#define BKDP_TESTS_TEST_UTIL_H_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "bkdp/tensor.h"

namespace bkdp::testing {

inline Tensor RandomTensor(const Shape& shape, SeededRng& rng,
                           OpCounters* counters = nullptr) {
  Tensor t = Tensor::Zeros(shape, counters);
  for (double& v : t.data()) v = rng.Normal();
  return t;
}

inline std::vector<double> RandomVector(int64_t n, SeededRng& rng) {
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.Normal();
  return v;
}

// c[i][j] = sum_k a[i][k] b[k][j], accumulated in k order.
inline std::vector<double> TripleLoop(const std::vector<double>& a,
                                      const std::vector<double>& b, int64_t m,
                                      int64_t k, int64_t n) {
  std::vector<double> c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (int64_t t = 0; t < k; ++t) sum += a[i * k + t] * b[t * n + j];
      c[i * n + j] = sum;
    }
  }
  return c;
}

// Sliding-window convolution. x[B, C, H, W], w[C * kh * kw, O] with row index
// c * kh * kw + i * kw + j; returns [B, O, Ho, Wo].
inline std::vector<double> DirectConv(const std::vector<double>& x, int64_t B,
                                      int64_t C, int64_t H, int64_t W,
                                      const std::vector<double>& w, int64_t O,
                                      int64_t kh, int64_t kw, int64_t stride,
                                      int64_t pad, int64_t dilation,
                                      int64_t* ho_out, int64_t* wo_out) {
  const int64_t ho = (H + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
  const int64_t wo = (W + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
  std::vector<double> y(static_cast<size_t>(B * O * ho * wo), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t o = 0; o < O; ++o) {
      for (int64_t r = 0; r < ho; ++r) {
        for (int64_t s = 0; s < wo; ++s) {
          double sum = 0.0;
          for (int64_t c = 0; c < C; ++c) {
            for (int64_t i = 0; i < kh; ++i) {
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t yy = r * stride - pad + i * dilation;
                const int64_t xx = s * stride - pad + j * dilation;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                sum += x[((b * C + c) * H + yy) * W + xx] *
                       w[((c * kh + i) * kw + j) * O + o];
              }
            }
          }
          y[((b * O + o) * ho + r) * wo + s] = sum;
        }
      }
    }
  }
  *ho_out = ho;
  *wo_out = wo;
  return y;
}

inline double MaxAbs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double RelativeDeviation(const std::vector<double>& value,
                                const std::vector<double>& reference) {
  double diff = 0.0;
  for (size_t i = 0; i < value.size(); ++i) {
    diff = std::max(diff, std::abs(value[i] - reference[i]));
  }
  const double scale = MaxAbs(reference);
  return scale == 0.0 ? diff : diff / scale;
}

}  // namespace bkdp::testing

#endif  // BKDP_TESTS_TEST_UTIL_H_
