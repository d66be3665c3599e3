#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace serpent::detail {

/// C[M x N] += A[M x K] * B[K x N], all row-major and densely packed.
/// Column blocking keeps the C strip and the active B panel cache-resident;
/// the summation order over K is fixed, so results are reproducible.
template <typename T>
void gemm_nn(int M, int N, int K, const T* __restrict A, const T* __restrict B, T* __restrict C) {
  constexpr int kColBlock = 256;
  for (int j0 = 0; j0 < N; j0 += kColBlock) {
    const int j1 = std::min(N, j0 + kColBlock);
    for (int i = 0; i < M; ++i) {
      T* __restrict c = C + static_cast<std::size_t>(i) * N;
      const T* a = A + static_cast<std::size_t>(i) * K;
      for (int k = 0; k < K; ++k) {
        const T aik = a[k];
        if (aik == T(0)) continue;
        const T* __restrict b = B + static_cast<std::size_t>(k) * N;
        for (int j = j0; j < j1; ++j) c[j] += aik * b[j];
      }
    }
  }
}

/// out[cols x rows] = transpose(in[rows x cols]).
template <typename T>
void transpose(int rows, int cols, const T* __restrict in, T* __restrict out) {
  constexpr int kTile = 32;
  for (int r0 = 0; r0 < rows; r0 += kTile)
    for (int c0 = 0; c0 < cols; c0 += kTile) {
      const int r1 = std::min(rows, r0 + kTile), c1 = std::min(cols, c0 + kTile);
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c)
          out[static_cast<std::size_t>(c) * rows + r] = in[static_cast<std::size_t>(r) * cols + c];
    }
}

template <typename T>
std::vector<T> transposed(int rows, int cols, const T* in) {
  std::vector<T> out(static_cast<std::size_t>(rows) * cols);
  transpose(rows, cols, in, out.data());
  return out;
}

}  // namespace serpent::detail
