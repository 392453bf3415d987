// include/purify/fft.hpp
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace purify {

using cvec = std::vector<std::complex<double>>;

/// Thin wrapper over Eigen's FFT. One instance per thread; plans are cached
/// inside and are not safe to share.
class Fft {
 public:
  void forward(cvec& out, const cvec& in) { impl_.fwd(out, in); }
  /// Inverse including the 1/N factor.
  void inverse(cvec& out, const cvec& in) { impl_.inv(out, in); }

 private:
  Eigen::FFT<double> impl_;
};

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

/// Smallest n' >= n whose only prime factors are 2, 3 and 5.
inline std::size_t next_fast_len(std::size_t n) {
  if (n <= 1) return 1;
  std::size_t best = next_pow2(n);
  for (std::size_t p5 = 1; p5 < best; p5 *= 5)
    for (std::size_t p35 = p5; p35 < best; p35 *= 3) {
      std::size_t v = p35;
      while (v < n) v *= 2;
      if (v < best) best = v;
    }
  return best;
}

}  // namespace purify
