// core/include/ustr/rng.hpp
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef USTR_RNG_HPP
#define USTR_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace ustr {

// Seeded generator with platform-independent uniform/gaussian draws.
// Distributions are implemented on top of raw 64-bit output so that
// identical seeds give bit-identical streams on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t NextU64() { return engine_(); }

  // Uniform in [0, 1).
  double Uniform() {
    return static_cast<double>(NextU64() >> 11) * 0x1.0p-53;
  }

  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }

  // Uniform integer in [lo, hi], both inclusive.
  int UniformInt(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(NextU64() % span);
  }

  bool Bernoulli(double p) { return Uniform() < p; }

  // Standard normal via Box-Muller; two uniforms per draw, no cached spare.
  double Gaussian() {
    double u1 = 1.0 - Uniform();  // (0, 1]
    double u2 = Uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Derive an independent generator for a named sub-stream.
  Rng Fork(uint64_t stream) {
    uint64_t z = base_seed_mix_ + stream * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return Rng(z ^ (z >> 31) ^ NextU64());
  }

 private:
  std::mt19937_64 engine_;
  uint64_t base_seed_mix_ = 0x6A09E667F3BCC908ull;
};

}  // namespace ustr

#endif  // USTR_RNG_HPP
