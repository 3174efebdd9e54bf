#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace peftlab {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Deterministic random stream. All sampling in the project goes through this
/// wrapper so that any run is reproducible from its recorded seeds alone.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double gaussian();

  // [0, n)
  std::size_t uniform_index(std::size_t n);

  /// Independent derived stream; `stream` labels the consumer.
  Rng fork(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace peftlab
