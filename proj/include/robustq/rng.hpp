#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace robustq {

// Seeded generator whose complete state round-trips through a string, so a
// checkpoint can resume a run on exactly the same random stream. Normal draws
// use Box-Muller without caching a second variate for the same reason.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);    // [lo, hi)
  double normal();                         // N(0, 1)
  std::size_t index(std::size_t n);        // uniform in [0, n)

  /// Independent child stream derived from this one.
  Rng split();

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

}  // namespace robustq
