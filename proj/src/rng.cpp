#include "glamp/rng.hpp"

#include <cmath>
#include <numbers>

namespace glamp {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char ch : tag) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

RandomStream make_stream(std::uint64_t master_seed, std::string_view tag,
                         std::uint64_t index, std::uint64_t sub) {
  std::uint64_t k = mix64(master_seed);
  k = mix64(k ^ hash_tag(tag));
  k = mix64(k ^ (index * 0xD1B54A32D192ED03ULL));
  k = mix64(k ^ (sub * 0x8CB92BA72F3D8DD7ULL));
  return RandomStream(k);
}

std::uint64_t RandomStream::next_u64() {
  return mix64(key_ + 0x9E3779B97F4A7C15ULL * (++counter_));
}

double RandomStream::uniform() {
  // 53 random bits, shifted off zero.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RandomStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

void RandomStream::fill_normal(Eigen::Ref<Eigen::MatrixXd> out, double scale) {
  // column-major fill order is part of the reproducibility contract
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) = scale * normal();
}

}  // namespace glamp
