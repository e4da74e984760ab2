#pragma once

#include <cstdint>
#include <string_view>

#include <Eigen/Dense>

namespace glamp {

/// Counter-based random stream.  Output i is a bijective 64-bit mix of
/// (key, i), so a stream is fully determined by its key and can be split
/// without any shared state.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  /// Standard normal via Box-Muller (portable, unlike std::normal_distribution).
  double normal();

  void fill_normal(Eigen::Ref<Eigen::MatrixXd> out, double scale = 1.0);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_tag(std::string_view tag);

/// Independent stream keyed by (master seed, purpose tag, index, sub-index).
RandomStream make_stream(std::uint64_t master_seed, std::string_view tag,
                         std::uint64_t index = 0, std::uint64_t sub = 0);

}  // namespace glamp
