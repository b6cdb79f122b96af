#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace umic {

/// Packed 1-bit sample buffer. Bit i lives in byte i/8 at position i%8
/// (sample 0 is the LSB of byte 0); this is also the wire and file layout.
/// Padding bits past size() are always zero.
class BitBuffer {
 public:
  BitBuffer() = default;
  explicit BitBuffer(std::size_t nbits, bool value = false);

  static BitBuffer from_bytes(std::span<const std::uint8_t> bytes, std::size_t nbits);

  std::size_t size() const noexcept { return nbits_; }
  bool empty() const noexcept { return nbits_ == 0; }

  bool get(std::size_t i) const noexcept { return (bytes_[i >> 3] >> (i & 7)) & 1U; }
  void set(std::size_t i, bool v) noexcept {
    const auto mask = static_cast<std::uint8_t>(1U << (i & 7));
    if (v) {
      bytes_[i >> 3] |= mask;
    } else {
      bytes_[i >> 3] &= static_cast<std::uint8_t>(~mask);
    }
  }

  void push_back(bool v);
  void resize(std::size_t nbits);

  /// Sets bits [begin, end) to v; end is clamped to size().
  void fill(std::size_t begin, std::size_t end, bool v);

  /// Number of set bits in [begin, end).
  std::size_t count_ones(std::size_t begin, std::size_t end) const;
  std::size_t count_ones() const { return count_ones(0, nbits_); }

  BitBuffer slice(std::size_t begin, std::size_t count) const;

  /// Appends bits [begin, begin + count) of other.
  void append(const BitBuffer& other, std::size_t begin, std::size_t count);

  std::span<const std::uint8_t> bytes() const noexcept { return bytes_; }

  friend bool operator==(const BitBuffer&, const BitBuffer&) = default;

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t nbits_ = 0;
};

}  // namespace umic
