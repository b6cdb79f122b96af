#include "umic/bitbuffer.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "umic/error.hpp"

namespace umic {

namespace {

std::size_t byte_count(std::size_t nbits) { return (nbits + 7) / 8; }

}  // namespace

BitBuffer::BitBuffer(std::size_t nbits, bool value) : bytes_(byte_count(nbits), 0), nbits_(nbits) {
  if (value) fill(0, nbits, true);
}

BitBuffer BitBuffer::from_bytes(std::span<const std::uint8_t> bytes, std::size_t nbits) {
  if (bytes.size() < byte_count(nbits)) {
    throw ParameterError("BitBuffer::from_bytes: not enough bytes for " + std::to_string(nbits) +
                         " bits");
  }
  BitBuffer out;
  out.nbits_ = nbits;
  out.bytes_.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(byte_count(nbits)));
  if (nbits % 8 != 0) {
    out.bytes_.back() &= static_cast<std::uint8_t>((1U << (nbits % 8)) - 1U);
  }
  return out;
}

void BitBuffer::push_back(bool v) {
  if (nbits_ % 8 == 0) bytes_.push_back(0);
  ++nbits_;
  set(nbits_ - 1, v);
}

void BitBuffer::resize(std::size_t nbits) {
  if (nbits < nbits_ && nbits % 8 != 0) {
    bytes_[nbits / 8] &= static_cast<std::uint8_t>((1U << (nbits % 8)) - 1U);
  }
  bytes_.resize(byte_count(nbits), 0);
  nbits_ = nbits;
}

void BitBuffer::fill(std::size_t begin, std::size_t end, bool v) {
  end = std::min(end, nbits_);
  if (begin >= end) return;
  // Head bits up to a byte boundary.
  while (begin < end && (begin & 7) != 0) set(begin++, v);
  // Whole bytes.
  const std::size_t whole = (end - begin) / 8;
  if (whole > 0) {
    std::memset(bytes_.data() + begin / 8, v ? 0xFF : 0x00, whole);
    begin += whole * 8;
  }
  while (begin < end) set(begin++, v);
}

std::size_t BitBuffer::count_ones(std::size_t begin, std::size_t end) const {
  end = std::min(end, nbits_);
  std::size_t n = 0;
  while (begin < end && (begin & 7) != 0) n += get(begin++) ? 1 : 0;
  while (begin + 8 <= end) {
    n += static_cast<std::size_t>(std::popcount(static_cast<unsigned>(bytes_[begin / 8])));
    begin += 8;
  }
  while (begin < end) n += get(begin++) ? 1 : 0;
  return n;
}

BitBuffer BitBuffer::slice(std::size_t begin, std::size_t count) const {
  if (begin > nbits_ || count > nbits_ - begin) {
    throw ParameterError("BitBuffer::slice: range out of bounds");
  }
  BitBuffer out;
  out.append(*this, begin, count);
  return out;
}

void BitBuffer::append(const BitBuffer& other, std::size_t begin, std::size_t count) {
  if (begin > other.nbits_ || count > other.nbits_ - begin) {
    throw ParameterError("BitBuffer::append: range out of bounds");
  }
  if (nbits_ % 8 == 0 && begin % 8 == 0) {
    // Byte-aligned fast path.
    const auto first = other.bytes_.begin() + static_cast<std::ptrdiff_t>(begin / 8);
    bytes_.insert(bytes_.end(), first, first + static_cast<std::ptrdiff_t>(byte_count(count)));
    nbits_ += count;
    if (nbits_ % 8 != 0) {
      bytes_.back() &= static_cast<std::uint8_t>((1U << (nbits_ % 8)) - 1U);
    }
    return;
  }
  const std::size_t base = nbits_;
  resize(nbits_ + count);
  for (std::size_t i = 0; i < count;) {
    // Copy up to 8 bits at a time through a 16-bit window of the source.
    const std::size_t sbit = begin + i;
    unsigned window = other.bytes_[sbit / 8];
    if (sbit / 8 + 1 < other.bytes_.size()) window |= static_cast<unsigned>(other.bytes_[sbit / 8 + 1]) << 8;
    const unsigned chunk = (window >> (sbit % 8)) & 0xFFU;
    const std::size_t n = std::min<std::size_t>(8, count - i);
    for (std::size_t j = 0; j < n; ++j) set(base + i + j, (chunk >> j) & 1U);
    i += n;
  }
}

}  // namespace umic
