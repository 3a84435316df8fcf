#pragma once

// Streaming binary arithmetic coder (range coder) driven by externally
// supplied per-bit probabilities. Probabilities are quantized to 16 bits
// and clamped so both symbols always remain encodable. One encoder or
// decoder instance is a single-threaded state machine; independent
// instances may run concurrently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "msvdnn/common.hpp"

namespace msvdnn {

// Probability of symbol 1 as an integer in [1, 65535] over denominator 2^16.
inline std::uint16_t quantize_prob(float p) {
  const long q = std::lround(static_cast<double>(p) * 65536.0);
  return static_cast<std::uint16_t>(std::clamp(q, 1L, 65535L));
}

inline double bits_for(int symbol, std::uint16_t q) {
  const double p1 = q * (1.0 / 65536.0);
  return -std::log2(symbol ? p1 : 1.0 - p1);
}

struct CodedStream {
  std::vector<std::uint8_t> bytes;
  long bit_count = 0;  // 8 * bytes.size()
};

// Carry-correct range coder. The 32-bit range is renormalized one byte at
// a time; carries out of the 32-bit low window propagate backward through
// the already-emitted bytes (the output lives in memory, so this is both
// simple and exact — no dummy leading byte, no carry counters).
class RangeEncoder {
 public:
  void encode(int symbol, std::uint16_t q) {
    require(symbol == 0 || symbol == 1, "symbol must be a bit");
    require(q >= 1, "probability must be pre-quantized into [1, 65535]");
    require(!finished_, "encode after finish");
    const std::uint32_t split =
        static_cast<std::uint32_t>((static_cast<std::uint64_t>(range_) * q) >> 16);
    // split >= range/2^16 >= 2^8 and range - split >= 2^8 while range >= 2^24,
    // so both branches stay non-empty.
    if (symbol == 1) {
      range_ = split;
    } else {
      low_ += split;
      range_ -= split;
      if (low_ >> 32) {  // carry out of the 32-bit window
        std::size_t i = bytes_.size();
        while (i > 0 && ++bytes_[--i] == 0) {
        }
        low_ &= 0xFFFFFFFFull;
      }
    }
    while (range_ < (1u << 24)) {
      bytes_.push_back(static_cast<std::uint8_t>(low_ >> 24));
      low_ = (low_ << 8) & 0xFFFFFFFFull;
      range_ <<= 8;
    }
    ce_bits_ += bits_for(symbol, q);
    ++count_;
  }

  CodedStream finish() {
    require(!finished_, "finish called twice");
    finished_ = true;
    for (int i = 0; i < 4; ++i) {
      bytes_.push_back(static_cast<std::uint8_t>(low_ >> 24));
      low_ = (low_ << 8) & 0xFFFFFFFFull;
    }
    CodedStream out;
    out.bytes = std::move(bytes_);
    out.bit_count = static_cast<long>(out.bytes.size()) * 8;
    return out;
  }

  // Sum of -log2 P(symbol) over everything encoded so far, under the
  // quantized probabilities: the ideal rate this stream is charged against.
  double cross_entropy_bits() const { return ce_bits_; }
  long symbol_count() const { return count_; }

 private:
  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::vector<std::uint8_t> bytes_;
  double ce_bits_ = 0.0;
  long count_ = 0;
  bool finished_ = false;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {
    require(size_ >= 4, "coded stream shorter than its terminator");
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
  }
  explicit RangeDecoder(const std::vector<std::uint8_t>& bytes)
      : RangeDecoder(bytes.data(), bytes.size()) {}

  int decode(std::uint16_t q) {
    require(q >= 1, "probability must be pre-quantized into [1, 65535]");
    const std::uint32_t split =
        static_cast<std::uint32_t>((static_cast<std::uint64_t>(range_) * q) >> 16);
    int symbol;
    if (code_ < split) {
      symbol = 1;
      range_ = split;
    } else {
      symbol = 0;
      code_ -= split;
      range_ -= split;
    }
    while (range_ < (1u << 24)) {
      code_ = (code_ << 8) | next_byte();
      range_ <<= 8;
    }
    ++count_;
    return symbol;
  }

  long symbol_count() const { return count_; }
  std::size_t bytes_consumed() const { return pos_; }

 private:
  std::uint32_t next_byte() {
    require(pos_ < size_, "coded stream exhausted before all symbols were decoded");
    return data_[pos_++];
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  long count_ = 0;
};

}  // namespace msvdnn
