#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dgl/tensor.hpp"

namespace dgl {

template <typename Payload>
struct BufferEntry {
  Payload payload;
  std::vector<int> labels;
  std::uint64_t reuse_count = 0;
  std::uint64_t seq = 0;
};

struct BufferStats {
  std::size_t size = 0;
  std::uint64_t total_bits = 0;
  std::uint64_t total_bytes = 0;                       // ceil(total_bits / 8)
  std::map<std::uint64_t, std::size_t> reuse_histogram;  // reuse_count -> entries
};

/// Bits of a raw activation batch held in 32-bit floats.
template <typename T>
std::uint64_t raw_bits(const Tensor<T>& x) {
  return 32ULL * x.size();
}

/// Fixed-capacity store between two adjacent modules.
///
/// Writes overwrite the oldest entry once full. Reads return the entry with the
/// smallest (reuse_count, -seq): least reused first, newest among equals. All
/// operations lock one mutex, so one writer and one reader may live on
/// different threads.
template <typename Payload>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be at least 1");
  }

  ReplayBuffer(const ReplayBuffer&) = delete;
  ReplayBuffer& operator=(const ReplayBuffer&) = delete;

  /// Returns the sequence number assigned to the new entry.
  std::uint64_t push(Payload payload, std::vector<int> labels) {
    std::lock_guard lock(mu_);
    if (entries_.size() == capacity_) {
      std::size_t oldest = 0;
      for (std::size_t i = 1; i < entries_.size(); ++i)
        if (entries_[i].seq < entries_[oldest].seq) oldest = i;
      entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(oldest));
    }
    const std::uint64_t seq = ++last_seq_;
    entries_.push_back({std::move(payload), std::move(labels), 0, seq});
    return seq;
  }

  /// std::nullopt means starved. The returned copy carries the incremented reuse count.
  std::optional<BufferEntry<Payload>> sample() {
    std::lock_guard lock(mu_);
    if (entries_.empty()) return std::nullopt;
    std::size_t best = 0;
    for (std::size_t i = 1; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = entries_[best];
      if (a.reuse_count < b.reuse_count || (a.reuse_count == b.reuse_count && a.seq > b.seq)) best = i;
    }
    ++entries_[best].reuse_count;
    return entries_[best];
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return size() == 0; }
  /// Sequence number of the most recent write (0 before any write).
  std::uint64_t last_seq() const {
    std::lock_guard lock(mu_);
    return last_seq_;
  }

  /// Copy of the current entries in storage order.
  std::vector<BufferEntry<Payload>> snapshot() const {
    std::lock_guard lock(mu_);
    return entries_;
  }

  /// `payload_bits` prices one payload; `shared_bits` is charged once when the
  /// buffer is non-empty (e.g. the codebook a quantized buffer depends on).
  BufferStats stats(const std::function<std::uint64_t(const Payload&)>& payload_bits,
                    std::uint64_t shared_bits = 0) const {
    std::lock_guard lock(mu_);
    BufferStats s;
    s.size = entries_.size();
    for (const auto& e : entries_) {
      s.total_bits += payload_bits(e.payload);
      ++s.reuse_histogram[e.reuse_count];
    }
    if (!entries_.empty()) s.total_bits += shared_bits;
    s.total_bytes = (s.total_bits + 7) / 8;
    return s;
  }

 private:
  std::size_t capacity_;
  std::uint64_t last_seq_ = 0;
  std::vector<BufferEntry<Payload>> entries_;
  mutable std::mutex mu_;
};

}  // namespace dgl
