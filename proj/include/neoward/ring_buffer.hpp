#pragma once

#include <atomic>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <stdexcept>
#include <type_traits>

namespace neoward {

/// Bounded single-producer/single-consumer ring that never blocks the
/// producer: when full, push overwrites the oldest item and counts a drop.
///
/// Both sides claim items by CAS on the tail index. The producer reclaims the
/// oldest slot with one CAS attempt; if the consumer won that race there is
/// room anyway. A consumer whose slot was overwritten while copying loses the
/// CAS and retries, so torn copies are never returned. Slots are stored as
/// atomic words, which keeps the concurrent copy well defined.
template <typename T>
class RingBuffer {
  static_assert(std::is_trivially_copyable_v<T>, "RingBuffer items must be trivially copyable");
  static_assert(std::is_default_constructible_v<T>);

 public:
  enum class PushResult { kAccepted, kOverwrote };

  explicit RingBuffer(std::size_t capacity = 1024)
      : capacity_(capacity), mask_(capacity - 1) {
    if (capacity == 0 || !std::has_single_bit(capacity))
      throw std::invalid_argument("ring capacity must be a power of two");
    slots_ = std::make_unique<std::atomic<std::uint64_t>[]>(capacity_ * kWords);
  }

  RingBuffer(const RingBuffer&) = delete;
  RingBuffer& operator=(const RingBuffer&) = delete;

  PushResult push(const T& item) noexcept {
    const std::uint64_t head = head_.load(std::memory_order_relaxed);
    std::uint64_t tail = tail_.load(std::memory_order_acquire);
    PushResult result = PushResult::kAccepted;
    if (head - tail == capacity_) {
      if (tail_.compare_exchange_strong(tail, tail + 1, std::memory_order_acq_rel)) {
        dropped_.fetch_add(1, std::memory_order_relaxed);
        result = PushResult::kOverwrote;
      }
    }
    store_slot(head & mask_, item);
    head_.store(head + 1, std::memory_order_release);
    return result;
  }

  std::optional<T> pop() noexcept {
    for (;;) {
      std::uint64_t tail = tail_.load(std::memory_order_acquire);
      const std::uint64_t head = head_.load(std::memory_order_acquire);
      if (tail == head) return std::nullopt;
      T item = load_slot(tail & mask_);
      if (tail_.compare_exchange_strong(tail, tail + 1, std::memory_order_acq_rel)) return item;
    }
  }

  std::size_t size() const noexcept {
    const auto tail = tail_.load(std::memory_order_acquire);
    const auto head = head_.load(std::memory_order_acquire);
    return static_cast<std::size_t>(head - tail);
  }
  bool empty() const noexcept { return size() == 0; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::uint64_t dropped_count() const noexcept { return dropped_.load(std::memory_order_relaxed); }

 private:
  static constexpr std::size_t kWords = (sizeof(T) + 7) / 8;

  void store_slot(std::size_t index, const T& item) noexcept {
    std::uint64_t words[kWords] = {};
    std::memcpy(words, &item, sizeof(T));
    auto* slot = &slots_[index * kWords];
    for (std::size_t i = 0; i < kWords; ++i) slot[i].store(words[i], std::memory_order_relaxed);
  }

  T load_slot(std::size_t index) const noexcept {
    std::uint64_t words[kWords];
    const auto* slot = &slots_[index * kWords];
    for (std::size_t i = 0; i < kWords; ++i) words[i] = slot[i].load(std::memory_order_relaxed);
    T item;
    std::memcpy(&item, words, sizeof(T));
    return item;
  }

  const std::size_t capacity_;
  const std::size_t mask_;
  std::unique_ptr<std::atomic<std::uint64_t>[]> slots_;
  alignas(64) std::atomic<std::uint64_t> head_{0};
  alignas(64) std::atomic<std::uint64_t> tail_{0};
  alignas(64) std::atomic<std::uint64_t> dropped_{0};
};

}  // namespace neoward
