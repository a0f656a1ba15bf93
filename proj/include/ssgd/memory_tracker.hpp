#pragma once

#include <cstdint>
#include <mutex>
#include <utility>

namespace ssgd {

/// Counts resident activation bytes (scalars retained x scalar size).
///
/// Only layer outputs, input crops, the split map and its gradient are
/// registered; transient gradient buffers and argmax maps are workspace and
/// are not counted.
class MemoryTracker {
 public:
  void allocate(std::uint64_t bytes) {
    std::lock_guard lock(mutex_);
    current_ += bytes;
    if (current_ > peak_) peak_ = current_;
  }
  void release(std::uint64_t bytes) {
    std::lock_guard lock(mutex_);
    current_ -= bytes;
  }
  std::uint64_t current() const {
    std::lock_guard lock(mutex_);
    return current_;
  }
  std::uint64_t peak() const {
    std::lock_guard lock(mutex_);
    return peak_;
  }
  void reset() {
    std::lock_guard lock(mutex_);
    current_ = peak_ = 0;
  }

 private:
  mutable std::mutex mutex_;
  std::uint64_t current_ = 0;
  std::uint64_t peak_ = 0;
};

/// Registers bytes on construction, releases them on destruction. A null
/// tracker makes it a no-op.
class Reservation {
 public:
  Reservation() = default;
  Reservation(MemoryTracker* tracker, std::uint64_t bytes) : tracker_(tracker), bytes_(bytes) {
    if (tracker_) tracker_->allocate(bytes_);
  }
  Reservation(Reservation&& o) noexcept
      : tracker_(std::exchange(o.tracker_, nullptr)), bytes_(o.bytes_) {}
  Reservation& operator=(Reservation&& o) noexcept {
    if (this != &o) {
      reset();
      tracker_ = std::exchange(o.tracker_, nullptr);
      bytes_ = o.bytes_;
    }
    return *this;
  }
  Reservation(const Reservation&) = delete;
  Reservation& operator=(const Reservation&) = delete;
  ~Reservation() { reset(); }

  void reset() {
    if (tracker_) tracker_->release(bytes_);
    tracker_ = nullptr;
  }
  std::uint64_t bytes() const { return bytes_; }

 private:
  MemoryTracker* tracker_ = nullptr;
  std::uint64_t bytes_ = 0;
};

}  // namespace ssgd
