// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <new>
#include <span>
#include <string>

#include "lopt/error.hpp"

namespace lopt {

/// Instrumented accounting for temporary buffers used during an optimizer
/// step. Allocations that would push the live total past the cap fail with
/// ErrorCode::OutOfScratch before any memory is requested from the system.
class ScratchTracker {
public:
    static constexpr std::uint64_t kUnlimited = std::numeric_limits<std::uint64_t>::max();

    explicit ScratchTracker(std::uint64_t cap_bytes = kUnlimited) : cap_(cap_bytes) {}

    ScratchTracker(const ScratchTracker&) = delete;
    ScratchTracker& operator=(const ScratchTracker&) = delete;

    std::uint64_t cap() const noexcept { return cap_; }
    std::uint64_t live_bytes() const noexcept { return live_.load(); }
    std::uint64_t high_water_bytes() const noexcept { return high_water_.load(); }
    std::uint64_t allocation_count() const noexcept { return allocations_.load(); }

    void reset_high_water() noexcept { high_water_.store(live_.load()); }

    void reserve(std::uint64_t bytes, const std::string& what);
    void release(std::uint64_t bytes) noexcept { live_.fetch_sub(bytes); }

private:
    std::uint64_t cap_;
    std::atomic<std::uint64_t> live_{0};
    std::atomic<std::uint64_t> high_water_{0};
    std::atomic<std::uint64_t> allocations_{0};
};

/// Owning, tracked, uninitialised array of trivially-constructible T.
template <typename T>
class ScratchBuffer {
public:
    ScratchBuffer() = default;

    ScratchBuffer(ScratchTracker& tracker, std::size_t count, const std::string& what)
        : tracker_(&tracker), count_(count) {
        if (count > std::numeric_limits<std::uint64_t>::max() / sizeof(T))
            throw Error(ErrorCode::OutOfScratch, what + ": element count overflows");
        bytes_ = static_cast<std::uint64_t>(count) * sizeof(T);
        tracker.reserve(bytes_, what);
        try {
            data_.reset(new T[count]);
        } catch (const std::bad_alloc&) {
            tracker.release(bytes_);
            throw Error(ErrorCode::OutOfScratch, what + ": system allocation of " + std::to_string(bytes_) +
                                                     " bytes failed");
        }
    }

    ScratchBuffer(ScratchBuffer&& other) noexcept { swap(other); }
    ScratchBuffer& operator=(ScratchBuffer&& other) noexcept {
        ScratchBuffer tmp(std::move(other));
        swap(tmp);
        return *this;
    }
    ~ScratchBuffer() {
        if (tracker_ && data_) tracker_->release(bytes_);
    }

    T* data() noexcept { return data_.get(); }
    const T* data() const noexcept { return data_.get(); }
    std::size_t size() const noexcept { return count_; }
    std::span<T> span() noexcept { return {data_.get(), count_}; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

private:
    void swap(ScratchBuffer& other) noexcept {
        std::swap(tracker_, other.tracker_);
        std::swap(data_, other.data_);
        std::swap(count_, other.count_);
        std::swap(bytes_, other.bytes_);
    }

    ScratchTracker* tracker_ = nullptr;
    std::unique_ptr<T[]> data_;
    std::size_t count_ = 0;
    std::uint64_t bytes_ = 0;
};

} // namespace lopt
