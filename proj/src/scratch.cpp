// SPDX-License-Identifier: Apache-2.0
#include "lopt/scratch.hpp"

namespace lopt {

void ScratchTracker::reserve(std::uint64_t bytes, const std::string& what) {
    std::uint64_t live = live_.load();
    for (;;) {
        if (bytes > cap_ || live > cap_ - bytes)
            throw Error(ErrorCode::OutOfScratch, what + ": request of " + std::to_string(bytes) +
                                                     " bytes with " + std::to_string(live) + " live exceeds cap of " +
                                                     std::to_string(cap_) + " bytes");
        if (live_.compare_exchange_weak(live, live + bytes)) break;
    }
    allocations_.fetch_add(1);
    const std::uint64_t now = live + bytes;
    std::uint64_t hw = high_water_.load();
    while (now > hw && !high_water_.compare_exchange_weak(hw, now)) {
    }
}

} // namespace lopt
