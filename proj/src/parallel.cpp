// SPDX-License-Identifier: Apache-2.0
#include "lopt/parallel.hpp"

#include "lopt/error.hpp"

namespace lopt {

std::vector<ElementRange> split_range(ElementRange range, std::size_t parts) {
    require(parts > 0, ErrorCode::InvalidArgument, "split_range needs at least one part");
    std::vector<ElementRange> out;
    out.reserve(parts);
    const std::size_t n = range.size();
    const std::size_t base = n / parts;
    const std::size_t extra = n % parts;
    std::size_t at = range.begin;
    for (std::size_t p = 0; p < parts; ++p) {
        const std::size_t len = base + (p < extra ? 1 : 0);
        out.push_back({at, at + len});
        at += len;
    }
    return out;
}

} // namespace lopt
