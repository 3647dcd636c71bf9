#include "unfoldir/common.hpp"

#include <cstdio>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace unfoldir {

void parallel_chunks(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& f) {
    if (n <= 0) return;
    if (grain < 1) grain = 1;
    int64_t chunks = (n + grain - 1) / grain;
    if (chunks == 1) {
        f(0, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < chunks; ++c) {
        int64_t lo = c * grain;
        int64_t hi = lo + grain < n ? lo + grain : n;
        f(lo, hi);
    }
}

std::string to_hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace unfoldir
