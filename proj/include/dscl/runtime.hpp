#pragma once

// Process-level tuning for the executables. The autodiff tape allocates and frees many
// mid-sized buffers per step; glibc's defaults hand them back to the kernel each time,
// which costs about a third of the runtime in page faults.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dscl {

inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace dscl
