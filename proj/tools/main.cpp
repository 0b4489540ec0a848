#include "metadiv/cli.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Graph nodes allocate and free many large buffers; keeping them on the heap
  // avoids an mmap, page-fault and munmap cycle per node.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return metadiv::cli::run(argc, argv);
}
